__version__ = "0.1.0"

import logging

logging.getLogger("funcspace").addHandler(logging.NullHandler())

from . import utilities
from . import diffcore
from . import netrep
from . import genlab
from . import callbacks
from . import loggers
from . import models
from . import objectives
from . import optimizers
from . import scenarios
from . import funcae
from . import embsearch
from . import persist
from . import config
from . import cli

from .netrep import MlpSpec, ActivationKind
from .genlab import GenConfig, FunctionalDataset, Corpus
from .models import ArchitectureConfig, MultiScaleAutoencoder
from .funcae import TrainConfig, train_autoencoder
from .embsearch import SearchConfig, search_optimal
