"""
This module contains every file format of the package and the run manifests.

Formats:

- MLP spec: YAML document ``{format: funcspace-mlp, version: 1, activation, input_dim, output_dim,
  hidden_sizes, masks, weights}``; weights are nested row-major lists of 64-bit reals.
- Dataset ``FDS1``: magic ``FDS1``, six unsigned 32-bit little-endian integers
  ``n, i, o, train, val, test``, then ``n`` rows of 32-bit little-endian reals, inputs then outputs.
  A dataset without splits is stored with all three split counts at zero.
- Checkpoint: a directory with ``manifest.yaml`` (architecture, tensor table, embedding statistics)
  and ``tensors.bin`` (32-bit little-endian reals, row-major, in manifest order).
- Tables: CSV through `pandas`.
- Corpus: a directory with one spec file per network, the shared grid as ``grid.fds`` and ``corpus.yaml``.

Stored reals in binary files are 32-bit while computations are 64-bit; widening on load is exact.
Writers hold a `filelock` lock on ``<path>.lock``.

"""

import hashlib
import logging
import platform
import struct
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import filelock
import numpy as np
import pandas as pd
import torch
import yaml

from .genlab import Corpus, FunctionalDataset
from .models import ArchitectureConfig, MultiScaleAutoencoder
from .netrep import MlpSpec

logger = logging.getLogger("funcspace.persist")

PathLike = Union[str, Path]

SPEC_FORMAT = "funcspace-mlp"
CHECKPOINT_FORMAT = "funcspace-checkpoint"
CORPUS_FORMAT = "funcspace-corpus"
MANIFEST_FORMAT = "funcspace-run"
FORMAT_VERSION = 1

FDS_MAGIC = b"FDS1"
FDS_HEADER = struct.Struct("<4s6I")
FLOAT32_LE = np.dtype("<f4")


class FormatError(ValueError):
    """A file does not follow its declared format; names what was expected and what was found."""

    def __init__(self, what, expected, found, offset=None, path=None):
        self.what = what
        self.expected = expected
        self.found = found
        self.offset = offset
        self.path = path
        message = f"Invalid {what}: expected {expected!r}, found {found!r}"
        if offset is not None:
            message += f" at byte offset {offset}"
        if path is not None:
            message += f" in {path}"
        super().__init__(message + ".")


@contextmanager
def exclusive(path: PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with filelock.FileLock(str(path) + ".lock"):
        yield path


def read_yaml(path: PathLike):
    with open(path, "r") as f:
        document = yaml.safe_load(f)
    if not isinstance(document, dict):
        raise FormatError("document", "a mapping", type(document).__name__, path=path)
    return document


def dump_yaml(document, path: PathLike):
    with open(path, "w") as f:
        yaml.safe_dump(document, f, sort_keys=False, default_flow_style=None)
    return Path(path)


def write_yaml(document, path: PathLike):
    with exclusive(path) as path:
        return dump_yaml(document, path)


def _check_header(document, expected_format, path):
    found = document.get("format")
    if found != expected_format:
        raise FormatError("format", expected_format, found, path=path)
    version = document.get("version")
    if version != FORMAT_VERSION:
        raise FormatError("version", FORMAT_VERSION, version, path=path)


def spec_to_dict(spec: MlpSpec) -> dict:
    spec = spec.to_numpy()
    return {
        "format": SPEC_FORMAT,
        "version": FORMAT_VERSION,
        "activation": spec.activation.value,
        "input_dim": spec.input_dim,
        "output_dim": spec.output_dim,
        "hidden_sizes": list(spec.hidden_sizes),
        "masks": [mask.astype(int).tolist() for mask in spec.masks],
        "weights": [weight.tolist() for weight in spec.weights],
    }


def spec_from_dict(document: dict, path=None) -> MlpSpec:
    _check_header(document, SPEC_FORMAT, path)
    try:
        sizes = (document["input_dim"], *document["hidden_sizes"], document["output_dim"])
        weights = [
            np.asarray(weight, dtype=np.float64).reshape(sizes[k], sizes[k + 1])
            for k, weight in enumerate(document["weights"])
        ]
        return MlpSpec(
            activation=document["activation"],
            input_dim=document["input_dim"],
            output_dim=document["output_dim"],
            hidden_sizes=document["hidden_sizes"],
            weights=weights,
            masks=[np.asarray(mask, dtype=int) != 0 for mask in document["masks"]],
        )
    except KeyError as error:
        raise FormatError("spec field", error.args[0], None, path=path) from None


def save_spec(spec: MlpSpec, path: PathLike, lock=True) -> Path:
    """Write `spec`; with ``lock=False`` the caller is expected to hold a lock on the enclosing directory."""
    if not lock:
        return dump_yaml(spec_to_dict(spec), path)
    return write_yaml(spec_to_dict(spec), path)


def load_spec(path: PathLike) -> MlpSpec:
    return spec_from_dict(read_yaml(path), path)


def save_dataset(dataset: FunctionalDataset, path: PathLike) -> Path:
    n, i = dataset.inputs.shape
    o = dataset.outputs.shape[1]
    splits = dataset.splits or (0, 0, 0)
    rows = np.concatenate([dataset.inputs, dataset.outputs], axis=1).astype(FLOAT32_LE)
    with exclusive(path) as path, open(path, "wb") as f:
        f.write(FDS_HEADER.pack(FDS_MAGIC, n, i, o, *splits))
        f.write(rows.tobytes(order="C"))
    return path


def load_dataset(path: PathLike) -> FunctionalDataset:
    data = Path(path).read_bytes()
    if len(data) < FDS_HEADER.size:
        raise FormatError("FDS1 header", f"{FDS_HEADER.size} bytes", f"{len(data)} bytes", offset=len(data), path=path)
    magic, n, i, o, train, val, test = FDS_HEADER.unpack_from(data)
    if magic != FDS_MAGIC:
        raise FormatError("magic", FDS_MAGIC.decode(), magic.decode("latin-1"), offset=0, path=path)
    expected = FDS_HEADER.size + n * (i + o) * FLOAT32_LE.itemsize
    if len(data) < expected:
        raise FormatError("FDS1 payload", f"{expected} bytes", f"{len(data)} bytes", offset=len(data), path=path)
    if len(data) > expected:
        raise FormatError("FDS1 payload", f"{expected} bytes", f"{len(data)} bytes", offset=expected, path=path)
    splits = (train, val, test)
    if splits == (0, 0, 0):
        splits = None
    elif sum(splits) != n:
        raise FormatError("split counts", f"sum {n}", f"sum {sum(splits)}", offset=16, path=path)
    rows = np.frombuffer(data, dtype=FLOAT32_LE, offset=FDS_HEADER.size).reshape(n, i + o)
    rows = rows.astype(np.float64)
    return FunctionalDataset(inputs=rows[:, :i], outputs=rows[:, i:], splits=splits)


def save_checkpoint(params: MultiScaleAutoencoder, directory: PathLike) -> Path:
    directory = Path(directory)
    tensors = []
    offset = 0
    blobs = []
    for name, tensor in params.named_parameters():
        values = tensor.detach().cpu().numpy().astype(FLOAT32_LE)
        tensors.append(
            {"name": name, "offset": offset, "count": int(values.size), "shape": list(values.shape)}
        )
        blobs.append(values.tobytes(order="C"))
        offset += values.nbytes
    statistics = None
    if params.has_statistics:
        statistics = {
            "mean": params.embedding_mean.tolist(),
            "std": params.embedding_std.tolist(),
        }
    architecture = params.architecture
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "activation": params.activation.value,
        "d_z": architecture.d_z,
        "l_max": architecture.l_max,
        "n_max": architecture.n_max,
        "input_dim": architecture.input_dim,
        "output_dim": architecture.output_dim,
        "architecture": architecture.as_dict(),
        "tensors": tensors,
        "embedding_statistics": statistics,
    }
    with exclusive(directory) as directory:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "tensors.bin", "wb") as f:
            for blob in blobs:
                f.write(blob)
        with open(directory / "manifest.yaml", "w") as f:
            yaml.safe_dump(manifest, f, sort_keys=False, default_flow_style=None)
    logger.debug("Checkpoint written to %s (%d bytes of tensors).", directory, offset)
    return directory


def load_checkpoint(directory: PathLike) -> MultiScaleAutoencoder:
    directory = Path(directory)
    manifest_path = directory / "manifest.yaml"
    manifest = read_yaml(manifest_path)
    _check_header(manifest, CHECKPOINT_FORMAT, manifest_path)
    try:
        architecture = ArchitectureConfig(**manifest["architecture"])
        table = manifest["tensors"]
    except (KeyError, TypeError) as error:
        raise FormatError("checkpoint manifest", "architecture and tensor table", str(error), path=manifest_path) from None
    params = MultiScaleAutoencoder(architecture)
    data = (directory / "tensors.bin").read_bytes()
    named = dict(params.named_parameters())
    if [entry["name"] for entry in table] != list(named):
        raise FormatError("tensor table", list(named), [entry["name"] for entry in table], path=manifest_path)
    with torch.no_grad():
        for entry in table:
            start = entry["offset"]
            stop = start + entry["count"] * FLOAT32_LE.itemsize
            if stop > len(data):
                raise FormatError(
                    f"tensor '{entry['name']}'", f"{stop} bytes", f"{len(data)} bytes", offset=len(data), path=directory / "tensors.bin"
                )
            target = named[entry["name"]]
            if tuple(entry["shape"]) != tuple(target.shape):
                raise FormatError(f"shape of '{entry['name']}'", tuple(target.shape), tuple(entry["shape"]), path=manifest_path)
            values = np.frombuffer(data, dtype=FLOAT32_LE, count=entry["count"], offset=start)
            target.copy_(torch.from_numpy(values.astype(np.float64).reshape(target.shape)))
    statistics = manifest.get("embedding_statistics")
    if statistics is not None:
        params.set_statistics(statistics["mean"], statistics["std"])
    return params


def save_table(frame: pd.DataFrame, path: PathLike, index=False) -> Path:
    with exclusive(path) as path:
        frame.to_csv(path, index=index, float_format="%.10g", lineterminator="\n")
    return path


def load_table(path: PathLike, index_col=None) -> pd.DataFrame:
    return pd.read_csv(path, index_col=index_col)


def spec_file_name(index):
    return f"mlp_{index:05d}.yaml"


def save_corpus(corpus: Corpus, directory: PathLike, config: Optional[dict] = None) -> List[Path]:
    """Write every spec, the grid and the index; returns the written files."""
    with exclusive(directory) as directory:
        directory.mkdir(parents=True, exist_ok=True)
        written = [
            dump_yaml(spec_to_dict(spec), directory / spec_file_name(k))
            for k, spec in enumerate(corpus.specs)
        ]
    written.append(
        save_dataset(FunctionalDataset(corpus.inputs, np.empty((len(corpus.inputs), 0))), directory / "grid.fds")
    )
    written.append(write_corpus_index(directory, len(corpus), config))
    return written


def write_corpus_index(directory: PathLike, count, config: Optional[dict] = None) -> Path:
    return write_yaml(
        {
            "format": CORPUS_FORMAT,
            "version": FORMAT_VERSION,
            "count": int(count),
            "grid": "grid.fds",
            "specs": [spec_file_name(k) for k in range(count)],
            "generator": config,
        },
        Path(directory) / "corpus.yaml",
    )


def load_corpus(directory: PathLike) -> Corpus:
    directory = Path(directory)
    index_path = directory / "corpus.yaml"
    index = read_yaml(index_path)
    _check_header(index, CORPUS_FORMAT, index_path)
    if len(index["specs"]) != index["count"]:
        raise FormatError("spec list", index["count"], len(index["specs"]), path=index_path)
    grid = load_dataset(directory / index["grid"]).inputs
    return Corpus([load_spec(directory / name) for name in index["specs"]], grid)


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def source_commit() -> Optional[str]:
    """Commit of the source tree, suffixed with ``+dirty`` for uncommitted changes; None outside a repository."""
    try:
        import git
    except ImportError:
        return None
    try:
        repo = git.Repo(Path(__file__).resolve().parent, search_parent_directories=True)
        commit = repo.head.object.hexsha
        if repo.is_dirty(untracked_files=False):
            commit += "+dirty"
        return commit
    except (git.exc.InvalidGitRepositoryError, git.exc.NoSuchPathError, ValueError):
        return None


@dataclass
class RunContext:
    """What one command read, wrote and was configured with."""

    command: str
    config: dict = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: List[Path] = field(default_factory=list)
    outputs: List[Path] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    started: float = field(default_factory=time.time)

    def add_input(self, *paths):
        self.inputs.extend(Path(path) for path in paths)

    def add_output(self, *paths):
        self.outputs.extend(Path(path) for path in paths)

    @contextmanager
    def timed(self, stage):
        tic = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - tic


def _digests(paths, skip=None):
    digests = {}
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file() and p.suffix != ".lock") if path.is_dir() else [path]
        for item in files:
            if skip is None or item.resolve() != skip:
                digests[str(item)] = file_digest(item)
    return digests


@dataclass
class RunManifest:
    tool_version: str
    command: str
    config: dict
    seeds: Dict[str, int]
    inputs: Dict[str, str]
    outputs: Dict[str, str]
    timings: Dict[str, float]
    python: str
    commit: Optional[str] = None

    def to_dict(self):
        return {
            "format": MANIFEST_FORMAT,
            "version": FORMAT_VERSION,
            "tool_version": self.tool_version,
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": self.timings,
            "python": self.python,
            "commit": self.commit,
        }


def write_manifest(context: RunContext, path: PathLike) -> RunManifest:
    """
    Record digests of every input and output file of `context` in a YAML manifest at `path`.

    Directories are expanded to the files they contain. Timings are the only entries that vary
    between identical reruns.
    """
    from . import __version__

    path = Path(path)
    total = time.time() - context.started
    manifest = RunManifest(
        tool_version=__version__,
        command=context.command,
        config=context.config,
        seeds=dict(context.seeds),
        inputs=_digests(context.inputs),
        outputs=_digests(context.outputs, skip=path.resolve()),
        timings={**{k: round(v, 6) for k, v in context.timings.items()}, "total": round(total, 6)},
        python=f"{platform.python_implementation()} {sys.version.split()[0]}",
        commit=source_commit(),
    )
    write_yaml(manifest.to_dict(), path)
    return manifest


def read_manifest(path: PathLike) -> dict:
    document = read_yaml(path)
    _check_header(document, MANIFEST_FORMAT, path)
    return document
