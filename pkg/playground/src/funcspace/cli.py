"""
Command line front end.

Every command accepts ``--config FILE`` (YAML merged over the defaults), ``--seed``, ``--threads``
and ``--verbose``/``--quiet``, and writes a run manifest next to its outputs.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure (and audit violations),
4 input/output failure.

"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch

from . import __version__
from .config import CliConfig, ConfigError, explicit_value, load_config, seed_overrides, to_container
from .embsearch import knee_point, search_optimal, tradeoff_scan
from .funcae import best_decoded, best_decoder_mpe, eval_mpe_grid, export_surface, train_autoencoder
from .genlab import (
    Corpus,
    FunctionalDataset,
    GenConfig,
    InfeasibleConfigError,
    gen_corpus,
    generate_corpus,
    grid_inputs,
    make_search_dataset,
    random_mlp_with_count,
    weight_support_ok,
)
from .loggers import TableLogger
from .models import MultiScaleAutoencoder
from .netrep import ActivationKind, disconnected_inputs, non_zero_count
from .persist import (
    FormatError,
    RunContext,
    exclusive,
    load_checkpoint,
    load_corpus,
    load_dataset,
    load_spec,
    read_yaml,
    save_checkpoint,
    save_dataset,
    save_spec,
    save_table,
    spec_file_name,
    write_corpus_index,
    write_manifest,
    write_yaml,
)
from .utilities import resolve_threads, seed_everything

logger = logging.getLogger("funcspace")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def int_list(text):
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got '{text}'.") from None


def float_list(text):
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got '{text}'.") from None


def fixed_input(text):
    """Parse ``dim=3,value=0.5``; `dim` is 1-based."""
    try:
        fields = dict(item.split("=", 1) for item in text.split(","))
        return int(fields["dim"]), float(fields["value"])
    except (ValueError, KeyError):
        raise argparse.ArgumentTypeError(
            f"Expected 'dim=<index>,value=<number>', got '{text}'."
        ) from None


def manifest_path(out: Path):
    """Directories hold ``run_manifest.yaml``; a file ``x.csv`` gets ``x.manifest.yaml`` beside it."""
    if out.suffix == "" or out.is_dir():
        return out / "run_manifest.yaml"
    return out.with_name(f"{out.stem}.manifest.yaml")


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
        force=True,
    )
    logger.setLevel(level)


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file merged over the default configuration.")
    common.add_argument("--seed", type=int, help="Seed of every random choice of the command.")
    common.add_argument(
        "--threads", type=int, help="Worker threads (default: $FUNCSPACE_THREADS, else all cores)."
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Log debug messages.")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Log warnings and errors only.")

    parser = argparse.ArgumentParser(
        prog="funcspace",
        description="Functional embeddings of sparse MLPs: corpora, autoencoder training, embedding search.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen = commands.add_parser("gen-mlps", parents=[common], help="Generate a corpus of random sparse MLPs.")
    gen.add_argument("--activation", help="sigmoid, leaky_relu or linear.")
    gen.add_argument("--count", type=int, required=True, help="Number of networks.")
    gen.add_argument("--depth", type=int, help="Generate only networks with this many hidden layers.")
    gen.add_argument("--out", type=Path, required=True, help="Output directory.")
    gen.set_defaults(handler=cmd_gen_mlps)

    audit = commands.add_parser("audit", parents=[common], help="Check reachability and weight supports of a corpus.")
    audit.add_argument("--data", type=Path, required=True, help="Corpus directory.")
    audit.add_argument("--out", type=Path, required=True, help="CSV report, one row per network.")
    audit.set_defaults(handler=cmd_audit)

    data = commands.add_parser("make-data", parents=[common], help="Build a search dataset from a random network.")
    data.add_argument("--activation", help="sigmoid, leaky_relu or linear.")
    data.add_argument("--hidden", type=int_list, default=[5], help="Hidden sizes, e.g. 5,5.")
    data.add_argument("--nonzero", type=int, required=True, help="Exact non-zero weight count.")
    data.add_argument("--rows", type=int, default=100000, help="Rows, split 5:3:2 into train/val/test.")
    data.add_argument("--out", type=Path, required=True, help="Output FDS1 file.")
    data.set_defaults(handler=cmd_make_data)

    train = commands.add_parser("train-ae", parents=[common], help="Train the multi-scale autoencoder.")
    train.add_argument("--data", type=Path, required=True, help="Corpus directory.")
    train.add_argument("--loss", help="'min' or 'p:<float>'.")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch", type=int, dest="batch_size")
    train.add_argument("--lr", type=float)
    train.add_argument("--optimizer", choices=["adam", "sgd"])
    train.add_argument("--d-z", type=int, dest="d_z", help="Embedding dimension.")
    train.add_argument("--out", type=Path, required=True, help="Checkpoint directory.")
    train.set_defaults(handler=cmd_train_ae)

    evaluate = commands.add_parser("eval-ae", parents=[common], help="Median percentage error grid of a checkpoint.")
    evaluate.add_argument("--ckpt", type=Path, required=True)
    evaluate.add_argument("--count", type=int, default=1000, help="Test networks per depth.")
    evaluate.add_argument("--baseline", action="store_true", help="Evaluate untrained parameters of the same architecture.")
    evaluate.add_argument("--activation", help="Expected activation of the checkpoint (default: the checkpoint's own).")
    evaluate.add_argument("--out", type=Path, required=True, help="Output CSV.")
    evaluate.set_defaults(handler=cmd_eval_ae)

    search = commands.add_parser("search", parents=[common], help="Search the embedding space for a dataset.")
    _search_arguments(search)
    search.add_argument("--alpha", type=float, help="Sparsity weight.")
    search.add_argument("--decoders", type=int_list, help="Decoders to search, e.g. 1,2 (default: all).")
    search.add_argument("--out", type=Path, required=True, help="Output directory.")
    search.set_defaults(handler=cmd_search)

    scan = commands.add_parser("scan-alpha", parents=[common], help="Sparsity/accuracy tradeoff of one decoder.")
    _search_arguments(scan)
    scan.add_argument("--alphas", type=float_list, required=True, help="Increasing weights, e.g. 0,1e-3,1e-2.")
    scan.add_argument("--decoder", type=int, required=True)
    scan.add_argument("--tolerance", type=float, default=0.1, help="Relative MPE tolerance of the knee point.")
    scan.add_argument("--out", type=Path, required=True, help="Output CSV.")
    scan.set_defaults(handler=cmd_scan_alpha)

    surface = commands.add_parser("export-surface", parents=[common], help="Output surfaces of two networks as CSV.")
    surface.add_argument("--mlp", type=Path, action="append", required=True, help="Spec file, given once or twice.")
    surface.add_argument("--ckpt", type=Path, help="With a single --mlp, compare it with its best reconstruction.")
    surface.add_argument("--fix", type=fixed_input, default=(3, 0.5), help="Fixed input, e.g. dim=3,value=0.5 (1-based).")
    surface.add_argument("--grid", type=int, default=50)
    surface.add_argument("--out", type=Path, required=True)
    surface.set_defaults(handler=cmd_export_surface)
    return parser


def _search_arguments(parser):
    parser.add_argument("--ckpt", type=Path, required=True)
    parser.add_argument("--data", type=Path, required=True, help="FDS1 dataset with splits.")
    parser.add_argument("--iters", type=int, dest="iterations")
    parser.add_argument("--lr-z", type=float, dest="lr_z")
    parser.add_argument("--lr-t", type=float, dest="lr_t")
    parser.add_argument("--minibatch", type=int, help="Rows per step, 0 for the full train split.")
    parser.add_argument("--restarts", type=int)
    parser.add_argument("--softcount", choices=["per_element", "aggregate"])
    parser.add_argument("--optimizer", choices=["sgd", "adam"])


def effective_config(args) -> CliConfig:
    overrides = seed_overrides(args.seed)
    overrides.setdefault("threads", args.threads)
    section = {
        "gen-mlps": "gen",
        "make-data": "gen",
        "eval-ae": "gen",
        "train-ae": "train",
        "search": "search",
        "scan-alpha": "search",
    }.get(args.command)
    keys = {
        "gen": ["activation"],
        "train": ["loss", "epochs", "batch_size", "lr", "optimizer"],
        "search": ["iterations", "lr_z", "lr_t", "minibatch", "restarts", "softcount", "optimizer", "alpha", "decoders"],
    }.get(section, [])
    flags = {key: getattr(args, key, None) for key in keys}
    if section is not None:
        overrides.setdefault(section, {}).update(flags)
    if getattr(args, "d_z", None) is not None:
        overrides.setdefault("architecture", {})["d_z"] = args.d_z
    if args.command in ("search", "scan-alpha"):
        overrides["search"]["threads"] = args.threads
    return load_config(args.config, overrides)


def _context(args, config: CliConfig):
    return RunContext(
        command=" ".join(["funcspace", *args.argv]),
        config=to_container(config),
        seeds={"seed": config.seed},
    )


def _finish(context: RunContext, out: Path):
    path = manifest_path(out)
    write_manifest(context, path)
    logger.info("Run manifest written to %s.", path)


def cmd_gen_mlps(args, config: CliConfig):
    cfg = config.gen
    threads = resolve_threads(config.threads)
    context = _context(args, config)
    out = args.out
    with exclusive(out) as out:
        out.mkdir(parents=True, exist_ok=True)
        sink = lambda index, spec, dataset: save_spec(spec, out / spec_file_name(index), lock=False)
        with context.timed("generate"):
            count = gen_corpus(cfg, args.count, sink, threads=threads, depth=args.depth)
        grid = grid_inputs(dims=cfg.input_dim)
        save_dataset(FunctionalDataset(inputs=grid, outputs=np.empty((len(grid), 0))), out / "grid.fds")
        write_corpus_index(out, count, to_container(config)["gen"])
    context.add_output(out)
    _finish(context, out)
    return EXIT_OK


def _generator_config(corpus_index_config, fallback):
    if not corpus_index_config:
        return fallback
    return GenConfig(**corpus_index_config)


def cmd_audit(args, config: CliConfig):
    context = _context(args, config)
    corpus = load_corpus(args.data)
    context.add_input(args.data)
    cfg = _generator_config(read_yaml(args.data / "corpus.yaml").get("generator"), config.gen)
    rows = []
    for index, spec in enumerate(corpus.specs):
        missing = disconnected_inputs(spec)
        rows.append(
            dict(
                index=index,
                depth=spec.depth,
                nonzero=non_zero_count(spec),
                connected=not missing,
                disconnected_inputs=" ".join(str(a) for a in missing),
                support_ok=weight_support_ok(spec, cfg),
            )
        )
    report = pd.DataFrame(rows)
    save_table(report, args.out)
    context.add_output(args.out)
    summary = pd.DataFrame(
        [
            dict(
                networks=len(report),
                disconnected=int((~report["connected"]).sum()),
                out_of_support=int((~report["support_ok"]).sum()),
            )
        ]
    )
    TableLogger().print_table(summary, title=f"Audit of {args.data}", showindex=False)
    _finish(context, args.out)
    violations = summary.loc[0, "disconnected"] + summary.loc[0, "out_of_support"]
    if violations:
        logger.error("%d networks violate the generator guarantees.", violations)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_make_data(args, config: CliConfig):
    context = _context(args, config)
    rng = np.random.default_rng([config.seed])
    spec = random_mlp_with_count(config.gen, args.hidden, args.nonzero, rng)
    dataset = make_search_dataset(spec, n=args.rows, rng=rng)
    generator_path = args.out.with_name(f"{args.out.stem}.generator.yaml")
    save_dataset(dataset, args.out)
    save_spec(spec, generator_path)
    context.add_output(args.out, generator_path)
    logger.info(
        "Dataset of %d rows (splits %s) from a %s-based network with %d non-zero weights.",
        len(dataset),
        dataset.splits,
        spec.activation.value,
        non_zero_count(spec),
    )
    _finish(context, args.out)
    return EXIT_OK


def _architecture_for(config: CliConfig, corpus: Corpus):
    if len(corpus) == 0:
        raise ConfigError("The corpus is empty.")
    first = corpus.specs[0]
    architecture = replace(
        config.architecture,
        activation=first.activation.value,
        input_dim=first.input_dim,
        output_dim=first.output_dim,
    )
    deepest = max(spec.depth for spec in corpus.specs)
    widest = max(max(spec.hidden_sizes) for spec in corpus.specs)
    if deepest > architecture.l_max or widest > architecture.n_max:
        raise ConfigError(
            f"The corpus needs l_max >= {deepest} and n_max >= {widest}; the architecture has "
            f"l_max={architecture.l_max}, n_max={architecture.n_max}."
        )
    return architecture.validate()


def cmd_train_ae(args, config: CliConfig):
    context = _context(args, config)
    with context.timed("load"):
        corpus = load_corpus(args.data)
    context.add_input(args.data)
    params = MultiScaleAutoencoder(_architecture_for(config, corpus))
    with context.timed("train"):
        params, losses = train_autoencoder(config.train, corpus, params, checkpoint_dir=args.out)
    save_checkpoint(params, args.out)
    save_table(losses, args.out / "losses.csv")
    context.add_output(args.out)
    TableLogger().print_table(losses, title="Training loss", floatfmt=".6g", showindex=False)
    _finish(context, args.out)
    return EXIT_OK


def _test_corpora(gen, params, count, threads):
    cfg = replace(
        gen,
        activation=params.activation.value,
        input_dim=params.architecture.input_dim,
        output_dim=params.architecture.output_dim,
        n_max=params.n_max,
        l_max=params.l_max,
        hidden_max=min(gen.hidden_max, params.n_max),
        hidden_min=min(gen.hidden_min, gen.hidden_max, params.n_max),
    )
    corpora = {}
    for depth in range(1, params.l_max + 1):
        stream = int(np.random.SeedSequence([gen.seed, depth]).generate_state(1)[0])
        corpora[depth] = generate_corpus(replace(cfg, seed=stream), count, threads, depth).specs
    return corpora


def _check_activation(args, params):
    """A checkpoint is only evaluated on networks of the activation it was trained on."""
    requested = explicit_value("gen.activation", args.config, {"gen": {"activation": args.activation}})
    if requested is not None and ActivationKind.parse(requested) is not params.activation:
        raise ConfigError(
            f"The checkpoint {args.ckpt} encodes {params.activation.value}-based networks, "
            f"but the configured activation is {ActivationKind.parse(requested).value}."
        )


def cmd_eval_ae(args, config: CliConfig):
    context = _context(args, config)
    params = load_checkpoint(args.ckpt)
    context.add_input(args.ckpt)
    _check_activation(args, params)
    if args.baseline:
        params = MultiScaleAutoencoder(params.architecture)
        logger.info("Evaluating freshly initialised parameters (init seed %d).", params.architecture.init_seed)
    threads = resolve_threads(config.threads)
    inputs = grid_inputs(dims=params.architecture.input_dim)
    with context.timed("generate"):
        corpora = _test_corpora(config.gen, params, args.count, threads)
    with context.timed("evaluate"):
        grid = eval_mpe_grid(params, corpora, inputs)
        best = best_decoder_mpe(params, corpora, inputs)
    best_path = args.out.with_name(f"{args.out.stem}_best.csv")
    save_table(grid, args.out, index=True)
    save_table(best.rename_axis("encoder").reset_index(), best_path)
    context.add_output(args.out, best_path)
    TableLogger().print_mpe_grid(grid, best)
    _finish(context, args.out)
    return EXIT_OK


def _search_inputs(args, context):
    params = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    context.add_input(args.ckpt, args.data)
    return params, dataset


def cmd_search(args, config: CliConfig):
    context = _context(args, config)
    params, dataset = _search_inputs(args, context)
    with context.timed("search"):
        result = search_optimal(params, dataset, config.search)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    summary = result.to_frame()
    written = [save_table(summary, out / "summary.csv"), save_table(result.losses(), out / "losses.csv")]
    for decoder in result:
        written.append(save_spec(decoder.spec, out / f"D{decoder.decoder}.yaml"))
    written.append(
        write_yaml(
            {
                "baseline_mpe": float(result.baseline_mpe),
                "best_decoder": f"D{result.best.decoder}",
                "decoders": [
                    dict(
                        decoder=f"D{d.decoder}",
                        mpe=float(d.mpe),
                        val_mpe=float(d.val_mpe),
                        nonzero=int(d.nonzero),
                        t=float(d.t),
                        restart=int(d.restart),
                        diverged=bool(d.diverged),
                        summary=d.summary,
                        spec=f"D{d.decoder}.yaml",
                    )
                    for d in result
                ],
            },
            out / "summary.yaml",
        )
    )
    context.add_output(*written)
    TableLogger().print_search_summary(summary)
    logger.info("Constant-predictor baseline MPE: %.2f%%", 100.0 * result.baseline_mpe)
    _finish(context, out)
    return EXIT_OK


def cmd_scan_alpha(args, config: CliConfig):
    context = _context(args, config)
    params, dataset = _search_inputs(args, context)
    with context.timed("scan"):
        curve = tradeoff_scan(
            params, dataset, args.decoder, args.alphas, config.search, dataset_name=str(args.data)
        )
    save_table(curve.points, args.out)
    context.add_output(args.out)
    knee = knee_point(curve, args.tolerance)
    TableLogger().print_tradeoff(curve.points, knee)
    _finish(context, args.out)
    return EXIT_OK


def cmd_export_surface(args, config: CliConfig):
    context = _context(args, config)
    dim, value = args.fix
    if len(args.mlp) not in (1, 2):
        raise ConfigError("Give --mlp once (with --ckpt) or twice.")
    spec_a = load_spec(args.mlp[0])
    context.add_input(args.mlp[0])
    if len(args.mlp) == 2:
        spec_b = load_spec(args.mlp[1])
        context.add_input(args.mlp[1])
    elif args.ckpt is not None:
        params = load_checkpoint(args.ckpt)
        context.add_input(args.ckpt)
        spec_b = best_decoded(params, spec_a, grid_inputs(dims=spec_a.input_dim))
    else:
        raise ConfigError("A single --mlp needs --ckpt to compare against its reconstruction.")
    if not 1 <= dim <= spec_a.input_dim:
        raise ConfigError(f"Fixed input dim={dim} is not within 1..{spec_a.input_dim}.")
    frame = export_surface(spec_a, spec_b, fixed_dim=dim - 1, fixed_value=value, grid_n=args.grid)
    save_table(frame, args.out)
    context.add_output(args.out)
    _finish(context, args.out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    configure_logging(args.verbose, args.quiet)
    try:
        config = effective_config(args)
        threads = resolve_threads(config.threads)
        torch.set_num_threads(threads)
        seed_everything(config.seed)
        logger.debug("Effective configuration: %s", to_container(config))
        return args.handler(args, config)
    except FormatError as error:
        logger.error("%s", error)
        return EXIT_IO
    except (ConfigError, InfeasibleConfigError, ValueError) as error:
        logger.error("%s", error)
        return EXIT_USAGE
    except ArithmeticError as error:
        logger.error("Numerical failure: %s", error)
        return EXIT_NUMERIC
    except OSError as error:
        logger.error("I/O failure: %s", error)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
