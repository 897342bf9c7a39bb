import os, sys

CUR_DIR = os.path.abspath(__file__ + "/..")
sys.path.insert(0, os.path.join(CUR_DIR, "src"))

import argparse
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

import funcspace as fs
from funcspace.config import load_config
from funcspace.embsearch import search_optimal, tradeoff_scan, knee_point
from funcspace.funcae import best_decoder_mpe, eval_mpe_grid, train_autoencoder
from funcspace.genlab import generate_corpus, grid_inputs, make_search_dataset, random_mlp_with_count
from funcspace.loggers import TableLogger
from funcspace.persist import save_checkpoint, save_table
from funcspace.utilities import seed_everything

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s: %(message)s")

parser = argparse.ArgumentParser(description="Desk-scale run: corpus, autoencoder, evaluation, search.")
parser.add_argument("--config", default=os.path.join(CUR_DIR, "configs", "desk.yaml"))
parser.add_argument("--networks", type=int, default=20000)
parser.add_argument("--test-networks", type=int, default=1000)
parser.add_argument("--out", type=Path, default=Path("desk_run"))


def launch(args):
    cfg = load_config(args.config)
    seed_everything(cfg.seed)
    tables = TableLogger()

    corpus = generate_corpus(cfg.gen, args.networks, threads=cfg.threads or os.cpu_count())
    params = fs.MultiScaleAutoencoder(cfg.architecture)
    baseline = fs.MultiScaleAutoencoder(cfg.architecture)
    params, losses = train_autoencoder(cfg.train, corpus, params, checkpoint_dir=args.out / "ckpt")
    save_table(losses, args.out / "losses.csv")

    inputs = grid_inputs(dims=cfg.gen.input_dim)
    held_out = generate_corpus(replace(cfg.gen, seed=cfg.gen.seed + 1), args.test_networks)
    grid = eval_mpe_grid(params, held_out, inputs)
    best = best_decoder_mpe(params, held_out, inputs)
    tables.print_mpe_grid(grid, best)
    tables.print_mpe_grid(eval_mpe_grid(baseline, held_out, inputs), best_decoder_mpe(baseline, held_out, inputs))
    save_table(grid, args.out / "mpe.csv", index=True)

    # Search datasets need an autoencoder of the same activation; the desk corpus is sigmoid-based.
    generator = random_mlp_with_count(
        replace(cfg.gen, hidden_min=1), [5], 17, np.random.default_rng(cfg.seed)
    )
    dataset = make_search_dataset(generator, n=20000, rng=np.random.default_rng(cfg.seed))
    result = search_optimal(params, dataset, cfg.search)
    tables.print_search_summary(result.to_frame())
    save_table(result.to_frame(), args.out / "search.csv")

    curve = tradeoff_scan(params, dataset, result.best.decoder, [0.0, 1e-3, 1e-2, 1e-1], cfg.search)
    tables.print_tradeoff(curve.points, knee_point(curve))
    save_table(curve.points, args.out / "tradeoff.csv")
    save_checkpoint(params, args.out / "ckpt")
    return grid


if __name__ == "__main__":
    job_results = launch(parser.parse_args())
