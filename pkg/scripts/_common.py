"""Shared desk-scale settings for the experiment scripts."""
import argparse
from pathlib import Path

from iccr import datagen, models, training


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--seqs", type=int, default=6400, help="evaluation prompts per length")
    p.add_argument("--seed", type=int, default=1)
    return p


def model_cfg(args, variant="full") -> models.TransformerConfig:
    return models.TransformerConfig(layers=args.layers, heads=args.heads, hidden=args.hidden,
                                    input_dim=1, max_context=102, variant=variant)


def gen_cfg(args, **kw) -> datagen.GenConfig:
    return datagen.GenConfig(fixed_z=1, seed=args.seed, **kw)


def train_cfg(args) -> training.TrainConfig:
    return training.TrainConfig(steps=args.steps, lr=args.lr, checkpoint_every=0)


def progress(step, loss):
    if step % 500 == 0:
        print(f"  step {step:6d}  train MSE {loss:8.3f}", flush=True)
