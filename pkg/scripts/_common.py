"""Shared setup for the experiment scripts: toy data plus a cached FP model."""

import argparse
from pathlib import Path

from mremq.checkpoint import load_model, save_model
from mremq.config import RunConfig
from mremq.data import gen_synthetic_task, sample_calibration
from mremq.evaluate import accuracy
from mremq.model import Bits
from mremq.train import TrainConfig, train_fp


def base_parser(doc):
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--fp", default="runs/fp.mrmq", help="FP checkpoint; trained and saved if missing")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--calib-size", type=int, default=4096)
    p.add_argument("--eval-rows", type=int, default=1024)
    return p


def seeds(args):
    return [int(s) for s in args.seeds.split(",")]


def setup(args):
    c = RunConfig()
    ds = gen_synthetic_task(c.vocab, c.max_seq_len, c.num_train, c.num_held, c.seed)
    path = Path(args.fp)
    if path.is_file():
        fp = load_model(path)
    else:
        print(f"training FP model -> {path}")
        fp = train_fp(c.model_config(), ds, c.fp_steps, c.fp_lr, c.fp_batch_size, c.seed)
        save_model(path, fp)
    print(f"FP held-out accuracy {accuracy(fp, ds.held_tokens, ds.held_labels):.4f}")
    return ds, fp


def calib(ds, args, seed):
    return sample_calibration(ds, args.calib_size, seed).tokens


def tcfg(args, bits, seed, **kw):
    return TrainConfig(steps=args.steps, lr=args.lr, bits=Bits.parse(bits), seed=seed, **kw)
