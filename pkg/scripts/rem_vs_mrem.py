"""REM against MREM-S under an equal optimizer-step budget: logit MSE to FP on held-out data."""

from dataclasses import replace

import numpy as np

from _common import base_parser, calib, seeds, setup, tcfg
from mremq.evaluate import logit_mse
from mremq.train import equal_budget_rem_steps, train_mrem_s, train_rem


def main():
    p = base_parser(__doc__)
    p.add_argument("--bits", default="4,4,8;2,2,8;2,2,4")
    args = p.parse_args()
    ds, fp = setup(args)
    held = ds.held_tokens
    print(f"{'bits':<8}{'seed':>5}{'rem':>12}{'mrem-s':>12}")
    for bits in args.bits.split(";"):
        wins = []
        for s in seeds(args):
            cfg = tcfg(args, bits, s)
            cal = calib(ds, args, s)
            r = logit_mse(fp, train_rem(fp, cal, replace(cfg, rem_steps=equal_budget_rem_steps(fp.cfg, cfg))), held)
            m = logit_mse(fp, train_mrem_s(fp, cal, cfg), held)
            wins.append(m < r)
            print(f"{bits:<8}{s:>5}{r:>12.5g}{m:>12.5g}", flush=True)
        print(f"{bits}: MREM-S better in {int(np.sum(wins))}/{len(wins)} seeds")


if __name__ == "__main__":
    main()
