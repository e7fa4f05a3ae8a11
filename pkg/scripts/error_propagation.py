"""Per-layer reconstruction error of REM and MREM-P at one bit setting, written as CSV."""

import csv
from dataclasses import replace

from _common import base_parser, calib, seeds, setup, tcfg
from mremq.evaluate import layer_errors
from mremq.parallel import train_mrem_p
from mremq.train import equal_budget_rem_steps, train_rem


def main():
    p = base_parser(__doc__)
    p.add_argument("--bits", default="2,2,8")
    p.add_argument("--out", default="runs/error_propagation.csv")
    args = p.parse_args()
    ds, fp = setup(args)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "layer", "rem", "mrem_p"])
        for s in seeds(args):
            cfg, cal = tcfg(args, args.bits, s), calib(ds, args, s)
            ev = cal[: args.eval_rows]
            rem = layer_errors(fp, train_rem(fp, cal, replace(cfg, rem_steps=equal_budget_rem_steps(fp.cfg, cfg))), ev)
            mp = layer_errors(fp, train_mrem_p(fp, cal, cfg).model, ev)
            for l, (a, b) in enumerate(zip(rem[:-1], mp[:-1])):
                w.writerow([s, l, a, b])
                print(f"seed {s} layer {l}: rem {a:.5g}  mrem-p {b:.5g}", flush=True)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
