"""Final total reconstruction loss of lockstep MREM-P relative to MREM-S."""

import time

from _common import base_parser, calib, seeds, setup, tcfg
from mremq.evaluate import total_reconstruction_loss
from mremq.parallel import train_mrem_p
from mremq.train import train_mrem_s


def main():
    p = base_parser(__doc__)
    p.add_argument("--bits", default="4,4,8;2,2,8;2,2,4")
    args = p.parse_args()
    ds, fp = setup(args)
    print(f"{'bits':<8}{'seed':>5}{'mrem-p':>10}{'mrem-s':>10}{'ratio':>8}{'p_s':>6}{'s_s':>6}")
    for bits in args.bits.split(";"):
        for s in seeds(args):
            cfg, cal = tcfg(args, bits, s), calib(ds, args, s)
            t = time.perf_counter()
            qp = train_mrem_p(fp, cal, cfg).model
            tp = time.perf_counter() - t
            t = time.perf_counter()
            qs = train_mrem_s(fp, cal, cfg)
            ts = time.perf_counter() - t
            ev = cal[: args.eval_rows]
            lp, ls = total_reconstruction_loss(fp, qp, ev), total_reconstruction_loss(fp, qs, ev)
            print(f"{bits:<8}{s:>5}{lp:>10.4f}{ls:>10.4f}{lp / ls:>8.3f}{tp:>6.0f}{ts:>6.0f}", flush=True)


if __name__ == "__main__":
    main()
