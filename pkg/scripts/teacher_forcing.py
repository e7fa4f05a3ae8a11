"""MREM-P with and without teacher forcing over several step budgets."""

from _common import base_parser, calib, seeds, setup, tcfg
from mremq.evaluate import total_reconstruction_loss
from mremq.parallel import train_mrem_p


def main():
    p = base_parser(__doc__)
    p.add_argument("--bits", default="2,2,4")
    p.add_argument("--budgets", default="250,500,1000")
    args = p.parse_args()
    ds, fp = setup(args)
    print(f"{'steps':>6}{'seed':>5}{'tf':>10}{'no_tf':>10}")
    for T in (int(b) for b in args.budgets.split(",")):
        args.steps = T
        wins = 0
        for s in seeds(args):
            cal = calib(ds, args, s)
            ev = cal[: args.eval_rows]
            a = total_reconstruction_loss(fp, train_mrem_p(fp, cal, tcfg(args, args.bits, s, tf_fraction=0.4)).model, ev)
            b = total_reconstruction_loss(fp, train_mrem_p(fp, cal, tcfg(args, args.bits, s, tf_fraction=0.0)).model, ev)
            wins += a < b
            print(f"{T:>6}{s:>5}{a:>10.4f}{b:>10.4f}", flush=True)
        print(f"T={T}: teacher forcing better in {wins}/{len(seeds(args))} seeds")


if __name__ == "__main__":
    main()
