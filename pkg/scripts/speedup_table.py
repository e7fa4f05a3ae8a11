"""Tick accounting for MREM-P, sequential MREM and a GPipe-style pipeline."""

import argparse

from mremq.parallel import simulate_speedup


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--t0", type=int, default=4)
    args = p.parse_args()
    print(f"{'N':>3}{'M':>4}{'mrem-p':>9}{'seq':>8}{'gpipe':>10}{'x_mremp':>9}{'x_gpipe':>9}")
    for N in (1, 2, 4, 8):
        for M in (1, 4, 16):
            r = simulate_speedup(N, args.steps, args.t0, M)
            print(f"{N:>3}{M:>4}{r.mrem_p_ticks:>9}{r.sequential_ticks:>8}{float(r.gpipe_ticks):>10.1f}"
                  f"{r.speedup:>9.2f}{r.gpipe_speedup:>9.2f}")


if __name__ == "__main__":
    main()
