"""Variance of the rescaled corrector field along an eps grid, with the fitted-Q prediction.

Full run (about 20 min on one core):
    python3 scripts/variance_convergence.py --L 128 --replicas 200
Smoke run with doubled tolerances:
    python3 scripts/variance_convergence.py --L 64 --eps 0.25 0.125 0.0625 --widen 2
"""
import argparse
import json
import time
from pathlib import Path

from corrlab.experiments import gaussianity_rate, variance_convergence
from corrlab.reports import json_text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=int, default=128)
    ap.add_argument("--eps", type=float, nargs="+", default=[1 / 4, 1 / 8, 1 / 16, 1 / 32])
    ap.add_argument("--replicas", type=int, default=200)
    ap.add_argument("--widen", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default=None, help="JSON output (default results/variance_L<L>.json)")
    args = ap.parse_args()

    t0 = time.perf_counter()
    res = variance_convergence(args.L, args.eps, args.replicas, master_seed=args.seed, threads=args.threads, widen=args.widen)
    res["rate_fit"] = gaussianity_rate(res)
    res["wall_time_s"] = time.perf_counter() - t0
    out = Path(args.out or Path(__file__).resolve().parents[1] / "results" / f"variance_L{args.L}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json_text(res))
    for e, v, ci in zip(res["eps"], res["var"], res["var_ci"]):
        print(f"eps={e:<8g} var={v:.6g}  CI=[{ci[0]:.6g}, {ci[1]:.6g}]")
    print(f"prediction {res['prediction']:.6g} on torus side {res['prediction_torus_side']:g}; "
          f"in CI: {res['prediction_in_ci']}; Cauchy: {res['cauchy']['passed']}")
    print(f"rate fit status {res['rate_fit']['status']}, slope {res['rate_fit']['slope']}")
    print(json.dumps({"passed": res["passed"], "output": str(out)}))


if __name__ == "__main__":
    main()
