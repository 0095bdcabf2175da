"""Radial decay of first and second Malliavin-type derivatives of the corrector.

    python3 scripts/derivative_decay.py --L 32 --replicas 64
"""
import argparse
import json
import time
from pathlib import Path

from corrlab.experiments import DEFAULT_LAW, E1
from corrlab.lattice import LatticeShape
from corrlab.reports import json_text
from corrlab.stein import decay_campaign, decay_fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=int, default=32)
    ap.add_argument("--replicas", type=int, default=64)
    ap.add_argument("--r-min", type=float, default=2.0)
    ap.add_argument("--r-max", type=float, default=8.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    t0 = time.perf_counter()
    first, second = decay_campaign(LatticeShape(3, args.L), DEFAULT_LAW, E1, args.replicas, args.seed, threads=args.threads)
    f1 = decay_fit(first, args.r_min, args.r_max)
    f2 = decay_fit(second, args.r_min, args.r_max)
    res = {
        "L": args.L,
        "n_replicas": args.replicas,
        "first": {"table": first.rows(), "fit": f1.to_dict()},
        "second": {"table": second.rows(), "fit": f2.to_dict()},
        "passed": bool(abs(f1.exponent + 2) <= 0.3 and abs(f2.exponent + 3) <= 0.4),
        "wall_time_s": time.perf_counter() - t0,
    }
    out = Path(args.out or Path(__file__).resolve().parents[1] / "results" / f"decay_L{args.L}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json_text(res))
    print(f"first-derivative exponent {f1.exponent:.3f} (expect -2), second {f2.exponent:.3f} (expect -3)")
    print(json.dumps({"passed": res["passed"], "output": str(out)}))


if __name__ == "__main__":
    main()
