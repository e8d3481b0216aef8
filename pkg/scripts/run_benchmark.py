"""Run the synthetic 32 -> 64 beam benchmark and print the comparison tables.

    python3 scripts/run_benchmark.py [--quick] [--json out.json]

``--quick`` shrinks every split and the iteration budget for a smoke run;
its numbers are not meaningful.
"""
import argparse
import json
import logging
from dataclasses import replace

from saluda.benchmark import BenchmarkSpec, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--no-selftrain", action="store_true")
    ap.add_argument("--json", help="write per-seed results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = BenchmarkSpec()
    if args.quick:
        spec = replace(spec, source_frames=6, target_frames=6, target_val_frames=4, source_val_frames=2,
                       azimuth_steps=36, train=replace(spec.train, total_iterations=40),
                       selftrain=replace(spec.selftrain, epochs=1), grid=(0.0, 1e-2, 1e-1))
    res = run_benchmark(spec, log=logging.info, selftrain=not args.no_selftrain)
    print(res.summary())
    if args.json:
        doc = {
            "seeds": list(res.seeds),
            "source_only": res.source_only, "mixed_bn": res.mixed_bn, "saluda": res.saluda,
            "selftrain": res.selftrain, "entropy_lambda": res.entropy_lam, "oracle_lambda": res.oracle_lam,
            "sweep": [{"lambda": lam, "seed": s, **v} for (lam, s), v in sorted(res.sweep.items())],
            "frozen_bn_identical": res.frozen_bn_identical, "timings": res.timings,
        }
        with open(args.json, "w") as f:
            json.dump(doc, f, indent=2)


if __name__ == "__main__":
    main()
