"""Run the full experiment matrix and write a summary table plus reports.

    python3 scripts/run_benchmark.py --out runs/benchmark [--config cfg.json]
"""

import argparse
import json
import logging
from pathlib import Path

from lastmeter.benchmark import run_benchmark
from lastmeter.config import RunConfig
from lastmeter.metrics import bar_chart_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    ap.add_argument("--variants", nargs="+", default=["score", "attention"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = RunConfig.load(args.config)
    res = run_benchmark(cfg, tuple(args.variants))
    args.out.mkdir(parents=True, exist_ok=True)
    for k, rep in res.reports.items():
        (args.out / (k.replace("/", "_") + ".json")).write_text(rep.to_json() + "\n")
    groups = {k: {"edge": r.edge_success_rate, "object": r.object_success_rate} for k, r in res.reports.items()}
    (args.out / "summary.svg").write_text(bar_chart_svg(groups))
    (args.out / "summary.txt").write_text(res.table() + "\n")
    (args.out / "timings.json").write_text(json.dumps(res.timings, indent=2, sort_keys=True) + "\n")
    print(res.table())
    print(f"thresholds: {res.thresholds}")
    print(f"total {res.timings['total']:.0f}s")


if __name__ == "__main__":
    main()
