"""Train the LLM, SLM baselines and bundles per seed; print per-seed rows and the mean."""
import argparse
import json

from llm2slm.experiments import QualityConfig, quality_trend


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    ap.add_argument("--fusion", choices=("add", "replace"), default="add")
    args = ap.parse_args()
    cfg = QualityConfig(seeds=tuple(int(s) for s in args.seeds.split(",")), fusion=args.fusion)
    result = quality_trend(cfg, log=lambda row: print(json.dumps(row), flush=True))
    print(json.dumps({"mean": result["mean"]}, indent=2))


if __name__ == "__main__":
    main()
