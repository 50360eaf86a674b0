"""Projector-only vs prompt tuning, Add vs Replace fusion, and extraction depth of a decoder-only LLM."""
import argparse
import json

from llm2slm.experiments import AblationConfig, QualityConfig, ablations


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0", help="comma-separated seeds")
    args = ap.parse_args()
    cfg = AblationConfig(quality=QualityConfig(seeds=tuple(int(s) for s in args.seeds.split(","))))
    result = ablations(cfg, log=lambda row: print(json.dumps(row), flush=True))
    print(json.dumps({"mean": result["mean"]}, indent=2))


if __name__ == "__main__":
    main()
