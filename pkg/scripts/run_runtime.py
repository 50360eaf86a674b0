"""Time the SLM, the bundle and the LLM alone and print the ratios."""
import argparse
import json

from llm2slm.bench import write_records
from llm2slm.experiments import RuntimeConfig, runtime_convergence


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=int, default=RuntimeConfig.rounds)
    ap.add_argument("--csv", help="write the raw timing records here")
    args = ap.parse_args()
    result = runtime_convergence(RuntimeConfig(rounds=args.rounds))
    if args.csv:
        write_records(result["records"], args.csv)
    summary = {k: v for k, v in result.items() if k != "records"}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
