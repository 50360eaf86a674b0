"""Command-line entry point: ``llm2slm <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--config`` (a JSON file with
optional ``model``, ``train``, ``generation``, ``task`` and ``bench``
sections whose keys mirror the dataclass fields). Explicit flags override
the config file. Usage errors exit with status 2, contract errors with 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench, metrics, tasks
from .bridge import HybridBundle, PlainModel, PromptTunedModel, load_system, save_system
from .decoding import GenerationParams, SpecDecParams, predict, speculative_generate
from .models import ModelConfig, init_checkpoint, truncate_layers
from .tokenizer import BYTE_VOCAB, decode_str, strip_at_eos
from .training import TrainConfig, TrainingError, generate_labels, train

# every library contract error derives from ValueError
CONTRACT_ERRORS = (ValueError, TrainingError)


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _section(args, name: str) -> dict:
    return dict(args.config_data.get(name, {}))


def _build(cls, args, section: str, overrides: dict):
    """Dataclass from config section, then non-None flag overrides."""
    valid = {f.name for f in dataclasses.fields(cls)}
    data = {k: v for k, v in _section(args, section).items() if k in valid}
    data.update({k: v for k, v in overrides.items() if v is not None and k in valid})
    return cls(**data)


def _existing(parser, path) -> Path:
    p = Path(path)
    if not p.exists():
        parser.error(f"file not found: {path}")
    return p


def _read_prompts(parser, args) -> list[str]:
    prompts = list(args.prompt or [])
    if getattr(args, "prompts", None):
        prompts += [r["prompt"] for r in tasks.read_jsonl(_existing(parser, args.prompts))]
    if not prompts:
        parser.error("give --prompt or --prompts")
    return prompts


def _read_texts(path: Path, key: str) -> list[str]:
    if path.suffix == ".jsonl":
        return [r[key] for r in tasks.read_jsonl(path)]
    return path.read_text().splitlines()


def _write_jsonl(records, out) -> None:
    if out is None:
        for r in records:
            print(json.dumps(r, sort_keys=True))
    else:
        tasks.write_jsonl(records, out)


def _gen_params(args) -> GenerationParams:
    return _build(GenerationParams, args, "generation", {
        "strategy": getattr(args, "strategy", None), "max_new_tokens": getattr(args, "max_new_tokens", None),
        "beam_width": getattr(args, "beam_width", None), "top_p": getattr(args, "top_p", None),
        "temperature": getattr(args, "temperature", None), "seed": args.seed})


def _add_gen_flags(p) -> None:
    p.add_argument("--strategy", choices=("greedy", "nucleus", "beam"))
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temperature", type=float)


def _add_model_flags(p) -> None:
    p.add_argument("--arch", choices=("encoder_decoder", "decoder_only"))
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--max-seq-len", type=int)


# --------------------------------------------------------------------------- subcommands


def cmd_data(parser, args) -> int:
    spec = _build(tasks.TaskSpec, args, "task", {
        "kind": args.kind, "alphabet": args.alphabet, "min_len": args.min_len, "max_len": args.max_len,
        "n_train": args.n_train, "n_test": args.n_test, "seed": args.seed})
    train_p, test_p = tasks.write_task(spec, args.out_dir)
    print(json.dumps({"train": str(train_p), "test": str(test_p), "capacity": spec.capacity}))
    return 0


def _train_config(args) -> TrainConfig:
    return _build(TrainConfig, args, "train", {
        "total_steps": args.steps, "micro_batch": args.micro_batch, "accumulation": args.accumulation,
        "lr_base": args.lr, "mode": args.mode, "seed": args.seed,
        "label_source": "llm_generated" if args.labels_from else None})


def _model_config(args) -> ModelConfig:
    return _build(ModelConfig, args, "model", {
        "arch": args.arch, "d_model": args.d_model, "n_layers": args.n_layers, "n_heads": args.n_heads,
        "d_ff": args.d_ff, "max_seq_len": args.max_seq_len})


def cmd_train(parser, args) -> int:
    cfg = _train_config(args)
    records = tasks.read_jsonl(_existing(parser, args.train))
    if args.labels_from:
        teacher = load_system(_existing(parser, args.labels_from))
        records = generate_labels(teacher, [r["prompt"] for r in records], GenerationParams(max_new_tokens=64))
    if args.init:
        base = load_system(_existing(parser, args.init))
    else:
        base = PlainModel(init_checkpoint(_model_config(args), args.seed, role=args.role, vocab=BYTE_VOCAB))
    if cfg.mode in ("llm2slm_full", "projector_only") and not isinstance(base, HybridBundle):
        if not args.llm:
            parser.error(f"mode {cfg.mode} needs --llm or an --init bundle manifest")
        llm = load_system(_existing(parser, args.llm)).slm
        base = HybridBundle.create(llm, base.slm, fusion=args.fusion or "add", extraction_layer=args.extraction_layer,
                                   seed=args.seed)
    elif cfg.mode == "prompt_tuning_baseline" and not isinstance(base, PromptTunedModel):
        base = PromptTunedModel.create(base.slm, args.soft_prompt_len, args.seed)
    result = train(base, records, cfg, trace_path=args.trace)
    save_system(result.system, args.out)
    print(json.dumps({"out": str(args.out), "steps": cfg.total_steps,
                      "final_loss": result.trace[-1][2] if result.trace else None}))
    return 0


def cmd_generate(parser, args) -> int:
    system = load_system(_existing(parser, args.model))
    _write_jsonl(generate_labels(system, _read_prompts(parser, args), _gen_params(args)), args.out)
    return 0


def cmd_eval(parser, args) -> int:
    if args.model:
        if not args.test:
            parser.error("--model needs --test")
        test = tasks.read_jsonl(_existing(parser, args.test))
        refs = [r["target"] for r in test]
        hyps = predict(load_system(_existing(parser, args.model)), [r["prompt"] for r in test], _gen_params(args))
    else:
        if not (args.hyp and args.ref):
            parser.error("give --hyp and --ref, or --model and --test")
        hyps = _read_texts(_existing(parser, args.hyp), "target")
        refs = _read_texts(_existing(parser, args.ref), "target")
    scores = metrics.score_all(hyps, refs, level=args.level)
    rows = metrics.metric_rows(scores, args.split, args.config_id)
    if args.out:
        metrics.write_metric_rows(rows, args.out)
    for r in rows:
        print(f"{r['metric']},{r['value']:.4f},{r['split']},{r['config_id']}")
    return 0


def cmd_bench(parser, args) -> int:
    system = load_system(_existing(parser, args.model))
    b = _section(args, "bench")
    rec = bench.measure(system, args.m or b.get("m", 100), args.n or b.get("n", 100), args.reps or b.get("reps", 5),
                        args.warmup or b.get("warmup", 2), config_id=args.config_id or Path(args.model).stem,
                        seed=args.seed)
    if args.out:
        bench.write_records([rec], args.out)
    print(json.dumps(dataclasses.asdict(rec)))
    return 0


def cmd_sweep(parser, args) -> int:
    systems = {}
    for item in args.model:
        cid, _, path = item.partition("=")
        if not path:
            cid, path = Path(item).stem, item
        systems[cid] = load_system(_existing(parser, path))
    recs = bench.sweep(systems, _ints(args.ns), args.m, args.reps, args.warmup, path=args.out)
    for r in recs:
        print(f"{r.config_id},{r.n},{r.ms_per_token:.4f}")
    return 0


def cmd_specdec(parser, args) -> int:
    target = load_system(_existing(parser, args.target))
    draft = load_system(_existing(parser, args.draft))
    params = _gen_params(args)
    rows = []
    for prompt in _read_prompts(parser, args):
        spec = SpecDecParams(args.gamma)
        ids = speculative_generate(target, draft, prompt, spec, params)
        rows.append({"prompt": prompt, "target": decode_str(target.out_vocab, strip_at_eos(ids)),
                     "n": len(ids), **spec.stats})
    _write_jsonl(rows, args.out)
    return 0


def cmd_ablate(parser, args) -> int:
    system = load_system(_existing(parser, args.model))
    train_recs = tasks.read_jsonl(_existing(parser, args.train)) if args.train else None
    test = tasks.read_jsonl(_existing(parser, args.test))
    cfg = _build(TrainConfig, args, "train", {"total_steps": args.steps, "seed": args.seed,
                                              "micro_batch": args.micro_batch, "accumulation": args.accumulation})
    if cfg.total_steps and train_recs is None:
        parser.error("--steps > 0 needs --train")
    variants = []
    if args.truncate:
        for depth in _ints(args.truncate):
            if isinstance(system, HybridBundle):
                v = dataclasses.replace(system, slm=truncate_layers(system.slm, depth))
            else:
                v = PlainModel(truncate_layers(system.slm, depth))
            variants.append(("truncate", depth, v))
    if args.extraction_layers:
        if not isinstance(system, HybridBundle):
            parser.error("--extraction-layers needs a bundle manifest")
        for layer in _ints(args.extraction_layers):
            variants.append(("extraction_layer", layer, dataclasses.replace(system, extraction_layer=layer)))
    if args.fusion:
        if not isinstance(system, HybridBundle):
            parser.error("--fusion needs a bundle manifest")
        for mode in _strs(args.fusion):
            variants.append(("fusion", mode, dataclasses.replace(system, fusion=mode)))
    if not variants:
        parser.error("give at least one of --truncate, --extraction-layers, --fusion")
    rows = []
    for grid, value, variant in variants:
        if cfg.total_steps:
            mode = "llm2slm_full" if isinstance(variant, HybridBundle) else "slm_baseline"
            variant = train(variant, train_recs, dataclasses.replace(cfg, mode=mode)).system
        hyps = predict(variant, [r["prompt"] for r in test], _gen_params(args))
        scores = metrics.score_all(hyps, [r["target"] for r in test], level=args.level)
        rows.append({"grid": grid, "value": value, **{k: round(v, 4) for k, v in scores.items()}})
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        print("grid,value,bleu,rouge_l,exact_match", file=out)
        for r in rows:
            print(f"{r['grid']},{r['value']},{r['bleu']:.4f},{r['rouge_l']:.4f},{r['exact_match']:.4f}", file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file with model/train/generation/task/bench sections")

    parser = argparse.ArgumentParser(prog="llm2slm", description="LLM-conditioned small model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", parents=[common], help="generate a synthetic task")
    p.add_argument("--kind", choices=tasks.KINDS)
    p.add_argument("--alphabet")
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", parents=[common], help="train a model, bundle or soft prompt")
    p.add_argument("--train", required=True, help="training JSONL")
    p.add_argument("--out", required=True, help=".l2s checkpoint or .json manifest")
    p.add_argument("--mode", choices=("slm_baseline", "llm2slm_full", "projector_only", "prompt_tuning_baseline"))
    p.add_argument("--init", help="start from this checkpoint or manifest")
    p.add_argument("--llm", help="frozen LLM checkpoint (bundle modes)")
    p.add_argument("--role", choices=("slm", "llm"), default="slm")
    p.add_argument("--fusion", choices=("add", "replace"))
    p.add_argument("--extraction-layer", type=int)
    p.add_argument("--soft-prompt-len", type=int, default=16)
    p.add_argument("--labels-from", help="replace targets with this model's greedy outputs")
    p.add_argument("--steps", type=int)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--accumulation", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--trace", help="loss trace CSV")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="decode prompts")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", action="append")
    p.add_argument("--prompts", help="JSONL with a prompt field")
    p.add_argument("--out")
    _add_gen_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common], help="BLEU / ROUGE-L / exact match")
    p.add_argument("--hyp")
    p.add_argument("--ref")
    p.add_argument("--model")
    p.add_argument("--test")
    p.add_argument("--level", choices=metrics.LEVELS, default="char")
    p.add_argument("--split", default="test")
    p.add_argument("--config-id", default="")
    p.add_argument("--out")
    _add_gen_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time greedy generation")
    p.add_argument("--model", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--config-id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=[common], help="bench over generation lengths")
    p.add_argument("--model", action="append", required=True, help="ID=PATH, repeatable")
    p.add_argument("--ns", default="25,50,100,200,400")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("specdec", parents=[common], help="speculative decoding")
    p.add_argument("--target", required=True)
    p.add_argument("--draft", required=True)
    p.add_argument("--gamma", type=int, default=4)
    p.add_argument("--prompt", action="append")
    p.add_argument("--prompts")
    p.add_argument("--out")
    _add_gen_flags(p)
    p.set_defaults(func=cmd_specdec)

    p = sub.add_parser("ablate", parents=[common], help="truncation / extraction-layer / fusion grids")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train")
    p.add_argument("--truncate")
    p.add_argument("--extraction-layers")
    p.add_argument("--fusion")
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--accumulation", type=int)
    p.add_argument("--level", choices=metrics.LEVELS, default="char")
    p.add_argument("--out")
    _add_gen_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config_data = {}
    if args.config:
        path = _existing(parser, args.config)
        try:
            args.config_data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            parser.error(f"--config is not valid JSON: {err}")
    try:
        return args.func(parser, args)
    except CONTRACT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
