"""Desk-scale experiments: runtime convergence, quality trend and ablations.

Each runner returns plain dicts so the acceptance suite, the scripts and the
CLI can print or serialize them directly.
"""
from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass, field

from . import bench
from .bridge import HybridBundle, PromptTunedModel
from .decoding import GenerationParams, predict
from .metrics import score_all
from .models import ModelConfig, init_checkpoint, param_count
from .tasks import TaskSpec, generate_task
from .training import TrainConfig, train

# --------------------------------------------------------------------------- runtime convergence


@dataclass
class RuntimeConfig:
    llm: ModelConfig = field(default_factory=lambda: ModelConfig("encoder_decoder", 192, 4, 4, 768, max_seq_len=400))
    slm: ModelConfig = field(default_factory=lambda: ModelConfig("encoder_decoder", 64, 2, 4, 256, max_seq_len=400))
    m: int = 100
    ns: tuple[int, ...] = (128, 256)
    rounds: int = 9
    seed: int = 0


def runtime_convergence(cfg: RuntimeConfig = RuntimeConfig()) -> dict:
    """ms/token ratios of the bundle against the SLM and the LLM alone (untrained weights; timing only).

    Systems are timed in alternation and each ratio is the median of per-round
    ratios, so machine-speed drift between runs cancels.
    """
    t0 = time.perf_counter()
    llm = init_checkpoint(cfg.llm, cfg.seed, "llm")
    slm = init_checkpoint(cfg.slm, cfg.seed + 1)
    systems = {"slm": slm, "llm2slm": HybridBundle.create(llm, slm, seed=cfg.seed + 2), "llm": llm}
    times = bench.interleaved(systems, cfg.ns, m=cfg.m, rounds=cfg.rounds, seed=cfg.seed)

    def ratio(num: str, den: str, n: int) -> float:
        return statistics.median(a / b for a, b in zip(times[num, n], times[den, n]))

    return {
        "param_ratio": param_count(cfg.llm) / param_count(cfg.slm),
        "param_ratio_with_embeddings": param_count(cfg.llm, True) / param_count(cfg.slm, True),
        "bundle_over_slm": {n: ratio("llm2slm", "slm", n) for n in cfg.ns},
        "llm_over_bundle": {n: ratio("llm", "llm2slm", n) for n in cfg.ns},
        "records": [bench.record_from_times(systems[k], v, cfg.m, n, k) for (k, n), v in times.items()],
        "seconds": time.perf_counter() - t0,
    }


# --------------------------------------------------------------------------- quality trend


def _default_task(seed: int = 0) -> TaskSpec:
    return TaskSpec("keyed_substitution_translation", alphabet="abcdefghijkl", min_len=3, max_len=8, seed=seed,
                    n_train=6000, n_test=200)


@dataclass
class QualityConfig:
    llm: ModelConfig = field(default_factory=lambda: ModelConfig("encoder_decoder", 64, 2, 4, 256, max_seq_len=64))
    slm: ModelConfig = field(default_factory=lambda: ModelConfig("encoder_decoder", 32, 2, 4, 128, max_seq_len=64))
    shallow_layers: int = 1
    llm_steps: int = 300
    slm_steps: int = 800
    micro_batch: int = 128
    seeds: tuple[int, ...] = (0, 1, 2)
    fusion: str = "add"


def evaluate(system, test, max_new_tokens: int) -> dict[str, float]:
    hyps = predict(system, [r["prompt"] for r in test], GenerationParams(max_new_tokens=max_new_tokens))
    return score_all(hyps, [r["target"] for r in test])


def _train_cfg(steps: int, micro_batch: int, seed: int, mode: str) -> TrainConfig:
    return TrainConfig(total_steps=steps, micro_batch=micro_batch, accumulation=1, seed=seed, mode=mode)


def train_reference_llm(cfg: ModelConfig, train_set, steps: int, micro_batch: int, seed: int):
    """The large model is trained on the task first and then frozen."""
    ck = init_checkpoint(cfg, 100 + seed, "llm")
    out = train(ck, train_set, _train_cfg(steps, micro_batch, seed, "slm_baseline")).system.slm
    return dataclasses.replace(out, role="llm")


def quality_trend(cfg: QualityConfig = QualityConfig(), log=None) -> dict:
    """Per-seed metrics of the LLM, SLM baselines and bundles at two SLM depths, plus seed means."""
    per_seed = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        task = _default_task(seed)
        train_set, test_set = generate_task(task)
        max_new = task.max_len + 2
        llm = train_reference_llm(cfg.llm, train_set, cfg.llm_steps, cfg.micro_batch, seed)
        row = {"seed": seed, "llm": evaluate(llm, test_set, max_new)}
        for tag, depth in (("shallow", cfg.shallow_layers), ("full", cfg.slm.n_layers)):
            slm_cfg = dataclasses.replace(cfg.slm, n_layers=depth)
            slm = init_checkpoint(slm_cfg, 200 + seed)
            base = train(slm, train_set, _train_cfg(cfg.slm_steps, cfg.micro_batch, seed, "slm_baseline")).system
            bundle = HybridBundle.create(llm, slm, fusion=cfg.fusion, seed=300 + seed)
            hybrid = train(bundle, train_set, _train_cfg(cfg.slm_steps, cfg.micro_batch, seed, "llm2slm_full")).system
            row[f"slm_{tag}"] = evaluate(base, test_set, max_new)
            row[f"llm2slm_{tag}"] = evaluate(hybrid, test_set, max_new)
        row["seconds"] = time.perf_counter() - t0
        per_seed.append(row)
        if log:
            log(row)
    keys = [k for k in per_seed[0] if isinstance(per_seed[0][k], dict)]
    mean = {k: {m: statistics.fmean(r[k][m] for r in per_seed) for m in per_seed[0][k]} for k in keys}
    return {"per_seed": per_seed, "mean": mean}


# --------------------------------------------------------------------------- ablations


@dataclass
class AblationConfig:
    quality: QualityConfig = field(default_factory=lambda: QualityConfig(seeds=(0,)))
    decoder_llm: ModelConfig = field(default_factory=lambda: ModelConfig("decoder_only", 64, 4, 4, 256,
                                                                         max_seq_len=64))
    pretrain_kind: str = "reversal_translation"
    extraction_layers: tuple[int, ...] = (0, 1, 4)


def matched_prompt_length(d_llm: int, d_slm: int) -> int:
    """Soft-prompt rows whose parameter count is closest to the projector's."""
    projector = d_llm * d_slm + d_slm + d_slm * d_slm + d_slm
    return max(1, round(projector / d_slm))


def ablations(cfg: AblationConfig = AblationConfig(), log=None) -> dict:
    """Projector-only vs prompt tuning, Add vs Replace fusion, and decoder-only LLM extraction depth.

    The frozen-SLM comparisons start from an SLM trained on a different task
    with the same alphabet, so both adapters steer a working model.
    """
    q = cfg.quality
    rows = []
    for seed in q.seeds:
        task = _default_task(seed)
        train_set, test_set = generate_task(task)
        max_new = task.max_len + 2
        pre_task = dataclasses.replace(task, kind=cfg.pretrain_kind)
        pre_train, _ = generate_task(pre_task)
        llm = train_reference_llm(q.llm, train_set, q.llm_steps, q.micro_batch, seed)
        row: dict = {"seed": seed}

        slm0 = init_checkpoint(q.slm, 200 + seed)
        for fusion in ("add", "replace"):
            b = HybridBundle.create(llm, slm0, fusion=fusion, seed=300 + seed)
            out = train(b, train_set, _train_cfg(q.slm_steps, q.micro_batch, seed, "llm2slm_full")).system
            row[f"fusion_{fusion}"] = evaluate(out, test_set, max_new)

        pretrained = train(slm0, pre_train, _train_cfg(q.slm_steps, q.micro_batch, seed, "slm_baseline")).system.slm
        b = HybridBundle.create(llm, pretrained, seed=300 + seed)
        out = train(b, train_set, _train_cfg(q.slm_steps, q.micro_batch, seed, "projector_only")).system
        row["projector_only"] = evaluate(out, test_set, max_new)
        row["projector_params"] = sum(v.size for v in b.bridge.params.values())
        length = matched_prompt_length(q.llm.d_model, q.slm.d_model)
        pt = PromptTunedModel.create(pretrained, length=length, seed=400 + seed)
        out = train(pt, train_set, _train_cfg(q.slm_steps, q.micro_batch, seed, "prompt_tuning_baseline")).system
        row["prompt_tuning"] = evaluate(out, test_set, max_new)
        row["prompt_tuning_params"] = pt.prompt.params["soft_prompt"].size

        dec_llm = train_reference_llm(cfg.decoder_llm, train_set, q.llm_steps, q.micro_batch, seed)
        row["decoder_llm"] = evaluate(dec_llm, test_set, max_new)
        for layer in cfg.extraction_layers:
            b = HybridBundle.create(dec_llm, pretrained, extraction_layer=layer, seed=300 + seed)
            out = train(b, train_set, _train_cfg(q.slm_steps, q.micro_batch, seed, "projector_only")).system
            row[f"extraction_{layer}"] = evaluate(out, test_set, max_new)
        rows.append(row)
        if log:
            log(row)
    keys = [k for k in rows[0] if isinstance(rows[0][k], dict)]
    mean = {k: {m: statistics.fmean(r[k][m] for r in rows) for m in rows[0][k]} for k in keys}
    return {"per_seed": rows, "mean": mean}
