"""Teacher-forced training of plain models, prompt-tuned models and LLM-to-SLM bundles.

The LLM is never handed to the optimizer: its tensors are built without
gradients and its prompt encodings are computed once per distinct prompt and
cached for the whole run.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import ContractError, Tensor
from .bridge import HybridBundle, PlainModel, PromptTunedModel, System, _pad, as_system
from .decoding import GenerationParams, generate
from .models import Checkpoint
from .rng import Rng
from .tasks import read_jsonl, write_jsonl
from .tokenizer import BOS, PAD, decode_str, strip_at_eos

MODES = ("slm_baseline", "llm2slm_full", "projector_only", "prompt_tuning_baseline")
LABEL_SOURCES = ("ground_truth", "llm_generated")
IGNORE_ID = -100


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 100
    micro_batch: int = 32
    accumulation: int = 4
    lr_base: float = 1e-3
    weight_decay: float = 0.1
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    mode: str = "slm_baseline"
    label_source: str = "ground_truth"
    encode_chunk: int = 256

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ContractError("warmup_frac must be in (0, 1)")
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.label_source not in LABEL_SOURCES:
            raise ContractError(f"unknown label_source {self.label_source!r}")
        if self.total_steps < 0 or self.micro_batch < 1 or self.accumulation < 1:
            raise ContractError("total_steps >= 0, micro_batch >= 1 and accumulation >= 1 required")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, total: int, base: float = 1e-3, warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_frac`` of training, then cosine decay to zero."""
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warm = warmup_frac * total
    if step < warm:
        return base * step / warm
    if total == warm:
        return base
    progress = (step - warm) / (total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float, wd: float,
               no_decay: set | frozenset = frozenset()) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if wd and name not in no_decay:
            p -= lr * wd * p
        p -= (lr * update).astype(p.dtype, copy=False)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# --------------------------------------------------------------------------- batches and loss


@dataclass
class Example:
    prompt: list[int]
    target: list[int]  # ends with EOS


def prepare(system: System, records) -> list[Example]:
    return [Example(system.prompt_ids(r["prompt"]), system.target_ids(r["target"])) for r in records]


def masked_labels(next_tokens: np.ndarray, is_target: np.ndarray, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Labels that score only target positions; every other position gets ``ignore_id``."""
    return np.where(is_target, next_tokens, ignore_id)


def batch_loss(system: System, T, batch: list[Example], encodings=None) -> tuple[Tensor, int]:
    """Mean next-token cross-entropy over the target positions of ``batch`` and the token count."""
    cfg = system.cfg
    S = T["slm"]
    prompts = [ex.prompt for ex in batch]
    tgt, tvalid = _pad([ex.target for ex in batch], PAD)
    B, n = tgt.shape
    dec_in = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
    emb, valid, npos = system.prompt_inputs(T, prompts, encodings)
    if cfg.arch == "encoder_decoder":
        memory = models.encoder_stack(S, cfg, emb, valid)
        x = system.target_embed(T, dec_in, np.arange(n))
        h = models.decoder_stack(S, cfg, x, cross=models.cross_kv(S, cfg, memory), cross_valid=valid)
        labels = masked_labels(tgt, tvalid)
    else:
        mp = emb.shape[1]
        positions = npos[:, None] + np.arange(n)[None]
        x = system.target_embed(T, dec_in, positions)
        stream_valid = np.concatenate([valid, tvalid], axis=1)
        h = models.decoder_stack(S, cfg, ad.concat([emb, x], axis=1), valid=stream_valid)
        next_tokens = np.concatenate([np.full((B, mp), PAD, dtype=np.int64), tgt], axis=1)
        is_target = np.concatenate([np.zeros((B, mp), dtype=bool), tvalid], axis=1)
        labels = masked_labels(next_tokens, is_target)
    # only scored rows go through the output head
    flat = ad.reshape(h, (-1, h.shape[-1]))
    rows = np.nonzero(labels.reshape(-1) != IGNORE_ID)[0]
    logits = system.head(T, ad.index(flat, rows))
    return ad.cross_entropy(logits, labels.reshape(-1)[rows]), len(rows)


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    system: System
    trace: list[tuple[int, float, float]]
    state: OptimState

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.trace:
                w.writerow([step, f"{lr:.8g}", f"{loss:.8g}"])


def _rebuild(system: System, comps: dict[str, Checkpoint]) -> System:
    if isinstance(system, HybridBundle):
        return dataclasses.replace(system, slm=comps["slm"], bridge=comps["bridge"])
    if isinstance(system, PromptTunedModel):
        return PromptTunedModel(comps["slm"], comps["bridge"])
    return PlainModel(comps["slm"])


def encoding_cache(system: System, examples: list[Example], chunk: int = 256) -> dict | None:
    """One frozen LLM pass per distinct prompt."""
    if not isinstance(system, HybridBundle):
        return None
    uniq = list(dict.fromkeys(tuple(ex.prompt) for ex in examples))
    cache = {}
    # similar lengths together keeps padding small
    uniq.sort(key=len)
    for i in range(0, len(uniq), chunk):
        part = uniq[i : i + chunk]
        for key, H in zip(part, system.encode_prompts([list(p) for p in part])):
            cache[key] = H.copy()
    return cache


def batch_order(n_examples: int, n_needed: int, seed: int) -> np.ndarray:
    """Concatenated seeded permutations (one per epoch) covering ``n_needed`` draws."""
    rng = Rng(seed)
    out = []
    total = 0
    while total < n_needed:
        out.append(rng.permutation(n_examples))
        total += n_examples
    return np.concatenate(out)[:n_needed] if out else np.zeros(0, dtype=np.int64)


def train(model, dataset, cfg: TrainConfig, trace_path=None) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps and return the trained system (inputs are not mutated)."""
    system = as_system(model)
    records = load_records(dataset)
    if not records:
        raise ContractError("empty dataset")
    trainable = system.trainable(cfg.mode)
    if "llm" in trainable:
        raise ContractError("the LLM is never trainable")
    comps = {role: (ck.copy() if role in trainable else ck) for role, ck in system.components().items()}
    trained = _rebuild(system, comps)
    state = OptimState()
    trace: list[tuple[int, float, float]] = []
    if cfg.total_steps == 0:
        return TrainResult(trained, trace, state)

    examples = prepare(trained, records)
    enc_cache = encoding_cache(trained, examples, cfg.encode_chunk)
    order = batch_order(len(examples), cfg.total_steps * cfg.effective_batch, cfg.seed)
    params = {(role, name): comps[role].params[name] for role, names in trainable.items() for name in names}
    no_decay = {key for key, p in params.items() if p.ndim < 2}

    for step in range(cfg.total_steps):
        idx = order[step * cfg.effective_batch : (step + 1) * cfg.effective_batch]
        batch = [examples[i] for i in idx]
        total_tokens = sum(len(ex.target) for ex in batch)
        grads: dict = {}
        loss_sum = 0.0
        for a in range(cfg.accumulation):
            micro = batch[a * cfg.micro_batch : (a + 1) * cfg.micro_batch]
            if not micro:
                continue
            T = trained.tensors(trainable)
            encs = None if enc_cache is None else [enc_cache[tuple(ex.prompt)] for ex in micro]
            with ad.Tape() as tape:
                ce, count = batch_loss(trained, T, micro, encs)
                # token-weighted so accumulation reproduces the full-batch mean
                loss = ad.mul(ce, count / total_tokens)
            ad.backward(tape, loss)
            loss_sum += float(loss.data)
            for role, tens in T.items():
                for name, t in tens.items():
                    if t.grad is not None:
                        key = (role, name)
                        grads[key] = t.grad if key not in grads else grads[key] + t.grad
        for key in params:
            grads.setdefault(key, np.zeros_like(params[key]))
        clip_global_norm(grads, cfg.clip_norm)
        lr = lr_at(step + 1, cfg.total_steps, cfg.lr_base, cfg.warmup_frac)
        try:
            adamw_step(params, grads, state, lr, cfg.weight_decay, no_decay)
        except TrainingError as err:
            raise TrainingError(f"step {step}: {err}") from None
        trace.append((step, lr, loss_sum))

    for ck in comps.values():
        if ck.role != "llm":
            ck.step += cfg.total_steps
    result = TrainResult(trained, trace, state)
    if trace_path is not None:
        result.write_trace(trace_path)
    return result


# --------------------------------------------------------------------------- datasets


def load_records(dataset) -> list[dict]:
    if isinstance(dataset, (str, Path)):
        return read_jsonl(dataset)
    return list(dataset)


def generate_labels(model, prompts, params: GenerationParams | None = None, path=None) -> list[dict]:
    """Replace ground-truth targets with the model's own outputs (distillation labels)."""
    system = as_system(model)
    params = params or GenerationParams(max_new_tokens=64)
    out = []
    for prompt in prompts:
        ids = generate(system, prompt, params)
        out.append({"prompt": prompt, "target": decode_str(system.out_vocab, strip_at_eos(ids)), "source": "gen"})
    if path is not None:
        write_jsonl(out, path)
    return out
