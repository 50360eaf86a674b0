"""Wall-clock and FLOPs measurement of greedy generation.

Timing runs single-threaded (BLAS pools limited to one thread), with EOS
suppressed so every run produces exactly ``n`` tokens, and reports the
median over repetitions.
"""
from __future__ import annotations

import csv
import gc
import os
import statistics
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .bridge import HybridBundle, as_system, system_flops
from .decoding import GenerationParams, generate
from .rng import Rng
from .tokenizer import EOS, N_SPECIAL

NOISY_CV = 0.20


@dataclass
class BenchRecord:
    config_id: str
    m: int
    n: int
    ms_per_token: float
    total_ms: float
    flops_total: int
    flops_per_token: float
    reps: int
    timestamp: str
    cv: float = 0.0
    noisy: bool = False


BENCH_COLUMNS = tuple(f.name for f in fields(BenchRecord))


@contextmanager
def single_thread():
    """Pin BLAS to one thread and advertise it via ``L2S_THREADS``."""
    old = os.environ.get("L2S_THREADS")
    os.environ["L2S_THREADS"] = "1"
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if old is None:
            os.environ.pop("L2S_THREADS", None)
        else:
            os.environ["L2S_THREADS"] = old


@contextmanager
def gc_paused():
    """Keep garbage-collection pauses out of timed runs, as timeit does."""
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def synthetic_prompt(system, m: int, seed: int = 0) -> list[int]:
    """Exactly ``m`` ids: ``m - 1`` random symbols of the input vocabulary, then EOS."""
    vocab = as_system(system).in_vocab
    rng = Rng(seed)
    body = rng.integers(N_SPECIAL, vocab.size, m - 1) if m > 1 else np.zeros(0, dtype=np.int64)
    return [int(t) for t in body] + [EOS]


def counted_flops(system, prompt: list[int], n: int) -> dict[str, int]:
    """Run one timed-protocol generation under the FLOP counter."""
    with ad.FlopCounter() as fc:
        out = generate(system, prompt, GenerationParams(max_new_tokens=n), suppress_eos=True)
    if len(out) != n:
        raise RuntimeError(f"expected {n} tokens, got {len(out)}")
    return dict(fc.counts)


def measure(model, m: int = 100, n: int = 100, reps: int = 5, warmup: int = 2,
            config_id: str = "", seed: int = 0) -> BenchRecord:
    """Median wall-clock of prompt encoding plus ``n`` greedy steps."""
    if reps < 5 or warmup < 2:
        raise ValueError("the protocol needs reps >= 5 and warmup >= 2")
    system = as_system(model)
    prompt = synthetic_prompt(system, m, seed)
    params = GenerationParams(max_new_tokens=n)
    times = []
    with single_thread(), gc_paused():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            generate(system, prompt, params, suppress_eos=True)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1e3)
    return record_from_times(system, times, m, n, config_id)


def record_from_times(system, times: list[float], m: int, n: int, config_id: str = "") -> BenchRecord:
    """Median total ms over the timed runs, with the noise flag set above 20% variation."""
    system = as_system(system)
    total = statistics.median(times)
    cv = statistics.pstdev(times) / statistics.mean(times)
    noisy = cv > NOISY_CV
    if noisy:
        warnings.warn(f"{config_id or type(system).__name__}: timing CV {cv:.0%} exceeds {NOISY_CV:.0%}")
    flops_total = system_flops(system, m, n)
    return BenchRecord(config_id or type(system).__name__, m, n, total / n, total, flops_total, flops_total / n,
                       len(times), datetime.now(timezone.utc).isoformat(timespec="seconds"), round(cv, 4), noisy)


def measure_prefill(bundle: HybridBundle, m: int = 100, reps: int = 5, warmup: int = 2, seed: int = 0) -> float:
    """Median ms for the frozen LLM pass plus projector on an ``m``-token prompt."""
    from .bridge import project

    prompt = synthetic_prompt(bundle, m, seed)
    times = []
    with single_thread(), gc_paused():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            project(bundle.bridge, bundle.encode_prompts([prompt])[0])
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1e3)
    return statistics.median(times)


def interleaved(systems: dict, ns, m: int = 100, rounds: int = 12, warmup: int = 2,
                seed: int = 0) -> dict[tuple[str, int], list[float]]:
    """Per-round total ms for every (system id, n), alternating systems within each round.

    Adjacent runs see the same machine speed, so per-round differences and
    ratios cancel slow drift that separate ``measure`` calls do not.
    """
    if rounds < 5 or warmup < 2:
        raise ValueError("the protocol needs rounds >= 5 and warmup >= 2")
    prepared = {k: (as_system(s), synthetic_prompt(s, m, seed)) for k, s in systems.items()}
    out: dict[tuple[str, int], list[float]] = {}
    with single_thread(), gc_paused():
        for _ in range(warmup + rounds):
            for n in ns:
                for k, (system, prompt) in prepared.items():
                    t0 = time.perf_counter()
                    generate(system, prompt, GenerationParams(max_new_tokens=n), suppress_eos=True)
                    out.setdefault((k, n), []).append((time.perf_counter() - t0) * 1e3)
    return {key: v[warmup:] for key, v in out.items()}


def sweep(systems: dict, ns, m: int = 100, reps: int = 5, warmup: int = 2, path=None) -> list[BenchRecord]:
    """One record per (system, n) pair, optionally written as CSV."""
    records = [measure(sys_, m, n, reps, warmup, config_id=cid) for cid, sys_ in systems.items() for n in ns]
    if path is not None:
        write_records(records, path)
    return records


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([d[c] for c in BENCH_COLUMNS])


def read_records(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(BenchRecord(r["config_id"], int(r["m"]), int(r["n"]), float(r["ms_per_token"]),
                               float(r["total_ms"]), int(r["flops_total"]), float(r["flops_per_token"]),
                               int(r["reps"]), r["timestamp"], float(r["cv"]), r["noisy"] == "True"))
    return out
