"""Deterministic synthetic seq2seq tasks.

* ``reversal_translation``: ``"translate: abc" -> "cba"``.
* ``keyed_substitution_translation``: reverse the body, then map every
  symbol through a fixed derangement of the alphabet.
* ``extract_summarize``: a lowercase payload with uppercase noise spans
  spliced in; the target is the payload alone.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .rng import Rng

KINDS = ("reversal_translation", "keyed_substitution_translation", "extract_summarize")
PREFIX = {
    "reversal_translation": "translate: ",
    "keyed_substitution_translation": "translate: ",
    "extract_summarize": "summarize: ",
}


class TaskCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "reversal_translation"
    alphabet: str = "abcdefghijklmnop"
    min_len: int = 3
    max_len: int = 8
    seed: int = 0
    n_train: int = 1000
    n_test: int = 200
    key_seed: int = 0  # keyed substitution key, independent of the data seed
    noise_ratio: float = 2.0  # extract_summarize: noise chars per payload char
    noise_spans: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if len(set(self.alphabet)) != len(self.alphabet) or len(self.alphabet) < 2:
            raise ValueError("alphabet needs at least 2 distinct symbols")
        if self.kind == "extract_summarize" and not self.alphabet.islower():
            raise ValueError("extract_summarize needs a lowercase alphabet (noise is uppercase)")

    @property
    def capacity(self) -> int:
        k = len(self.alphabet)
        return sum(k**n for n in range(self.min_len, self.max_len + 1))

    def to_json(self) -> dict:
        return asdict(self)


def substitution_key(alphabet: str, key_seed: int = 0) -> dict[str, str]:
    """A seeded derangement: every symbol maps to a different one."""
    rng = Rng(key_seed)
    n = len(alphabet)
    while True:
        perm = rng.permutation(n)
        if all(int(perm[i]) != i for i in range(n)):
            return {alphabet[i]: alphabet[int(perm[i])] for i in range(n)}


def reverse_body(body: str) -> str:
    return body[::-1]


def transform(spec: TaskSpec, body: str, key: dict | None = None) -> str:
    """Ground-truth target for a prompt body (for extract_summarize, the payload)."""
    if spec.kind == "reversal_translation":
        return reverse_body(body)
    if spec.kind == "keyed_substitution_translation":
        key = key or substitution_key(spec.alphabet, spec.key_seed)
        return "".join(key[c] for c in reverse_body(body))
    return body


def _random_body(spec: TaskSpec, rng: Rng) -> str:
    n = rng.integers(spec.min_len, spec.max_len + 1)
    idx = rng.integers(0, len(spec.alphabet), n)
    return "".join(spec.alphabet[int(i)] for i in idx)


def _add_noise(spec: TaskSpec, payload: str, rng: Rng) -> str:
    total = int(round(spec.noise_ratio * len(payload)))
    if total == 0:
        return payload
    spans = max(1, min(spec.noise_spans, total))
    # split the noise budget into ``spans`` non-empty runs
    cuts = sorted(int(c) for c in rng.permutation(total - 1)[: spans - 1] + 1) if spans > 1 else []
    sizes = [b - a for a, b in zip([0] + cuts, cuts + [total])]
    upper = spec.alphabet.upper()
    slots = sorted(int(s) for s in rng.integers(0, len(payload) + 1, spans))
    out, prev = [], 0
    for slot, size in zip(slots, sizes):
        out.append(payload[prev:slot])
        out.append("".join(upper[int(i)] for i in rng.integers(0, len(upper), size)))
        prev = slot
    out.append(payload[prev:])
    return "".join(out)


def strip_noise(text: str) -> str:
    """Inverse oracle for extract_summarize: drop the uppercase noise."""
    return "".join(c for c in text if not c.isupper())


def generate_task(spec: TaskSpec) -> tuple[list[dict], list[dict]]:
    """Seeded train/test records with prompt-disjoint splits."""
    need = spec.n_train + spec.n_test
    if need > spec.capacity:
        raise TaskCapacityError(f"{need} distinct prompts requested but only {spec.capacity} exist "
                                f"for |alphabet|={len(spec.alphabet)}, lengths {spec.min_len}..{spec.max_len}")
    rng = Rng(spec.seed)
    key = substitution_key(spec.alphabet, spec.key_seed) if spec.kind == "keyed_substitution_translation" else None
    prefix = PREFIX[spec.kind]
    seen: set[str] = set()
    records = []
    attempts = 0
    while len(records) < need:
        attempts += 1
        if attempts > 50 * need + 1000:
            raise TaskCapacityError("could not draw enough distinct prompts; widen lengths or alphabet")
        body = _random_body(spec, rng)
        shown = _add_noise(spec, body, rng) if spec.kind == "extract_summarize" else body
        prompt = prefix + shown
        if prompt in seen:
            continue
        seen.add(prompt)
        records.append({"prompt": prompt, "target": transform(spec, body, key), "source": "gt"})
    return records[: spec.n_train], records[spec.n_train :]


def body_of(prompt: str) -> str:
    for p in set(PREFIX.values()):
        if prompt.startswith(p):
            return prompt[len(p) :]
    return prompt


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_task(spec: TaskSpec, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate_task(spec)
    paths = out_dir / "train.jsonl", out_dir / "test.jsonl"
    write_jsonl(train, paths[0])
    write_jsonl(test, paths[1])
    return paths
