"""Tiny pre-norm transformers: encoder-only, encoder-decoder, decoder-only.

Parameters live in a flat ``{name: ndarray}`` dict inside a
:class:`Checkpoint`; the forward functions take a ``{name: Tensor}`` view of
it so the same code serves training (leaves on a tape) and inference.

FLOPs convention: dense weight products only (``2 * rows * in * out``), the
usual "2 x parameters per token" accounting. Attention score/value products
are tallied by the counter under ``"attention"`` but are not part of the
closed form, which keeps the decode term linear in the generation length.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .rng import Rng
from .tokenizer import BOS, BYTE_VOCAB, Vocab

ARCHS = ("encoder_only", "encoder_decoder", "decoder_only")
ROLES = ("llm", "slm", "bridge")
MAGIC = b"L2S1"
INIT_STD = 0.02
NEG_INF = -1e9


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "encoder_decoder"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = BYTE_VOCAB.size
    max_seq_len: int = 256

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ContractError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ContractError("n_layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def has_encoder(self) -> bool:
        return self.arch != "decoder_only"

    @property
    def has_decoder(self) -> bool:
        return self.arch != "encoder_only"

    def to_json(self) -> dict:
        return {"kind": "model", **asdict(self)}

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


def config_from_json(d: Mapping):
    if d.get("kind", "model") == "bridge":
        from .bridge import BridgeConfig

        return BridgeConfig.from_json(d)
    return ModelConfig.from_json(d)


# --------------------------------------------------------------------------- parameters


def _block_shapes(prefix: str, d: int, dff: int, cross: bool) -> list[tuple[str, tuple]]:
    out = [(f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,))]
    for p in ("q", "k", "v", "o"):
        out += [(f"{prefix}.attn.{p}.w", (d, d)), (f"{prefix}.attn.{p}.b", (d,))]
    if cross:
        out += [(f"{prefix}.lnx.g", (d,)), (f"{prefix}.lnx.b", (d,))]
        for p in ("q", "k", "v", "o"):
            out += [(f"{prefix}.xattn.{p}.w", (d, d)), (f"{prefix}.xattn.{p}.b", (d,))]
    out += [(f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,))]
    out += [(f"{prefix}.mlp.in.w", (d, dff)), (f"{prefix}.mlp.in.b", (dff,))]
    out += [(f"{prefix}.mlp.out.w", (dff, d)), (f"{prefix}.mlp.out.b", (d,))]
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes = [("tok_emb", (V, d))]
    if cfg.has_encoder:
        shapes.append(("enc.pos_emb", (cfg.max_seq_len, d)))
        for i in range(cfg.n_layers):
            shapes += _block_shapes(f"enc.{i}", d, cfg.d_ff, cross=False)
        shapes += [("enc.ln_f.g", (d,)), ("enc.ln_f.b", (d,))]
    if cfg.has_decoder:
        shapes.append(("dec.pos_emb", (cfg.max_seq_len, d)))
        for i in range(cfg.n_layers):
            shapes += _block_shapes(f"dec.{i}", d, cfg.d_ff, cross=cfg.arch == "encoder_decoder")
        shapes += [("dec.ln_f.g", (d,)), ("dec.ln_f.b", (d,))]
        shapes += [("head.w", (d, V)), ("head.b", (V,))]
    return shapes


def is_embedding_or_head(name: str) -> bool:
    return name == "tok_emb" or name.endswith("pos_emb") or name.startswith("head.")


def init_params(shapes, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains."""
    rng = Rng(seed)
    params = {}
    for name, shape in shapes:
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(shape, INIT_STD)
        params[name] = arr.astype(dtype)
    return params


@dataclass
class Checkpoint:
    config: object
    params: dict[str, np.ndarray]
    role: str = "slm"
    step: int = 0
    vocab: Vocab | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown role {self.role!r}")
        expected = dict(param_shapes(self.config)) if isinstance(self.config, ModelConfig) else None
        if expected is not None:
            if set(expected) != set(self.params):
                missing = set(expected) - set(self.params)
                extra = set(self.params) - set(expected)
                raise ContractError(f"checkpoint tensors do not match config (missing={sorted(missing)}, extra={sorted(extra)})")
            for k, shape in expected.items():
                if tuple(self.params[k].shape) != tuple(shape):
                    raise ContractError(f"{k}: shape {self.params[k].shape} != {shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def tensors(self, trainable=()) -> dict[str, Tensor]:
        names = set(trainable)
        return {k: Tensor(v, requires_grad=k in names, name=k) for k, v in self.params.items()}

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()}, self.role, self.step, self.vocab)

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.role, self.step, self.vocab)

    def to_bytes(self) -> bytes:
        directory, blobs, offset = [], [], 0
        for name, arr in self.params.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = {
            "config": self.config.to_json(),
            "role": self.role,
            "step": int(self.step),
            "tensors": directory,
            "vocab": self.vocab.to_json() if self.vocab is not None else None,
        }
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise ValueError("not an L2S1 checkpoint")
        (hlen,) = struct.unpack("<Q", buf[4:12])
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
        base = 12 + hlen
        params = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            start = base + t["offset"]
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(t["shape"])
            params[t["name"]] = arr.astype(np.float32)
        vocab = Vocab.from_json(header["vocab"]) if header.get("vocab") else None
        return cls(config_from_json(header["config"]), params, header["role"], header["step"], vocab)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def init_checkpoint(cfg: ModelConfig, seed: int = 0, role: str = "slm", vocab: Vocab | None = None,
                    dtype=np.float32) -> Checkpoint:
    if vocab is not None and vocab.size != cfg.vocab_size:
        raise ContractError(f"vocab size {vocab.size} != config vocab_size {cfg.vocab_size}")
    return Checkpoint(cfg, init_params(param_shapes(cfg), seed, dtype), role, 0, vocab or (BYTE_VOCAB if cfg.vocab_size == BYTE_VOCAB.size else None))


# --------------------------------------------------------------------------- KV cache


class KvCache:
    """Preallocated per-layer key/value buffers of shape (batch, heads, max_len, head_dim)."""

    def __init__(self, cfg: ModelConfig, batch: int = 1, dtype=np.float32):
        shape = (batch, cfg.n_heads, cfg.max_seq_len, cfg.head_dim)
        self.max_len = cfg.max_seq_len
        self.k = [np.zeros(shape, dtype) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape, dtype) for _ in range(cfg.n_layers)]
        self.filled_len = 0
        self.cross: list[tuple[Tensor, Tensor]] | None = None
        self.cross_mask: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.k[0].shape[0]

    def reserve(self, n: int) -> int:
        if self.filled_len + n > self.max_len:
            raise LengthError(f"KV cache overflow: {self.filled_len} + {n} > max_seq_len {self.max_len}")
        return self.filled_len

    def rewind(self, length: int) -> None:
        """Drop positions >= ``length`` (speculative rollback)."""
        if not 0 <= length <= self.filled_len:
            raise ContractError(f"cannot rewind cache of length {self.filled_len} to {length}")
        self.filled_len = length

    def reorder(self, index) -> None:
        index = np.asarray(index)
        self.k = [k[index] for k in self.k]
        self.v = [v[index] for v in self.v]
        if self.cross is not None:
            self.cross = [(Tensor(k.data[index]), Tensor(v.data[index])) for k, v in self.cross]
        if self.cross_mask is not None:
            self.cross_mask = self.cross_mask[index]

    def copy(self) -> "KvCache":
        new = object.__new__(KvCache)
        new.max_len = self.max_len
        new.k = [k.copy() for k in self.k]
        new.v = [v.copy() for v in self.v]
        new.filled_len = self.filled_len
        new.cross = self.cross
        new.cross_mask = self.cross_mask
        return new


# --------------------------------------------------------------------------- building blocks


def linear(P: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, P[name + ".w"]), P[name + ".b"])


def _ln(P, name, x):
    return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])


def split_heads(x: Tensor, h: int) -> Tensor:
    B, T, d = x.shape
    return ad.transpose(ad.reshape(x, (B, T, h, d // h)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, T, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, h * hd))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention; ``mask`` is additive, broadcast to (B, h, T, S)."""
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)), kind="attention")
    scores = ad.mul(scores, 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask.astype(scores.dtype, copy=False)))
    return ad.matmul(ad.softmax(scores), v, kind="attention")


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, S) bool -> additive (B, 1, 1, S)."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(T: int, offset: int = 0) -> np.ndarray:
    """Queries at offset..offset+T-1 over keys 0..offset+T-1 -> additive (1, 1, T, offset+T)."""
    q = np.arange(T)[:, None] + offset
    k = np.arange(offset + T)[None, :]
    return np.where(k <= q, 0.0, NEG_INF)[None, None]


def _mlp(P, p, x):
    h = ad.gelu(linear(P, p + ".mlp.in", _ln(P, p + ".ln2", x)))
    return ad.add(x, linear(P, p + ".mlp.out", h))


def embed(P: Mapping[str, Tensor], stack: str, ids: np.ndarray, positions: np.ndarray) -> Tensor:
    """Token embedding plus learned absolute position embedding; ids (B, T), positions (T,) or (B, T)."""
    return ad.add(ad.embedding(P["tok_emb"], ids), ad.embedding(P[stack + ".pos_emb"], positions))


def encoder_stack(P, cfg: ModelConfig, x: Tensor, valid: np.ndarray | None = None, depth: int | None = None,
                  final_norm: bool = True) -> Tensor:
    """Bidirectional blocks over (B, T, d) inputs; ``valid`` marks non-pad keys."""
    mask = padding_mask(valid) if valid is not None and not valid.all() else None
    h_ = cfg.n_heads
    for i in range(cfg.n_layers if depth is None else depth):
        p = f"enc.{i}"
        h = _ln(P, p + ".ln1", x)
        q = split_heads(linear(P, p + ".attn.q", h), h_)
        k = split_heads(linear(P, p + ".attn.k", h), h_)
        v = split_heads(linear(P, p + ".attn.v", h), h_)
        x = ad.add(x, linear(P, p + ".attn.o", merge_heads(attend(q, k, v, mask))))
        x = _mlp(P, p, x)
    return _ln(P, "enc.ln_f", x) if final_norm else x


def cross_kv(P, cfg: ModelConfig, memory: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Per-layer cross-attention keys/values from encoder output (B, S, d)."""
    out = []
    for i in range(cfg.n_layers):
        p = f"dec.{i}.xattn"
        out.append((split_heads(linear(P, p + ".k", memory), cfg.n_heads),
                    split_heads(linear(P, p + ".v", memory), cfg.n_heads)))
    return out


def decoder_stack(P, cfg: ModelConfig, x: Tensor, *, valid: np.ndarray | None = None,
                  cache: KvCache | None = None, cross: list | None = None,
                  cross_valid: np.ndarray | None = None, depth: int | None = None,
                  final_norm: bool = True) -> Tensor:
    """Causal blocks: self-attention, then cross-attention (encoder-decoder), then MLP.

    With ``cache`` the T new positions are appended after ``cache.filled_len``
    and attend to everything cached; without it the whole sequence is
    processed at once (training / uncached path).
    """
    if (cross is not None) != (cfg.arch == "encoder_decoder"):
        raise ContractError(f"cross-attention input {'given' if cross is not None else 'missing'} for {cfg.arch}")
    B, T, _ = x.shape
    h_ = cfg.n_heads
    if cache is not None:
        f = cache.reserve(T)
        mask = causal_mask(T, f) if T > 1 else None
    else:
        if T > cfg.max_seq_len:
            raise LengthError(f"sequence length {T} > max_seq_len {cfg.max_seq_len}")
        mask = causal_mask(T)
        if valid is not None and not valid.all():
            mask = mask + padding_mask(valid)
    xmask = padding_mask(cross_valid) if cross_valid is not None and not cross_valid.all() else None
    for i in range(cfg.n_layers if depth is None else depth):
        p = f"dec.{i}"
        h = _ln(P, p + ".ln1", x)
        q = split_heads(linear(P, p + ".attn.q", h), h_)
        k = split_heads(linear(P, p + ".attn.k", h), h_)
        v = split_heads(linear(P, p + ".attn.v", h), h_)
        if cache is not None:
            cache.k[i][:, :, f : f + T] = k.data
            cache.v[i][:, :, f : f + T] = v.data
            k = Tensor(cache.k[i][:, :, : f + T])
            v = Tensor(cache.v[i][:, :, : f + T])
        x = ad.add(x, linear(P, p + ".attn.o", merge_heads(attend(q, k, v, mask))))
        if cross is not None:
            h = _ln(P, p + ".lnx", x)
            q = split_heads(linear(P, p + ".xattn.q", h), h_)
            ck, cv = cross[i]
            x = ad.add(x, linear(P, p + ".xattn.o", merge_heads(attend(q, ck, cv, xmask))))
        x = _mlp(P, p, x)
    if cache is not None:
        cache.filled_len = f + T
    return _ln(P, "dec.ln_f", x) if final_norm else x


def lm_head(P, h: Tensor) -> Tensor:
    return linear(P, "head", h)


# --------------------------------------------------------------------------- public single-sequence API


def _check_len(cfg: ModelConfig, m: int, what: str = "prompt") -> None:
    if m == 0:
        raise ContractError(f"empty {what}")
    if m > cfg.max_seq_len:
        raise LengthError(f"{what} length {m} > max_seq_len {cfg.max_seq_len}")


def encoder_forward(ckpt: Checkpoint, tokens) -> np.ndarray:
    """Last-layer (normed) encoder states, shape (m, d_model)."""
    cfg = ckpt.config
    if not cfg.has_encoder:
        raise ContractError("encoder_forward needs an encoder_only or encoder_decoder model")
    ids = np.asarray(tokens, dtype=np.int64)[None]
    _check_len(cfg, ids.shape[1])
    P = ckpt.tensors()
    x = embed(P, "enc", ids, np.arange(ids.shape[1]))
    return encoder_stack(P, cfg, x).data[0]


def new_cache(ckpt: Checkpoint, batch: int = 1) -> KvCache:
    return KvCache(ckpt.config, batch, ckpt.dtype)


def attach_cross(ckpt: Checkpoint, cache: KvCache, memory: np.ndarray) -> KvCache:
    """Precompute cross-attention K/V for an (m, d) or (B, m, d) encoder output."""
    mem = memory if memory.ndim == 3 else memory[None]
    if mem.shape[0] != cache.batch:
        mem = np.repeat(mem, cache.batch, axis=0)
    cache.cross = cross_kv(ckpt.tensors(), ckpt.config, Tensor(mem.astype(ckpt.dtype, copy=False)))
    return cache


def prefill(ckpt: Checkpoint, cache: KvCache, tokens) -> np.ndarray:
    """Feed several tokens at once (decoder-only prompts); returns logits (T, V) of the last batch row."""
    return _feed(ckpt, cache, np.asarray(tokens, dtype=np.int64)[None])[0]


def _feed(ckpt: Checkpoint, cache: KvCache, ids: np.ndarray) -> np.ndarray:
    cfg = ckpt.config
    P = ckpt.tensors()
    T = ids.shape[1]
    pos = np.arange(cache.filled_len, cache.filled_len + T)
    if pos[-1] >= cfg.max_seq_len:
        raise LengthError(f"position {pos[-1]} >= max_seq_len {cfg.max_seq_len}")
    x = embed(P, "dec", ids, pos)
    h = decoder_stack(P, cfg, x, cache=cache, cross=cache.cross, cross_valid=cache.cross_mask)
    return lm_head(P, h).data


def decoder_step(ckpt: Checkpoint, cache: KvCache, token: int, cross=None):
    """One incremental decoder step. Returns (logits (V,), cache)."""
    cfg = ckpt.config
    if not cfg.has_decoder:
        raise ContractError("decoder_step needs a decoder")
    if cross is not None:
        if cfg.arch != "encoder_decoder":
            raise ContractError(f"cross input supplied to {cfg.arch} model")
        if cache.cross is None:
            attach_cross(ckpt, cache, np.asarray(getattr(cross, "matrix", cross)))
    elif cfg.arch == "encoder_decoder" and cache.cross is None:
        raise ContractError("encoder_decoder decoder_step needs a cross input")
    logits = _feed(ckpt, cache, np.full((cache.batch, 1), int(token), dtype=np.int64))
    return logits[0, -1], cache


def full_forward(ckpt: Checkpoint, prompt, targets, cross=None) -> np.ndarray:
    """Teacher-forced logits (n, V): row i predicts ``targets[i]`` from BOS + targets[:i]."""
    cfg = ckpt.config
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    if n == 0:
        return np.zeros((0, cfg.vocab_size), dtype=ckpt.dtype)
    P = ckpt.tensors()
    return teacher_forced_logits(P, cfg, np.asarray(prompt, dtype=np.int64), targets, cross).data[0]


def teacher_forced_logits(P, cfg: ModelConfig, prompt: np.ndarray, targets: np.ndarray, cross=None) -> Tensor:
    """Differentiable single-example version of :func:`full_forward` (logits (1, n, V))."""
    n = len(targets)
    dec_in = np.concatenate([[BOS], targets[:-1]])[None]
    if cfg.arch == "encoder_decoder":
        if cross is None:
            _check_len(cfg, len(prompt))
            mem = encoder_stack(P, cfg, embed(P, "enc", prompt[None], np.arange(len(prompt))))
        else:
            mem = cross if isinstance(cross, Tensor) else Tensor(np.asarray(getattr(cross, "matrix", cross))[None])
        _check_len(cfg, n, "target")
        h = decoder_stack(P, cfg, embed(P, "dec", dec_in, np.arange(n)), cross=cross_kv(P, cfg, mem))
        return lm_head(P, h)
    if cfg.arch == "decoder_only":
        if cross is not None:
            raise ContractError("cross input supplied to decoder_only model")
        stream = np.concatenate([prompt, dec_in[0]])[None]
        _check_len(cfg, stream.shape[1], "prompt+target")
        h = decoder_stack(P, cfg, embed(P, "dec", stream, np.arange(stream.shape[1])))
        return lm_head(P, ad.index(h, (slice(None), slice(len(prompt), None))))
    raise ContractError("full_forward needs a decoder")


# --------------------------------------------------------------------------- surgery & accounting


def truncate_layers(ckpt: Checkpoint, depth: int) -> Checkpoint:
    """Keep the lowest ``depth`` blocks of every stack, plus embeddings, final norms and head."""
    cfg = ckpt.config
    if not 1 <= depth <= cfg.n_layers:
        raise ContractError(f"depth {depth} outside [1, {cfg.n_layers}]")
    new_cfg = ModelConfig(**{**asdict(cfg), "n_layers": depth})
    keep = {name for name, _ in param_shapes(new_cfg)}
    params = {k: v.copy() for k, v in ckpt.params.items() if k in keep}
    return Checkpoint(new_cfg, params, ckpt.role, ckpt.step, ckpt.vocab)


def param_count(cfg: ModelConfig, include_embeddings: bool = False) -> int:
    return sum(int(np.prod(s)) for name, s in param_shapes(cfg) if include_embeddings or not is_embedding_or_head(name))


def layer_flops(cfg: ModelConfig, stack: str) -> int:
    """Dense FLOPs for one token through one block (cross K/V excluded)."""
    d, f = cfg.d_model, cfg.d_ff
    mats = 4 * d * d + 2 * d * f
    if stack == "dec" and cfg.arch == "encoder_decoder":
        mats += 2 * d * d
    return 2 * mats


def cross_kv_flops(cfg: ModelConfig, m: int) -> int:
    return 2 * m * cfg.n_layers * 2 * cfg.d_model * cfg.d_model if cfg.arch == "encoder_decoder" else 0


def head_flops(cfg: ModelConfig) -> int:
    return 2 * cfg.d_model * cfg.vocab_size


def prefill_flops(cfg: ModelConfig, m: int) -> int:
    if cfg.arch == "decoder_only":
        return m * cfg.n_layers * layer_flops(cfg, "dec")
    return m * cfg.n_layers * layer_flops(cfg, "enc") + cross_kv_flops(cfg, m)


def decode_token_flops(cfg: ModelConfig) -> int:
    return cfg.n_layers * layer_flops(cfg, "dec") + head_flops(cfg)


def flops(cfg: ModelConfig, m: int, n: int, cached: bool = True) -> int:
    """Closed-form dense FLOPs to encode an m-token prompt and generate n tokens."""
    if m < 0 or n < 0:
        raise ContractError("m and n must be >= 0")
    if cfg.arch == "encoder_only":
        if n:
            raise ContractError("encoder_only models do not generate")
        return m * cfg.n_layers * layer_flops(cfg, "enc")
    if cached:
        return prefill_flops(cfg, m) + n * decode_token_flops(cfg)
    # every step re-runs full_forward over the whole prefix
    tri = n * (n + 1) // 2
    per_tok = cfg.n_layers * layer_flops(cfg, "dec")
    if cfg.arch == "encoder_decoder":
        enc = m * cfg.n_layers * layer_flops(cfg, "enc")
        return enc + n * cross_kv_flops(cfg, m) + tri * (per_tok + head_flops(cfg))
    return n * m * per_tok + tri * (per_tok + head_flops(cfg))
