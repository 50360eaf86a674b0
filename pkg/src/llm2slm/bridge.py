"""Conditioning a small decoder model on a frozen large model's prompt encoding.

Three interchangeable "systems" expose the same surface to training and
decoding:

* :class:`PlainModel`, one checkpoint on its own (SLM baseline or LLM);
* :class:`HybridBundle`, frozen LLM -> projector -> fused SLM prompt embedding;
* :class:`PromptTunedModel`, SLM with a learned soft prompt prepended.

The surface is ``tensors()``, ``prompt_inputs()``, ``target_embed()`` and
``head()``; everything else (teacher forcing, KV-cached decoding) is written
once against it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import ContractError, DimensionError, Tensor
from .models import Checkpoint, ModelConfig, init_params, linear
from .tokenizer import BYTE_VOCAB, Vocab, decode, encode


class AlignmentError(ValueError):
    pass


class FusionMode(str, Enum):
    ADD = "add"
    REPLACE = "replace"


class TokenizerMode(str, Enum):
    LLM_SHARED = "llm_shared"
    SLM_NATIVE = "slm_native"


@dataclass(frozen=True)
class BridgeConfig:
    d_llm: int = 0
    d_slm: int = 64
    vocab_llm: int = BYTE_VOCAB.size
    projector: bool = True
    shared_embedding: bool = False  # embed_proj + new_head for cross-vocabulary SLMs
    soft_prompt_len: int = 0

    def to_json(self) -> dict:
        return {"kind": "bridge", **asdict(self)}

    @classmethod
    def from_json(cls, d: Mapping) -> "BridgeConfig":
        return cls(**{k: v for k, v in d.items() if k != "kind"})

    def shapes(self) -> list[tuple[str, tuple]]:
        out = []
        dl, ds = self.d_llm, self.d_slm
        if self.projector:
            out += [("proj.in.w", (dl, ds)), ("proj.in.b", (ds,)), ("proj.out.w", (ds, ds)), ("proj.out.b", (ds,))]
        if self.shared_embedding:
            out += [("embed_proj.w", (dl, ds)), ("embed_proj.b", (ds,))]
            out += [("new_head.w", (ds, self.vocab_llm)), ("new_head.b", (self.vocab_llm,))]
        if self.soft_prompt_len:
            out.append(("soft_prompt", (self.soft_prompt_len, ds)))
        return out


def init_bridge(cfg: BridgeConfig, seed: int = 0, dtype=np.float32) -> Checkpoint:
    return Checkpoint(cfg, init_params(cfg.shapes(), seed, dtype), role="bridge")


def projector_param_count(d_llm: int, d_slm: int) -> int:
    return d_llm * d_slm + d_slm + d_slm * d_slm + d_slm


@dataclass
class PromptEncoding:
    matrix: np.ndarray  # (m, d_llm)
    source: str
    layer: int

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class ProjectedRepr:
    matrix: np.ndarray  # (m, d_slm)


@dataclass
class SlmInputs:
    """Embedded SLM inputs: encoder stream (encoder-decoder SLM) and decoder stream."""

    encoder: np.ndarray | None
    decoder: np.ndarray
    prompt_len: int


def fingerprint(ckpt: Checkpoint) -> str:
    h = hashlib.sha1()
    for k, v in ckpt.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()[:12]


# --------------------------------------------------------------------------- tensor-level pieces


def project_t(B: Mapping[str, Tensor], H: Tensor) -> Tensor:
    """Linear(d_l, d_s) -> ReLU -> Linear(d_s, d_s)."""
    if H.shape[-1] != B["proj.in.w"].shape[0]:
        raise DimensionError(f"prompt encoding width {H.shape[-1]} != projector input {B['proj.in.w'].shape[0]}")
    return linear(B, "proj.out", ad.relu(linear(B, "proj.in", H)))


def fuse_t(mode: FusionMode, Z: Tensor, E: Tensor) -> Tensor:
    mode = FusionMode(mode)
    if mode is FusionMode.REPLACE:
        return Z
    if Z.shape != E.shape:
        raise AlignmentError(
            f"add fusion needs equal prompt lengths, got Z {Z.shape} vs E_X {E.shape}; "
            "use tokenizer_mode='llm_shared' so both models see the same tokenization")
    return ad.add(E, Z)


def project(bridge: Checkpoint, H) -> ProjectedRepr:
    mat = np.asarray(getattr(H, "matrix", H))
    return ProjectedRepr(project_t(bridge.tensors(), Tensor(mat.astype(bridge.dtype, copy=False))).data)


def fuse(mode, Z, E_X) -> np.ndarray:
    z = np.asarray(getattr(Z, "matrix", Z))
    return fuse_t(mode, Tensor(z), Tensor(np.asarray(E_X, dtype=z.dtype))).data


# --------------------------------------------------------------------------- systems


def _pad(seqs: list, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


class System:
    """Common surface; subclasses fill in the prompt side."""

    slm: Checkpoint

    @property
    def cfg(self) -> ModelConfig:
        return self.slm.config

    @property
    def stack(self) -> str:
        return "dec" if self.cfg.arch == "decoder_only" else "enc"

    @property
    def in_vocab(self) -> Vocab:
        return self.slm.vocab or BYTE_VOCAB

    @property
    def out_vocab(self) -> Vocab:
        return self.slm.vocab or BYTE_VOCAB

    @property
    def extra_positions(self) -> int:
        return 0

    def tensors(self, trainable: Mapping[str, set] | None = None) -> dict[str, dict[str, Tensor]]:
        trainable = trainable or {}
        return {role: ck.tensors(trainable.get(role, ())) for role, ck in self.components().items()}

    def components(self) -> dict[str, Checkpoint]:
        return {"slm": self.slm}

    def prompt_ids(self, prompt) -> list[int]:
        if isinstance(prompt, (str, bytes, bytearray)):
            return encode(self.in_vocab, prompt, add_eos=True)
        return [int(t) for t in prompt]

    def target_ids(self, text) -> list[int]:
        return encode(self.out_vocab, text, add_eos=True)

    def encode_prompts(self, prompts: list[list[int]]):
        """Frozen-side precomputation for a batch of prompts (None when there is none)."""
        return None

    def prompt_inputs(self, T, prompts: list[list[int]], encodings=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """SLM prompt embeddings (B, m', d), key validity (B, m') and the count of positioned prompt tokens per row."""
        raise NotImplementedError

    def target_embed(self, T, ids: np.ndarray, positions: np.ndarray) -> Tensor:
        S = T["slm"]
        tok = ad.embedding(S["tok_emb"], ids)
        return ad.add(tok, ad.embedding(S["dec.pos_emb"], positions))

    def head(self, T, h: Tensor) -> Tensor:
        return models.lm_head(T["slm"], h)

    def trainable(self, mode: str) -> dict[str, set]:
        raise ContractError(f"training mode {mode!r} does not apply to {type(self).__name__}")

    def new_cache(self, batch: int = 1) -> models.KvCache:
        cache = models.KvCache(self.cfg, batch, self.slm.dtype)
        if self.extra_positions:
            for lst in (cache.k, cache.v):
                for i, buf in enumerate(lst):
                    pad = np.zeros(buf.shape[:2] + (self.extra_positions,) + buf.shape[3:], buf.dtype)
                    lst[i] = np.concatenate([buf, pad], axis=2)
            cache.max_len += self.extra_positions
        return cache


class PlainModel(System):
    def __init__(self, ckpt: Checkpoint):
        if not ckpt.config.has_decoder:
            raise ContractError("a generating system needs a decoder")
        self.slm = ckpt

    def prompt_inputs(self, T, prompts, encodings=None):
        ids, valid = _pad(prompts)
        x = models.embed(T["slm"], self.stack, ids, np.arange(ids.shape[1]))
        return x, valid, valid.sum(axis=1)

    def trainable(self, mode):
        if mode != "slm_baseline":
            return super().trainable(mode)
        return {"slm": set(self.slm.params)}


class PromptTunedModel(System):
    """Frozen-able SLM with ``soft_prompt_len`` learned vectors prepended (no position embedding)."""

    def __init__(self, slm: Checkpoint, prompt: Checkpoint):
        self.slm = slm
        self.prompt = prompt
        if prompt.params["soft_prompt"].shape[1] != slm.config.d_model:
            raise DimensionError("soft prompt width does not match the SLM")

    @classmethod
    def create(cls, slm: Checkpoint, length: int = 16, seed: int = 0) -> "PromptTunedModel":
        cfg = BridgeConfig(d_llm=0, d_slm=slm.config.d_model, projector=False, soft_prompt_len=length)
        return cls(slm, init_bridge(cfg, seed, slm.dtype))

    @property
    def extra_positions(self) -> int:
        return self.prompt.params["soft_prompt"].shape[0]

    def components(self):
        return {"slm": self.slm, "bridge": self.prompt}

    def prompt_inputs(self, T, prompts, encodings=None):
        ids, valid = _pad(prompts)
        B = ids.shape[0]
        x = models.embed(T["slm"], self.stack, ids, np.arange(ids.shape[1]))
        sp = T["bridge"]["soft_prompt"]
        p = sp.shape[0]
        sp = ad.add(ad.reshape(sp, (1, p, sp.shape[1])), Tensor(np.zeros((B, 1, 1), dtype=x.dtype)))
        full_valid = np.concatenate([np.ones((B, p), dtype=bool), valid], axis=1)
        return ad.concat([sp, x], axis=1), full_valid, valid.sum(axis=1)

    def trainable(self, mode):
        if mode != "prompt_tuning_baseline":
            return super().trainable(mode)
        return {"bridge": {"soft_prompt"}}


@dataclass
class HybridBundle(System):
    """Frozen LLM + trainable SLM + bridge (projector and optional vocabulary adapters)."""

    llm: Checkpoint
    slm: Checkpoint
    bridge: Checkpoint
    fusion: FusionMode = FusionMode.ADD
    tokenizer_mode: TokenizerMode = TokenizerMode.LLM_SHARED
    extraction_layer: int | None = None
    llm_id: str = field(default="")

    def __post_init__(self):
        self.fusion = FusionMode(self.fusion)
        self.tokenizer_mode = TokenizerMode(self.tokenizer_mode)
        if self.llm.role != "llm":
            raise ContractError("bundle llm checkpoint must carry role 'llm'")
        lc = self.llm.config
        if lc.arch == "decoder_only":
            if self.extraction_layer is None:
                self.extraction_layer = lc.n_layers
            if not 0 <= self.extraction_layer <= lc.n_layers:
                raise ContractError(f"extraction layer {self.extraction_layer} outside [0, {lc.n_layers}]")
        elif self.extraction_layer not in (None, lc.n_layers):
            raise ContractError("encoder LLMs are read at their last layer")
        bc = self.bridge.config
        if bc.d_llm != lc.d_model or bc.d_slm != self.slm.config.d_model:
            raise DimensionError(f"bridge {bc.d_llm}->{bc.d_slm} does not match llm {lc.d_model} / slm {self.slm.config.d_model}")
        cross_family = self.llm_vocab != self.slm_vocab
        need_adapters = cross_family and self.tokenizer_mode is TokenizerMode.LLM_SHARED
        if bc.shared_embedding != need_adapters:
            raise ContractError("embed_proj/new_head must be present iff llm_shared tokenization with a cross-family SLM")
        if not self.llm_id:
            self.llm_id = fingerprint(self.llm)

    @classmethod
    def create(cls, llm: Checkpoint, slm: Checkpoint, fusion="add", tokenizer_mode="llm_shared",
               extraction_layer=None, seed: int = 0) -> "HybridBundle":
        if llm.role != "llm":
            llm = Checkpoint(llm.config, llm.params, "llm", llm.step, llm.vocab)
        lv, sv = llm.vocab or BYTE_VOCAB, slm.vocab or BYTE_VOCAB
        shared = lv != sv and TokenizerMode(tokenizer_mode) is TokenizerMode.LLM_SHARED
        bc = BridgeConfig(d_llm=llm.config.d_model, d_slm=slm.config.d_model, vocab_llm=lv.size, shared_embedding=shared)
        return cls(llm, slm, init_bridge(bc, seed, slm.dtype), fusion, tokenizer_mode, extraction_layer)

    # vocabularies
    @property
    def llm_vocab(self) -> Vocab:
        return self.llm.vocab or BYTE_VOCAB

    @property
    def slm_vocab(self) -> Vocab:
        return self.slm.vocab or BYTE_VOCAB

    @property
    def adapters(self) -> bool:
        return self.bridge.config.shared_embedding

    @property
    def in_vocab(self) -> Vocab:
        return self.llm_vocab

    @property
    def out_vocab(self) -> Vocab:
        return self.llm_vocab if self.adapters or self.tokenizer_mode is TokenizerMode.LLM_SHARED else self.slm_vocab

    @property
    def size_ratio(self) -> float:
        return models.param_count(self.llm.config) / models.param_count(self.slm.config)

    def components(self):
        return {"llm": self.llm, "slm": self.slm, "bridge": self.bridge}

    def trainable(self, mode):
        bridge = set(self.bridge.params)
        if mode == "projector_only":
            return {"bridge": bridge}
        if mode == "llm2slm_full":
            slm = set(self.slm.params)
            if self.adapters:
                slm -= {"tok_emb", "head.w", "head.b"}
            return {"slm": slm, "bridge": bridge}
        return super().trainable(mode)

    # LLM side
    def llm_hidden(self, L: Mapping[str, Tensor], ids: np.ndarray, valid: np.ndarray) -> Tensor:
        cfg = self.llm.config
        pos = np.arange(ids.shape[1])
        if cfg.arch == "decoder_only":
            x = models.embed(L, "dec", ids, pos)
            if self.extraction_layer == 0:
                return x
            return models.decoder_stack(L, cfg, x, valid=valid, depth=self.extraction_layer, final_norm=False)
        return models.encoder_stack(L, cfg, models.embed(L, "enc", ids, pos), valid=valid)

    def encode_prompts(self, prompts):
        """Frozen LLM pass over a batch of prompts -> list of (m_i, d_llm) arrays."""
        ids, valid = _pad(prompts)
        for i, s in enumerate(prompts):
            if len(s) == 0:
                raise ContractError("empty prompt")
            if len(s) > self.llm.config.max_seq_len:
                raise models.LengthError(f"prompt length {len(s)} > LLM max_seq_len")
        H = self.llm_hidden(self.llm.tensors(), ids, valid).data
        return [H[i, : len(s)] for i, s in enumerate(prompts)]

    def slm_prompt_ids(self, prompt: list[int]) -> list[int]:
        if self.tokenizer_mode is TokenizerMode.LLM_SHARED or self.llm_vocab == self.slm_vocab:
            return prompt
        return encode(self.slm_vocab, decode(self.llm_vocab, prompt), add_eos=True)

    def target_ids(self, text):
        return encode(self.out_vocab, text, add_eos=True)

    def prompt_inputs(self, T, prompts, encodings=None):
        if encodings is None:
            encodings = self.encode_prompts(prompts)
        H, valid = _pad_matrices(encodings, self.llm.dtype)
        Z = project_t(T["bridge"], Tensor(H.astype(self.slm.dtype, copy=False)))
        S = T["slm"]
        if self.fusion is FusionMode.REPLACE:
            return Z, valid, valid.sum(axis=1)
        if self.adapters:
            ids, _ = _pad(prompts)
            e = linear(T["bridge"], "embed_proj", ad.embedding(T["llm"]["tok_emb"], ids))
            E = ad.add(e, ad.embedding(S[self.stack + ".pos_emb"], np.arange(ids.shape[1])))
        else:
            sids = [self.slm_prompt_ids(p) for p in prompts]
            if any(len(a) != len(b) for a, b in zip(sids, prompts)):
                raise AlignmentError("slm_native tokenization yields a different prompt length than the LLM; "
                                     "add fusion needs tokenizer_mode='llm_shared'")
            ids, _ = _pad(sids)
            E = models.embed(S, self.stack, ids, np.arange(ids.shape[1]))
        return fuse_t(self.fusion, Z, E), valid, valid.sum(axis=1)

    def target_embed(self, T, ids, positions):
        if not self.adapters:
            return super().target_embed(T, ids, positions)
        e = linear(T["bridge"], "embed_proj", ad.embedding(T["llm"]["tok_emb"], ids))
        return ad.add(e, ad.embedding(T["slm"]["dec.pos_emb"], positions))

    def head(self, T, h):
        if self.adapters:
            return linear(T["bridge"], "new_head", h)
        return super().head(T, h)

    # persistence
    def save(self, manifest_path) -> None:
        manifest_path = Path(manifest_path)
        stem = manifest_path.with_suffix("")
        paths = {}
        for role, ck in self.components().items():
            p = stem.parent / f"{stem.name}.{role}.l2s"
            ck.save(p)
            paths[f"{role}_path"] = p.name
        manifest = {**paths, "fusion": self.fusion.value, "tokenizer_mode": self.tokenizer_mode.value,
                    "extraction_layer": self.extraction_layer}
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, manifest_path) -> "HybridBundle":
        manifest_path = Path(manifest_path)
        man = json.loads(manifest_path.read_text())
        root = manifest_path.parent
        ck = {r: Checkpoint.load(root / man[f"{r}_path"]) for r in ("llm", "slm", "bridge")}
        return cls(ck["llm"], ck["slm"], ck["bridge"], man["fusion"], man["tokenizer_mode"], man["extraction_layer"])


def _pad_matrices(mats: list[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    m = max(a.shape[0] for a in mats)
    out = np.zeros((len(mats), m, mats[0].shape[1]), dtype=dtype)
    valid = np.zeros((len(mats), m), dtype=bool)
    for i, a in enumerate(mats):
        out[i, : a.shape[0]] = a
        valid[i, : a.shape[0]] = True
    return out, valid


def as_system(obj) -> System:
    if isinstance(obj, System):
        return obj
    if isinstance(obj, Checkpoint):
        return PlainModel(obj)
    raise TypeError(f"cannot decode with {type(obj).__name__}")


# --------------------------------------------------------------------------- public operations


def encode_prompt(bundle: HybridBundle, tokens) -> PromptEncoding:
    """Single frozen LLM pass; decoder-only LLMs are read after block ``extraction_layer``."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("empty prompt")
    H = bundle.encode_prompts([tokens])[0]
    return PromptEncoding(H, bundle.llm_id, bundle.extraction_layer if bundle.extraction_layer is not None else bundle.llm.config.n_layers)


def build_slm_inputs(bundle: HybridBundle, prompt, decoded=()) -> SlmInputs:
    """Embedded SLM inputs for ``prompt`` (LLM-vocab ids) and decoded-so-far tokens.

    The decoder stream is BOS followed by ``decoded``; for a decoder-only SLM it
    is appended to the fused prompt, giving ``m + 1 + len(decoded)`` rows.
    """
    from .tokenizer import BOS

    T = bundle.tensors()
    emb, _, npos = bundle.prompt_inputs(T, [list(prompt)])
    dec_ids = np.asarray([[BOS, *decoded]], dtype=np.int64)
    start = int(npos[0]) if bundle.stack == "dec" else 0
    tgt = bundle.target_embed(T, dec_ids, np.arange(start, start + dec_ids.shape[1]))
    if bundle.stack == "dec":
        return SlmInputs(None, np.concatenate([emb.data[0], tgt.data[0]]), emb.shape[1])
    return SlmInputs(emb.data[0], tgt.data[0], emb.shape[1])


def system_flops(system, m: int, n: int, cached: bool = True) -> int:
    """Closed-form dense FLOPs for prompt length m (LLM tokens) and n generated tokens."""
    system = as_system(system)
    cfg = system.cfg
    if isinstance(system, PlainModel):
        return models.flops(cfg, m, n, cached)
    if isinstance(system, PromptTunedModel):
        p = system.extra_positions
        base = models.flops(cfg, m + p, n, cached)
        if cfg.arch == "decoder_only" and not cached:
            base = models.flops(cfg, m, n, cached) + n * p * cfg.n_layers * models.layer_flops(cfg, "dec")
        return base
    return llm_side_flops(system, m) + models.flops(cfg, m, n, cached) + adapter_flops(system, m, n, cached)


def llm_side_flops(bundle: HybridBundle, m: int) -> int:
    """LLM prefill plus projector: the entire extra cost of conditioning."""
    lc = bundle.llm.config
    if lc.arch == "decoder_only":
        llm = m * bundle.extraction_layer * models.layer_flops(lc, "dec")
    else:
        llm = m * lc.n_layers * models.layer_flops(lc, "enc")
    dl, ds = bundle.bridge.config.d_llm, bundle.bridge.config.d_slm
    return llm + 2 * m * (dl * ds + ds * ds)


def adapter_flops(bundle: HybridBundle, m: int, n: int, cached: bool = True) -> int:
    if not bundle.adapters:
        return 0
    cfg = bundle.slm.config
    dl, ds = bundle.bridge.config.d_llm, cfg.d_model
    head_delta = 2 * ds * (bundle.bridge.config.vocab_llm - cfg.vocab_size)
    prompt = m if bundle.fusion is FusionMode.ADD else 0
    if cached:
        return 2 * dl * ds * (prompt + n) + n * head_delta
    tri = n * (n + 1) // 2
    return 2 * dl * ds * (prompt + tri) + tri * head_delta


def save_system(system, path) -> None:
    """``.l2s`` checkpoint for plain models, JSON manifest (plus sibling checkpoints) otherwise."""
    system = as_system(system)
    path = Path(path)
    if isinstance(system, PlainModel):
        system.slm.save(path)
    elif isinstance(system, HybridBundle):
        system.save(path)
    else:
        stem = path.with_suffix("")
        names = {}
        for role, ck in system.components().items():
            p = stem.parent / f"{stem.name}.{role}.l2s"
            ck.save(p)
            names[f"{role}_path"] = p.name
        path.write_text(json.dumps({"kind": "prompt_tuned", **names}, indent=1, sort_keys=True) + "\n")


def load_system(path) -> System:
    path = Path(path)
    if path.suffix != ".json":
        ck = Checkpoint.load(path)
        return PlainModel(ck)
    man = json.loads(path.read_text())
    if man.get("kind") == "prompt_tuned":
        return PromptTunedModel(Checkpoint.load(path.parent / man["slm_path"]),
                                Checkpoint.load(path.parent / man["bridge_path"]))
    return HybridBundle.load(path)
