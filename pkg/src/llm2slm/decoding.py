"""Greedy, nucleus and beam decoding plus speculative decoding.

Decoding talks to a *session*: an object holding the per-generation state
(KV cache, cross-attention memory) of one system on one prompt. A session
exposes ``next_logits`` (B, V), ``feed(tokens (B, k)) -> logits (B, k, V)``,
``rewind(k)`` and ``reorder(index)``. Anything implementing ``open_session``
can be decoded, which is how the hand-built logit tables in the tests plug in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import ContractError, Tensor
from .bridge import HybridBundle, PlainModel, System, as_system
from .rng import Rng
from .tokenizer import BOS, EOS

STRATEGIES = ("greedy", "nucleus", "beam")


@dataclass
class GenerationParams:
    strategy: str = "greedy"
    max_new_tokens: int = 64
    beam_width: int = 4
    length_penalty: float = 0.6
    top_p: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ContractError("beam_width must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ContractError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ContractError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ContractError("temperature must be >= 0")


@dataclass
class SpecDecParams:
    draft_len: int = 4
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.draft_len < 1:
            raise ContractError("draft_len must be >= 1")


# --------------------------------------------------------------------------- sessions


class Session:
    """KV-cached (or recomputing) decoding state of one system on one prompt.

    ``encoding`` is a precomputed prompt encoding: the LLM hidden states for a
    bundle, or the encoder output for a plain encoder-decoder model.
    """

    def __init__(self, system: System, prompt: list[int], encoding: np.ndarray | None = None,
                 use_cache: bool = True):
        self.system = system
        self.cfg = system.cfg
        self.T = system.tensors()
        self.use_cache = use_cache
        self.feeds = 0
        S = self.T["slm"]
        if isinstance(system, PlainModel) and encoding is not None and self.cfg.arch == "encoder_decoder":
            memory = Tensor(encoding[None].astype(system.slm.dtype, copy=False))
            valid = np.ones((1, encoding.shape[0]), dtype=bool)
            emb = None
        else:
            emb, valid, npos = system.prompt_inputs(self.T, [prompt], None if encoding is None else [encoding])
            memory = None
        self.prompt_emb = None
        self.memory = None
        self.cross = None
        self.cross_valid = None
        self.pos = 0
        if self.cfg.arch == "encoder_decoder":
            self.memory = memory if memory is not None else models.encoder_stack(S, self.cfg, emb, valid)
            self.cross_valid = valid
            if use_cache:
                self.cross = models.cross_kv(S, self.cfg, self.memory)
        else:
            self.prompt_emb = emb
            self.pos = int(npos[0])
        self.start_pos = self.pos
        self.tokens: list[np.ndarray] = []
        self.history: list[np.ndarray] = []
        if use_cache:
            self.cache = system.new_cache(1)
            if self.prompt_emb is not None:
                models.decoder_stack(S, self.cfg, self.prompt_emb, cache=self.cache)
        self._feed_ids(np.array([[BOS]], dtype=np.int64))

    @property
    def batch(self) -> int:
        return self.history[-1].shape[0]

    @property
    def next_logits(self) -> np.ndarray:
        """Logits (B, V) for the next token."""
        return self.history[-1]

    @property
    def length(self) -> int:
        """Number of tokens fed after BOS."""
        return len(self.history) - 1

    def _feed_ids(self, ids: np.ndarray) -> np.ndarray:
        k = ids.shape[1]
        if self.pos + k > self.cfg.max_seq_len:
            raise models.LengthError(f"decoder position {self.pos + k - 1} >= max_seq_len {self.cfg.max_seq_len}")
        if self.use_cache:
            x = self.system.target_embed(self.T, ids, np.arange(self.pos, self.pos + k))
            h = models.decoder_stack(self.T["slm"], self.cfg, x, cache=self.cache, cross=self.cross,
                                     cross_valid=self.cross_valid)
            logits = self.system.head(self.T, h).data
        else:
            self.tokens.append(ids)
            logits = self._recompute()[:, -k:]
        self.pos += k
        for j in range(k):
            self.history.append(logits[:, j])
        return logits

    def _recompute(self) -> np.ndarray:
        """Uncached path: rerun the decoder over the whole stream."""
        ids = np.concatenate(self.tokens, axis=1)
        self.tokens = [ids]
        B, n = ids.shape
        S = self.T["slm"]
        x = self.system.target_embed(self.T, ids, np.arange(self.start_pos, self.start_pos + n))
        if self.prompt_emb is not None:
            pe = self.prompt_emb
            if pe.shape[0] != B:
                pe = Tensor(np.repeat(pe.data, B, axis=0))
            h = models.decoder_stack(S, self.cfg, ad.concat([pe, x], axis=1))
            h = ad.index(h, (slice(None), slice(pe.shape[1], None)))
        else:
            cross = models.cross_kv(S, self.cfg, self.memory)
            h = models.decoder_stack(S, self.cfg, x, cross=cross, cross_valid=self.cross_valid)
        return self.system.head(self.T, h).data

    def feed(self, tokens) -> np.ndarray:
        """Append tokens (B, k); returns logits (B, k, V), row j predicting the token after tokens[:, j]."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        self.feeds += 1
        return self._feed_ids(ids)

    def rewind(self, k: int) -> None:
        """Forget the last ``k`` fed tokens."""
        if k == 0:
            return
        if k > self.length:
            raise ContractError("cannot rewind past the decoder start token")
        del self.history[-k:]
        self.pos -= k
        if self.use_cache:
            self.cache.rewind(self.cache.filled_len - k)
        else:
            self.tokens = [np.concatenate(self.tokens, axis=1)[:, :-k]]

    def reorder(self, index) -> None:
        """Select / duplicate batch rows (beam bookkeeping)."""
        index = np.asarray(index)
        self.history = [h[index] for h in self.history]
        if self.use_cache:
            self.cache.reorder(index)
            if self.cross is not None:
                self.cross = [(Tensor(k.data[index]), Tensor(v.data[index])) for k, v in self.cross]
        else:
            self.tokens = [t[index] for t in self.tokens]
        if self.memory is not None:
            self.memory = Tensor(self.memory.data[index])
        if self.prompt_emb is not None:
            self.prompt_emb = Tensor(self.prompt_emb.data[index])
        if self.cross_valid is not None:
            self.cross_valid = self.cross_valid[index]


def open_session(model, prompt, encoding=None, use_cache: bool = True):
    if hasattr(model, "open_session"):
        return model.open_session(prompt)
    system = as_system(model)
    sess = Session(system, prompt, encoding, use_cache)
    return sess


def prompt_encoding_for(system: System, prompt: list[int]) -> np.ndarray | None:
    if isinstance(system, HybridBundle):
        return system.encode_prompts([prompt])[0]
    return None


# --------------------------------------------------------------------------- scoring helpers


def beam_score(log_prob_sum: float, length: int, alpha: float) -> float:
    """Length-normalised score ``log_prob_sum / ((5 + length) / 6) ** alpha``."""
    if length < 1:
        raise ContractError("length must be >= 1")
    return log_prob_sum / ((5.0 + length) / 6.0) ** alpha


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return ad.log_softmax_np(logits.astype(np.float64))


def nucleus_probs(logits: np.ndarray, top_p: float = 1.0, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled, top-p truncated, renormalised distribution (float64)."""
    x = logits.astype(np.float64)
    if temperature == 0:
        p = np.zeros_like(x)
        p[int(np.argmax(x))] = 1.0
        return p
    x = x / temperature
    p = np.exp(x - x.max())
    p /= p.sum()
    if top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        cut = int(np.searchsorted(cum, top_p, side="left")) + 1
        keep = np.zeros_like(p, dtype=bool)
        keep[order[:cut]] = True
        p = np.where(keep, p, 0.0)
        p /= p.sum()
    return p


# --------------------------------------------------------------------------- generation


def _resolve(model, prompt):
    if hasattr(model, "open_session"):
        return None, list(prompt)
    system = as_system(model)
    return system, system.prompt_ids(prompt)


def _check_budget(system: System | None, prompt: list[int], n: int) -> None:
    if not prompt:
        raise ContractError("empty prompt")
    if system is None:
        return
    cfg = system.cfg
    m = len(prompt)
    budget = cfg.max_seq_len - m if cfg.arch == "decoder_only" else cfg.max_seq_len
    if n > budget:
        raise models.LengthError(f"max_new_tokens={n} exceeds the {budget} positions left after a {m}-token prompt")


def generate(model, prompt, params: GenerationParams | None = None, *, use_cache: bool = True,
             suppress_eos: bool = False, encoding: np.ndarray | None = None) -> list[int]:
    """Decode up to ``params.max_new_tokens`` tokens; the output ends with EOS unless truncated."""
    params = params or GenerationParams()
    system, ids = _resolve(model, prompt)
    _check_budget(system, ids, params.max_new_tokens)
    sess = open_session(model, ids, encoding, use_cache) if system is None else Session(system, ids, encoding, use_cache)
    if params.strategy == "beam":
        return _beam(sess, params, suppress_eos)
    return _sample_loop(sess, params, suppress_eos)


def _sample_loop(sess, params: GenerationParams, suppress_eos: bool) -> list[int]:
    rng = Rng(params.seed) if params.strategy == "nucleus" else None
    out: list[int] = []
    logits = sess.next_logits[0]
    for i in range(params.max_new_tokens):
        if suppress_eos:
            logits = logits.copy()
            logits[EOS] = -np.inf
        if rng is None:
            tok = int(np.argmax(logits))
        else:
            tok = rng.categorical(nucleus_probs(logits, params.top_p, params.temperature))
        out.append(tok)
        if tok == EOS or i == params.max_new_tokens - 1:
            break
        logits = sess.feed([[tok]])[0, -1]
    return out


def _beam(sess, params: GenerationParams, suppress_eos: bool) -> list[int]:
    """Shrinking beam: each step keeps the best ``width - finished`` expansions;
    expansions ending in EOS retire into the finished pool."""
    W, alpha, n = params.beam_width, params.length_penalty, params.max_new_tokens
    seqs: list[list[int]] = [[]]
    sums = np.zeros(1)
    finished: list[tuple[float, list[int]]] = []
    for step in range(n):
        lp = log_softmax(sess.next_logits)
        if suppress_eos:
            lp[:, EOS] = -np.inf
        cand = (sums[:, None] + lp).reshape(-1)
        V = lp.shape[1]
        slots = W - len(finished)
        order = np.lexsort((np.arange(cand.size), -cand))[:slots]
        keep_rows, keep_toks, keep_sums = [], [], []
        for flat in order:
            if not np.isfinite(cand[flat]):
                continue
            row, tok = divmod(int(flat), V)
            seq = seqs[row] + [tok]
            if tok == EOS:
                finished.append((beam_score(float(cand[flat]), len(seq), alpha), seq))
            elif step == n - 1:
                finished.append((beam_score(float(cand[flat]), len(seq), alpha), seq))
            else:
                keep_rows.append(row)
                keep_toks.append(tok)
                keep_sums.append(float(cand[flat]))
        if not keep_rows:
            break
        sess.reorder(keep_rows)
        seqs = [seqs[r] + [t] for r, t in zip(keep_rows, keep_toks)]
        sums = np.array(keep_sums)
        sess.feed(np.array(keep_toks, dtype=np.int64)[:, None])
    best = max(finished, key=lambda f: f[0])
    return best[1]


# --------------------------------------------------------------------------- speculative decoding


def verify_draft_token(p: np.ndarray, q: np.ndarray, token: int, rng: Rng) -> tuple[bool, int]:
    """Accept ``token`` ~ q with probability min(1, p/q); otherwise resample from norm(max(0, p - q))."""
    u = rng.uniform()
    if u * q[token] < p[token]:
        return True, token
    residual = np.maximum(p - q, 0.0)
    total = residual.sum()
    return False, rng.categorical(residual if total > 0 else p)


def acceptance_mass(p: np.ndarray, q: np.ndarray) -> float:
    """Expected acceptance probability sum_x min(p(x), q(x))."""
    return float(np.minimum(p, q).sum())


def speculative_generate(target, draft, prompt, spec: SpecDecParams | None = None,
                         params: GenerationParams | None = None) -> list[int]:
    """Draft ``spec.draft_len`` tokens, verify them with one target pass, repeat.

    Greedy params verify by argmax agreement (output identical to target
    greedy); nucleus params use the rejection rule of :func:`verify_draft_token`.
    Statistics land in ``spec.stats``.
    """
    spec = spec or SpecDecParams()
    params = params or GenerationParams()
    if params.strategy == "beam":
        raise ContractError("speculative decoding supports greedy or nucleus verification")
    tsys, dsys = as_system(target), as_system(draft)
    if tsys.out_vocab != dsys.out_vocab:
        raise ContractError(f"target vocabulary {tsys.out_vocab.name} != draft vocabulary {dsys.out_vocab.name}")
    ids = tsys.prompt_ids(prompt)
    _check_budget(tsys, ids, params.max_new_tokens)
    _check_budget(dsys, ids, params.max_new_tokens)
    n, gamma = params.max_new_tokens, spec.draft_len
    greedy = params.strategy == "greedy"
    rng = Rng(params.seed)

    # one LLM pass serves both the target decoder and the draft's projector
    shared = None
    encoder_calls = 0
    if isinstance(dsys, HybridBundle):
        shared = dsys.encode_prompts([ids])[0]
        encoder_calls += 1
    t_enc = shared if (shared is not None and isinstance(tsys, PlainModel) and tsys.slm is dsys.llm) else None
    if t_enc is None and tsys.cfg.arch == "encoder_decoder":
        encoder_calls += 1
    tsess = Session(tsys, ids, t_enc)
    dsess = Session(dsys, ids, shared)

    def dist(logits):
        if greedy:
            return None
        return nucleus_probs(logits, params.top_p, params.temperature)

    out: list[int] = []
    pending: int | None = None
    calls = proposed = accepted = 0
    done = False
    while len(out) < n and not done:
        g = min(gamma, n - len(out))
        if pending is not None:
            dsess.feed([[pending]])
        drafts, qs = [], []
        for j in range(g):
            logits = dsess.next_logits[0]
            if greedy:
                x = int(np.argmax(logits))
                qs.append(None)
            else:
                q = dist(logits)
                x = rng.categorical(q)
                qs.append(q)
            drafts.append(x)
            if j < g - 1:
                dsess.feed([[x]])
        before = tsess.next_logits[0]
        to_feed = ([pending] if pending is not None else []) + drafts[:-1]
        rows = tsess.feed([to_feed])[0] if to_feed else np.zeros((0, before.shape[0]))
        calls += 1
        if pending is not None:
            # rows[0] is the distribution after the pending token
            target_rows = list(rows)
        else:
            target_rows = [before] + list(rows)
        proposed += g
        emitted = []
        for j, x in enumerate(drafts):
            p_logits = target_rows[j]
            if greedy:
                best = int(np.argmax(p_logits))
                ok, tok = (best == x), best
            else:
                ok, tok = verify_draft_token(dist(p_logits), qs[j], x, rng)
            emitted.append(tok)
            if not ok:
                break
            accepted += 1
            if tok == EOS:
                break
        stop_j = len(emitted) - 1
        # both sessions hold pending + drafts[:g-1]; keep only what was emitted before the last token
        drop = (g - 1) - stop_j
        tsess.rewind(drop)
        dsess.rewind(drop)
        for tok in emitted:
            out.append(tok)
            if tok == EOS or len(out) == n:
                done = True
                break
        pending = emitted[-1]
    spec.stats.update(
        target_calls=calls, proposed=proposed, accepted=accepted,
        acceptance_rate=accepted / proposed if proposed else 0.0,
        llm_encoder_calls=encoder_calls, draft_feeds=dsess.feeds, target_feeds=tsess.feeds,
    )
    return out


def predict(model, prompts, params: GenerationParams | None = None) -> list[str]:
    """Decode each prompt and return the output text (up to EOS)."""
    from .tokenizer import decode_str, strip_at_eos

    system = as_system(model)
    params = params or GenerationParams(max_new_tokens=32)
    return [decode_str(system.out_vocab, strip_at_eos(generate(system, p, params))) for p in prompts]
