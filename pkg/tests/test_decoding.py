import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llm2slm import decoding as dec
from llm2slm.autodiff import ContractError
from llm2slm.bridge import HybridBundle
from llm2slm.decoding import GenerationParams, SpecDecParams, beam_score, generate, speculative_generate
from llm2slm.models import LengthError, ModelConfig, init_checkpoint
from llm2slm.rng import Rng
from llm2slm.tokenizer import EOS, SLM_VOCAB


class TableSession:
    """Logits looked up from a prefix -> row table (for hand-checked decoding)."""

    def __init__(self, table):
        self.table = table
        self.prefixes = [()]
        self.history = [np.array([table[()]])]

    @property
    def next_logits(self):
        return self.history[-1]

    def feed(self, tokens):
        tokens = np.asarray(tokens)
        self.prefixes = [p + (int(t),) for p, t in zip(self.prefixes, tokens[:, 0])]
        self.history.append(np.array([self.table[p] for p in self.prefixes]))
        return self.history[-1][:, None]

    def reorder(self, index):
        self.prefixes = [self.prefixes[i] for i in index]
        self.history = [h[index] for h in self.history]


class TableModel:
    def __init__(self, table):
        self.table = table

    def open_session(self, prompt):
        return TableSession(self.table)


def log_softmax(row):
    row = np.asarray(row, dtype=np.float64)
    return row - row.max() - math.log(np.exp(row - row.max()).sum())


# three tokens {0, 1, EOS=2}; greedy takes 0 first but the best two-step path starts with 1
TABLE = {
    (): [1.0, 0.8, -3.0],
    (0,): [0.0, 0.1, 0.05],
    (1,): [4.0, -1.0, -1.0],
}


def brute_force_best(table, n, alpha):
    """Score every path of length <= n that ends in EOS or reaches n tokens."""
    best = None
    for length in range(1, n + 1):
        for path in itertools.product(range(3), repeat=length):
            if EOS in path[:-1] or (length < n and path[-1] != EOS):
                continue
            lp = sum(log_softmax(table[path[:i]])[t] for i, t in enumerate(path))
            score = beam_score(lp, length, alpha)
            if best is None or score > best[0]:
                best = (score, list(path))
    return best[1]


def test_beam_matches_brute_force_on_hand_table():
    model = TableModel(TABLE)
    beam = generate(model, [5], GenerationParams("beam", max_new_tokens=2, beam_width=2))
    assert beam == brute_force_best(TABLE, 2, 0.6) == [1, 0]
    assert generate(model, [5], GenerationParams("greedy", max_new_tokens=2)) == [0, 1]


def test_beam_score_examples():
    assert beam_score(-3.0, 9, 0.0) == -3.0
    assert beam_score(-3.0, 1, 0.6) == -3.0
    assert beam_score(-2.0, 7, 0.6) == pytest.approx(-2 / 2**0.6)
    assert round(beam_score(-2.0, 7, 0.6), 4) == -1.3195
    with pytest.raises(ContractError):
        beam_score(-1.0, 0, 0.6)


@pytest.mark.parametrize("arch", ["encoder_decoder", "decoder_only"])
def test_beam_width_one_equals_greedy(arch):
    ck = init_checkpoint(ModelConfig(arch, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64), seed=11)
    for prompt in ["translate: abc", "translate: zz", "q"]:
        g = generate(ck, prompt, GenerationParams(max_new_tokens=10))
        b = generate(ck, prompt, GenerationParams("beam", max_new_tokens=10, beam_width=1, length_penalty=1.7))
        assert g == b


def test_nucleus_at_zero_temperature_is_greedy(tiny_encdec):
    g = generate(tiny_encdec, "translate: abc", GenerationParams(max_new_tokens=8))
    s = generate(tiny_encdec, "translate: abc", GenerationParams("nucleus", max_new_tokens=8, temperature=0.0, seed=3))
    assert g == s


def test_nucleus_is_deterministic_given_seed(tiny_encdec):
    p = GenerationParams("nucleus", max_new_tokens=8, top_p=0.9, seed=4)
    assert generate(tiny_encdec, "abc", p) == generate(tiny_encdec, "abc", p)


def test_nucleus_frequencies_match_softmax_within_three_sigma():
    logits = np.array([2.0, 1.0, 0.5, 0.0, -1.0])
    probs = np.exp(logits) / np.exp(logits).sum()
    rng = Rng(123)
    trials = 100_000
    counts = np.zeros(5)
    for _ in range(trials):
        counts[rng.categorical(dec.nucleus_probs(logits, 1.0, 1.0))] += 1
    sigma = np.sqrt(trials * probs * (1 - probs))
    assert np.all(np.abs(counts - trials * probs) < 3 * sigma)


def test_top_p_truncates_to_smallest_covering_set():
    logits = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
    p = dec.nucleus_probs(logits, top_p=0.7)
    assert np.allclose(p, [0.5 / 0.8, 0.3 / 0.8, 0, 0])


@pytest.mark.parametrize("strategy", ["greedy", "beam", "nucleus"])
@pytest.mark.parametrize("arch", ["encoder_decoder", "decoder_only"])
def test_cache_and_recompute_agree(strategy, arch):
    ck = init_checkpoint(ModelConfig(arch, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64), seed=12)
    p = GenerationParams(strategy, max_new_tokens=8, beam_width=3, top_p=0.9, seed=2)
    assert generate(ck, "translate: ab", p) == generate(ck, "translate: ab", p, use_cache=False)


def test_generate_errors(tiny_deconly):
    with pytest.raises(ContractError):
        generate(tiny_deconly, [], GenerationParams())
    with pytest.raises(LengthError):
        generate(tiny_deconly, "x" * 40, GenerationParams(max_new_tokens=20))
    with pytest.raises(ContractError):
        GenerationParams(beam_width=0)
    with pytest.raises(ContractError):
        GenerationParams(top_p=0.0)


def test_generation_stops_at_eos_or_budget(tiny_encdec):
    out = generate(tiny_encdec, "abc", GenerationParams(max_new_tokens=6))
    assert len(out) <= 6
    assert EOS not in out[:-1]
    assert len(generate(tiny_encdec, "abc", GenerationParams(max_new_tokens=6), suppress_eos=True)) == 6


# --------------------------------------------------------------------------- speculative decoding


def test_verify_acceptance_rate_matches_overlap_mass():
    p = np.array([0.7, 0.2, 0.05, 0.05])
    q = np.full(4, 0.25)
    rng = Rng(7)
    trials = 100_000
    accepted = 0
    for _ in range(trials):
        x = rng.categorical(q)
        ok, _ = dec.verify_draft_token(p, q, x, rng)
        accepted += ok
    assert abs(accepted / trials - dec.acceptance_mass(p, q)) < 0.01


def test_verify_output_follows_target_distribution():
    p = np.array([0.1, 0.6, 0.3])
    q = np.array([0.5, 0.25, 0.25])
    rng = Rng(8)
    trials = 60_000
    counts = np.zeros(3)
    for _ in range(trials):
        _, tok = dec.verify_draft_token(p, q, rng.categorical(q), rng)
        counts[tok] += 1
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) < 4 * sigma)


def test_draft_equal_to_target_accepts_everything(tiny_llm):
    n, gamma = 13, 4
    spec = SpecDecParams(gamma)
    out = speculative_generate(tiny_llm, tiny_llm, "translate: abc", spec, GenerationParams(max_new_tokens=n))
    ref = generate(tiny_llm, "translate: abc", GenerationParams(max_new_tokens=n))
    assert out == ref
    if len(out) == n:
        assert spec.stats["target_calls"] == math.ceil(n / gamma)
    assert spec.stats["accepted"] == spec.stats["proposed"] or EOS in out


def test_greedy_speculative_equals_target_with_untrained_draft(tiny_llm, tiny_encdec):
    draft = HybridBundle.create(tiny_llm, tiny_encdec, seed=5)
    for k, prompt in enumerate(["translate: abc", "translate: hello", "x"]):
        spec = SpecDecParams(3)
        p = GenerationParams(max_new_tokens=12)
        out = speculative_generate(tiny_llm, draft, prompt, spec, p)
        assert out == generate(tiny_llm, prompt, p)
        assert math.ceil(len(out) / 3) <= spec.stats["target_calls"] <= len(out)
        assert spec.stats["llm_encoder_calls"] == 1


def test_speculative_rejects_vocabulary_mismatch(tiny_llm):
    slm = init_checkpoint(ModelConfig("encoder_decoder", d_model=16, n_layers=1, n_heads=2, d_ff=32,
                                      vocab_size=SLM_VOCAB.size, max_seq_len=48), seed=1, vocab=SLM_VOCAB)
    with pytest.raises(ContractError):
        speculative_generate(tiny_llm, slm, "abc")


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_sampled_speculative_is_seed_deterministic(gamma, seed):
    target = init_checkpoint(ModelConfig("encoder_decoder", d_model=16, n_layers=1, n_heads=2, d_ff=32,
                                         max_seq_len=48), seed=21)
    draft = init_checkpoint(ModelConfig("decoder_only", d_model=16, n_layers=1, n_heads=2, d_ff=32,
                                        max_seq_len=48), seed=22)
    p = GenerationParams("nucleus", max_new_tokens=6, seed=seed)
    a = speculative_generate(target, draft, "ab", SpecDecParams(gamma), p)
    b = speculative_generate(target, draft, "ab", SpecDecParams(gamma), p)
    assert a == b and 1 <= len(a) <= 6
