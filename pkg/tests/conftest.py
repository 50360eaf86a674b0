import numpy as np
import pytest

from llm2slm.models import ModelConfig, init_checkpoint


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-3) -> float:
    """||a - b|| / (||a|| + ||b||); the floor keeps exactly-zero gradients from dividing noise by noise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


TINY = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=48)


@pytest.fixture
def tiny_encdec():
    return init_checkpoint(ModelConfig("encoder_decoder", **TINY), seed=1)


@pytest.fixture
def tiny_deconly():
    return init_checkpoint(ModelConfig("decoder_only", **TINY), seed=2)


@pytest.fixture
def tiny_llm():
    return init_checkpoint(ModelConfig("encoder_decoder", d_model=24, n_layers=2, n_heads=2, d_ff=48,
                                       max_seq_len=48), seed=3, role="llm")
