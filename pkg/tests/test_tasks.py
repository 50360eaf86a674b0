import pytest
from hypothesis import given, settings, strategies as st

from llm2slm import tasks
from llm2slm.tasks import (TaskCapacityError, TaskSpec, body_of, generate_task, reverse_body, strip_noise,
                           substitution_key, transform, write_task)


def test_reversal_example():
    spec = TaskSpec("reversal_translation")
    assert transform(spec, "abc") == "cba"


@pytest.mark.parametrize("kind", tasks.KINDS)
def test_every_prompt_carries_the_task_prefix(kind):
    train, test = generate_task(TaskSpec(kind, n_train=50, n_test=10))
    assert all(r["prompt"].startswith(tasks.PREFIX[kind]) for r in train + test)
    assert all(r["source"] == "gt" for r in train + test)


@pytest.mark.parametrize("kind", tasks.KINDS)
def test_splits_are_prompt_disjoint(kind):
    train, test = generate_task(TaskSpec(kind, n_train=300, n_test=100, seed=4))
    assert len(train) == 300 and len(test) == 100
    assert not {r["prompt"] for r in train} & {r["prompt"] for r in test}
    assert len({r["prompt"] for r in train}) == 300


def test_same_seed_gives_byte_identical_files(tmp_path):
    spec = TaskSpec("keyed_substitution_translation", n_train=40, n_test=10, seed=7)
    a = write_task(spec, tmp_path / "a")
    b = write_task(spec, tmp_path / "b")
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    c = write_task(TaskSpec("keyed_substitution_translation", n_train=40, n_test=10, seed=8), tmp_path / "c")
    assert c[0].read_bytes() != a[0].read_bytes()


def test_substitution_key_is_a_derangement():
    key = substitution_key("abcdefgh", key_seed=3)
    assert sorted(key) == sorted(key.values()) == list("abcdefgh")
    assert all(k != v for k, v in key.items())


def test_keyed_substitution_is_not_a_copy():
    spec = TaskSpec("keyed_substitution_translation", n_train=100, n_test=10)
    train, _ = generate_task(spec)
    key = substitution_key(spec.alphabet, spec.key_seed)
    inverse = {v: k for k, v in key.items()}
    for r in train:
        body = body_of(r["prompt"])
        assert r["target"] != reverse_body(body)
        assert "".join(inverse[c] for c in r["target"])[::-1] == body


def test_extract_summarize_compression_and_oracle():
    spec = TaskSpec("extract_summarize", n_train=100, n_test=10, noise_ratio=2.0)
    train, _ = generate_task(spec)
    for r in train:
        body = body_of(r["prompt"])
        assert strip_noise(body) == r["target"]
        assert len(body) >= 3 * len(r["target"])


def test_extract_summarize_without_noise_is_identity():
    train, _ = generate_task(TaskSpec("extract_summarize", n_train=20, n_test=5, noise_ratio=0.0))
    assert all(body_of(r["prompt"]) == r["target"] for r in train)


def test_capacity_exceeded_is_an_error():
    spec = TaskSpec("reversal_translation", alphabet="ab", min_len=1, max_len=2, n_train=5, n_test=2)
    assert spec.capacity == 6
    with pytest.raises(TaskCapacityError):
        generate_task(spec)


def test_bad_specs():
    with pytest.raises(ValueError):
        TaskSpec("poetry")
    with pytest.raises(ValueError):
        TaskSpec(min_len=5, max_len=2)
    with pytest.raises(ValueError):
        TaskSpec("extract_summarize", alphabet="ABC")


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdef", min_size=1, max_size=20))
def test_reversal_is_an_involution(body):
    spec = TaskSpec("reversal_translation")
    assert transform(spec, transform(spec, body)) == body


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(tasks.KINDS))
def test_targets_follow_the_generator_oracle(seed, kind):
    spec = TaskSpec(kind, n_train=20, n_test=5, seed=seed)
    train, test = generate_task(spec)
    for r in train + test:
        body = body_of(r["prompt"])
        if kind == "extract_summarize":
            assert r["target"] == strip_noise(body)
        else:
            assert r["target"] == transform(spec, body)
        assert spec.min_len <= len(r["target"]) <= spec.max_len
