import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gprompt import autodiff as ad
from gprompt.errors import ShapeError
from gprompt.prompt import (
    PerNodePrompt, PromptBasis, PromptState, SharedPrompt, apply_prompt, attention_weights, attentive_prompts,
    ecr, edit,
)


def test_attention_rows_sum_to_one():
    X = np.random.default_rng(0).standard_normal((5, 3))
    basis = PromptBasis(4, 3, seed=1)
    w = attention_weights(X, basis).value
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    np.testing.assert_allclose(attentive_prompts(X, basis).value, w @ basis.basis.value)


def test_attention_oracle_single_node():
    basis = PromptBasis(2, 2, basis=[[1.0, 0.0], [0.0, 1.0]], projections=[[1.0, 0.0], [0.0, 0.0]])
    p = attentive_prompts(np.array([[np.log(3.0), 5.0]]), basis).value
    # scores (log 3, 0) -> weights (3/4, 1/4)
    np.testing.assert_allclose(p, [[0.75, 0.25]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4))
def test_k1_is_node_identical(seed, n, d):
    X = np.random.default_rng(seed).standard_normal((n, d))
    p = PromptBasis(1, d, seed=seed)(X).value
    assert np.all(p == p[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 5))
def test_identical_projections_are_node_identical(seed, n, k):
    rng = np.random.default_rng(seed)
    d = 3
    proj = np.tile(rng.standard_normal((1, d)), (k, 1))
    basis = PromptBasis(k, d, basis=rng.standard_normal((k, d)), projections=proj)
    p = basis(rng.standard_normal((n, d))).value
    assert np.all(p == p[0])


def test_prompt_shape_errors():
    with pytest.raises(ValueError):
        PromptBasis(0, 3)
    with pytest.raises(ShapeError):
        PromptBasis(2, 3, basis=np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        attention_weights(np.zeros((2, 4)), PromptBasis(2, 3))


def test_shared_and_per_node_prompts():
    X = np.zeros((6, 2))
    shared = SharedPrompt(2, seed=0)(X).value
    assert np.all(shared == shared[0])
    per = PerNodePrompt(3, 2, seed=0)
    p = per(X, n_max=3).value
    np.testing.assert_array_equal(p[:3], p[3:])
    assert not np.allclose(p[0], p[1])
    with pytest.raises(ShapeError):
        per(np.zeros((4, 2)), n_max=3)


@pytest.mark.parametrize("module", ["basis", "projections"])
def test_prompt_gradients(module):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 3))
    basis = PromptBasis(4, 3, basis=rng.standard_normal((4, 3)), projections=rng.standard_normal((4, 3)))
    W = rng.standard_normal((3, 1))
    fn = lambda: ad.mean(ad.square(ad.matmul(apply_prompt(X, basis(X)), W)))  # noqa: E731
    assert ad.grad_check(fn, [getattr(basis, module)]) <= 1e-6


def test_edit_updates_one_row_and_count():
    s0 = PromptState.start(np.zeros((3, 2)))
    s1 = edit(s0, 1, [0.5, -0.5])
    np.testing.assert_array_equal(s1.prompts, [[0, 0], [0.5, -0.5], [0, 0]])
    np.testing.assert_array_equal(s1.counts, [0, 1, 0])
    assert s1.step == 1 and np.all(s0.prompts == 0)
    with pytest.raises(IndexError):
        edit(s0, 3, [0, 0])
    with pytest.raises(ShapeError):
        edit(s0, 0, [1.0])


@pytest.mark.parametrize("counts, expect", [([0, 0, 0, 0], 0.0), ([1, 0, 3, 0], 0.5), ([1, 1, 1, 2], 1.0)])
def test_ecr_values(counts, expect):
    assert ecr(counts) == expect


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 7), max_size=30))
def test_ecr_monotone_and_bounded(n, picks):
    state = PromptState.start(np.zeros((n, 1)))
    prev = ecr(state.counts)
    for v in picks:
        state = edit(state, v % n, [0.1])
        cur = ecr(state.counts)
        assert 0.0 <= prev <= cur <= 1.0
        prev = cur
    assert (prev == 1.0) == bool(np.all(state.counts > 0))


def test_ecr_rejects_empty():
    with pytest.raises(ValueError):
        ecr([], 0)
