import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqcontrol.errors import CapabilityError, ConfigurationError, PreconditionError
from eqcontrol.fields import (
    AttentionKernel,
    ConstantKernel,
    LinearKernel,
    LiftedField,
    RandomFourierKernel,
    RandomFourierRawField,
    RawField,
    average_over_group,
)
from eqcontrol.group_action import stratum_signature, symmetric_group
from eqcontrol.lie_engine import (
    ad_power,
    bracket_span_rank,
    bracket_words,
    ensemble_bracket_rank,
    jvp,
    lie_bracket,
    perturb_until_generating,
    stratum_tangent,
    word_label,
)

A = np.array([[0.0, 1.0], [0.0, 0.0]])
B = np.array([[0.0, 0.0], [1.0, 0.0]])


def linear(m):
    return LiftedField(LinearKernel(m))


def fourier_pair(s, d=2):
    return [LiftedField(RandomFourierKernel(2 * s, d)), LiftedField(RandomFourierKernel(2 * s + 1, d))]


# --- jvp and brackets -----------------------------------------------------------


def test_jvp_linear_and_constant():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 3))
    q, v = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert np.allclose(jvp(linear(m), q, v, 1e-3), v @ m.T, atol=1e-12)
    assert np.array_equal(jvp(LiftedField(ConstantKernel([1.0, 2.0, 3.0])), q, v, 1e-3), np.zeros((2, 3)))
    with pytest.raises(ConfigurationError):
        jvp(linear(m), q, v, 0.0)


def test_jvp_richardson_ratio():
    square = RawField(lambda q: q**2)
    q, v = np.array([[1.0]]), np.array([[1.0]])
    # x^2 is exact under central differences, so use x^3 for a visible O(h^2) term
    cube = RawField(lambda q: q**3)
    assert jvp(square, q, v, 0.1)[0, 0] == pytest.approx(2.0, abs=1e-12)
    e1 = abs(jvp(cube, q, v, 0.1)[0, 0] - 3.0)
    e2 = abs(jvp(cube, q, v, 0.05)[0, 0] - 3.0)
    assert 3.8 < e1 / e2 < 4.2


def test_bracket_examples():
    q = np.array([[1.0, 1.0]])
    assert np.allclose(lie_bracket(linear(A), linear(B), q), [[-1.0, 1.0]], atol=1e-6)
    f = LiftedField(RandomFourierKernel(1, 2))
    assert np.abs(lie_bracket(f, f, q)).max() <= 1e-8
    c1, c2 = LiftedField(ConstantKernel([1.0, 0.0])), LiftedField(ConstantKernel([0.3, -2.0]))
    assert np.array_equal(lie_bracket(c1, c2, q), np.zeros((1, 2)))


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_bracket_matches_matrix_commutator(d):
    rng = np.random.default_rng(d)
    for _ in range(12):
        a, b = rng.normal(size=(2, d, d))
        q = rng.normal(size=(2, d))
        exact = q @ (b @ a - a @ b).T
        assert np.abs(lie_bracket(linear(a), linear(b), q) - exact).max() <= 1e-6


def test_ad_power_examples():
    rng = np.random.default_rng(1)
    c = np.array([0.5, -1.0])
    m = rng.normal(size=(2, 2))
    X, Y = LiftedField(ConstantKernel(c)), linear(m)
    q = rng.normal(size=(1, 2))
    assert np.array_equal(ad_power(X, Y, q, 0), Y(q))
    assert np.allclose(ad_power(X, Y, q, 1), (m @ c)[None], atol=1e-6)
    f = LiftedField(RandomFourierKernel(2, 2))
    for k in (1, 2, 3):
        assert np.abs(ad_power(f, f, q, k)).max() <= 1e-6
    with pytest.raises(CapabilityError):
        ad_power(X, Y, q, 5)


def test_ad_power_nested_linear_oracle():
    # ad_A^k B on linear fields is the linear field of the iterated commutator
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3, 3)) * 0.5
    q = rng.normal(size=(1, 3))
    m = b
    for k in range(1, 4):
        m = m @ a - a @ m
        assert np.abs(ad_power(linear(a), linear(b), q, k) - q @ m.T).max() <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_bracket_antisymmetry(seed):
    X = LiftedField(RandomFourierKernel(seed, 2))
    Y = LiftedField(AttentionKernel.random(2, 1, seed + 1))
    q = np.random.default_rng(seed).uniform(-1, 1, (3, 2))
    assert np.abs(lie_bracket(X, Y, q) + lie_bracket(Y, X, q)).max() <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32))
def test_jacobi_identity(seed):
    from eqcontrol.lie_engine import BracketField

    X, Y, Z = (LiftedField(RandomFourierKernel(seed + i, 2)) for i in range(3))
    q = np.random.default_rng(seed).uniform(-1, 1, (2, 2))
    h = 1e-4
    total = (
        lie_bracket(X, BracketField(Y, Z, h), q, h)
        + lie_bracket(Y, BracketField(Z, X, h), q, h)
        + lie_bracket(Z, BracketField(X, Y, h), q, h)
    )
    assert np.abs(total).max() <= 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_averaging_commutes_with_bracketing(seed):
    action = symmetric_group(3, 2)
    X = LiftedField(RandomFourierKernel(seed, 2))
    raw = RandomFourierRawField(seed + 1, 3, 2)
    q = np.random.default_rng(seed).uniform(-1, 1, (3, 2))
    lhs = lie_bracket(X, average_over_group(raw, action), q, 1e-5)
    bracket_raw = RawField(lambda p: lie_bracket(X, raw, p, 1e-5))
    rhs = average_over_group(bracket_raw, action)(q)
    assert np.abs(lhs - rhs).max() <= 1e-6


# --- stratum tangents -----------------------------------------------------------------


def test_stratum_tangent_dimensions():
    t = stratum_tangent(np.random.default_rng(3).normal(size=(3, 2)))
    assert t.dimension == 6 and np.array_equal(t.basis, np.eye(6))
    assert stratum_tangent([[1.0, 2.0], [1.0, 2.0]]).dimension == 2
    t = stratum_tangent([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    assert t.dimension == 4
    assert np.allclose(t.basis.T @ t.basis, np.eye(4), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=5), st.integers(0, 2**32))
def test_equivariant_fields_are_tangent_to_strata(labels, seed):
    palette = np.random.default_rng(seed).uniform(-1, 1, (3, 2))
    q = palette[labels]
    t = stratum_tangent(q)
    assert t.dimension == 2 * len(stratum_signature(q))
    for f in (LiftedField(RandomFourierKernel(seed, 2)), LiftedField(AttentionKernel.random(2, 2, seed))):
        v = f(q).reshape(-1)
        assert np.linalg.norm(v - t.basis @ (t.basis.T @ v)) <= 1e-10


# --- rank tests ------------------------------------------------------------------------


def test_bracket_words():
    words = bracket_words(2, 3)
    labels = [word_label(w) for w in words]
    assert labels[:3] == ["X1", "X2", "[X1,X2]"]
    assert "[X1,[X1,X2]]" in labels and "[X2,[X1,[X1,X2]]]" in labels
    assert len(words) == 2 + 1 + 2 + 4
    with pytest.raises(CapabilityError):
        bracket_words(2, 5)


def test_rank_examples():
    q = np.array([[1.0, 0.0]])
    r = bracket_span_rank([linear(A)], q, depth=0)
    assert r.rank <= 1
    r = bracket_span_rank([linear(A), linear(B)], q, depth=1)
    assert np.allclose(np.array(r.vectors), [[0, 0], [0, 1], [-1, 0]], atol=1e-6)
    assert r.rank == 2 and r.generating
    f = LiftedField(RandomFourierKernel(3, 2))
    assert bracket_span_rank([f, f, f], np.random.default_rng(0).normal(size=(2, 2)), depth=3).rank <= 1


def test_rank_never_exceeds_stratum_dimension():
    rng = np.random.default_rng(4)
    q = np.array([[0.2, 0.1], [0.2, 0.1], [-0.5, 0.4]])
    r = bracket_span_rank(fourier_pair(5), q, depth=3)
    assert r.target_dim == 4 and r.rank <= 4
    assert "[2,1]" in r.report()
    q = rng.uniform(-1, 1, (3, 2))
    assert bracket_span_rank(fourier_pair(6), q, depth=3).rank <= 6


def test_generic_fourier_pairs_generate():
    # fraction frozen from the seeded sweep: 100 of 100
    ok = 0
    for s in range(100):
        q = np.random.default_rng(s).uniform(-1, 1, (3, 2))
        ok += bracket_span_rank(fourier_pair(s), q, depth=3).generating
    assert ok == 100


def test_ensemble_rank():
    rng = np.random.default_rng(5)
    q = rng.uniform(-1, 1, (3, 2))
    fields = fourier_pair(7)
    single, one = bracket_span_rank(fields, q, 3), ensemble_bracket_rank(fields, [q], 3)
    assert single.rank == one.rank and np.allclose(single.singular_values, one.singular_values)
    consts = [LiftedField(ConstantKernel([1.0, 0.0])), LiftedField(ConstantKernel([0.0, 1.0]))]
    r = ensemble_bracket_rank(consts, [rng.normal(size=(1, 2)), rng.normal(size=(1, 2))], 3)
    assert r.rank <= 2 < r.target_dim and not r.generating
    with pytest.raises(PreconditionError):
        ensemble_bracket_rank(fields, [q, q[::-1]], 3)


def test_perturbation_examples():
    rng = np.random.default_rng(0)
    samples = [rng.uniform(-1, 1, (2, 2)) for _ in range(5)]
    good = fourier_pair(1)
    out, rep = perturb_until_generating(good, samples, 5)
    assert rep.generating and rep.perturbations == [] and list(out) == good
    same = [LiftedField(AttentionKernel.random(2, 1, 0))] * 2
    out, rep = perturb_until_generating(same, samples, 0)
    assert not rep.generating and out == tuple(same)
    assert "budget exhausted" in rep.summary()
    out, rep = perturb_until_generating(same, samples, 20, 0.1, seed=0)
    # frozen baseline: one perturbation of the second field repairs every sample
    assert rep.generating and len(rep.perturbations) == 1 and rep.perturbations[0][0] == 1
