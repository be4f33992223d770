import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqcontrol.errors import ConfigurationError, NumericError
from eqcontrol.fields import (
    AttentionKernel,
    ConstantKernel,
    FunctionKernel,
    GaussianPairwiseKernel,
    LinearKernel,
    LiftedField,
    PairwiseKernel,
    RandomFourierKernel,
    RandomFourierRawField,
    RawField,
    attention_eval,
    average_over_group,
    equivariance_residual,
    lift,
)
from eqcontrol.group_action import GroupElement, reflection_group, symmetric_group


def identity_kernel(d=2):
    return FunctionKernel(lambda xs, mu: xs, d)


# --- lift ------------------------------------------------------------------------


def test_zero_kernel_gives_zero_velocity():
    assert np.array_equal(lift(ConstantKernel([0.0, 0.0]), [[1, 2], [3, 4]]), np.zeros((2, 2)))


def test_identity_kernel():
    assert lift(identity_kernel(), [[1, 2], [3, 4]]).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_coincident_points_get_identical_velocities():
    k = RandomFourierKernel(4, 2)
    q = np.array([[0.3, -0.2], [0.3, -0.2], [1.0, 0.5]])
    v = lift(k, q)
    assert v[0].tobytes() == v[1].tobytes()


def test_lift_checks_dimension():
    with pytest.raises(ConfigurationError):
        lift(RandomFourierKernel(0, 3), np.zeros((2, 2)))


def test_non_finite_output_names_the_point():
    k = FunctionKernel(lambda xs, mu: np.where(xs > 1.5, np.inf, xs), 1)
    with pytest.raises(NumericError) as info:
        lift(k, [[0.0], [2.0], [1.0]])
    assert info.value.index == 1


def test_kernel_algebra():
    a, b = RandomFourierKernel(1, 2), RandomFourierKernel(2, 2)
    q = np.random.default_rng(0).normal(size=(3, 2))
    assert np.allclose(lift(a + b, q), lift(a, q) + lift(b, q), atol=1e-15)
    assert np.allclose(lift(a * 2.5, q), 2.5 * lift(a, q), atol=1e-15)
    assert np.array_equal(lift(-a, q), -lift(a, q))


def test_linear_kernel():
    m = [[0.0, 1.0], [-1.0, 0.0]]
    assert lift(LinearKernel(m), [[1.0, 2.0]]).tolist() == [[2.0, -1.0]]


# --- attention -----------------------------------------------------------------------


def test_attention_zero_logits_are_uniform():
    k = AttentionKernel(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.eye(2)[None])
    out = attention_eval(k, np.array([5.0, 5.0]), np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert out.tolist() == [1.0, 0.0]


def test_attention_zero_values():
    rng = np.random.default_rng(1)
    k = AttentionKernel(rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2)), np.zeros((2, 2, 2)))
    assert np.array_equal(attention_eval(k, [1.0, 2.0], rng.normal(size=(4, 2))), np.zeros(2))


def test_attention_single_point():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(3, 1, 2, 2))
    kern = AttentionKernel(q, k, v)
    x1 = np.array([0.4, -1.3])
    assert np.allclose(attention_eval(kern, [9.0, 9.0], [x1]), v[0] @ x1, atol=1e-15)


def test_attention_survives_huge_logits():
    kern = AttentionKernel(1e3 * np.eye(2)[None], 1e3 * np.eye(2)[None], np.eye(2)[None])
    out = attention_eval(kern, [1.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]])
    assert np.isfinite(out).all()
    assert out.tolist() == [1.0, 0.0]


def test_attention_logit_shift_invariance():
    # a query component along a direction the keys do not see adds a constant to all logits
    rng = np.random.default_rng(3)
    K = np.zeros((1, 2, 2))
    K[0, 0, 0] = 1.0
    Q = np.eye(2)[None]
    V = rng.normal(size=(1, 2, 2))
    kern = AttentionKernel(Q, K, V)
    q = np.column_stack([rng.normal(size=5), np.full(5, 2.0)])
    base = attention_eval(kern, [0.7, 0.0], q)
    K2 = K.copy()
    K2[0, 1, 1] = 1.0
    shifted = attention_eval(AttentionKernel(Q, K2, V), [0.7, 3.0], q)  # + 6 on every logit
    assert np.allclose(base, shifted, rtol=0, atol=1e-14)


def test_attention_random_is_seeded():
    a, b = AttentionKernel.random(2, 2, seed=5), AttentionKernel.random(2, 2, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip((a.queries, a.keys, a.values), (b.queries, b.keys, b.values)))


# --- pairwise and fourier ----------------------------------------------------------


def test_pairwise_kernel_sums_over_points():
    k = PairwiseKernel(lambda x, y: y - x, 2)
    q = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0]])
    assert lift(k, q).tolist() == [[2.0, 4.0], [-4.0, 4.0], [2.0, -8.0]]


def test_gaussian_pairwise_kernel_is_equivariant():
    k = GaussianPairwiseKernel([[0.0, 1.0], [-1.0, 0.5]], width=0.7)
    q = np.random.default_rng(6).normal(size=(4, 2))
    assert equivariance_residual(LiftedField(k), symmetric_group(4, 2), q) <= 1e-12


def test_fourier_same_seed_bit_identical():
    q = np.random.default_rng(7).normal(size=(3, 2))
    assert lift(RandomFourierKernel(11, 2), q).tobytes() == lift(RandomFourierKernel(11, 2), q).tobytes()
    assert not np.array_equal(lift(RandomFourierKernel(11, 2), q), lift(RandomFourierKernel(12, 2), q))


def test_fourier_formula():
    k = RandomFourierKernel(8, 2, features=4)
    q = np.random.default_rng(8).normal(size=(3, 2))
    mean = q.mean(axis=0)
    x = q[1]
    expect = sum(np.cos(k.omega[r] @ x + k.omega_mean[r] @ mean + k.phase[r]) * k.out[r] for r in range(4))
    assert np.allclose(k(x, q), expect, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.permutations(range(4)))
def test_kernel_depends_only_on_the_multiset(seed, perm):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(4, 2)) * 3
    for kern in (RandomFourierKernel(seed, 2), AttentionKernel.random(2, 2, seed), GaussianPairwiseKernel(rng.normal(size=(2, 2)))):
        x = rng.normal(size=2)
        assert kern(x, q[list(perm)]).tobytes() == kern(x, q).tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.permutations(range(4)))
def test_lift_commutes_with_permutations(seed, perm):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(4, 2))
    for kern in (RandomFourierKernel(seed, 2), AttentionKernel.random(2, 1, seed)):
        lhs = lift(kern, q[list(perm)])
        rhs = lift(kern, q)[list(perm)]
        assert np.abs(lhs - rhs).max() <= 1e-12


# --- averaging ------------------------------------------------------------------------


def test_averaging_fixes_equivariant_fields():
    f = LiftedField(RandomFourierKernel(9, 2))
    action = symmetric_group(3, 2)
    avg = average_over_group(f, action)
    rng = np.random.default_rng(9)
    for _ in range(5):
        q = rng.normal(size=(3, 2))
        assert np.abs(avg(q) - f(q)).max() <= 1e-15


def test_averaged_square_on_two_points():
    raw = RawField(lambda q: np.array([[q[0, 0] ** 2], [0.0]]))
    avg = average_over_group(raw, symmetric_group(2, 1))
    q = np.array([[1.5], [-3.0]])
    assert avg(q).tolist() == [[1.5**2 / 2], [9.0 / 2]]


def test_reflection_kills_normal_component():
    action = reflection_group(1, 2)
    e1 = average_over_group(RawField(lambda q: np.array([[1.0, 0.0]])), action)
    e2 = average_over_group(RawField(lambda q: np.array([[0.0, 1.0]])), action)
    q = np.array([[0.3, 0.8]])
    assert e1(q).tolist() == [[0.0, 0.0]]
    assert e2(q).tolist() == [[0.0, 1.0]]


def test_raw_field_residual_is_positive():
    raw = RawField(lambda q: np.array([[q[1, 0]], [0.0]]))
    r = equivariance_residual(raw, symmetric_group(2, 1), [[1.0], [2.0]])
    assert r == pytest.approx(np.sqrt(5.0))


def test_lifted_attention_residual():
    f = LiftedField(AttentionKernel.random(2, 2, seed=3))
    q = np.random.default_rng(10).normal(size=(4, 2))
    assert equivariance_residual(f, symmetric_group(4, 2), q) <= 1e-12


def test_averaged_field_snaps_on_isotropy():
    action = symmetric_group(3, 2).product(reflection_group(3, 2))
    f = average_over_group(RandomFourierRawField(1, 3, 2), action)
    q = np.array([[0.0, 0.4], [0.5, 0.5], [0.5, 0.5]])
    v = f(q)
    assert v[0, 0] == 0.0
    assert v[1].tobytes() == v[2].tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["perm", "flip", "both"]))
def test_averaging_is_an_idempotent_projection(seed, kind):
    n, d = 3, 2
    action = {
        "perm": symmetric_group(n, d),
        "flip": reflection_group(n, d),
        "both": symmetric_group(n, d).product(reflection_group(n, d)),
    }[kind]
    raw = RandomFourierRawField(seed, n, d)
    avg = average_over_group(raw, action)
    twice = average_over_group(avg, action)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        q = rng.normal(size=(n, d))
        assert equivariance_residual(avg, action, q) <= 1e-12
        assert np.abs(twice(q) - avg(q)).max() <= 1e-12


def test_averaged_field_rejects_wrong_size():
    avg = average_over_group(RandomFourierRawField(1, 2, 2), symmetric_group(2, 2))
    with pytest.raises(ConfigurationError):
        avg(np.zeros((3, 2)))


def test_group_element_signs_per_point():
    g = GroupElement((0, 1), (0, 1), ((1.0, 1.0), (-1.0, 1.0)))
    assert g.apply(np.array([[1.0, 2.0], [3.0, 4.0]])).tolist() == [[1.0, 2.0], [-3.0, 4.0]]
