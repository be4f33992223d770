"""Equivariant vector fields on configuration space.

Two ways to get an equivariant field:

* lift a mean-field kernel ``f(x, mu)`` to ``(f(x_1, mu), ..., f(x_n, mu))``;
* average an arbitrary raw field over a finite group action.

Fields are plain callables mapping an ``(n, d)`` array to an ``(n, d)`` array
of velocities.  Lifting evaluates the kernel once per *distinct* point, with
the empirical measure presented in lexicographic order, so the result does not
depend on point labels at all and coincident points get the very same row.
"""
from __future__ import annotations

import math
from collections import deque
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericError
from .group_action import FiniteGroupAction, as_points


def canonical_order(q: np.ndarray) -> np.ndarray:
    """Indices sorting the points lexicographically (coordinate 0 most significant)."""
    if q.shape[1] == 1:
        return np.argsort(q[:, 0], kind="stable")
    return np.lexsort(q.T[::-1])


def distinct_points(q: np.ndarray):
    """Return ``(unique, inverse, sorted_q)`` with ``unique[inverse] == q``.

    ``unique`` and ``sorted_q`` are in canonical order, hence identical for any
    relabeling of ``q``.
    """
    order = canonical_order(q)
    sq = q[order]
    n = sq.shape[0]
    if n == 1:
        return sq, np.zeros(1, dtype=np.intp), sq
    starts = np.empty(n, dtype=bool)
    starts[0] = True
    (sq[1:] != sq[:-1]).any(axis=1, out=starts[1:])
    if starts.all():
        # all points distinct: inverse is just the inverse of the sort
        inverse = np.empty(n, dtype=np.intp)
        inverse[order] = np.arange(n)
        return sq, inverse, sq
    group = np.cumsum(starts) - 1
    inverse = np.empty_like(group)
    inverse[order] = group
    return sq[starts], inverse, sq


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the row maximum subtracted first."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# mean-field kernels


class MeanFieldKernel:
    """Velocity law ``f(x, mu)`` for a point ``x`` in the support of ``mu``.

    Subclasses implement :meth:`batch`, which receives distinct query points and
    the cloud sorted canonically.  Kernels support ``+`` and scalar ``*``.
    """

    dim: int

    def batch(self, xs: np.ndarray, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, mu) -> np.ndarray:
        mu = as_points(mu, self.dim)
        x = np.asarray(x, dtype=np.float64).reshape(1, self.dim)
        return self.batch(x, mu[canonical_order(mu)])[0]

    def __add__(self, other):
        if not isinstance(other, MeanFieldKernel):
            return NotImplemented
        return SumKernel((self, other))

    def __mul__(self, scale):
        return ScaledKernel(self, float(scale))

    __rmul__ = __mul__

    def __neg__(self):
        return ScaledKernel(self, -1.0)


class SumKernel(MeanFieldKernel):
    def __init__(self, terms):
        terms = tuple(terms)
        if len({t.dim for t in terms}) != 1:
            raise ConfigurationError("summed kernels must share the dimension")
        self.terms, self.dim = terms, terms[0].dim

    def batch(self, xs, mu):
        out = self.terms[0].batch(xs, mu)
        for t in self.terms[1:]:
            out = out + t.batch(xs, mu)
        return out


class ScaledKernel(MeanFieldKernel):
    def __init__(self, kernel: MeanFieldKernel, scale: float):
        self.kernel, self.scale, self.dim = kernel, scale, kernel.dim

    def batch(self, xs, mu):
        return self.scale * self.kernel.batch(xs, mu)


class ConstantKernel(MeanFieldKernel):
    """``f(x, mu) = c``: every point translates by ``c``."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64).reshape(-1)
        self.dim = self.value.size

    def batch(self, xs, mu):
        return np.broadcast_to(self.value, xs.shape).copy()


class LinearKernel(MeanFieldKernel):
    """``f(x, mu) = A x``."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ConfigurationError("linear kernel needs a square matrix")
        self.dim = self.matrix.shape[0]

    def batch(self, xs, mu):
        return xs @ self.matrix.T


class FunctionKernel(MeanFieldKernel):
    """Wrap a user function ``fn(x, mu) -> d-vector``; called once per distinct point."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], dim: int):
        self.fn, self.dim = fn, int(dim)

    def batch(self, xs, mu):
        return np.array([np.asarray(self.fn(x, mu), dtype=np.float64).reshape(self.dim) for x in xs])


class AttentionKernel(MeanFieldKernel):
    """Multi-head softmax attention ``sum_h sum_j softmax_j(<Q_h x, K_h x_j>) V_h x_j``."""

    def __init__(self, queries, keys, values):
        self.queries = np.asarray(queries, dtype=np.float64)
        self.keys = np.asarray(keys, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        for name in ("queries", "keys", "values"):
            m = getattr(self, name)
            if m.ndim == 2:
                m = m[None]
                setattr(self, name, m)
            if m.ndim != 3 or m.shape[1] != m.shape[2]:
                raise ConfigurationError(f"attention {name} must be (H, d, d)")
        if not self.queries.shape == self.keys.shape == self.values.shape:
            raise ConfigurationError("attention matrices must share shape (H, d, d)")
        if not all(np.isfinite(m).all() for m in (self.queries, self.keys, self.values)):
            raise ConfigurationError("attention matrices must be finite")
        self.heads, self.dim = self.queries.shape[0], self.queries.shape[1]

    @classmethod
    def random(cls, dim: int, heads: int = 1, seed: int = 0, scale: float = 1.0):
        rng = np.random.default_rng(seed)
        q, k, v = (scale * rng.standard_normal((heads, dim, dim)) / math.sqrt(dim) for _ in range(3))
        return cls(q, k, v)

    def batch(self, xs, mu):
        out = np.zeros_like(xs)
        for Q, K, V in zip(self.queries, self.keys, self.values):
            logits = (xs @ Q.T) @ (mu @ K.T).T
            out += softmax_weights(logits) @ (mu @ V.T)
        return out


class PairwiseKernel(MeanFieldKernel):
    """``f(x, mu) = sum_j K(x, x_j)`` for a user interaction rule ``K``."""

    def __init__(self, rule: Callable[[np.ndarray, np.ndarray], np.ndarray], dim: int):
        self.rule, self.dim = rule, int(dim)

    def batch(self, xs, mu):
        out = np.empty_like(xs)
        for a, x in enumerate(xs):
            acc = np.zeros(self.dim)
            for y in mu:
                acc = acc + np.asarray(self.rule(x, y), dtype=np.float64)
            out[a] = acc
        return out


class GaussianPairwiseKernel(MeanFieldKernel):
    """``K(x, y) = exp(-|x - y|^2 / width^2) A (y - x)``, summed over the cloud."""

    def __init__(self, matrix, width: float = 1.0):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ConfigurationError("pairwise kernel needs a square matrix")
        if width <= 0:
            raise ConfigurationError("pairwise kernel width must be positive")
        self.width, self.dim = float(width), self.matrix.shape[0]

    def batch(self, xs, mu):
        diff = mu[None, :, :] - xs[:, None, :]
        weight = np.exp(-np.einsum("ajk,ajk->aj", diff, diff) / self.width**2)
        return np.einsum("aj,ajk->ak", weight, diff @ self.matrix.T)


class RandomFourierKernel(MeanFieldKernel):
    """Seeded smooth generic kernel.

    ``f(x, mu) = sum_r cos(w_r . x + w'_r . mean(mu) + phi_r) v_r`` with
    frequencies drawn ``N(0, scale^2)``, phases uniform on ``[0, 2 pi)`` and
    outputs ``N(0, amplitude^2 / features)``.
    """

    def __init__(self, seed: int, dim: int, features: int = 16, scale: float = 1.0, amplitude: float = 1.0):
        self.seed, self.dim, self.features = int(seed), int(dim), int(features)
        self.scale, self.amplitude = float(scale), float(amplitude)
        rng = np.random.default_rng(self.seed)
        self.omega = rng.normal(0.0, self.scale, (self.features, self.dim))
        self.omega_mean = rng.normal(0.0, self.scale, (self.features, self.dim))
        self.phase = rng.uniform(0.0, 2 * math.pi, self.features)
        self.out = rng.normal(0.0, 1.0, (self.features, self.dim)) * (self.amplitude / math.sqrt(self.features))

    def batch(self, xs, mu):
        mean = mu.sum(axis=0) / mu.shape[0]
        shift = self.omega_mean @ mean + self.phase
        return np.cos(xs @ self.omega.T + shift) @ self.out


def lift(kernel: MeanFieldKernel, q) -> np.ndarray:
    """Velocities ``(f(x_1, mu), ..., f(x_n, mu))`` with ``mu`` the empirical measure of ``q``."""
    if not (type(q) is np.ndarray and q.ndim == 2 and q.dtype == np.float64):
        q = as_points(q)
    if q.shape[1] != kernel.dim:
        raise ConfigurationError(f"kernel dimension {kernel.dim} does not match cloud dimension {q.shape[1]}")
    uniq, inverse, mu = distinct_points(q)
    vals = kernel.batch(uniq, mu)
    if not math.isfinite(vals.sum()) and not np.isfinite(vals).all():
        bad = int(np.flatnonzero(~np.isfinite(vals).all(axis=1))[0])
        index = int(np.flatnonzero(inverse == bad)[0])
        raise NumericError(f"non-finite kernel output at point {index}", index=index)
    return vals[inverse]


def attention_eval(kernel: AttentionKernel, x, q) -> np.ndarray:
    return kernel(x, q)


# ---------------------------------------------------------------------------
# fields


class Field:
    """A velocity law on clouds: ``field(q)`` returns an array shaped like ``q``."""

    def __call__(self, q) -> np.ndarray:
        raise NotImplementedError

    def __add__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return SumField((self, other))

    def __mul__(self, scale):
        return ScaledField(self, float(scale))

    __rmul__ = __mul__

    def __neg__(self):
        return ScaledField(self, -1.0)


class RawField(Field):
    """Arbitrary rule ``V(q)``, not assumed equivariant."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, q):
        q = as_points(q)
        return np.asarray(self.fn(q), dtype=np.float64).reshape(q.shape)


class RandomFourierRawField(Field):
    """Seeded generic field on ``(R^d)^n`` that ignores all symmetry.

    ``V(q) = sum_r cos(W_r . vec(q) + phi_r) v_r`` with ``W_r, v_r`` in ``R^{nd}``.
    """

    def __init__(self, seed: int, n: int, d: int, features: int = 16, scale: float = 1.0, amplitude: float = 1.0):
        self.seed, self.n, self.d, self.features = int(seed), int(n), int(d), int(features)
        rng = np.random.default_rng(self.seed)
        self.omega = rng.normal(0.0, scale, (self.features, self.n * self.d))
        self.phase = rng.uniform(0.0, 2 * math.pi, self.features)
        self.out = rng.normal(0.0, 1.0, (self.features, self.n * self.d)) * (amplitude / math.sqrt(self.features))

    def __call__(self, q):
        q = as_points(q, self.d)
        flat = q.reshape(-1)
        return (np.cos(self.omega @ flat + self.phase) @ self.out).reshape(q.shape)


class LiftedField(Field):
    """Coincidence-safe lift of a mean-field kernel."""

    def __init__(self, kernel: MeanFieldKernel):
        self.kernel = kernel

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def __call__(self, q):
        return lift(self.kernel, q)

    def __add__(self, other):
        if isinstance(other, LiftedField):
            return LiftedField(self.kernel + other.kernel)
        return super().__add__(other)

    def __mul__(self, scale):
        return LiftedField(self.kernel * scale)

    __rmul__ = __mul__

    def __neg__(self):
        return LiftedField(-self.kernel)


class SumField(Field):
    def __init__(self, terms):
        self.terms = tuple(terms)

    def __call__(self, q):
        out = self.terms[0](q)
        for t in self.terms[1:]:
            out = out + t(q)
        return out


class ScaledField(Field):
    def __init__(self, field: Field, scale: float):
        self.field, self.scale = field, scale

    def __call__(self, q):
        return self.scale * self.field(q)


class AveragedField(Field):
    """Group average ``(1/|G|) sum_g g . V(g^-1 . q)`` of a raw field.

    Terms are summed in the action's element order.  The result is then made
    exactly invariant under the isotropy group of ``q`` (entries tied together
    by an isotropy element are copied, entries forced to equal their own
    negative are zeroed), so coincident points move identically and points on
    a reflection wall have exactly zero normal velocity.
    """

    def __init__(self, raw: Callable[[np.ndarray], np.ndarray], action: FiniteGroupAction):
        self.raw, self.action = raw, action

    def __call__(self, q):
        q = as_points(q, self.action.d)
        if q.shape[0] != self.action.n:
            raise ConfigurationError(f"averaged field acts on {self.action.n} points, got {q.shape[0]}")
        action = self.action
        moved = action.apply_all(q)
        pulled = moved[list(action.inverse_index)]
        raw = np.array([np.asarray(self.raw(p), dtype=np.float64).reshape(q.shape) for p in pulled])
        # summed over elements in the action's order
        out = action.apply_each(raw).sum(axis=0) / len(action)
        fixed = np.flatnonzero((moved == q).all(axis=(1, 2)))
        return _isotropy_snap(out, q, action, fixed)


def _isotropy_snap(out: np.ndarray, q: np.ndarray, action: FiniteGroupAction, fixed) -> np.ndarray:
    iso = [action.elements[k] for k in fixed if k > 0]
    if not iso:
        return out
    n, d = q.shape
    # edges (i, c) ~ sign * (pi(i), cp(c)) from X = h . X
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n * d)]
    for h in iso:
        for i in range(n):
            for c in range(d):
                p, r, s = i * d + c, h.point_perm[i] * d + h.coord_perm[c], h.sign[i][c]
                adj[p].append((r, s))
                adj[r].append((p, s))
    flat = out.reshape(-1).copy()
    sign = [0.0] * (n * d)
    for root in range(n * d):
        if sign[root]:
            continue
        sign[root] = 1.0
        members, queue, zero = [root], deque([root]), False
        while queue:
            p = queue.popleft()
            for r, s in adj[p]:
                if not sign[r]:
                    sign[r] = sign[p] * s
                    members.append(r)
                    queue.append(r)
                elif sign[r] != sign[p] * s:
                    zero = True
        value = 0.0 if zero else flat[root]
        for p in members:
            flat[p] = sign[p] * value
    return flat.reshape(out.shape)


def average_over_group(raw, action: FiniteGroupAction) -> AveragedField:
    """Project a raw field onto the equivariant fields of a finite action."""
    return AveragedField(raw, action)


def equivariance_residual(field, action: FiniteGroupAction, q) -> float:
    """``max_g |g . X(q) - X(g . q)|`` over the group (Euclidean norm on ``R^{nd}``)."""
    q = as_points(q, action.d)
    moved_base = action.apply_all(np.asarray(field(q), dtype=np.float64).reshape(q.shape))
    worst = 0.0
    for k, gq in enumerate(action.apply_all(q)):
        worst = max(worst, float(np.linalg.norm(moved_base[k] - field(gq))))
    return worst
