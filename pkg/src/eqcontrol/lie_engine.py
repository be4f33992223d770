"""Finite-difference Lie brackets and numerical bracket-generation tests.

Bracket convention: ``[X, Y](q) = DY(q) X(q) - DX(q) Y(q)``.

Nested central differences lose accuracy fast: each level divides the
rounding noise of the level below by the step.  Words with ``L`` nested
brackets therefore use the step ``h ** (3 / (L + 2))`` (``h`` itself for a
single bracket), which balances truncation against rounding for double
precision at every level.  All steps are scaled by ``1 + |q|``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError, NumericError, PreconditionError
from .fields import Field, LiftedField, RandomFourierKernel, AveragedField
from .group_action import FiniteGroupAction, StratumSignature, as_points, orbit_distance, stratum_signature

DEFAULT_H = 1e-5
DEFAULT_SVD_TOL = 1e-6
MAX_DEPTH = 4


def jvp(field, q, v, h: float) -> np.ndarray:
    """Central difference ``(X(q + h v) - X(q - h v)) / (2 h)``."""
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).reshape(q.shape)
    out = (field(q + h * v) - field(q - h * v)) / (2.0 * h)
    if not np.isfinite(out).all():
        raise NumericError("non-finite directional derivative")
    return out


def lie_bracket(X, Y, q, h: float = DEFAULT_H) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return jvp(Y, q, X(q), h) - jvp(X, q, Y(q), h)


class BracketField(Field):
    """The field ``q -> [X, Y](q)`` computed with a fixed step."""

    def __init__(self, X, Y, h: float):
        self.X, self.Y, self.h = X, Y, h

    def __call__(self, q):
        return lie_bracket(self.X, self.Y, q, self.h)


def nested_step(h: float, level: int) -> float:
    """Step used for a word with ``level`` nested brackets (see module docstring)."""
    if level <= 1 or h >= 1:
        return h
    return h ** (3.0 / (level + 2))


def ad_power(X, Y, q, k: int, h: float = DEFAULT_H, max_depth: int = MAX_DEPTH) -> np.ndarray:
    """``ad_X^k Y (q)`` with ``ad_X^0 Y = Y`` and ``ad_X^k Y = [X, ad_X^{k-1} Y]``."""
    if k < 0:
        raise ConfigurationError("ad power must be >= 0")
    if k > max_depth:
        raise CapabilityError(f"ad power {k} exceeds the nested finite-difference limit {max_depth}")
    q = np.asarray(q, dtype=np.float64)
    step = nested_step(h, k)
    current = Y
    for _ in range(k):
        current = BracketField(X, current, step)
    return current(q)


# ---------------------------------------------------------------------------
# stratum tangents


@dataclass(frozen=True)
class StratumTangent:
    """Velocity assignments constant on every coincidence block.

    ``basis`` has shape ``(n*d, dimension)`` with orthonormal columns.
    """

    dimension: int
    basis: np.ndarray
    signature: StratumSignature | None = None


def stratum_tangent(q, tol: float = 0.0) -> StratumTangent:
    q = as_points(q)
    n, d = q.shape
    sig = stratum_signature(q, tol)
    basis = np.zeros((n * d, len(sig) * d))
    col = 0
    for block in sig.blocks:
        w = 1.0 / np.sqrt(len(block))
        for c in range(d):
            for i in block:
                basis[i * d + c, col] = w
            col += 1
    return StratumTangent(len(sig) * d, basis, sig)


def _block_diag_tangent(tangents: Sequence[StratumTangent]) -> np.ndarray:
    rows = sum(t.basis.shape[0] for t in tangents)
    cols = sum(t.dimension for t in tangents)
    out = np.zeros((rows, cols))
    r = c = 0
    for t in tangents:
        out[r : r + t.basis.shape[0], c : c + t.dimension] = t.basis
        r += t.basis.shape[0]
        c += t.dimension
    return out


# ---------------------------------------------------------------------------
# bracket words and rank


def bracket_words(k: int, depth: int) -> list[tuple[int, ...]]:
    """Right-nested words ``(i1, ..., im)`` meaning ``[X_i1, [X_i2, ..., X_im]]``.

    Depth 0 gives the fields, depth ``L`` adds words with ``L`` brackets.
    Self-brackets and the mirror ``[X_j, X_i]`` of a pairwise bracket are skipped.
    """
    if depth < 0:
        raise ConfigurationError("depth must be >= 0")
    if depth > MAX_DEPTH:
        raise CapabilityError(f"bracket depth {depth} exceeds the limit {MAX_DEPTH}")
    levels = [[(i,) for i in range(k)]]
    if depth >= 1:
        levels.append([(i, j) for i in range(k) for j in range(i + 1, k)])
    for _ in range(2, depth + 1):
        levels.append([(i,) + w for i in range(k) for w in levels[-1]])
    return [w for level in levels for w in level]


def word_label(word: tuple[int, ...]) -> str:
    label = f"X{word[-1] + 1}"
    for i in reversed(word[:-1]):
        label = f"[X{i + 1},{label}]"
    return label


def word_field(fields: Sequence, word: tuple[int, ...], h: float):
    step = nested_step(h, len(word) - 1)
    current = fields[word[-1]]
    for i in reversed(word[:-1]):
        current = BracketField(fields[i], current, step)
    return current


@dataclass
class BracketBasis:
    vectors: list[np.ndarray]
    labels: list[str]
    rank: int
    singular_values: list[float]
    target_dim: int
    signature: str = ""
    generating: bool = field(init=False)

    def __post_init__(self):
        self.generating = self.rank == self.target_dim

    def report(self, title: str = "") -> str:
        sv = ", ".join(f"{s:.6e}" for s in self.singular_values)
        verdict = "generating" if self.generating else "NOT generating"
        head = f"{title}: " if title else ""
        return (
            f"{head}signature {self.signature} target_dim {self.target_dim} rank {self.rank} "
            f"singular_values [{sv}] verdict {verdict}"
        )


def _rank(fields, q: np.ndarray, basis: np.ndarray, depth: int, h: float, svd_tol: float, signature: str) -> BracketBasis:
    h_eff = h * (1.0 + float(np.linalg.norm(q)))
    vectors, labels = [], []
    for word in bracket_words(len(fields), depth):
        label = word_label(word)
        try:
            v = np.asarray(word_field(fields, word, h_eff)(q), dtype=np.float64).reshape(-1)
        except NumericError as exc:
            raise NumericError(f"bracket {label}: {exc}", index=label) from exc
        if not np.isfinite(v).all():
            raise NumericError(f"bracket {label} is not finite", index=label)
        vectors.append(v)
        labels.append(label)
    coords = basis.T @ np.array(vectors).T
    target = basis.shape[1]
    if target == 0 or coords.size == 0:
        return BracketBasis(vectors, labels, 0, [], target, signature)
    sv = np.linalg.svd(coords, compute_uv=False)
    rank = int(np.sum(sv > svd_tol * sv[0])) if sv[0] > 0 else 0
    return BracketBasis(vectors, labels, rank, [float(s) for s in sv], target, signature)


def bracket_span_rank(
    fields: Sequence, q, depth: int = 3, h: float = DEFAULT_H, svd_tol: float = DEFAULT_SVD_TOL, tol: float = 0.0
) -> BracketBasis:
    """Numerical rank of the bracket words at ``q`` inside the stratum tangent."""
    q = np.array(as_points(q), dtype=np.float64)
    tangent = stratum_tangent(q, tol)
    return _rank(fields, q, tangent.basis, depth, h, svd_tol, str(tangent.signature))


class NFoldField(Field):
    """``X^N(q_1, ..., q_N) = (X(q_1), ..., X(q_N))`` on stacked clouds."""

    def __init__(self, field, sizes: Sequence[int]):
        self.field, self.sizes = field, tuple(int(s) for s in sizes)
        self._splits = np.cumsum(self.sizes)[:-1]

    def __call__(self, q):
        q = np.asarray(q, dtype=np.float64)
        return np.concatenate([self.field(part) for part in np.split(q, self._splits)])


def ensemble_bracket_rank(
    fields: Sequence, clouds: Sequence, depth: int = 3, h: float = DEFAULT_H, svd_tol: float = DEFAULT_SVD_TOL, tol: float = 0.0
) -> BracketBasis:
    """Rank test for the N-fold fields at a tuple of pairwise distinct orbits."""
    clouds = [np.array(as_points(c), dtype=np.float64) for c in clouds]
    if len({c.shape[1] for c in clouds}) > 1:
        raise ConfigurationError("ensemble clouds must share the point dimension")
    for a in range(len(clouds)):
        for b in range(a + 1, len(clouds)):
            if clouds[a].shape == clouds[b].shape and orbit_distance(clouds[a], clouds[b], limit=None) == 0:
                raise PreconditionError(f"clouds {a} and {b} are the same orbit; N-fold fields cannot separate them")
    sizes = [c.shape[0] for c in clouds]
    nfold = [NFoldField(f, sizes) for f in fields]
    tangents = [stratum_tangent(c, tol) for c in clouds]
    sig = " | ".join(str(t.signature) for t in tangents)
    return _rank(nfold, np.concatenate(clouds), _block_diag_tangent(tangents), depth, h, svd_tol, sig)


def rank_sweep(fields, clouds: Sequence, depth=3, h=DEFAULT_H, svd_tol=DEFAULT_SVD_TOL, threads: int = 1) -> list[BracketBasis]:
    """``bracket_span_rank`` at every cloud; results keep the sample order."""
    def one(q):
        return bracket_span_rank(fields, q, depth, h, svd_tol)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, clouds))
    return [one(q) for q in clouds]


# ---------------------------------------------------------------------------
# perturbation repair


@dataclass
class PerturbationReport:
    passes: list[bool]
    ranks: list[int]
    perturbations: list[tuple[int, int]] = field(default_factory=list)

    @property
    def generating(self) -> bool:
        return all(self.passes)

    def summary(self) -> str:
        ok = sum(self.passes)
        return (
            f"{ok}/{len(self.passes)} samples generating after {len(self.perturbations)} perturbation(s)"
            + ("" if self.generating else " (budget exhausted)")
        )


def _perturbation(seed: int, d: int, magnitude: float, action: FiniteGroupAction | None):
    bump = LiftedField(RandomFourierKernel(seed, d, amplitude=magnitude))
    if action is not None:
        return AveragedField(bump, action)
    return bump


def perturb_until_generating(
    fields: Sequence,
    sample_clouds: Sequence,
    budget: int,
    magnitude: float = 0.1,
    seed: int = 0,
    *,
    depth: int = 3,
    h: float = DEFAULT_H,
    svd_tol: float = DEFAULT_SVD_TOL,
    action: FiniteGroupAction | None = None,
    threads: int = 1,
):
    """Add small seeded generic fields until every sample cloud passes the rank test.

    A field that is nonzero at every failing sample is kept as the transverse
    anchor; the others receive perturbations in round-robin order.  Returns
    ``(fields, report)``; running out of budget is reported, not raised.
    """
    if budget < 0:
        raise ConfigurationError("budget must be >= 0")
    fields = list(fields)
    clouds = [np.array(as_points(c), dtype=np.float64) for c in sample_clouds]
    d = clouds[0].shape[1]
    rng = np.random.default_rng(seed)
    report = PerturbationReport([], [])
    turn = 0
    while True:
        results = rank_sweep(fields, clouds, depth, h, svd_tol, threads)
        report.passes = [r.generating for r in results]
        report.ranks = [r.rank for r in results]
        if report.generating or len(report.perturbations) >= budget:
            return tuple(fields), report
        failing = [c for c, ok in zip(clouds, report.passes) if not ok]
        anchors = [
            i for i, f in enumerate(fields) if all(np.linalg.norm(f(c)) > 0 for c in failing)
        ]
        candidates = [i for i in range(len(fields)) if not anchors or i != anchors[0]] or list(range(len(fields)))
        target = candidates[turn % len(candidates)]
        turn += 1
        bump_seed = int(rng.integers(0, 2**63 - 1))
        fields[target] = fields[target] + _perturbation(bump_seed, d, magnitude, action)
        report.perturbations.append((target, bump_seed))
