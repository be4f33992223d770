"""Finite group actions on configuration space, coincidence strata and orbit matching.

A configuration is an ``(n, d)`` float array: ``n`` points of ``R^d``.  Every
function here accepts a :class:`PointCloud` or anything ``np.asarray`` can turn
into such an array, and returns plain arrays.

Group elements act by a point permutation combined with a signed coordinate
permutation applied to every point::

    (g . q)[i, c] = sign[c] * q[point_perm[i], coord_perm[c]]

so the symmetric group acts as ``(s . q)[i] = q[s(i)]`` and a reflection flips
the sign of one coordinate of every point.  Only multiplications by +-1 and
indexing are involved, which makes ``g^-1 . (g . q) == q`` hold bit for bit.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .errors import ConfigurationError

#: Largest cloud handled by :func:`orbit_distance` unless the caller raises it.
ASSIGNMENT_LIMIT = 10


def as_points(q, d: int | None = None) -> np.ndarray:
    """Coerce ``q`` to a float64 array of shape ``(n, d)``."""
    arr = np.asarray(q, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if d is None else arr.reshape(-1, d)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ConfigurationError(f"expected an (n, d) point array, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ConfigurationError(f"point dimension {arr.shape[1]} does not match {d}")
    return arr


class PointCloud:
    """Immutable ordered list of ``n`` points in ``R^d``."""

    __slots__ = ("_points",)

    def __init__(self, points):
        arr = np.array(as_points(points), dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self._points = arr

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def n(self) -> int:
        return self._points.shape[0]

    @property
    def d(self) -> int:
        return self._points.shape[1]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._points
        return self._points.astype(dtype)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self._points, other._points)

    def __hash__(self):
        return hash((self._points.shape, self._points.tobytes()))

    def __repr__(self):
        return f"PointCloud(n={self.n}, d={self.d})"

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        return cls(read_cloud(path))

    def to_csv(self, path, provenance: Sequence[str] = ()) -> None:
        write_cloud(path, self._points, provenance)


def read_cloud(path) -> np.ndarray:
    """Read a cloud CSV: optional ``#`` lines, a ``x0,...`` header, one row per point."""
    path = Path(path)
    rows = []
    header = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if header is None:
                header = cells
                expected = [f"x{k}" for k in range(len(cells))]
                if cells != expected:
                    raise ConfigurationError(
                        f"{path}:{lineno}: cloud header must be {','.join(expected)}"
                    )
                continue
            if len(cells) != len(header):
                raise ConfigurationError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
    if header is None or not rows:
        raise ConfigurationError(f"{path}: no points found")
    return as_points(rows)


def format_float(x: float) -> str:
    # repr round-trips exactly and is platform independent
    return repr(float(x))


def write_cloud(path, q, provenance: Sequence[str] = ()) -> None:
    q = as_points(q)
    lines = [f"# {p}" for p in provenance]
    lines.append(",".join(f"x{k}" for k in range(q.shape[1])))
    lines.extend(",".join(format_float(v) for v in row) for row in q)
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# permutations and group elements


@dataclass(frozen=True)
class Permutation:
    """Bijection of ``{0, ..., n-1}`` acting on clouds by ``(s . q)[i] = q[s(i)]``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(i) for i in self.mapping)
        if sorted(mapping) != list(range(len(mapping))):
            raise ConfigurationError(f"not a permutation: {mapping}")
        object.__setattr__(self, "mapping", mapping)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))

    @property
    def n(self) -> int:
        return len(self.mapping)

    def __call__(self, i: int) -> int:
        return self.mapping[i]

    def compose(self, other: "Permutation") -> "Permutation":
        """Return ``self o other``, i.e. ``i -> self(other(i))``."""
        return Permutation(tuple(self.mapping[j] for j in other.mapping))

    def inverse(self) -> "Permutation":
        inv = [0] * self.n
        for i, j in enumerate(self.mapping):
            inv[j] = i
        return Permutation(tuple(inv))

    def apply(self, q) -> np.ndarray:
        q = as_points(q)
        if q.shape[0] != self.n:
            raise ConfigurationError(f"permutation of {self.n} points applied to {q.shape[0]}")
        return q[list(self.mapping)]

    def is_identity(self) -> bool:
        return self.mapping == tuple(range(self.n))


@dataclass(frozen=True)
class GroupElement:
    """Signed relabeling ``(g . q)[i, c] = sign[i][c] * q[point_perm[i], coord_perm[c]]``.

    ``sign`` may be given as one row of ``d`` signs shared by all points; it
    is stored as ``n`` rows.
    """

    point_perm: tuple[int, ...]
    coord_perm: tuple[int, ...]
    sign: tuple[tuple[float, ...], ...]

    @classmethod
    def identity(cls, n: int, d: int) -> "GroupElement":
        return cls(tuple(range(n)), tuple(range(d)), (1.0,) * d)

    @classmethod
    def from_permutation(cls, perm: Sequence[int], d: int) -> "GroupElement":
        return cls(tuple(int(i) for i in perm), tuple(range(d)), (1.0,) * d)

    def __post_init__(self):
        n, d = len(self.point_perm), len(self.coord_perm)
        if sorted(self.point_perm) != list(range(n)) or sorted(self.coord_perm) != list(range(d)):
            raise ConfigurationError("group element permutations must be bijections")
        rows = self.sign
        if len(rows) == d and all(not isinstance(r, (tuple, list, np.ndarray)) for r in rows):
            rows = (tuple(rows),) * n
        rows = tuple(tuple(float(x) for x in r) for r in rows)
        if len(rows) != n or any(len(r) != d or any(x not in (1.0, -1.0) for x in r) for r in rows):
            raise ConfigurationError("signs must be +1 or -1, one per coordinate (or per point and coordinate)")
        object.__setattr__(self, "point_perm", tuple(int(i) for i in self.point_perm))
        object.__setattr__(self, "coord_perm", tuple(int(c) for c in self.coord_perm))
        object.__setattr__(self, "sign", rows)
        flips = any(x < 0 for r in rows for x in r)
        object.__setattr__(self, "_signs", np.array(rows) if flips else None)
        object.__setattr__(self, "_pp", list(self.point_perm))
        object.__setattr__(self, "_cp", list(self.coord_perm))

    @property
    def has_flips(self) -> bool:
        return self._signs is not None

    def apply(self, q: np.ndarray) -> np.ndarray:
        out = q[self._pp][:, self._cp]
        if self._signs is not None:
            out = out * self._signs
        return out

    def compose(self, other: "GroupElement") -> "GroupElement":
        """``self o other``: first apply ``other``, then ``self``."""
        pp = tuple(other.point_perm[j] for j in self.point_perm)
        cp = tuple(other.coord_perm[c] for c in self.coord_perm)
        sg = tuple(
            tuple(self.sign[i][c] * other.sign[self.point_perm[i]][self.coord_perm[c]] for c in range(len(cp)))
            for i in range(len(pp))
        )
        return GroupElement(pp, cp, sg)

    def inverse(self) -> "GroupElement":
        pp = tuple(int(i) for i in np.argsort(self.point_perm))
        cp = tuple(int(c) for c in np.argsort(self.coord_perm))
        sg = tuple(tuple(self.sign[pp[j]][cp[e]] for e in range(len(cp))) for j in range(len(pp)))
        return GroupElement(pp, cp, sg)

    def matrix(self) -> np.ndarray:
        """Orthogonal ``nd x nd`` matrix acting on row-major flattened clouds."""
        n, d = len(self.point_perm), len(self.coord_perm)
        m = np.zeros((n * d, n * d))
        for i, j in enumerate(self.point_perm):
            for c, e in enumerate(self.coord_perm):
                m[i * d + c, j * d + e] = self.sign[i][c]
        return m


class FiniteGroupAction:
    """A finite group of signed point/coordinate permutations on ``(R^d)^n``.

    Closure under composition and inverses is verified on construction; the
    identity must come first so element ``0`` is always the identity.
    """

    def __init__(self, elements: Iterable[GroupElement], n: int, d: int, name: str = "G"):
        self.n, self.d, self.name = int(n), int(d), name
        self.elements: tuple[GroupElement, ...] = tuple(elements)
        if not self.elements or self.elements[0] != GroupElement.identity(self.n, self.d):
            raise ConfigurationError("element 0 of a group action must be the identity")
        for g in self.elements:
            if len(g.point_perm) != self.n or len(g.coord_perm) != self.d:
                raise ConfigurationError("group element does not act on (R^d)^n")
        self._index = {g: k for k, g in enumerate(self.elements)}
        if len(self._index) != len(self.elements):
            raise ConfigurationError("group elements must be distinct")
        for g in self.elements:
            if g.inverse() not in self._index:
                raise ConfigurationError("group action is not closed under inverses")
            for h in self.elements:
                if g.compose(h) not in self._index:
                    raise ConfigurationError("group action is not closed under composition")
        self.inverse_index = tuple(self._index[g.inverse()] for g in self.elements)
        # stacked index arrays for acting with every element at once
        self._pp = np.array([g.point_perm for g in self.elements], dtype=np.intp)[:, :, None]
        self._cp = np.array([g.coord_perm for g in self.elements], dtype=np.intp)[:, None, :]
        self._sg = np.array([g.sign for g in self.elements], dtype=np.float64)
        self._k = np.arange(len(self.elements))[:, None, None]

    def __len__(self):
        return len(self.elements)

    def __repr__(self):
        return f"FiniteGroupAction({self.name}, order={len(self)}, n={self.n}, d={self.d})"

    def index(self, g: GroupElement) -> int:
        return self._index[g]

    def apply(self, index: int, q) -> np.ndarray:
        return apply_group_element(self, index, q)

    def matrix(self, index: int) -> np.ndarray:
        return self.elements[index].matrix()

    def apply_all(self, q: np.ndarray) -> np.ndarray:
        """``out[k] = g_k . q`` for every element, shape ``(|G|, n, d)``."""
        return q[self._pp, self._cp] * self._sg

    def apply_each(self, qs: np.ndarray) -> np.ndarray:
        """``out[k] = g_k . qs[k]``."""
        return qs[self._k, self._pp, self._cp] * self._sg

    @classmethod
    def generated(cls, generators: Iterable[GroupElement], n: int, d: int, name="G"):
        """Close a set of generators under composition (breadth-first, identity first)."""
        ident = GroupElement.identity(n, d)
        gens = list(generators)
        elements = [ident]
        seen = {ident}
        frontier = [ident]
        while frontier:
            nxt = []
            for g in frontier:
                for s in gens:
                    h = s.compose(g)
                    if h not in seen:
                        seen.add(h)
                        elements.append(h)
                        nxt.append(h)
            frontier = nxt
        return cls(elements, n, d, name=name)

    def product(self, other: "FiniteGroupAction") -> "FiniteGroupAction":
        """Group generated by both actions (the direct product when they commute)."""
        if (self.n, self.d) != (other.n, other.d):
            raise ConfigurationError("cannot combine actions on different spaces")
        return FiniteGroupAction.generated(
            self.elements[1:] + other.elements[1:], self.n, self.d, name=f"{self.name}x{other.name}"
        )

    def isotropy(self, q) -> list[int]:
        """Indices of elements fixing ``q`` exactly."""
        q = as_points(q, self.d)
        return [k for k, g in enumerate(self.elements) if np.array_equal(g.apply(q), q)]

    @property
    def reflection_axes(self) -> tuple[int, ...]:
        """Coordinates flipped by some pure reflection (no point or coordinate shuffle)."""
        ident_pp, ident_cp = tuple(range(self.n)), tuple(range(self.d))
        axes = set()
        for g in self.elements:
            if g.point_perm == ident_pp and g.coord_perm == ident_cp:
                axes.update(c for row in g.sign for c, s in enumerate(row) if s < 0)
        return tuple(sorted(axes))

    def wall_sides(self, q) -> np.ndarray:
        """Sign (-1, 0, +1) of every point along each reflection axis, shape ``(n, axes)``."""
        q = as_points(q, self.d)
        return np.sign(q[:, list(self.reflection_axes)]).astype(int)


def symmetric_group(n: int, d: int) -> FiniteGroupAction:
    """All ``n!`` relabelings of the points."""
    elements = [GroupElement.from_permutation(p, d) for p in itertools.permutations(range(n))]
    return FiniteGroupAction(elements, n, d, name=f"S{n}")


def reflection_group(n: int, d: int, axis: int = 0) -> FiniteGroupAction:
    """Flips of coordinate ``axis``, independently for each point (``Z_2^n``, size ``2^n``).

    Each point lives in the double of the half-space ``x[axis] >= 0``; the
    wall ``x[axis] = 0`` is fixed.  For ``n = 1`` this is the single
    reflection ``diag(-1, 1, ...)``.
    """
    if not 0 <= axis < d:
        raise ConfigurationError(f"reflection axis {axis} outside 0..{d - 1}")
    gens = []
    for i in range(n):
        sign = tuple(tuple(-1.0 if (k == i and c == axis) else 1.0 for c in range(d)) for k in range(n))
        gens.append(GroupElement(tuple(range(n)), tuple(range(d)), sign))
    return FiniteGroupAction.generated(gens, n, d, name="Z2" if n == 1 else f"Z2^{n}")


def trivial_group(n: int, d: int) -> FiniteGroupAction:
    return FiniteGroupAction([GroupElement.identity(n, d)], n, d, name="1")


def apply_group_element(action: FiniteGroupAction, index: int, q) -> np.ndarray:
    """Return ``g . q`` for the element at ``index``."""
    q = as_points(q)
    if q.shape != (action.n, action.d):
        raise ConfigurationError(
            f"cloud shape {q.shape} does not match action on ({action.n}, {action.d})"
        )
    if not 0 <= index < len(action):
        raise ConfigurationError(f"group element index {index} out of range")
    return action.elements[index].apply(q)


# ---------------------------------------------------------------------------
# strata


@dataclass(frozen=True)
class StratumSignature:
    """Coincidence partition of point indices.

    ``blocks`` are sorted internally and ordered by their smallest index, so two
    signatures compare equal exactly when the partitions agree.
    """

    blocks: tuple[tuple[int, ...], ...]
    multiset: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        blocks = tuple(sorted(tuple(sorted(int(i) for i in b)) for b in self.blocks))
        flat = sorted(i for b in blocks for i in b)
        if flat != list(range(len(flat))) or any(not b for b in blocks):
            raise ConfigurationError("blocks must partition 0..n-1")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "multiset", tuple(sorted(len(b) for b in blocks)))

    @property
    def sizes(self) -> tuple[int, ...]:
        """Block sizes in block order (ordered multiplicities for spectra)."""
        return tuple(len(b) for b in self.blocks)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    def __len__(self):
        return len(self.blocks)

    def __str__(self):
        sizes = ",".join(str(s) for s in self.sizes)
        blocks = ",".join("{" + ",".join(str(i) for i in b) + "}" for b in self.blocks)
        return f"[{sizes}] blocks={blocks}"


def _labels_to_signature(labels: np.ndarray) -> StratumSignature:
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return StratumSignature(tuple(tuple(g) for g in groups.values()))


def coincidence_labels(q, tol: float = 0.0) -> np.ndarray:
    """Component label per point under the transitive closure of ``|x_i - x_j| <= tol``."""
    if tol < 0:
        raise ConfigurationError("tol must be nonnegative")
    q = as_points(q)
    if tol == 0:
        _, inverse = np.unique(q, axis=0, return_inverse=True)
        return inverse.reshape(-1)
    adjacency = cdist(q, q) <= tol
    _, labels = connected_components(csr_matrix(adjacency), directed=False)
    return labels


def stratum_signature(q, tol: float = 0.0) -> StratumSignature:
    """Coincidence blocks of ``q``; ``tol=0`` groups exactly equal points."""
    return _labels_to_signature(coincidence_labels(q, tol))


def spectrum_signature(eigenvalues: Sequence[float], tol: float = 0.0) -> StratumSignature:
    """Ordered multiplicities of a real spectrum.

    The returned blocks index the *ascending-sorted* eigenvalues, so they are
    consecutive ranges and ``sizes`` is ``(m_1, ..., m_k)`` from the smallest
    eigenvalue up.
    """
    if tol < 0:
        raise ConfigurationError("tol must be nonnegative")
    ev = np.sort(np.asarray(eigenvalues, dtype=np.float64).reshape(-1))
    if ev.size == 0:
        raise ConfigurationError("empty spectrum")
    # in one dimension the tol-closure is exactly the run of sorted gaps <= tol
    breaks = np.flatnonzero(np.diff(ev) > tol) + 1
    bounds = [0, *breaks.tolist(), ev.size]
    return StratumSignature(tuple(tuple(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])))


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_points(a), as_points(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"cloud shapes differ: {a.shape} vs {b.shape}")
    return a, b


def same_stratum(a, b, tol: float = 0.0, action: FiniteGroupAction | None = None):
    """Return a permutation ``s`` with ``a_i = a_j <=> b_s(i) = b_s(j)``, or ``None``.

    When ``action`` contains reflections, coincidence blocks must also sit on
    the same side of every reflection wall (interior components of the double
    are distinct strata).
    """
    a, b = _check_pair(a, b)
    sig_a, sig_b = stratum_signature(a, tol), stratum_signature(b, tol)
    if sig_a.multiset != sig_b.multiset:
        return None

    def keyed(sig, q):
        sides = action.wall_sides(q) if action is not None and action.reflection_axes else None
        out = []
        for blk in sig.blocks:
            side = tuple(sides[blk[0]].tolist()) if sides is not None else ()
            out.append(((len(blk), side), blk))
        out.sort(key=lambda kb: (kb[0], kb[1][0]))
        return out

    ka, kb = keyed(sig_a, a), keyed(sig_b, b)
    if [k for k, _ in ka] != [k for k, _ in kb]:
        return None
    mapping = [0] * a.shape[0]
    for (_, blk_a), (_, blk_b) in zip(ka, kb):
        for i, j in zip(blk_a, blk_b):
            mapping[i] = j
    return Permutation(tuple(mapping))


def verifies_stratum_map(a, b, perm: Permutation, tol: float = 0.0) -> bool:
    """Check the biconditional ``a_i = a_j <=> b_perm(i) = b_perm(j)`` directly."""
    la, lb = coincidence_labels(a, tol), coincidence_labels(b, tol)
    n = len(la)
    return all(
        (la[i] == la[j]) == (lb[perm(i)] == lb[perm(j)]) for i in range(n) for j in range(i + 1, n)
    )


# ---------------------------------------------------------------------------
# orbit distance


def orbit_match(a, b, limit: int | None = ASSIGNMENT_LIMIT) -> tuple[float, Permutation]:
    """Optimal relabeling of ``b`` onto ``a``.

    Returns ``(distance, s)`` where ``s`` minimises ``sum |a_i - b_s(i)|^2``;
    the distance is the square root of that minimum.
    """
    a, b = _check_pair(a, b)
    n = a.shape[0]
    if limit is not None and n > limit:
        raise ConfigurationError(f"{n} points exceed the exact-assignment limit {limit}")
    diff = a[:, None, :] - b[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    # fsum is correctly rounded, so the value does not depend on labeling order
    total = math.fsum(cost[rows, cols].tolist())
    return math.sqrt(total), Permutation(tuple(int(c) for c in cols))


def orbit_distance(a, b, limit: int | None = ASSIGNMENT_LIMIT) -> float:
    """Quotient distance ``min_s sqrt(sum_i |a_i - b_s(i)|^2)`` over relabelings."""
    return orbit_match(a, b, limit)[0]
