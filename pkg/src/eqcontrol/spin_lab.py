"""Permutation-invariant spin Hamiltonians and dynamical Lie algebra closure.

Dense ``2^n x 2^n`` matrices, ``n <= 10``.  Qubit ``0`` is the most
significant tensor factor.  The Pauli ``Y`` follows the sign convention
``[[0, i], [-i, 0]]``; closure dimensions do not depend on that sign.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError

MAX_QUBITS = 10

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, 1j], [-1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def _check_size(n: int) -> None:
    if n < 1:
        raise ConfigurationError("need at least one qubit")
    if n > MAX_QUBITS:
        raise CapabilityError(f"{n} qubits exceed the dense limit of {MAX_QUBITS}")


def pauli_string(letters: Sequence[str]) -> np.ndarray:
    """Kronecker product of single-qubit Paulis, leftmost letter = qubit 0."""
    letters = [str(s).upper() for s in letters]
    _check_size(len(letters))
    try:
        factors = [PAULI[s] for s in letters]
    except KeyError as exc:
        raise ConfigurationError(f"unknown Pauli letter {exc.args[0]!r}") from None
    return reduce(np.kron, factors)


def _placed(n: int, placement: dict[int, str]) -> np.ndarray:
    return pauli_string([placement.get(i, "I") for i in range(n)])


def symmetric_hamiltonian(kind: str, n: int) -> np.ndarray:
    """Permutation-invariant Hamiltonians.

    ``zz``: sum over pairs ``k < m`` of ``Z_k Z_m``; ``xyz``: sum over ordered
    triples of distinct sites of ``X_i Y_j Z_k`` (zero matrix for ``n = 2``);
    ``collective_x`` / ``collective_z``: sum of single-site ``X`` / ``Z``.
    """
    _check_size(n)
    dim = 2**n
    if kind == "zz":
        if n < 2:
            raise ConfigurationError("zz coupling needs n >= 2")
        terms = (_placed(n, {k: "Z", m: "Z"}) for k, m in itertools.combinations(range(n), 2))
    elif kind == "xyz":
        if n < 2:
            raise ConfigurationError("xyz coupling needs n >= 2")
        terms = (_placed(n, {i: "X", j: "Y", k: "Z"}) for i, j, k in itertools.permutations(range(n), 3))
    elif kind in ("collective_x", "collective_z"):
        letter = kind[-1].upper()
        terms = (_placed(n, {i: letter}) for i in range(n))
    else:
        raise ConfigurationError(f"unknown Hamiltonian kind {kind!r}")
    return sum(terms, np.zeros((dim, dim), dtype=complex))


def qubit_permutation_unitary(perm: Sequence[int]) -> np.ndarray:
    """Unitary sending qubit ``i`` to position ``perm[i]``."""
    n = len(perm)
    _check_size(n)
    dim = 2**n
    u = np.zeros((dim, dim))
    for b in range(dim):
        bits = [(b >> (n - 1 - i)) & 1 for i in range(n)]
        out = [0] * n
        for i, bit in enumerate(bits):
            out[perm[i]] = bit
        u[int("".join(map(str, out)), 2), b] = 1.0
    return u.astype(complex)


def dicke_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the symmetric subspace, columns ordered by excitation count."""
    _check_size(n)
    dim = 2**n
    basis = np.zeros((dim, n + 1), dtype=complex)
    for b in range(dim):
        basis[b, bin(b).count("1")] = 1.0
    return basis / np.linalg.norm(basis, axis=0)


def symmetric_sector_projector(n: int, method: str = "auto") -> np.ndarray:
    """``(1/n!) sum_s U_s``, the projector onto the permutation-symmetric subspace.

    ``method="sum"`` averages the ``n!`` permutation unitaries explicitly;
    ``"dicke"`` builds the same projector from the symmetric (Dicke) basis.
    ``"auto"`` sums for ``n <= 6`` and uses the Dicke basis beyond.
    """
    _check_size(n)
    if method == "auto":
        method = "sum" if n <= 6 else "dicke"
    if method == "sum":
        perms = list(itertools.permutations(range(n)))
        total = sum(qubit_permutation_unitary(p) for p in perms)
        return total / math.factorial(n)
    if method == "dicke":
        b = dicke_basis(n)
        return b @ b.conj().T
    raise ConfigurationError(f"unknown projector method {method!r}")


def sector_restrict(matrix: np.ndarray, n: int) -> np.ndarray:
    """Compress an operator to the symmetric sector in the Dicke basis (``(n+1) x (n+1)``)."""
    b = dicke_basis(n)
    return b.conj().T @ matrix @ b


# ---------------------------------------------------------------------------
# Lie closure


@dataclass
class LieClosureReport:
    dimension: int
    basis: list[np.ndarray]
    iterations: int
    converged: bool

    def closure_residual(self) -> float:
        """Largest norm of a basis commutator left outside the span."""
        if not self.basis:
            return 0.0
        flat = np.array([b.reshape(-1) for b in self.basis])
        worst = 0.0
        for a, b in itertools.combinations(self.basis, 2):
            c = (a @ b - b @ a).reshape(-1)
            coef = flat.conj() @ c
            worst = max(worst, float(np.linalg.norm(c - coef.real @ flat)))
        return worst

    def to_csv(self) -> str:
        lines = ["element,row,col,re,im"]
        for e, m in enumerate(self.basis):
            for r, c in zip(*np.nonzero(np.abs(m) > 0)):
                lines.append(f"{e},{r},{c},{m[r, c].real!r},{m[r, c].imag!r}")
        return "\n".join(lines) + "\n"


def _inner(a: np.ndarray, b: np.ndarray) -> float:
    # real Frobenius inner product: the algebra is a real vector space
    return float(np.vdot(a, b).real)


def _residual(basis: list[np.ndarray], m: np.ndarray) -> np.ndarray:
    r = m
    for _ in range(2):
        for b in basis:
            r = r - _inner(b, r) * b
    return r


def lie_closure(generators: Sequence[np.ndarray], max_dim: int = 4096, tol: float = 1e-10) -> LieClosureReport:
    """Real Lie algebra generated by ``{i H}`` for Hermitian generators ``H``.

    Gram-Schmidt in the Frobenius inner product; every newly added element is
    commuted with the whole basis (pairs processed in order of their indices)
    until nothing new appears or ``max_dim`` is reached.
    """
    if max_dim < 1:
        raise ConfigurationError("max_dim must be >= 1")
    basis: list[np.ndarray] = []

    def absorb(m: np.ndarray) -> bool:
        norm = np.linalg.norm(m)
        if norm <= tol:
            return False
        r = _residual(basis, m / norm)
        rn = np.linalg.norm(r)
        if rn <= tol:
            return False
        basis.append(r / rn)
        return True

    for h in generators:
        h = np.asarray(h, dtype=complex)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ConfigurationError("generators must be square matrices")
        if np.linalg.norm(h - h.conj().T) > 1e-12 * max(1.0, np.linalg.norm(h)):
            raise ConfigurationError("generators must be Hermitian")
        if len(basis) < max_dim:
            absorb(1j * h)
    iterations = 0
    pending = 0
    while pending < len(basis):
        iterations += 1
        new = basis[pending]
        for j in range(pending):
            if len(basis) >= max_dim:
                return LieClosureReport(len(basis), basis, iterations, False)
            other = basis[j]
            absorb(other @ new - new @ other)
        pending += 1
    return LieClosureReport(len(basis), basis, iterations, True)
