"""Symmetric tensor algebra in Mandel storage.

A symmetric d x d tensor is stored as a flat vector of ``d(d+1)/2`` entries:
the diagonal first, then the off-diagonal entries scaled by sqrt(2).  With this
scaling the Frobenius product is the plain Euclidean dot product, which keeps
every vectorized field operation a simple ``einsum``/``sum``.

Ordering:
    d=2: [xx, yy, sqrt2*xy]
    d=3: [xx, yy, zz, sqrt2*yz, sqrt2*xz, sqrt2*xy]

All array functions act on the last axis, so fields of shape ``(n_cells, ns)``
are handled in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SQRT2 = np.sqrt(2.0)

_OFFDIAG = {2: ((0, 1),), 3: ((1, 2), (0, 2), (0, 1))}


def nsym(d: int) -> int:
    if d not in (2, 3):
        raise ValueError(f"unsupported dimension d={d}")
    return d * (d + 1) // 2


def dim_of(ns: int) -> int:
    if ns == 3:
        return 2
    if ns == 6:
        return 3
    raise ValueError(f"no symmetric tensor space with {ns} Mandel components")


@lru_cache(maxsize=None)
def identity(d: int = 2) -> np.ndarray:
    out = np.zeros(nsym(d))
    out[:d] = 1.0
    out.setflags(write=False)
    return out


def trace(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    d = dim_of(t.shape[-1])
    return t[..., :d].sum(axis=-1)


def dev(t: np.ndarray) -> np.ndarray:
    """Deviatoric part t - tr(t)/d I."""
    t = np.asarray(t, dtype=float)
    d = dim_of(t.shape[-1])
    out = t.copy()
    out[..., :d] -= (t[..., :d].sum(axis=-1) / d)[..., None]
    return out


def inner(s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Frobenius product s:t."""
    return np.sum(np.asarray(s, dtype=float) * np.asarray(t, dtype=float), axis=-1)


def norm(t: np.ndarray) -> np.ndarray:
    return np.sqrt(inner(t, t))


def to_matrix(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    d = dim_of(t.shape[-1])
    out = np.zeros(t.shape[:-1] + (d, d))
    for i in range(d):
        out[..., i, i] = t[..., i]
    for k, (i, j) in enumerate(_OFFDIAG[d]):
        v = t[..., d + k] / SQRT2
        out[..., i, j] = v
        out[..., j, i] = v
    return out


def from_matrix(m: np.ndarray, check: bool = True) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    d = m.shape[-1]
    if m.shape[-2] != d:
        raise ValueError("matrix must be square")
    if check and not np.allclose(m, np.swapaxes(m, -1, -2), rtol=1e-12, atol=1e-14):
        raise ValueError("matrix is not symmetric")
    out = np.empty(m.shape[:-2] + (nsym(d),))
    for i in range(d):
        out[..., i] = m[..., i, i]
    for k, (i, j) in enumerate(_OFFDIAG[d]):
        out[..., d + k] = SQRT2 * 0.5 * (m[..., i, j] + m[..., j, i])
    return out


def sym_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetrized tensor product (a_i b_j + a_j b_i)/2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = 0.5 * (a[..., :, None] * b[..., None, :] + b[..., :, None] * a[..., None, :])
    return from_matrix(m, check=False)


@lru_cache(maxsize=None)
def dev_projector(d: int = 2) -> np.ndarray:
    """Matrix of the deviatoric projection acting on Mandel vectors."""
    i = identity(d)
    out = np.eye(nsym(d)) - np.outer(i, i) / d
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def dev_basis(d: int = 2) -> np.ndarray:
    """Orthonormal basis of the trace-free subspace, shape (ns, ns-1)."""
    ns = nsym(d)
    w, v = np.linalg.eigh(dev_projector(d))
    basis = v[:, w > 0.5]
    assert basis.shape == (ns, ns - 1)
    basis.setflags(write=False)
    return basis


def isotropic_matrix(mu, lam, d: int = 2) -> np.ndarray:
    """Mandel matrix of A -> 2 mu A + lam tr(A) I, broadcast over mu/lam."""
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    i = identity(d)
    eye = np.eye(nsym(d))
    return 2.0 * mu[..., None, None] * eye + lam[..., None, None] * np.outer(i, i)


def apply_isotropic(mu, lam, t: np.ndarray) -> np.ndarray:
    """2 mu t + lam tr(t) I without forming the matrix."""
    t = np.asarray(t, dtype=float)
    d = dim_of(t.shape[-1])
    mu = np.asarray(mu, dtype=float)[..., None]
    lam = np.asarray(lam, dtype=float)
    out = 2.0 * mu * t
    out[..., :d] += (lam * trace(t))[..., None]
    return out


@dataclass(frozen=True)
class SymTensor2:
    """Value type for a symmetric 2x2 tensor [[a, c], [c, b]].

    A 3-D value is built with :meth:`from_matrix` or :meth:`from_mandel` and
    carries six stored entries; ``a, b, c`` are then unused.
    """

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    _m: tuple | None = None

    @property
    def mandel(self) -> np.ndarray:
        if self._m is not None:
            return np.array(self._m, dtype=float)
        return np.array([self.a, self.b, SQRT2 * self.c], dtype=float)

    @property
    def d(self) -> int:
        return dim_of(len(self._m)) if self._m is not None else 2

    @classmethod
    def from_mandel(cls, m) -> "SymTensor2":
        m = np.asarray(m, dtype=float)
        if m.shape == (3,):
            return cls(float(m[0]), float(m[1]), float(m[2] / SQRT2))
        if m.shape == (6,):
            return cls(_m=tuple(float(x) for x in m))
        raise ValueError(f"bad Mandel vector shape {m.shape}")

    @classmethod
    def from_matrix(cls, m) -> "SymTensor2":
        return cls.from_mandel(from_matrix(m))

    @classmethod
    def identity(cls, d: int = 2) -> "SymTensor2":
        return cls.from_mandel(identity(d))

    def matrix(self) -> np.ndarray:
        return to_matrix(self.mandel)

    def trace(self) -> float:
        return float(trace(self.mandel))

    def dev(self) -> "SymTensor2":
        return SymTensor2.from_mandel(dev(self.mandel))

    def inner(self, other: "SymTensor2") -> float:
        return float(inner(self.mandel, other.mandel))

    def norm(self) -> float:
        return float(norm(self.mandel))

    def __add__(self, other: "SymTensor2") -> "SymTensor2":
        return SymTensor2.from_mandel(self.mandel + other.mandel)

    def __sub__(self, other: "SymTensor2") -> "SymTensor2":
        return SymTensor2.from_mandel(self.mandel - other.mandel)

    def __mul__(self, s: float) -> "SymTensor2":
        return SymTensor2.from_mandel(float(s) * self.mandel)

    __rmul__ = __mul__

    def __neg__(self) -> "SymTensor2":
        return self * -1.0

    @staticmethod
    def sym_outer(a, b) -> "SymTensor2":
        return SymTensor2.from_mandel(sym_outer(a, b))
