"""Cayley-Dickson multiplication tables and hypercomplex arithmetic.

A multiplication table is stored as two integer matrices: ``index[r, c]``
names the weight component and ``sign[r, c]`` (+1 or -1) its sign, so that
for ``y = w * x``::

    y[r] = sum_c sign[r, c] * w[index[r, c]] * x[c]

Keeping the sign apart from the index means a "-0" entry is representable
without leaning on signed-zero floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

SUPPORTED_DIMS = (1, 2, 4, 8, 16)

# Sedenion weight table as printed in the reference write-up, row r listing
# the signed weight index that multiplies x_c in output component r.
_TRANSCRIBED_ROWS = """
 0 -1 -2 -3 -4 -5 -6 -7 -8 -9 -10 -11 -12 -13 -14 -15
 1 0 -3 2 -5 4 7 -6 -9 8 11 -10 13 -12 -15 14
 2 3 0 -1 -6 -7 4 5 -10 -11 8 9 14 15 -12 -13
 3 -2 1 0 -7 6 -5 4 -11 10 -9 8 15 -14 13 -12
 4 5 6 7 0 -1 -2 -3 -12 -13 -14 -15 8 9 10 11
 5 -4 7 -6 1 0 3 -2 -13 12 -15 14 -9 8 -11 10
 6 -7 -4 5 2 -3 0 1 -14 15 12 -13 -10 11 8 -9
 7 6 -5 -4 3 2 -1 0 -15 -14 13 12 -11 -10 9 8
 8 9 10 11 12 13 14 15 0 -1 -2 -3 -4 -5 -6 -7
 9 -8 11 -10 13 -12 -15 14 1 0 3 -2 5 -4 -7 6
 10 -11 -8 9 14 15 -12 -13 2 -3 0 1 6 7 -4 -5
 11 10 -9 -8 15 -14 13 -12 3 2 -1 0 7 -6 5 -4
 12 -13 -14 -15 -8 9 10 11 4 -5 -6 -7 0 1 2 3
 13 12 -15 14 -9 -8 -11 10 5 4 -7 6 -1 0 -3 2
 14 15 12 -13 -10 11 -8 -9 6 7 4 -5 -2 3 0 -1
 15 -14 13 12 -11 -10 9 -8 7 -6 5 4 -3 -2 1 0
"""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SignedIndexTable:
    index: np.ndarray
    sign: np.ndarray

    def __post_init__(self):
        index = np.asarray(self.index, dtype=np.int64)
        sign = np.asarray(self.sign, dtype=np.int64)
        if index.ndim != 2 or index.shape[0] != index.shape[1]:
            raise ValueError(f"table must be square, got shape {index.shape}")
        if sign.shape != index.shape:
            raise ValueError("sign and index matrices differ in shape")
        if index.shape[0] not in SUPPORTED_DIMS:
            raise ValueError(f"unsupported dimension {index.shape[0]}")
        if not np.all(np.abs(sign) == 1):
            raise ValueError("signs must be +1 or -1")
        if index.min() < 0 or index.max() >= index.shape[0]:
            raise ValueError("component index out of range")
        object.__setattr__(self, "index", _frozen(index))
        object.__setattr__(self, "sign", _frozen(sign))

    @property
    def dim(self) -> int:
        return self.index.shape[0]

    @classmethod
    def from_signed(cls, signed) -> "SignedIndexTable":
        """Build from a plain signed-integer matrix; zero entries get sign +1."""
        signed = np.asarray(signed, dtype=np.int64)
        return cls(np.abs(signed), np.where(signed < 0, -1, 1))

    def signed(self) -> np.ndarray:
        """The ``sign * index`` matrix (zero entries print as 0)."""
        return self.sign * self.index

    def entry(self, r: int, c: int) -> tuple[int, int]:
        return int(self.sign[r, c]), int(self.index[r, c])

    def is_latin_square(self) -> bool:
        full = np.arange(self.dim)
        rows_ok = all(np.array_equal(np.sort(row), full) for row in self.index)
        cols_ok = all(np.array_equal(np.sort(col), full) for col in self.index.T)
        return rows_ok and cols_ok

    def mismatches(self, other: "SignedIndexTable") -> list[tuple[int, int, int, int]]:
        """Entries where the two tables disagree, as ``(r, c, mine, theirs)``."""
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        bad = (self.index != other.index) | (self.sign != other.sign)
        mine, theirs = self.signed(), other.signed()
        return [(int(r), int(c), int(mine[r, c]), int(theirs[r, c]))
                for r, c in zip(*np.nonzero(bad))]

    def __eq__(self, other):
        if not isinstance(other, SignedIndexTable):
            return NotImplemented
        return (self.dim == other.dim
                and np.array_equal(self.index, other.index)
                and np.array_equal(self.sign, other.sign))

    def __hash__(self):
        return hash((self.index.tobytes(), self.sign.tobytes()))

    def to_text(self) -> str:
        return "\n".join(" ".join(str(v) for v in row) for row in self.signed())


@dataclass(frozen=True, eq=False)
class HyperNumber:
    components: np.ndarray

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=np.float64)
        if comps.ndim != 1 or comps.size not in SUPPORTED_DIMS:
            raise ValueError(f"need 1, 2, 4, 8 or 16 components, got shape {comps.shape}")
        if not np.all(np.isfinite(comps)):
            raise ValueError("hypercomplex components must be finite")
        object.__setattr__(self, "components", _frozen(comps))

    @classmethod
    def basis(cls, k: int, dim: int = 16) -> "HyperNumber":
        e = np.zeros(dim)
        e[k] = 1.0
        return cls(e)

    @classmethod
    def real(cls, value: float, dim: int = 16) -> "HyperNumber":
        return cls.basis(0, dim) * value

    @property
    def dim(self) -> int:
        return self.components.size

    def __add__(self, other: "HyperNumber") -> "HyperNumber":
        return HyperNumber(self.components + other.components)

    def __sub__(self, other: "HyperNumber") -> "HyperNumber":
        return HyperNumber(self.components - other.components)

    def __neg__(self) -> "HyperNumber":
        return HyperNumber(-self.components)

    def __mul__(self, scalar: float) -> "HyperNumber":
        return HyperNumber(self.components * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, HyperNumber):
            return NotImplemented
        return np.array_equal(self.components, other.components)

    def __hash__(self):
        return hash(self.components.tobytes())

    def is_zero(self) -> bool:
        return not np.any(self.components)

    def __repr__(self):
        terms = [f"{v:+g}e{k}" for k, v in enumerate(self.components) if v]
        return f"HyperNumber({' '.join(terms) or '0'})"


def conjugate(a: HyperNumber) -> HyperNumber:
    comps = -a.components
    comps[0] = a.components[0]
    return HyperNumber(comps)


def _conj(x: np.ndarray) -> np.ndarray:
    y = -x
    y[0] = x[0]
    return y


def _cd_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (p, q)(r, s) = (pr - s*q, sp + qr*), where * is conjugation. Of the
    # usual doubling variants this is the one whose dim-16 table agrees with
    # the published sedenion weight matrix entry for entry.
    n = a.size
    if n == 1:
        return a * b
    h = n // 2
    p, q, r, s = a[:h], a[h:], b[:h], b[h:]
    return np.concatenate([
        _cd_product(p, r) - _cd_product(_conj(s), q),
        _cd_product(s, p) + _cd_product(q, _conj(r)),
    ])


def cayley_dickson_table(dim: int) -> SignedIndexTable:
    """Multiplication table of the ``dim``-dimensional Cayley-Dickson algebra."""
    if dim not in SUPPORTED_DIMS:
        raise ValueError(f"dim must be a power of two no larger than 16, got {dim}")
    index = np.zeros((dim, dim), dtype=np.int64)
    sign = np.ones((dim, dim), dtype=np.int64)
    eye = np.eye(dim)
    for m in range(dim):
        for c in range(dim):
            prod = _cd_product(eye[m], eye[c])
            (r,) = np.flatnonzero(prod)
            index[r, c] = m
            sign[r, c] = 1 if prod[r] > 0 else -1
    return SignedIndexTable(index, sign)


def paper_table_16() -> SignedIndexTable:
    """Hand-transcribed sedenion table, kept as an oracle for the recursion."""
    rows = [[int(v) for v in line.split()] for line in _TRANSCRIBED_ROWS.strip().splitlines()]
    return SignedIndexTable.from_signed(rows)


def hyper_mul(a: HyperNumber, b: HyperNumber, table: SignedIndexTable) -> HyperNumber:
    """Product ``a * b``, with ``a`` in the weight role and ``b`` the input."""
    if not a.dim == b.dim == table.dim:
        raise ValueError(f"dimension mismatch: {a.dim}, {b.dim}, table {table.dim}")
    left = table.sign * a.components[table.index]
    return HyperNumber(left @ b.components)


def _pair_candidates(dim: int) -> list[HyperNumber]:
    cands = []
    for i, j in combinations(range(1, dim), 2):
        for s in (1.0, -1.0):
            v = np.zeros(dim)
            v[i], v[j] = 1.0, s
            cands.append(HyperNumber(v))
    return cands


def find_zero_divisor(table: SignedIndexTable) -> tuple[HyperNumber, HyperNumber] | None:
    """First pair ``(e_i +- e_j, e_k +- e_l)`` whose product is exactly zero.

    Searches every such pair of imaginary units in a fixed order; algebras
    of dimension 8 and below have none.
    """
    cands = _pair_candidates(table.dim)
    if not cands:
        return None
    vecs = np.stack([u.components for u in cands])
    # left[u] is the matrix of left-multiplication by candidate u
    left = table.sign[None] * vecs[:, table.index]
    prods = np.einsum("urc,vc->uvr", left, vecs)
    hits = np.argwhere(np.all(prods == 0.0, axis=-1))
    if hits.size == 0:
        return None
    u, v = hits[0]
    return cands[u], cands[v]
