"""Random Gaussian sensing matrix and its linear-algebra surface.

The m x n matrix D compresses length-n sparse vectors into length-m
dense codes. Entries are i.i.d. zero-mean Gaussian with variance 1/m,
so columns have unit expected squared norm and principal submatrices
of D'D are invertible with probability 1 whenever they are at most
m x m. Compression requires m < n; the classical recovery guarantee
m >= C_m * k * log(n) (k = sparsity) is documented here but not
enforced — acceptance tests calibrate m empirically instead.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetFormatError, DimensionError
from .rng import CounterRng

_MAGIC = b"SPSM1"


@dataclass(frozen=True)
class SensingMatrix:
    """Immutable m x n Gaussian projection, reproducible from its seed."""

    m: int
    n: int
    entries: np.ndarray
    seed: int

    def __post_init__(self):
        if self.entries.shape != (self.m, self.n):
            raise DimensionError(
                f"entries shape {self.entries.shape} != ({self.m}, {self.n})")
        self.entries.setflags(write=False)


@dataclass(frozen=True)
class IndexSet:
    """Sorted, duplicate-free column positions in [0, n)."""

    indices: tuple

    @classmethod
    def of(cls, indices, n):
        idx = sorted(int(i) for i in indices)
        for a, b in zip(idx, idx[1:]):
            if a == b:
                raise IndexError(f"duplicate index {a}")
        if idx and (idx[0] < 0 or idx[-1] >= n):
            bad = idx[0] if idx[0] < 0 else idx[-1]
            raise IndexError(f"index {bad} out of range [0, {n})")
        return cls(tuple(idx))

    def __len__(self):
        return len(self.indices)

    def as_array(self):
        return np.asarray(self.indices, dtype=np.intp)


def make_sensing_matrix(m, n, seed):
    """Draw the m x n sensing matrix for a seed.

    Entries come from the package's counter-based Gaussian stream scaled
    by 1/sqrt(m), so the same (m, n, seed) always yields bit-identical
    matrices. Requires 0 < m < n.
    """
    m, n = int(m), int(n)
    if m <= 0 or m >= n:
        raise DimensionError(f"need 0 < m < n, got m={m}, n={n}")
    g = CounterRng(seed).normal((m, n))
    return SensingMatrix(m=m, n=n, entries=g / np.sqrt(m), seed=int(seed))


def _as_index_set(p, n):
    if isinstance(p, IndexSet):
        if len(p) and (p.indices[0] < 0 or p.indices[-1] >= n):
            bad = p.indices[0] if p.indices[0] < 0 else p.indices[-1]
            raise IndexError(f"index {bad} out of range [0, {n})")
        return p
    return IndexSet.of(p, n)


def submatrix_cols(D, p):
    """Columns of D selected by the index set p, as a fresh m x |p| array."""
    p = _as_index_set(p, D.n)
    return np.array(D.entries[:, p.as_array()])


def gram_submatrix(D, p):
    """The |p| x |p| principal submatrix of D'D at rows/columns p."""
    cols = submatrix_cols(D, p)
    return cols.T @ cols


def save_sensing_matrix(D, path):
    """Write D as magic 'SPSM1' + (m, n, seed) LE uint64 + row-major LE float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQ", D.m, D.n, D.seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(np.ascontiguousarray(D.entries, dtype="<f8").tobytes())


def load_sensing_matrix(path):
    """Read a matrix written by :func:`save_sensing_matrix`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _MAGIC:
        raise DatasetFormatError("bad sensing-matrix magic", offset=0)
    if len(blob) < 5 + 24:
        raise DatasetFormatError("truncated sensing-matrix header", offset=len(blob))
    m, n, seed = struct.unpack_from("<QQQ", blob, 5)
    need = 5 + 24 + 8 * m * n
    if len(blob) != need:
        raise DatasetFormatError(
            f"sensing-matrix payload is {len(blob)} bytes, expected {need}",
            offset=min(len(blob), need))
    entries = np.frombuffer(blob, dtype="<f8", count=m * n, offset=29).reshape(m, n)
    return SensingMatrix(m=int(m), n=int(n), entries=entries.astype(np.float64),
                         seed=int(seed))
