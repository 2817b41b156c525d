"""Token containers, index bookkeeping and pairwise feature distances.

Token positions are 1-based throughout the public API (position 1 is the
class token).  Internally arrays are 0-based; the conversion happens only at
the ``IndexSet`` boundary.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

TOKENSET_MAGIC = int.from_bytes(b"TOEtoken", "little")
TOKENSET_VERSION = 1
_HEADER = struct.Struct("<4q")


class Metric(str, enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"

    @classmethod
    def parse(cls, value: Union[str, "Metric"]) -> "Metric":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown distance metric {value!r} (expected one of: {choices})") from None


class TokenSet:
    """An ``N x d`` matrix of finite token features."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"TokenSet needs a 2-D array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"TokenSet needs N >= 1 and d >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.argwhere(~np.isfinite(arr))[0, 0]) + 1
            raise ValueError(f"TokenSet contains non-finite values (first at token {bad})")
        self.data = arr

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.N

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSet):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"TokenSet(N={self.N}, d={self.d})"

    def rows(self, index_set: "IndexSet") -> np.ndarray:
        """Rows at the given 1-based positions, in index order."""
        index_set.check_bounds(self.N)
        return self.data[index_set.zero_based()]

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        header = _HEADER.pack(TOKENSET_MAGIC, TOKENSET_VERSION, self.N, self.d)
        return header + self.data.astype("<f8", copy=False).tobytes(order="C")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TokenSet":
        if len(raw) < _HEADER.size:
            raise ValueError("truncated TokenSet header")
        magic, version, n, d = _HEADER.unpack_from(raw, 0)
        if magic != TOKENSET_MAGIC:
            raise ValueError("not a TokenSet file (bad magic)")
        if version != TOKENSET_VERSION:
            raise ValueError(f"unsupported TokenSet version {version}")
        expected = _HEADER.size + 8 * n * d
        if len(raw) != expected:
            raise ValueError(f"TokenSet payload size mismatch: expected {expected} bytes, got {len(raw)}")
        data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, d)
        return cls(data.astype(np.float64))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TokenSet":
        return cls.from_bytes(Path(path).read_bytes())


class IndexSet:
    """Strictly increasing 1-based token positions."""

    __slots__ = ("_idx",)

    def __init__(self, indices: Iterable[int] = ()):
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("IndexSet must be one-dimensional")
        if idx.size and idx[0] < 1:
            raise ValueError(f"token positions are 1-based, got {int(idx[0])}")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("IndexSet must be strictly increasing without duplicates")
        idx.setflags(write=False)
        self._idx = idx

    @classmethod
    def from_zero_based(cls, positions) -> "IndexSet":
        return cls(np.sort(np.asarray(positions, dtype=np.int64)) + 1)

    @classmethod
    def _from_sorted_zero_based(cls, positions: np.ndarray) -> "IndexSet":
        # caller guarantees strictly increasing, non-negative positions
        out = cls.__new__(cls)
        idx = positions.astype(np.int64) + 1
        idx.setflags(write=False)
        out._idx = idx
        return out

    def zero_based(self) -> np.ndarray:
        return self._idx - 1

    def check_bounds(self, n: int) -> None:
        if self._idx.size and self._idx[-1] > n:
            raise IndexError(f"token position {int(self._idx[-1])} out of range for N={n}")

    def __len__(self) -> int:
        return int(self._idx.size)

    def __iter__(self):
        return (int(i) for i in self._idx)

    def __contains__(self, item) -> bool:
        pos = np.searchsorted(self._idx, item)
        return bool(pos < self._idx.size and self._idx[pos] == item)

    def __eq__(self, other) -> bool:
        if isinstance(other, IndexSet):
            return bool(np.array_equal(self._idx, other._idx))
        return NotImplemented

    def __hash__(self):
        return hash(self._idx.tobytes())

    def __repr__(self) -> str:
        return f"IndexSet({self._idx.tolist()})"

    def tolist(self) -> list[int]:
        return self._idx.tolist()


@dataclass(frozen=True)
class SelectionState:
    """Disjoint split of ``source`` into selected (A) and unselected (B) tokens."""

    selected: IndexSet
    unselected: IndexSet
    source: TokenSet

    def __post_init__(self):
        n = self.source.N
        self.selected.check_bounds(n)
        self.unselected.check_bounds(n)
        if len(self.selected) + len(self.unselected) != n:
            raise ValueError("selected and unselected must partition all tokens")
        seen = np.zeros(n, dtype=bool)
        seen[self.selected.zero_based()] = True
        if np.any(seen[self.unselected.zero_based()]):
            raise ValueError("selected and unselected overlap")

    @classmethod
    def from_mask(cls, source: TokenSet, mask: np.ndarray) -> "SelectionState":
        """Split by a boolean mask over the ``N`` tokens (True = selected)."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (source.N,):
            raise ValueError(f"mask shape {mask.shape} does not match N={source.N}")
        # a mask is a partition by construction, so the field checks are skipped
        state = object.__new__(cls)
        object.__setattr__(state, "selected", IndexSet._from_sorted_zero_based(np.flatnonzero(mask)))
        object.__setattr__(state, "unselected", IndexSet._from_sorted_zero_based(np.flatnonzero(~mask)))
        object.__setattr__(state, "source", source)
        return state

    def mask(self) -> np.ndarray:
        m = np.zeros(self.source.N, dtype=bool)
        m[self.selected.zero_based()] = True
        return m

    @property
    def A(self) -> np.ndarray:
        return self.source.rows(self.selected)

    @property
    def B(self) -> np.ndarray:
        return self.source.rows(self.unselected)


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray  # [|B|, |A|]
    metric: Metric


def _as_rows(x) -> np.ndarray:
    if isinstance(x, TokenSet):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D token matrix, got shape {arr.shape}")
    return arr


def pairwise_distance(B, A, metric: Union[str, Metric] = Metric.COSINE) -> DistanceMatrix:
    """Distances between every row of ``B`` and every row of ``A``.

    Cosine distance is ``1 - cos`` per row pair, so it lies in [0, 2].
    Zero-norm rows are rejected under cosine rather than epsilon-guarded,
    because a guard silently changes which token wins the selection.
    """
    metric = Metric.parse(metric)
    B = _as_rows(B)
    A = _as_rows(A)
    if A.shape[0] < 1:
        raise ValueError("pairwise_distance needs at least one selected token")
    if B.shape[1] != A.shape[1]:
        raise ValueError(f"feature dimension mismatch: B has d={B.shape[1]}, A has d={A.shape[1]}")

    if metric is Metric.COSINE:
        nb = np.sqrt(np.einsum("ij,ij->i", B, B))
        na = np.sqrt(np.einsum("ij,ij->i", A, A))
        for name, norms in (("B", nb), ("A", na)):
            zero = np.flatnonzero(norms == 0.0)
            if zero.size:
                raise ValueError(f"zero-norm token at row {int(zero[0])} of {name} under cosine distance")
        values = 1.0 - (B @ A.T) / (nb[:, None] * na[None, :])
    elif metric is Metric.EUCLIDEAN:
        diff = B[:, None, :] - A[None, :, :]
        values = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    else:
        values = np.abs(B[:, None, :] - A[None, :, :]).sum(axis=-1)
    return DistanceMatrix(values, metric)


def min_distance_to_selected(D: Union[DistanceMatrix, np.ndarray]) -> np.ndarray:
    """Per-row minimum over the selected tokens: the importance score of each B token."""
    values = D.values if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 1:
        raise ValueError("min_distance_to_selected needs at least one selected token")
    return values.min(axis=1)
