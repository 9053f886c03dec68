"""
Dense float32 linear algebra and permutation keys.

Permutations are index arrays. The dense 0/1 matrix pi with
pi[j][forward[j]] = 1 is the reference semantics; every operation here is a
gather that reproduces the corresponding product with pi or pi^T.
"""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from app.errors import SizeError

DTYPE = np.float32
LN_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class PermutationKey:
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward: Sequence[int]) -> "PermutationKey":
        fwd = np.asarray(forward, dtype=np.int64)
        if fwd.ndim != 1 or fwd.size == 0:
            raise SizeError("permutation must be a non-empty 1-D index array")
        n = fwd.size
        if fwd.min() < 0 or fwd.max() >= n or np.unique(fwd).size != n:
            raise SizeError(f"index array of length {n} is not a bijection on 0..{n - 1}")
        inv = np.empty(n, dtype=np.int64)
        inv[fwd] = np.arange(n, dtype=np.int64)
        fwd.setflags(write=False)
        inv.setflags(write=False)
        return cls(forward=fwd, inverse=inv)

    @classmethod
    def identity(cls, n: int) -> "PermutationKey":
        if n < 1:
            raise SizeError("permutation size must be >= 1")
        return cls.from_forward(np.arange(n))

    @property
    def size(self) -> int:
        return int(self.forward.size)

    def invert(self) -> "PermutationKey":
        return PermutationKey(forward=self.inverse, inverse=self.forward)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.forward, np.arange(self.size)))

    def dense(self) -> np.ndarray:
        """The 0/1 matrix pi; for tests and small sizes only."""
        pi = np.zeros((self.size, self.size), dtype=DTYPE)
        pi[np.arange(self.size), self.forward] = 1.0
        return pi

    def __eq__(self, other) -> bool:
        if not isinstance(other, PermutationKey):
            return NotImplemented
        return bool(np.array_equal(self.forward, other.forward))

    def __hash__(self) -> int:
        return hash(self.forward.tobytes())

    def __repr__(self) -> str:
        head = ",".join(str(int(i)) for i in self.forward[:8])
        more = ",..." if self.size > 8 else ""
        return f"PermutationKey(n={self.size}, forward=[{head}{more}])"


def invert(k: PermutationKey) -> PermutationKey:
    return k.invert()


def permute_cols(x: np.ndarray, k: PermutationKey) -> np.ndarray:
    """x @ pi along the last axis: out[..., forward[j]] = x[..., j]."""
    if x.shape[-1] != k.size:
        raise SizeError(f"permute_cols: last dimension {x.shape[-1]} != key size {k.size}")
    return x[..., k.inverse]


def permute_rows(w: np.ndarray, k: PermutationKey) -> np.ndarray:
    """pi^T @ w: out[forward[j], :] = w[j, :]."""
    if w.shape[0] != k.size:
        raise SizeError(f"permute_rows: {w.shape[0]} rows != key size {k.size}")
    return w[k.inverse, ...]


def random_permutation(seed: int, n: int) -> PermutationKey:
    if n < 1:
        raise SizeError("cannot draw a permutation of size 0")
    rng = np.random.default_rng(seed)
    # Generator.permutation is a Fisher-Yates shuffle
    return PermutationKey.from_forward(rng.permutation(n))


def keyspace_bits(n: int) -> float:
    """log2(n!) by exact summation of log2(i)."""
    if n < 1:
        raise SizeError("keyspace of a size-0 permutation is undefined")
    return math.fsum(math.log2(i) for i in range(2, n + 1))


# ---------- dense kernels ----------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise SizeError(f"matmul: {a.shape} x {b.shape} not conformable")
    return np.matmul(a, b)


def add_bias(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != b.shape[-1]:
        raise SizeError(f"add_bias: width {x.shape[-1]} != bias {b.shape[-1]}")
    return x + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0.0))


def causal_mask(l: int) -> np.ndarray:
    """Decoder mask M: -inf strictly above the diagonal, 0 elsewhere."""
    mask = np.zeros((l, l), dtype=DTYPE)
    mask[np.triu_indices(l, k=1)] = -np.inf
    return mask


def encoder_mask(l: int) -> np.ndarray:
    return np.zeros((l, l), dtype=DTYPE)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = scores + mask
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_stats(x: np.ndarray, eps: float = LN_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row mean and sqrt(population variance + eps)."""
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean(np.square(x - mu), axis=-1, keepdims=True)
    return mu, np.sqrt(var + DTYPE(eps))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    mu, sigma = layer_stats(x, eps)
    return gamma * ((x - mu) / sigma) + beta


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max|a - b| / max|b| (floored), the comparison used for every tolerance."""
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeError(f"relative_error: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale
