"""Residual vector quantization.

Stage 1 quantizes the latent itself; stage ``i + 1`` quantizes what stages
``1..i`` left over. The decoded latent after ``i`` stages is the plain sum of
the selected codewords, so any prefix of the per-stage index grids is a valid
(coarser) description of the latent.

Nearest-codeword search accumulates squared differences in float32 one
dimension at a time, in dimension order, and breaks ties toward the lowest
index. That fixed order is what makes emitted indices reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Tensor, mean, square, stop_gradient, sub, scale

EMA_EPS = 1e-5
_CHUNK = 4096


@dataclass
class Codebook:
    vectors: np.ndarray
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=DTYPE)
        if self.vectors.ndim != 2:
            raise ShapeError(f"codebook vectors must be K x D, got {self.vectors.shape}")
        k = self.vectors.shape[0]
        if k < 1 or k & (k - 1):
            raise ShapeError(f"codebook size {k} is not a power of two")
        if self.ema_counts is None:
            self.ema_counts = np.ones(k, dtype=DTYPE)
        if self.ema_sums is None:
            self.ema_sums = self.vectors * self.ema_counts[:, None]
        self.ema_counts = np.ascontiguousarray(self.ema_counts, dtype=DTYPE)
        self.ema_sums = np.ascontiguousarray(self.ema_sums, dtype=DTYPE)
        if self.ema_counts.shape != (k,) or self.ema_sums.shape != self.vectors.shape:
            raise ShapeError("codebook EMA state does not match its vectors")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def bits(self) -> int:
        return self.size.bit_length() - 1

    @classmethod
    def random(cls, k: int, d: int, rng: np.random.Generator, std: float = 1.0) -> "Codebook":
        return cls(rng.normal(0.0, std, size=(k, d)).astype(DTYPE))

    def copy(self) -> "Codebook":
        return Codebook(self.vectors.copy(), self.ema_counts.copy(), self.ema_sums.copy())


@dataclass
class RVQStack:
    codebooks: list[Codebook] = field(default_factory=list)

    def __post_init__(self):
        if not self.codebooks:
            raise ShapeError("an RVQ stack needs at least one codebook")
        k, d = self.codebooks[0].vectors.shape
        for i, cb in enumerate(self.codebooks):
            if cb.vectors.shape != (k, d):
                raise ShapeError(f"codebook {i + 1} is {cb.vectors.shape}, expected {(k, d)}")

    def __len__(self) -> int:
        return len(self.codebooks)

    def __getitem__(self, i: int) -> Codebook:
        return self.codebooks[i]

    @property
    def n_stages(self) -> int:
        return len(self.codebooks)

    @property
    def size(self) -> int:
        return self.codebooks[0].size

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    @classmethod
    def random(cls, n: int, k: int, d: int, seed: int = 0, std: float = 1.0) -> "RVQStack":
        rng = np.random.default_rng(seed)
        return cls([Codebook.random(k, d, rng, std) for _ in range(n)])

    def copy(self) -> "RVQStack":
        return RVQStack([cb.copy() for cb in self.codebooks])


@dataclass
class StageIndices:
    stage: int
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.stage < 1:
            raise ShapeError(f"stage numbers start at 1, got {self.stage}")

    def __eq__(self, other):
        return (isinstance(other, StageIndices) and self.stage == other.stage
                and self.grid.shape == other.grid.shape and np.array_equal(self.grid, other.grid))


# ---------------------------------------------------------------------------
# nearest neighbour


def squared_distances(vectors: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """``M x K`` float32 squared distances, summed in dimension order."""
    v = np.asarray(vectors, dtype=DTYPE)
    c = np.asarray(codewords, dtype=DTYPE)
    acc = np.zeros((v.shape[0], c.shape[0]), dtype=DTYPE)
    for d in range(v.shape[1]):
        diff = v[:, d, None] - c[None, :, d]
        acc += diff * diff
    return acc


def assign(vectors: np.ndarray, cb: Codebook) -> np.ndarray:
    """Index of the nearest codeword for every row (lowest index on ties)."""
    v = np.asarray(vectors, dtype=DTYPE)
    if v.ndim != 2 or v.shape[1] != cb.dim:
        raise ShapeError(f"cannot quantize vectors of shape {v.shape} with a D={cb.dim} codebook")
    out = np.empty(v.shape[0], dtype=np.int64)
    for s in range(0, v.shape[0], _CHUNK):
        out[s:s + _CHUNK] = np.argmin(squared_distances(v[s:s + _CHUNK], cb.vectors), axis=1)
    return out


def nearest_codeword(v, cb: Codebook) -> tuple[int, np.ndarray]:
    v = np.asarray(v, dtype=DTYPE).reshape(1, -1)
    j = int(assign(v, cb)[0])
    return j, cb.vectors[j].copy()


# ---------------------------------------------------------------------------
# the recursion


def quantize_vectors(vectors: np.ndarray, stack: RVQStack, stages: int | None = None):
    """Run the residual recursion on an ``M x D`` matrix.

    Returns ``(indices, partials, energies)`` where ``indices`` is
    ``stages x M``, ``partials[i]`` is the reconstruction from stages
    ``1..i+1`` (the running sum of looked-up codewords) and ``energies[i]``
    is the mean squared norm of the residual left after stage ``i + 1``.
    """
    y = np.asarray(vectors, dtype=DTYPE)
    n = stack.n_stages if stages is None else stages
    if not 1 <= n <= stack.n_stages:
        raise ShapeError(f"stages must be in 1..{stack.n_stages}, got {n}")
    if y.ndim != 2 or y.shape[1] != stack.dim:
        raise ShapeError(f"latent vectors have shape {y.shape}, codebooks expect D={stack.dim}")
    indices = np.empty((n, y.shape[0]), dtype=np.int64)
    partials, energies = [], []
    recon = np.zeros_like(y)
    residual = y
    for i in range(n):
        cb = stack.codebooks[i]
        idx = assign(residual, cb)
        indices[i] = idx
        recon = recon + cb.vectors[idx]
        residual = y - recon
        partials.append(recon)
        energies.append(float(np.mean(np.sum(residual.astype(np.float64) ** 2, axis=1))))
    return indices, partials, energies


def _to_vectors(y) -> tuple[np.ndarray, tuple[int, ...]]:
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=DTYPE)
    if arr.ndim == 3:
        d, h, w = arr.shape
        return arr.reshape(d, h * w).T, (d, h, w)
    if arr.ndim == 4:
        b, d, h, w = arr.shape
        return arr.transpose(0, 2, 3, 1).reshape(-1, d), (b, d, h, w)
    raise ShapeError(f"latent must be D x h x w or B x D x h x w, got {arr.shape}")


def _to_latent(vectors: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 3:
        d, h, w = shape
        return np.ascontiguousarray(vectors.T.reshape(d, h, w))
    b, d, h, w = shape
    return np.ascontiguousarray(vectors.reshape(b, h, w, d).transpose(0, 3, 1, 2))


def rvq_encode(y, stack: RVQStack, stages: int | None = None):
    """Quantize a latent through the first ``stages`` codebooks.

    ``y`` is ``D x h x w`` (or batch-prefixed). Returns the per-stage index
    grids, the quantized latent as a :class:`Tensor`, and the mean residual
    energy after each stage.
    """
    vecs, shape = _to_vectors(y)
    idx, partials, energies = quantize_vectors(vecs, stack, stages)
    grid_shape = shape[1:] if len(shape) == 3 else (shape[0],) + shape[2:]
    grids = [StageIndices(i + 1, idx[i].reshape(grid_shape)) for i in range(idx.shape[0])]
    return grids, Tensor(_to_latent(partials[-1], shape)), energies


def rvq_decode(indices: list[StageIndices], stack: RVQStack) -> Tensor:
    """Sum of looked-up codewords over a contiguous stage prefix ``1..i``."""
    if not indices:
        raise ShapeError("nothing to decode: no stages given")
    stages = [s.stage for s in indices]
    if stages != list(range(1, len(indices) + 1)):
        raise ShapeError(f"stages {stages} are not a contiguous prefix starting at 1")
    if len(indices) > stack.n_stages:
        raise ShapeError(f"{len(indices)} stages given but the stack has {stack.n_stages}")
    grid_shape = indices[0].grid.shape
    recon = None
    for s in indices:
        if s.grid.shape != grid_shape:
            raise ShapeError(f"stage {s.stage} grid {s.grid.shape} differs from {grid_shape}")
        flat = s.grid.reshape(-1)
        if flat.size and (flat.min() < 0 or flat.max() >= stack.size):
            raise ShapeError(f"stage {s.stage} holds an index outside [0, {stack.size})")
        looked = stack.codebooks[s.stage - 1].vectors[flat]
        recon = looked.copy() if recon is None else recon + looked
    d = stack.dim
    if len(grid_shape) == 2:
        shape = (d,) + grid_shape
    else:
        shape = (grid_shape[0], d) + grid_shape[1:]
    return Tensor(_to_latent(recon, shape))


# ---------------------------------------------------------------------------
# codebook learning


def kmeans_init(samples: np.ndarray, k: int, seed: int = 0, iters: int = 10) -> Codebook:
    """k-means++ seeding followed by ``iters`` Lloyd iterations."""
    x = np.asarray(samples, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"samples must be M x D, got {x.shape}")
    m = x.shape[0]
    if m < k:
        raise ShapeError(f"k-means needs at least K={k} samples, got {m}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]), dtype=DTYPE)
    centers[0] = x[rng.integers(m)]
    d2 = squared_distances(x, centers[:1])[:, 0].astype(np.float64)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            pick = min(pick, m - 1)
        else:
            pick = int(rng.integers(m))
        centers[j] = x[pick]
        d2 = np.minimum(d2, squared_distances(x, centers[j:j + 1])[:, 0])
    cb = Codebook(centers)
    counts = np.zeros(k, dtype=DTYPE)
    sums = np.zeros_like(centers)
    for it in range(iters + 1):
        labels = assign(x, cb)
        counts = np.bincount(labels, minlength=k).astype(DTYPE)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        if it == iters:
            break
        live = counts > 0
        cb.vectors[live] = sums[live] / counts[live, None]
    cb.ema_counts = counts
    cb.ema_sums = sums
    return cb


def kmeans_init_stack(samples: np.ndarray, n: int, k: int, seed: int = 0, iters: int = 10) -> RVQStack:
    """Initialize codebooks stage by stage on the actual residuals."""
    residual = np.asarray(samples, dtype=DTYPE)
    books = []
    for i in range(n):
        cb = kmeans_init(residual, k, seed=seed + i, iters=iters)
        books.append(cb)
        residual = residual - cb.vectors[assign(residual, cb)]
    return RVQStack(books)


def ema_update(cb: Codebook, indices: np.ndarray, vectors: np.ndarray, decay: float = 0.99) -> None:
    """Exponential-moving-average codebook update from one batch of assignments."""
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    v = np.asarray(vectors, dtype=DTYPE).reshape(-1, cb.dim)
    if v.shape[0] != idx.size:
        raise ShapeError(f"{idx.size} indices but {v.shape[0]} vectors")
    counts = np.bincount(idx, minlength=cb.size).astype(DTYPE)
    sums = np.zeros_like(cb.vectors)
    np.add.at(sums, idx, v)
    dk = DTYPE(decay)
    cb.ema_counts = dk * cb.ema_counts + (1 - dk) * counts
    cb.ema_sums = dk * cb.ema_sums + (1 - dk) * sums
    cb.vectors = cb.ema_sums / np.maximum(cb.ema_counts, DTYPE(EMA_EPS))[:, None]


def reseed_dead(cb: Codebook, samples: np.ndarray, usage_threshold: float,
                rng: np.random.Generator | None = None) -> int:
    """Replace codewords whose EMA count fell below ``usage_threshold``.

    Each dead codeword becomes a randomly drawn sample row; its EMA count is
    reset to the current mean count so the new vector survives later updates.
    """
    x = np.asarray(samples, dtype=DTYPE).reshape(-1, cb.dim)
    if x.shape[0] == 0:
        raise ShapeError("reseed_dead needs at least one sample")
    dead = np.flatnonzero(cb.ema_counts < usage_threshold)
    if dead.size == 0:
        return 0
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = rng.choice(x.shape[0], size=dead.size, replace=dead.size > x.shape[0])
    level = DTYPE(max(float(cb.ema_counts.mean()), 1.0 / cb.size))
    cb.vectors[dead] = x[rows]
    cb.ema_counts[dead] = level
    cb.ema_sums[dead] = x[rows] * level
    return int(dead.size)


# ---------------------------------------------------------------------------
# losses and statistics


def commitment_loss(y: Tensor, y_hat, beta: float = 0.25) -> Tensor:
    """``beta * mean(|y - stopgrad(y_hat)|^2)``; gradient reaches ``y`` only."""
    q = y_hat if isinstance(y_hat, Tensor) else Tensor(np.asarray(y_hat, dtype=y.dtype), dtype=y.dtype)
    if q.shape != y.shape:
        raise ShapeError(f"commitment_loss: shape mismatch {y.shape} vs {q.shape}")
    return scale(mean(square(sub(y, stop_gradient(q)))), beta)


def index_histogram(indices: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(np.asarray(indices, dtype=np.int64).reshape(-1), minlength=k)


def index_entropy(histogram) -> float:
    """Shannon entropy, in bits, of an index histogram."""
    h = np.asarray(histogram, dtype=np.float64).reshape(-1)
    total = h.sum()
    if h.size == 0 or total <= 0:
        raise ValueError("index_entropy needs a non-empty histogram")
    p = h[h > 0] / total
    return float(-(p * np.log2(p)).sum()) + 0.0


def bits_for(k: int) -> int:
    return int(math.log2(k))
