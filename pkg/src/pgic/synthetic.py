"""Seeded synthetic textures, so training and tests need no external data.

Each image mixes a few octaves of smooth value noise (Perlin-style fade
interpolation of a random lattice), a linear colour gradient, and
occasionally soft stripes, all pushed through a random colour mix.
"""

from __future__ import annotations

import numpy as np


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(size: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    lattice = rng.random((cells + 1, cells + 1))
    coords = np.linspace(0, cells, size, endpoint=False)
    i0 = np.floor(coords).astype(int)
    t = _fade(coords - i0)
    rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``3 x size x size`` float32 image in [0, 1]."""
    layers = []
    for _ in range(3):
        acc = np.zeros((size, size))
        amp, total = 1.0, 0.0
        cells = int(rng.integers(2, 5))
        for _ in range(int(rng.integers(2, 5))):
            acc += amp * value_noise(size, min(cells, size), rng)
            total += amp
            amp *= float(rng.uniform(0.35, 0.6))
            cells *= 2
        layers.append(acc / total)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    grad = np.cos(angle) * xx + np.sin(angle) * yy
    layers.append(grad - grad.min())
    if rng.random() < 0.4:
        freq = rng.uniform(2, 8)
        layers.append(0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle + 1) * xx + np.sin(angle + 1) * yy)))
    basis = np.stack(layers)
    mix = rng.normal(0.0, 1.0, size=(3, basis.shape[0]))
    img = np.tensordot(mix, basis - basis.mean(axis=(1, 2), keepdims=True), axes=1)
    img = img / (np.abs(img).max() + 1e-6) * rng.uniform(0.25, 0.5) + rng.uniform(0.3, 0.7, size=(3, 1, 1))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_textures(n: int, size: int, seed: int = 0) -> np.ndarray:
    """``n x 3 x size x size`` float32 batch of textures."""
    rng = np.random.default_rng(seed)
    return np.stack([texture(size, rng) for _ in range(n)]) if n else np.zeros((0, 3, size, size), np.float32)
