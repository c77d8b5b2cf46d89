"""Progressive training loop and evaluation helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericalError, ShapeError
from .imageio import list_images, read_ppm, to_float
from .model import Model, ModelConfig, g_a, g_s, lambda_weights, pad_image, progressive_loss
from .rvq import (RVQStack, _to_latent, _to_vectors, commitment_loss, ema_update, index_histogram,
                  kmeans_init_stack, quantize_vectors, reseed_dead)

log = logging.getLogger(__name__)

DEAD_FRACTION = 1e-3


@dataclass
class StageMetrics:
    stage: int
    l1: float
    mse: float
    usage: np.ndarray


@dataclass
class EpochMetrics:
    iterations: int = 0
    loss: float = 0.0
    stages: list[StageMetrics] = field(default_factory=list)
    reseeded: int = 0
    history: list[list[float]] = field(default_factory=list)


class Dataset:
    """A fixed pool of ``3 x crop x crop`` images served in shuffled batches."""

    def __init__(self, images: np.ndarray, batch: int):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != 3 or len(images) == 0:
            raise ShapeError(f"dataset must be a non-empty N x 3 x H x W array, got {images.shape}")
        self.images = images
        self.batch = batch

    def __len__(self) -> int:
        return -(-len(self.images) // self.batch)

    def batches(self, rng: np.random.Generator):
        order = rng.permutation(len(self.images))
        for s in range(0, len(order), self.batch):
            yield self.images[order[s:s + self.batch]]

    @classmethod
    def from_directory(cls, directory, crop: int, batch: int, count: int, seed: int = 0) -> "Dataset":
        """``count`` random crops drawn from the PPM images in ``directory``."""
        paths = list_images(directory)
        if not paths:
            raise FileNotFoundError(f"no .ppm images in {directory}")
        rng = np.random.default_rng(seed)
        pics = [pad_image(to_float(read_ppm(p)), crop)[0] for p in paths]
        crops = []
        for _ in range(count):
            img = pics[int(rng.integers(len(pics)))]
            h, w = img.shape[1:]
            top = int(rng.integers(h - crop + 1))
            left = int(rng.integers(w - crop + 1))
            c = img[:, top:top + crop, left:left + crop]
            if rng.random() < 0.5:
                c = c[:, :, ::-1]
            crops.append(c)
        return cls(np.stack(crops), batch)


def encode_latents(model: Model, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Run g_a without recording; returns ``B x c2 x h x w``."""
    outs = []
    with T.no_grad():
        for s in range(0, len(images), chunk):
            outs.append(g_a(T.Tensor(images[s:s + chunk]), model).data)
    return np.concatenate(outs)


def init_codebooks(model: Model, images: np.ndarray, seed: int = 0, max_samples: int = 8192) -> RVQStack:
    """k-means codebooks fitted stage by stage to the current encoder's latents."""
    cfg = model.config
    vecs, _ = _to_vectors(encode_latents(model, images))
    if len(vecs) > max_samples:
        vecs = vecs[np.random.default_rng(seed).choice(len(vecs), max_samples, replace=False)]
    return kmeans_init_stack(vecs, cfg.n_stages, cfg.codebook_size, seed=seed)


def train_step(model: Model, stack: RVQStack, batch: np.ndarray, cfg: ModelConfig):
    """One forward through every stage, one backward, one Adam step, EMA updates.

    Returns ``(loss, per_stage_l1, per_stage_mse, indices, latent_vectors)``.
    """
    x = T.Tensor(batch)
    y = g_a(x, model)
    vecs, shape = _to_vectors(y.data)
    idx, partials, _ = quantize_vectors(vecs, stack)
    lambdas = lambda_weights(cfg.p_weight, cfg.n_stages)
    recons, cb_losses = [], []
    for i in range(cfg.n_stages):
        q = _to_latent(partials[i], shape)
        cb_losses.append(commitment_loss(y, q, cfg.commit_beta))
        recons.append(g_s(T.straight_through(y, q), i + 1, model))
    loss = progressive_loss(x, recons, cb_losses, lambdas, cfg.lambda_cb)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite training loss {value}; per-stage L1 "
                             f"{[float(np.abs(r.data - batch).mean()) for r in recons]}")
    T.backward(loss)
    T.adam_step(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    model.zero_grad()

    residual = vecs
    for i, cb in enumerate(stack.codebooks):
        ema_update(cb, idx[i], residual, cfg.ema_decay)
        residual = vecs - partials[i]
    l1 = [float(np.abs(r.data - batch).mean()) for r in recons]
    mse = [float(((r.data - batch) ** 2).mean()) for r in recons]
    return value, l1, mse, idx, vecs


def train_epoch(model: Model, stack: RVQStack, dataset: Dataset, config: ModelConfig,
                rng: np.random.Generator | None = None, max_iters: int | None = None) -> EpochMetrics:
    """One pass over ``dataset`` (or ``max_iters`` batches, whichever is fewer).

    Dead codewords are reseeded once, at the end, from the residuals seen in
    the last batch.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = config.n_stages
    k = config.codebook_size
    sum_l1, sum_mse = np.zeros(n), np.zeros(n)
    usage = np.zeros((n, k), dtype=np.int64)
    metrics = EpochMetrics()
    last_vecs = last_idx = None
    for batch in dataset.batches(rng):
        if max_iters is not None and metrics.iterations >= max_iters:
            break
        loss, l1, mse, idx, vecs = train_step(model, stack, batch, config)
        metrics.iterations += 1
        metrics.loss += loss
        metrics.history.append(mse)
        sum_l1 += l1
        sum_mse += mse
        for i in range(n):
            usage[i] += index_histogram(idx[i], k)
        last_vecs, last_idx = vecs, idx
    if metrics.iterations:
        metrics.loss /= metrics.iterations
        sum_l1 /= metrics.iterations
        sum_mse /= metrics.iterations
        residual = last_vecs
        for i, cb in enumerate(stack.codebooks):
            threshold = DEAD_FRACTION * float(cb.ema_counts.mean())
            metrics.reseeded += reseed_dead(cb, residual, threshold, rng)
            residual = residual - cb.vectors[last_idx[i]]
    metrics.stages = [StageMetrics(i + 1, float(sum_l1[i]), float(sum_mse[i]), usage[i]) for i in range(n)]
    return metrics


def train(model: Model, stack: RVQStack, dataset: Dataset, config: ModelConfig, iters: int,
          seed: int = 0, callback=None) -> list[EpochMetrics]:
    """Run epochs until ``iters`` optimizer steps have been taken."""
    rng = np.random.default_rng(seed)
    done, epochs = 0, []
    while done < iters:
        m = train_epoch(model, stack, dataset, config, rng, max_iters=iters - done)
        done += m.iterations
        epochs.append(m)
        log.info("epoch %d: iters %d loss %.5f mse %s reseeded %d", len(epochs), done, m.loss,
                 " ".join(f"{s.mse:.5f}" for s in m.stages), m.reseeded)
        if callback is not None:
            callback(len(epochs), done, m)
    return epochs


@dataclass
class EvalResult:
    mse: list[float]
    histograms: np.ndarray


def evaluate(model: Model, stack: RVQStack, images: np.ndarray, chunk: int = 32) -> EvalResult:
    """Mean per-stage MSE and per-stage index histograms over ``images``."""
    n, k = model.config.n_stages, model.config.codebook_size
    sq = np.zeros(n)
    hist = np.zeros((n, k), dtype=np.int64)
    count = 0
    with T.no_grad():
        for s in range(0, len(images), chunk):
            x = images[s:s + chunk]
            y = g_a(T.Tensor(x), model)
            vecs, shape = _to_vectors(y.data)
            idx, partials, _ = quantize_vectors(vecs, stack)
            for i in range(n):
                hist[i] += index_histogram(idx[i], k)
                x_hat = g_s(T.Tensor(_to_latent(partials[i], shape)), i + 1, model).data
                sq[i] += float(((x_hat - x) ** 2).mean(axis=(1, 2, 3)).sum())
            count += len(x)
    return EvalResult(list(sq / count), hist)


def fit(config: ModelConfig, dataset: Dataset, iters: int, seed: int = 0, callback=None,
        init_images: int = 512) -> tuple[Model, RVQStack]:
    """Seeded end-to-end run: init weights, k-means codebooks, then ``iters`` steps."""
    config.validate()
    model = Model.init(config, seed=seed)
    stack = init_codebooks(model, dataset.images[:init_images], seed=seed)
    if iters > 0:
        train(model, stack, dataset, config, iters, seed=seed, callback=callback)
    return model, stack
