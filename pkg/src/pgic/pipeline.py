"""Image <-> stream pipeline built on the model, the quantizer and the container."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bitstream import BitstreamHeader, bpp, deserialize, serialize
from .errors import ShapeError
from .model import Model, crop_to_original, g_a, g_s, pad_image
from .rvq import RVQStack, StageIndices, rvq_decode, rvq_encode


def encode_image(model: Model, stack: RVQStack, image: np.ndarray, stages: int | None = None) -> bytes:
    """``3 x H x W`` floats in [0, 1] to a PGIC stream carrying ``stages`` stages."""
    cfg = model.config
    stages = cfg.n_stages if stages is None else stages
    if not 1 <= stages <= cfg.n_stages:
        raise ShapeError(f"stages must be in 1..{cfg.n_stages}, got {stages}")
    padded, (h, w) = pad_image(np.asarray(image, dtype=np.float32), cfg.total_downsample)
    with T.no_grad():
        y = g_a(T.Tensor(padded), model)
    grids, _, _ = rvq_encode(y, stack, stages)
    header = BitstreamHeader(w, h, cfg.n_stages, cfg.l_bits, cfg.total_downsample, stages)
    return serialize(header, grids)


def check_compatible(model: Model, header: BitstreamHeader) -> None:
    cfg = model.config
    if (header.n_total, header.l_bits, header.downsample_f) != (cfg.n_stages, cfg.l_bits, cfg.total_downsample):
        raise ShapeError(f"stream (N={header.n_total}, L={header.l_bits}, f={header.downsample_f}) was not "
                         f"made by this model (N={cfg.n_stages}, L={cfg.l_bits}, f={cfg.total_downsample})")


def reconstruct(model: Model, stack: RVQStack, header: BitstreamHeader,
                indices: list[StageIndices], stages: int) -> np.ndarray:
    """Decode the first ``stages`` index grids into a cropped ``3 x H x W`` image."""
    with T.no_grad():
        y_hat = rvq_decode(indices[:stages], stack)
        x_hat = g_s(y_hat, stages, model).data
    return crop_to_original(x_hat, (header.orig_height, header.orig_width))


def decode_stream(model: Model, stack: RVQStack, data: bytes, stages: int | None = None):
    """Returns ``(image, header_used)`` decoding ``min(stages, available)`` stages."""
    header, indices = deserialize(data)
    check_compatible(model, header)
    use = header.stages_present if stages is None else min(stages, header.stages_present)
    if use < 1:
        raise ShapeError(f"stages must be at least 1, got {stages}")
    return reconstruct(model, stack, header, indices, use), header.with_stages(use)


def decode_all_stages(model: Model, stack: RVQStack, data: bytes):
    """One reconstruction per available stage, sharing a single parse."""
    header, indices = deserialize(data)
    check_compatible(model, header)
    return [(reconstruct(model, stack, header, indices, k), header.with_stages(k))
            for k in range(1, header.stages_present + 1)]


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def psnr(mse_value: float) -> float:
    return math.inf if mse_value == 0 else 10 * math.log10(1.0 / mse_value)


@dataclass
class StageRow:
    stage: int
    bpp: float
    mse: float | None = None
    psnr_db: float | None = None


def stage_report(model, stack, data: bytes, original: np.ndarray | None = None) -> list[StageRow]:
    rows = []
    for img, header in decode_all_stages(model, stack, data):
        row = StageRow(header.stages_present, bpp(header))
        if original is not None:
            row.mse = mse(original, img)
            row.psnr_db = psnr(row.mse)
        rows.append(row)
    return rows
