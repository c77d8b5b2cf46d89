"""Analysis/synthesis transforms, the progressive objective, and model files.

Network layout (``u`` = unshuffle factor, ``f = 2u``)::

    g_a: x -> unshuffle(u) -> pw(3u^2 -> c1) -> [dw block, ffn] x m_enc
           -> unshuffle(2) -> pw(4 c1 -> c2) -> y
    g_s: y_hat -> pw(c2 -> 4 c1) -> shuffle(2) -> [dw block*, ffn*] x m_dec
           -> pw(c1 -> 3u^2) -> shuffle(u) -> clamp[0, 1]

Blocks marked ``*`` apply the stage-specific (scale, bias) modulation to
their branch output right before the residual addition.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, ConfigMismatchError, ShapeError, TruncatedError,
                     UnsupportedVersionError)
from .rvq import Codebook, RVQStack
from .tensor import DTYPE, Parameter, Tensor

MODEL_MAGIC = b"PGICMDL"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    c1: int = 64
    c2: int = 32
    m_enc: int = 2
    m_dec: int = 3
    n_stages: int = 5
    l_bits: int = 8
    ffn_expansion: int = 4
    unshuffle_factor: int = 8
    total_downsample: int = 16
    p_weight: float = 0.5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    batch: int = 8
    crop: int = 64
    lambda_cb: float = 1.0
    commit_beta: float = 0.25
    ema_decay: float = 0.99

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_downsample != self.unshuffle_factor * 2:
            raise ShapeError(f"total_downsample ({self.total_downsample}) must equal "
                             f"2 x unshuffle_factor ({self.unshuffle_factor})")
        if self.n_stages < 1 or self.l_bits < 1:
            raise ShapeError("n_stages and l_bits must both be at least 1")
        if self.l_bits > 16:
            raise ShapeError(f"l_bits {self.l_bits} exceeds the 16-bit container limit")
        if self.c2 % 2:
            raise ShapeError(f"c2 must be even, got {self.c2}")
        if min(self.c1, self.c2, self.ffn_expansion, self.unshuffle_factor) < 1:
            raise ShapeError("channel widths and factors must be positive")
        if self.m_enc < 0 or self.m_dec < 0:
            raise ShapeError("block counts must be non-negative")
        if not 0.0 <= self.p_weight <= 1.0:
            raise ShapeError(f"p_weight must lie in [0, 1], got {self.p_weight}")
        if self.crop % self.total_downsample:
            raise ShapeError(f"crop {self.crop} is not a multiple of {self.total_downsample}")

    @property
    def codebook_size(self) -> int:
        return 1 << self.l_bits

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-size base configuration (decoder depth split is a guess)."""
        return cls(c1=368, c2=256, m_enc=8, m_dec=7, n_stages=5, l_bits=10, batch=16, crop=256)


# field order and codes for the model file; never reorder
_CONFIG_LAYOUT = [(f.name, "I" if f.type in ("int", int) else "d") for f in fields(ModelConfig)]


def lambda_weights(p: float, n: int) -> list[float]:
    """Per-stage loss weights: ``p/(n-1)`` for the first n-1 stages, ``1-p`` for the last."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if n == 1:
        return [1.0]
    return [p / (n - 1)] * (n - 1) + [1.0 - p]


# ---------------------------------------------------------------------------
# blocks


def depthwise_block(t: Tensor, p: dict, prefix: str, mod: int | None = None) -> Tensor:
    """Residual depthwise block: pw -> ReLU -> dw3x3 -> ReLU -> pw, plus input."""
    h = T.conv_pointwise(t, p[prefix + "pw1.w"].value, p[prefix + "pw1.b"].value)
    h = T.relu(h)
    h = T.conv_depthwise(h, p[prefix + "dw.k"].value, p[prefix + "dw.b"].value)
    h = T.relu(h)
    h = T.conv_pointwise(h, p[prefix + "pw2.w"].value, p[prefix + "pw2.b"].value)
    if mod is not None:
        h = T.channel_affine(h, p[prefix + "mod.scale"].value, p[prefix + "mod.bias"].value, mod)
    return T.add(t, h)


def ffn_block(t: Tensor, p: dict, prefix: str, mod: int | None = None) -> Tensor:
    """Gated FFN: pw to 2rC, split in halves, multiply, pw back to C, plus input."""
    h = T.conv_pointwise(t, p[prefix + "pw1.w"].value, p[prefix + "pw1.b"].value)
    a, b = T.chunk2(h)
    h = T.conv_pointwise(T.mul_elementwise(a, b), p[prefix + "pw2.w"].value, p[prefix + "pw2.b"].value)
    if mod is not None:
        h = T.channel_affine(h, p[prefix + "mod.scale"].value, p[prefix + "mod.bias"].value, mod)
    return T.add(t, h)


def _pointwise_shapes(prefix, cin, cout):
    return [(prefix + "w", (cout, cin)), (prefix + "b", (cout,))]


def dw_block_shapes(prefix: str, c: int, n_mod: int = 0) -> list:
    shapes = (_pointwise_shapes(prefix + "pw1.", c, c)
              + [(prefix + "dw.k", (c, 3, 3)), (prefix + "dw.b", (c,))]
              + _pointwise_shapes(prefix + "pw2.", c, c))
    if n_mod:
        shapes += [(prefix + "mod.scale", (n_mod, c)), (prefix + "mod.bias", (n_mod, c))]
    return shapes


def ffn_block_shapes(prefix: str, c: int, r: int, n_mod: int = 0) -> list:
    shapes = _pointwise_shapes(prefix + "pw1.", c, 2 * r * c) + _pointwise_shapes(prefix + "pw2.", r * c, c)
    if n_mod:
        shapes += [(prefix + "mod.scale", (n_mod, c)), (prefix + "mod.bias", (n_mod, c))]
    return shapes


def parameter_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; this order is the model-file order."""
    u2 = 3 * cfg.unshuffle_factor ** 2
    c1, c2, r, n = cfg.c1, cfg.c2, cfg.ffn_expansion, cfg.n_stages
    out = _pointwise_shapes("ga.in.", u2, c1)
    for i in range(cfg.m_enc):
        out += dw_block_shapes(f"ga.{i}.dw.", c1) + ffn_block_shapes(f"ga.{i}.ffn.", c1, r)
    out += _pointwise_shapes("ga.down.", 4 * c1, c2)
    out += _pointwise_shapes("gs.up.", c2, 4 * c1)
    for i in range(cfg.m_dec):
        out += dw_block_shapes(f"gs.{i}.dw.", c1, n) + ffn_block_shapes(f"gs.{i}.ffn.", c1, r, n)
    out += _pointwise_shapes("gs.out.", c1, u2)
    return out


# ---------------------------------------------------------------------------
# the model


class Model:
    """Parameters of g_a and g_s plus the configuration that shaped them."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self._check()

    def _check(self) -> None:
        layout = parameter_layout(self.config)
        if [n for n, _ in layout] != list(self.params):
            raise ConfigMismatchError("parameter names do not follow the canonical layout")
        for name, shape in layout:
            if self.params[name].value.shape != shape:
                raise ConfigMismatchError(f"{name} has shape {self.params[name].value.shape}, "
                                          f"config implies {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        """Seeded initialization.

        Residual branch outputs start small so the initial network is close
        to its skip path; modulation starts neutral (scale 1, bias 0); the
        output bias sits at mid-grey.
        """
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_layout(config):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "scale":
                arr = np.ones(shape)
            elif leaf in ("b", "bias"):
                arr = np.full(shape, 0.5) if name == "gs.out.b" else np.zeros(shape)
            elif leaf == "k":
                arr = rng.normal(0.0, 1.0 / 3.0, size=shape)
            else:
                fan_in = shape[1]
                std = 1.0 / np.sqrt(fan_in)
                if ".pw2." in name:
                    std *= 0.2
                elif name == "gs.out.w":
                    std *= 0.5
                arr = rng.normal(0.0, std, size=shape)
            params[name] = Parameter(np.asarray(arr, dtype=DTYPE), name)
        return cls(config, params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None

    def analysis(self, x: Tensor) -> Tensor:
        return g_a(x, self)

    def synthesis(self, y_hat: Tensor, stage: int) -> Tensor:
        return g_s(y_hat, stage, self)


def g_a(x, model: Model) -> Tensor:
    """Image ``3 x H x W`` (or batch) to latent ``c2 x H/f x W/f``."""
    cfg, p = model.config, model.params
    x = T.as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ShapeError(f"g_a expects a 3-channel image, got shape {x.shape}")
    h, w = x.shape[-2:]
    f = cfg.total_downsample
    if h % f or w % f:
        raise ShapeError(f"image {h}x{w} is not a multiple of {f}; pad it first with pad_image")
    t = T.pixel_unshuffle(x, cfg.unshuffle_factor)
    t = T.conv_pointwise(t, p["ga.in.w"].value, p["ga.in.b"].value)
    for i in range(cfg.m_enc):
        t = depthwise_block(t, p, f"ga.{i}.dw.")
        t = ffn_block(t, p, f"ga.{i}.ffn.")
    t = T.pixel_unshuffle(t, 2)
    return T.conv_pointwise(t, p["ga.down.w"].value, p["ga.down.b"].value)


def g_s(y_hat, stage: int, model: Model, modulate: bool = True) -> Tensor:
    """Latent to image, using the modulation parameters of ``stage`` (1-based)."""
    cfg, p = model.config, model.params
    if not 1 <= stage <= cfg.n_stages:
        raise ShapeError(f"stage must be in 1..{cfg.n_stages}, got {stage}")
    y_hat = T.as_tensor(y_hat)
    if y_hat.ndim not in (3, 4) or y_hat.shape[-3] != cfg.c2:
        raise ShapeError(f"g_s expects a {cfg.c2}-channel latent, got shape {y_hat.shape}")
    mod = stage - 1 if modulate else None
    t = T.conv_pointwise(y_hat, p["gs.up.w"].value, p["gs.up.b"].value)
    t = T.pixel_shuffle(t, 2)
    for i in range(cfg.m_dec):
        t = depthwise_block(t, p, f"gs.{i}.dw.", mod)
        t = ffn_block(t, p, f"gs.{i}.ffn.", mod)
    t = T.conv_pointwise(t, p["gs.out.w"].value, p["gs.out.b"].value)
    return T.clamp(T.pixel_shuffle(t, cfg.unshuffle_factor), 0.0, 1.0)


# ---------------------------------------------------------------------------
# objective


def l1_loss(x, x_hat: Tensor) -> Tensor:
    """Mean absolute error."""
    x = T.as_tensor(x)
    return T.mean(T.absolute(T.sub(x_hat, T.Tensor(x.data, dtype=x_hat.dtype))))


def progressive_loss(x, reconstructions: list[Tensor], codebook_losses: list[Tensor],
                     lambdas: list[float], lambda_cb: float = 1.0) -> Tensor:
    """``sum_i lambda_i * (L1(x, x_hat_i) + lambda_cb * L_cb_i)`` as one scalar."""
    if not (len(reconstructions) == len(lambdas) == len(codebook_losses)):
        raise ShapeError(f"{len(reconstructions)} reconstructions, {len(codebook_losses)} codebook "
                         f"losses and {len(lambdas)} weights")
    if not reconstructions:
        raise ShapeError("progressive_loss needs at least one stage")
    total = None
    for x_hat, cb, lam in zip(reconstructions, codebook_losses, lambdas):
        term = T.add(l1_loss(x, x_hat), T.scale(cb, lambda_cb))
        term = T.scale(term, lam)
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# padding


def pad_image(x: np.ndarray, f: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Replicate-pad right/bottom so H and W become multiples of ``f``."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    ph, pw = -h % f, -w % f
    if ph == 0 and pw == 0:
        return x, (h, w)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="edge"), (h, w)


def crop_to_original(x_hat, original_dims: tuple[int, int]):
    h, w = original_dims
    if isinstance(x_hat, Tensor):
        return Tensor(x_hat.data[..., :h, :w], dtype=x_hat.dtype)
    return np.asarray(x_hat)[..., :h, :w]


# ---------------------------------------------------------------------------
# persistence


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"model file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, expect_name: str, expect_shape: tuple[int, ...]) -> np.ndarray:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8", errors="replace")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        if name != expect_name or tuple(shape) != tuple(expect_shape):
            raise ConfigMismatchError(f"blob {name!r} {tuple(shape)} where the config implies "
                                      f"{expect_name!r} {tuple(expect_shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(DTYPE).reshape(shape)


def model_to_bytes(model: Model, stack: RVQStack) -> bytes:
    cfg = model.config
    if stack.n_stages != cfg.n_stages or stack.size != cfg.codebook_size or stack.dim != cfg.c2:
        raise ConfigMismatchError(f"stack ({stack.n_stages} x {stack.size} x {stack.dim}) does not "
                                  f"match config ({cfg.n_stages} x {cfg.codebook_size} x {cfg.c2})")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + bytes([MODEL_VERSION]))
    for name, code in _CONFIG_LAYOUT:
        buf.write(struct.pack("<" + code, getattr(cfg, name)))
    for name, _ in parameter_layout(cfg):
        _write_array(buf, name, model.params[name].value.data)
    for i, cb in enumerate(stack.codebooks, start=1):
        _write_array(buf, f"cb.{i}.vectors", cb.vectors)
        _write_array(buf, f"cb.{i}.ema_counts", cb.ema_counts)
        _write_array(buf, f"cb.{i}.ema_sums", cb.ema_sums)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> tuple[Model, RVQStack]:
    r = _Reader(bytes(data))
    if r.take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise BadMagicError("not a PGIC model file (bad magic)")
    (version,) = r.unpack("<B")
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"unsupported model file version {version}")
    values = {name: r.unpack("<" + code)[0] for name, code in _CONFIG_LAYOUT}
    try:
        cfg = ModelConfig(**values)
    except ShapeError as exc:
        raise ConfigMismatchError(f"stored configuration is invalid: {exc}") from exc
    params = {name: Parameter(r.array(name, shape), name) for name, shape in parameter_layout(cfg)}
    k, d = cfg.codebook_size, cfg.c2
    books = []
    for i in range(1, cfg.n_stages + 1):
        vectors = r.array(f"cb.{i}.vectors", (k, d))
        counts = r.array(f"cb.{i}.ema_counts", (k,))
        sums = r.array(f"cb.{i}.ema_sums", (k, d))
        books.append(Codebook(vectors, counts, sums))
    if r.pos != len(r.data):
        raise ConfigMismatchError(f"{len(r.data) - r.pos} unexpected trailing bytes in model file")
    return Model(cfg, params), RVQStack(books)


def save_model(model: Model, stack: RVQStack, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, stack))


def load_model(path) -> tuple[Model, RVQStack]:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
