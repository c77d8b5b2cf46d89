"""Command-line interface: ``pgic {train,encode,decode,preview,inspect,packet-sim}``.

Exit codes: 0 success, 2 usage error, 3 format error, 4 numerical failure.
Reports print a human-readable table followed by one JSON record per row.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bitstream import HEADER_SIZE, BitstreamHeader, bpp, deserialize, packetize, reassemble, stage_spans
from .errors import FormatError, NumericalError, PgicError, TruncatedError
from .imageio import list_images, read_ppm, to_float, to_uint8, write_ppm
from .model import ModelConfig, load_model, pad_image, save_model
from .pipeline import decode_all_stages, decode_stream, encode_image, mse, psnr
from .rvq import _to_vectors, index_entropy, index_histogram, quantize_vectors
from .synthetic import synthetic_textures
from .train import Dataset, encode_latents, evaluate, fit

log = logging.getLogger("pgic")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_ENV = "PGIC_MODEL"
HELD_OUT_SEED_OFFSET = 1_000_003


class UsageError(Exception):
    pass


def emit(rows: list[dict], out=None) -> None:
    """Print ``rows`` as an aligned table, then as JSON lines."""
    out = out or sys.stdout
    if not rows:
        return
    cols = list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.rjust(w) for c, w in zip(cols, widths)), file=out)
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)), file=out)
    for r in rows:
        print(json.dumps(r), file=out)


def _model_path(args) -> str:
    path = args.model or os.environ.get(MODEL_ENV)
    if not path:
        raise UsageError(f"no model given: pass --model or set {MODEL_ENV}")
    return path


def _load(args):
    path = _model_path(args)
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _read_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise UsageError(f"image not found: {path}")
    return to_float(read_ppm(path))


def _read_stream(path) -> bytes:
    if not os.path.exists(path):
        raise UsageError(f"stream not found: {path}")
    return Path(path).read_bytes()


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = ModelConfig(c1=args.c1, c2=args.c2, m_enc=args.m_enc, m_dec=args.m_dec, n_stages=args.stages,
                      l_bits=args.l_bits, unshuffle_factor=args.unshuffle,
                      total_downsample=2 * args.unshuffle, p_weight=args.p_weight, lr=args.lr,
                      batch=args.batch, crop=args.crop)
    if args.synthetic == bool(args.data_dir):
        raise UsageError("give exactly one of DATA_DIR or --synthetic")
    if args.synthetic:
        images = synthetic_textures(args.train_images, cfg.crop, seed=args.seed)
        dataset = Dataset(images, cfg.batch)
    else:
        if not os.path.isdir(args.data_dir):
            raise UsageError(f"not a directory: {args.data_dir}")
        dataset = Dataset.from_directory(args.data_dir, cfg.crop, cfg.batch, args.train_images, seed=args.seed)

    def report(epoch, done, m):
        losses = " ".join(f"s{s.stage}:l1={s.l1:.5f},mse={s.mse:.5f}" for s in m.stages)
        print(f"epoch {epoch} iters {done} loss {m.loss:.5f} {losses} reseeded {m.reseeded}", flush=True)

    model, stack = fit(cfg, dataset, args.iters, seed=args.seed, callback=report)
    save_model(model, stack, args.out)
    print(f"wrote {args.out}")
    if args.eval_images:
        held = synthetic_textures(args.eval_images, cfg.crop, seed=args.seed + HELD_OUT_SEED_OFFSET)
        result = evaluate(model, stack, held)
        emit([{"stage": i + 1, "mse": m, "psnr_db": psnr(m)} for i, m in enumerate(result.mse)])
    return EXIT_OK


def cmd_encode(args) -> int:
    model, stack = _load(args)
    n = model.config.n_stages
    stages = n if args.stages is None else args.stages
    if not 1 <= stages <= n:
        raise UsageError(f"--stages must be in 1..{n}")
    image = _read_image(args.image)
    t0 = time.perf_counter()
    data = encode_image(model, stack, image, stages)
    ms = (time.perf_counter() - t0) * 1000
    Path(args.out).write_bytes(data)
    header = BitstreamHeader.unpack(data)
    emit([{"stages": stages, "bytes": len(data), "bpp": bpp(header), "encode_ms": round(ms, 3)}])
    return EXIT_OK


def cmd_decode(args) -> int:
    model, stack = _load(args)
    if args.stages is not None and args.stages < 1:
        raise UsageError("--stages must be at least 1")
    t0 = time.perf_counter()
    image, header = decode_stream(model, stack, _read_stream(args.stream), args.stages)
    ms = (time.perf_counter() - t0) * 1000
    write_ppm(args.out, to_uint8(image))
    emit([{"stages": header.stages_present, "bpp": bpp(header), "decode_ms": round(ms, 3)}])
    return EXIT_OK


def cmd_preview(args) -> int:
    model, stack = _load(args)
    data = _read_stream(args.stream)
    original = _read_image(args.original) if args.original else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    decoded = decode_all_stages(model, stack, data)
    ms = (time.perf_counter() - t0) * 1000
    rows = []
    for image, header in decoded:
        k = header.stages_present
        write_ppm(out_dir / f"stage_{k}.ppm", to_uint8(image))
        row = {"stage": k, "bpp": bpp(header), "mse": None, "psnr_db": None}
        if original is not None:
            row["mse"] = round(mse(original, image), 6)
            row["psnr_db"] = round(psnr(row["mse"]), 4)
        rows.append(row)
    emit(rows)
    print(json.dumps({"decode_ms": round(ms, 3)}))
    return EXIT_OK


def _entropy_rows(model, stack, images) -> list[dict]:
    cfg = model.config
    k = cfg.codebook_size
    hist = np.zeros((cfg.n_stages, k), dtype=np.int64)
    for img in images:
        padded, _ = pad_image(img, cfg.total_downsample)
        vecs, _ = _to_vectors(encode_latents(model, padded[None]))
        idx, _, _ = quantize_vectors(vecs, stack)
        for i in range(cfg.n_stages):
            hist[i] += index_histogram(idx[i], k)
    rows = []
    for i in range(cfg.n_stages):
        h = index_entropy(hist[i])
        rows.append({"stage": i + 1, "indices": int(hist[i].sum()), "used": int((hist[i] > 0).sum()),
                     "entropy_bits": h, "max_bits": cfg.l_bits, "ideal_saving": 1 - h / cfg.l_bits})
    return rows


def cmd_inspect(args) -> int:
    if args.stream:
        data = _read_stream(args.stream)
        header = BitstreamHeader.unpack(data)
        announced = header.stages_present
        emit([{"field": f, "value": v} for f, v in [
            ("version", header.version), ("width", header.orig_width), ("height", header.orig_height),
            ("n_total", header.n_total), ("l_bits", header.l_bits), ("downsample_f", header.downsample_f),
            ("stages_present", announced), ("grid", f"{header.grid_shape[0]}x{header.grid_shape[1]}"),
            ("stage_bytes", header.stage_bytes), ("total_bytes", len(data))]])
        rows = []
        for s in stage_spans(data):
            rows.append({"stage": s.stage, "start": s.start, "end": s.end, "complete": s.complete,
                         "bpp": bpp(header.with_stages(s.stage))})
        emit(rows)
        return EXIT_OK
    model, stack = _load(args)
    cfg = model.config
    print(json.dumps({"config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}}))
    if args.entropy:
        paths = list_images(args.entropy)
        if not paths:
            raise UsageError(f"no .ppm images in {args.entropy}")
        images = [to_float(read_ppm(p)) for p in paths]
    elif args.entropy_synthetic:
        images = list(synthetic_textures(args.entropy_synthetic, cfg.crop, seed=args.seed))
    else:
        return EXIT_OK
    emit(_entropy_rows(model, stack, images))
    return EXIT_OK


def cmd_packet_sim(args) -> int:
    model, stack = _load(args)
    image = _read_image(args.image)
    data = encode_image(model, stack, image)
    packets = packetize(data, args.payload)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows, have = [], 0
    for k in range(1, len(packets) + 1):
        prefix = reassemble(packets[:k])
        try:
            header, _ = deserialize(prefix)
            stages = header.stages_present
        except TruncatedError:
            header, stages = BitstreamHeader.unpack(prefix), 0
        new = stages > have
        if new and out_dir:
            img, _ = decode_stream(model, stack, prefix)
            write_ppm(out_dir / f"packet_{k:03d}_stage_{stages}.ppm", to_uint8(img))
        rows.append({"packet": k, f"t_{args.interval_label}": k * args.interval,
                     "cumulative_bytes": len(prefix) - HEADER_SIZE, "stages": stages,
                     "new_stage": new, "bpp": bpp(header.with_stages(stages)) if stages else 0.0})
        have = stages
    emit(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgic", description="Progressive RVQ image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = ModelConfig()
    t = sub.add_parser("train", help="train a model")
    t.add_argument("data_dir", nargs="?")
    t.add_argument("--synthetic", action="store_true", help="train on built-in seeded textures")
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--train-images", type=int, default=800, help="training pool size (crops)")
    t.add_argument("--eval-images", type=int, default=0, help="held-out synthetic images to evaluate")
    t.add_argument("--c1", type=int, default=d.c1)
    t.add_argument("--c2", type=int, default=d.c2)
    t.add_argument("--m-enc", type=int, default=d.m_enc)
    t.add_argument("--m-dec", type=int, default=d.m_dec)
    t.add_argument("--stages", type=int, default=d.n_stages)
    t.add_argument("--l-bits", type=int, default=d.l_bits)
    t.add_argument("--unshuffle", type=int, default=d.unshuffle_factor)
    t.add_argument("--p-weight", type=float, default=d.p_weight)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--batch", type=int, default=d.batch)
    t.add_argument("--crop", type=int, default=d.crop)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a PPM image")
    e.add_argument("image")
    e.add_argument("--model")
    e.add_argument("--stages", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    dd = sub.add_parser("decode", help="decode a stream to PPM")
    dd.add_argument("stream")
    dd.add_argument("--model")
    dd.add_argument("--stages", type=int)
    dd.add_argument("--out", required=True)
    dd.set_defaults(func=cmd_decode)

    pv = sub.add_parser("preview", help="write one image per available stage")
    pv.add_argument("stream")
    pv.add_argument("--model")
    pv.add_argument("--out-dir", required=True)
    pv.add_argument("--original")
    pv.set_defaults(func=cmd_preview)

    i = sub.add_parser("inspect", help="describe a stream, or a model's index statistics")
    i.add_argument("stream", nargs="?")
    i.add_argument("--model")
    i.add_argument("--entropy", metavar="DATA_DIR")
    i.add_argument("--entropy-synthetic", type=int, metavar="N")
    i.add_argument("--seed", type=int, default=HELD_OUT_SEED_OFFSET)
    i.set_defaults(func=cmd_inspect)

    ps = sub.add_parser("packet-sim", help="simulate fixed-payload progressive transmission")
    ps.add_argument("image")
    ps.add_argument("--model")
    ps.add_argument("--payload", type=int, default=320)
    ps.add_argument("--interval", type=float, default=60.0)
    ps.add_argument("--interval-label", default="seconds")
    ps.add_argument("--out-dir")
    ps.set_defaults(func=cmd_packet_sim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pgic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"pgic: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"pgic: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PgicError, ValueError) as exc:
        print(f"pgic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"pgic: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
