"""Command-line entry point.

Exit codes: 0 success, 1 some per-file failures, 2 usage or configuration error.
Every command writes one ``manifest.json`` describing the run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend

log = logging.getLogger("onestep_face")

MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _versions():
    import torch

    return {
        "onestep_face": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "kernels": backend(),
    }


def _write_manifest(path: Path, command, config, seed, inputs, outputs, started, status, extra=None):
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "command": command,
        "config_hash": _hash(config),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "versions": _versions(),
        "wall_time": round(time.time() - started, 4),
        "status": status,
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------------


def cmd_faces(args):
    from .images import procedural_face, quantize8, save_image, save_landmarks

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        img, lm = procedural_face(args.seed * 100003 + i, args.size)
        name = f"face_{i:04d}"
        save_image(out / f"{name}.png", quantize8(img))
        save_landmarks(out / f"{name}.landmarks.txt", lm)
        written.append(f"{name}.png")
    return 0, out / "manifest.json", {"count": args.count, "size": args.size}, args.seed, [], written, {}


def cmd_degrade(args):
    from .degradation import DegradationRecipe, degrade, sample_seed
    from .images import landmark_path, list_images, load_image, save_image

    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    paths = list_images(src)
    if not paths:
        raise UsageError(f"no input images in {src}")
    try:
        recipe = DegradationRecipe.load(args.recipe) if args.recipe else DegradationRecipe()
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"bad recipe: {e}") from None
    base = recipe.seed if args.seed is None else args.seed
    out.mkdir(parents=True, exist_ok=True)
    failures, written = [], []
    for i, p in enumerate(paths):
        try:
            img = load_image(p)
            lq, params = degrade(img, recipe.with_seed(sample_seed(base, i)))
        except Exception as e:  # noqa: BLE001 - report and continue per file
            log.error("failed on %s: %s", p.name, e)
            failures.append({"file": p.name, "error": str(e)})
            continue
        save_image(out / p.name, lq)
        (out / f"{p.stem}.params.json").write_text(json.dumps({"file": p.name, **params}, sort_keys=True) + "\n")
        lm = landmark_path(p)
        if lm.exists():
            shutil.copyfile(lm, landmark_path(out / p.name))
        written.append(p.name)
    config = {"recipe": recipe.to_dict(), "seed": base}
    return (1 if failures else 0), out / "manifest.json", config, base, [str(src)], written, {"failures": failures}


def _load_train_config(path, stage):
    from .trainer import ConfigError, load_config

    try:
        cfg = load_config(path)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except ConfigError as e:
        raise UsageError(str(e)) from None
    if cfg.stage != stage:
        raise UsageError(f"config field 'stage': expected {stage!r}, got {cfg.stage!r}")
    return cfg


def cmd_train_vre(args):
    from dataclasses import asdict

    from .trainer import VreTrainer

    cfg = _load_train_config(args.config, "vre")
    if args.resume:
        if not Path(args.resume).is_file():
            raise UsageError(f"resume checkpoint {args.resume} not found")
        trainer = VreTrainer.load(args.resume)
    else:
        trainer = VreTrainer(cfg)
    final = trainer.run()
    out = Path(trainer.cfg.out_dir)
    return 0, out / "manifest.json", asdict(cfg), cfg.seed, [args.config], [str(final)], {
        "iterations": trainer.step}


def cmd_train_osd(args):
    from dataclasses import asdict

    from .trainer import OsdTrainer

    cfg = _load_train_config(args.config, "osd")
    if args.resume:
        if not Path(args.resume).is_file():
            raise UsageError(f"resume checkpoint {args.resume} not found")
        trainer = OsdTrainer.load(args.resume)
    else:
        if not cfg.vre_checkpoint or not Path(cfg.vre_checkpoint).is_file():
            raise UsageError(f"config field 'vre_checkpoint': file {cfg.vre_checkpoint!r} not found")
        trainer = OsdTrainer(cfg)
    final = trainer.run()
    out = Path(trainer.cfg.out_dir)
    return 0, out / "manifest.json", asdict(cfg), cfg.seed, [args.config], [str(final)], {
        "iterations": trainer.step, "g_updates": trainer.g_updates, "d_updates": trainer.d_updates}


def cmd_restore(args):
    from .checkpoint import CheckpointError
    from .images import landmark_path, list_images, load_image, save_image
    from .trainer import load_restorer

    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    paths = list_images(src)
    if not paths:
        raise UsageError(f"no input images in {src}")
    try:
        restorer = load_restorer(args.ckpt)
    except (OSError, CheckpointError) as e:
        raise UsageError(f"cannot load checkpoint: {e}") from None
    out.mkdir(parents=True, exist_ok=True)
    failures, written, calls = [], [], []
    t0 = time.perf_counter()
    try:
        for p in paths:
            before = restorer.model.calls
            try:
                img = load_image(p)
                restored = restorer.restore(img, overlap=args.overlap_embed)
            except Exception as e:  # noqa: BLE001
                log.error("failed on %s: %s", p.name, e)
                failures.append({"file": p.name, "error": str(e)})
                continue
            calls.append(restorer.model.calls - before)
            save_image(out / p.name, restored)
            lm = landmark_path(p)
            if lm.exists():
                shutil.copyfile(lm, landmark_path(out / p.name))
            written.append(p.name)
    finally:
        restorer.close()
    elapsed = time.perf_counter() - t0
    extra = {
        "failures": failures,
        "overlap_embed": bool(args.overlap_embed),
        "denoiser_calls": int(sum(calls)),
        "denoiser_calls_per_image": sorted(set(calls)),
        "images_per_second": round(len(written) / elapsed, 3) if elapsed > 0 else None,
    }
    config = {"ckpt": str(args.ckpt), "overlap_embed": bool(args.overlap_embed)}
    return (1 if failures else 0), out / "manifest.json", config, None, [str(src), str(args.ckpt)], written, extra


def cmd_evaluate(args):
    from .metrics import METRICS, evaluate_suite

    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in names if m not in METRICS]
    if bad or not names:
        raise UsageError(f"unknown metric(s) {bad}; valid names: {', '.join(METRICS)}")
    for d in (args.restored, args.reference):
        if not Path(d).is_dir():
            raise UsageError(f"directory {d} does not exist")
    try:
        report = evaluate_suite(args.restored, args.reference, names)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    status = 1 if report["pairing_failures"] and any(r["n"] == 0 for r in report["metrics"]) else 0
    return status, out.with_name(out.name + ".manifest.json"), {"metrics": names}, None, \
        [args.restored, args.reference], [str(out)], {"pairing_failures": len(report["pairing_failures"])}


def _embedder_from_any(path):
    from . import checkpoint as ckpt
    from .trainer import _osd_parts, load_prompt_embedder

    arrays, manifest = ckpt.load_archive(path)
    if manifest.get("kind") == "osd":
        return _osd_parts(arrays, manifest)[1]
    return load_prompt_embedder(path)[0]


def cmd_inspect(args):
    from .checkpoint import CheckpointError
    from .images import list_images, load_image, save_image
    from .vre import inspect

    try:
        emb = _embedder_from_any(args.ckpt)
    except (OSError, CheckpointError) as e:
        raise UsageError(f"cannot load checkpoint: {e}") from None
    try:
        image = load_image(args.image)
    except OSError as e:
        raise UsageError(f"cannot read image: {e}") from None
    batch = [load_image(p) for p in list_images(args.batch_dir)] if args.batch_dir else None
    bundle = inspect(emb.encoder, image, emb.dictionary, batch=batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in ("att", "enc"):
        for k, m in bundle[kind].items():
            lo, hi = m.min(), m.max()
            norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
            name = f"{kind}_{k}.png"
            save_image(out / name, norm)
            written.append(name)
    np.save(out / "attention.npy", bundle["attention"])
    usage = np.asarray(bundle["usage"], dtype=np.float64)
    bars = np.arange(USAGE_HEIGHT)[::-1, None] < np.round(USAGE_HEIGHT * usage / max(usage.max(), 1))[None, :]
    save_image(out / "usage.png", 1.0 - bars.astype(np.float64))
    written.append("usage.png")
    summary = {
        "att_positions": sorted(bundle["att"]),
        "enc_channels": sorted(bundle["enc"]),
        "usage": bundle["usage"].tolist(),
        "images_in_batch": 1 if batch is None else len(batch),
        "max_row_sum_error": float(np.abs(bundle["attention"].sum(axis=1) - 1).max()),
    }
    (out / "inspection.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    written += ["attention.npy", "inspection.json"]
    return 0, out / "manifest.json", {"ckpt": args.ckpt, "image": args.image}, None, [args.ckpt, args.image], written, {}


GRID_HEADER = 12
USAGE_HEIGHT = 64


def cmd_grid(args):
    from PIL import Image, ImageDraw

    from .images import list_images, load_image, to_uint8

    cols = []
    for item in args.cols.split(","):
        label, sep, d = item.partition("=")
        if not sep or not label or not d:
            raise UsageError(f"bad column entry {item!r}; expected LABEL=DIR")
        if not Path(d).is_dir():
            raise UsageError(f"directory {d} does not exist")
        cols.append((label, Path(d)))
    names = None
    for _, d in cols:
        here = {p.name for p in list_images(d)}
        names = here if names is None else names & here
    names = sorted(names)[: args.rows]
    if not names:
        raise UsageError("no file names common to all columns")
    tiles = [[load_image(d / n) for _, d in cols] for n in names]
    h, w = tiles[0][0].shape[:2]
    canvas = np.ones((GRID_HEADER + h * len(names), w * len(cols), 3))
    for r, row in enumerate(tiles):
        for c, img in enumerate(row):
            if img.shape[:2] != (h, w):
                raise UsageError(f"{names[r]} in column {cols[c][0]} has a different size")
            canvas[GRID_HEADER + r * h: GRID_HEADER + (r + 1) * h, c * w:(c + 1) * w] = img
    im = Image.fromarray(to_uint8(canvas))
    draw = ImageDraw.Draw(im)
    for c, (label, _) in enumerate(cols):
        draw.text((c * w + 2, 0), label, fill=(0, 0, 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    im.save(out, format="PNG")
    return 0, out.with_name(out.name + ".manifest.json"), {"cols": args.cols, "rows": args.rows}, None, \
        [str(d) for _, d in cols], [str(out)], {"grid_rows": len(names), "grid_cols": len(cols)}


# parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onestep-face", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("faces", help="write procedural HQ faces with landmark sidecars")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_faces)

    s = sub.add_parser("degrade", help="synthesise LQ images")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--recipe")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_degrade)

    for name, fn in (("train-vre", cmd_train_vre), ("train-osd", cmd_train_osd)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--resume")
        s.set_defaults(func=fn)

    s = sub.add_parser("restore")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlap-embed", action="store_true")
    s.set_defaults(func=cmd_restore)

    s = sub.add_parser("evaluate")
    s.add_argument("--restored", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--metrics", default="dists,deg,lmd,fid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch-dir")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("grid")
    s.add_argument("--cols", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, default=8)
    s.set_defaults(func=cmd_grid)
    return p


def _manifest_path_for(args) -> Path | None:
    if args.command in ("evaluate", "grid"):
        out = Path(args.out)
        return out.with_name(out.name + ".manifest.json")
    if args.command in ("train-vre", "train-osd"):
        try:
            return Path(json.loads(Path(args.config).read_text())["out_dir"]) / "manifest.json"
        except Exception:  # noqa: BLE001
            return None
    return Path(args.out) / "manifest.json"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        code, manifest, config, seed, inputs, outputs, extra = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        path = _manifest_path_for(args)
        if path is not None:
            try:
                _write_manifest(path, args.command, vars(args) | {"func": None}, getattr(args, "seed", None),
                                [], [], started, "error", {"error": str(e)})
            except OSError:
                pass
        return 2
    _write_manifest(manifest, args.command, config, seed, inputs, outputs, started,
                    "ok" if code == 0 else "partial", extra)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
