"""Command-line entry point: ``qgan {train,inpaint,eval,gradcheck,maskgen,synth}``.

Runs are configured by an optional flat JSON file (``--config``) whose keys
are listed in ``CONFIG_KEYS``; command-line flags override file values. The
resolved configuration is logged and written to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, gradcheck, inpaint, metrics
from .gan import TrainConfig, TrainingError, train
from .nn import ConfigurationError

log = logging.getLogger("qgan")

TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
INPAINT_KEYS = {
    "lam": "lam",
    "inpaint_iters": "iterations",
    "inpaint_lr": "lr",
    "inpaint_beta1": "beta1",
    "inpaint_beta2": "beta2",
    "window_radius": "window_radius",
    "poisson": "poisson",
}
DATA_KEYS = ("synth_kind", "synth_count", "data_seed")
CONFIG_KEYS = TRAIN_KEYS + tuple(INPAINT_KEYS) + DATA_KEYS

METRIC_HEADER = ["image", "psnr", "ssim", "mask_frac", "iters"]


class UsageError(Exception):
    pass


def read_config(path):
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a flat JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; allowed: {sorted(CONFIG_KEYS)}")
    for key, value in raw.items():
        want = _KEY_TYPES.get(key, (int, float))
        if isinstance(value, bool) and want is not bool or not isinstance(value, want):
            raise UsageError(f"config key {key!r} has value {value!r}, expected {_type_name(want)}")
    return raw


_KEY_TYPES = {
    "g_channels": list, "d_channels": list, "poisson": bool, "synth_kind": str,
    "image_size": int, "latent_dim": int, "kernel": int, "batch_size": int, "iterations": int,
    "seed": int, "checkpoint_every": int, "inpaint_iters": int, "window_radius": int,
    "synth_count": int, "data_seed": int,
}


def _type_name(t):
    return "a number" if isinstance(t, tuple) else f"a {t.__name__}"


def resolve(args, flag_map):
    """File values, then every flag the user actually passed."""
    cfg = read_config(getattr(args, "config", None))
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    return cfg


def echo_config(out: Path, cfg: dict):
    text = json.dumps(cfg, sort_keys=True, indent=2)
    log.info("resolved config:\n%s", text)
    (out / "config.json").write_text(text + "\n")


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for r in rows:
            w.writerow([r["image"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}", f"{r['mask_frac']:.6f}", r["iters"]])


def _mask_for(args, h, w):
    if args.mask is not None:
        m = dataio.load_mask(args.mask)
        if m.shape != (h, w):
            raise ConfigurationError(f"mask is {m.shape}, images are {(h, w)}")
        return m
    if args.mask_kind == "center":
        return inpaint.make_center_mask(h, w)
    return inpaint.make_diag_mask(h, w)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg = resolve(args, {
        "seed": "seed", "iters": "iterations", "size": "image_size", "latent_dim": "latent_dim",
        "batch_size": "batch_size", "lr_g": "lr_g", "lr_d": "lr_d", "synth": "synth_kind",
        "count": "synth_count", "data_seed": "data_seed",
    })
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    out = Path(args.out)
    if args.data is not None:
        images, _ = dataio.load_image_dir(args.data)
        resolved = {"data": str(args.data)}
    else:
        spec = dataio.SyntheticSpec(
            kind=cfg.get("synth_kind", "colored-shapes"),
            side=tc.image_size,
            count=int(cfg.get("synth_count", 64)),
            seed=int(cfg.get("data_seed", 100)),
        )
        images = dataio.synth_dataset(spec)
        resolved = {"synth_kind": spec.kind, "synth_count": spec.count, "data_seed": spec.seed}
    out.mkdir(parents=True, exist_ok=True)
    resolved.update(tc.to_dict())
    echo_config(out, resolved)
    model, rows = train(images, tc, loss_csv=out / "loss.csv", checkpoint_path=out / "checkpoint.bin")
    if rows:
        log.info("done: %d iterations, final loss_d %.4f loss_g %.4f", model.iteration, rows[-1][1], rows[-1][2])
    print(out / "checkpoint.bin")
    return 0


def cmd_inpaint(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found; train one with `qgan train` first")
    cfg = resolve(args, {"seed": "seed", "iters": "inpaint_iters", "lam": "lam", "lr": "inpaint_lr",
                         "radius": "window_radius", "poisson": "poisson"})
    model = dataio.load_checkpoint(ckpt)
    unknown_train = [k for k in cfg if k in TRAIN_KEYS and k != "seed"]
    if unknown_train:
        log.warning("ignoring training keys %s: topology comes from the checkpoint", unknown_train)
    icfg = inpaint.InpaintConfig(seed=int(cfg.get("seed", 0)),
                                 **{field: cfg[key] for key, field in INPAINT_KEYS.items() if key in cfg})
    images, names = dataio.load_image_dir(args.images)
    truth = None
    if args.truth is not None:
        truth, tnames = dataio.load_image_dir(args.truth)
        if tnames != names or truth.shape != images.shape:
            raise ConfigurationError("truth directory must hold the same file names and sizes as --images")
    mask = _mask_for(args, images.shape[2], images.shape[3])
    y = images * mask[None, None]
    res = inpaint.inpaint(y, mask, model, icfg, truth=truth, names=names, hole_only=args.hole_only)

    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    echo_config(out, {"checkpoint": str(ckpt), "images": str(args.images), "mask": args.mask or args.mask_kind,
                      **{k: v for k, v in dataclasses.asdict(icfg).items()}})
    for name, im in zip(names, res.images):
        dataio.save_image(im, out / "images" / name)
    rows = res.rows or [
        {"image": nm, "psnr": float("nan"), "ssim": float("nan"), "mask_frac": inpaint.missing_fraction(mask),
         "iters": icfg.iterations}
        for nm in names
    ]
    write_metrics(out / "metrics.csv", rows)
    if res.rows:
        log.info("mean psnr %.3f  mean ssim %.4f", np.mean([r["psnr"] for r in rows]), np.mean([r["ssim"] for r in rows]))
    return 0


def cmd_eval(args):
    pred, pnames = dataio.load_image_dir(args.pred)
    truth, tnames = dataio.load_image_dir(args.truth)
    if pnames != tnames or pred.shape != truth.shape:
        raise ConfigurationError("--pred and --truth must hold the same file names and sizes")
    region = None
    frac = 0.0
    if args.mask is not None:
        m = dataio.load_mask(args.mask)
        frac = inpaint.missing_fraction(m)
        region = m == 0 if args.hole_only else None
    rows = []
    for name, a, b in zip(pnames, pred, truth):
        rep = metrics.report(a, b, region)
        rows.append({"image": name, "psnr": rep.psnr_capped, "ssim": rep.ssim, "mask_frac": frac, "iters": 0})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, {"pred": str(args.pred), "truth": str(args.truth), "mask": args.mask, "hole_only": args.hole_only})
    write_metrics(out / "metrics.csv", rows)
    return 0


def cmd_gradcheck(args):
    reports = gradcheck.default_suite(seed=args.seed if args.seed is not None else 0)
    lines = [str(r) for r in reports]
    for line in lines:
        print(line)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    ok = all(r.passed for r in reports)
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_maskgen(args):
    if args.kind == "center":
        m = inpaint.make_center_mask(args.size, args.size)
    else:
        m = inpaint.make_diag_mask(args.size, args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"mask_{args.kind}_{args.size}.png"
    dataio.save_mask(m, path)
    print(f"{path} missing fraction {inpaint.missing_fraction(m):.4f}")
    return 0


def cmd_synth(args):
    spec = dataio.SyntheticSpec(kind=args.kind, side=args.size, count=args.count,
                                seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    dataio.save_image_dir(dataio.synth_dataset(spec), out)
    echo_config(out, dataclasses.asdict(spec))
    print(f"wrote {spec.count} images to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="qgan", description="Quaternion GAN training and latent-space inpainting.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="random seed")

    t = sub.add_parser("train", help="train a QGAN and write checkpoint.bin and loss.csv")
    common(t)
    t.add_argument("--config", help="flat JSON config file")
    t.add_argument("--data", help="directory of RGB PNGs (default: synthetic data)")
    t.add_argument("--synth", choices=["gradient-pairs", "colored-shapes"], default=None,
                   help="synthetic dataset kind when --data is absent")
    t.add_argument("--count", type=int, default=None, help="synthetic image count")
    t.add_argument("--data-seed", type=int, default=None, help="seed of the synthetic dataset")
    t.add_argument("--size", type=int, default=None, help="image side (4 * 2^k)")
    t.add_argument("--iters", type=int, default=None, help="training iterations")
    t.add_argument("--latent-dim", type=int, default=None, help="latent quaternion count")
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr-g", type=float, default=None)
    t.add_argument("--lr-d", type=float, default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inpaint", help="fill masked images by latent search")
    common(i)
    i.add_argument("--config", help="flat JSON config file")
    i.add_argument("--checkpoint", required=True, help="trained checkpoint")
    i.add_argument("--images", required=True, help="directory of images to corrupt and fill")
    i.add_argument("--truth", help="directory of ground-truth images for metrics")
    g = i.add_mutually_exclusive_group()
    g.add_argument("--mask", help="mask PNG (0 missing, 255 observed)")
    g.add_argument("--mask-kind", choices=["center", "diag"], default="center")
    i.add_argument("--iters", type=int, default=None, help="latent search iterations")
    i.add_argument("--lam", type=float, default=None, help="prior-loss weight")
    i.add_argument("--lr", type=float, default=None, help="latent Adam step size")
    i.add_argument("--radius", type=int, default=None, help="weight-matrix window radius")
    i.add_argument("--no-poisson", dest="poisson", action="store_false", default=None,
                   help="plain blending instead of Poisson fusion")
    i.add_argument("--hole-only", action="store_true", help="metrics over the hole only")
    i.set_defaults(func=cmd_inpaint)

    e = sub.add_parser("eval", help="PSNR/SSIM of image pairs")
    common(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--mask", help="mask PNG; records its fraction")
    e.add_argument("--hole-only", action="store_true", help="metrics over the hole only (needs --mask)")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every layer")
    common(gc, out_required=False)
    gc.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("maskgen", help="write a center or diagonal mask PNG")
    common(m)
    m.add_argument("--kind", choices=["center", "diag"], required=True)
    m.add_argument("--size", type=int, required=True)
    m.set_defaults(func=cmd_maskgen)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s)
    s.add_argument("--kind", choices=["gradient-pairs", "colored-shapes"], default="colored-shapes")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"qgan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, TrainingError) as exc:
        print(f"qgan {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
