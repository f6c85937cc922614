"""PNG images and masks, synthetic datasets and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"QGANCKPT"
    u32       format version (currently 1)
    u32       header length L
    L bytes   UTF-8 JSON header: config echo, iteration, optimizer step
              counts, RNG state, and a block table [{name, shape, offset}]
    ...       payload: every block as raw <f8, in block-table order
    32 bytes  SHA-256 of everything above

The JSON header is written with sorted keys and fixed separators, so
saving the same model twice yields identical bytes.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"QGANCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images


def to_unit_range(rgb8: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [-1, 1]."""
    return (2.0 * rgb8.astype(np.float64) / 255.0 - 1.0).transpose(2, 0, 1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8, rounding half up."""
    v = np.floor((np.asarray(img, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise ValueError(f"{path}: cannot read image ({exc})") from exc
    return to_unit_range(arr)


def save_image(img, path) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"{path.parent} does not exist")
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    path = Path(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            raise ValueError(f"{path}: mask must be a single-channel PNG, got mode {im.mode}")
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.float64)


def save_mask(mask, path) -> None:
    m = np.asarray(mask)
    Image.fromarray(np.where(m > 0.5, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_image_dir(directory) -> tuple[np.ndarray, list[str]]:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"{directory}: no PNG images found")
    imgs = [load_image(f) for f in files]
    shape = imgs[0].shape
    for f, im in zip(files, imgs):
        if im.shape != shape:
            raise ValueError(f"{f}: size {im.shape[1:]} differs from {shape[1:]}")
    return np.stack(imgs), [f.name for f in files]


def save_image_dir(images, directory, prefix="img") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        p = directory / f"{prefix}_{i:05d}.png"
        save_image(im, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "colored-shapes"
    side: int = 32
    count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gradient-pairs", "colored-shapes"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.side < 4 or self.count < 1:
            raise ValueError("synthetic datasets need side >= 4 and count >= 1")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v)) * 2.0 - 1.0


def synth_dataset(spec: SyntheticSpec) -> np.ndarray:
    """Deterministic (count, 3, side, side) images in [-1, 1].

    ``gradient-pairs``: a linear blend between two colors of nearby hue
    along a random direction. ``colored-shapes``: a soft-edged disk of one
    hue on a background of a related hue. In both, the channels move
    together, which is what the quaternion layers are meant to exploit.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.side
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / (n - 1) - 0.5
    out = np.empty((spec.count, 3, n, n))
    for i in range(spec.count):
        hue = rng.uniform()
        if spec.kind == "gradient-pairs":
            c1 = _hsv(hue, rng.uniform(0.4, 0.9), rng.uniform(0.25, 0.55))
            c2 = _hsv(hue + rng.uniform(-0.08, 0.08), rng.uniform(0.4, 0.9), rng.uniform(0.7, 1.0))
            phi = rng.uniform(0, 2 * np.pi)
            t = xx * np.cos(phi) + yy * np.sin(phi)
            t = (t - t.min()) / (t.max() - t.min())
            out[i] = c1[:, None, None] * (1 - t) + c2[:, None, None] * t
        else:
            bg = _hsv(hue, rng.uniform(0.3, 0.8), rng.uniform(0.2, 0.5))
            fg = _hsv(hue + rng.uniform(-0.1, 0.1), rng.uniform(0.5, 1.0), rng.uniform(0.7, 1.0))
            cx, cy = rng.uniform(-0.2, 0.2, size=2)
            r = rng.uniform(0.15, 0.3)
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            a = 1.0 / (1.0 + np.exp((d - r) * 4.0 * n / 8.0))
            out[i] = bg[:, None, None] * (1 - a) + fg[:, None, None] * a
    return out


def channel_correlation(images) -> float:
    """Mean absolute pairwise inter-channel correlation, averaged over images."""
    vals = []
    for im in images:
        flat = im.reshape(3, -1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.corrcoef(flat)
        pairs = [c[0, 1], c[0, 2], c[1, 2]]
        vals.extend(abs(p) for p in pairs if np.isfinite(p))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# checkpoints


def _model_blocks(model):
    blocks = []
    for name, arr in model.G.named_params():
        blocks.append(("G.param." + name, arr))
    for name, arr in model.G.named_buffers():
        blocks.append(("G.buffer." + name, arr))
    for name, arr in model.D.named_params():
        blocks.append(("D.param." + name, arr))
    for tag, opt in (("opt_g", model.opt_g), ("opt_d", model.opt_d)):
        for name, arr in opt.state_arrays().items():
            blocks.append((f"{tag}.{name}", arr))
    return blocks


def checkpoint_bytes(model) -> bytes:
    blocks = _model_blocks(model)
    table = []
    offset = 0
    payload = []
    for name, arr in blocks:
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = {
        "config": model.config.to_dict(),
        "iteration": model.iteration,
        "opt_steps": {"opt_g": model.opt_g.t, "opt_d": model.opt_d.t},
        "rng_state": model.rng.bit_generator.state,
        "blocks": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model, path) -> None:
    path = Path(path)
    data = checkpoint_bytes(model)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def parse_checkpoint(data: bytes):
    if len(data) < len(MAGIC) + 8 + 32:
        raise CheckpointError("checkpoint is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a QGAN checkpoint (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    payload = body[start + hlen:]
    arrays = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        nbytes = 8 * count
        if b["offset"] + nbytes > len(payload):
            raise CheckpointError(f"block {b['name']} runs past the end of the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=b["offset"])
        arrays[b["name"]] = arr.reshape(b["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path):
    from .gan import QGAN, TrainConfig

    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    header, arrays = parse_checkpoint(data)
    model = QGAN.create(TrainConfig(**header["config"]))
    expected = {name for name, _ in _model_blocks(model)}
    if expected != set(arrays):
        raise CheckpointError(f"{path}: block table does not match the configured topology")
    for name, arr in model.G.named_params():
        np.copyto(arr, arrays["G.param." + name])
    for name, _ in list(model.G.named_buffers()):
        model.G.load_buffer(name, arrays["G.buffer." + name])
    for name, arr in model.D.named_params():
        np.copyto(arr, arrays["D.param." + name])
    for tag, opt in (("opt_g", model.opt_g), ("opt_d", model.opt_d)):
        for name, arr in opt.state_arrays().items():
            np.copyto(arr, arrays[f"{tag}.{name}"])
        opt.t = int(header["opt_steps"][tag])
    model.iteration = int(header["iteration"])
    model.rng.bit_generator.state = header["rng_state"]
    model.G.eval()
    return model
