"""Dataset ingestion, mask generation, image codecs, checkpoint files.

Images live in [-1, 1] float arrays shaped [C,H,W] everywhere inside the
package; PNG is the only raster format (lossless, so metric numbers are
reproducible).  Checkpoints are a little-endian binary container:

    magic "LIWG" | version u32 | records...
    record = name_len u32 | name utf-8 | dtype tag u8 | ndim u8
           | dims u32 * ndim | raw payload

Metadata (config, RNG state) rides along as JSON encoded into u8 records,
so one record format covers the whole file.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CheckpointError, DataError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LIWG"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {0: np.float64, 1: np.float32, 2: np.int64, 3: np.uint8}
_TAG_OF = {np.dtype(t): tag for tag, t in _DTYPE_TAGS.items()}

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp"}


# ---- images ---------------------------------------------------------------


def to_unit(bytes_img):
    """uint8 [0,255] -> float [-1,1]; 0 maps to -1, 255 to +1."""
    return np.asarray(bytes_img, dtype=np.float64) * (2.0 / 255.0) - 1.0


def to_bytes(unit_img):
    """float [-1,1] -> uint8, rounding; inverse of to_unit within 1/255."""
    scaled = np.round((np.asarray(unit_img, dtype=np.float64) + 1.0) * (255.0 / 2.0))
    return np.clip(scaled, 0, 255).astype(np.uint8)


def encode_image(img, path):
    """Write a [C,H,W] or [H,W] image in [-1,1] as PNG."""
    img = np.asarray(img)
    if img.ndim == 3:
        data = to_bytes(img).transpose(1, 2, 0)
        if data.shape[2] == 1:
            data = data[:, :, 0]
            mode = "L"
        elif data.shape[2] == 3:
            mode = "RGB"
        else:
            raise DataError(f"cannot encode image with {data.shape[2]} channels")
    elif img.ndim == 2:
        data = to_bytes(img)
        mode = "L"
    else:
        raise DataError(f"cannot encode array of rank {img.ndim} as an image")
    Image.fromarray(data, mode=mode).save(Path(path), format="PNG")


def decode_image(path):
    """Read an image file into a [C,H,W] float array in [-1,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_unit(arr)


def _center_crop_resize(im, size):
    w, h = im.size
    side = min(w, h)
    left = (w - side) // 2
    top = (h - side) // 2
    im = im.crop((left, top, left + side, top + side))
    if side != size:
        im = im.resize((size, size), Image.BILINEAR)
    return im


@dataclass
class Dataset:
    """Decoded training images [M,3,size,size] in [-1,1] plus provenance."""

    images: np.ndarray
    paths: list
    manifest: str
    augment_hflip: bool = True

    def __len__(self):
        return len(self.images)


def load_dataset(directory, size=64, augment_hflip=True):
    """Decode every image under `directory` (sorted paths, deterministic).

    Each image is center-cropped square, bilinearly resized to
    size x size, and scaled to [-1,1].  Unreadable files are skipped with
    a warning; an empty result is an error.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    paths = sorted(
        p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    images = []
    kept = []
    skipped = 0
    for p in paths:
        try:
            with Image.open(p) as im:
                im = _center_crop_resize(im.convert("RGB"), size)
                images.append(to_unit(np.asarray(im).transpose(2, 0, 1)))
            kept.append(str(p))
        except (OSError, ValueError):
            skipped += 1
    if skipped:
        log.warning("skipped %d unreadable file(s) in %s", skipped, directory)
    if not images:
        raise DataError(f"no decodable images in {directory}")
    manifest = "\n".join(
        [
            f"source: {directory}",
            f"count: {len(images)} (skipped {skipped})",
            f"preprocess: center-crop square, bilinear resize to {size}x{size}, scale to [-1,1]",
            f"hflip_augment: {augment_hflip} (applied per batch, not materialized)",
        ]
    )
    return Dataset(np.stack(images), kept, manifest, augment_hflip)


# ---- masks ----------------------------------------------------------------

# (row, col, height, width) hole rectangles for the three-squares mask,
# expressed on the 64-pixel grid and scaled for other sizes
THREE_SQUARES_64 = ((8, 8, 12, 20), (8, 36, 12, 20), (40, 22, 12, 20))


def make_mask(kind, size=64, params=None):
    """Binary mask (1 = known, 0 = hole) as a uint8 [size,size] array."""
    if size < 8:
        raise ValueError("mask size must be at least 8")
    params = params or {}
    if kind == "central":
        side = params.get("side", size // 2)
        mask = np.ones((size, size), dtype=np.uint8)
        start = (size - side) // 2
        _punch(mask, start, start, side, side)
        return mask
    if kind == "three_squares":
        rects = params.get("rects")
        if rects is None:
            scale = size / 64.0
            rects = [tuple(int(round(v * scale)) for v in r) for r in THREE_SQUARES_64]
        mask = np.ones((size, size), dtype=np.uint8)
        for r0, c0, h, w in rects:
            _punch(mask, r0, c0, h, w)
        hole = int((mask == 0).sum())
        if hole != sum(h * w for _, _, h, w in rects):
            raise ValueError("mask rectangles overlap")
        return mask
    if kind == "file":
        return load_mask(params["path"])
    raise ValueError(f"unknown mask kind {kind!r}")


def _punch(mask, r0, c0, h, w):
    size = mask.shape[0]
    if r0 < 0 or c0 < 0 or r0 + h > size or c0 + w > size:
        raise ValueError(f"hole rectangle ({r0},{c0},{h},{w}) out of bounds for size {size}")
    mask[r0 : r0 + h, c0 : c0 + w] = 0


def save_mask(mask, path):
    """Write a mask as 8-bit grayscale PNG: 255 = known, 0 = hole."""
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(
        Path(path), format="PNG"
    )


def load_mask(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    values = np.unique(arr)
    if not set(values.tolist()) <= {0, 255}:
        raise DataError(f"mask {path} is not binary (found pixel values {values[:8].tolist()})")
    return (arr == 255).astype(np.uint8)


# ---- checkpoints ----------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    gen_params: dict
    critic_params: dict
    opt_gen: dict = field(default_factory=dict)
    opt_critic: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _write_record(buf, name, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_OF:
        arr = arr.astype(np.float64)
    name_b = name.encode("utf-8")
    buf.write(struct.pack("<I", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<BB", _TAG_OF[arr.dtype], arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    if arr.dtype.byteorder == ">":
        arr = arr.byteswap().view(arr.dtype.newbyteorder("<"))
    buf.write(arr.tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_record(f):
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint while reading record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(f, name_len, "record name").decode("utf-8")
    tag, ndim = struct.unpack("<BB", _read_exact(f, 2, "record dtype"))
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"unknown dtype tag {tag} in record {name!r}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "record dims")) if ndim else ()
    dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(f, count * dtype.itemsize, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(_DTYPE_TAGS[tag])
    return name, arr


def _json_record(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _adam_records(prefix, state):
    recs = [(f"{prefix}/t", np.array(state.get("t", 0), dtype=np.int64))]
    for group in ("m", "v"):
        for name in sorted(state.get(group, {})):
            recs.append((f"{prefix}/{group}/{name}", state[group][name]))
    return recs


def save_checkpoint(ckpt, path):
    """Serialize a checkpoint; the byte stream is canonical (sorted names)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    _write_record(buf, "meta/iteration", np.array(ckpt.iteration, dtype=np.int64))
    _write_record(buf, "meta/config", _json_record(ckpt.config))
    _write_record(buf, "meta/rng", _json_record(ckpt.rng_state))
    for name in sorted(ckpt.gen_params):
        _write_record(buf, f"gen/{name}", ckpt.gen_params[name])
    for name in sorted(ckpt.critic_params):
        _write_record(buf, f"critic/{name}", ckpt.critic_params[name])
    for name, arr in _adam_records("opt_gen", ckpt.opt_gen):
        _write_record(buf, name, arr)
    for name, arr in _adam_records("opt_critic", ckpt.opt_critic):
        _write_record(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with path.open("rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )
        records = {}
        while True:
            rec = _read_record(f)
            if rec is None:
                break
            records[rec[0]] = rec[1]

    def take_json(name):
        raw = records.pop(name, None)
        return json.loads(raw.tobytes().decode("utf-8")) if raw is not None else {}

    if "meta/iteration" not in records:
        raise CheckpointError(f"{path} is missing the iteration record")
    iteration = int(np.ravel(records.pop("meta/iteration"))[0])
    config = take_json("meta/config")
    rng_state = take_json("meta/rng")
    gen, critic = {}, {}
    opt_gen = {"t": 0, "m": {}, "v": {}}
    opt_critic = {"t": 0, "m": {}, "v": {}}
    for name, arr in records.items():
        scope, _, rest = name.partition("/")
        if scope == "gen":
            gen[rest] = arr
        elif scope == "critic":
            critic[rest] = arr
        elif scope in ("opt_gen", "opt_critic"):
            state = opt_gen if scope == "opt_gen" else opt_critic
            if rest == "t":
                state["t"] = int(np.ravel(arr)[0])
            else:
                group, _, pname = rest.partition("/")
                state[group][pname] = arr
        else:
            raise CheckpointError(f"unexpected record {name!r} in {path}")
    return Checkpoint(iteration, gen, critic, opt_gen, opt_critic, rng_state, config, version)
