"""Procedural two-level scenes and their netpbm (PPM/PGM) storage.

A scene is a sky/ground background split by a wavy horizon, with one to three
objects on top.  Each object is a body (class A or B) holding a smaller part.
Parts of both object types share one colour distribution, so telling part-A
from part-B requires looking at the surrounding body.

Classes::

    0 sky   1 ground   2 body-A   3 part-A   4 body-B   5 part-B
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE_INDEX = 255
CLASS_NAMES = ("sky", "ground", "body-A", "part-A", "body-B", "part-B")
INDEX_NAME = "index.tsv"


class NetpbmError(ValueError):
    """Malformed or truncated PPM/PGM data."""


class DatasetError(ValueError):
    """Problems with a dataset directory or index file."""


@dataclass
class SceneSample:
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8, class ids or IGNORE_INDEX
    objects: list[dict] = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class SceneSpec:
    size: int = 64
    width: int | None = None
    classes: int = 6
    max_objects: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.classes != len(CLASS_NAMES):
            raise ValueError(f"the scene generator draws exactly {len(CLASS_NAMES)} classes, got {self.classes}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.size, self.width or self.size


_SKY = np.array([0.45, 0.65, 0.90])
_GROUND = np.array([0.45, 0.38, 0.22])
# Body colours sit close together and object pixels carry strong texture, so a
# single pixel says little about which body it belongs to; the average over the
# whole object does.  Parts share one colour and inherit their class from the body.
_BODY = {2: np.array([0.62, 0.28, 0.38]), 4: np.array([0.43, 0.32, 0.57])}
_PART = np.array([0.92, 0.85, 0.35])
_BODY_JITTER = 0.03
_TEXTURE = 0.12


def _shape_mask(rr, cc, top, left, h, w, ellipse: bool) -> np.ndarray:
    if not ellipse:
        return (rr >= top) & (rr < top + h) & (cc >= left) & (cc < left + w)
    cy, cx = top + (h - 1) / 2.0, left + (w - 1) / 2.0
    return ((rr - cy) / (h / 2.0)) ** 2 + ((cc - cx) / (w / 2.0)) ** 2 <= 1.0


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    """Deterministic in ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.hw
    rr, cc = np.mgrid[0:H, 0:W]

    base = rng.uniform(0.35, 0.65) * H
    amp = rng.uniform(0.02, 0.08) * H
    freq = rng.uniform(0.5, 2.0) * 2 * np.pi / W
    phase = rng.uniform(0, 2 * np.pi)
    horizon = base + amp * np.sin(freq * np.arange(W) + phase)
    labels = np.where(rr < horizon[None, :], 0, 1).astype(np.uint8)

    image = np.empty((H, W, 3))
    sky = np.clip(_SKY + rng.normal(0, 0.06, 3), 0, 1)
    ground = np.clip(_GROUND + rng.normal(0, 0.06, 3), 0, 1)
    shade = (rr / max(H - 1, 1))[..., None]
    image[:] = np.where((labels == 0)[..., None], sky * (1.1 - 0.3 * shade), ground * (0.8 + 0.3 * shade))

    objects = []
    for _ in range(rng.integers(1, spec.max_objects + 1)):
        cls = int(rng.choice([2, 4]))
        bh, bw = int(rng.integers(H // 4, H // 2 + 1)), int(rng.integers(W // 4, W // 2 + 1))
        top, left = int(rng.integers(0, H - bh + 1)), int(rng.integers(0, W - bw + 1))
        body = _shape_mask(rr, cc, top, left, bh, bw, bool(rng.integers(2)))
        # keep the part inside the inscribed box so ellipse bodies still contain it
        ph, pw = max(3, int(bh * rng.uniform(0.3, 0.45))), max(3, int(bw * rng.uniform(0.3, 0.45)))
        mh, mw = int(0.15 * bh) + 1, int(0.15 * bw) + 1
        ptop = top + int(rng.integers(mh, max(mh, bh - mh - ph) + 1))
        pleft = left + int(rng.integers(mw, max(mw, bw - mw - pw) + 1))
        part = _shape_mask(rr, cc, ptop, pleft, ph, pw, bool(rng.integers(2))) & body
        body_col = np.clip(_BODY[cls] + rng.normal(0, _BODY_JITTER, 3), 0, 1)
        part_col = np.clip(_PART + rng.normal(0, 0.06, 3), 0, 1)
        image[body] = body_col
        image[part] = part_col
        labels[body] = cls
        labels[part] = cls + 1
        objects.append({"cls": cls, "bbox": (top, left, top + bh, left + bw),
                        "part_bbox": (ptop, pleft, ptop + ph, pleft + pw)})

    image = image + rng.normal(0, 0.04, image.shape)
    fg = labels >= 2
    image[fg] += rng.normal(0, _TEXTURE, (int(fg.sum()), 3))
    image = np.clip(image, 0, 1).transpose(2, 0, 1).astype(np.float32)
    return SceneSample(np.ascontiguousarray(image), labels, objects)


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, H, W) float image in [0, 1] -> binary P6 bytes, maxval 255."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("PGM label values must lie in [0, 255]")
    h, w = labels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes()


def _parse_header(buf: bytes, magic: bytes, source: str) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise NetpbmError(f"{source}: expected magic {magic.decode()}, got {buf[:2]!r}")
    pos, fields = 2, []
    while len(fields) < 3:
        if pos >= len(buf):
            raise NetpbmError(f"{source}: header truncated after {len(fields)} of 3 fields")
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise NetpbmError(f"{source}: unexpected byte {ch!r} in header")
            fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError(f"{source}: missing whitespace after maxval")
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise NetpbmError(f"{source}: invalid header values width={w} height={h} maxval={maxval}")
    return w, h, maxval, pos + 1


def _decode(buf: bytes, magic: bytes, channels: int, source: str) -> tuple[np.ndarray, int]:
    w, h, maxval, start = _parse_header(buf, magic, source)
    bps = 1 if maxval < 256 else 2
    need = w * h * channels * bps
    have = len(buf) - start
    if have < need:
        raise NetpbmError(f"{source}: pixel data truncated, expected {need} bytes, "
                          f"got {have} (missing {need - have} bytes)")
    dt = np.uint8 if bps == 1 else np.dtype(">u2")
    arr = np.frombuffer(buf, dtype=dt, count=w * h * channels, offset=start)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w), maxval


def decode_ppm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    arr, maxval = _decode(buf, b"P6", 3, source)
    return np.ascontiguousarray(arr.transpose(2, 0, 1).astype(np.float32) / maxval)


def decode_pgm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    arr, _ = _decode(buf, b"P5", 1, source)
    return arr.astype(np.uint8) if arr.dtype == np.uint8 else arr.astype(np.uint16)


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), str(path))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes(), str(path))


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(labels))


def write_sample(image_path, label_path, sample: SceneSample) -> None:
    write_ppm(image_path, sample.image)
    write_pgm(label_path, sample.labels)


def read_sample(image_path, label_path) -> SceneSample:
    image = read_ppm(image_path)
    labels = read_pgm(label_path)
    if image.shape[1:] != labels.shape:
        raise DatasetError(f"shape mismatch: {image_path} is {image.shape[1]}x{image.shape[2]}, "
                           f"{label_path} is {labels.shape[0]}x{labels.shape[1]}")
    return SceneSample(image, labels)


# ---------------------------------------------------------------------------
# Corpus on disk
# ---------------------------------------------------------------------------


def write_corpus(directory, spec: SceneSpec, count: int) -> list[SceneSample]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(count):
        s = generate_scene(spec, i)
        write_sample(d / f"scene_{i:05d}.ppm", d / f"scene_{i:05d}.pgm", s)
        samples.append(s)
    build_index(d)
    return samples


def build_index(directory) -> list[tuple[str, str]]:
    """Pair every ``X.ppm`` with ``X.pgm`` and write ``index.tsv`` (sorted)."""
    d = Path(directory)
    pairs = []
    for img in sorted(d.glob("*.ppm")):
        lab = img.with_suffix(".pgm")
        if lab.exists():
            pairs.append((img.name, lab.name))
    (d / INDEX_NAME).write_text("".join(f"{a}\t{b}\n" for a, b in pairs))
    return pairs


def read_index(path) -> list[tuple[Path, Path]]:
    """Parse an index file (or a directory holding one) into absolute path pairs."""
    p = Path(path)
    if p.is_dir():
        p = p / INDEX_NAME
    if not p.exists():
        raise DatasetError(f"index file not found: {p}")
    base = p.parent
    pairs = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{p}:{lineno}: expected 'image<TAB>label', got {line!r}")
        pairs.append(tuple(q if os.path.isabs(q) else base / q for q in map(Path, parts)))
    return pairs


def load_dataset(path) -> list[SceneSample]:
    pairs = read_index(path)
    if not pairs:
        raise DatasetError(f"empty dataset: {path}")
    samples = []
    for img, lab in pairs:
        for q in (img, lab):
            if not Path(q).exists():
                raise DatasetError(f"missing file referenced by index: {q}")
        samples.append(read_sample(img, lab))
    return samples


def class_frequencies(samples, classes: int = len(CLASS_NAMES)) -> np.ndarray:
    counts = np.zeros(classes, dtype=np.int64)
    for s in samples:
        valid = s.labels[s.labels != IGNORE_INDEX]
        counts += np.bincount(valid.astype(np.int64), minlength=classes)[:classes]
    return counts
