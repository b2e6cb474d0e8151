"""Noise synthesis and dataset ingestion (IDX, binary PGM, synthetic patterns)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rtf

NOISE_KINDS = ("awgn", "saltpepper", "mixed")


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class UnsupportedFormatError(DataFormatError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption model in the normalized [0, 1] intensity domain."""

    kind: str = "awgn"
    sigma: float = 0.2
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "NoiseSpec":
        """Parse ``awgn:0.2``, ``awgn255:25``, ``sp:0.1`` or ``mixed:0.2,0.1``."""
        kind, _, args = text.partition(":")
        vals = [float(v) for v in args.split(",") if v.strip()]
        kind = kind.strip().lower()
        if kind == "awgn" and len(vals) == 1:
            return cls("awgn", sigma=vals[0], seed=seed)
        if kind == "awgn255" and len(vals) == 1:
            return cls("awgn", sigma=vals[0] / 255.0, seed=seed)
        if kind in ("sp", "saltpepper") and len(vals) == 1:
            return cls("saltpepper", sigma=0.0, p=vals[0], seed=seed)
        if kind == "mixed" and len(vals) == 2:
            return cls("mixed", sigma=vals[0], p=vals[1], seed=seed)
        raise ValueError(f"cannot parse noise spec {text!r}")

    def describe(self) -> str:
        if self.kind == "awgn":
            return f"awgn:{self.sigma!r}"
        if self.kind == "saltpepper":
            return f"sp:{self.p!r}"
        return f"mixed:{self.sigma!r},{self.p!r}"

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, self.sigma, self.p, seed)


def corrupt(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Apply ``spec`` to ``clean``. The result is deliberately not clamped."""
    clean = np.asarray(clean)
    rng = np.random.default_rng(spec.seed)
    out = clean.copy()
    if spec.kind in ("awgn", "mixed") and spec.sigma > 0:
        out = out + rng.normal(0.0, spec.sigma, size=clean.shape).astype(clean.dtype)
    if spec.kind in ("saltpepper", "mixed") and spec.p > 0:
        hit = rng.random(clean.shape) < spec.p
        salt = rng.random(clean.shape) < 0.5
        out = np.where(hit, salt.astype(clean.dtype), out)
    return out.astype(clean.dtype, copy=False)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) in [0, 1]
    labels: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"dataset images must be (N, 1, H, W), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise CountMismatchError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.name, dict(self.meta))

    def split(self, val_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Deterministic split: the trailing ``val_fraction`` becomes validation."""
        n = len(self)
        nval = max(1, int(round(n * val_fraction))) if n > 1 else 0
        return self.subset(slice(0, n - nval)), self.subset(slice(n - nval, n))


@dataclass
class Batch:
    clean: np.ndarray
    noisy: np.ndarray
    labels: np.ndarray | None
    seed: int


# ----------------------------------------------------------------------- IDX


def _read_idx(path, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: bad IDX {what} magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    hlen = 4 + 4 * ndim
    if len(raw) < hlen:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:hlen])
    n = int(np.prod(dims, dtype=np.int64))
    body = raw[hlen:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} data bytes, found {len(body)}")
    return dims, body[:n]


def load_idx(images_path, labels_path=None, name: str = "idx") -> Dataset:
    """Read an unsigned-byte IDX image file (and optional label file)."""
    dims, body = _read_idx(images_path, 0x00000803, "image")
    n, h, w = dims
    images = (np.frombuffer(body, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32) / np.float32(255))
    labels = None
    if labels_path is not None:
        (nl,), lbody = _read_idx(labels_path, 0x00000801, "label")
        if nl != n:
            raise CountMismatchError(f"{n} images but {nl} labels")
        labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, name)


def write_idx(images: np.ndarray, path, labels: np.ndarray | None = None, labels_path=None) -> None:
    """Write byte images of shape (N, H, W) (and labels) in IDX form."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.tobytes())
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())


# ----------------------------------------------------------------------- PGM


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i >= len(raw):
            raise TruncatedFileError("truncated PGM header")
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
            j += 1
        tokens.append(raw[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the raster
    return tokens, i + 1


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM as a (1, 1, H, W) float32 tensor in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        if raw[:2] == b"P2":
            raise UnsupportedFormatError(f"{path}: ASCII PGM (P2) is not supported")
        raise BadMagicError(f"{path}: not a binary PGM")
    (magic, w, h, maxval), start = _pgm_tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} unsupported, only 255")
    body = raw[start : start + w * h]
    if len(body) != w * h:
        raise TruncatedFileError(f"{path}: expected {w * h} pixels, found {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(1, 1, h, w).astype(np.float32) / np.float32(255))


def quantize(t: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to bytes."""
    return np.floor(np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_pgm(t: np.ndarray, path) -> None:
    t = np.asarray(t)
    img = t.reshape(t.shape[-2:])
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + quantize(img).tobytes())


def load_pgm_dir(path, name: str | None = None) -> Dataset:
    """All ``*.pgm`` files in a directory; they must share one size."""
    files = sorted(Path(path).glob("*.pgm"))
    if not files:
        raise FileNotFoundError(f"no .pgm files in {path}")
    imgs = [load_pgm(f) for f in files]
    shapes = {i.shape for i in imgs}
    if len(shapes) != 1:
        raise DataFormatError(f"{path}: images differ in size {sorted(shapes)}")
    return Dataset(np.concatenate(imgs), None, name or str(path), {"files": [f.name for f in files]})


# -------------------------------------------------------------- synthetic


PATTERN_CLASSES = ("checkerboard", "bars", "disk", "ramp")


def checkerboard(size: int, period: int, phase: tuple[int, int] = (0, 0), lo=0.0, hi=1.0) -> np.ndarray:
    """Squares of side ``period // 2``; ``period`` is the repeat length in pixels."""
    half = max(period // 2, 1)
    yy, xx = np.mgrid[0:size, 0:size]
    cells = ((yy + phase[0]) // half + (xx + phase[1]) // half) % 2
    return np.where(cells == 1, hi, lo)


def _bars(size, period, vertical, phase, lo, hi):
    half = max(period // 2, 1)
    yy, xx = np.mgrid[0:size, 0:size]
    coord = xx if vertical else yy
    return np.where(((coord + phase) // half) % 2 == 1, hi, lo)


def _disk(size, cy, cx, radius, lo, hi):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.where((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2, hi, lo)


def _ramp(size, angle, lo, hi):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return lo + (hi - lo) * t


def synth_patterns(count: int, size: int, seed: int = 0) -> Dataset:
    """Deterministic four-class pattern set: checkerboards, bars, disks and ramps.

    Class ``i % 4`` is assigned to the i-th generated image before a seeded
    shuffle, so class counts differ by at most one.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % len(PATTERN_CLASSES)
    rng.shuffle(labels)
    periods = [p for p in (2, 4, 8, 16) if p <= size]
    images = np.empty((count, 1, size, size), dtype=np.float32)
    for n, c in enumerate(labels):
        lo = rng.uniform(0.0, 0.3)
        hi = rng.uniform(0.7, 1.0)
        if c == 0:
            period = int(rng.choice(periods))
            img = checkerboard(size, period, tuple(rng.integers(0, period, 2)), lo, hi)
        elif c == 1:
            period = int(rng.choice(periods))
            img = _bars(size, period, bool(rng.integers(0, 2)), int(rng.integers(0, period)), lo, hi)
        elif c == 2:
            r = rng.uniform(size / 8, size / 3)
            cy, cx = rng.uniform(r, size - r, 2)
            img = _disk(size, cy, cx, r, lo, hi)
        else:
            img = _ramp(size, rng.uniform(0, 2 * np.pi), lo, hi)
        images[n, 0] = img
    return Dataset(images, labels.astype(np.int64), f"synth:{count},{size},{seed}")


# ------------------------------------------------------------ pad / crop


@dataclass(frozen=True)
class PadRecord:
    top: int
    bottom: int
    left: int
    right: int


def pad_to_multiple(t: np.ndarray, m: int) -> tuple[np.ndarray, PadRecord]:
    """Reflect-pad the last two axes up to the next multiple of ``m``."""
    h, w = t.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    rec = PadRecord(ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph == 0 and pw == 0:
        return t.copy(), rec
    widths = [(0, 0)] * (t.ndim - 2) + [(rec.top, rec.bottom), (rec.left, rec.right)]
    mode = "reflect" if min(h, w) > max(rec.top, rec.bottom, rec.left, rec.right) else "symmetric"
    return np.pad(t, widths, mode=mode), rec


def crop(t: np.ndarray, rec: PadRecord) -> np.ndarray:
    h, w = t.shape[-2:]
    return t[..., rec.top : h - rec.bottom, rec.left : w - rec.right].copy()


# ---------------------------------------------------------- specifiers


def load_dataset(spec: str) -> Dataset:
    """Resolve ``idx:images[:labels]``, ``pgmdir:path``, ``pgm:file``, ``rtf:file`` or ``synth:count,size,seed``."""
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        parts = [int(v) for v in rest.split(",")]
        if len(parts) not in (2, 3):
            raise ValueError(f"synth spec needs count,size[,seed]: {spec!r}")
        return synth_patterns(*parts)
    if kind == "idx":
        paths = rest.split(":")
        for p in paths:
            if not Path(p).exists():
                raise FileNotFoundError(p)
        return load_idx(paths[0], paths[1] if len(paths) > 1 else None, name=spec)
    if kind == "pgmdir":
        if not Path(rest).is_dir():
            raise FileNotFoundError(rest)
        return load_pgm_dir(rest, name=spec)
    if kind == "pgm":
        return Dataset(load_pgm(rest), None, spec)
    if kind == "rtf":
        t = rtf.load(rest)
        if t.ndim == 2:
            t = t[None, None]
        return Dataset(t.astype(np.float32), None, spec)
    raise ValueError(f"unknown dataset specifier {spec!r}")
