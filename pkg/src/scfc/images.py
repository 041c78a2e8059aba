"""Image container, dataset readers and the preprocessing filters.

Pixels are stored as 2-D float64 arrays with intensities in [0, 1].
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DatasetLayoutError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    ImageFormatError,
    ShapeError,
)

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SUFFIXES = (".pgm", ".png")
MAX_SHOTS_PER_CLASS = 5

# Rec.601 luma
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    id: str
    label: int | None = None
    source: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ImageFormatError(f"image {self.id!r}: expected a non-empty 2-D grid, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ImageFormatError(f"image {self.id!r}: intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def with_pixels(self, pixels):
        return replace(self, pixels=pixels)


@dataclass(frozen=True)
class DegradeSpec:
    window: int

    def __post_init__(self):
        if int(self.window) != self.window or self.window < 1:
            raise ValueError(f"window must be a positive integer, got {self.window}")

    def check(self, img):
        if self.window > min(img.width, img.height):
            raise ShapeError(
                f"window {self.window} exceeds image {img.width}x{img.height} ({img.id})"
            )


# ---------------------------------------------------------------- IDX files


def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX magic")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    n = int(np.prod(dims))
    if len(raw) - header_len < n:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header_len} bytes, need {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header_len).reshape(dims)


def read_idx_images(path):
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path):
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def load_idx(images_path, labels_path, id_prefix="idx"):
    """Read an IDX image/label file pair into a list of :class:`Image`."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise IdxCountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    scaled = pixels.astype(np.float64) / 255.0
    return [
        Image(scaled[i], id=f"{id_prefix}-{i:05d}", label=int(labels[i]), source=str(images_path))
        for i in range(len(labels))
    ]


def write_idx(images_path, labels_path, pixels, labels):
    """Write uint8 arrays ``(n, h, w)`` and ``(n,)`` in IDX format."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels.ndim != 3 or labels.ndim != 1 or len(pixels) != len(labels):
        raise ValueError("expected pixels (n, h, w) and labels (n,)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ------------------------------------------------------------ PGM / PNG


def _pgm_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def read_pgm(path):
    """Parse a binary (P5) PGM into intensities in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    if len(data) - pos < count * np.dtype(dtype).itemsize:
        raise ImageFormatError(f"{path}: truncated PGM payload")
    px = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(h, w)
    return px.astype(np.float64) / maxval


def write_pgm(path, pixels):
    px = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def to_grayscale(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return arr[..., :3] @ LUMA_WEIGHTS
    if arr.ndim == 3 and arr.shape[2] in (1, 2):
        return arr[..., 0]
    raise ImageFormatError(f"no grayscale conversion for array of shape {arr.shape}")


def read_png(path):
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("I;16", "I;16B", "I"):
        scale = 65535.0
    elif mode in ("L", "LA", "RGB", "RGBA", "P"):
        if mode == "P":
            raise ImageFormatError(f"{path}: palette PNGs are not supported")
        scale = 255.0
    else:
        raise ImageFormatError(f"{path}: unsupported PNG mode {mode}")
    return np.clip(to_grayscale(arr) / scale, 0.0, 1.0)


def write_png(path, pixels):
    from PIL import Image as PILImage

    px = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(px, mode="L").save(path)


def read_image(path, image_id=None, label=None):
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".pgm":
            px = read_pgm(path)
        elif suffix == ".png":
            px = read_png(path)
        else:
            raise ImageFormatError(f"{path}: unsupported file type {suffix!r}")
    except OSError as err:
        raise ImageFormatError(f"{path}: unreadable ({err})") from err
    return Image(px, id=image_id or path.stem, label=label, source=str(path))


def write_image(path, img):
    if Path(path).suffix.lower() == ".png":
        write_png(path, img.pixels)
    else:
        write_pgm(path, img.pixels)


def _list_images(folder):
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_dir(root):
    """Read ``root/test/{occupied,unoccupied}`` and ``root/support``.

    Returns a :class:`~scfc.data.FewShotSets` with empty clustering set.  Ids
    are ``<folder>/<stem>`` so equal file names in different folders stay
    distinct.  If ``root/truth.csv`` (``id,label``) exists its labels are
    attached to the support images for evaluation only.
    """
    from .data import FewShotSets, read_truth_csv

    root = Path(root)
    folders = {
        "occupied": root / "test" / "occupied",
        "unoccupied": root / "test" / "unoccupied",
        "support": root / "support",
    }
    for folder in folders.values():
        if not folder.is_dir():
            raise DatasetLayoutError(f"missing dataset folder: {folder}")
    occ = [read_image(p, f"test/occupied/{p.stem}", 1) for p in _list_images(folders["occupied"])]
    unocc = [read_image(p, f"test/unoccupied/{p.stem}", 0) for p in _list_images(folders["unoccupied"])]
    support = [read_image(p, f"support/{p.stem}") for p in _list_images(folders["support"])]
    for name, group in (("occupied", occ), ("unoccupied", unocc)):
        if len(group) > MAX_SHOTS_PER_CLASS:
            log.warning("%d %s exemplars exceed the %d-shot budget", len(group), name, MAX_SHOTS_PER_CLASS)
    truth_path = root / "truth.csv"
    if truth_path.exists():
        truth = read_truth_csv(truth_path)
        support = [replace(img, label=truth.get(img.id, truth.get(img.id.split("/", 1)[1]))) for img in support]
    return FewShotSets(occ, unocc, support)


def resize_nearest(img, height, width):
    if (img.height, img.width) == (height, width):
        return img
    rows = (np.arange(height) * img.height // height).astype(int)
    cols = (np.arange(width) * img.width // width).astype(int)
    return img.with_pixels(img.pixels[np.ix_(rows, cols)])


# ---------------------------------------------------------------- filters


def median_filter(img, k=3):
    """k x k median with edge replication; output has the input's size."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median window must be odd and positive, got {k}")
    if k > min(img.width, img.height):
        raise ShapeError(f"median window {k} exceeds image {img.width}x{img.height}")
    r = k // 2
    padded = np.pad(img.pixels, r, mode="edge")
    win = sliding_window_view(padded, (k, k))
    return img.with_pixels(np.median(win.reshape(*win.shape[:2], -1), axis=-1))


def maxpool_degrade(img, spec):
    """Sliding-window maximum anchored at each pixel and extending down/right.

    Out-of-bounds positions replicate the last row/column, so the output
    keeps the input size.  A window of 1 returns the input unchanged.
    """
    if not isinstance(spec, DegradeSpec):
        spec = DegradeSpec(int(spec))
    spec.check(img)
    w = spec.window
    if w == 1:
        return img
    padded = np.pad(img.pixels, ((0, w - 1), (0, w - 1)), mode="edge")
    return img.with_pixels(sliding_window_view(padded, (w, w)).max(axis=(-2, -1)))


# ------------------------------------------------------------------- SSIM

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_pixels(x):
    return x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def ssim_map(a, b, window=SSIM_WINDOW, data_range=1.0):
    """Per-window SSIM over every valid ``window x window`` position (stride 1).

    Uses uniform weights and population (1/N) moments.  Windows shrink to the
    image size for images smaller than ``window``.
    """
    a, b = _as_pixels(a), _as_pixels(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim needs equal dimensions, got {a.shape} and {b.shape}")
    wh, ww = min(window, a.shape[0]), min(window, a.shape[1])
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (wh, ww))
    wb = sliding_window_view(b, (wh, ww))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window=SSIM_WINDOW):
    return float(ssim_map(a, b, window).mean())


def ssim_change(prev, nxt, threshold=0.9):
    """True when ``nxt`` differs enough from ``prev`` to be admitted."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"ssim threshold must be in (0, 1), got {threshold}")
    return ssim(prev, nxt) < threshold
