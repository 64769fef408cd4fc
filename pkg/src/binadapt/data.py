"""Image I/O, dataset directory ingestion, patch tiling, and synthetic fixtures.

Pages are 8-bit PGM files (P5 binary or P2 ASCII, maxval 255) scaled to
float64 in [0, 1] on load. Dataset directories look like::

    <root>/images/*.pgm          pages
    <root>/gt/*.pgm              ground truth, matching stems (source role only;
                                 pixel >= 128 marks foreground ink)

Patch tiling pads pages by edge replication up to multiples of the patch size
and records the pad amounts, so ``assemble(split_patches(page))`` is a
bit-exact inverse. The synthetic generator builds three small domains: a
source domain of dark strokes on light background with exact masks, a nearby
target that only shifts the noise statistics, and a far target with inverted
contrast plus faint bleed-through ghosts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PgmError",
    "Page",
    "GroundTruth",
    "PatchGrid",
    "PageRecord",
    "Dataset",
    "read_pgm",
    "write_pgm",
    "to_grayscale",
    "split_patches",
    "assemble",
    "load_dataset",
    "synthetic_domain_pairs",
    "make_synthetic_domains",
    "write_synthetic_dirs",
    "SYNTHETIC_KINDS",
]

_SEED_SPLIT = 101
_SEED_SYNTH = 102

GT_INK_THRESHOLD = 128  # 8-bit level at or above which a gt pixel counts as ink


class PgmError(ValueError):
    """Malformed PGM payload; the message carries the byte offset."""


@dataclass
class Page:
    """One document page, pixels scaled to [0, 1] floats."""

    pixels: np.ndarray  # (h, w) grayscale or (h, w, 3) color

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim not in (2, 3) or (
            self.pixels.ndim == 3 and self.pixels.shape[2] != 3
        ):
            raise PgmError(f"page pixels must be (h,w) or (h,w,3), got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return 1 if self.pixels.ndim == 2 else 3


@dataclass
class GroundTruth:
    """Per-pixel binary annotation; 1 marks foreground ink."""

    mask: np.ndarray  # (h, w) of {0, 1}

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 2:
            raise PgmError(f"ground truth must be 2-D, got shape {self.mask.shape}")
        self.mask = (self.mask != 0).astype(np.uint8)


@dataclass
class PatchGrid:
    """Fixed-size tiling of a page plus the metadata needed to undo it."""

    patch: tuple  # (h, w)
    grid: tuple  # (rows, cols)
    pad: tuple  # (right, bottom) replication padding applied before tiling
    patches: list  # row-major list of (h, w) arrays


@dataclass
class PageRecord:
    stem: str
    page: Page
    gt: GroundTruth | None
    split: str  # "train" | "validation"


@dataclass
class Dataset:
    """A source (labeled) or target (unlabeled) page collection."""

    role: str  # "source" | "target"
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"unknown dataset role {self.role!r}")
        for rec in self.records:
            if self.role == "source" and rec.gt is None:
                raise ValueError(f"source page {rec.stem!r} has no ground truth")
            if self.role == "target" and rec.gt is not None:
                raise ValueError(f"target page {rec.stem!r} carries ground truth")

    def train(self):
        return [r for r in self.records if r.split == "train"]

    def validation(self):
        return [r for r in self.records if r.split == "validation"]


# ---------------------------------------------------------------------------
# PGM

def _skip_space(data, pos, what):
    while True:
        if pos >= len(data):
            raise PgmError(f"unexpected end of file while reading {what} at byte {pos}")
        c = data[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
        else:
            return pos


def _token(data, pos, what):
    pos = _skip_space(data, pos, what)
    start = pos
    while pos < len(data) and data[pos] not in b" \t\r\n#":
        pos += 1
    if start == pos:
        raise PgmError(f"empty {what} token at byte {start}")
    return data[start:pos], pos


def _int_token(data, pos, what, minimum=1):
    tok, pos = _token(data, pos, what)
    try:
        value = int(tok)
    except ValueError:
        raise PgmError(f"bad {what} {tok!r} at byte {pos - len(tok)}") from None
    if value < minimum:
        raise PgmError(f"bad {what} {value} at byte {pos - len(tok)}")
    return value, pos


def read_pgm(data: bytes) -> Page:
    """Decode a P5 (binary) or P2 (ASCII) PGM with maxval 255."""
    magic, pos = _token(data, 0, "magic")
    if magic not in (b"P5", b"P2"):
        raise PgmError(f"unsupported magic {magic!r} at byte 0")
    width, pos = _int_token(data, pos, "width")
    height, pos = _int_token(data, pos, "height")
    maxval, pos = _int_token(data, pos, "maxval")
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval} at byte {pos}")

    count = width * height
    if magic == b"P5":
        pos += 1  # exactly one whitespace byte after maxval
        if pos + count > len(data):
            raise PgmError(
                f"truncated P5 payload at byte {len(data)}: "
                f"expected {count} bytes from byte {pos}"
            )
        values = np.frombuffer(data[pos : pos + count], dtype=np.uint8)
    else:
        values = np.empty(count, dtype=np.uint8)
        for i in range(count):
            v, pos = _int_token(data, pos, f"pixel {i}", minimum=0)
            if v > 255:
                raise PgmError(f"pixel value {v} exceeds 255 at byte {pos}")
            values[i] = v
    return Page(values.reshape(height, width) / 255.0)


def write_pgm(page) -> bytes:
    """Encode a grayscale page (Page or [0,1] array) as binary P5."""
    arr = page.pixels if isinstance(page, Page) else np.asarray(page, dtype=np.float64)
    if arr.ndim != 2:
        raise PgmError(f"write_pgm expects a grayscale page, got shape {arr.shape}")
    raw = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    return header + raw.tobytes()


def to_grayscale(page: Page) -> Page:
    """BT.601 luma conversion; grayscale pages pass through unchanged."""
    if page.channels == 1:
        return page
    weights = np.array([0.299, 0.587, 0.114])
    return Page(page.pixels @ weights)


# ---------------------------------------------------------------------------
# tiling

def split_patches(page, h, w) -> PatchGrid:
    """Tile a page into h x w patches, edge-replicating up to full multiples."""
    if h < 1 or w < 1:
        raise ValueError("patch dimensions must be >= 1")
    arr = page.pixels if isinstance(page, Page) else np.asarray(page, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"split_patches expects a 2-D page, got shape {arr.shape}")
    rows = math.ceil(arr.shape[0] / h)
    cols = math.ceil(arr.shape[1] / w)
    pad_bottom = rows * h - arr.shape[0]
    pad_right = cols * w - arr.shape[1]
    padded = np.pad(arr, ((0, pad_bottom), (0, pad_right)), mode="edge")
    patches = [
        padded[i * h : (i + 1) * h, j * w : (j + 1) * w].copy()
        for i in range(rows)
        for j in range(cols)
    ]
    return PatchGrid(patch=(h, w), grid=(rows, cols), pad=(pad_right, pad_bottom), patches=patches)


def assemble(grid: PatchGrid) -> np.ndarray:
    """Place patches back row-major and crop the recorded padding."""
    h, w = grid.patch
    rows, cols = grid.grid
    if len(grid.patches) != rows * cols:
        raise ValueError(f"grid needs {rows * cols} patches, has {len(grid.patches)}")
    canvas = np.empty((rows * h, cols * w))
    for idx, patch in enumerate(grid.patches):
        if patch is None:
            raise ValueError(f"missing patch at index {idx}")
        patch = np.asarray(patch)
        if patch.shape != (h, w):
            raise ValueError(f"patch {idx} has shape {patch.shape}, expected {(h, w)}")
        i, j = divmod(idx, cols)
        canvas[i * h : (i + 1) * h, j * w : (j + 1) * w] = patch
    pad_right, pad_bottom = grid.pad
    return canvas[: rows * h - pad_bottom, : cols * w - pad_right]


# ---------------------------------------------------------------------------
# dataset ingestion

def _assign_splits(stems, validation_fraction, seed):
    order = list(stems)
    rng = np.random.default_rng(np.random.SeedSequence([_SEED_SPLIT, seed]))
    rng.shuffle(order)
    n_val = int(round(len(order) * validation_fraction))
    val = set(order[:n_val])
    return {stem: ("validation" if stem in val else "train") for stem in stems}


def load_dataset(directory, role, validation_fraction=0.2, seed=0) -> Dataset:
    """Load ``<root>/images/*.pgm`` (+ ``gt/`` for sources) with a seeded split.

    Target datasets never pick up ground truth even if a gt directory exists;
    evaluation against target labels is a separate, post-hoc concern.
    """
    root = Path(directory)
    image_paths = sorted((root / "images").glob("*.pgm"))
    if not image_paths:
        raise FileNotFoundError(f"no PGM pages under {root / 'images'}")
    stems = [p.stem for p in image_paths]
    splits = _assign_splits(stems, validation_fraction, seed)

    records = []
    missing = []
    for path in image_paths:
        page = to_grayscale(read_pgm(path.read_bytes()))
        gt = None
        if role == "source":
            gt_path = root / "gt" / path.name
            if not gt_path.exists():
                missing.append(path.stem)
                continue
            gt_page = read_pgm(gt_path.read_bytes())
            if gt_page.pixels.shape != page.pixels.shape:
                raise ValueError(
                    f"page {path.stem!r}: gt size {gt_page.pixels.shape} "
                    f"!= image size {page.pixels.shape}"
                )
            gt = GroundTruth(gt_page.pixels >= GT_INK_THRESHOLD / 255.0)
        records.append(PageRecord(path.stem, page, gt, splits[path.stem]))
    if missing:
        raise FileNotFoundError(f"source pages without ground truth: {', '.join(missing)}")
    return Dataset(role=role, records=records)


def load_eval_masks(directory) -> dict:
    """Ground-truth masks from a dataset directory, keyed by stem (may be empty)."""
    out = {}
    for path in sorted(Path(directory, "gt").glob("*.pgm")):
        gt_page = read_pgm(path.read_bytes())
        out[path.stem] = GroundTruth(gt_page.pixels >= GT_INK_THRESHOLD / 255.0)
    return out


# ---------------------------------------------------------------------------
# synthetic fixtures

SYNTHETIC_KINDS = ("source", "target_near", "target_far")


def _paint_strokes(rng, shape, n_strokes, thickness_range):
    """Random-walk strokes rasterized as a boolean mask."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n_strokes):
        y = rng.uniform(0, h)
        x = rng.uniform(0, w)
        angle = rng.uniform(0, 2 * np.pi)
        steps = int(rng.integers(h // 3, h))
        half = int(rng.integers(*thickness_range))
        for _ in range(steps):
            yi, xi = int(y), int(x)
            if 0 <= yi < h and 0 <= xi < w:
                mask[max(0, yi - half) : yi + half, max(0, xi - half) : xi + half] = True
            angle += rng.normal(0, 0.25)
            y += np.sin(angle)
            x += np.cos(angle)
    return mask


def _synthetic_page(rng, shape, kind):
    """One (page, mask) pair for the given domain kind.

    The far target keeps ink darker than paper but collapses the contrast
    (mid-gray background) and adds heavy mirrored bleed-through ghosts, so a
    source-trained model drowns in false positives while the stroke geometry
    itself stays learnable.
    """
    mask = _paint_strokes(rng, shape, int(rng.integers(8, 14)), (1, 3))
    if kind == "source":
        bg, ink, noise = 0.87, 0.12, 0.04
    elif kind == "target_near":
        bg, ink, noise = 0.80, 0.18, 0.08
    elif kind == "target_far":
        bg, ink, noise = 0.45, 0.15, 0.05
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    page = np.full(shape, bg) + rng.normal(0, noise, shape)
    if kind == "target_far":
        # bleed-through ghosts: mirrored strokes that stay background in the mask
        ghost = _paint_strokes(rng, shape, int(rng.integers(6, 12)), (1, 3))[:, ::-1]
        page[ghost] = 0.30 + rng.normal(0, noise, shape)[ghost]
    page[mask] = ink + rng.normal(0, noise, shape)[mask]
    return np.clip(page, 0.0, 1.0), mask.astype(np.uint8)


def synthetic_domain_pairs(seed, kind, n_pages=8, page_size=(128, 128)):
    """Deterministic (stem, page array, mask) triplets for one domain."""
    kind_idx = SYNTHETIC_KINDS.index(kind)
    out = []
    for i in range(n_pages):
        rng = np.random.default_rng(np.random.SeedSequence([_SEED_SYNTH, seed, kind_idx, i]))
        page, mask = _synthetic_page(rng, page_size, kind)
        out.append((f"page{i:02d}", page, mask))
    return out


def make_synthetic_domains(seed, n_pages=8, page_size=(128, 128), validation_fraction=0.25):
    """Build the (source, target-near, target-far) fixture datasets.

    The source carries exact masks; the targets drop theirs (use
    ``synthetic_domain_pairs`` to regenerate masks for post-hoc evaluation).
    """
    datasets = []
    for kind in SYNTHETIC_KINDS:
        pairs = synthetic_domain_pairs(seed, kind, n_pages, page_size)
        role = "source" if kind == "source" else "target"
        splits = _assign_splits([stem for stem, _, _ in pairs], validation_fraction, seed)
        records = [
            PageRecord(
                stem,
                Page(page),
                GroundTruth(mask) if role == "source" else None,
                splits[stem],
            )
            for stem, page, mask in pairs
        ]
        datasets.append(Dataset(role=role, records=records))
    return tuple(datasets)


def write_synthetic_dirs(seed, out_dir, n_pages=8, page_size=(128, 128)):
    """Write the three fixture domains as dataset directories (gt included for
    all three; target gt exists on disk for evaluation only)."""
    out_root = Path(out_dir)
    for kind in SYNTHETIC_KINDS:
        for sub in ("images", "gt"):
            (out_root / kind / sub).mkdir(parents=True, exist_ok=True)
        for stem, page, mask in synthetic_domain_pairs(seed, kind, n_pages, page_size):
            (out_root / kind / "images" / f"{stem}.pgm").write_bytes(write_pgm(page))
            (out_root / kind / "gt" / f"{stem}.pgm").write_bytes(write_pgm(mask.astype(np.float64)))
    return [out_root / kind for kind in SYNTHETIC_KINDS]
