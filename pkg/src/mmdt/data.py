"""Dataset ingestion, patching, splitting and the synthetic recapture channel.

Images on this side of the package are numpy arrays of shape (H, W, 3) with
values in [0, 1]. Network code converts them with :func:`to_tensor`.
"""

from __future__ import annotations

import dataclasses
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .errors import IngestError, ParamError, PatchError, SplitError

GENUINE = "genuine"
RECAPTURED = "recaptured"
LABELS = (GENUINE, RECAPTURED)
IMAGE_SUFFIXES = (".png", ".bmp")
PATCH_SIDE = 224


def label_index(label) -> int:
    """Map a label (string or 0/1) to 0 = genuine, 1 = recaptured."""
    if isinstance(label, str):
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        return LABELS.index(label)
    value = int(label)
    if value not in (0, 1):
        raise ValueError(f"unknown label {label!r}")
    return value


@dataclass
class ManifestEntry:
    image_ref: str
    label: str
    domain_tag: str = ""
    # In-memory pixels for synthetic data; None means read image_ref from disk.
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass
class DatasetManifest:
    entries: list
    seed: int = 0
    root: Optional[str] = None
    rejects: list = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise IngestError("manifest has no entries")
        seen = set()
        for e in self.entries:
            if e.label not in LABELS:
                raise IngestError(f"bad label {e.label!r} for {e.image_ref}")
            if e.image_ref in seen:
                raise IngestError(f"duplicate image_ref {e.image_ref}")
            seen.add(e.image_ref)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def count(self, label: str) -> int:
        return sum(e.label == label for e in self.entries)

    def load_image(self, entry: ManifestEntry) -> np.ndarray:
        if entry.image is not None:
            return entry.image
        path = Path(entry.image_ref)
        if self.root is not None and not path.is_absolute():
            path = Path(self.root) / path
        return read_image(path)

    def save(self, path) -> None:
        """Write ``<relative_path>\\t<label>\\t<domain_tag>`` lines."""
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(f"{e.image_ref}\t{e.label}\t{e.domain_tag}\n")

    @classmethod
    def load(cls, path, root=None, seed: int = 0) -> "DatasetManifest":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise IngestError(f"{path}:{lineno}: expected 3 tab-separated fields")
                entries.append(ManifestEntry(*parts))
        if root is None:
            root = str(Path(path).parent)
        return cls(entries, seed=seed, root=str(root))


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) arrays -> (B, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (..., H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor` for a single (3, H, W) or (1, 3, H, W) tensor."""
    t = tensor.detach().cpu()
    if t.ndim == 4:
        t = t[0]
    return t.numpy().transpose(1, 2, 0)


def ingest_dataset(root_dir, domain_tag: Optional[str] = None) -> DatasetManifest:
    """Enumerate ``genuine/`` and ``recaptured/`` under ``root_dir``.

    Unreadable or empty files are collected in ``manifest.rejects`` as
    ``(relative_path, reason)`` tuples rather than dropped silently.
    """
    root = Path(root_dir)
    tag = domain_tag if domain_tag is not None else root.name
    entries, rejects = [], []
    for label in LABELS:
        sub = root / label
        if not sub.is_dir():
            raise IngestError(f"missing subdirectory {sub}")
        for path in sorted(sub.iterdir(), key=lambda p: p.name):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            rel = f"{label}/{path.name}"
            if path.stat().st_size == 0:
                rejects.append((rel, "zero-size file"))
                continue
            try:
                with Image.open(path) as im:
                    im.verify()
            except Exception as exc:  # PIL raises a zoo of types here
                rejects.append((rel, f"unreadable: {exc}"))
                continue
            entries.append(ManifestEntry(rel, label, tag))
    if not entries:
        raise IngestError(f"no readable images under {root}")
    return DatasetManifest(entries, root=str(root), rejects=rejects)


def _grid_origins(extent: int, size: int, snap: bool) -> list:
    origins = list(range(0, extent - size + 1, size))
    if snap and extent % size:
        origins.append(extent - size)
    return origins


def patch_origins(height: int, width: int, size: int = PATCH_SIDE, mode: str = "train") -> list:
    """Row-major list of (top, left) patch corners."""
    if mode not in ("train", "eval"):
        raise ParamError(f"mode must be 'train' or 'eval', got {mode!r}")
    if height < size or width < size:
        raise PatchError(f"image {height}x{width} smaller than patch side {size}")
    snap = mode == "eval"
    return [(y, x) for y in _grid_origins(height, size, snap) for x in _grid_origins(width, size, snap)]


def extract_patches(image: np.ndarray, size: int = PATCH_SIDE, mode: str = "train") -> list:
    """Cut ``image`` into size x size patches.

    train: non-overlapping grid, remainders discarded.
    eval: same grid plus patches snapped to the right/bottom edges.
    """
    h, w = image.shape[:2]
    return [image[y:y + size, x:x + size].copy() for y, x in patch_origins(h, w, size, mode)]


@dataclass(frozen=True)
class RecaptureParams:
    blur_sigma1: float = 0.0
    dither_blend: float = 0.0
    dither_cell: int = 2
    color_gain: tuple = (1.0, 1.0, 1.0)
    color_offset: tuple = (0.0, 0.0, 0.0)
    blur_sigma2: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("blur_sigma1", "blur_sigma2", "noise_std"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ParamError(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 <= self.dither_blend <= 1.0:
            raise ParamError(f"dither_blend must lie in [0, 1], got {self.dither_blend}")
        if self.dither_cell not in (2, 4, 8):
            raise ParamError(f"dither_cell must be 2, 4 or 8, got {self.dither_cell}")
        if len(self.color_gain) != 3 or len(self.color_offset) != 3:
            raise ParamError("color_gain and color_offset must have 3 components")
        if not all(math.isfinite(v) for v in (*self.color_gain, *self.color_offset)):
            raise ParamError("color map must be finite")


def bayer_matrix(n: int) -> np.ndarray:
    """Integer Bayer index matrix of side n (a power of two)."""
    if n < 1 or n & (n - 1):
        raise ParamError(f"Bayer size must be a power of two, got {n}")
    m = np.zeros((1, 1), dtype=np.int64)
    while m.shape[0] < n:
        m = np.block([[4 * m, 4 * m + 2], [4 * m + 3, 4 * m + 1]])
    return m


def bayer_thresholds(n: int) -> np.ndarray:
    return (bayer_matrix(n) + 0.5) / (n * n)


def ordered_dither(image: np.ndarray, cell: int) -> np.ndarray:
    """Binary per-channel halftone: 1 where the pixel exceeds the tiled threshold."""
    h, w = image.shape[:2]
    t = bayer_thresholds(cell)
    tiled = np.tile(t, (h // cell + 1, w // cell + 1))[:h, :w]
    return (image > tiled[..., None]).astype(image.dtype)


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return image
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect")


def simulate_recapture(genuine: np.ndarray, params: RecaptureParams) -> np.ndarray:
    """Blur, halftone, colour-shift, reblur and add noise to a clean image."""
    params.validate()
    img = np.asarray(genuine)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParamError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ParamError("image values must lie in [0, 1]")
    out_dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    x = img.astype(np.float64)

    x = _blur(x, params.blur_sigma1)
    if params.dither_blend > 0:
        d = ordered_dither(x, params.dither_cell)
        x = (1.0 - params.dither_blend) * x + params.dither_blend * d
    gain = np.asarray(params.color_gain, dtype=np.float64)
    offset = np.asarray(params.color_offset, dtype=np.float64)
    if np.any(gain != 1.0) or np.any(offset != 0.0):
        x = np.clip(x * gain + offset, 0.0, 1.0)
    x = _blur(x, params.blur_sigma2)
    if params.noise_std > 0:
        rng = np.random.default_rng(params.seed)
        x = x + rng.normal(0.0, params.noise_std, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(out_dtype)


def _allocate(n: int, ratios: Sequence[float]) -> list:
    """Largest-remainder apportionment of n items to the given ratios."""
    raw = [n * r for r in ratios]
    counts = [int(math.floor(v)) for v in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_manifest(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Label-stratified, seeded split into len(ratios) disjoint manifests."""
    ratios = tuple(float(r) for r in ratios)
    if not ratios or any(not r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be positive and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in ratios]
    for label in LABELS:
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        if not idx:
            continue
        if len(idx) < len(ratios):
            raise SplitError(f"class {label!r} has {len(idx)} entries for {len(ratios)} parts")
        shuffled = [idx[j] for j in rng.permutation(len(idx))]
        start = 0
        for k, c in enumerate(_allocate(len(idx), ratios)):
            parts[k].extend(shuffled[start:start + c])
            start += c
    out = []
    for p in parts:
        if not p:
            raise SplitError("split produced an empty part")
        out.append(DatasetManifest([manifest.entries[i] for i in sorted(p)], seed=seed, root=manifest.root))
    return tuple(out)


# --- synthetic desk data -------------------------------------------------

_GLYPHS = string.ascii_letters + string.digits + "   .,:-/"


def render_document(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a card-like document (header band, photo box, text lines, rules, stamp)."""
    ss = 2
    H, W = height * ss, width * ss
    bg = tuple(int(v) for v in rng.integers(228, 256, size=3))
    canvas = Image.new("RGB", (W, H), bg)
    draw = ImageDraw.Draw(canvas)

    band_h = int(H * rng.uniform(0.08, 0.18))
    band = tuple(int(v) for v in rng.integers(20, 200, size=3))
    draw.rectangle([0, 0, W, band_h], fill=band)
    font = ImageFont.load_default(size=int(band_h * 0.55))
    title = "".join(rng.choice(list(string.ascii_uppercase), size=int(rng.integers(6, 14))))
    draw.text((int(W * 0.05), int(band_h * 0.2)), title, fill=(250, 250, 250), font=font)

    # photo box: smooth low-frequency field
    pw, ph = int(W * rng.uniform(0.18, 0.3)), int(H * rng.uniform(0.25, 0.4))
    px, py = int(rng.integers(W // 30, W - pw - W // 30)), int(rng.integers(band_h + 4, max(band_h + 5, H - ph - 4)))
    yy, xx = np.mgrid[0:ph, 0:pw] / max(ph, pw)
    photo = np.stack(
        [0.5 + 0.25 * np.sin(2 * np.pi * (rng.uniform(0.5, 2) * xx + rng.uniform(0.5, 2) * yy) + rng.uniform(0, 6))
         for _ in range(3)], axis=-1)
    canvas.paste(Image.fromarray(np.uint8(np.clip(photo, 0, 1) * 255)), (px, py))

    ink = tuple(int(v) for v in rng.integers(0, 70, size=3))
    y = band_h + int(rng.integers(6, 20))
    while y < H - 20:
        size = int(rng.integers(14, 30))
        line_font = ImageFont.load_default(size=size)
        x0 = int(W * rng.uniform(0.03, 0.1))
        if px - 10 < x0 < px + pw and py - size < y < py + ph:
            x0 = px + pw + 12
        text = "".join(rng.choice(list(_GLYPHS), size=int(rng.integers(8, 40))))
        draw.text((x0, y), text, fill=ink, font=line_font)
        if rng.random() < 0.15:
            draw.line([(x0, y + size + 3), (W - x0, y + size + 3)], fill=ink, width=2)
        y += size + int(rng.integers(6, 18))

    if rng.random() < 0.6:
        r = int(min(W, H) * rng.uniform(0.08, 0.14))
        cx, cy = int(rng.integers(r, W - r)), int(rng.integers(r, H - r))
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=(200, 30, 40), width=4)

    small = canvas.resize((width, height), Image.Resampling.LANCZOS)
    return np.asarray(small, dtype=np.float32) / np.float32(255.0)


@dataclass(frozen=True)
class RecaptureRanges:
    """Uniform ranges from which per-image RecaptureParams are drawn."""

    blur_sigma1: tuple = (0.5, 1.0)
    dither_blend: tuple = (0.3, 0.55)
    dither_cells: tuple = (2, 4)
    color_gain: tuple = (0.92, 1.04)
    color_offset: tuple = (-0.04, 0.04)
    blur_sigma2: tuple = (0.3, 0.6)
    noise_std: tuple = (0.004, 0.012)

    def sample(self, rng: np.random.Generator) -> RecaptureParams:
        return RecaptureParams(
            blur_sigma1=float(rng.uniform(*self.blur_sigma1)),
            dither_blend=float(rng.uniform(*self.dither_blend)),
            dither_cell=int(rng.choice(self.dither_cells)),
            color_gain=tuple(float(v) for v in rng.uniform(*self.color_gain, size=3)),
            color_offset=tuple(float(v) for v in rng.uniform(*self.color_offset, size=3)),
            blur_sigma2=float(rng.uniform(*self.blur_sigma2)),
            noise_std=float(rng.uniform(*self.noise_std)),
            seed=int(rng.integers(0, 2**31 - 1)),
        )


# Held-out channel: heavier blur, weaker/coarser halftone than the default ranges.
SHIFTED_RANGES = RecaptureRanges(
    blur_sigma1=(0.7, 1.3),
    dither_blend=(0.25, 0.45),
    dither_cells=(2, 4, 8),
    color_gain=(0.88, 1.06),
    color_offset=(-0.06, 0.05),
    blur_sigma2=(0.4, 0.75),
    noise_std=(0.006, 0.016),
)


def make_synthetic_dataset(n_per_class: int, seed: int, size=(PATCH_SIDE, PATCH_SIDE),
                           ranges: RecaptureRanges = RecaptureRanges(),
                           domain_tag: str = "synth") -> DatasetManifest:
    """In-memory dataset of rendered genuine documents and simulated recaptures.

    Recaptured images are produced from their own rendered documents, so no
    genuine/recaptured pair shares content.
    """
    if n_per_class < 1:
        raise ParamError("n_per_class must be >= 1")
    h, w = size
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_per_class):
        img = render_document(h, w, rng)
        entries.append(ManifestEntry(f"{GENUINE}/{domain_tag}_{i:05d}.png", GENUINE, domain_tag, img))
    for i in range(n_per_class):
        doc = render_document(h, w, rng)
        img = simulate_recapture(doc, ranges.sample(rng))
        entries.append(ManifestEntry(f"{RECAPTURED}/{domain_tag}_{i:05d}.png", RECAPTURED, domain_tag, img))
    return DatasetManifest(entries, seed=seed)


def write_dataset(manifest: DatasetManifest, out_dir) -> Path:
    """Materialize an in-memory manifest in the on-disk ``genuine/ recaptured/`` layout."""
    out = Path(out_dir)
    for label in LABELS:
        (out / label).mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        write_image(out / e.image_ref, manifest.load_image(e))
    on_disk = DatasetManifest([dataclasses.replace(e, image=None) for e in manifest.entries],
                              seed=manifest.seed, root=str(out))
    on_disk.save(out / "manifest.tsv")
    return out


def manifest_patches(manifest: DatasetManifest, mode: str = "train", size: int = PATCH_SIDE):
    """Flatten a manifest into (patches array (P, size, size, 3), labels (P,), owner index (P,))."""
    patches, labels, owners = [], [], []
    for i, e in enumerate(manifest.entries):
        for p in extract_patches(manifest.load_image(e), size, mode):
            patches.append(p.astype(np.float32, copy=False))
            labels.append(label_index(e.label))
            owners.append(i)
    return np.stack(patches), np.asarray(labels, dtype=np.int64), np.asarray(owners, dtype=np.int64)
