"""Shadow triplet ingestion (ISTD layout), train/test splits and PNG I/O."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MASK_THRESHOLD = 128
ISTD_TRAIN, ISTD_TEST = 1330, 540
FLAT_LAYOUTS = (("A", "B", "C"), ("shadow", "mask", "free"))


class ImageReadError(OSError):
    def __init__(self, path, reason: str):
        self.path = Path(path)
        super().__init__(f"{path}: {reason}")


@dataclass
class ShadowTriplet:
    shadow: np.ndarray  # (3, H, W) float32 in [0, 255]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    free: np.ndarray  # (3, H, W) float32 in [0, 255]
    id: str

    def __post_init__(self):
        hw = self.shadow.shape[1:]
        if self.mask.shape[1:] != hw or self.free.shape[1:] != hw:
            raise ContractError(
                f"triplet {self.id}: sizes differ (shadow {self.shadow.shape}, mask {self.mask.shape}, free {self.free.shape})"
            )


@dataclass(frozen=True)
class TripletFiles:
    shadow: Path
    mask: Path
    free: Path


@dataclass
class DatasetIndex:
    root: Path
    train_ids: list[str]
    test_ids: list[str]
    seed: int
    files: dict[str, TripletFiles] = field(repr=False, default_factory=dict)
    incomplete: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ContractError(f"train and test ids overlap: {sorted(overlap)[:5]}")

    @property
    def ids(self) -> list[str]:
        return self.train_ids + self.test_ids


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _collect(dirs: Sequence[Path], incomplete: dict[str, list[str]]) -> dict[str, TripletFiles]:
    found = [_stems(d) for d in dirs]
    complete = {}
    for stem in sorted(set().union(*found)):
        present = [d.name for d, f in zip(dirs, found) if stem in f]
        if len(present) == 3:
            complete[stem] = TripletFiles(*(f[stem] for f in found))
        else:
            incomplete[stem] = present
    return complete


def split_counts(total: int) -> tuple[int, int]:
    """Train/test sizes in the 1330:540 proportion (exact for 1870)."""
    n_train = int(round(total * ISTD_TRAIN / (ISTD_TRAIN + ISTD_TEST)))
    return n_train, total - n_train


def seeded_split(ids: Sequence[str], seed: int) -> tuple[list[str], list[str]]:
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train, _ = split_counts(len(ordered))
    shuffled = [ordered[i] for i in perm]
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])


def scan_istd(root: str | Path, seed: int = 0, layout: str = "auto") -> DatasetIndex:
    """Index every id present in all three of shadow / mask / shadow-free directories.

    ``layout="istd"`` expects ``<root>/<split>/<split>_{A,B,C}`` and keeps the
    on-disk split; ``"flat"`` expects ``<root>/{A,B,C}`` (or shadow/mask/free)
    and splits by seeded shuffle. ``"auto"`` picks whichever exists. Ids
    missing from any directory are excluded and listed in ``incomplete``.
    """
    root = Path(root)
    if not root.is_dir() or not any(root.iterdir()):
        raise ContractError(f"dataset root {root} is missing or empty")
    if layout == "auto":
        layout = "istd" if (root / "train" / "train_A").is_dir() or (root / "test" / "test_A").is_dir() else "flat"
    incomplete: dict[str, list[str]] = {}
    if layout == "istd":
        files: dict[str, TripletFiles] = {}
        split_ids = {}
        for split in ("train", "test"):
            base = root / split
            dirs = [base / f"{split}_{tag}" for tag in "ABC"]
            found = _collect(dirs, incomplete) if base.is_dir() else {}
            split_ids[split] = sorted(found)
            files.update(found)
        train, test = split_ids["train"], split_ids["test"]
    elif layout == "flat":
        names = next((n for n in FLAT_LAYOUTS if all((root / d).is_dir() for d in n)), None)
        if names is None:
            raise ContractError(f"{root}: expected subdirectories {FLAT_LAYOUTS[0]} or {FLAT_LAYOUTS[1]}")
        files = _collect([root / d for d in names], incomplete)
        train, test = seeded_split(list(files), seed)
    else:
        raise ContractError(f"unknown dataset layout {layout!r}")
    if not files:
        raise ContractError(f"{root}: no complete triplets found")
    for stem, present in incomplete.items():
        log.warning("excluding %s: present only in %s", stem, present or "none")
    return DatasetIndex(root, train, test, seed, files, incomplete)


# ---------------------------------------------------------------------------
# images


def read_image(path: str | Path, mode: str = "RGB") -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert(mode)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageReadError(path, f"cannot decode image ({exc})") from exc


def to_chw(im: Image.Image) -> np.ndarray:
    a = np.asarray(im, dtype=np.float32)
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1).copy()


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) >= MASK_THRESHOLD).astype(np.float32)


def _resize(im: Image.Image, size: tuple[int, int] | None) -> Image.Image:
    if size is None or (im.height, im.width) == tuple(size):
        return im
    h, w = size
    return im.resize((w, h), Image.BILINEAR)


def load_triplet(index: DatasetIndex, id: str, target_size: tuple[int, int] | None = None) -> ShadowTriplet:
    if id not in index.files:
        raise ContractError(f"id {id!r} is not in the dataset index")
    f = index.files[id]
    shadow, mask, free = read_image(f.shadow), read_image(f.mask, "L"), read_image(f.free)
    sizes = {shadow.size, mask.size, free.size}
    if len(sizes) != 1:
        raise ContractError(f"triplet {id}: image sizes differ {sorted(sizes)} ({f.shadow.parent.parent})")
    return ShadowTriplet(
        shadow=to_chw(_resize(shadow, target_size)),
        mask=binarize_mask(to_chw(_resize(mask, target_size))),
        free=to_chw(_resize(free, target_size)),
        id=id,
    )


def write_png(path: str | Path, image: np.ndarray) -> Path:
    """Write a (3, H, W), (1, H, W) or (H, W) array in [0, 255] as an 8-bit PNG."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    a = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path, format="PNG")
    return path


def read_png(path: str | Path, mode: str = "RGB") -> np.ndarray:
    return to_chw(read_image(path, mode))


def to_model_range(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def from_model_range(x: np.ndarray) -> np.ndarray:
    """Back to 8-bit values, clamping anything outside [-1, 1]."""
    y = (np.asarray(x, dtype=np.float32) + np.float32(1.0)) * np.float32(127.5)
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic data for tests and smoke runs


def synthetic_triplet(rng: np.random.Generator, size: tuple[int, int], id: str) -> ShadowTriplet:
    """Smooth colour field with a darkened rectangle as the shadow."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    free = np.empty((3, h, w))
    for c in range(3):
        a, b, phase = rng.uniform(0.5, 3.0, size=3)
        free[c] = 150 + 60 * np.sin(2 * np.pi * (a * xx + b * yy) / 2 + phase)
    free = np.clip(free, 0, 255)
    mask = np.zeros((1, h, w), dtype=np.float32)
    top, left = rng.integers(0, h // 2), rng.integers(0, w // 2)
    mh, mw = rng.integers(h // 4, h // 2 + 1), rng.integers(w // 4, w // 2 + 1)
    mask[0, top : top + mh, left : left + mw] = 1.0
    darkening = rng.uniform(0.35, 0.6, size=(3, 1, 1))
    shadow = free * np.where(mask > 0, darkening, 1.0)
    return ShadowTriplet(np.rint(shadow).astype(np.float32), mask, np.rint(free).astype(np.float32), id)


def synthetic_triplets(n: int, size: tuple[int, int] = (32, 32), seed: int = 0) -> list[ShadowTriplet]:
    rng = np.random.default_rng(seed)
    return [synthetic_triplet(rng, size, f"synth{i:04d}") for i in range(n)]


def write_triplets(root: str | Path, triplets: Sequence[ShadowTriplet], split: str | None = None) -> Path:
    """Write triplets as PNGs: ISTD split layout when ``split`` is given, flat A/B/C otherwise."""
    root = Path(root)
    for t in triplets:
        if split is None:
            dirs = [root / tag for tag in "ABC"]
        else:
            dirs = [root / split / f"{split}_{tag}" for tag in "ABC"]
        write_png(dirs[0] / f"{t.id}.png", t.shadow)
        write_png(dirs[1] / f"{t.id}.png", t.mask * 255)
        write_png(dirs[2] / f"{t.id}.png", t.free)
    return root
