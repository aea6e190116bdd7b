"""Synthetic dataset generation, loading, resizing, augmentation and batching.

Images are float32 arrays shaped ``[3, H, W]`` with values in ``[0, 1]``;
masks are uint8 arrays shaped ``[H, W]`` holding labels 0 (background),
1 (anterior lip) and 2 (posterior lip).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

NUM_CLASSES = 3
SIZE_MULTIPLE = 32
MIN_FOREGROUND_PIXELS = 50

# Named RNG streams derived from a single seed.
RNG_STREAMS = {"data": 0, "augment": 1, "init": 2}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, RNG_STREAMS[stream]])


def num_threads() -> int:
    value = os.environ.get("CROSSSEG_NUM_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


@dataclass
class LabeledSample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        check_image(self.image, self.id)
        check_mask(self.mask, self.id)
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(
                f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ in size"
            )


@dataclass
class UnlabeledSample:
    image: np.ndarray
    id: str

    def __post_init__(self):
        check_image(self.image, self.id)


@dataclass
class MixedBatch:
    labeled: list[LabeledSample]
    unlabeled: list[UnlabeledSample]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.labeled] + [s.id for s in self.unlabeled]


@dataclass
class SyntheticConfig:
    num_labeled: int = 4
    num_unlabeled: int = 16
    num_val: int = 4
    height: int = 64
    width: int = 64
    seed: int = 0
    noise_sigma: float = 0.1

    def validate(self) -> None:
        for name in ("num_labeled", "num_unlabeled", "num_val"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        check_size((self.height, self.width))
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class DatasetManifest:
    labeled: list[str] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    height: int | None = None
    width: int | None = None
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @property
    def total(self) -> int:
        return len(self.labeled) + len(self.unlabeled) + len(self.val)


def check_size(size: tuple[int, int]) -> None:
    h, w = size
    if h < SIZE_MULTIPLE or w < SIZE_MULTIPLE or h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise ValueError(
            f"image size {h}x{w} invalid: both sides must be >= {SIZE_MULTIPLE} "
            f"and divisible by {SIZE_MULTIPLE}"
        )


def check_image(image: np.ndarray, name: str = "image") -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"{name}: expected image of shape [3, H, W], got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError(f"{name}: image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name}: image values must lie in [0, 1]")


def check_mask(mask: np.ndarray, name: str = "mask") -> None:
    if mask.ndim != 2:
        raise ValueError(f"{name}: expected mask of shape [H, W], got {mask.shape}")
    bad = np.setdiff1d(np.unique(mask), np.arange(NUM_CLASSES))
    if bad.size:
        raise ValueError(f"{name}: mask contains labels {bad.tolist()} outside {{0, 1, 2}}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _draw_regions(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Anterior lip: ellipse in the upper half. Posterior lip: crescent in the lower half."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    half = h / 2.0
    for _ in range(100):
        mask = np.zeros((h, w), dtype=np.uint8)

        ry = rng.uniform(0.12, 0.2) * h
        rx = rng.uniform(0.2, 0.32) * w
        cy = rng.uniform(0.24, 0.28) * h
        cx = rng.uniform(0.4, 0.6) * w
        upper = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(-0.3, 0.3)) & (yy < half - 1)
        mask[upper] = 1

        ry2 = rng.uniform(0.14, 0.2) * h
        rx2 = rng.uniform(0.25, 0.35) * w
        cy2 = rng.uniform(0.7, 0.76) * h
        cx2 = rng.uniform(0.4, 0.6) * w
        angle2 = rng.uniform(-0.3, 0.3)
        outer = _ellipse(yy, xx, cy2, cx2, ry2, rx2, angle2)
        bite = _ellipse(yy, xx, cy2 + rng.uniform(0.3, 0.5) * ry2, cx2, ry2 * 0.8, rx2 * 0.8, angle2)
        lower = outer & ~bite & (yy > half + 1)
        mask[lower] = 2

        counts = np.bincount(mask.ravel(), minlength=NUM_CLASSES)
        if counts[1] >= MIN_FOREGROUND_PIXELS and counts[2] >= MIN_FOREGROUND_PIXELS:
            return mask
    raise RuntimeError(f"could not draw regions with >= {MIN_FOREGROUND_PIXELS} pixels at {h}x{w}")


def synthesize_sample(seed: int, index: int, height: int, width: int, noise_sigma: float):
    """Render one (image, mask) pair; a pure function of its arguments."""
    rng = np.random.default_rng([seed, index])
    mask = _draw_regions(rng, height, width)
    clean = 0.2 + 0.4 * (mask > 0).astype(np.float64)
    clean = ndimage.gaussian_filter(clean, sigma=1.0)
    gray = np.clip(clean + rng.normal(0.0, noise_sigma, size=clean.shape), 0.0, 1.0)
    image = np.repeat(gray[None].astype(np.float32), 3, axis=0)
    return image, mask


def _write_png_image(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.transpose(image, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _write_png_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def generate_synthetic_dataset(cfg: SyntheticConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write a synthetic dataset to ``out_dir`` and return its manifest.

    Unlabeled samples are written without masks. Output is byte-identical for
    identical configs.
    """
    cfg.validate()
    out = Path(out_dir)
    splits = [("labeled", "lab", cfg.num_labeled), ("unlabeled", "unl", cfg.num_unlabeled), ("val", "val", cfg.num_val)]
    manifest = DatasetManifest(height=cfg.height, width=cfg.width, seed=cfg.seed)
    jobs = []
    index = 0
    for split, prefix, count in splits:
        for i in range(count):
            sample_id = f"{prefix}_{i:04d}"
            getattr(manifest, split).append(sample_id)
            jobs.append((sample_id, index, split != "unlabeled"))
            index += 1
    if not jobs:
        return manifest

    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    def render(job):
        sample_id, idx, with_mask = job
        image, mask = synthesize_sample(cfg.seed, idx, cfg.height, cfg.width, cfg.noise_sigma)
        _write_png_image(out / "images" / f"{sample_id}.png", image)
        if with_mask:
            _write_png_mask(out / "masks" / f"{sample_id}.png", mask)

    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        list(pool.map(render, jobs))
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        arr = np.asarray(im)
    bad = np.setdiff1d(np.unique(arr), np.arange(NUM_CLASSES))
    if bad.size:
        raise ValueError(f"mask {path} contains labels {bad.tolist()} outside {{0, 1, 2}}")
    return arr.astype(np.uint8)


def read_manifest(root: str | os.PathLike) -> DatasetManifest | None:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    return DatasetManifest(**data)


def _load_labeled(root: Path, sample_id: str) -> LabeledSample:
    image_path = root / "images" / f"{sample_id}.png"
    mask_path = root / "masks" / f"{sample_id}.png"
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if mask.shape != image.shape[1:]:
        raise ValueError(f"{mask_path}: mask shape {mask.shape} does not match image {image.shape[1:]}")
    return LabeledSample(image=image, mask=mask, id=sample_id)


def load_dataset(root: str | os.PathLike) -> tuple[list[LabeledSample], list[UnlabeledSample]]:
    """Load the labeled and unlabeled training pools of a dataset directory.

    With a manifest the ``labeled``/``unlabeled`` splits are used; without one,
    every image with a matching mask is labeled and the rest are unlabeled.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    manifest = read_manifest(root)
    if manifest is not None:
        labeled_ids, unlabeled_ids = sorted(manifest.labeled), sorted(manifest.unlabeled)
    else:
        images = root / "images"
        ids = sorted(p.stem for p in images.glob("*.png")) if images.is_dir() else []
        labeled_ids = [i for i in ids if (root / "masks" / f"{i}.png").exists()]
        unlabeled_ids = [i for i in ids if i not in set(labeled_ids)]
    labeled = [_load_labeled(root, i) for i in labeled_ids]
    unlabeled = [UnlabeledSample(read_image(root / "images" / f"{i}.png"), i) for i in unlabeled_ids]
    return labeled, unlabeled


def load_split(root: str | os.PathLike, split: str) -> list[LabeledSample]:
    """Load a labeled evaluation split (e.g. ``val``) named in the manifest."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    manifest = read_manifest(root)
    if manifest is None:
        raise FileNotFoundError(f"{root} has no manifest.json")
    ids = getattr(manifest, split, None)
    if ids is None:
        raise KeyError(f"manifest in {root} has no split {split!r}")
    return [_load_labeled(root, i) for i in sorted(ids)]


# ---------------------------------------------------------------------------
# geometry and augmentation
# ---------------------------------------------------------------------------

def resize_sample(image: np.ndarray, mask: np.ndarray | None, target: tuple[int, int]):
    """Bilinear resize for the image, nearest-neighbour for the mask."""
    check_size(target)
    target = (int(target[0]), int(target[1]))
    if image.shape[1:] == target:
        return image.copy(), None if mask is None else mask.copy()
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    img = F.interpolate(img, size=target, mode="bilinear", align_corners=False)[0]
    out_image = img.clamp_(0.0, 1.0).numpy()
    out_mask = None
    if mask is not None:
        m = torch.from_numpy(mask.astype(np.float32))[None, None]
        out_mask = F.interpolate(m, size=target, mode="nearest")[0, 0].numpy().astype(np.uint8)
    return out_image, out_mask


def rotation_source_coords(shape: tuple[int, int], angle_deg: float) -> np.ndarray:
    """Source (row, col) coordinates sampled by each output pixel under a rotation about the centre."""
    h, w = shape
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_y = c * dy - s * dx + cy
    src_x = s * dy + c * dx + cx
    return np.stack([src_y, src_x])


def rotate_pair(image: np.ndarray, mask: np.ndarray, angle_deg: float):
    if angle_deg == 0.0:
        return image.copy(), mask.copy()
    h, w = mask.shape
    coords = rotation_source_coords((h, w), angle_deg)
    out_image = np.stack([
        ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0) for ch in image
    ]).astype(np.float32)

    iy = np.floor(coords[0] + 0.5).astype(np.int64)
    ix = np.floor(coords[1] + 0.5).astype(np.int64)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out_mask = np.zeros_like(mask)
    out_mask[inside] = mask[iy[inside], ix[inside]]
    return out_image, out_mask


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 20.0
    p_brightness_contrast: float = 0.3
    p_blur: float = 0.3
    p_noise: float = 0.3
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.2)
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    noise_sigma: tuple[float, float] = (0.01, 0.05)


@dataclass
class AugmentPlan:
    angle: float = 0.0
    brightness: float | None = None
    contrast: float | None = None
    blur_sigma: float | None = None
    noise_sigma: float | None = None


def draw_plan(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentPlan:
    # Draw order is part of the reproducibility contract.
    plan = AugmentPlan(angle=float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)))
    if rng.random() < cfg.p_brightness_contrast:
        plan.brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
        plan.contrast = float(rng.uniform(*cfg.contrast))
    if rng.random() < cfg.p_blur:
        plan.blur_sigma = float(rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.p_noise:
        plan.noise_sigma = float(rng.uniform(*cfg.noise_sigma))
    return plan


def apply_plan(sample: LabeledSample, plan: AugmentPlan, rng: np.random.Generator) -> LabeledSample:
    image, mask = rotate_pair(sample.image, sample.mask, plan.angle)
    if plan.brightness is not None:
        image = image * plan.contrast + plan.brightness
    if plan.blur_sigma is not None:
        image = np.stack([ndimage.gaussian_filter(ch, plan.blur_sigma) for ch in image])
    if plan.noise_sigma is not None:
        image = image + rng.normal(0.0, plan.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledSample(image=image, mask=mask, id=sample.id)


def augment_labeled(sample: LabeledSample, rng: np.random.Generator,
                    cfg: AugmentConfig | None = None) -> LabeledSample:
    """Rotate, then brightness/contrast, blur and noise, each behind its own gate."""
    cfg = cfg or AugmentConfig()
    plan = draw_plan(rng, cfg)
    return apply_plan(sample, plan, rng)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class _CyclingPool:
    """Index pool reshuffled every time it is exhausted."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def take(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.size).tolist()
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return out

    def state_dict(self) -> dict:
        return {"order": list(self.order), "pos": self.pos, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.order = list(state["order"])
        self.pos = state["pos"]
        self.rng.bit_generator.state = state["rng"]


class BatchComposer:
    """Infinite, seeded stream of :class:`MixedBatch` with ``b_L`` labeled and ``b_U`` unlabeled samples.

    Labeled and unlabeled pools are shuffled independently and reshuffled on
    exhaustion. Augmentation touches labeled samples only. The full iterator
    state is checkpointable via :meth:`state_dict`.
    """

    def __init__(self, labeled, unlabeled, b_L: int = 2, b_U: int = 6, seed: int = 0,
                 augment: AugmentConfig | None = None):
        if b_L < 1:
            raise ValueError(f"b_L must be >= 1, got {b_L}")
        if b_U < 0:
            raise ValueError(f"b_U must be >= 0, got {b_U}")
        if not labeled:
            raise ValueError("labeled pool is empty")
        if b_U > 0 and not unlabeled:
            raise ValueError(f"b_U={b_U} but the unlabeled pool is empty")
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled)
        self.b_L, self.b_U = b_L, b_U
        self.augment = augment
        data_rng = stream_rng(seed, "data")
        lab_seed, unl_seed = data_rng.integers(0, 2**63, size=2)
        self._lab = _CyclingPool(len(self.labeled), np.random.default_rng(lab_seed))
        self._unl = _CyclingPool(len(self.unlabeled), np.random.default_rng(unl_seed))
        self._aug_rng = stream_rng(seed, "augment")

    def __iter__(self) -> Iterator[MixedBatch]:
        return self

    def __next__(self) -> MixedBatch:
        lab = [self.labeled[i] for i in self._lab.take(self.b_L)]
        if self.augment is not None:
            lab = [augment_labeled(s, self._aug_rng, self.augment) for s in lab]
        unl = [self.unlabeled[i] for i in self._unl.take(self.b_U)] if self.b_U else []
        return MixedBatch(labeled=lab, unlabeled=unl)

    def state_dict(self) -> dict:
        return {
            "labeled": self._lab.state_dict(),
            "unlabeled": self._unl.state_dict(),
            "augment_rng": self._aug_rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        self._lab.load_state_dict(state["labeled"])
        self._unl.load_state_dict(state["unlabeled"])
        self._aug_rng.bit_generator.state = state["augment_rng"]


def compose_batches(labeled, unlabeled, b_L: int = 2, b_U: int = 6, seed: int = 0,
                    augment: AugmentConfig | None = None) -> BatchComposer:
    return BatchComposer(labeled, unlabeled, b_L, b_U, seed, augment)


def batch_to_tensors(batch: MixedBatch, device="cpu", dtype=torch.float32):
    """Stack a batch into ``(images [B,3,H,W], labeled masks [b_L,H,W])``; labeled images come first."""
    images = [s.image for s in batch.labeled] + [s.image for s in batch.unlabeled]
    x = torch.from_numpy(np.stack(images)).to(device=device, dtype=dtype)
    y = torch.from_numpy(np.stack([s.mask for s in batch.labeled]).astype(np.int64)).to(device)
    return x, y
