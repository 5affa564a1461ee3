"""Dataset manifests, IO, preprocessing, fold splitting, synthetic corpora.

On-disk layout
--------------
2D:  root/images/<subject>_<slice>.png   root/masks/<subject>_<slice>.png
3D:  root/volumes/<subject>.nii[.gz]     root/masks/<subject>.nii[.gz]
     (raw fallback: <subject>.raw + <subject>.json sidecar with shape/dtype)

Images are 16-bit grayscale PNGs, masks 8-bit label PNGs. A manifest cache
(manifest.json) sits next to the data. All ordering is lexicographic by
(subject, slice index) so iteration is reproducible everywhere.
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError
from .nifti import read_nifti, write_nifti

# ---------------------------------------------------------------------------
# low-level IO
# ---------------------------------------------------------------------------

IMAGE_SCALE = 65535.0  # 16-bit grayscale


def write_image(path, arr: np.ndarray) -> None:
    """Store a [0,1] float image as 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((a * IMAGE_SCALE).round().astype(np.uint16)).save(path)


def read_image(path) -> np.ndarray:
    img = Image.open(path)
    a = np.asarray(img, dtype=np.float32)
    if img.mode in ("I;16", "I"):
        a = a / IMAGE_SCALE
    elif a.max() > 1.0:
        a = a / 255.0
    return a


def write_mask(path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def write_volume(path, arr: np.ndarray) -> None:
    """NIfTI when the suffix says so, otherwise raw float32 + JSON sidecar."""
    path = Path(path)
    if path.suffix in (".nii", ".gz"):
        write_nifti(path, arr)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(arr)
    path.write_bytes(a.astype("<f4").tobytes() if a.dtype.kind == "f"
                     else a.astype("<u1").tobytes())
    sidecar = {"shape": list(a.shape),
               "dtype": "float32" if a.dtype.kind == "f" else "uint8"}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def read_volume(path) -> np.ndarray:
    path = Path(path)
    if path.suffix in (".nii", ".gz"):
        return read_nifti(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    dtype = "<f4" if sidecar["dtype"] == "float32" else "<u1"
    arr = np.frombuffer(path.read_bytes(), dtype=dtype)
    return arr.reshape(sidecar["shape"]).copy()


# ---------------------------------------------------------------------------
# samples and manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SliceSample:
    image_path: str
    mask_path: str
    subject: str
    slice_index: int = 0


@dataclass(frozen=True)
class VolumeSample:
    volume_path: str
    mask_path: str
    subject: str
    depth: int = 0


@dataclass
class DatasetManifest:
    samples: list
    dims: int
    task: str = "binary"           # binary | multiclass
    num_classes: int = 1
    folds: Dict[str, int] = field(default_factory=dict)

    def subjects(self) -> List[str]:
        return sorted({s.subject for s in self.samples})

    def samples_for(self, fold: int, train: bool) -> list:
        if not self.folds:
            raise ContractError("manifest has no fold assignment; call make_folds")
        keep = ((lambda s: self.folds[s.subject] != fold) if train
                else (lambda s: self.folds[s.subject] == fold))
        return [s for s in self.samples if keep(s)]

    def to_json(self) -> str:
        rows = []
        for s in self.samples:
            if isinstance(s, SliceSample):
                rows.append(["slice", s.image_path, s.mask_path, s.subject,
                             s.slice_index])
            else:
                rows.append(["volume", s.volume_path, s.mask_path, s.subject,
                             s.depth])
        return json.dumps({"dims": self.dims, "task": self.task,
                           "num_classes": self.num_classes,
                           "folds": self.folds, "samples": rows},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        samples = []
        for kind, a, b, subject, extra in d["samples"]:
            if kind == "slice":
                samples.append(SliceSample(a, b, subject, extra))
            else:
                samples.append(VolumeSample(a, b, subject, extra))
        return cls(samples=samples, dims=d["dims"], task=d["task"],
                   num_classes=d["num_classes"], folds=dict(d["folds"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _subject_of(stem: str) -> Tuple[str, int]:
    if "_" in stem:
        head, tail = stem.rsplit("_", 1)
        if tail.isdigit():
            return head, int(tail)
    return stem, 0


def load_manifest(root, dims: int = 2, task: str = "binary",
                  num_classes: int = 1) -> DatasetManifest:
    """Scan the documented layout into a manifest, strictly paired."""
    root = Path(root)
    image_dir = root / ("images" if dims == 2 else "volumes")
    mask_dir = root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise ContractError(f"{root}: expected {image_dir.name}/ and masks/")
    samples = []
    entries = sorted(p for p in image_dir.iterdir() if not p.name.startswith("."))
    if dims == 2:
        for img in entries:
            mask = mask_dir / img.name
            if not mask.exists():
                raise ContractError(f"missing mask for {img.name}")
            subject, idx = _subject_of(img.stem)
            samples.append(SliceSample(str(img), str(mask), subject, idx))
        samples.sort(key=lambda s: (s.subject, s.slice_index))
    else:
        entries = [p for p in entries if not p.name.endswith(".json")]
        for vol in entries:
            mask = mask_dir / vol.name
            if not mask.exists():
                raise ContractError(f"missing mask for {vol.name}")
            subject, _ = _subject_of(vol.stem.replace(".nii", ""))
            samples.append(VolumeSample(str(vol), str(mask), subject))
        samples.sort(key=lambda s: s.subject)
    if not samples:
        raise ContractError(f"{root}: no samples found")
    return DatasetManifest(samples=samples, dims=dims, task=task,
                           num_classes=num_classes)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _resize(arr: torch.Tensor, extents: Sequence[int], is_mask: bool) -> torch.Tensor:
    # arr: (H,W) or (D,H,W); resize with batch/channel plumbing
    spatial = tuple(extents)
    if tuple(arr.shape) == spatial:
        return arr
    x = arr[None, None].float()
    if is_mask:
        mode = "nearest-exact"
    else:
        mode = "bilinear" if len(spatial) == 2 else "trilinear"
    kwargs = {} if is_mask else {"align_corners": False}
    return F.interpolate(x, size=spatial, mode=mode, **kwargs)[0, 0]


def preprocess(arr: np.ndarray, extents: Sequence[int],
               is_mask: bool = False) -> np.ndarray:
    """Resize to `extents` and (for images) min-max normalize per slice.

    Masks resize by nearest neighbor so label sets survive; images by
    (bi/tri)linear interpolation. A zero-intensity-range slice normalizes to
    all zeros with a warning instead of dividing by zero.
    """
    t = torch.from_numpy(np.asarray(arr).astype(np.float32, copy=True))
    if t.ndim != len(extents):
        raise ContractError(f"array rank {t.ndim} vs extents {tuple(extents)}")
    t = _resize(t, extents, is_mask)
    if is_mask:
        return t.round().numpy().astype(np.uint8)
    out = t.numpy().astype(np.float32)
    slices = out[None] if out.ndim == 2 else out
    for i, sl in enumerate(slices):
        lo, hi = float(sl.min()), float(sl.max())
        if hi - lo < 1e-12:
            warnings.warn(f"slice {i}: constant intensity, normalized to 0",
                          RuntimeWarning)
            sl[...] = 0.0
        else:
            sl -= lo
            sl /= hi - lo
    return out


def standardize_depth(volume: np.ndarray, target: int,
                      is_mask: bool = False) -> np.ndarray:
    """Resample the leading (depth) axis to `target` slices."""
    if target < 1:
        raise ContractError("target depth must be >= 1")
    vol = np.ascontiguousarray(volume)
    if vol.ndim != 3:
        raise ContractError(f"expected (depth, H, W), got {vol.shape}")
    d, h, w = vol.shape
    if d == target:
        return vol.copy()
    if d == 1:
        warnings.warn("single-slice volume replicated to target depth",
                      RuntimeWarning)
        return np.repeat(vol, target, axis=0)
    x = torch.from_numpy(vol).float()[None, None]
    if is_mask:
        out = F.interpolate(x, size=(target, h, w), mode="nearest-exact")
        return out[0, 0].numpy().astype(volume.dtype)
    out = F.interpolate(x, size=(target, h, w), mode="trilinear",
                        align_corners=False)
    return out[0, 0].numpy().astype(np.float32)


def make_folds(manifest: DatasetManifest, k: int = 5,
               seed: int = 0) -> DatasetManifest:
    """Assign every subject to one of k folds; sizes differ by at most one."""
    subjects = manifest.subjects()
    if k < 2:
        raise ContractError("need at least 2 folds")
    if k > len(subjects):
        raise ContractError(f"cannot split {len(subjects)} subjects into {k} folds")
    order = list(subjects)
    random.Random(seed).shuffle(order)
    folds = {subject: i % k for i, subject in enumerate(order)}
    return DatasetManifest(samples=list(manifest.samples), dims=manifest.dims,
                           task=manifest.task, num_classes=manifest.num_classes,
                           folds=folds)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n: int
    extents: Tuple[int, ...]
    num_classes: int = 1          # foreground classes; masks use labels 1..n
    seed: int = 0
    min_fraction: float = 0.01
    max_fraction: float = 0.40
    max_lesions: int = 3

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("need at least one sample")
        if len(self.extents) not in (2, 3):
            raise ConfigError("extents must be 2D or 3D")
        if not 0 <= self.min_fraction < self.max_fraction <= 1:
            raise ConfigError("bad mask fraction range")


def _smooth_background(rng: np.random.Generator, extents) -> np.ndarray:
    coarse_shape = tuple(max(2, e // 8) for e in extents)
    coarse = rng.normal(0.45, 0.12, size=coarse_shape).astype(np.float32)
    t = torch.from_numpy(coarse)[None, None]
    mode = "bilinear" if len(extents) == 2 else "trilinear"
    bg = F.interpolate(t, size=tuple(extents), mode=mode,
                       align_corners=False)[0, 0].numpy()
    bg += rng.normal(0.0, 0.02, size=tuple(extents)).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def _ellipsoid_mask(rng: np.random.Generator, extents) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(e, dtype=np.float32) for e in extents),
                        indexing="ij")
    center = [rng.uniform(0.25 * e, 0.75 * e) for e in extents]
    radii = [rng.uniform(0.08 * e, 0.28 * e) for e in extents]
    q = sum(((g - c) / max(r, 1.0)) ** 2 for g, c, r in zip(grids, center, radii))
    return (q <= 1.0).astype(np.uint8)


def _one_sample(rng: np.random.Generator, cfg: SynthConfig):
    for _ in range(64):
        mask = np.zeros(cfg.extents, dtype=np.uint8)
        bump = np.zeros(cfg.extents, dtype=np.float32)
        n_lesions = int(rng.integers(1, cfg.max_lesions + 1))
        for _ in range(n_lesions):
            label = int(rng.integers(1, cfg.num_classes + 1))
            shape = _ellipsoid_mask(rng, cfg.extents)
            mask[shape == 1] = label
            bump += shape * rng.uniform(0.35, 0.6)
        frac = float((mask > 0).mean())
        if cfg.min_fraction <= frac <= cfg.max_fraction:
            break
    else:
        raise ContractError("could not hit the configured mask fraction range")
    image = _smooth_background(rng, cfg.extents)
    sigma = 1.0 if len(cfg.extents) == 2 else (0.5, 1.0, 1.0)
    image = np.clip(image + gaussian_filter(bump, sigma=sigma), 0.0, 1.0)
    return image.astype(np.float32), mask


def synth_generate(root, cfg: SynthConfig) -> DatasetManifest:
    """Write a seeded synthetic corpus to disk and return its manifest.

    Lesions are blurred ellipses/ellipsoids on smooth random backgrounds;
    masks are the exact generator shapes, so ground truth is known by
    construction. The same seed always reproduces the same corpus.
    """
    root = Path(root)
    rng = np.random.default_rng(cfg.seed)
    dims = len(cfg.extents)
    task = "binary" if cfg.num_classes == 1 else "multiclass"
    for i in range(cfg.n):
        image, mask = _one_sample(rng, cfg)
        subject = f"case{i:03d}"
        if dims == 2:
            write_image(root / "images" / f"{subject}_000.png", image)
            write_mask(root / "masks" / f"{subject}_000.png", mask)
        else:
            write_volume(root / "volumes" / f"{subject}.nii.gz", image)
            write_volume(root / "masks" / f"{subject}.nii.gz", mask)
    manifest = load_manifest(root, dims=dims, task=task,
                             num_classes=cfg.num_classes)
    manifest.save(root / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# tensor plumbing for training
# ---------------------------------------------------------------------------


def load_pair(sample, extents: Sequence[int], depth: Optional[int] = None,
              binarize: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """Read one sample, preprocess, return (image, mask) tensors.

    2D: image (1,H,W) float in [0,1]; mask (1,H,W) float {0,1} for binary.
    3D: image (1,D,H,W); `depth` resamples the depth axis first.
    binarize=False keeps integer labels (for multi-class targets).
    """
    if isinstance(sample, SliceSample):
        img = preprocess(read_image(sample.image_path), extents)
        mask = preprocess(read_mask(sample.mask_path), extents, is_mask=True)
    else:
        raw = read_volume(sample.volume_path).astype(np.float32)
        raw_mask = read_volume(sample.mask_path).astype(np.float32)
        if depth is not None:
            raw = standardize_depth(raw, depth)
            raw_mask = standardize_depth(raw_mask, depth, is_mask=True)
        img = preprocess(raw, extents)
        mask = preprocess(raw_mask, extents, is_mask=True)
    image_t = torch.from_numpy(img)[None].float()
    if binarize:
        mask_t = torch.from_numpy((mask > 0).astype(np.float32))[None]
    else:
        mask_t = torch.from_numpy(mask.astype(np.float32))[None]
    return image_t, mask_t
