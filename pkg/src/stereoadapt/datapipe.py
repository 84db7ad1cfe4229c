"""Stereo dataset scanning, bicubic LR synthesis, patch sampling and augmentation.

Images are handled as float32 numpy arrays (H, W, C) in [0, 1]; batches are
torch tensors (B, C, H, W).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import re
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .common import ViewPair
from .errors import DecodeError, EmptyDataset, InvalidShape, PatchTooLarge

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
_LR_RE = re.compile(r"^(?P<stem>.+)_(?P<side>[LR])$")


# -- scanning -------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class PairDescriptor:
    id: str
    left: Path
    right: Path


class PairList(list):
    """Sorted pair descriptors plus the warnings raised while matching them."""

    def __init__(self, items=(), warnings=()):
        super().__init__(items)
        self.warnings = list(warnings)


def _check_decodable(path: Path):
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of types here
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def scan_pairs(root) -> PairList:
    """Match ``<stem>_L.<ext>``/``<stem>_R.<ext>`` files, or ``<stem>/hr0.png``/``hr1.png`` folders."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} is not a directory")
    sides: dict = {}
    for p in root.iterdir():
        if p.is_file() and p.suffix.lower() in IMAGE_EXTS:
            m = _LR_RE.match(p.stem)
            if m:
                sides.setdefault(m["stem"], {})[m["side"]] = p
        elif p.is_dir():
            for side, fname in (("L", "hr0"), ("R", "hr1")):
                for ext in IMAGE_EXTS:
                    cand = p / f"{fname}{ext}"
                    if cand.is_file():
                        sides.setdefault(p.name, {})[side] = cand
                        break
    if not sides:
        raise EmptyDataset(f"no stereo images found under {root}")
    pairs, warnings = [], []
    for stem in sorted(sides):
        found = sides[stem]
        if "L" in found and "R" in found:
            _check_decodable(found["L"])
            _check_decodable(found["R"])
            pairs.append(PairDescriptor(stem, found["L"], found["R"]))
        else:
            (only,) = found.values()
            msg = f"unmatched stereo view {only}"
            log.warning(msg)
            warnings.append(msg)
    return PairList(pairs, warnings)


def load_image(path) -> np.ndarray:
    """Decode 8-bit RGB and scale by 1/255."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path, img: np.ndarray):
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -- bicubic synthesis ------------------------------------------------------------

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(
        ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # symmetric padding: -1 -> 0, n -> n-1
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def resize_weights(n_in: int, scale: int) -> np.ndarray:
    """(n_in/scale, n_in) matrix of anti-aliased bicubic weights for integer downscaling."""
    n_out = n_in // scale
    width = 4.0 * scale
    u = (np.arange(n_out) + 0.5) * scale - 0.5
    left = np.floor(u - width / 2).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic((u[:, None] - idx) / scale) / scale
    w = w / w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), _reflect(idx, n_in).ravel()), w.ravel())
    return mat


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def synthesize_lr(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic (a=-0.5) anti-aliased downscale by an integer factor, clipped to [0, 1]."""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim not in (2, 3):
        raise InvalidShape(f"expected (H, W) or (H, W, C) image, got {hr.shape}")
    h, w = hr.shape[:2]
    if h % scale or w % scale or h < scale or w < scale:
        raise InvalidShape(f"image {h}x{w} is not divisible by scale {scale}")
    rows = resize_weights(h, scale)
    cols = resize_weights(w, scale)
    out = np.einsum("ih,hw...->iw...", rows, hr)
    out = np.einsum("jw,iw...->ij...", cols, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- samples and batches -----------------------------------------------------------

@dataclasses.dataclass
class StereoSample:
    hr: ViewPair
    lr: ViewPair
    id: str


def make_sample(left_hr: np.ndarray, right_hr: np.ndarray, scale: int, sample_id: str = "",
                lr: Optional[ViewPair] = None) -> StereoSample:
    if left_hr.shape != right_hr.shape:
        raise InvalidShape(f"{sample_id}: view shapes differ {left_hr.shape} vs {right_hr.shape}")
    hr = ViewPair(crop_to_multiple(left_hr, scale), crop_to_multiple(right_hr, scale))
    if lr is None:
        lr = hr.map(lambda im: synthesize_lr(im, scale))
    elif lr.left.shape[:2] != (hr.left.shape[0] // scale, hr.left.shape[1] // scale):
        raise InvalidShape(f"{sample_id}: LR size {lr.left.shape[:2]} != HR/{scale}")
    return StereoSample(hr, lr, sample_id)


def _find_lr(desc: PairDescriptor, scale: int) -> Optional[ViewPair]:
    """Benchmark LR files in an ``lr_x{scale}`` directory next to the HR root, if present."""
    if desc.left.name.startswith("hr"):
        lr_dir = desc.left.parent.parent.parent / f"lr_x{scale}" / desc.id
        left, right = lr_dir / "lr0.png", lr_dir / "lr1.png"
    else:
        lr_dir = desc.left.parent.parent / f"lr_x{scale}"
        left, right = lr_dir / desc.left.name, lr_dir / desc.right.name
    if left.is_file() and right.is_file():
        return ViewPair(load_image(left), load_image(right))
    return None


def load_dataset(root, scale: int, use_lr_files: bool = True) -> List[StereoSample]:
    pairs = scan_pairs(root)
    if not pairs:
        raise EmptyDataset(f"no complete stereo pairs under {root}")
    samples = []
    for desc in pairs:
        lr = _find_lr(desc, scale) if use_lr_files else None
        samples.append(make_sample(load_image(desc.left), load_image(desc.right), scale, desc.id, lr))
    return samples


@dataclasses.dataclass
class PatchSpec:
    """LR patch size; the HR patch is ``scale`` times larger (128x320 HR at x4)."""

    lr_height: int = 32
    lr_width: int = 80

    def __post_init__(self):
        if self.lr_height <= 0 or self.lr_width <= 0:
            raise InvalidShape(f"patch dims must be positive, got {self.lr_height}x{self.lr_width}")

    @classmethod
    def for_scale(cls, scale: int, hr_height: int = 128, hr_width: int = 320) -> "PatchSpec":
        return cls(hr_height // scale, hr_width // scale)

    def hr_size(self, scale: int):
        return self.lr_height * scale, self.lr_width * scale


@dataclasses.dataclass
class Augment:
    hflip: bool = True
    vflip: bool = True
    rgb_perm: bool = True


def hflip_swap(pair: ViewPair) -> ViewPair:
    """Mirror both views and swap them so disparity keeps its sign."""
    return ViewPair(pair.right[..., ::-1].copy(), pair.left[..., ::-1].copy())


def _to_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)))


def crop_sample(sample: StereoSample, spec: PatchSpec, scale: int, top: int, left: int):
    """LR/HR patches (C, h, w) cut at the same window in both views."""
    ph, pw = spec.lr_height, spec.lr_width
    lr = sample.lr.map(lambda im: _to_chw(im[top:top + ph, left:left + pw]))
    hr = sample.hr.map(lambda im: _to_chw(im[top * scale:(top + ph) * scale, left * scale:(left + pw) * scale]))
    return lr, hr


def augment_patch(lr: ViewPair, hr: ViewPair, rng: np.random.Generator, aug: Augment):
    if aug.hflip and rng.random() < 0.5:
        lr, hr = hflip_swap(lr), hflip_swap(hr)
    if aug.vflip and rng.random() < 0.5:
        lr = lr.map(lambda a: a[:, ::-1, :].copy())
        hr = hr.map(lambda a: a[:, ::-1, :].copy())
    if aug.rgb_perm:
        perm = rng.permutation(lr.left.shape[0])
        lr = lr.map(lambda a: a[perm].copy())
        hr = hr.map(lambda a: a[perm].copy())
    return lr, hr


def sample_training_batch(samples: Sequence[StereoSample], spec: PatchSpec, batch: int,
                          rng: np.random.Generator, scale: int, aug: Optional[Augment] = None):
    """Random aligned crops from random pairs; returns ``(lr ViewPair, hr ViewPair)`` of tensors."""
    if not samples:
        raise EmptyDataset("no training samples")
    aug = aug if aug is not None else Augment()
    for s in samples:
        h, w = s.lr.left.shape[:2]
        if h < spec.lr_height or w < spec.lr_width:
            raise PatchTooLarge(f"pair {s.id!r}: LR size {h}x{w} smaller than patch {spec.lr_height}x{spec.lr_width}")
    lrs_l, lrs_r, hrs_l, hrs_r = [], [], [], []
    for _ in range(batch):
        s = samples[int(rng.integers(len(samples)))]
        h, w = s.lr.left.shape[:2]
        top = int(rng.integers(h - spec.lr_height + 1))
        left = int(rng.integers(w - spec.lr_width + 1))
        lr, hr = augment_patch(*crop_sample(s, spec, scale, top, left), rng, aug)
        lrs_l.append(lr.left)
        lrs_r.append(lr.right)
        hrs_l.append(hr.left)
        hrs_r.append(hr.right)
    stack = lambda xs: torch.from_numpy(np.stack(xs))
    return ViewPair(stack(lrs_l), stack(lrs_r)), ViewPair(stack(hrs_l), stack(hrs_r))


class BatchStream:
    """Deterministic sequence of training batches; batch ``k`` uses RNG seeded by ``(seed, k)``.

    With ``workers > 0`` batches are prepared ahead on a thread pool; the emitted
    sequence does not depend on the worker count.
    """

    def __init__(self, samples, spec: PatchSpec, batch: int, scale: int, seed: int = 0,
                 aug: Optional[Augment] = None, workers: int = 0, prefetch: int = 4):
        self.samples = list(samples)
        self.spec = spec
        self.batch = batch
        self.scale = scale
        self.seed = seed
        self.aug = aug
        self.workers = workers
        self.prefetch = prefetch

    def make(self, k: int):
        rng = np.random.default_rng([self.seed, k])
        return sample_training_batch(self.samples, self.spec, self.batch, rng, self.scale, self.aug)

    def __iter__(self) -> Iterator:
        if self.workers <= 0:
            k = 0
            while True:
                yield self.make(k)
                k += 1
        with concurrent.futures.ThreadPoolExecutor(self.workers) as pool:
            pending = [pool.submit(self.make, k) for k in range(self.prefetch)]
            k = self.prefetch
            while True:
                fut = pending.pop(0)
                pending.append(pool.submit(self.make, k))
                k += 1
                yield fut.result()


def sample_to_tensors(sample: StereoSample):
    """Whole-image (1, C, H, W) tensors for evaluation: ``(lr ViewPair, hr ViewPair)``."""
    conv = lambda im: torch.from_numpy(_to_chw(im)).unsqueeze(0)
    return sample.lr.map(conv), sample.hr.map(conv)


# -- synthetic stereo data ------------------------------------------------------------

def _smooth_noise(rng, h, w, cells, channels=3):
    coarse = rng.random((cells + 3, cells + 3, channels))
    ys = np.linspace(1, cells + 1, h)
    xs = np.linspace(1, cells + 1, w)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx)


def synth_canvas(rng: np.random.Generator, height: int, width: int, detail: float = 1.0) -> np.ndarray:
    """Textured RGB canvas: smooth colour field, hard-edged shapes, fine stripes."""
    img = 0.25 + 0.5 * _smooth_noise(rng, height, width, cells=3)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(3, height / 3), rng.uniform(3, width / 4)
        colour = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[mask] = 0.4 * img[mask] + 0.6 * colour
    if detail > 0:
        for _ in range(int(rng.integers(2, 4))):
            freq = rng.uniform(0.15, 0.45)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            region = _smooth_noise(rng, height, width, cells=2, channels=1)[..., 0] > 0.55
            amp = detail * rng.uniform(0.06, 0.14)
            img[region] += amp * stripes[region, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_stereo_pair(rng: np.random.Generator, height: int, width: int, scale: int = 2,
                      max_disparity: int = 12, detail: float = 1.0):
    """Left/right HR views of one canvas, the right view shifted by an integer disparity.

    The disparity is never a multiple of ``scale``, so the two LR views sample
    the scene at different sub-pixel phases and each carries detail the other lacks.
    """
    choices = [d for d in range(1, max_disparity + 1) if d % scale]
    d = int(rng.choice(choices))
    canvas = synth_canvas(rng, height, width + d, detail)
    left = canvas[:, :width]
    right = canvas[:, d:d + width]
    return np.ascontiguousarray(left), np.ascontiguousarray(right), d


def synth_dataset(n: int, height: int, width: int, scale: int = 2, seed: int = 0,
                  max_disparity: int = 12, detail: float = 1.0) -> List[StereoSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        left, right, _ = synth_stereo_pair(rng, height, width, scale, max_disparity, detail)
        out.append(make_sample(left, right, scale, f"{i:04d}"))
    return out


def write_synthetic(root, n: int, height: int, width: int, scale: int = 2, seed: int = 0,
                    max_disparity: int = 12, detail: float = 1.0) -> List[Path]:
    """Write ``<id>_L.png``/``<id>_R.png`` pairs; returns the written paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    written = []
    for i in range(n):
        left, right, _ = synth_stereo_pair(rng, height, width, scale, max_disparity, detail)
        for side, img in (("L", left), ("R", right)):
            p = root / f"{i:04d}_{side}.png"
            save_image(p, img)
            written.append(p)
    return written
