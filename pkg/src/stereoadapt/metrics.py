"""PSNR/SSIM and the stereo benchmark protocols (left view only, or mean of both views)."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .common import ViewPair
from .datapipe import StereoSample, sample_to_tensors
from .errors import EmptyDataset, InvalidConfig, InvalidShape

PSNR_CAP = 100.0


def as_hwc(img) -> np.ndarray:
    """float64 (H, W, C) view of a numpy HWC/HW array or a torch (1, C, H, W)/(C, H, W) tensor."""
    if torch.is_tensor(img):
        t = img.detach().cpu().to(torch.float64)
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise InvalidShape(f"expected a single image, got batch of {t.shape[0]}")
            t = t[0]
        if t.dim() == 3:
            t = t.permute(1, 2, 0)
        return t.numpy()
    arr = np.asarray(img, dtype=np.float64)
    return arr[..., None] if arr.ndim == 2 else arr


def psnr(a, b) -> float:
    a, b = as_hwc(a), as_hwc(b)
    if a.shape != b.shape:
        raise InvalidShape(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid region, averaged over channels."""
    a, b = as_hwc(a), as_hwc(b)
    if a.shape != b.shape:
        raise InvalidShape(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < 11:
        raise InvalidShape(f"ssim needs images of at least 11x11, got {a.shape[:2]}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gaussian_window()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mu_x ** 2
        syy = _filter_valid(y * y, g) - mu_y ** 2
        sxy = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# -- test-time ensemble ---------------------------------------------------------------

def _vflip(x):
    return torch.flip(x, dims=[-2])


def _hflip(x):
    return torch.flip(x, dims=[-1])


def stereo_transforms():
    """(forward, inverse) pairs acting on ViewPairs; horizontal flips also swap the views."""
    ident = lambda p: ViewPair(*p)
    vflip = lambda p: ViewPair(_vflip(p[0]), _vflip(p[1]))
    hswap = lambda p: ViewPair(_hflip(p[1]), _hflip(p[0]))
    both = lambda p: vflip(hswap(p))
    return [(ident, ident), (vflip, vflip), (hswap, hswap), (both, lambda p: hswap(vflip(p)))]


@torch.no_grad()
def self_ensemble_forward(model, lr: ViewPair) -> ViewPair:
    outs_l, outs_r = [], []
    for fwd, inv in stereo_transforms():
        out = inv(model(*fwd(lr)))
        outs_l.append(out.left)
        outs_r.append(out.right)
    return ViewPair(torch.stack(outs_l).mean(0), torch.stack(outs_r).mean(0))


# -- evaluation -------------------------------------------------------------------

@dataclasses.dataclass
class EvalProtocol:
    view_mode: str = "mean_lr"  # "left_only" or "mean_lr"
    boundary_crop: int = 0
    color: str = "rgb"
    ensemble: bool = False

    def __post_init__(self):
        if self.view_mode not in ("left_only", "mean_lr"):
            raise InvalidConfig(f"eval.view_mode must be left_only or mean_lr, got {self.view_mode!r}")
        if int(self.boundary_crop) < 0:
            raise InvalidConfig(f"eval.boundary_crop must be >= 0, got {self.boundary_crop}")
        if self.color != "rgb":
            raise InvalidConfig(f"eval.color: only 'rgb' is supported, got {self.color!r}")


@dataclasses.dataclass
class PairScore:
    id: str
    psnr_left: float
    psnr_right: float
    ssim_left: float
    ssim_right: float


@dataclasses.dataclass
class DatasetScore:
    psnr: float
    ssim: float
    n_pairs: int
    pairs: List[PairScore] = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class MetricReport:
    datasets: Dict[str, DatasetScore]
    protocol: EvalProtocol
    params_trainable: int = 0
    params_total: int = 0

    def to_dict(self, per_image: bool = False) -> dict:
        out = {
            "protocol": dataclasses.asdict(self.protocol),
            "params_trainable": self.params_trainable,
            "params_total": self.params_total,
            "datasets": {},
        }
        for name, s in self.datasets.items():
            entry = {"psnr": s.psnr, "ssim": s.ssim, "n_pairs": s.n_pairs}
            if per_image:
                entry["pairs"] = [dataclasses.asdict(p) for p in s.pairs]
            out["datasets"][name] = entry
        return out

    def write_json(self, path, per_image: bool = False):
        Path(path).write_text(json.dumps(self.to_dict(per_image), indent=2) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "view_mode", "ensemble", "psnr", "ssim", "n_pairs", "params_trainable", "params_total"])
            for name, s in self.datasets.items():
                w.writerow([name, self.protocol.view_mode, int(self.protocol.ensemble), f"{s.psnr:.6f}",
                            f"{s.ssim:.6f}", s.n_pairs, self.params_trainable, self.params_total])

    def write_per_image_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "id", "psnr_left", "psnr_right", "ssim_left", "ssim_right"])
            for name, s in self.datasets.items():
                for p in s.pairs:
                    w.writerow([name, p.id, f"{p.psnr_left:.6f}", f"{p.psnr_right:.6f}",
                                f"{p.ssim_left:.6f}", f"{p.ssim_right:.6f}"])

    def table_lines(self) -> List[str]:
        return [f"{name}: {s.psnr:.2f}/{s.ssim:.4f}" for name, s in self.datasets.items()]


def _shave(x: torch.Tensor, c: int) -> torch.Tensor:
    return x[..., c:x.shape[-2] - c, c:x.shape[-1] - c] if c else x


@torch.no_grad()
def predict(model, lr: ViewPair, ensemble: bool = False) -> ViewPair:
    if ensemble:
        out = self_ensemble_forward(model, lr)
    else:
        out = ViewPair(*model(lr.left, lr.right))
    return out.map(lambda t: t.clamp(0.0, 1.0))


def score_dataset(model, samples: Sequence[StereoSample], protocol: EvalProtocol) -> DatasetScore:
    if not samples:
        raise EmptyDataset("evaluation dataset is empty")
    dtype = next((p.dtype for p in model.parameters()), torch.float32) if hasattr(model, "parameters") else torch.float32
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    pairs = []
    try:
        for s in sorted(samples, key=lambda s: s.id):
            lr, hr = sample_to_tensors(s)
            sr = predict(model, lr.map(lambda t: t.to(dtype)), protocol.ensemble)
            c = int(protocol.boundary_crop)
            pl, pr = psnr(_shave(sr.left, c), _shave(hr.left, c)), psnr(_shave(sr.right, c), _shave(hr.right, c))
            sl, sr_ = ssim(_shave(sr.left, c), _shave(hr.left, c)), ssim(_shave(sr.right, c), _shave(hr.right, c))
            pairs.append(PairScore(s.id, pl, pr, sl, sr_))
    finally:
        if was_training:
            model.train()
    if protocol.view_mode == "left_only":
        ps = [p.psnr_left for p in pairs]
        ss = [p.ssim_left for p in pairs]
    else:
        ps = [(p.psnr_left + p.psnr_right) / 2 for p in pairs]
        ss = [(p.ssim_left + p.ssim_right) / 2 for p in pairs]
    return DatasetScore(float(np.mean(ps)), float(np.mean(ss)), len(pairs), pairs)


def evaluate(model, dataset: Union[Sequence[StereoSample], Mapping[str, Sequence[StereoSample]]],
             protocol: Optional[EvalProtocol] = None, trainable: Optional[int] = None) -> MetricReport:
    protocol = protocol or EvalProtocol()
    if not isinstance(dataset, Mapping):
        dataset = {"dataset": dataset}
    if not dataset:
        raise EmptyDataset("no datasets to evaluate")
    scores = {name: score_dataset(model, samples, protocol) for name, samples in dataset.items()}
    total = sum(p.numel() for p in model.parameters()) if hasattr(model, "parameters") else 0
    if trainable is None:
        trainable = sum(p.numel() for p in model.parameters() if p.requires_grad) if hasattr(model, "parameters") else 0
    return MetricReport(scores, protocol, trainable, total)
