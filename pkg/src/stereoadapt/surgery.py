"""Turn a single-image backbone into a stereo model and manage its parameters.

Adapters live under ``adapter.spatial.g{i}.b{j}`` and ``adapter.stereo.g{i}``;
backbone parameters keep their ``backbone.*`` names untouched, so a checkpoint
saved before injection loads cleanly after it.

Checkpoint archive (uncompressed zip, fixed timestamps so equal contents give
equal bytes):

* ``manifest.txt`` -- header lines ``format``/``config_hash``, then one
  tab-separated line per tensor: name, dtype, shape (comma-joined, ``-`` for
  scalars), trainable (0/1), byte offset into ``tensors.bin``.
* ``tensors.bin`` -- the tensors back to back, little-endian float32, C order.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .adapters import SpatialAdapter, StereoAdapter
from .backbone import BackboneConfig, HATBackbone, map_to_tokens, tokens_to_map
from .common import ViewPair
from .errors import CheckpointError, InvalidConfig, InvalidShape, MissingWeights, ShapeConflict

PLACEMENTS = ("after_HA", "after_MLP_extra", "parallel")
FORMAT_TAG = "stereoadapt-checkpoint/1"


class TuningMode(str, enum.Enum):
    scratch = "scratch"
    full = "full"
    spatial_only = "spatial_only"
    stereo_only = "stereo_only"
    both = "both"
    frozen = "frozen"


def default_stereo_sites(num_groups: int) -> list:
    """Every second group, counted back from the last one (6 of 12 for HAT-L)."""
    return sorted(range(num_groups - 1, -1, -2))


def spread_stereo_sites(num_groups: int, count: int) -> list:
    """``count`` sites spaced evenly and anchored at the last group (6 of 12 gives the default)."""
    if not 0 <= count <= num_groups:
        raise InvalidConfig(f"stereo adapter count {count} not in [0, {num_groups}]")
    return sorted({num_groups - 1 - (i * num_groups) // count for i in range(count)})


@dataclasses.dataclass
class InjectionPlan:
    spatial: bool = True
    # list of group indices, or one of "alternate", "all", "none"
    stereo_sites: Union[Sequence[int], str] = "alternate"
    placement: str = "after_HA"
    bottleneck: Optional[int] = None  # default embed_dim // 4
    tau: float = 1.0
    stereo_attention: str = "row"

    def resolve_sites(self, num_groups: int) -> list:
        sites = self.stereo_sites
        if isinstance(sites, str):
            if sites == "alternate":
                return default_stereo_sites(num_groups)
            if sites == "all":
                return list(range(num_groups))
            if sites == "none":
                return []
            raise InvalidConfig(f"plan.stereo_sites: unknown keyword {sites!r}")
        resolved = sorted(int(s) for s in sites)
        if len(set(resolved)) != len(resolved):
            raise InvalidConfig(f"plan.stereo_sites has duplicates: {list(sites)}")
        for s in resolved:
            if not 0 <= s < num_groups:
                raise InvalidConfig(f"plan.stereo_sites: group {s} out of range [0, {num_groups})")
        return resolved

    def validate(self, cfg: BackboneConfig):
        if self.placement not in PLACEMENTS:
            raise InvalidConfig(f"plan.placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if not self.tau > 0:
            raise InvalidConfig(f"plan.tau must be positive, got {self.tau!r}")
        if self.stereo_attention not in ("row", "global"):
            raise InvalidConfig(f"plan.stereo_attention must be 'row' or 'global', got {self.stereo_attention!r}")
        d = self.bottleneck_for(cfg)
        if not 0 < d < cfg.embed_dim:
            raise InvalidConfig(f"plan.bottleneck must satisfy 0 < d < {cfg.embed_dim}, got {d}")
        self.resolve_sites(cfg.num_groups)

    def bottleneck_for(self, cfg: BackboneConfig) -> int:
        return self.bottleneck if self.bottleneck is not None else max(1, cfg.embed_dim // 4)


class AdapterBank(nn.Module):
    def __init__(self):
        super().__init__()
        self.spatial = nn.ModuleDict()
        self.stereo = nn.ModuleDict()


class StereoSRModel(nn.Module):
    """Siamese backbone over both views, with optional spatial and stereo adapters."""

    def __init__(self, cfg: BackboneConfig, plan: Optional[InjectionPlan] = None, backbone: Optional[HATBackbone] = None):
        super().__init__()
        plan = plan or InjectionPlan(spatial=False, stereo_sites="none")
        plan.validate(cfg)
        self.cfg = cfg
        self.plan = plan
        self.backbone = backbone if backbone is not None else HATBackbone(cfg)
        self.adapter = AdapterBank()
        self.stereo_sites = plan.resolve_sites(cfg.num_groups)
        d = plan.bottleneck_for(cfg)
        if plan.spatial:
            for i in range(cfg.num_groups):
                group = nn.ModuleDict()
                for j in range(cfg.blocks_per_group):
                    group[f"b{j}"] = SpatialAdapter(cfg.embed_dim, d)
                    if plan.placement == "after_MLP_extra":
                        group[f"b{j}_mlp"] = SpatialAdapter(cfg.embed_dim, d)
                self.adapter.spatial[f"g{i}"] = group
        for i in self.stereo_sites:
            self.adapter.stereo[f"g{i}"] = StereoAdapter(cfg.embed_dim, plan.tau, plan.stereo_attention)

    def _group_slots(self, i: int):
        if not self.plan.spatial:
            return None
        group = self.adapter.spatial[f"g{i}"]
        parallel = self.plan.placement == "parallel"
        return [(group[f"b{j}"], group[f"b{j}_mlp"] if f"b{j}_mlp" in group else None, parallel)
                for j in range(self.cfg.blocks_per_group)]

    def forward_single(self, img: torch.Tensor) -> torch.Tensor:
        """Single-image path: backbone plus spatial adapters, no cross-view fusion."""
        bb = self.backbone
        bb.check_input(img)
        x, state = bb.enter_body(bb.shallow(img))
        for i, layer in enumerate(bb.layers):
            x = layer(x, state.x_size, self._group_slots(i))
        return bb.reconstruct(bb.leave_body(x, state))

    def forward(self, left: torch.Tensor, right: Optional[torch.Tensor] = None) -> ViewPair:
        if right is None:
            left, right = left
        if left.shape != right.shape:
            raise InvalidShape(f"view shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        bb = self.backbone
        bb.check_input(left)
        bb.check_input(right)
        b = left.shape[0]
        # both views share every backbone weight; run them as one batch
        x, state = bb.enter_body(bb.shallow(torch.cat([left, right], 0)))
        for i, layer in enumerate(bb.layers):
            x = layer(x, state.x_size, self._group_slots(i))
            key = f"g{i}"
            if key in self.adapter.stereo:
                fmap = tokens_to_map(x, state.x_size)
                fl, fr = self.adapter.stereo[key](fmap[:b], fmap[b:])
                x = map_to_tokens(torch.cat([fl, fr], 0))
        out = bb.reconstruct(bb.leave_body(x, state))
        return ViewPair(out[:b], out[b:])


def inject_adapters(cfg: BackboneConfig, plan: InjectionPlan, backbone: Optional[HATBackbone] = None) -> StereoSRModel:
    return StereoSRModel(cfg, plan, backbone)


# -- tuning modes and counting ------------------------------------------------

def trainable_names(model: nn.Module, mode: Union[TuningMode, str]) -> set:
    mode = TuningMode(mode)
    names = [n for n, _ in model.named_parameters()]
    if mode in (TuningMode.scratch, TuningMode.full):
        return set(names)
    if mode is TuningMode.spatial_only:
        return {n for n in names if n.startswith("adapter.spatial.")}
    if mode is TuningMode.stereo_only:
        return {n for n in names if n.startswith("adapter.stereo.")}
    if mode is TuningMode.both:
        return {n for n in names if n.startswith("adapter.")}
    return set()


def apply_tuning_mode(model: nn.Module, mode: Union[TuningMode, str]) -> set:
    """Set ``requires_grad`` per mode and return the trainable name set.

    ``scratch`` also re-initializes the backbone.
    """
    mode = TuningMode(mode)
    if mode is TuningMode.scratch:
        model.backbone.reset_parameters()
    names = trainable_names(model, mode)
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)
    return names


def count_params(model: nn.Module, trainable_only: bool = False, names: Optional[Iterable[str]] = None) -> int:
    """Exact element count. ``names`` (if given) selects which parameters count as trainable."""
    if names is not None:
        keep = set(names)
        return sum(p.numel() for n, p in model.named_parameters() if n in keep)
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def parameter_budget(model: StereoSRModel) -> dict:
    """Counts for every fine-tuning mode plus the total, without touching requires_grad."""
    out = {"total": count_params(model)}
    for mode in TuningMode:
        out[mode.value] = count_params(model, names=trainable_names(model, mode))
    out["spatial"] = out["spatial_only"]
    out["stereo"] = out["stereo_only"]
    return out


# -- checkpoints ----------------------------------------------------------------

@dataclasses.dataclass
class ManifestEntry:
    name: str
    shape: tuple
    trainable: bool
    dtype: str = "float32"
    offset: int = 0


@dataclasses.dataclass
class Checkpoint:
    tensors: dict
    manifest: list
    config_hash: str = ""

    def __post_init__(self):
        names = [e.name for e in self.manifest]
        if names != list(self.tensors):
            raise CheckpointError("manifest names do not match tensor names")
        for e in self.manifest:
            if tuple(self.tensors[e.name].shape) != tuple(e.shape):
                raise CheckpointError(f"manifest shape for {e.name} does not match its tensor")

    @classmethod
    def from_model(cls, model: nn.Module, config_hash: str = "") -> "Checkpoint":
        tensors, manifest = {}, []
        for name, p in model.named_parameters():
            arr = p.detach().cpu().to(torch.float32).numpy().copy()
            tensors[name] = arr
            manifest.append(ManifestEntry(name, tuple(arr.shape), bool(p.requires_grad)))
        return cls(tensors, manifest, config_hash)

    def to_bytes(self) -> bytes:
        lines = [f"format\t{FORMAT_TAG}", f"config_hash\t{self.config_hash}"]
        blob = io.BytesIO()
        for e in self.manifest:
            arr = np.asarray(self.tensors[e.name], dtype="<f4")
            shape = ",".join(str(s) for s in arr.shape) or "-"
            lines.append(f"{e.name}\tfloat32\t{shape}\t{int(e.trainable)}\t{blob.tell()}")
            blob.write(arr.tobytes(order="C"))
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            for fname, data in (("manifest.txt", ("\n".join(lines) + "\n").encode()), ("tensors.bin", blob.getvalue())):
                info = zipfile.ZipInfo(fname, date_time=(1980, 1, 1, 0, 0, 0))
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                manifest_text = zf.read("manifest.txt").decode()
                blob = zf.read("tensors.bin")
        except (zipfile.BadZipFile, KeyError) as exc:
            raise CheckpointError(f"{source}: not a checkpoint archive ({exc})") from exc
        config_hash, tensors, manifest = "", {}, []
        for line in manifest_text.splitlines():
            fields = line.split("\t")
            if fields[0] == "format":
                if fields[1] != FORMAT_TAG:
                    raise CheckpointError(f"{source}: unsupported format {fields[1]!r}")
                continue
            if fields[0] == "config_hash":
                config_hash = fields[1] if len(fields) > 1 else ""
                continue
            name, dtype, shape_s, trainable, offset = fields
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=int(offset)).reshape(shape)
            tensors[name] = arr.astype(np.float32)
            manifest.append(ManifestEntry(name, shape, trainable == "1", dtype, int(offset)))
        return cls(tensors, manifest, config_hash)


def save_checkpoint(model: nn.Module, path, config_hash: str = "") -> Checkpoint:
    ckpt = Checkpoint.from_model(model, config_hash)
    write_checkpoint(ckpt, path)
    return ckpt


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(ckpt.to_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return Checkpoint.from_bytes(data, str(path))


@dataclasses.dataclass
class LoadReport:
    loaded: list
    missing: list
    ignored: list

    @property
    def missing_backbone(self) -> list:
        return [n for n in self.missing if n.startswith("backbone.")]


def load_pretrained(model: nn.Module, ckpt: Checkpoint, policy: str = "strict_backbone") -> LoadReport:
    """Copy every checkpoint tensor whose name matches a model parameter.

    Names without the ``backbone.`` prefix (a bare single-image checkpoint) are
    matched against ``backbone.<name>``. Parameters not found in the checkpoint
    keep their current values.
    """
    if policy not in ("strict_backbone", "permissive"):
        raise InvalidConfig(f"unknown load policy {policy!r}")
    params = dict(model.named_parameters())
    resolved, ignored = {}, []
    for name, arr in ckpt.tensors.items():
        target = name if name in params else f"backbone.{name}" if f"backbone.{name}" in params else None
        if target is None or target in resolved:
            ignored.append(name)
            continue
        if tuple(params[target].shape) != tuple(arr.shape):
            raise ShapeConflict(target, params[target].shape, arr.shape)
        resolved[target] = arr
    missing = [n for n in params if n not in resolved]
    if policy == "strict_backbone":
        missing_bb = [n for n in missing if n.startswith("backbone.")]
        if missing_bb:
            raise MissingWeights(missing_bb)
    with torch.no_grad():
        for target, arr in resolved.items():
            p = params[target]
            p.copy_(torch.from_numpy(np.asarray(arr)).to(dtype=p.dtype, device=p.device))
    loaded = [n for n in params if n in resolved]
    return LoadReport(loaded, missing, ignored)


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_HAT_DROP = ("overlap_attn", "relative_position_index", "attn_mask", "absolute_pos_embed")


def import_hat_state(state: dict) -> Checkpoint:
    """Best-effort map of a published HAT state dict onto in-repo backbone names.

    The in-repo modules reuse HAT's names, so the mapping is: unwrap
    ``params_ema``/``params``, drop the overlapping cross-attention block and
    buffers (not present here), prefix ``backbone.``.
    """
    for key in ("params_ema", "params", "state_dict"):
        if key in state and isinstance(state[key], dict):
            state = state[key]
            break
    tensors, manifest = {}, []
    for name, value in state.items():
        if any(tok in name for tok in _HAT_DROP):
            continue
        arr = np.asarray(value.detach().cpu().float().numpy() if torch.is_tensor(value) else value, dtype=np.float32)
        tensors[f"backbone.{name}"] = arr
        manifest.append(ManifestEntry(f"backbone.{name}", tuple(arr.shape), False))
    return Checkpoint(tensors, manifest)


def import_hat_checkpoint(path) -> Checkpoint:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as exc:
        raise CheckpointError(f"cannot read HAT weights {path}: {exc}") from exc
    return import_hat_state(state)
