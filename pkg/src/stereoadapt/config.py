"""Run configuration: a nested YAML document with one section per pipeline stage.

Builtin templates (``toy``, ``hat_l``) ship in ``stereoadapt/configs``; any field
can be overridden with ``section.key=value`` strings, values parsed as YAML.
"""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .backbone import BackboneConfig
from .datapipe import Augment, PatchSpec
from .errors import InvalidConfig
from .metrics import EvalProtocol
from .surgery import InjectionPlan, TuningMode, config_hash
from .trainer import TrainConfig

CONFIG_DIR = Path(__file__).parent / "configs"
SECTIONS = ("backbone", "plan", "train", "data", "eval", "ablation")
TOP_LEVEL = ("seed", "deterministic", "mode", "pretrained", "out_dir")


def builtin_configs() -> list:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.yaml"))


def load_raw(source) -> dict:
    """Read a YAML file, or a builtin template by name."""
    path = Path(source)
    if not path.is_file():
        builtin = CONFIG_DIR / f"{source}.yaml"
        if builtin.is_file():
            path = builtin
        else:
            raise InvalidConfig(f"config file not found: {source} (builtin templates: {', '.join(builtin_configs())})")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfig(f"config {path} must be a mapping at top level")
    return raw


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """``a.b.c=value`` assignments; the value is parsed as YAML (``1e-3``, ``[0, 1]``, ``null``)."""
    out = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.lstrip("-").partition("=")
        if not sep or not key:
            raise InvalidConfig(f"override {item!r} is not of the form section.key=value")
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise InvalidConfig(f"override {key}: {part} is not a section")
            node = nxt
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"override {key}: cannot parse value {value!r}") from exc
        node[parts[-1]] = _number_or_str(parsed)
    return out


def _number_or_str(value):
    # YAML 1.1 reads "1e-3" (no dot) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _build(cls, section: str, values, **extra):
    values = dict(values or {})
    values.update(extra)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise InvalidConfig(f"unknown key {section}.{unknown[0]}")
    try:
        return cls(**values)
    except InvalidConfig:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{section}: {exc}") from exc


@dataclasses.dataclass
class DataConfig:
    train_root: Optional[str] = None
    val_roots: dict = dataclasses.field(default_factory=dict)
    use_lr_files: bool = True
    workers: int = 0
    patch: PatchSpec = dataclasses.field(default_factory=PatchSpec)
    augment: Augment = dataclasses.field(default_factory=Augment)
    synthetic: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class AblationConfig:
    pretrain_iterations: int = 300
    pretrain_lr: float = 1e-3
    modes: list = dataclasses.field(default_factory=lambda: ["scratch", "full", "spatial_only", "stereo_only", "both"])
    site_counts: list = dataclasses.field(default_factory=lambda: [0, 1, 2])
    site_mode: str = "stereo_only"


@dataclasses.dataclass
class RunConfig:
    backbone: BackboneConfig
    plan: InjectionPlan
    train: TrainConfig
    data: DataConfig
    eval: EvalProtocol
    ablation: AblationConfig
    mode: TuningMode = TuningMode.both
    seed: int = 0
    deterministic: bool = True
    pretrained: Optional[str] = None
    out_dir: str = "runs/default"
    raw: dict = dataclasses.field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
        if unknown:
            raise InvalidConfig(f"unknown key {unknown[0]}")
        backbone = _build(BackboneConfig, "backbone", raw.get("backbone"))
        backbone.validate()
        plan = _build(InjectionPlan, "plan", raw.get("plan"))
        plan.validate(backbone)
        train = _build(TrainConfig, "train", raw.get("train"), seed=int(raw.get("seed", 0)))
        d = dict(raw.get("data") or {})
        patch = _build(PatchSpec, "data.patch", d.pop("patch", None))
        augment = _build(Augment, "data.augment", d.pop("augment", None))
        data = _build(DataConfig, "data", d, patch=patch, augment=augment)
        if not isinstance(data.val_roots, dict):
            raise InvalidConfig("data.val_roots must map dataset names to directories")
        protocol = _build(EvalProtocol, "eval", raw.get("eval"))
        ablation = _build(AblationConfig, "ablation", raw.get("ablation"))
        for m in ablation.modes:
            _mode(m, "ablation.modes")
        _mode(ablation.site_mode, "ablation.site_mode")
        for k in ablation.site_counts:
            if not isinstance(k, int) or not 0 <= k <= backbone.num_groups:
                raise InvalidConfig(f"ablation.site_counts: {k!r} not in [0, {backbone.num_groups}]")
        return cls(backbone, plan, train, data, protocol, ablation,
                   mode=_mode(raw.get("mode", "both"), "mode"),
                   seed=int(raw.get("seed", 0)), deterministic=bool(raw.get("deterministic", True)),
                   pretrained=raw.get("pretrained"), out_dir=str(raw.get("out_dir", "runs/default")),
                   raw=copy.deepcopy(raw))

    def check_paths(self, need_train: bool = True):
        """Every referenced path must exist; the message names the offending key and path."""
        if self.pretrained is not None and not Path(self.pretrained).is_file():
            raise InvalidConfig(f"pretrained: checkpoint not found: {self.pretrained}")
        if need_train and self.data.train_root is not None and not Path(self.data.train_root).is_dir():
            raise InvalidConfig(f"data.train_root: directory not found: {self.data.train_root}")
        for name, root in self.data.val_roots.items():
            if not Path(root).is_dir():
                raise InvalidConfig(f"data.val_roots.{name}: directory not found: {root}")

    def hash(self) -> str:
        """Hash of everything that shapes the result; ``out_dir`` is excluded."""
        return config_hash({k: v for k, v in self.raw.items() if k != "out_dir"})

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)


def _mode(value, key) -> TuningMode:
    try:
        return TuningMode(value)
    except ValueError:
        raise InvalidConfig(f"{key}: unknown tuning mode {value!r} "
                            f"(expected one of {', '.join(m.value for m in TuningMode)})") from None


def load_config(source, overrides: Iterable[str] = ()) -> RunConfig:
    return RunConfig.from_dict(apply_overrides(load_raw(source), overrides))
