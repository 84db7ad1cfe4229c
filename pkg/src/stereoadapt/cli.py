"""``stereoadapt`` command line: train, eval, info, infer, datagen, ablate.

Every command takes a config (file path or builtin template name) followed by
any number of ``--section.key=value`` overrides.

Exit codes: 0 ok, 2 config error, 3 data/checkpoint error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .common import ViewPair, seed_everything
from .config import SECTIONS, TOP_LEVEL, RunConfig, builtin_configs, load_config
from .datapipe import BatchStream, load_dataset, load_image, save_image, synth_dataset, write_synthetic
from .errors import (CheckpointError, DecodeError, DivergenceError, EmptyDataset, InvalidConfig, InvalidShape, MissingWeights,
                     PatchTooLarge, ShapeConflict)
from .metrics import EvalProtocol, evaluate, predict
from .surgery import (InjectionPlan, TuningMode, inject_adapters, load_pretrained, parameter_budget,
                      read_checkpoint, spread_stereo_sites, write_checkpoint)
from .trainer import TrainConfig, fit

log = logging.getLogger("stereoadapt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# -- shared plumbing ---------------------------------------------------------------

def build_model(cfg: RunConfig, plan: Optional[InjectionPlan] = None, pretrained=None):
    """Inject adapters (seeded init), then load the pretrained checkpoint if one is given."""
    torch.manual_seed(cfg.seed)
    model = inject_adapters(cfg.backbone, plan or cfg.plan)
    source = pretrained if pretrained is not None else cfg.pretrained
    report = None
    if source is not None:
        ckpt = read_checkpoint(source) if isinstance(source, (str, Path)) else source
        report = load_pretrained(model, ckpt, "strict_backbone")
    return model, report


def _synthetic(cfg: RunConfig, split: str, **override):
    spec = dict((cfg.data.synthetic or {}).get(split) or {})
    spec.update(override)
    if "n" not in spec:
        raise InvalidConfig(f"data.synthetic.{split} needs at least n, height, width")
    return synth_dataset(scale=cfg.backbone.scale, **spec)


def train_samples(cfg: RunConfig):
    if cfg.data.train_root is not None:
        return load_dataset(cfg.data.train_root, cfg.backbone.scale, cfg.data.use_lr_files)
    return _synthetic(cfg, "train")


def val_sets(cfg: RunConfig, roots: Optional[dict] = None) -> dict:
    roots = cfg.data.val_roots if roots is None else roots
    if roots:
        return {name: load_dataset(root, cfg.backbone.scale, cfg.data.use_lr_files) for name, root in roots.items()}
    return {"synthetic": _synthetic(cfg, "val")}


def batch_stream(cfg: RunConfig, samples, seed: Optional[int] = None) -> BatchStream:
    return BatchStream(samples, cfg.data.patch, cfg.train.batch, cfg.backbone.scale,
                       seed=cfg.seed if seed is None else seed, aug=cfg.data.augment, workers=cfg.data.workers)


def write_report(report, out_dir: Path, stem: str = "eval_report"):
    from . import plotting

    report.write_json(out_dir / f"{stem}.json")
    report.write_csv(out_dir / f"{stem}.csv")
    report.write_per_image_csv(out_dir / f"{stem}_per_image.csv")
    plotting.plot_per_image(report, out_dir / f"{stem}_per_image.png")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    return out


# -- commands ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    if cfg.mode is TuningMode.frozen:
        raise InvalidConfig("mode: frozen mode has no trainable parameters")
    cfg.check_paths()
    seed_everything(cfg.seed, cfg.deterministic)
    out = _out_dir(cfg)
    samples = train_samples(cfg)
    vals = val_sets(cfg)
    model, report = build_model(cfg)
    if report is None and cfg.mode is not TuningMode.scratch:
        log.warning("no pretrained checkpoint: training %s from a randomly initialized backbone", cfg.mode.value)
    log_path = out / "train_log.csv"
    log_path.unlink(missing_ok=True)  # a new run starts a new log
    history = []

    def eval_hook(m, it):
        rep = evaluate(m, vals, cfg.eval)
        history.extend((it, name, s.psnr, s.ssim) for name, s in rep.datasets.items())
        return rep

    res = fit(model, batch_stream(cfg, samples), cfg.train, mode=cfg.mode, log_path=log_path,
              ckpt_dir=out / "checkpoints" if cfg.train.ckpt_every else None, config_hash=cfg.hash(),
              eval_fn=eval_hook)
    write_checkpoint(res.checkpoint, out / "final.ckpt")
    final = evaluate(model, vals, cfg.eval)
    write_report(final, out)
    if history:
        with open(out / "eval_history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "dataset", "psnr", "ssim"])
            w.writerows((it, name, f"{p:.6f}", f"{s:.6f}") for it, name, p, s in history)
    from . import plotting

    plotting.plot_loss_curve(res.rows, out / "loss_curve.png", f"{cfg.mode.value}: L1 loss")
    print(f"trained {cfg.train.iterations} iterations in mode {cfg.mode.value}; "
          f"final loss {res.final_loss:.6f}; trainable {final.params_trainable:,} of {final.params_total:,}")
    for line in final.table_lines():
        print(line)
    print(f"artifacts in {out}")
    return EXIT_OK


def _parse_data_args(items) -> dict:
    roots = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name or item, item
        if not Path(path).is_dir():
            raise EmptyDataset(f"dataset directory not found: {path}")
        roots[name] = path
    return roots


def cmd_eval(cfg: RunConfig, args) -> int:
    protocol = dataclasses.replace(cfg.eval)
    if args.ensemble:
        protocol.ensemble = True
    if args.view_mode:
        protocol.view_mode = args.view_mode
    if args.boundary_crop is not None:
        protocol.boundary_crop = args.boundary_crop
    protocol = EvalProtocol(**dataclasses.asdict(protocol))
    roots = _parse_data_args(args.data)
    ckpt = read_checkpoint(args.checkpoint)
    model, _ = build_model(cfg, pretrained=ckpt)
    trainable = sum(int(np.prod(e.shape)) for e in ckpt.manifest if e.trainable)
    report = evaluate(model, val_sets(cfg, roots or None), protocol, trainable=trainable)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = "eval_ensemble" if protocol.ensemble else "eval"
    write_report(report, out, stem)
    for line in report.table_lines():
        print(line)
    return EXIT_OK


def cmd_info(cfg: RunConfig, args) -> int:
    # counting needs shapes only; skip allocating and initializing real weights
    with torch.device("meta"):
        model = inject_adapters(cfg.backbone, cfg.plan)
    b = parameter_budget(model)
    total = b["total"]
    n_spatial = sum(len(g) for g in model.adapter.spatial.values())
    print(f"backbone: D={cfg.backbone.embed_dim}, {cfg.backbone.num_groups} groups x "
          f"{cfg.backbone.blocks_per_group} blocks, window {cfg.backbone.window_size}, x{cfg.backbone.scale}")
    print(f"total parameters: {total:,}")
    print(f"backbone parameters: {total - b['both']:,}")
    print("trainable parameters by mode:")
    for mode in TuningMode:
        print(f"  {mode.value:<12} {b[mode.value]:>12,}  {100.0 * b[mode.value] / total:5.1f}%")
    print(f"spatial adapters: {b['spatial']:,} ({n_spatial} adapters, bottleneck "
          f"{cfg.plan.bottleneck_for(cfg.backbone)}, placement {cfg.plan.placement})")
    print(f"stereo adapters: {b['stereo']:,} ({len(model.stereo_sites)} adapters after groups {model.stereo_sites})")
    print(f"adapters total: {b['both']:,}")
    print(f"trainable in mode {cfg.mode.value}: {b[cfg.mode.value]:,} of {total:,} "
          f"= {100.0 * b[cfg.mode.value] / total:.1f}%")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    model, _ = build_model(cfg, pretrained=ckpt)
    model.eval()
    left, right = load_image(args.left), load_image(args.right)
    if left.shape != right.shape:
        raise InvalidShape(f"left {left.shape} and right {right.shape} differ in size")
    to_t = lambda im: torch.from_numpy(np.ascontiguousarray(im.transpose(2, 0, 1))).unsqueeze(0)
    start = time.perf_counter()
    sr = predict(model, ViewPair(to_t(left), to_t(right)), ensemble=args.ensemble)
    seconds = time.perf_counter() - start
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for view, src in zip(sr, (args.left, args.right)):
        p = out / f"{Path(src).stem}_sr.png"
        save_image(p, view[0].permute(1, 2, 0).numpy())
        paths.append(p)
    print(f"{paths[0]} {paths[1]}  {left.shape[1]}x{left.shape[0]} -> "
          f"{left.shape[1] * cfg.backbone.scale}x{left.shape[0] * cfg.backbone.scale}  {seconds:.3f} s/pair")
    return EXIT_OK


def cmd_datagen(args) -> int:
    written = write_synthetic(args.out, args.n, args.height, args.width, args.scale, args.seed,
                              args.max_disparity, args.detail)
    print(f"wrote {len(written) // 2} stereo pairs to {args.out}")
    return EXIT_OK


ABLATION_FIELDS = ("run", "group", "mode", "stereo_sites", "spatial", "params_trainable", "params_total",
                   "psnr", "ssim", "psnr_gain", "final_loss", "seconds")


def _ablation_row(run, group, mode, plan, model, report, base_psnr, final_loss, seconds):
    s = next(iter(report.datasets.values()))
    b = parameter_budget(model)
    return {"run": run, "group": group, "mode": mode, "stereo_sites": " ".join(map(str, model.stereo_sites)),
            "spatial": int(plan.spatial), "params_trainable": b[mode], "params_total": b["total"],
            "psnr": s.psnr, "ssim": s.ssim, "psnr_gain": s.psnr - base_psnr if base_psnr is not None else 0.0,
            "final_loss": final_loss, "seconds": seconds}


def run_ablation(cfg: RunConfig, out: Path) -> List[dict]:
    """Frozen baseline, each configured tuning mode, then the stereo-adapter-count sweep."""
    samples = train_samples(cfg)
    vals = val_sets(cfg)
    abl = cfg.ablation
    if cfg.pretrained is not None:
        pretrained = read_checkpoint(cfg.pretrained)
    else:
        # single-image pretraining: no adapters, views never interact
        seed_everything(cfg.seed, cfg.deterministic)
        bare_plan = InjectionPlan(spatial=False, stereo_sites="none")
        bare, _ = build_model(cfg, bare_plan)
        pre_cfg = dataclasses.replace(cfg.train, iterations=abl.pretrain_iterations, lr=abl.pretrain_lr)
        res = fit(bare, batch_stream(cfg, samples, seed=cfg.seed + 1000), pre_cfg, mode=TuningMode.full,
                  log_path=out / "pretrain_log.csv")
        pretrained = res.checkpoint
        write_checkpoint(pretrained, out / "pretrained.ckpt")
    rows = []
    frozen, _ = build_model(cfg, pretrained=pretrained)
    base = evaluate(frozen, vals, cfg.eval)
    base_psnr = next(iter(base.datasets.values())).psnr
    rows.append(_ablation_row("frozen", "baseline", "frozen", cfg.plan, frozen, base, base_psnr, float("nan"), 0.0))

    def one(run, group, mode, plan):
        seed_everything(cfg.seed, cfg.deterministic)
        model, _ = build_model(cfg, plan, pretrained=pretrained)
        start = time.perf_counter()
        res = fit(model, batch_stream(cfg, samples), cfg.train, mode=mode, log_path=out / f"{run}_log.csv")
        seconds = time.perf_counter() - start
        report = evaluate(model, vals, cfg.eval)
        row = _ablation_row(run, group, TuningMode(mode).value, plan, model, report, base_psnr, res.final_loss, seconds)
        print(f"{run:<22} trainable {row['params_trainable']:>10,}  PSNR {row['psnr']:.3f} "
              f"({row['psnr_gain']:+.3f} dB)  {seconds:.0f}s", flush=True)
        return row

    for m in abl.modes:
        (out / f"mode_{m}_log.csv").unlink(missing_ok=True)
        rows.append(one(f"mode_{m}", "modes", m, cfg.plan))
    site_mode = TuningMode(abl.site_mode)
    for k in abl.site_counts:
        sites = spread_stereo_sites(cfg.backbone.num_groups, k)
        plan = dataclasses.replace(cfg.plan, stereo_sites=sites,
                                   spatial=site_mode is not TuningMode.stereo_only and cfg.plan.spatial)
        run = f"stereo_x{k}"
        (out / f"{run}_log.csv").unlink(missing_ok=True)
        probe, _ = build_model(cfg, plan)
        if not parameter_budget(probe)[site_mode.value]:
            # nothing to train: identical to the frozen backbone
            rows.append(_ablation_row(run, "sites", site_mode.value, plan, probe, base, base_psnr, float("nan"), 0.0))
            continue
        rows.append(one(run, "sites", site_mode, plan))
    return rows


def cmd_ablate(cfg: RunConfig, args) -> int:
    cfg.check_paths()
    out = _out_dir(cfg) / "ablation"
    out.mkdir(exist_ok=True)
    rows = run_ablation(cfg, out)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    from . import plotting

    plotting.plot_ablation(rows, out / "ablation.png")
    print(f"comparison written to {out / 'ablation.csv'}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

COMMANDS = {"train": cmd_train, "eval": cmd_eval, "info": cmd_info, "infer": cmd_infer, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereoadapt", description=__doc__.split("\n")[0],
                                epilog="Overrides: any --section.key=value after the config, e.g. "
                                       "--train.iterations=50 --plan.stereo_sites=[0,1]")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help=f"YAML file or builtin template ({', '.join(builtin_configs())})")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
        return sp

    with_config("train", "fine-tune per the config's mode; writes checkpoint, log, report, figures")
    ev = with_config("eval", "score a checkpoint on validation sets")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", action="append", help="DIR or NAME=DIR (repeatable); default: config val sets")
    ev.add_argument("--ensemble", action="store_true", help="average over the 4 stereo-safe flips")
    ev.add_argument("--view-mode", choices=["left_only", "mean_lr"])
    ev.add_argument("--boundary-crop", type=int)
    ev.add_argument("--out-dir", help="where to write reports (default: next to the checkpoint)")
    with_config("info", "print parameter budgets per tuning mode")
    inf = with_config("infer", "super-resolve one LR stereo pair")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--left", required=True)
    inf.add_argument("--right", required=True)
    inf.add_argument("--out-dir", default=".")
    inf.add_argument("--ensemble", action="store_true")
    with_config("ablate", "frozen baseline, every tuning mode, and the stereo-adapter-count sweep")

    dg = sub.add_parser("datagen", help="write a synthetic stereo dataset (<id>_L.png/<id>_R.png)")
    dg.add_argument("--out", required=True)
    dg.add_argument("--n", type=int, default=16)
    dg.add_argument("--height", type=int, default=96)
    dg.add_argument("--width", type=int, default=160)
    dg.add_argument("--scale", type=int, default=2)
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--max-disparity", type=int, default=12)
    dg.add_argument("--detail", type=float, default=1.0)
    return p


def _split_overrides(extra: List[str]):
    overrides, unknown = [], []
    for item in extra:
        head = item[2:].partition("=")[0] if item.startswith("--") else ""
        known = head.split(".")[0] in SECTIONS + TOP_LEVEL
        (overrides if known and "=" in item else unknown).append(item)
    return overrides, unknown


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides, unknown = _split_overrides(extra)
    if unknown:
        print(f"error: unrecognized arguments: {' '.join(unknown)} (overrides look like --section.key=value or --out_dir=...)",
              file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "datagen":
            if overrides:
                raise InvalidConfig("datagen takes no config overrides")
            return cmd_datagen(args)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.deterministic:
            overrides.append("deterministic=true")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InvalidConfig as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyDataset, DecodeError, PatchTooLarge, CheckpointError, MissingWeights, ShapeConflict,
            InvalidShape, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
