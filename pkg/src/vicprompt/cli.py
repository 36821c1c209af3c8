"""Command-line entry point.

Every subcommand accepts ``--config`` (JSON with optional ``data``,
``backbone`` and ``train`` sections plus a top-level ``seed``), ``--seed``,
``--out`` and ``--workers``. Flags override file values and the resolved
configuration is written next to every output as ``config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import evaluation as ev
from .backbone import BackboneConfig, load_backbone, pretrain_backbone, reconstruction_error, save_backbone
from .data import (
    DatasetSpec,
    apply_area_filter,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_folds,
)
from .prompt import PLACEMENTS, load_prompt, save_prompt
from .retrieval import build_index
from .trainer import TrainConfig, train_prompt

log = logging.getLogger("vicprompt")

ABLATIONS = ("placement", "padding", "dataset-size", "cross-class")
DETECTION_AREA = {"train": 0.5, "test": 0.2}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object")
    unknown = set(cfg) - {"data", "backbone", "train", "seed"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(cls, section: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    bad = set(section) - names
    if bad:
        raise CliError(f"unknown {cls.__name__} keys: {sorted(bad)}")
    values = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    for k in ("classes", "label_tasks", "betas"):
        if k in values and isinstance(values[k], list):
            values[k] = tuple(values[k]) if k != "classes" else list(values[k])
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {cls.__name__}: {e}") from e


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _train_config(args, cfg) -> TrainConfig:
    over = dict(epochs=getattr(args, "epochs", None), learning_rate=getattr(args, "lr", None),
                placement=getattr(args, "placement", None), pad=getattr(args, "pad", None),
                batch_size=getattr(args, "batch_size", None), seed=_seed(args, cfg))
    return _build(TrainConfig, cfg.get("train", {}), over)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, resolved: dict) -> None:
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {p} does not exist")
    return p


def _folds(data_dir: Path, which: str | None) -> list[tuple[int, tuple]]:
    dirs = sorted(d for d in data_dir.glob("fold*") if d.is_dir())
    if not dirs:
        raise CliError(f"{data_dir} holds no fold directories (run gen-data first)")
    picked = range(len(dirs)) if which in (None, "all") else [int(which)]
    out = []
    for i in picked:
        if not 0 <= i < len(dirs):
            raise CliError(f"fold {i} out of range (have {len(dirs)})")
        d = data_dir / f"fold{i}"
        out.append((i, (load_dataset(d / "train"), load_dataset(d / "test"))))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    spec = _build(DatasetSpec, cfg.get("data", {}), dict(
        classes=args.classes.split(",") if args.classes else None, per_class_count=args.per_class,
        image_size=args.image_size, domain_id=args.domain, seed=_seed(args, cfg), task_kind=args.task))
    out = _out(args)
    d = generate_dataset(spec)
    save_dataset(d, out / "all", extra=asdict(spec))
    folds = split_folds(d, args.folds) if args.folds else []
    for i, (tr, te) in enumerate(folds):
        if spec.task_kind == "detection":
            tr, te = apply_area_filter(tr, DETECTION_AREA["train"]), apply_area_filter(te, DETECTION_AREA["test"])
        save_dataset(tr, out / f"fold{i}" / "train")
        save_dataset(te, out / f"fold{i}" / "test")
    _echo(out, {"command": "gen-data", "seed": spec.seed, "data": asdict(spec), "folds": args.folds})
    print(f"wrote {len(d)} pairs and {len(folds)} folds to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    bcfg = _build(BackboneConfig, cfg.get("backbone", {}), dict(tok_steps=args.tok_steps, pred_steps=args.pred_steps))
    data = [load_dataset(_existing(p, "dataset")) for p in args.data]
    seed = _seed(args, cfg)
    out = _out(args)
    bundle = pretrain_backbone(data, bcfg, seed)
    path = out / "backbone.ckpt"
    save_backbone(bundle, path)
    back = load_backbone(path)
    recon = reconstruction_error(back, data, seed=seed)
    (out / "fingerprint.txt").write_text(back.fingerprint + "\n")
    _echo(out, {"command": "pretrain", "seed": seed, "backbone": asdict(bcfg), "data": list(args.data),
                "fingerprint": back.fingerprint, "reconstruction_mae": recon})
    print(f"fingerprint {back.fingerprint}")
    print(f"reconstruction_mae {recon:.6f}")
    return 0


def cmd_train_prompt(args) -> int:
    cfg = _load_config(args.config)
    tcfg = _train_config(args, cfg)
    bundle = load_backbone(_existing(args.backbone, "backbone checkpoint"))
    train = load_dataset(_existing(args.train, "training set"))
    out = _out(args)
    prompt, hist = train_prompt(train, bundle, tcfg)
    save_prompt(prompt, out / "prompt.ckpt")
    hist.to_csv(out / "history.csv")
    _echo(out, {"command": "train-prompt", "seed": tcfg.seed, "train": asdict(tcfg),
                "backbone": bundle.fingerprint, "best_epoch": hist.best_epoch,
                "prompt": ev.prompt_fingerprint(prompt)})
    print(f"trained {len(hist.loss)} epochs; best epoch {hist.best_epoch}")
    return 0


def _write_report(rep: ev.ExperimentReport, out: Path, save_records: bool) -> None:
    rep.to_json(out / "report.json")
    rep.to_csv(out / "report.csv")
    if save_records:
        for arm, recs in sorted(rep.records.items()):
            ev.save_records(recs, out / "records" / arm)


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    tcfg = _train_config(args, cfg)
    bundle = load_backbone(_existing(args.backbone, "backbone checkpoint"))
    folds = _folds(_existing(args.data, "data directory"), args.fold)
    out = _out(args)
    resolved = {"command": "eval", "experiment": args.experiment, "seed": tcfg.seed, "train": asdict(tcfg),
                "data": args.data, "fold": args.fold, "prompt": args.prompt, "baseline_only": args.baseline_only}
    if args.experiment == "fold":
        if args.prompt or args.baseline_only:
            rep = _eval_fixed(folds, bundle, tcfg, args)
        else:
            rep = ev.run_fold_experiment([f for _, f in folds], bundle, tcfg)
    elif args.experiment == "domain-shift":
        if not args.shifted:
            raise CliError("--shifted is required for domain-shift")
        shifted = load_dataset(_existing(args.shifted, "shifted pool"))
        (_, (train, test)), = folds[:1]
        rep = ev.domain_shift(train, shifted, test, bundle, tcfg)
    else:
        prompt = load_prompt(args.prompt) if args.prompt else None
        rep = ev.ExperimentReport("token_agreement", {}, [], provenance={"backbone": bundle.fingerprint})
        for i, (train, test) in folds:
            v = ev.token_agreement(test.pairs, prompt, bundle, build_index(train), train, tcfg.placement,
                                   tcfg.resolution)
            rep.rows.append({"fold": i, "agreement": v})
    rep.config = {**rep.config, **resolved}
    _write_report(rep, out, args.save_records or bool(args.grid))
    if args.grid:
        _grid_from_report(rep, folds, out, args.grid)
    _echo(out, resolved)
    print(json.dumps(rep.summary or rep.rows, sort_keys=True))
    return 0


def _eval_fixed(folds, bundle, tcfg, args) -> ev.ExperimentReport:
    """Baseline (and optionally a given prompt checkpoint) without training."""
    prompt = load_prompt(args.prompt) if args.prompt else None
    if prompt is not None and prompt.backbone_fingerprint not in ("", bundle.fingerprint):
        log.warning("prompt was trained against a different backbone")
    rep = ev.ExperimentReport("fold", {}, [], provenance={"backbone": bundle.fingerprint})
    if prompt is not None:
        rep.provenance["prompts"] = {"given": ev.prompt_fingerprint(prompt)}
    for i, (train, test) in folds:
        idx = build_index(train)
        gts = ev.ground_truth_masks(test.pairs, bundle.cell_size)
        row = {"fold": i}
        arms = [(ev.BASELINE, None)] + ([(ev.PROMPTED, prompt)] if prompt is not None else [])
        for name, pr in arms:
            recs = ev.predict_records(test.pairs, idx, train, bundle, pr, tcfg.placement, tcfg.resolution)
            rep.records[f"{name}/fold{i}"] = recs
            per, mean = ev.score_records(recs, gts)
            rep.per_class.extend({"fold": i, "arm": name, "class_id": c, "iou": v} for c, v in per.items())
            row[f"{name}_mIoU"] = mean
        rep.rows.append(row)
    rep.check_bounds()
    return rep


def _grid_from_report(rep, folds, out: Path, columns: int) -> None:
    i, (train, test) = folds[0]
    base = rep.records.get(f"{ev.BASELINE}/fold{i}")
    prom = rep.records.get(f"{ev.PROMPTED}/fold{i}")
    if base is None or prom is None:
        raise CliError("--grid needs both baseline and prompted records")
    ev.render_comparison(base, prom, test, train, columns, out / "grid.png")


def cmd_ablate(args) -> int:
    if args.name not in ABLATIONS:
        raise CliError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    cfg = _load_config(args.config)
    tcfg = _train_config(args, cfg)
    bundle = load_backbone(_existing(args.backbone, "backbone checkpoint"))
    folds = _folds(_existing(args.data, "data directory"), args.fold if args.fold is not None else "0")
    _, fold = folds[0]
    out = _out(args)
    if args.name == "placement":
        rep = ev.ablate_placement(fold, bundle, tcfg, tuple(PLACEMENTS))
    elif args.name == "padding":
        pads = [int(p) for p in args.pads.split(",")]
        rep = ev.sweep_padding(fold, pads, bundle, tcfg)
    elif args.name == "dataset-size":
        sizes = [None if s == "all" else int(s) for s in args.sizes.split(",")]
        rep = ev.sweep_dataset_size(fold, bundle, tcfg, sizes)
    else:
        rep = ev.cross_class_matrix(fold[0], fold[1], bundle, tcfg)
    resolved = {"command": "ablate", "ablation": args.name, "seed": tcfg.seed, "train": asdict(tcfg),
                "data": args.data, "fold": args.fold}
    rep.config = {**rep.config, **resolved}
    _write_report(rep, out, args.save_records)
    _echo(out, resolved)
    print(json.dumps(rep.rows, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    base = ev.load_records(_existing(args.baseline, "baseline records"))
    prom = ev.load_records(_existing(args.prompted, "prompted records"))
    queries = load_dataset(_existing(args.queries, "query dataset"))
    pool = load_dataset(_existing(args.pool, "pool dataset"))
    out = _out(args)
    try:
        img = ev.render_comparison(base, prom, queries, pool, args.columns, out / "grid.png", args.cell)
    except KeyError as e:
        raise CliError(f"missing record: {e}") from e
    _echo(out, {"command": "render", "baseline": args.baseline, "prompted": args.prompted,
                "columns": args.columns, "cell": args.cell})
    print(f"wrote {out / 'grid.png'} ({img.shape[1]}x{img.shape[0]})")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="cap on torch intra-op threads")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--placement", choices=list(PLACEMENTS))
    p.add_argument("--pad", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vicprompt", description="Border-prompted visual in-context learning on toy data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and its folds")
    _common(p, "data")
    p.add_argument("--classes", help="comma-separated shape classes")
    p.add_argument("--per-class", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--domain", type=int)
    p.add_argument("--task", choices=["segmentation", "detection"])
    p.add_argument("--folds", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain and freeze the toy backbone")
    _common(p, "backbone")
    p.add_argument("--data", nargs="+", required=True, help="dataset directories")
    p.add_argument("--tok-steps", type=int)
    p.add_argument("--pred-steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-prompt", help="train a border prompt on one training set")
    _common(p, "prompt")
    p.add_argument("--backbone", required=True)
    p.add_argument("--train", required=True, help="training dataset directory")
    _train_flags(p)
    p.set_defaults(func=cmd_train_prompt)

    p = sub.add_parser("eval", help="baseline vs prompt, domain shift or token agreement")
    _common(p, "eval")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--fold", help="fold index or 'all' (default)")
    p.add_argument("--experiment", choices=["fold", "domain-shift", "token-agreement"], default="fold")
    p.add_argument("--prompt", help="evaluate this prompt checkpoint instead of training")
    p.add_argument("--baseline-only", action="store_true")
    p.add_argument("--shifted", help="shifted in-context pool for domain-shift")
    p.add_argument("--save-records", action="store_true")
    p.add_argument("--grid", type=int, default=0, help="render a comparison grid with this many columns")
    _train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="placement / padding / dataset-size / cross-class experiments")
    _common(p, "ablate")
    p.add_argument("name", help=f"one of: {', '.join(ABLATIONS)}")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold")
    p.add_argument("--pads", default="2,4,6,8,10,12")
    p.add_argument("--sizes", default="16,32,64,128,256,all")
    p.add_argument("--save-records", action="store_true")
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="comparison grid from saved prediction records")
    _common(p, "render")
    p.add_argument("--baseline", required=True, help="baseline records directory")
    p.add_argument("--prompted", required=True, help="prompted records directory")
    p.add_argument("--queries", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--columns", type=int, default=8)
    p.add_argument("--cell", type=int, default=32)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.workers is not None:
        if args.workers < 1:
            parser.error("--workers must be >= 1")
        torch.set_num_threads(args.workers)
    if args.command == "ablate" and args.name not in ABLATIONS:
        parser.error(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
