"""Command-line pipelines: synthesis, training, inference, evaluation and reports.

Exit codes: 0 success, 2 validation error, 3 numerical failure. Failures print
one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

DATA_ENV = "SPINEMESH_DATA"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("spinemesh")


class CliError(ValueError):
    pass


# --- config ---------------------------------------------------------------------
def _coerce(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in s:
        return tuple(_coerce(p) for p in s.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config(text: str, where: str = "config") -> dict:
    """``key = value`` lines; '#' starts a comment. Comma-separated values become tuples."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{where}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise CliError(f"{where}:{n}: empty key")
        out[k] = _coerce(v)
    return out


def load_config(path, overrides=()) -> dict:
    cfg = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file {p} not found")
        cfg = parse_config(p.read_text(), str(p))
    for item in overrides or ():
        cfg.update(parse_config(item, "--set"))
    _check_keys(cfg)
    return cfg


def _section(cfg: dict, prefix: str, allowed) -> dict:
    out = {}
    for k, v in cfg.items():
        if k.startswith(prefix + "."):
            name = k[len(prefix) + 1:]
            if name not in allowed:
                raise CliError(f"unknown config key {k!r}; allowed: "
                               f"{', '.join(prefix + '.' + a for a in sorted(allowed))}")
            out[name] = v
    return out


KNOWN_PREFIXES = ("model", "stage1", "stage2", "stage3", "estimator", "pretrain")
KNOWN_KEYS = ("seed", "split", "joint")


def _check_keys(cfg: dict):
    for k in cfg:
        if k in KNOWN_KEYS:
            continue
        if "." not in k or k.split(".", 1)[0] not in KNOWN_PREFIXES:
            raise CliError(f"unknown config key {k!r}")


def echo_config(path, command: str, args: argparse.Namespace, cfg: dict | None = None):
    """Write the exact parameters of a run next to its outputs."""
    lines = [f"command = {command}"]
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command"):
            continue
        lines.append(f"arg.{k} = {_fmt_cfg(v)}")
    for k, v in sorted((cfg or {}).items()):
        lines.append(f"{k} = {_fmt_cfg(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_cfg(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


# --- shared helpers ------------------------------------------------------------------
def _num(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6f}"
    return v


def write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _num(r[k]) for k in columns})


def read_csv(path) -> list:
    p = Path(path)
    if not p.exists():
        raise CliError(f"report {p} not found")
    with open(p, newline="") as f:
        return list(csv.DictReader(f))


def _data_dir(value) -> Path:
    d = value or os.environ.get(DATA_ENV)
    if not d:
        raise CliError(f"no data directory: pass --data or set {DATA_ENV}")
    p = Path(d)
    if not p.is_dir():
        raise CliError(f"data directory {p} does not exist")
    return p


def _template_for(samples):
    from .synth import PhantomSpec, canonical_template
    s = samples[0]
    return canonical_template(PhantomSpec(seed=0, image_side=int(s.image.shape[-1]),
                                          pixel_spacing_mm=float(s.pixel_spacing_mm)))


def _template_meta(t) -> dict:
    from .geometry import mesh_to_dict
    # the checkpoint manifest sorts keys, so keep the object order explicitly
    return {**mesh_to_dict(t), "object_order": list(t.objects)}


def _template_from_meta(d: dict):
    from .geometry import mesh_from_dict
    order = d.get("object_order", list(d["objects"]))
    d = {**d, "objects": {k: d["objects"][k] for k in order}}
    return mesh_from_dict(d, "checkpoint template")


def _load(path, **kw):
    from .synth import load_dataset
    return load_dataset(path, **kw)


def _select(samples, meta: dict, which: str):
    if which == "all":
        return samples
    ids = meta.get("split", {}).get(which)
    if ids is None:
        raise CliError(f"checkpoint has no {which!r} split recorded")
    keep = set(ids)
    out = [s for s in samples if s.sample_id in keep]
    if not out:
        raise CliError(f"no samples of the {which!r} split found in the data directory")
    return out


def _load_preds(pred_dir, gt_samples):
    """Predicted Shapes on each GT sample's template, in GT order."""
    from .geometry import load_mesh
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise CliError(f"prediction directory {pred_dir} does not exist")
    by_id = {s.sample_id: s for s in gt_samples}
    ids = sorted(p.name for p in pred_dir.iterdir() if (p / "mesh.json").exists())
    if not ids:
        raise CliError(f"no predicted meshes under {pred_dir}")
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError(f"predictions without ground truth: {missing[:5]}")
    gts = [by_id[i] for i in ids]
    preds = [load_mesh(pred_dir / i / "mesh.json", g.shape.template, polygons=False)
             for i, g in zip(ids, gts)]
    return ids, preds, gts


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def _stats(vals, low: bool = False) -> dict:
    v = np.asarray(vals, dtype=np.float64)
    if low:
        return {"mean": v.mean(), "std": v.std(), "min": v.min(), "q5": np.quantile(v, 0.05)}
    return {"mean": v.mean(), "std": v.std(), "max": v.max(), "q95": np.quantile(v, 0.95)}


# --- commands ---------------------------------------------------------------------
def cmd_synth(args):
    from .synth import generate_dataset, save_dataset
    if args.count < 1:
        raise CliError("--count must be >= 1")
    out = Path(args.out)
    data = generate_dataset(args.count, seed=args.seed, image_side=args.side)
    save_dataset(data, out)
    echo_config(out / "run_config.txt", "synth", args)
    print(f"wrote {len(data)} samples to {out}")


def _stage_configs(cfg: dict):
    from .training import StageConfig
    allowed = {f.name for f in fields(StageConfig)} - {"stage"}
    defaults = {1: 2000, 2: 4000, 3: 4000}
    return [StageConfig(stage=t, **{"steps": defaults[t], **_section(cfg, f"stage{t}", allowed)})
            for t in (1, 2, 3)]


def _model_config(cfg: dict, kind: str, side: int):
    from .models import ModelConfig
    allowed = {f.name for f in fields(ModelConfig)} - {"kind"}
    kw = {"image_side": side, "seed": int(cfg.get("seed", 0))}
    kw.update(_section(cfg, "model", allowed))
    return ModelConfig(kind=kind, **kw)


def _split(samples, cfg: dict):
    from .synth import split
    ratios = cfg.get("split", (0.8, 0.1, 0.1))
    if not isinstance(ratios, tuple) or len(ratios) != 3:
        raise CliError("split must be three comma-separated ratios")
    return split(samples, ratios, seed=int(cfg.get("seed", 0)))


def _split_meta(parts):
    return {name: [s.sample_id for s in p] for name, p in zip(("train", "val", "test"), parts)}


def cmd_pretrain(args):
    from .models import build_model, save_checkpoint
    from .training import pretrain_unet
    cfg = load_config(args.config, args.set)
    cfg.setdefault("seed", args.seed)
    _check_keys(cfg)
    samples = _load(_data_dir(args.data), require_masks=True)
    parts = _split(samples, cfg)
    mcfg = _model_config(cfg, "unet", int(samples[0].image.shape[-1]))
    net = build_model(mcfg)
    p = _section(cfg, "pretrain", {"steps", "batch_size", "lr"})
    losses = pretrain_unet(net, parts[0], seed=mcfg.seed, log_path=f"{args.out}.log.csv", **p)
    save_checkpoint(net, args.out, {"split": _split_meta(parts),
                                    "template": _template_meta(_template_for(samples)),
                                    "final_loss": losses[-1] if losses else None})
    echo_config(f"{args.out}.config.txt", "pretrain-backbone", args, cfg)
    print(f"pretrained backbone -> {args.out}")


def cmd_train(args):
    from .models import build_model, load_backbone, load_checkpoint, save_checkpoint
    from .training import train, train_estimator
    cfg = load_config(args.config, args.set)
    cfg.setdefault("seed", args.seed)
    _check_keys(cfg)
    samples = _load(_data_dir(args.data))
    parts = _split(samples, cfg)
    template = _template_for(samples)
    side = int(samples[0].image.shape[-1])
    if args.model in ("unet-deformsa", "unet-mlp"):
        if not args.backbone:
            raise CliError(f"--backbone CKPT is required for {args.model}")
        seg, _ = load_checkpoint(args.backbone)
        cfg = {**cfg, "model.unet_widths": seg.cfg.unet_widths,
               "model.unet_pools": seg.cfg.unet_pools}
    mcfg = _model_config(cfg, args.model, side)
    model = build_model(mcfg)
    log_path = args.log or f"{args.out}.log.csv"
    extra = {"split": _split_meta(parts), "template": _template_meta(template)}
    if args.model == "error-estimator":
        p = _section(cfg, "estimator", {"steps", "batch_size", "lr", "lr_final"})
        train_estimator(model, parts[0], template=template, seed=mcfg.seed, log_path=log_path, **p)
    else:
        if args.model.startswith("unet"):
            load_backbone(model, seg)
        joint = cfg.get("joint", False)
        if not isinstance(joint, bool):
            raise CliError(f"joint must be true or false, got {joint!r}")
        res = train(model, parts[0], parts[1], _stage_configs(cfg), template=template,
                    seed=mcfg.seed, log_path=log_path, joint=joint)
        extra.update(best_val_appd_px=res.best_val, best_step=res.best_step)
    save_checkpoint(model, args.out, extra)
    echo_config(f"{args.out}.config.txt", "train", args, cfg)
    print(f"trained {args.model} -> {args.out}")


def _load_model(path, kinds=None):
    from .models import load_checkpoint
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} not found")
    model, meta = load_checkpoint(path)
    if kinds and model.cfg.kind not in kinds:
        raise CliError(f"checkpoint holds a {model.cfg.kind!r} model, expected one of {kinds}")
    template = _template_from_meta(meta["template"]) if "template" in meta else None
    return model, meta, template


DEFORMERS = ("transdeformer", "unet-deformsa", "unet-mlp")


def cmd_infer(args):
    from .geometry import save_mesh
    from .training import predict_dataset
    model, meta, template = _load_model(args.ckpt, DEFORMERS)
    samples = _select(_load(_data_dir(args.data)), meta, args.split)
    template = template or _template_for(samples)
    pred = predict_dataset(model, samples, template, args.init, seed=args.seed)
    out = Path(args.out)
    for s, p in zip(samples, pred):
        d = out / s.sample_id
        d.mkdir(parents=True, exist_ok=True)
        save_mesh(d / "mesh.json", s.shape.with_points(p))
    echo_config(out / "run_config.txt", "infer", args)
    print(f"wrote {len(samples)} predictions to {out}")


def cmd_eval(args):
    from .geometry import OBJECT_NAMES, appd, dice
    gt = _load(Path(args.gt), validate_polygons=False)
    ids, preds, gts = _load_preds(args.pred, gt)

    def one(k):
        return appd(preds[k], gts[k].shape, gts[k].pixel_spacing_mm), \
            dice(preds[k], gts[k].shape)
    results = _pmap(one, range(len(ids)), args.threads)
    rows = []
    for name in OBJECT_NAMES + ("whole",):
        a = _stats([r[0][name] for r in results])
        d = _stats([r[1][name] for r in results], low=True)
        rows.append({"object": name, "n": len(ids), "appd_mean_mm": a["mean"],
                     "appd_std_mm": a["std"], "appd_max_mm": a["max"], "appd_q95_mm": a["q95"],
                     "dice_mean": d["mean"], "dice_std": d["std"], "dice_min": d["min"],
                     "dice_q5": d["q5"]})
    write_csv(args.out, rows)
    print(f"whole APPD {rows[-1]['appd_mean_mm']:.4f} mm, Dice {rows[-1]['dice_mean']:.4f}")


def cmd_robustness(args):
    from .training import robustness_sweep
    model, meta, template = _load_model(args.ckpt, DEFORMERS)
    samples = _select(_load(_data_dir(args.data)), meta, args.split)
    template = template or _template_for(samples)
    spacing = samples[0].pixel_spacing_mm
    rows = robustness_sweep(model, samples, template, args.radii, seed=args.seed)
    out = [{"radius_px": r["radius_px"], "appd_mean_mm": r["mean"] * spacing,
            "appd_std_mm": r["std"] * spacing, "appd_max_mm": r["max"] * spacing,
            "appd_q95_mm": r["q95"] * spacing, "appd_mean_px": r["mean"]} for r in rows]
    write_csv(args.out, out)
    print("radius_px appd_mean_mm: " + ", ".join(f"{r['radius_px']:g}:{r['appd_mean_mm']:.3f}"
                                                 for r in out))


def _read_errors(path, ids):
    rows = read_csv(path)
    if not rows or "sample_id" not in rows[0] or "estimated_error_mm" not in rows[0]:
        raise CliError(f"{path}: expected columns sample_id, estimated_error_mm")
    table = {r["sample_id"]: float(r["estimated_error_mm"]) for r in rows}
    missing = [i for i in ids if i not in table]
    if missing:
        raise CliError(f"{path}: no estimate for samples {missing[:5]}")
    return [table[i] for i in ids]


def cmd_measure(args):
    from .measure import relative_error_report
    gt = _load(Path(args.gt), validate_polygons=False)
    ids, preds, gts = _load_preds(args.pred, gt)
    est = _read_errors(args.errors, ids) if args.errors else None
    rows = relative_error_report(preds, [g.shape for g in gts], est, tuple(args.alphas))
    write_csv(args.out, rows, ["alpha", "parameter", "n", "mean", "std", "max", "q95"])
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_rank_errors(args):
    from .training import correlations, estimate_errors, point_errors_mm, rank_and_filter
    model, _, _ = _load_model(args.ckpt, ("error-estimator",))
    gt = _load(_data_dir(args.data), validate_polygons=False)
    ids, preds, gts = _load_preds(args.pred, gt)
    images = np.stack([g.image[None] for g in gts]).astype(np.float64)
    shapes = np.stack([p.points for p in preds])
    est = estimate_errors(model, images, shapes).mean(axis=1)
    side = int(gts[0].image.shape[-1])
    true = np.array([point_errors_mm(p.points, g.shape.points, side, g.pixel_spacing_mm).mean()
                     for p, g in zip(preds, gts)])
    rank = np.empty(len(ids), dtype=int)
    rank[rank_and_filter(est, 100, ids=np.arange(len(ids)))] = np.arange(1, len(ids) + 1)
    write_csv(args.out, [{"sample_id": i, "estimated_error_mm": e, "true_error_mm": t,
                          "rank": int(r)} for i, e, t, r in zip(ids, est, true, rank)])
    corr_path = Path(args.out).with_name(Path(args.out).stem + "_correlation.csv")
    try:
        pearson, spearman = correlations(est, true)
    except ValueError as e:
        # too few or constant samples: keep the per-sample table, report NaN
        log.warning("correlation skipped: %s", e)
        pearson = spearman = float("nan")
    write_csv(corr_path, [{"n": len(ids), "pearson": pearson, "spearman": spearman}])
    print(f"pearson {pearson:.4f} spearman {spearman:.4f} ({len(ids)} samples)")


def cmd_gradcheck(args):
    from .gradsuite import run_suite
    rows = run_suite(args.suite)
    write_csv(args.out, rows, ["name", "max_rel_error", "passed"])
    bad = [r["name"] for r in rows if not r["passed"]]
    print(f"{len(rows) - len(bad)}/{len(rows)} gradient checks passed")
    if bad:
        raise FloatingPointError(f"gradient checks failed: {', '.join(bad)}")


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "spinemesh"
    rows = read_csv(args.report)
    if not rows:
        raise CliError(f"{args.report}: empty report")
    cols = set(rows[0])
    fig, ax = plt.subplots(figsize=(6, 4))
    f = lambda k: [float(r[k]) for r in rows]
    if {"radius_px", "appd_mean_mm"} <= cols:
        ax.errorbar(f("radius_px"), f("appd_mean_mm"), yerr=f("appd_std_mm"), marker="o")
        ax.set_xlabel("initialisation radius (px)")
        ax.set_ylabel("APPD (mm)")
    elif {"object", "appd_mean_mm"} <= cols:
        names = [r["object"] for r in rows]
        ax.bar(names, f("appd_mean_mm"), yerr=f("appd_std_mm"))
        ax.set_ylabel("APPD (mm)")
    elif {"alpha", "parameter", "mean"} <= cols:
        params = list(dict.fromkeys(r["parameter"] for r in rows))
        alphas = list(dict.fromkeys(r["alpha"] for r in rows))
        width = 0.8 / len(alphas)
        for k, a in enumerate(alphas):
            vals = {r["parameter"]: float(r["mean"]) for r in rows if r["alpha"] == a}
            ax.bar(np.arange(len(params)) + k * width, [vals[p] for p in params], width,
                   label=f"alpha={a}%")
        ax.set_xticks(np.arange(len(params)) + 0.4 - width / 2, params, rotation=60)
        ax.set_ylabel("relative error")
        ax.legend()
    elif {"estimated_error_mm", "true_error_mm"} <= cols:
        ax.scatter(f("true_error_mm"), f("estimated_error_mm"), s=10)
        ax.set_xlabel("true mean error (mm)")
        ax.set_ylabel("estimated mean error (mm)")
    elif {"name", "max_rel_error"} <= cols:
        ax.barh([r["name"] for r in rows], np.maximum(f("max_rel_error"), 1e-16))
        ax.set_xscale("log")
        ax.set_xlabel("max relative error")
    elif {"step", "loss"} <= cols:
        ax.plot(f("step"), f("loss"))
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    else:
        raise CliError(f"{args.report}: unrecognised report layout {sorted(cols)}")
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")


# --- parser -----------------------------------------------------------------------
def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="per-sample worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="spinemesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    s = sub.add_parser("synth", help="generate a phantom dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--side", type=int, default=128)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain-backbone", help="pretrain the UNet with the segmentation loss")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train a deformation model or the error estimator")
    s.add_argument("--model", required=True,
                   choices=("transdeformer", "unet-deformsa", "unet-mlp", "error-estimator"))
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--backbone", help="pretrained UNet checkpoint (UNet models)")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="two-stage inference; writes <out>/<id>/mesh.json")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--init", choices=("center", "random"), default="center")
    s.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="APPD and Dice tables")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("robustness", help="APPD versus template initialisation radius")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--radii", type=_floats, default=[0, 10, 20, 30, 40])
    s.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_robustness)

    s = sub.add_parser("measure", help="relative errors of the medical parameters")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--errors")
    s.add_argument("--alphas", type=_floats, default=[100, 60, 20])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("rank-errors", help="estimate shape errors and correlate with truth")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank_errors)

    s = sub.add_parser("gradcheck", help="central-difference gradient suite")
    s.add_argument("--suite", choices=("ops", "models", "all"), default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="static SVG plot of a report CSV")
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"status": "error", "code": code, "kind": kind,
                      "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .autodiff.tensor import NonFiniteError
    from .training import TrainingDiverged
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.threads < 1:
        return _fail(EXIT_VALIDATION, "validation", CliError("--threads must be >= 1"))
    try:
        args.func(args)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, "numerical", e)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError, TypeError) as e:
        return _fail(EXIT_VALIDATION, "validation", e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
