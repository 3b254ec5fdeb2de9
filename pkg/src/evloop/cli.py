"""Command-line interface: ``evloop <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import METHODS, explain, save_map
from .augmentation import augment
from .benchmark import evaluate_localization
from .classifier import PRESETS, get_preset, load_model, predict, save_model, train
from .config import ConfigError, RunConfig
from .errors import EvloopError
from .evaluation import grade_from_prediction
from .imaging import preprocess
from .render import side_by_side
from .synthetic import LESION_TYPES, generate_dataset, load_dataset, load_png, save_png

log = logging.getLogger("evloop")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name != "run_config.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.set("seed", None, args.seed)
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_config(args)
    if args.counts:
        cfg.set("counts", None, _parse_counts(args.counts))
    cfg.set("generator", "size", args.size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(out, cfg.counts(), cfg.generator_config(), cfg.seed)
    cfg.write(out)
    per_grade = {}
    for e in manifest["entries"]:
        per_grade[e["grade"]] = per_grade.get(e["grade"], 0) + 1
    print(f"wrote {len(manifest['entries'])} scenes to {out}")
    print(f"per grade: {json.dumps({str(k): v for k, v in sorted(per_grade.items())})}")
    print(f"generator_cfg_hash: {manifest['generator_cfg_hash']}")
    print(f"dataset_sha256: {_tree_digest(out)}")
    return EXIT_OK


def _parse_counts(text):
    try:
        pairs = [item.split("=") for item in text.split(",") if item]
        return {str(int(g)): int(n) for g, n in pairs}
    except ValueError as exc:
        raise ConfigError(f"--counts expects grade=n pairs, e.g. 0=10,1=10 ({exc})") from exc


def cmd_train(args):
    cfg = _load_config(args)
    cfg.set("preset", None, args.preset)
    cfg.set("train", "epochs", args.epochs)
    cfg.set("train", "batch_size", args.batch_size)
    cfg.set("train", "learning_rate", args.learning_rate)
    cfg.set("train", "validation_fraction", args.validation_fraction)
    cfg.set("preprocess", "target_size", args.input_size)
    images, grades, _ = load_dataset(args.data_dir)

    def progress(epoch, hist):
        auc = hist.val_auc[-1] if hist.val_auc else float("nan")
        print(f"epoch {epoch + 1}: train_loss={hist.train_loss[-1]:.4f} val_auc={auc:.4f}", flush=True)

    spec = cfg.preprocess_spec()
    model, hist = train(images, grades, get_preset(cfg.data["preset"], spec.target_size),
                        cfg.train_config(), spec, on_epoch=progress)
    out = save_model(model, args.out_model)
    cfg.write(out)
    _write_json(out / "history.json", {"train_loss": hist.train_loss, "val_loss": hist.val_loss,
                                        "val_auc": hist.val_auc, "best_epoch": hist.best_epoch})
    m = model.metadata["metrics"]
    print(f"validation: AUC={m['auc']:.4f} kappa={m['kappa']:.4f} SE={m['se']:.4f} SP={m['sp']:.4f} "
          f"th_pred={model.th_pred:.6g}")
    return EXIT_OK


def cmd_grade(args):
    model = load_model(args.model)
    rows = []
    for path in args.images:
        image = load_png(path)
        y = predict(model, image, preprocess_input=not args.preprocessed)
        rows.append({"image": str(path), "y_hat": y, "grade": int(grade_from_prediction([y])[0]),
                     "referable": bool(model.referable(y))})
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        _write_json(args.out, rows)
    return EXIT_OK


def _attribution_overrides(cfg, args):
    cfg.set("attribution", "method", args.method)
    cfg.set("attribution", "ig_steps", getattr(args, "ig_steps", None))
    cfg.set("attribution", "grad_cam_layer", getattr(args, "grad_cam_layer", None))
    cfg.set("augment", "T_max", getattr(args, "t_max", None))
    cfg.set("augment", "alpha", getattr(args, "alpha", None))


def cmd_explain(args):
    cfg = _load_config(args)
    _attribution_overrides(cfg, args)
    model = load_model(args.model)
    raw = load_png(args.image)
    x = np.asarray(raw) if args.preprocessed else preprocess(raw, model.preprocessing)
    aug_cfg = cfg.augment_config()
    att = aug_cfg.attribution
    if att.method in ("grad_cam", "guided_grad_cam") and att.grad_cam_layer is None:
        cfg.set("attribution", "grad_cam_layer", model.preset.grad_cam_layer)
        aug_cfg = cfg.augment_config()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    y = predict(model, x)
    if args.augment:
        res = augment(x, model, aug_cfg)
        save_map(out / "initial.evmap", res.initial_map.grid)
        save_map(out / "augmented.evmap", res.augmented_map.grid)
        _write_json(out / "trace.json", res.trace.to_dict())
        grids = [res.initial_map.grid, res.augmented_map.grid]
        print(f"y_hat={y:.6g} th_pred={model.th_pred:.6g} reason={res.trace.reason} "
              f"iterations={len(res.trace)}")
    else:
        m = explain(model, x, aug_cfg.attribution)
        save_map(out / "initial.evmap", m.grid)
        grids = [m.grid]
        print(f"y_hat={y:.6g} th_pred={model.th_pred:.6g}")
    save_png(out / "overlay.png", side_by_side(x, grids))
    cfg.write(out)
    return EXIT_OK


def cmd_eval_froc(args):
    cfg = _load_config(args)
    _attribution_overrides(cfg, args)
    cfg.set("evaluation", "radius_pct", args.radius_pct)
    cfg.set("evaluation", "fp_rate", args.fp_rate)
    cfg.set("evaluation", "augment", args.augment)
    ev = cfg.evaluation
    model = load_model(args.model)
    images, _, ids, masks = load_dataset(args.data_dir, with_masks=True)
    if args.limit is not None:
        images, ids, masks = images[: args.limit], ids[: args.limit], masks[: args.limit]
    aug_cfg = cfg.augment_config()
    try:
        report = evaluate_localization(model, images, masks, aug_cfg.attribution.method,
                                       augment_maps=bool(ev["augment"]), radius_pct=ev["radius_pct"],
                                       fp_rate=ev["fp_rate"], aug_config=aug_cfg,
                                       per_image=bool(ev["per_image"]))
    except ValueError as exc:
        if "referable" in str(exc):
            raise EvloopError(f"{exc} (dataset {args.data_dir}, {len(ids)} images)") from exc
        raise
    out = Path(args.out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    for variant, per in report.curves.items():
        for kind, curve in per.items():
            curve.to_csv(out / "curves" / f"{variant}_{kind}.csv")
            curve.to_json(out / "curves" / f"{variant}_{kind}.json")
    summary = report.summary()
    _write_json(out / "summary.json", summary)
    traces = {ids[o.index]: o.trace.to_dict() for o in report.outcomes if o.trace is not None}
    if traces:
        _write_json(out / "traces.json", traces)
    _write_comparison(out / "comparison.csv", summary)
    cfg.write(out)
    print(f"method={report.method} r={report.radius}px referable={report.n_referable}/{report.n_images}")
    print(format_table([summary]))
    return EXIT_OK


def _write_comparison(path, summary):
    table = summary["se_at_10fp"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lesion_type", "initial", "augmented", "relative_change"])
        for kind in LESION_TYPES:
            init = table["initial"].get(kind)
            if init is None:
                continue
            aug = table.get("augmented", {}).get(kind)
            rel = "" if aug is None or init == 0 else repr((aug - init) / init)
            wr.writerow([kind, repr(init), "" if aug is None else repr(aug), rel])


def _pct(x):
    return "n/a" if x is None or not np.isfinite(x) else f"{100 * x:+.1f}%"


def format_table(summaries):
    """Plain-text comparison of initial vs augmented SE/10FP per run."""
    head = ["method", "r"] + list(LESION_TYPES) + ["mean", "rel. change"]
    lines = [" | ".join(head), " | ".join("---" for _ in head)]
    for s in summaries:
        for variant in ("initial", "augmented"):
            if variant not in s["se_at_10fp"]:
                continue
            row = s["se_at_10fp"][variant]
            cells = [f"{s['method']} ({variant})", str(s["r"])]
            cells += [f"{row[k]:.3f}" if k in row else "-" for k in LESION_TYPES]
            cells.append(f"{s['mean_se_at_10fp'][variant]:.3f}")
            cells.append(_pct(s.get("relative_change")) if variant == "augmented" else "")
            lines.append(" | ".join(cells))
    return "\n".join(lines)


def cmd_report(args):
    summaries = []
    for d in args.result_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run eval-froc first")
        summaries.append(json.loads(path.read_text()))
    text = format_table(summaries)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")

    p = _Parser(prog="evloop", description="Iterative visual-evidence augmentation toolkit.")
    p.add_argument("--version", action="version", version=f"evloop {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic phantom dataset")
    g.add_argument("out_dir")
    g.add_argument("--counts", help="scenes per grade, e.g. 0=10,1=10,2=10,3=10")
    g.add_argument("--size", type=int, help="image side in pixels")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a severity regressor")
    t.add_argument("data_dir")
    t.add_argument("out_model")
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--validation-fraction", type=float)
    t.add_argument("--input-size", type=int)
    t.set_defaults(func=cmd_train)

    gr = sub.add_parser("grade", help="predict severity for images")
    gr.add_argument("model")
    gr.add_argument("images", nargs="+")
    gr.add_argument("--preprocessed", action="store_true", help="images are already model-sized")
    gr.add_argument("--out", help="also write the results as JSON")
    gr.set_defaults(func=cmd_grade)

    def attribution_flags(sp):
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--ig-steps", type=int)
        sp.add_argument("--grad-cam-layer")
        sp.add_argument("--t-max", type=int)
        sp.add_argument("--alpha", type=float)

    e = sub.add_parser("explain", parents=[common], help="explain one image")
    e.add_argument("model")
    e.add_argument("image")
    e.add_argument("out_dir")
    attribution_flags(e)
    e.add_argument("--augment", action="store_true", help="run the augmentation loop")
    e.add_argument("--preprocessed", action="store_true")
    e.set_defaults(func=cmd_explain)

    f = sub.add_parser("eval-froc", parents=[common], help="FROC localisation benchmark")
    f.add_argument("model")
    f.add_argument("data_dir")
    f.add_argument("out_dir")
    attribution_flags(f)
    f.add_argument("--augment", dest="augment", action="store_true", default=None)
    f.add_argument("--no-augment", dest="augment", action="store_false")
    f.add_argument("--radius-pct", type=float)
    f.add_argument("--fp-rate", type=float)
    f.add_argument("--limit", type=int, help="evaluate only the first N scenes")
    f.set_defaults(func=cmd_eval_froc)

    r = sub.add_parser("report", help="tabulate eval-froc results")
    r.add_argument("result_dirs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except EvloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
