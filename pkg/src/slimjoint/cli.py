"""Command-line entry point.

    slimjoint train <config.json>
    slimjoint eval <checkpoint> <config.json> [--grid N] [--out curve.csv]
    slimjoint plot <curve.csv>... --out <file.svg>

Exit codes: 0 success, 2 invalid config or input, 3 runtime failure,
4 checkpoint incompatible with the config.  Log verbosity comes from the
SLIMJOINT_LOG environment variable (DEBUG, INFO, WARNING; default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from xml.sax.saxutils import escape

import jsonschema
import numpy as np

from . import archspec, data, drivers, nn, pareto

log = logging.getLogger("slimjoint")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECKPOINT = 0, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.sjckpt"
HISTORY_NAME = "history.csv"
LOG_NAME = "log.jsonl"
PARETO_NAME = "pareto.csv"
PLOT_NAME = "pareto.svg"
CURVE_NAME = "curve.csv"
DEFAULT_GRID = 50
DEFAULT_K = 50


class ConfigError(ValueError):
    pass


# -- config -----------------------------------------------------------------------------


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


def _field_name(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    return path or "<root>"


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(load_schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise ConfigError(f"invalid config field '{_field_name(err)}': {err.message}")
    return doc


def build_dataset(cfg: dict) -> data.Dataset:
    ds = dict(cfg["dataset"])
    kind = ds.pop("kind")
    if kind == "idx":
        return data.load_idx(ds["images"], ds["labels"], val_images=ds["val_images"],
                             val_labels=ds["val_labels"])
    ds.setdefault("seed", cfg.get("seed", 0))
    ds.setdefault("noise", 0.1)
    if kind == "spirals":
        return data.synth_spirals(**ds)
    return data.synth_blobs(**ds)


def build_spec(cfg: dict, dataset: data.Dataset) -> archspec.ArchSpec:
    sample = dataset.inputs[0]
    if sample.ndim == 3:
        h, w, c = sample.shape
    else:
        h, w, c = 1, 1, int(sample.size)
    params = dict(cfg.get("arch_params", {}))
    if cfg["arch"] == "tiny-mlp":
        if "base" in params:
            raise ConfigError("invalid config field 'arch_params.base': tiny-mlp takes 'hidden'")
        return archspec.tiny_mlp(in_features=w * h * c, num_classes=dataset.class_count,
                                 **params)
    if "hidden" in params:
        raise ConfigError("invalid config field 'arch_params.hidden': tiny-resnet takes 'base'")
    return archspec.tiny_resnet(input_resolution=(w, h, c), num_classes=dataset.class_count,
                                **params)


def build_run_config(cfg: dict) -> drivers.JoslimConfig:
    train = nn.TrainConfig(**cfg.get("train", {}), seed=cfg.get("seed", 0))
    if "K" in cfg:
        K = cfg["K"]
    else:
        K = None if train.epochs > 0 else DEFAULT_K
    keys = ("F", "M", "w0", "epsilon", "max_search_iters", "cost_objective", "gp_hyper_opt",
            "beta", "sampler", "seed")
    return drivers.JoslimConfig(K=K, train=train, **{k: cfg[k] for k in keys if k in cfg})


# -- outputs ----------------------------------------------------------------------------


class _Outputs:
    """Tracks files written by one run so a failure leaves nothing behind."""

    def __init__(self, directory: Path):
        self.dir = directory
        self.created_dir = not directory.exists()
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.files.append(p)
        return p

    def discard(self) -> None:
        for p in self.files:
            p.unlink(missing_ok=True)
        if self.created_dir and self.dir.exists() and not any(self.dir.iterdir()):
            self.dir.rmdir()


def _pareto_rows(art: drivers.RunArtifacts, dataset: data.Dataset):
    val = dataset.val
    rows = []
    for i in art.pareto:
        e = art.history.entries[i]
        err = nn.evaluate(art.weights, art.spec, e.width, val)[1] if len(val) else float("nan")
        rows.append((e.cost, e.ce, err, e.width))
    return rows


# -- SVG --------------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(curves, width: int = 640, height: int = 420) -> str:
    """curves: list of (label, costs, errors).  Returns a standalone SVG document."""
    left, right, top, bottom = 70, 20, 20, 50
    all_c = np.concatenate([np.asarray(c, float) for _, c, _ in curves])
    all_e = np.concatenate([np.asarray(e, float) for _, _, e in curves])
    c0, c1 = float(all_c.min()), float(all_c.max())
    e0, e1 = float(all_e.min()), float(all_e.max())
    if c1 == c0:
        c0, c1 = c0 - 0.5, c1 + 0.5
    if e1 == e0:
        e0, e1 = e0 - 0.5, e1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def xy(c, e):
        return (left + (c - c0) / (c1 - c0) * pw, top + (1 - (e - e0) / (e1 - e0)) * ph)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">cost</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">error</text>',
        f'<text x="{left}" y="{top + ph + 16}" font-size="10" text-anchor="middle">{c0:.6g}</text>',
        f'<text x="{left + pw}" y="{top + ph + 16}" font-size="10" '
        f'text-anchor="middle">{c1:.6g}</text>',
        f'<text x="{left - 6}" y="{top + ph}" font-size="10" text-anchor="end">{e0:.4g}</text>',
        f'<text x="{left - 6}" y="{top + 10}" font-size="10" text-anchor="end">{e1:.4g}</text>',
    ]
    for k, (label, costs, errors) in enumerate(curves):
        color = _PALETTE[k % len(_PALETTE)]
        order = np.argsort(np.asarray(costs, float), kind="stable")
        pts = [xy(float(costs[i]), float(errors[i])) for i in order]
        if len(pts) == 1:
            x, y = pts[0]
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{color}"/>')
        else:
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                       f'points="{coords}"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 + 16 * k}" font-size="12" '
                   f'text-anchor="end" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- commands ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        dataset = build_dataset(cfg)
        spec = build_spec(cfg, dataset)
        run_cfg = build_run_config(cfg)
    except (ConfigError, ValueError, data.IdxFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outputs = _Outputs(Path(cfg["output_dir"]))
    try:
        log.info("training %s on %s, %d samples", cfg["method"], spec.name, len(dataset))
        art = drivers.TRAINERS[cfg["method"]](spec, dataset, run_cfg)
        art.history.to_csv(outputs.path(HISTORY_NAME), spec.d)
        art.write_log(outputs.path(LOG_NAME))
        rows = _pareto_rows(art, dataset)
        pareto.write_curve_csv(outputs.path(PARETO_NAME), rows, spec.d)
        extra = {"method": art.method, "pareto_widths": art.pareto_widths,
                 "lower": art.lower}
        nn.save_checkpoint(outputs.path(CHECKPOINT_NAME), art.weights, spec,
                           config=cfg, step=art.total_steps, extra=extra)
        if cfg.get("plot"):
            svg = render_svg([(art.method, [r[0] for r in rows], [r[2] for r in rows])])
            outputs.path(PLOT_NAME).write_text(svg)
    except Exception as exc:  # any failure: remove this run's partial outputs
        outputs.discard()
        log.debug("train failed", exc_info=True)
        print(f"error: training failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(outputs.files)} files to {outputs.dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config)
        dataset = build_dataset(cfg)
        spec = build_spec(cfg, dataset)
    except (ConfigError, ValueError, data.IdxFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        weights, header = nn.load_checkpoint(args.checkpoint)
        nn.check_compatible(weights, spec)
        if header.get("spec") != json.loads(spec.to_json()):
            raise nn.CheckpointError("checkpoint architecture differs from the config's")
        widths = np.asarray(header["extra"]["pareto_widths"], dtype=float)
        lower = np.asarray(header["extra"].get("lower", [spec.w0] * spec.d), dtype=float)
    except (nn.CheckpointError, OSError, KeyError) as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    out = Path(args.out) if args.out else Path(cfg["output_dir"]) / CURVE_NAME
    outputs = _Outputs(out.parent)
    try:
        grid = args.grid or cfg.get("grid", DEFAULT_GRID)
        estimate, points = drivers.eval_tradeoff_curve(
            weights, spec, dataset, widths, grid, lower=lower,
            cost_objective=cfg.get("cost_objective", "flops"))
        pareto.write_curve_csv(outputs.path(out.name),
                               [(p.cost, p.train_loss, p.val_error, p.width) for p in points],
                               spec.d)
    except Exception as exc:
        outputs.discard()
        log.debug("eval failed", exc_info=True)
        print(f"error: evaluation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"AUC {estimate.auc!r}")
    return EXIT_OK


def cmd_plot(args) -> int:
    curves = []
    try:
        for path in args.csvs:
            cost, _, err = pareto.read_curve_csv(path)
            if len(cost) == 0:
                raise ValueError(f"{path}: no rows")
            curves.append((Path(path).stem, cost, err))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot parse curve CSV: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        Path(args.out).write_text(render_svg(curves))
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slimjoint",
                                description="Joint width and weight optimization for slimmable nets")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train one method from a JSON config")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="evaluate the trade-off curve of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--grid", type=int, default=None, help="number of cost grid points (>= 2)")
    e.add_argument("--out", default=None, help="curve CSV path (default: <output_dir>/curve.csv)")
    e.set_defaults(func=cmd_eval)
    pl = sub.add_parser("plot", help="overlay curve CSVs as an SVG")
    pl.add_argument("csvs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SLIMJOINT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    if getattr(args, "grid", None) is not None and args.grid < 2:
        print("error: --grid must be >= 2", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
