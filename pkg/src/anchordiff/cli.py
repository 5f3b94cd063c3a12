"""Experiment driver: ``anchordiff {synth,check-forward,train,sample,eval,report}``.

Every run is described by one JSON config.  Defaults live in
:data:`DEFAULT_CONFIG`; ``--config`` merges a file on top, and each flag
(or ``--set dotted.key=value``) overrides one key.  The output root
defaults to ``$ANCHORDIFF_OUT`` or ``./runs``.

Layout under the output root::

    dataset/<case>/{rater_XX,prior[,image]}.{json,f32} + case.json
    models/<run>.json
    samples/<run>/<case>/sample_XXX.{json,f32} + samples/<run>/manifest.json
    eval/<run>.csv
    report.csv
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .denoiser import NullDenoiser, OracleDenoiser, PatchDenoiser, PatchRegressor
from .forward import check_forward_process
from .metrics import evaluate
from .sampler import MODES, SamplerConfig, sample
from .schedule import ETA_MAX, KINDS, make_schedule
from .synth import (
    RaterModel,
    ShapeError,
    default_specs,
    list_cases,
    make_case,
    parse_degrade,
    read_case,
    write_case,
)
from .volume import binarize, read_volume, write_volume

log = logging.getLogger("anchordiff")

ENV_OUTPUT = "ANCHORDIFF_OUT"
CSV_COLUMNS = ("case_id", "n_samples", "dice_mean", "hd95_mm", "ged", "ci", "sncc")

DEFAULT_CONFIG = {
    "output": None,
    "dataset": None,
    "run_name": "anchored",
    "seed": 0,
    "workers": 1,
    "synth": {
        "size": 24,
        "spacing": [1.0, 1.0, 1.0],
        "shapes": ["sphere", "dumbbell", "spiculated"],
        "offsets": [-1.0, 0.0, 1.0],
        "weights": None,
        "modulation": 0.0,
        "image": False,
    },
    "prior": {"degrade": "none", "anchored": True},
    "schedule": {"kind": "cosine", "T": 50, "eta": 1e-6},
    "sampler": {"mode": "stochastic", "N": 16, "clamp": True},
    "denoiser": {"type": "oracle", "path": None},
    "train": {
        "radius": 1,
        "hidden": 32,
        "n_iter": 1500,
        "learning_rate": 3e-3,
        "examples_per_batch": 4,
        "sites_per_example": 256,
        "y0_weight": 0.0,
    },
    "check": {"chains": 10000, "grid": 4},
    "eval": {"n_values": [1, 4, 16]},
}

# flag -> dotted config key
FLAG_KEYS = {
    "output": "output",
    "dataset": "dataset",
    "run_name": "run_name",
    "seed": "seed",
    "workers": "workers",
    "size": "synth.size",
    "degrade": "prior.degrade",
    "kind": "schedule.kind",
    "steps": "schedule.T",
    "eta": "schedule.eta",
    "mode": "sampler.mode",
    "n_samples": "sampler.N",
    "denoiser": "denoiser.type",
    "model": "denoiser.path",
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"{key}: unknown config section {p!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"{key}: unknown config key")
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def validate_config(cfg: dict) -> dict:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    syn = cfg["synth"]
    need(isinstance(syn["size"], int) and not isinstance(syn["size"], bool) and syn["size"] >= 8, "synth.size", f"grid size must be an integer >= 8, got {syn['size']!r}")
    need(len(syn["spacing"]) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in syn["spacing"]), "synth.spacing", "three positive values required")
    need(len(syn["offsets"]) >= 1, "synth.offsets", "at least one rater offset required")
    sch = cfg["schedule"]
    need(sch["kind"] in KINDS, "schedule.kind", f"expected one of {KINDS}")
    need(isinstance(sch["T"], int) and not isinstance(sch["T"], bool) and sch["T"] >= 1, "schedule.T", "must be a positive integer")
    need(isinstance(sch["eta"], (int, float)) and 0 < sch["eta"] < 1, "schedule.eta", "must lie in (0, 1)")
    smp = cfg["sampler"]
    need(smp["mode"] in MODES, "sampler.mode", f"expected one of {MODES}")
    need(isinstance(smp["N"], int) and not isinstance(smp["N"], bool) and smp["N"] >= 1, "sampler.N", "must be an integer >= 1")
    need(cfg["denoiser"]["type"] in ("oracle", "mlp", "null"), "denoiser.type", "expected oracle, mlp or null")
    need(isinstance(cfg["seed"], int), "seed", "must be an integer")
    try:
        parse_degrade(cfg["prior"]["degrade"])
    except ValueError as exc:
        raise ConfigError(f"prior.degrade: {exc}") from exc
    need(all(isinstance(n, int) and n >= 1 for n in cfg["eval"]["n_values"]), "eval.n_values", "positive integers required")
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in overrides:
        set_dotted(cfg, key, value)
    if cfg["output"] is None:
        cfg["output"] = os.environ.get(ENV_OUTPUT, "runs")
    if cfg["dataset"] is None:
        cfg["dataset"] = str(Path(cfg["output"]) / "dataset")
    return validate_config(cfg)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True) + "\n"


def _schedule(cfg):
    sch = cfg["schedule"]
    return make_schedule(sch["kind"], sch["T"], sch["eta"], validate=sch["eta"] <= ETA_MAX)


def _case_key(case_id: str) -> tuple:
    return (zlib.crc32(case_id.encode()),)


def _cases(cfg):
    paths = list_cases(cfg["dataset"])
    if not paths:
        raise FileNotFoundError(f"no dataset found under {cfg['dataset']} (run `synth` first)")
    return paths


# ---------------------------------------------------------------- commands


def cmd_synth(cfg) -> Path:
    syn = cfg["synth"]
    root = Path(cfg["dataset"])
    specs = {s.kind: s for s in default_specs(syn["size"], cfg["seed"], tuple(syn["spacing"]))}
    model = RaterModel(
        tuple(float(o) for o in syn["offsets"]),
        None if syn["weights"] is None else tuple(syn["weights"]),
        float(syn["modulation"]),
        cfg["seed"],
    )
    cases = []
    for kind in syn["shapes"]:
        if kind not in specs:
            raise ConfigError(f"synth.shapes: unknown shape {kind!r}")
        try:
            case = make_case(kind, specs[kind], model, cfg["prior"]["degrade"], syn["image"])
        except ShapeError as exc:
            raise ConfigError(f"synth.size: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"synth.offsets: {exc}") from exc
        cases.append(case)
    # all cases are built first so an invalid config writes nothing
    for case in cases:
        write_case(case, root)
        log.info("wrote case %s (%d raters)", case.case_id, len(case.raters))
    # paths are left out so the dataset bytes do not depend on where it lives
    portable = {k: v for k, v in cfg.items() if k not in ("output", "dataset")}
    (root / "config.json").write_text(dump_config(portable))
    return root


def _crop_window(y0, y_hat, size):
    """Start corner of the ``size``-cube containing the most voxels where ``y0 != y_hat``."""
    diff = (np.abs(y0 - y_hat) > 0).astype(np.int64)
    size = min(size, *diff.shape)
    best, corner = -1, (0, 0, 0)
    cs = np.pad(diff.cumsum(0).cumsum(1).cumsum(2), ((1, 0), (1, 0), (1, 0)))
    D, H, W = diff.shape
    for z in range(D - size + 1):
        for y in range(H - size + 1):
            for x in range(W - size + 1):
                z1, y1, x1 = z + size, y + size, x + size
                total = (
                    cs[z1, y1, x1] - cs[z, y1, x1] - cs[z1, y, x1] - cs[z1, y1, x]
                    + cs[z, y, x1] + cs[z, y1, x] + cs[z1, y, x] - cs[z, y, x]
                )
                if total > best:
                    best, corner = total, (z, y, x)
    return corner, size


def cmd_check_forward(cfg) -> dict:
    s = _schedule(cfg)
    case = read_case(_cases(cfg)[0])
    k = len(case.raters) // 2
    y0 = case.raters.signed_stack()[k]
    y_hat = np.asarray(case.prior.data, np.float64)
    if not cfg["prior"]["anchored"]:
        y_hat = np.zeros_like(y_hat)
    (z, y, x), n = _crop_window(y0, y_hat, cfg["check"]["grid"])
    crop = np.s_[z : z + n, y : y + n, x : x + n]
    report = check_forward_process(y0[crop], y_hat[crop], s, cfg["check"]["chains"], cfg["seed"])
    report.update({"case_id": case.case_id, "window": [z, y, x, n], "T": s.T, "eta": s.eta, "kind": s.kind})
    out = Path(cfg["output"]) / "check_forward.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1) + "\n")
    return report


def cmd_train(cfg) -> Path:
    s = _schedule(cfg)
    cases = [read_case(p) for p in _cases(cfg)]
    anchored = cfg["prior"]["anchored"]
    data = [
        (c.raters, c.prior if anchored else c.prior.like(np.zeros(c.prior.dims)), c.image) for c in cases
    ]
    est = PatchDenoiser(**cfg["train"], random_state=cfg["seed"]).fit(data, schedule=s)
    out = Path(cfg["output"]) / "models" / f"{cfg['run_name']}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(est.model_.to_json())
    log.info("trained patch regressor, final loss %.4f -> %s", est.loss_curve_[-1], out)
    return out


def _load_denoiser(cfg):
    kind = cfg["denoiser"]["type"]
    if kind == "null":
        return NullDenoiser(), "null"
    if kind == "oracle":
        return OracleDenoiser(), "oracle"
    path = cfg["denoiser"]["path"]
    if path is None:
        raise ConfigError("denoiser.path: the mlp denoiser needs a model file")
    text = Path(path).read_text()
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return PatchDenoiser.from_model(PatchRegressor.from_json(text)), f"mlp:{digest}"


def _sample_case(cfg, case_dir) -> tuple[str, int]:
    case = read_case(case_dir)
    s = _schedule(cfg)
    denoiser, _ = _load_denoiser(cfg)
    if isinstance(denoiser, OracleDenoiser):
        denoiser.fit(case.raters)
    y_hat = case.prior if cfg["prior"]["anchored"] else case.prior.like(np.zeros(case.prior.dims))
    smp = cfg["sampler"]
    sc = SamplerConfig(smp["mode"], smp["N"], smp["clamp"], cfg["seed"])
    vols = sample(denoiser, case.image, y_hat, s, sc, key=_case_key(case.case_id))
    out = Path(cfg["output"]) / "samples" / cfg["run_name"] / case.case_id
    for i, v in enumerate(vols):
        write_volume(v, out / f"sample_{i:03d}")
    return case.case_id, len(vols)


def cmd_sample(cfg) -> Path:
    case_dirs = _cases(cfg)
    _, denoiser_id = _load_denoiser(cfg)
    s = _schedule(cfg)
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            done = list(pool.map(_sample_case, [cfg] * len(case_dirs), case_dirs))
    else:
        done = [_sample_case(cfg, d) for d in case_dirs]
    root = Path(cfg["output"]) / "samples" / cfg["run_name"]
    manifest = {
        "seed": cfg["seed"],
        "mode": cfg["sampler"]["mode"],
        "T": s.T,
        "N": cfg["sampler"]["N"],
        "clamp": cfg["sampler"]["clamp"],
        "schedule": json.loads(s.to_json()),
        "denoiser": denoiser_id,
        "anchored": cfg["prior"]["anchored"],
        "degrade": cfg["prior"]["degrade"],
        "cases": {cid: n for cid, n in done},
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _eval_case(cfg, case_dir) -> list[dict]:
    case = read_case(case_dir)
    sdir = Path(cfg["output"]) / "samples" / cfg["run_name"] / case.case_id
    files = sorted(sdir.glob("sample_*.json"))
    if not files:
        raise FileNotFoundError(f"no samples for case {case.case_id} in {sdir}")
    masks = [binarize(read_volume(f)) for f in files]
    rows = []
    for n in cfg["eval"]["n_values"]:
        if n > len(masks):
            log.warning("case %s: only %d samples, skipping N=%d", case.case_id, len(masks), n)
            continue
        rep = evaluate(masks[:n], case.raters)
        rows.append({"case_id": case.case_id, **{k: getattr(rep, k) for k in CSV_COLUMNS[1:]}})
    return rows


def cmd_eval(cfg) -> Path:
    case_dirs = _cases(cfg)
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            per_case = list(pool.map(_eval_case, [cfg] * len(case_dirs), case_dirs))
    else:
        per_case = [_eval_case(cfg, d) for d in case_dirs]
    out = Path(cfg["output"]) / "eval" / f"{cfg['run_name']}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rows in per_case:
        for r in rows:
            writer.writerow([r["case_id"]] + [_fmt(r[k]) for k in CSV_COLUMNS[1:]])
    out.write_text(buf.getvalue())
    return out


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["n_samples"] = int(r["n_samples"])
        for k in CSV_COLUMNS[2:]:
            r[k] = math.nan if r[k] == "" else float(r[k])
    return rows


def ablation_table(named_csvs) -> list[dict]:
    """Average each metric over cases per ``(arm, N)``; empty cells stay empty."""
    table = []
    for name, path in named_csvs:
        rows = read_metrics_csv(path)
        for n in sorted({r["n_samples"] for r in rows}):
            sel = [r for r in rows if r["n_samples"] == n]
            entry = {"method": name, "n_samples": n}
            for k in CSV_COLUMNS[2:]:
                vals = [r[k] for r in sel if not math.isnan(r[k])]
                entry[k] = float(np.mean(vals)) if vals and len(vals) == len(sel) else math.nan
            table.append(entry)
    return table


def cmd_report(cfg, inputs=None) -> Path:
    if inputs:
        named = [tuple(item.split("=", 1)) if "=" in item else (Path(item).stem, item) for item in inputs]
    else:
        named = [(p.stem, str(p)) for p in sorted((Path(cfg["output"]) / "eval").glob("*.csv"))]
    if not named:
        raise FileNotFoundError("no metric CSVs to report on (run `eval` first)")
    table = ablation_table(named)
    out = Path(cfg["output"]) / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["method", "n_samples", *CSV_COLUMNS[2:]]
    writer.writerow(cols)
    for e in table:
        writer.writerow([e["method"], e["n_samples"]] + [_fmt(e[k]) for k in CSV_COLUMNS[2:]])
    out.write_text(buf.getvalue())
    print(format_table(table))
    return out


def format_table(table) -> str:
    head = f"{'method':<16}{'N':>4}{'Dice':>9}{'HD95':>9}{'GED':>9}{'CI':>9}{'SNCC':>9}"
    lines = [head, "-" * len(head)]
    for e in table:
        cells = ["-" if math.isnan(e[k]) else f"{e[k]:.4f}" for k in ("dice_mean", "hd95_mm", "ged", "ci", "sncc")]
        lines.append(f"{e['method']:<16}{e['n_samples']:>4}" + "".join(f"{c:>9}" for c in cells))
    return "\n".join(lines)


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config merged over the defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key, e.g. sampler.N=4")
    common.add_argument("--output", help="output root [output]")
    common.add_argument("--dataset", help="dataset directory [dataset]")
    common.add_argument("--run-name", dest="run_name", help="name of this arm/run [run_name]")
    common.add_argument("--seed", type=int, help="master seed [seed]")
    common.add_argument("--workers", type=int, help="parallel worker processes [workers]")
    common.add_argument("--size", type=int, help="cubic grid size [synth.size]")
    common.add_argument("--degrade", help="prior degradation none|erode1|dilate1|threshold:TAU [prior.degrade]")
    common.add_argument("--no-anchor", action="store_true", help="use a zero prior (Gaussian ablation arm) [prior.anchored=false]")
    common.add_argument("--kind", choices=KINDS, help="base schedule [schedule.kind]")
    common.add_argument("--steps", type=int, help="diffusion steps T [schedule.T]")
    common.add_argument("--eta", type=float, help="terminal alpha-bar floor [schedule.eta]")
    common.add_argument("--mode", choices=MODES, help="reverse-step noise policy [sampler.mode]")
    common.add_argument("-N", "--n-samples", dest="n_samples", type=int, help="samples per case [sampler.N]")
    common.add_argument("--denoiser", choices=("oracle", "mlp", "null"), help="noise predictor [denoiser.type]")
    common.add_argument("--model", help="patch regressor JSON for --denoiser mlp [denoiser.path]")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="anchordiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the synthetic multi-rater dataset")
    sub.add_parser("check-forward", parents=[common], help="Monte-Carlo diagnostics of the forward process")
    sub.add_parser("train", parents=[common], help="train the patch regressor on the dataset")
    sub.add_parser("sample", parents=[common], help="draw N samples per case")
    sub.add_parser("eval", parents=[common], help="score samples against raters (CSV)")
    rep = sub.add_parser("report", parents=[common], help="join metric CSVs into the ablation table")
    rep.add_argument("inputs", nargs="*", metavar="[NAME=]CSV")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def resolve_config(args) -> dict:
    overrides = []
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((key, value))
    if args.no_anchor:
        overrides.append(("prior.anchored", False))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.append((key, _parse_value(value)))
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            print(cmd_synth(cfg))
        elif args.command == "check-forward":
            report = cmd_check_forward(cfg)
            print(json.dumps(report, indent=1))
            return 0 if report["pass"] else 1
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "sample":
            print(cmd_sample(cfg))
        elif args.command == "eval":
            print(cmd_eval(cfg))
        elif args.command == "report":
            print(cmd_report(cfg, args.inputs))
        elif args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
    except (ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
