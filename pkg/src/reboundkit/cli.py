"""Command-line entry point: ``reboundkit <subcommand> [--config RUN.json] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric/model error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .alerting import WINDOW_STEPS, AlertKind, AlertMonitor, BgWindow, write_alert_log
from .basaladjust import DeltaGrid, recommend_ib
from .core import DataError, IntegrationError, InvalidInputError, ModelError, ReboundKitError
from .evalkit import (
    ALERT_HEADERS,
    alert_table,
    compare_ablations,
    evaluate_alerts,
    format_table,
    plot_rows,
    regression_report,
    write_rows_csv,
    VARIANTS,
    VARIANT_LABELS,
)
from .forecaster import Attention, Forecaster, ModelConfig, fine_tune, predict_horizon, train, write_loss_curve
from .ingest import (
    SplitConfig,
    group_by_patient,
    label_rebound_highs,
    read_segments,
    split_carbs,
    split_train_test,
    write_trace_csv,
)
from .simkit import DEFAULT_CGM_SIGMA, DEFAULT_INITIALS, generate_dataset, make_profiles

log = logging.getLogger("reboundkit")

SECTIONS = {
    "simulate": {"patients", "sims", "initials", "cgm_sigma", "horizon_steps"},
    "preprocess": {"carb_rate", "train_fraction"},
    "train": {
        "attention",
        "epochs",
        "lr",
        "hidden",
        "head_hidden",
        "batch",
        "inputs",
        "horizon",
        "fine_tune_lr",
        "fine_tune_epochs",
    },
    "alerts": {"delta_grid"},
    "evaluate": set(),
}
TOP_KEYS = {"seed", "paths", *SECTIONS}
PATH_KEYS = {"out", "input", "checkpoint"}

DEFAULTS = {
    "patients": 10,
    "sims": 75,
    "initials": list(DEFAULT_INITIALS),
    "cgm_sigma": DEFAULT_CGM_SIGMA,
    "horizon_steps": 145,
    "carb_rate": 5.0,
    "train_fraction": 0.8,
    "attention": "full",
    "epochs": 10,
    "lr": 1e-3,
    "hidden": 64,
    "head_hidden": 32,
    "batch": 32,
    "inputs": 12,
    "horizon": 12,
    "fine_tune_lr": 1e-5,
    "fine_tune_epochs": 20,
    "delta_grid": "0:0.05:0.5",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------- config


def load_run_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("run config must be a JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for sec, keys in SECTIONS.items():
        bad = set(cfg.get(sec, {})) - keys
        if bad:
            raise UsageError(f"unknown key(s) in section '{sec}': {', '.join(sorted(bad))}")
    bad = set(cfg.get("paths", {})) - PATH_KEYS
    if bad:
        raise UsageError(f"unknown key(s) in section 'paths': {', '.join(sorted(bad))}")
    return cfg


def resolve(args, cfg: dict, section: str, key: str):
    """Flag value if given, else config value, else default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in cfg.get(section, {}):
        return cfg[section][key]
    return DEFAULTS[key]


class Run:
    def __init__(self, command: str, args, cfg: dict):
        self.command = command
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            raise UsageError("a seed is required (--seed N or \"seed\" in the config)")
        self.seed = int(seed)
        paths = cfg.get("paths", {})
        out = args.out if args.out is not None else paths.get("out")
        if out is None:
            raise UsageError("an output directory is required (--out DIR or paths.out in the config)")
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.args = args

    def get(self, section: str, key: str):
        return resolve(self.args, self.cfg, section, key)

    def inputs(self) -> List[Path]:
        given = getattr(self.args, "input", None) or []
        if not given and self.cfg.get("paths", {}).get("input"):
            p = self.cfg["paths"]["input"]
            given = p if isinstance(p, list) else [p]
        files = []
        for g in given:
            p = Path(g)
            if p.is_dir():
                files.extend(sorted(x for x in p.glob("*.csv")))
            elif p.exists():
                files.append(p)
            else:
                raise DataError(f"input not found: {p}")
        if not files:
            raise UsageError("no input CSV given (--input PATH)")
        return files

    def checkpoint(self) -> List[str]:
        ck = getattr(self.args, "checkpoint", None) or []
        if not ck and self.cfg.get("paths", {}).get("checkpoint"):
            c = self.cfg["paths"]["checkpoint"]
            ck = c if isinstance(c, list) else [c]
        if not ck:
            raise UsageError("a checkpoint is required (--checkpoint PATH)")
        return ck

    @property
    def config_hash(self) -> str:
        """Hash of the command, config and flags, excluding file locations so reruns elsewhere match."""
        cfg = {k: v for k, v in self.cfg.items() if k != "paths"}
        flags = {
            k: v for k, v in vars(self.args).items() if v is not None and k not in ("config", "out", "input", "checkpoint", "verbose")
        }
        blob = json.dumps({"command": self.command, "config": cfg, "flags": flags, "seed": self.seed}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def header(self) -> str:
        return f"reboundkit {__version__} {self.command} config_sha256={self.config_hash} seed={self.seed}"

    def model_config(self, attention=None) -> ModelConfig:
        return ModelConfig(
            n_input_steps=int(self.get("train", "inputs")),
            m_horizon_steps=int(self.get("train", "horizon")),
            hidden=int(self.get("train", "hidden")),
            head_hidden=int(self.get("train", "head_hidden")),
            attention=Attention(attention or self.get("train", "attention")),
            epochs=int(self.get("train", "epochs")),
            lr=float(self.get("train", "lr")),
            fine_tune_lr=float(self.get("train", "fine_tune_lr")),
            batch=int(self.get("train", "batch")),
            seed=self.seed,
        )


def _read_all(files) -> list:
    traces = []
    for f in files:
        traces.extend(read_segments(f))
    return traces


def _run_meta(run: Run) -> dict:
    return {"run": {"command": run.command, "config_sha256": run.config_hash, "seed": run.seed}}


# -------------------------------------------------------------- subcommands


def cmd_simulate(run: Run):
    n_pat = int(run.get("simulate", "patients"))
    sims = int(run.get("simulate", "sims"))
    initials = run.get("simulate", "initials")
    if isinstance(initials, str):
        initials = [float(x) for x in initials.split(",")]
    sigma = float(run.get("simulate", "cgm_sigma"))
    horizon = int(run.get("simulate", "horizon_steps"))
    profiles = make_profiles(n_pat, run.seed)
    for i, prof in enumerate(profiles):
        traces = generate_dataset([prof], sims, initials, seed=run.seed + 1000 * i, cgm_sigma=sigma, horizon_steps=horizon)
        write_trace_csv(traces, run.out / f"{prof.name}.csv", run.header)
        log.info("wrote %d traces for %s", len(traces), prof.name)
    doc = {"profiles": [p.to_dict() for p in profiles], **_run_meta(run)}
    (run.out / "profiles.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_preprocess(run: Run):
    """Writes carbsplit/, labels/, train/ and test/ subdirectories with one CSV per patient."""
    rate = float(run.get("preprocess", "carb_rate"))
    frac = float(run.get("preprocess", "train_fraction"))
    for sub in ("carbsplit", "labels", "train", "test"):
        (run.out / sub).mkdir(exist_ok=True)
    for f in run.inputs():
        segs = [split_carbs(s, rate) for s in read_segments(f)]
        pid = segs[0].patient_id
        rows = []
        for k, s in enumerate(segs):
            rows += [[k, lab.low_index, lab.high_index, lab.gap_steps] for lab in label_rebound_highs(s)]
        write_rows_csv(run.out / "labels" / f"{pid}.csv", ["segment", "low_index", "high_index", "gap_steps"], rows, run.header)
        write_trace_csv(segs, run.out / "carbsplit" / f"{pid}.csv", run.header)
        train_, test_ = split_train_test(segs, SplitConfig(frac))
        write_trace_csv(train_, run.out / "train" / f"{pid}.csv", run.header)
        write_trace_csv(test_, run.out / "test" / f"{pid}.csv", run.header)
        print(f"{pid}: {len(rows)} rebound highs, {sum(map(len, train_))} train / {sum(map(len, test_))} test samples")


def cmd_train(run: Run):
    cfg = run.model_config()
    model, curve = train(_read_all(run.inputs()), cfg)
    stem = run.out / (run.args.name or "model")
    model.save(stem, _run_meta(run))
    write_loss_curve(curve, run.out / f"{stem.name}_loss.csv", run.header)
    print(f"trained {cfg.attention.value} model: final epoch MSE {curve[-1]:.5f}" if curve else "trained 0 epochs")


def cmd_finetune(run: Run):
    base = Forecaster.load(run.checkpoint()[0])
    epochs = int(run.get("train", "fine_tune_epochs"))
    lr = float(run.get("train", "fine_tune_lr"))
    model = fine_tune(base, _read_all(run.inputs()), epochs, lr)
    stem = run.out / (run.args.name or "finetuned")
    model.save(stem, _run_meta(run))
    write_loss_curve(model.loss_curve[len(base.loss_curve):], run.out / f"{stem.name}_loss.csv", run.header)


def cmd_predict(run: Run):
    model = Forecaster.load(run.checkpoint()[0])
    n = model.config.n_input_steps
    rows = []
    offset = 0
    for s in _read_all(run.inputs()):
        if run.args.all:
            ts = range(n - 1, len(s))
        elif run.args.t is not None:
            ts = [run.args.t] if run.args.t < len(s) else []
        else:
            ts = [len(s) - 1] if len(s) >= n else []
        for t in ts:
            pw = predict_horizon(model, s, t)
            for k, v in enumerate(pw.predicted_bg, start=1):
                rows.append([offset + t, k, 5 * k, float(v)])
        offset += len(s)
    write_rows_csv(run.out / "predictions.csv", ["t_index", "step", "minutes_ahead", "predicted_bg"], rows, run.header)


def cmd_alerts(run: Run):
    model = Forecaster.load(run.checkpoint()[0])
    grid = DeltaGrid.parse(str(run.get("alerts", "delta_grid")))
    if model.config.m_horizon_steps != WINDOW_STEPS or model.config.n_input_steps < WINDOW_STEPS:
        raise InvalidInputError("alerts need a model with a 12-step horizon and at least 12 input steps")
    alerts = []
    offset = 0
    for s in _read_all(run.inputs()):
        monitor = AlertMonitor()
        for t in range(model.config.n_input_steps - 1, len(s)):
            pw = predict_horizon(model, s, t)
            window = BgWindow(s.bg[t - WINDOW_STEPS + 1 : t + 1], pw.predicted_bg)
            a = monitor.update(offset + t, window, lambda: recommend_ib(model, s, t, grid).ib)
            if a is not None:
                alerts.append(a)
        offset += len(s)
    write_alert_log(alerts, run.out / "alerts.csv", run.header)
    n_rh = sum(a.kind is AlertKind.REBOUND_HIGH for a in alerts)
    print(f"{len(alerts)} alerts ({n_rh} rebound high)")


def cmd_evaluate(run: Run):
    ckpts, files = run.checkpoint(), run.inputs()
    if len(ckpts) != len(files):
        raise UsageError("evaluate pairs checkpoints with inputs: give the same number of each")
    reg_rows, metrics, plot = [], {}, []
    for ck, f in zip(ckpts, files):
        model = Forecaster.load(ck)
        segs = read_segments(f)
        pid = segs[0].patient_id
        n, m = model.config.n_input_steps, model.config.m_horizon_steps
        r = regression_report(model, segs, pid, n, m)
        reg_rows.append([pid, r.rmse, r.zoh_rmse, r.cgm_rmse, r.windows])
        metrics[pid] = evaluate_alerts(model, segs, n, m)
        for k, s in enumerate(segs):
            if len(s) >= n:
                plot += [[pid, k, *row] for row in plot_rows(model, s)]
    reg_headers = ["patient", "rmse", "zoh_rmse", "cgm_rmse", "windows"]
    write_rows_csv(run.out / "regression.csv", reg_headers, reg_rows, run.header)
    rows, omitted = alert_table(metrics)
    write_rows_csv(run.out / "alert_metrics.csv", ALERT_HEADERS, rows, run.header)
    write_rows_csv(run.out / "plot.csv", ["patient", "segment", "t", "true_bg", "predicted_bg", "alert_kind"], plot, run.header)
    print(format_table(reg_headers, reg_rows))
    print()
    print(format_table(ALERT_HEADERS, rows))
    if omitted:
        print(f"omitted (no rebound highs in test windows): {', '.join(omitted)}")


def cmd_ablate(run: Run):
    frac = float(run.get("preprocess", "train_fraction"))
    rate = float(run.get("preprocess", "carb_rate"))
    cfg = run.model_config()
    segs = [split_carbs(s, rate) for s in _read_all(run.inputs())]
    train_, test_ = split_train_test(segs, SplitConfig(frac), cfg.window_steps)
    report = compare_ablations(group_by_patient(train_), group_by_patient(test_), cfg)
    headers = ["patient"] + [VARIANT_LABELS[v] for v in VARIANTS]
    write_rows_csv(run.out / "ablation.csv", headers, report.table_rows(), run.header)
    print(report.format())


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "alerts": cmd_alerts,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = _Parser(add_help=False)
    model_flags.add_argument("--attention", choices=[a.value for a in Attention])
    model_flags.add_argument("--epochs", type=int)
    model_flags.add_argument("--lr", type=float)
    model_flags.add_argument("--hidden", type=int)
    model_flags.add_argument("--head-hidden", dest="head_hidden", type=int)
    model_flags.add_argument("--batch", type=int)
    model_flags.add_argument("--inputs", type=int, help="encoder steps")
    model_flags.add_argument("--horizon", type=int, help="forecast steps")

    inp = _Parser(add_help=False)
    inp.add_argument("--input", action="append", help="trace CSV or directory (repeatable)")

    ck = _Parser(add_help=False)
    ck.add_argument("--checkpoint", action="append", help="model manifest (.json)")

    p = _Parser(prog="reboundkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate closed-loop traces")
    s.add_argument("--patients", type=int)
    s.add_argument("--sims", type=int, help="simulations per initial BG")
    s.add_argument("--initials", help="comma-separated initial BG values")
    s.add_argument("--cgm-sigma", dest="cgm_sigma", type=float)
    s.add_argument("--horizon-steps", dest="horizon_steps", type=int)

    s = sub.add_parser("preprocess", parents=[common, inp], help="split carbs, label rebounds, train/test split")
    s.add_argument("--carb-rate", dest="carb_rate", type=float)
    s.add_argument("--train-fraction", dest="train_fraction", type=float)

    s = sub.add_parser("train", parents=[common, inp, model_flags], help="train a forecaster")
    s.add_argument("--name")

    s = sub.add_parser("finetune", parents=[common, inp, ck], help="fine-tune a pretrained forecaster")
    s.add_argument("--fine-tune-epochs", "--epochs", dest="fine_tune_epochs", type=int)
    s.add_argument("--fine-tune-lr", "--lr", dest="fine_tune_lr", type=float)
    s.add_argument("--name")

    s = sub.add_parser("predict", parents=[common, inp, ck], help="one-hour forecasts")
    s.add_argument("--t", type=int, help="forecast origin step within each segment")
    s.add_argument("--all", action="store_true", help="forecast from every step")

    s = sub.add_parser("alerts", parents=[common, inp, ck], help="streaming alert log with IB recommendations")
    s.add_argument("--delta-grid", dest="delta_grid")

    sub.add_parser("evaluate", parents=[common, inp, ck], help="regression and alert reports")

    s = sub.add_parser("ablate", parents=[common, inp, model_flags], help="full vs no-carb-focus vs no-attention")
    s.add_argument("--train-fraction", dest="train_fraction", type=float)
    s.add_argument("--carb-rate", dest="carb_rate", type=float)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = load_run_config(args.config)
        run = Run(args.command, args, cfg)
        COMMANDS[args.command](run)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ModelError, IntegrationError) as e:
        print(f"numeric/model error: {e}", file=sys.stderr)
        return 3
    except (DataError, InvalidInputError, ReboundKitError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
