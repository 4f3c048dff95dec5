"""Command-line entry point: ``csiloc <command> [options]``.

Commands
--------
synth       write a seeded synthetic dataset (CSIT features + positions CSV)
pretrain    train an M3/M4 autoencoder on unlabeled features
finetune    train a localizer on labeled features, predict the test split
evaluate    metrics for predictions against ground truth
gradcheck   finite-difference check of the layer library on toy nets
report      one comparison table over several evaluated runs

Settings resolve as: built-in defaults, then ``--config`` JSON, then flags
given on the command line.  Every command that writes to ``--out`` also
writes ``config.resolved.json`` there.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .csit import save_csi_tensor
from .data import (SyntheticConfig, generate_synthetic, load_labeled, load_positions_csv,
                   load_unlabeled, save_positions_csv)
from .errors import ConfigurationError, CsilocError, DataError, DimensionError, DomainError, NumericError
from .metrics import AXES, METRICS, MetricsReport, compute_report, normalize_mode, per_sample_errors
from .models import ModelSpec, build_autoencoder, build_localizer
from .nn import Conv2d, ConvTranspose2d, Dense, Flatten, MaxPool2d, ReLU, Sequential, gradcheck
from .train import TrainConfig, evaluate, finetune, pretrain

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TRAIN_KEYS = ("batch_size", "learning_rate", "max_epochs", "patience", "min_delta", "seed",
              "split_seed", "standardize_features", "standardize_targets")

DEFAULTS = {
    "synth": {"seed": 0, "n_unlabeled": 2000, "n_labeled": 200, "height": 16, "width": 32,
              "noise_std": 0.05, "n_components": 8, "max_cycles": 1.5, "area": [646.0, 943.0, 41.0]},
    "pretrain": {"model": "m4", "unlabeled": None, "final_activation": True, "batch_size": 64,
                 "learning_rate": 1e-3, "max_epochs": 100, "patience": 10, "min_delta": 1e-7, "seed": 0,
                 "split_seed": 0, "standardize_features": False, "standardize_targets": False},
    "finetune": {"model": "m1", "labeled": None, "positions": None, "pretrained": None,
                 "unfreeze_encoder": False, "batch_size": 64, "learning_rate": 1e-3, "max_epochs": 100,
                 "patience": 10, "min_delta": 1e-7, "seed": 0, "split_seed": 0,
                 "standardize_features": False, "standardize_targets": False},
    "evaluate": {"mode": "paper_literal", "run": None, "predictions": None, "targets": None,
                 "checkpoint": None, "labeled": None, "positions": None, "model_label": None},
    "gradcheck": {"seed": 0, "tolerance": 1e-4, "coords": 200, "corrupt_backward": False},
    "report": {"runs": []},
}


# ---------------------------------------------------------------- parsing

def _add_common(p: argparse.ArgumentParser, *, model=None, mode=False, out=True):
    # defaults are None so that only flags actually given override the config file
    p.add_argument("--config", help="JSON file with settings for this command")
    p.add_argument("--seed", type=int, help="random seed (u64)")
    if out:
        p.add_argument("--out", help="output directory")
    if model:
        p.add_argument("--model", type=str.lower, choices=model)
    if mode:
        p.add_argument("--mode", choices=["paper-literal", "paper_literal", "conventional"],
                       help="RMSE convention (default paper-literal)")


def _add_train(p: argparse.ArgumentParser):
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--split-seed", type=int, help="seed for the dataset split (default 0)")
    p.add_argument("--standardize-features", action="store_const", const=True)
    p.add_argument("--standardize-targets", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csiloc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"csiloc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    _add_common(p)
    p.add_argument("--n-unlabeled", type=int)
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--n-components", type=int)
    p.add_argument("--max-cycles", type=float)

    p = sub.add_parser("pretrain", help="train an M3/M4 autoencoder")
    _add_common(p, model=["m3", "m4"])
    p.add_argument("--unlabeled", help="CSIT features [n, h, w] or [n, h, w, m]")
    p.add_argument("--no-final-activation", dest="final_activation", action="store_const", const=False,
                   help="drop the ReLU after the last decoder layer")
    _add_train(p)

    p = sub.add_parser("finetune", help="train a localizer and predict its test split")
    _add_common(p, model=["m1", "m2", "m3", "m4"])
    p.add_argument("--labeled", help="CSIT features of the labeled set")
    p.add_argument("--positions", help="x,y,z CSV aligned with --labeled")
    p.add_argument("--pretrained", help="pretraining run directory (m3/m4 only)")
    p.add_argument("--unfreeze-encoder", action="store_const", const=True,
                   help="also update the pretrained encoder")
    _add_train(p)

    p = sub.add_parser("evaluate", help="metrics for predictions against ground truth")
    _add_common(p, mode=True)
    p.add_argument("--run", help="finetune output directory (predictions.csv + targets.csv)")
    p.add_argument("--predictions", help="x,y,z CSV of estimates")
    p.add_argument("--targets", help="x,y,z CSV of ground truth")
    p.add_argument("--checkpoint", help="localizer checkpoint to run on --labeled/--positions")
    p.add_argument("--labeled")
    p.add_argument("--positions")

    p = sub.add_parser("gradcheck", help="finite-difference check on toy nets")
    _add_common(p)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--coords", type=int, help="sampled coordinates per tensor")
    p.add_argument("--corrupt-backward", action="store_const", const=True, help=argparse.SUPPRESS)

    p = sub.add_parser("report", help="comparison table over evaluated runs")
    _add_common(p, mode=False)
    p.add_argument("runs", nargs="*", help="run directories containing metrics.json")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the ``--config`` file, overlaid by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = args.config
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        # a config.resolved.json echo can be fed straight back in
        loaded.pop("version", None)
        echoed = loaded.pop("command", command)
        if echoed != command:
            raise ConfigurationError(f"{path} was resolved for '{echoed}', not '{command}'")
        unknown = sorted(set(loaded) - set(cfg) - {"out"})
        if unknown:
            raise ConfigurationError(f"{path}: unknown settings for '{command}': {', '.join(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        if key == "runs" and not value:
            continue
        cfg[key] = value
    if "mode" in cfg and cfg["mode"] is not None:
        cfg["mode"] = normalize_mode(cfg["mode"])
    if "model" in cfg:
        cfg["model"] = str(cfg["model"]).lower()
    return cfg


def _out_dir(cfg: dict, required: bool = True) -> Path | None:
    out = cfg.get("out")
    if out is None:
        if required:
            raise ConfigurationError("--out is required")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, "version": __version__, **cfg}
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def _need_file(path, what: str) -> str:
    if path is None:
        raise ConfigurationError(f"{what} is required")
    if not os.path.isfile(path):
        raise DataError(f"{what}: no such file: {path}")
    return str(path)


def _train_config(cfg: dict, **extra) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS}, **extra)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


# --------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    scfg = SyntheticConfig(n_unlabeled=cfg["n_unlabeled"], n_labeled=cfg["n_labeled"],
                           height=cfg["height"], width=cfg["width"], area=tuple(cfg["area"]),
                           noise_std=cfg["noise_std"], n_components=cfg["n_components"],
                           max_cycles=cfg["max_cycles"], seed=cfg["seed"])
    unlabeled, labeled = generate_synthetic(scfg)
    save_csi_tensor(out / "unlabeled.csit", unlabeled.features)
    save_csi_tensor(out / "labeled.csit", labeled.features)
    save_positions_csv(out / "positions.csv", labeled.positions)
    _write_resolved(out, "synth", cfg)
    print(f"wrote {len(unlabeled)} unlabeled and {len(labeled)} labeled samples "
          f"({scfg.height}x{scfg.width}) to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    if cfg["model"] not in ("m3", "m4"):
        raise ConfigurationError(f"pretrain supports m3 and m4, got {cfg['model']}")
    out = _out_dir(cfg)
    ds = load_unlabeled(_need_file(cfg["unlabeled"], "--unlabeled"))
    h, w = ds.sample_shape
    spec = ModelSpec(cfg["model"], h, w, final_activation=bool(cfg["final_activation"]))
    tcfg = _train_config(cfg)
    ae = build_autoencoder(spec, seed=tcfg.seed)
    _write_resolved(out, "pretrain", cfg)
    (out / "architecture.json").write_text(ae.architecture_json() + "\n", encoding="utf-8")
    try:
        res = pretrain(ae, ds, tcfg)
    except NumericError as exc:
        _save_partial(out, exc)
        raise
    save_checkpoint(out / "checkpoint", res.checkpoint)
    _write_text(out / "trainlog.csv", res.log.to_csv())
    print(f"{spec.model_id} pretraining: best validation loss {res.log.best_val_loss:.6g} "
          f"at epoch {res.log.best_epoch} of {len(res.log.records) - 1}")
    return EXIT_OK


def _save_partial(out: Path, exc: NumericError) -> None:
    if exc.checkpoint is not None:
        save_checkpoint(out / "checkpoint.last_good", exc.checkpoint)
        print(f"last good checkpoint kept in {out / 'checkpoint.last_good'}", file=sys.stderr)


def cmd_finetune(cfg: dict) -> int:
    mid = cfg["model"]
    pretrained = cfg["pretrained"]
    if mid in ("m1", "m2") and pretrained:
        raise ConfigurationError(f"{mid} is trained from scratch; --pretrained is not allowed")
    if mid in ("m3", "m4") and not pretrained:
        raise ConfigurationError(f"{mid} needs --pretrained <pretraining run directory>")
    out = _out_dir(cfg)
    ds = load_labeled(_need_file(cfg["labeled"], "--labeled"), _need_file(cfg["positions"], "--positions"))
    h, w = ds.sample_shape
    tcfg = _train_config(cfg, encoder_frozen=not cfg["unfreeze_encoder"])
    if pretrained:
        ck = load_checkpoint(_checkpoint_dir(pretrained))
        if ck.kind != "autoencoder":
            raise ConfigurationError(f"{pretrained} does not hold an autoencoder checkpoint")
        spec = ck.spec
        if spec.model_id != mid.upper():
            raise ConfigurationError(f"--pretrained holds a {spec.model_id} autoencoder, not {mid}")
        if (spec.height, spec.width) != (h, w):
            raise DimensionError(
                f"labeled samples are {h}x{w} but the encoder was pretrained on {spec.height}x{spec.width}"
            )
        loc = build_localizer(spec, seed=tcfg.seed, encoder_state=ck.parameters(),
                              encoder_frozen=tcfg.encoder_frozen)
    else:
        spec = ModelSpec(mid, h, w)
        loc = build_localizer(spec, seed=tcfg.seed)
    _write_resolved(out, "finetune", cfg)
    (out / "architecture.json").write_text(loc.architecture_json() + "\n", encoding="utf-8")
    try:
        res = finetune(loc, ds, tcfg)
    except NumericError as exc:
        _save_partial(out, exc)
        raise
    save_checkpoint(out / "checkpoint", res.checkpoint)
    _write_text(out / "trainlog.csv", res.log.to_csv())
    test = res.splits["test"]
    pred = evaluate(loc, test)
    save_positions_csv(out / "predictions.csv", pred)
    save_positions_csv(out / "targets.csv", test.positions)
    _write_text(out / "test_indices.csv", "index\n" + "".join(f"{i}\n" for i in test.indices))
    print(f"{spec.model_id} finetuning: best validation loss {res.log.best_val_loss:.6g} at epoch "
          f"{res.log.best_epoch}; {len(test)} test predictions written to {out / 'predictions.csv'}")
    return EXIT_OK


def _checkpoint_dir(path) -> Path:
    """Accept either a run directory or the checkpoint directory itself."""
    p = Path(path)
    if (p / "checkpoint" / "manifest.json").is_file():
        return p / "checkpoint"
    if not p.exists():
        raise DataError(f"no such checkpoint directory: {p}")
    return p


def cmd_evaluate(cfg: dict) -> int:
    mode = cfg["mode"]
    if cfg["checkpoint"]:
        ck = load_checkpoint(_checkpoint_dir(cfg["checkpoint"]))
        if ck.kind != "localizer":
            raise ConfigurationError(f"{cfg['checkpoint']} does not hold a localizer checkpoint")
        ds = load_labeled(_need_file(cfg["labeled"], "--labeled"), _need_file(cfg["positions"], "--positions"))
        loc = model_from_checkpoint(ck)
        est, truth = evaluate(loc, ds), ds.positions.astype(np.float64)
        default_out, label = None, ck.spec.model_id
    else:
        run = cfg["run"]
        pred_path = cfg["predictions"] or (run and os.path.join(run, "predictions.csv"))
        targ_path = cfg["targets"] or (run and os.path.join(run, "targets.csv"))
        est = load_positions_csv(_need_file(pred_path, "--predictions"))
        truth = load_positions_csv(_need_file(targ_path, "--targets"))
        if est.shape != truth.shape:
            raise DimensionError(f"{len(est)} predictions but {len(truth)} targets")
        # keep the finetune run's own config.resolved.json intact
        default_out = run and os.path.join(run, "evaluation")
        label = _run_model(run) if run else ""
    if cfg.get("out") is None and default_out is not None:
        cfg["out"] = default_out
    cfg["model_label"] = label
    out = _out_dir(cfg)
    report = compute_report(truth, est, mode)
    _write_text(out / "metrics.csv", report.to_csv())
    _write_text(out / "metrics.json", report.to_json() + "\n")
    errs = per_sample_errors(truth, est)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z",
                "abs_dx", "abs_dy", "abs_dz", "euclidean"])
    for i in range(len(truth)):
        w.writerow([i, *map(repr, truth[i].tolist()), *map(repr, est[i].tolist()),
                    *map(repr, errs[i].tolist())])
    _write_text(out / "errors.csv", buf.getvalue())
    _write_resolved(out, "evaluate", cfg)
    print(_format_report(report))
    return EXIT_OK


def _run_model(run) -> str:
    path = Path(run) / "config.resolved.json"
    if not path.is_file():
        return ""
    return str(json.loads(path.read_text(encoding="utf-8")).get("model", "")).upper()


def _format_report(report: MetricsReport) -> str:
    lines = [f"n={report.n}  RMSE mode: {report.mode}",
             f"{'metric':<6} " + " ".join(f"{a:>12}" for a in (*AXES, "average"))]
    for m in METRICS:
        vals = report.values[m].as_dict()
        lines.append(f"{m:<6} " + " ".join(f"{vals[a]:>12.6g}" for a in (*AXES, "average")))
    return "\n".join(lines)


def toy_nets(seed: int) -> list[tuple[str, Sequential, np.ndarray, np.ndarray]]:
    """Small 64-bit nets covering every layer kind, with inputs and targets."""
    rng = np.random.default_rng(seed)
    nets = [
        ("dense_relu", Sequential([Dense(6, 10, rng=rng), ReLU(), Dense(10, 4, rng=rng), ReLU(),
                                   Dense(4, 2, rng=rng)]), (5, 6), (5, 2)),
        ("conv_pool_dense", Sequential([Conv2d(1, 4, 3, rng=rng), ReLU(), MaxPool2d(),
                                        Conv2d(4, 6, 2, rng=rng), ReLU(), MaxPool2d(), Flatten(),
                                        Dense(36, 3, rng=rng)]), (3, 1, 12, 16), (3, 3)),
        ("conv_transpose", Sequential([ConvTranspose2d(3, 4, 3, stride=2, target_hw=(8, 10), rng=rng),
                                       ReLU(), ConvTranspose2d(4, 1, 3, stride=2, target_hw=(18, 22),
                                                               rng=rng)]), (2, 3, 3, 4), (2, 1, 18, 22)),
    ]
    out = []
    for name, net, xs, ts in nets:
        net.astype(np.float64)
        out.append((name, net, rng.normal(size=xs), rng.normal(size=ts)))
    return out


def _corrupt(net: Sequential) -> None:
    """Test hook: scale the first parameterized layer's weight gradient by 1.5."""
    layer = next(layer for layer in net.layers if layer.params)
    real = layer.backward

    def backward(grad):
        dx = real(grad)
        layer.params[0].grad *= 1.5
        return dx

    layer.backward = backward


def cmd_gradcheck(cfg: dict) -> int:
    tol = float(cfg["tolerance"])
    worst_overall = 0.0
    summary = []
    for name, net, x, target in toy_nets(int(cfg["seed"])):
        if cfg["corrupt_backward"]:
            _corrupt(net)
        res = gradcheck(net, x, target, n_coords=int(cfg["coords"]), seed=int(cfg["seed"]), check_input=True)
        worst_overall = max(worst_overall, res.max_rel_error)
        print(f"{name}: max relative error {res.max_rel_error:.3e} "
              f"({'pass' if res.passed(tol) else 'FAIL'})")
        for t in res.tensors:
            idx = "-" if t.worst_index is None else ",".join(map(str, t.worst_index))
            print(f"  {t.name:<12} checked {t.checked:>4} skipped {t.skipped:>3} worst {t.max_rel_error:.3e}"
                  f" at [{idx}] analytic {t.analytic:.6e} numeric {t.numeric:.6e}")
        summary.append({"net": name, "max_rel_error": res.max_rel_error, "passed": res.passed(tol),
                        "tensors": [{"name": t.name, "checked": t.checked, "skipped": t.skipped,
                                     "max_rel_error": t.max_rel_error,
                                     "worst_index": None if t.worst_index is None else list(t.worst_index)}
                                    for t in res.tensors]})
    passed = worst_overall <= tol
    print(f"gradcheck {'PASS' if passed else 'FAIL'}: max relative error {worst_overall:.3e} "
          f"(tolerance {tol:g})")
    out = _out_dir(cfg, required=False)
    if out is not None:
        _write_text(out / "gradcheck.json",
                    json.dumps({"passed": passed, "max_rel_error": worst_overall, "tolerance": tol,
                                "nets": summary}, indent=2) + "\n")
        _write_resolved(out, "gradcheck", cfg)
    return EXIT_OK if passed else EXIT_NUMERIC


REPORT_COLUMNS = ["run", "model", "mode", "n"] + [f"{m}_{a}" for m in METRICS for a in (*AXES, "average")]


def cmd_report(cfg: dict) -> int:
    runs = cfg["runs"]
    if not runs:
        raise ConfigurationError("report needs at least one run directory")
    rows = []
    for run in runs:
        mdir = Path(run)
        if not (mdir / "metrics.json").is_file() and (mdir / "evaluation" / "metrics.json").is_file():
            mdir = mdir / "evaluation"
        mpath = mdir / "metrics.json"
        if not mpath.is_file():
            raise DataError(f"run {run}: no metrics.json (run 'csiloc evaluate' first)")
        try:
            report = MetricsReport.from_json(mpath.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"run {run}: unreadable metrics.json ({exc})") from None
        rpath = mdir / "config.resolved.json"
        model = ""
        if rpath.is_file():
            model = json.loads(rpath.read_text(encoding="utf-8")).get("model_label", "")
        row = {"run": str(run), "model": model, "mode": report.mode, "n": report.n}
        for m in METRICS:
            for a, v in report.values[m].as_dict().items():
                row[f"{m}_{a}"] = repr(float(v))
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out = _out_dir(cfg, required=False)
    if out is not None:
        _write_text(out / "report.csv", buf.getvalue())
        _write_resolved(out, "report", cfg)
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "report": cmd_report}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, DimensionError, DomainError, OSError)):
        return EXIT_DATA
    return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except (CsilocError, OSError, ValueError) as exc:
        print(f"csiloc {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
