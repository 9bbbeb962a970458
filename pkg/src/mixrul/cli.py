"""Command-line entry point: ``mixrul {preprocess,train,predict,evaluate,tune}``.

Exit codes: 0 success, 2 data/parse error, 3 config error, 4 numeric failure,
5 scale-solver failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as mio
from .config import PRESETS, RunConfig, load_config, write_resolved
from .dataset import (
    DEFAULT_RUL_CAP, EngineTrace, NormalizationStats, apply_normalization, load_cmapss, load_fd,
    make_windows, prepare, select_sensors,
)
from .errors import ConfigError, DataFormatError, MixrulError
from .evaluation import evaluate_fleet, evaluate_predictions, predict_batch, write_predictions_csv
from .training import train
from .tuning import TuneGrid, tune, write_trace

logger = logging.getLogger("mixrul")


def _threads(n: int | None):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _input_hashes(cfg: RunConfig) -> dict:
    out = {}
    if cfg.dataset_file:
        out[Path(cfg.dataset_file).name] = mio.sha256_file(cfg.dataset_file)
    elif cfg.data_dir:
        d = Path(cfg.data_dir)
        for stem in ("train", "test", "RUL"):
            p = d / f"{stem}_{cfg.dataset_id}.txt"
            if p.exists():
                out[p.name] = mio.sha256_file(p)
    return out


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_traces, test_traces = load_fd(args.data_dir, args.dataset_id)
    prep = prepare(train_traces, test_traces)
    cap = args.cap
    tr = make_windows(prep.train_traces, args.window, args.stride, mode="train", cap=cap)
    te = make_windows(prep.test_traces, args.window, mode="infer", cap=cap)
    header = {
        "dataset_id": args.dataset_id,
        "kept_sensors": prep.kept_sensors,
        "rul_cap": cap,
        "stride": args.stride,
        "normalization": prep.stats.to_dict(),
        "seed": args.seed,
    }
    mio.save_dataset(out / "train.mxd", tr, {**header, "split": "train", "mode": "train"})
    mio.save_dataset(out / "test.mxd", te, {**header, "split": "test", "mode": "infer"})
    _dump_json(out / "normalization.json", prep.stats.to_dict())
    summary = {
        "train_engines": len(prep.train_traces), "test_engines": len(prep.test_traces),
        "train_windows": len(tr), "test_windows": len(te), "P": len(prep.kept_sensors),
        "kept_sensors": prep.kept_sensors,
        "dropped_sensors": [s for s in range(1, 22) if s not in prep.kept_sensors],
        "window": args.window,
    }
    _dump_json(out / "summary.json", summary)
    print(f"engines: train={summary['train_engines']} test={summary['test_engines']}  "
          f"windows: train={len(tr)} test={len(te)}  P={summary['P']}")
    print(f"kept sensors: {prep.kept_sensors}")
    return 0


# ---------------------------------------------------------------------------
# train


def _training_data(cfg: RunConfig):
    """Windows plus the header fields a model needs to reproduce the preprocessing."""
    if cfg.dataset_file:
        samples, header = mio.load_dataset(cfg.dataset_file)
        if header.get("mode") != "train":
            raise ConfigError(f"{cfg.dataset_file} is not a training dataset")
        meta = {"normalization": header["normalization"], "kept_sensors": header["kept_sensors"],
                "rul_cap": header["rul_cap"]}
        return samples, meta
    if not cfg.data_dir:
        raise ConfigError("set data_dir or dataset_file")
    d = Path(cfg.data_dir)
    traces = load_cmapss(d / f"train_{cfg.dataset_id}.txt", "train")
    prep = prepare(traces)
    samples = make_windows(prep.train_traces, cfg.train.window, cfg.stride, "train", cfg.rul_cap)
    meta = {"normalization": prep.stats.to_dict(), "kept_sensors": prep.kept_sensors,
            "rul_cap": cfg.rul_cap}
    return samples, meta


def _history_csv(path: Path, result) -> None:
    K = result.model.K
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["epoch_or_iter", "loss"] + [f"sigma_{k}" for k in range(1, K + 1)]
                   + ([] if result.model.shared_sigma is None else ["change"]))
        for h in result.history:
            if "epoch" in h:
                w.writerow([h["epoch"], repr(h["loss"])] + [""] * K)
            else:
                w.writerow([h["iteration"], repr(h["loss"])] + [repr(s) for s in h["sigma"]]
                           + [repr(h["change"])])


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, meta = _training_data(cfg)
    if samples.window_width != cfg.train.window:
        raise ConfigError(f"dataset window {samples.window_width} != config window "
                          f"{cfg.train.window}")
    with _threads(cfg.threads):
        result = train(samples, cfg.train)
    meta.update({"window": cfg.train.window, "seed": cfg.train.seed,
                 "config_hash": cfg.hash(), "weibull_mean": cfg.weibull_mean})
    model_path = out / "model.mxm"
    mio.save_model(model_path, result.model, meta)
    _history_csv(out / "history.csv", result)
    prov = {"model_sha256": mio.sha256_file(model_path), "inputs": _input_hashes(cfg),
            "n_train_windows": len(samples), "converged": result.converged}
    write_resolved(cfg, out, {"provenance": prov})
    print(f"trained {cfg.train.model} on {len(samples)} windows; final loss "
          f"{result.history[-1]['loss']:.6f}; model {model_path}")
    return 0


# ---------------------------------------------------------------------------
# predict / evaluate


def _model_stats(model) -> tuple[NormalizationStats, int, list[int]]:
    meta = model.meta
    try:
        return (NormalizationStats.from_dict(meta["normalization"]), int(meta["window"]),
                list(meta["kept_sensors"]))
    except KeyError as exc:
        raise DataFormatError(f"model file lacks preprocessing metadata {exc}") from None


def cmd_predict(args) -> int:
    model = mio.load_model(args.model)
    stats, window, kept = _model_stats(model)
    weibull_mean = args.weibull_mean or model.meta.get("weibull_mean", "standard")
    src = Path(args.input)
    with open(src, "rb") as fh:
        is_dataset = fh.read(8) == mio.DATASET_MAGIC
    if is_dataset:
        samples, header = mio.load_dataset(src)
        if header["window"] != window:
            raise ConfigError(f"dataset window {header['window']} != model window {window}")
        if not NormalizationStats.from_dict(header["normalization"]).matches(stats):
            raise ConfigError("dataset normalisation stats differ from the model's")
    else:
        traces = load_cmapss(src, "test", args.rul) if args.rul else load_cmapss(src, "train")
        traces = apply_normalization(select_sensors(traces, kept), stats)
        samples = make_windows(traces, window, mode="infer", cap=None)
        if not args.rul:
            samples.targets[:] = np.nan
    preds = predict_batch(samples.windows, model, samples.asset_ids, samples.targets,
                          samples.window_index, weibull_mean)
    write_predictions_csv(args.out, preds, model.K)
    print(f"{len(preds)} predictions written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = mio.load_model(args.model)
    stats, window, kept = _model_stats(model)
    cfg_mode = args.mode or "final-window"
    weibull_mean = args.weibull_mean or model.meta.get("weibull_mean", "standard")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = Path(args.data_dir)
    rul = d / f"RUL_{args.dataset_id}.txt"
    if not rul.exists():
        raise DataFormatError(f"missing RUL file {rul}")
    test = load_cmapss(d / f"test_{args.dataset_id}.txt", "test", rul)
    test = apply_normalization(select_sensors(test, kept), stats)
    cap = None if args.uncapped else model.meta.get("rul_cap", DEFAULT_RUL_CAP)
    with _threads(args.threads):
        report = evaluate_fleet(test, model, window, cfg_mode, cap, weibull_mean)
    write_predictions_csv(out / "predictions.csv", report.predictions, model.K)
    payload = report.to_dict()
    payload.update({
        "score_per_asset": report.score_per_asset,
        "model_sha256": mio.sha256_file(args.model),
        "config_hash": model.meta.get("config_hash"),
        "output_gate": model.output_gate,
        "model_kind": model.kind,
        "families": model.spec.to_list(),
        "test_inputs": {p.name: mio.sha256_file(p)
                        for p in (d / f"test_{args.dataset_id}.txt", rul)},
    })
    _dump_json(out / "report.json", payload)
    print(f"RMSE {report.rmse:.4f}  PS {report.score_total:.2f}  n={report.n_t} "
          f"({report.mode})")
    return 0


# ---------------------------------------------------------------------------
# tune


def cmd_tune(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    grid = TuneGrid.from_dict(raw.pop("grid", {}))
    cfg = RunConfig.from_dict({**raw, **_cli_overrides(args)})
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.data_dir:
        raise ConfigError("tuning needs data_dir")
    traces = load_cmapss(Path(cfg.data_dir) / f"train_{cfg.dataset_id}.txt", "train")
    traces = prepare(traces).train_traces
    with _threads(cfg.threads):
        res = tune(traces, cfg.train, grid, seed=cfg.train.seed, cap=cfg.rul_cap)
    write_trace(out / "tune_trace.csv", res.rows)
    best = RunConfig.from_dict({**cfg.to_dict(), **res.config.to_dict()})
    write_resolved(best, out, {"tuning": {"winners": res.winners, "best_settings": res.best,
                                          "n_trainings": len(res.rows)}})
    _dump_json(out / "best.json", {"settings": res.best, "winners": res.winners})
    print(f"best settings: {res.best}")
    return 0


# ---------------------------------------------------------------------------


def _cli_overrides(args) -> dict:
    o = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "out_dir", None):
        o["out_dir"] = args.out_dir
    if getattr(args, "threads", None):
        o["threads"] = args.threads
    if getattr(args, "preset", None):
        o["preset"] = args.preset
    return o


def _resolve(args) -> RunConfig:
    return load_config(args.config, _cli_overrides(args))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixrul", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--threads", type=int)

    sp = sub.add_parser("preprocess", help="window and normalise a C-MAPSS subset")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--dataset-id", default="FD003")
    sp.add_argument("--window", type=int, default=30)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--cap", type=float, default=DEFAULT_RUL_CAP)
    common(sp, config=False)
    sp.set_defaults(func=cmd_preprocess, out_dir="preprocessed", seed=0)

    sp = sub.add_parser("train", help="train a DLBP1 or DLBP2 model")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="RUL for the latest window of each engine")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="C-MAPSS-format trace file or .mxd dataset")
    sp.add_argument("--rul", help="optional RUL file giving true residual lives")
    sp.add_argument("--out", required=True)
    sp.add_argument("--weibull-mean", choices=["standard", "squared"])
    common(sp, config=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="RMSE / PS / RAE on a test subset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--dataset-id", default="FD003")
    sp.add_argument("--mode", choices=["final-window", "all-windows"])
    sp.add_argument("--uncapped", action="store_true", help="score against uncapped true RUL")
    sp.add_argument("--weibull-mean", choices=["standard", "squared"])
    common(sp, config=False)
    sp.set_defaults(func=cmd_evaluate, out_dir="evaluation")

    sp = sub.add_parser("tune", help="block-by-block hyperparameter search")
    common(sp)
    sp.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "tune" and not args.config:
        parser.error("tune needs --config")
    try:
        return args.func(args)
    except MixrulError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
