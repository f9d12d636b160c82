"""Command-line driver: synth, train, fit-ensemble, eval.

Every invocation creates one run directory containing resolved_config.json
(the exact semantic inputs, no timestamps) so any run can be reproduced
bit-identically from its stored config and seed.

Exit codes: 0 ok, 2 unusable output path or bad usage, 3 training
precondition violated, 4 missing checkpoint or model file, 5 evaluation
set single-class (AUC undefined).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data, ensemble, metrics, nets, train

EXIT_OK = 0
EXIT_BAD_PATH = 2
EXIT_TRAIN_PRECONDITION = 3
EXIT_MISSING_MODEL = 4
EXIT_SINGLE_CLASS = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _make_run_dir(out: str, stem: str, seed: int, run_name=None) -> Path:
    base = Path(out)
    try:
        base.mkdir(parents=True, exist_ok=True)
        name = run_name or f"{stem}-{time.strftime('%Y%m%d-%H%M%S')}-s{seed}"
        run_dir = base / name
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_BAD_PATH, f"cannot write to {out}: {exc}") from exc
    return run_dir


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_samples(manifest: str, classes: str):
    class_map = data.CLASS_MAPS[classes]
    return data.load_manifest(manifest, class_map)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING_MODEL, f"missing {what}: {path}")
    return p


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_BAD_PATH, f"cannot write to {args.out}: {exc}") from exc
    samples = data.synth_dataset(args.normal, args.anomaly, args.size, args.seed)
    rows = []
    for i, s in enumerate(samples):
        rel = f"images/img{i:05d}.png"
        data.write_image(out / rel, s.image)
        rows.append((rel, s.source_class, s.patient_id))
    data.write_manifest(out / "manifest.csv", rows)
    patients = sorted({s.patient_id for s in samples})
    if len(patients) >= 2:
        split = data.patient_split(patients, ratio=0.8, seed=args.seed)
        (out / "split.json").write_text(split.to_json() + "\n", encoding="utf-8")
    _write_json(out / "resolved_config.json", {
        "command": "synth", "normal": args.normal, "anomaly": args.anomaly,
        "size": args.size, "seed": args.seed,
    })
    print(f"wrote {len(samples)} images and manifest.csv to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _resolve_train_config(args) -> train.TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key, value in (("epochs", args.epochs), ("lr", args.lr),
                       ("batch_size", args.batch_size), ("seed", args.seed)):
        if value is not None:
            base[key] = value
    return train.TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    try:
        cfg = _resolve_train_config(args)
    except ValueError as exc:
        raise CliError(EXIT_TRAIN_PRECONDITION, str(exc)) from exc
    samples, _ = _load_samples(args.manifest, args.classes)
    val_samples = ()
    if args.split:
        split = data.SplitSpec.from_json(Path(args.split).read_text(encoding="utf-8"))
        parts = split.partition(samples)
        train_samples, val_samples = parts["train"], parts["val"]
    else:
        train_samples = samples
    if args.learner == "ae" and args.filter == "normal-only":
        train_samples = [s for s in train_samples if s.label != data.ANOMALY]

    run_dir = _make_run_dir(args.out, f"train-{args.learner}", cfg.seed,
                            args.run_name)
    bundle = nets.build_bundle(args.preset, seed=cfg.seed, dtype=cfg.dtype)
    ckpt = run_dir / "checkpoint.json"
    train_fns = {"clf": train.train_classifier, "ae": train.train_autoencoder,
                 "semi": train.train_semi}
    try:
        report = train_fns[args.learner](bundle, train_samples, cfg,
                                         val_samples, checkpoint_path=ckpt)
    except ValueError as exc:
        raise CliError(EXIT_TRAIN_PRECONDITION, str(exc)) from exc
    (run_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _write_json(run_dir / "resolved_config.json", {
        "command": "train", "learner": args.learner, "preset": args.preset,
        "classes": args.classes, "manifest": str(args.manifest),
        "split": args.split and str(args.split), "filter": args.filter,
        "train_config": cfg.as_dict(),
    })
    final = report.epoch_losses[-1]
    print(f"trained {args.learner} for {cfg.epochs} epochs "
          f"(final loss {final:.6f}); checkpoint at {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-ensemble


def _load_bundle(args) -> nets.ModelBundle:
    nets_by_kind = {}
    for flag, kind in (("clf", "classifier"), ("ae", "autoencoder"),
                       ("semi", "semi")):
        path = _require_file(getattr(args, flag), f"{flag} checkpoint")
        net = nets.load_checkpoint(path)
        if net.kind != kind:
            raise CliError(EXIT_MISSING_MODEL,
                           f"{path} holds a {net.kind!r} checkpoint, expected {kind!r}")
        nets_by_kind[kind] = net
    ref = nets_by_kind["classifier"]
    for kind, net in nets_by_kind.items():
        if net.preset_name != ref.preset_name:
            raise CliError(EXIT_MISSING_MODEL,
                           "checkpoints were built from different presets")
    return nets.ModelBundle(
        preset_name=ref.preset_name, in_channels=ref.in_channels,
        classifier=nets_by_kind["classifier"],
        autoencoder=nets_by_kind["autoencoder"], semi=nets_by_kind["semi"])


def _labeled_features(bundle, samples, threads):
    labeled = [s for s in samples if s.is_labeled()]
    X = ensemble.feature_matrix(bundle, labeled, threads=threads)
    y = np.array([s.label for s in labeled], dtype=np.int64)
    return labeled, X, y


def cmd_fit_ensemble(args) -> int:
    bundle = _load_bundle(args)
    samples, _ = _load_samples(args.manifest, args.classes)
    if args.split:
        split = data.SplitSpec.from_json(Path(args.split).read_text(encoding="utf-8"))
        parts = split.partition(samples)
        samples = parts["train"] + parts["val"]
    labeled, X, y = _labeled_features(bundle, samples, args.threads)
    if y.sum() in (0, len(y)):
        raise CliError(EXIT_TRAIN_PRECONDITION,
                       "fit-ensemble: both classes required in the tuning data")

    grid = (ensemble.DEFAULT_RF_GRID if args.kind == "rf"
            else ensemble.DEFAULT_SVM_GRID)
    if args.grid:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    fit_fn = ensemble.fit_forest if args.kind == "rf" else ensemble.fit_svm

    run_dir = _make_run_dir(args.out, f"fit-{args.kind}", args.seed, args.run_name)
    best_hyper, model, log = ensemble.random_search(
        fit_fn, X, y, grid, n_draws=args.draws, seed=args.seed)

    ensemble.save_model(run_dir / "model.json", model)
    ids = [f"sample{idx:05d}" for idx in range(len(labeled))]
    ensemble.write_feature_table(run_dir / "features.csv", ids, X,
                                 [s.label for s in labeled])
    with open(run_dir / "tuning_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["draw", "hyper", "tuning_auc"])
        for entry in log:
            writer.writerow([entry["draw"], json.dumps(entry["hyper"], sort_keys=True),
                             repr(entry["tuning_auc"])])
    _write_json(run_dir / "resolved_config.json", {
        "command": "fit-ensemble", "kind": args.kind,
        "checkpoints": {"clf": str(args.clf), "ae": str(args.ae),
                        "semi": str(args.semi)},
        "manifest": str(args.manifest), "classes": args.classes,
        "split": args.split and str(args.split),
        "draws": args.draws, "seed": args.seed, "grid": grid,
        "best_hyper": best_hyper,
    })
    print(f"fit {args.kind} ensemble over {len(labeled)} samples; "
          f"best {best_hyper} -> {run_dir / 'model.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def cmd_eval(args) -> int:
    bundle = _load_bundle(args)
    model_paths = {}
    if args.rf:
        model_paths["ensemble_rf"] = _require_file(args.rf, "rf model")
    if args.svm:
        model_paths["ensemble_svm"] = _require_file(args.svm, "svm model")
    if not model_paths:
        raise CliError(EXIT_MISSING_MODEL,
                       "eval: provide at least one of --rf / --svm")
    samples, _ = _load_samples(args.manifest, args.classes)
    labeled = [s for s in samples if s.is_labeled()]
    y = np.array([s.label for s in labeled], dtype=np.int64)
    if len(labeled) == 0 or y.sum() in (0, len(y)):
        raise CliError(EXIT_SINGLE_CLASS,
                       "eval: test set must contain both classes (AUC undefined)")
    source_classes = [s.source_class for s in labeled]

    X = ensemble.feature_matrix(bundle, labeled, threads=args.threads)
    margin, log_mse, semi_prob = X[:, 0], X[:, 1], X[:, 2]

    reports = {}
    # individual base learners; scores per the reporting conventions:
    # classifier/semi use the softmax anomaly probability at 0.5, the
    # autoencoder uses log MSE thresholded at its eval-set median (no
    # supervised threshold exists for a reconstruction score)
    clf_prob = _sigmoid(margin)
    reports["classifier"] = (metrics.evaluate(
        clf_prob, (clf_prob >= 0.5).astype(int), y, source_classes), 0.5)
    ae_threshold = float(np.median(log_mse))
    reports["autoencoder"] = (metrics.evaluate(
        log_mse, (log_mse >= ae_threshold).astype(int), y, source_classes),
        ae_threshold)
    reports["semi"] = (metrics.evaluate(
        semi_prob, (semi_prob >= 0.5).astype(int), y, source_classes), 0.5)

    models = {name: ensemble.load_model(path) for name, path in model_paths.items()}
    predictions = {}
    for name, model in models.items():
        scores = model.anomaly_score(X)
        preds = model.predict(X)
        thr = 0.5 if name == "ensemble_rf" else 0.0
        reports[name] = (metrics.evaluate(scores, preds, y, source_classes), thr)
        predictions[name] = preds

    run_dir = _make_run_dir(args.out, "eval", args.seed, args.run_name)
    metrics_doc = {}
    for name, (rep, thr) in reports.items():
        doc = rep.as_dict()
        doc["decision_threshold"] = thr
        metrics_doc[name] = doc
    _write_json(run_dir / "metrics.json", metrics_doc)

    with open(run_dir / "per_class.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "source_class", "n", "proportion_correct"])
        counts = {cls: source_classes.count(cls) for cls in sorted(set(source_classes))}
        for name, (rep, _) in reports.items():
            for cls, frac in sorted(rep.per_class.items()):
                writer.writerow([name, cls, counts[cls], repr(frac)])

    # scatter data for the margin-vs-log(MSE) plot, outcomes from the
    # first available ensemble (rf preferred)
    scatter_model = "ensemble_rf" if "ensemble_rf" in predictions else "ensemble_svm"
    preds = predictions[scatter_model]
    outcome = np.where(preds == 1, np.where(y == 1, "TP", "FP"),
                       np.where(y == 0, "TN", "FN"))
    with open(run_dir / "scatter.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["logit_margin", "log_mse", "outcome"])
        for m, lm, oc in zip(margin, log_mse, outcome):
            writer.writerow([repr(float(m)), repr(float(lm)), oc])

    _write_json(run_dir / "resolved_config.json", {
        "command": "eval",
        "checkpoints": {"clf": str(args.clf), "ae": str(args.ae),
                        "semi": str(args.semi)},
        "models": {k: str(v) for k, v in model_paths.items()},
        "manifest": str(args.manifest), "classes": args.classes,
        "seed": args.seed, "scatter_model": scatter_model,
    })

    header = "".join(f"{c:>10s}" for c in metrics.MetricsReport.COLUMNS)
    print(f"{'Method':<24s}{header}")
    for name, (rep, _) in reports.items():
        print(rep.table_row(name))
    print(f"outputs in {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcead",
        description="ensemble anomaly detection pipeline for capsule-endoscopy images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p.add_argument("--normal", type=int, required=True)
    p.add_argument("--anomaly", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one base learner")
    p.add_argument("learner", choices=["clf", "ae", "semi"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, help="SplitSpec JSON for train/val")
    p.add_argument("--classes", choices=sorted(data.CLASS_MAPS), default="synth")
    p.add_argument("--preset", default="desk_tiny", choices=sorted(nets.PRESETS))
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--filter", choices=["normal-only", "none"], default="normal-only",
                   help="ae only: drop anomaly rows before training")
    p.add_argument("--out", required=True)
    p.add_argument("--run-name", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fit-ensemble", help="tune and fit a combiner model")
    p.add_argument("kind", choices=["rf", "svm"])
    p.add_argument("--clf", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--semi", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None,
                   help="SplitSpec JSON; uses train+val patients")
    p.add_argument("--classes", choices=sorted(data.CLASS_MAPS), default="synth")
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--grid", default=None, help="hyper grid JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--run-name", default=None)
    p.set_defaults(fn=cmd_fit_ensemble)

    p = sub.add_parser("eval", help="evaluate learners and ensembles on a test set")
    p.add_argument("--clf", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--semi", required=True)
    p.add_argument("--rf", default=None)
    p.add_argument("--svm", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", choices=sorted(data.CLASS_MAPS), default="synth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--run-name", default=None)
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except data.ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_PATH


if __name__ == "__main__":
    sys.exit(main())
