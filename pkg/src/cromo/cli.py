"""Command-line surface: train, eval, sweep, confusion, plot.

Exit codes: 0 on success, 2 for configuration/validation problems, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .config import ConfigError
from .container import save_embeddings
from .evaluation import (ProbeConfig, TaskClassMap, compute_la_wp_tp,
                         extract_features, fit_linear_probe, knn_eval)
from .models import load_checkpoint
from .trainer import ResumeMismatch, run_continual

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _load_doc(args) -> dict:
    doc = cfgmod.load_config(args.config)
    if getattr(args, "override", None):
        doc = cfgmod.apply_overrides(doc, args.override)
    return cfgmod.validate_config(doc)


def _run_dir_for(doc: dict) -> Path:
    h = cfgmod.config_hash(doc)
    return Path(doc["output_root"]) / f"{doc['name']}-{h}"


def _final_eval(doc: dict, run_dir: Path) -> dict:
    """Linear-probe evaluation of the final checkpoint; writes report.json."""
    train_ds, test_ds = cfgmod.make_datasets(doc)
    seq = cfgmod.make_sequence(doc, train_ds)
    ckpts = sorted(run_dir.glob("checkpoints/task_*.ckpt"),
                   key=lambda p: int(p.stem.split("_")[1]))
    net, _, _ = load_checkpoint(ckpts[-1])
    policy = cfgmod.make_policy(doc)
    probe = fit_linear_probe(net.encoder, train_ds, policy,
                             train_ds.class_count, cfgmod.make_probe_config(doc))
    class_map = TaskClassMap.from_sequence(seq) if seq.mode == "CIL" else None
    if class_map is None:
        # data-incremental splits have no class-task structure; report LA only
        from .evaluation import probe_predictions
        preds = probe_predictions(probe, net.encoder, test_ds, policy)
        report = {"la": float((preds == test_ds.labels).mean())}
    else:
        rep = compute_la_wp_tp(probe, net.encoder, test_ds, policy, class_map)
        print(rep.format_table())
        rep.save_confusion_csv(run_dir / "confusion_matrix.csv")
        report = rep.to_dict()
    (run_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def cmd_train(args) -> int:
    doc = _load_doc(args)
    run_dir = _run_dir_for(doc)
    # train into a .partial staging dir; the final rename marks completion
    work = run_dir if (args.resume and run_dir.exists()) \
        else Path(str(run_dir) + ".partial")
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.snapshot").write_text(yaml.safe_dump(doc, sort_keys=True))

    train_ds, _ = cfgmod.make_datasets(doc)
    seq = cfgmod.make_sequence(doc, train_ds)
    tc = cfgmod.make_train_config(doc)
    run_continual(tc, seq, work, resume=args.resume)
    if work != run_dir:
        if run_dir.exists():
            shutil.rmtree(run_dir)
        work.rename(run_dir)          # atomic completion marker
    print(f"run {cfgmod.config_hash(doc)} complete -> {run_dir}")
    if not args.skip_eval:
        report = _final_eval(doc, run_dir)
        print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _, meta = load_checkpoint(args.checkpoint)
    doc = cfgmod.validate_config(cfgmod.load_config(args.config)) if args.config \
        else None
    if doc is None:
        raise ConfigError("eval needs --config to locate the dataset and split")
    train_ds, test_ds = cfgmod.make_datasets(doc)
    h, w, c = train_ds.image_shape
    if (c, h) != (net.cfg.in_channels, net.cfg.image_size):
        raise ConfigError(
            f"checkpoint expects {net.cfg.in_channels}x{net.cfg.image_size}"
            f"x{net.cfg.image_size} inputs but {train_ds.name} provides "
            f"{c}x{h}x{w}")
    seq = cfgmod.make_sequence(doc, train_ds)
    policy = cfgmod.make_policy(doc)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)

    report: dict
    if args.mode == "knn":
        acc = knn_eval(net.encoder, train_ds, test_ds, policy, k=args.k)
        report = {"knn_accuracy": acc, "k": args.k}
        print(f"knn accuracy (k={args.k}): {acc:.4f}")
    elif args.mode == "transfer":
        probe = fit_linear_probe(net.encoder, train_ds, policy,
                                 train_ds.class_count,
                                 ProbeConfig(epochs=args.transfer_epochs,
                                             lr=args.transfer_lr))
        from .evaluation import probe_predictions
        preds = probe_predictions(probe, net.encoder, test_ds, policy)
        report = {"transfer_accuracy": float((preds == test_ds.labels).mean()),
                  "target": test_ds.name}
        print(f"transfer accuracy on {test_ds.name}: {report['transfer_accuracy']:.4f}")
    else:
        probe = fit_linear_probe(net.encoder, train_ds, policy,
                                 train_ds.class_count, cfgmod.make_probe_config(doc))
        class_map = TaskClassMap.from_sequence(seq)
        rep = compute_la_wp_tp(probe, net.encoder, test_ds, policy, class_map)
        print(rep.format_table())
        rep.save_confusion_csv(out / "confusion_matrix.csv")
        report = rep.to_dict()
    if args.dump_embeddings:
        feats = extract_features(net.encoder, test_ds, policy).numpy()
        task_arr = np.zeros(len(test_ds), dtype=np.int64)
        if seq.mode == "CIL":
            lut = TaskClassMap.from_sequence(seq).task_array(test_ds.class_count)
            task_arr = lut[test_ds.labels]
        save_embeddings(out / "embeddings.bin", feats, test_ds.labels, task_arr,
                        meta={"checkpoint": str(args.checkpoint)})
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


SWEEP_AXES = {
    "buffer_budget": "trainer.buffer_budget",
    "alpha": "strategy.alpha",
    "zeta": "strategy.zeta",
    "strategy": "strategy.name",
}


def cmd_sweep(args) -> int:
    base = _load_doc(args)
    values = [yaml.safe_load(v) for v in args.values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_AXES[args.axis]
    rows = []
    for value in values:
        doc = cfgmod.apply_overrides(base, [f"{key}={value}"])
        try:
            doc = cfgmod.validate_config(doc)
            run_dir = _run_dir_for(doc)
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.snapshot").write_text(yaml.safe_dump(doc, sort_keys=True))
            train_ds, _ = cfgmod.make_datasets(doc)
            seq = cfgmod.make_sequence(doc, train_ds)
            run_continual(cfgmod.make_train_config(doc), seq, run_dir)
            report = _final_eval(doc, run_dir)
            rows.append({"value": value, "la": report.get("la"),
                         "tp": report.get("tp"), "wp": report.get("wp"),
                         "status": "ok"})
        except Exception as exc:  # a failed cell must not kill the sweep
            rows.append({"value": value, "la": None, "tp": None, "wp": None,
                         "status": f"error: {exc}"})
        print(f"[sweep] {args.axis}={value}: {rows[-1]['status']} "
              f"la={rows[-1]['la']}")
    out = Path(args.out or f"sweep_{args.axis}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "la", "wp", "tp", "status"])
        writer.writeheader()
        writer.writerows(rows)
    _plot_sweep(rows, args.axis, out / "sweep.png")
    print(f"sweep table -> {out / 'sweep.csv'}")
    return EXIT_OK


def _plot_sweep(rows, axis, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r["status"] == "ok" and r["la"] is not None]
    if not ok:
        return
    fig, ax = plt.subplots(figsize=(4.5, 3))
    xs = list(range(len(ok)))
    ax.plot(xs, [r["la"] for r in ok], marker="o")
    ax.set_xticks(xs, [str(r["value"]) for r in ok])
    ax.set_xlabel(axis)
    ax.set_ylabel("final linear accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_confusion(args) -> int:
    from .confusion import ConfusionExperiment, emit_curves, run_confusion_experiment

    doc = _load_doc(args)
    conf = doc["confusion"]
    train_ds, _ = cfgmod.make_datasets(doc)
    tc = cfgmod.make_train_config(doc)
    out = Path(doc["output_root"]) / "confusion" / cfgmod.config_hash(doc)
    records = []
    for learner in conf["learners"]:
        for mode in conf["modes"]:
            cell_cfg = tc
            if learner == "supervised":
                from dataclasses import replace
                from .trainer import OptimizerConfig
                cell_cfg = replace(tc, optimizer=OptimizerConfig(
                    kind=tc.optimizer.kind, lr=conf["supervised_lr"],
                    weight_decay=tc.optimizer.weight_decay,
                    momentum=tc.optimizer.momentum))
            exp = ConfusionExperiment(
                dataset=train_ds, learner=learner, schedule_mode=mode,
                num_tasks=conf["num_tasks"], iterations=conf["iterations"],
                probe_cadence=conf["probe_cadence"],
                batch_size=conf["batch_size"], seed=doc["seed"],
                train=cell_cfg, probe=cfgmod.make_probe_config(doc))
            cell = run_confusion_experiment(exp)
            records.extend(cell)
            last = cell[-1]
            print(f"[confusion] {learner}/{mode}: la={last['la']:.3f} "
                  f"tp={last['tp']:.3f} wp={last['wp']:.3f}")
    paths = emit_curves(records, out)
    print(f"curves -> {paths['csv']}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    log = run_dir / "metrics.log"
    if not log.exists():
        raise FileNotFoundError(f"no metrics.log under {run_dir}")
    records = [json.loads(line) for line in log.read_text().splitlines()]
    if not records:
        raise RuntimeError("metrics.log is empty")
    out = Path(args.out or run_dir / "plots")
    out.mkdir(parents=True, exist_ok=True)
    terms = ["total", "task_loss", "distill_loss", "cromo_loss_v1", "cromo_loss_v2"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in records]
    for term in terms:
        if any(r[term] != 0.0 for r in records):
            ax.plot(steps, [r[term] for r in records], label=term, linewidth=0.8)
    for boundary in {r["task"] for r in records}:
        first = next(r["step"] for r in records if r["task"] == boundary)
        ax.axvline(first, color="gray", linewidth=0.5, linestyle=":")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "losses.png", dpi=120)
    plt.close(fig)
    print(f"plots -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cromo",
                                 description="continual self-supervised learning "
                                             "with cross-task/cross-model mixup")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a continual experiment")
    p.add_argument("--config", required=True, help="YAML path or preset name")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--skip-eval", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="config describing data/split")
    p.add_argument("--mode", choices=["linear", "knn", "transfer"], default="linear")
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--transfer-lr", type=float, default=0.2)
    p.add_argument("--transfer-epochs", type=int, default=200)
    p.add_argument("--out")
    p.add_argument("--dump-embeddings", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a one-axis sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[])
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("confusion", help="schedule-confusion study")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[])
    p.set_defaults(func=cmd_confusion)

    p = sub.add_parser("plot", help="render loss curves for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ResumeMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
