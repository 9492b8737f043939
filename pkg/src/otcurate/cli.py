"""Command-line entry point: generate, warmup, select, train, evaluate, ablate.

Every stage reads and writes plain files in ``--out``.  A ``manifest.json``
in the same directory records, per stage, the config snapshot, seed, content
hashes of inputs and outputs, tool version and wall-clock time.  Before a
stage runs, each of its inputs is checked against the hash recorded by the
stage that produced it, so an intermediate edited or regenerated out of
order is reported as stale instead of silently consumed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, plotting
from .classifier import LinearModel, accuracy, forward
from .core import ConfigError, Dataset, ExperimentConfig
from .datagen import dataset_stats, make_benchmark
from .metrics import (
    GROUP_NAMES,
    ablation_run,
    class_groups,
    per_class_accuracy,
    selection_f1,
)
from .selection import small_loss_baseline
from .ssl import RoundMetrics, StageError, Toggles, refresh_selection, run_pipeline, warmup_model

log = logging.getLogger("otcurate")

MANIFEST = "manifest.json"
DATA_FILES = ("train_features.csv", "train_labels.csv", "test_features.csv", "test_labels.csv")


class CliError(Exception):
    """A user-facing failure; the message goes to stderr and the exit status is 1."""


# files


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _nan_to_none(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def save_dataset(ds: Dataset, out, prefix: str) -> None:
    n = len(ds)
    write_csv(os.path.join(out, f"{prefix}_features.csv"),
              ["sample_id"] + [f"f{j}" for j in range(ds.dim)],
              ([i] + ds.features[i].tolist() for i in range(n)))
    write_csv(os.path.join(out, f"{prefix}_labels.csv"), ["sample_id", "true_label", "observed_label"],
              ([i, int(ds.true_labels[i]), int(ds.observed_labels[i])] for i in range(n)))


def load_dataset(out, prefix: str, num_classes: int) -> Dataset:
    fpath = os.path.join(out, f"{prefix}_features.csv")
    lpath = os.path.join(out, f"{prefix}_labels.csv")
    if not (os.path.exists(fpath) and os.path.exists(lpath)):
        raise CliError(f"missing dataset: {fpath} / {lpath} not found; run `otcurate generate` first")
    feats = np.loadtxt(fpath, delimiter=",", skiprows=1, ndmin=2)
    labels = np.loadtxt(lpath, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if not np.array_equal(feats[:, 0].astype(np.int64), labels[:, 0]):
        raise CliError(f"{prefix} feature and label files disagree on sample ids")
    return Dataset(feats[:, 1:], labels[:, 1], labels[:, 2], num_classes)


def load_model(path) -> LinearModel:
    if not os.path.exists(path):
        raise CliError(f"missing model: {path} not found")
    with open(path) as fh:
        return LinearModel.from_json(fh.read())


# config and manifest


def parse_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return ExperimentConfig.from_dict(data)


def resolve_config(args) -> ExperimentConfig:
    """--config wins; otherwise the snapshot from ``generate``; --seed overrides either."""
    snapshot = os.path.join(args.out, "config.json")
    if args.config is None and args.command != "generate" and os.path.exists(snapshot):
        cfg = parse_config(snapshot)
    else:
        cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
        cfg.validate()
    return cfg


def load_manifest(out) -> dict:
    path = os.path.join(out, MANIFEST)
    if not os.path.exists(path):
        return {"version": __version__, "stages": {}}
    with open(path) as fh:
        return json.load(fh)


def producers(manifest) -> dict:
    """Map of output file name to (stage, recorded hash)."""
    out = {}
    for stage, rec in manifest.get("stages", {}).items():
        for name, digest in rec.get("outputs", {}).items():
            out[name] = (stage, digest)
    return out


def check_inputs(manifest, out, names) -> dict:
    """Hash the inputs of a stage, failing if any differs from what its producer recorded."""
    made = producers(manifest)
    hashes = {}
    for name in names:
        path = os.path.join(out, name)
        digest = sha256(path)
        if name in made and made[name][1] != digest:
            raise CliError(f"stale input: {name} changed since stage {made[name][0]!r} wrote it; "
                           f"re-run {made[name][0]!r}")
        hashes[name] = digest
    return hashes


def stale_stages(manifest, out) -> list:
    """Stages whose recorded inputs no longer match the files on disk."""
    stale = []
    for stage, rec in manifest.get("stages", {}).items():
        for name, digest in rec.get("inputs", {}).items():
            path = os.path.join(out, name)
            if not os.path.exists(path) or sha256(path) != digest:
                stale.append(stage)
                break
    return sorted(stale)


def record(out, stage, cfg, inputs, outputs, seconds, **extra) -> None:
    manifest = load_manifest(out)
    manifest["version"] = __version__
    manifest["stages"][stage] = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": inputs,
        "outputs": {name: sha256(os.path.join(out, name)) for name in outputs},
        "wall_clock_s": round(seconds, 3),
        "tool_version": __version__,
        **extra,
    }
    manifest["stale"] = stale_stages(manifest, out)
    write_json(os.path.join(out, MANIFEST), manifest)


# stages


def cmd_generate(args, cfg):
    train, test = make_benchmark(cfg)
    save_dataset(train, args.out, "train")
    save_dataset(test, args.out, "test")
    write_json(os.path.join(args.out, "config.json"), cfg.to_dict())
    stats = {"train": dataset_stats(train), "test": dataset_stats(test),
             "train_class_counts": train.class_counts.tolist()}
    write_json(os.path.join(args.out, "dataset.json"), {"config": cfg.to_dict(), "stats": stats})
    return {}, list(DATA_FILES) + ["config.json", "dataset.json"]


def _datasets(args, cfg, manifest):
    for name in DATA_FILES:
        if not os.path.exists(os.path.join(args.out, name)):
            raise CliError(f"missing dataset: {os.path.join(args.out, name)} not found; "
                           "run `otcurate generate` first")
    inputs = check_inputs(manifest, args.out, DATA_FILES)
    return load_dataset(args.out, "train", cfg.K), load_dataset(args.out, "test", cfg.K), inputs


def cmd_warmup(args, cfg):
    manifest = load_manifest(args.out)
    train, test, inputs = _datasets(args, cfg, manifest)
    model, trace = warmup_model(cfg, train)
    with open(os.path.join(args.out, "model_warmup.json"), "w") as fh:
        fh.write(model.to_json())
    write_csv(os.path.join(args.out, "warmup_trace.csv"), ["epoch", "loss"],
              ([i + 1, v] for i, v in enumerate(trace)))
    plotting.loss_curve(trace, os.path.join(args.out, "warmup_trace.png"))
    print(f"warm-up test accuracy {accuracy(model, test.features, test.true_labels):.4f}")
    return inputs, ["model_warmup.json", "warmup_trace.csv", "warmup_trace.png"]


def cmd_select(args, cfg):
    manifest = load_manifest(args.out)
    train, _, inputs = _datasets(args, cfg, manifest)
    if not os.path.exists(os.path.join(args.out, "model_warmup.json")):
        raise CliError("missing model: run `otcurate warmup` first")
    inputs.update(check_inputs(manifest, args.out, ["model_warmup.json"]))
    model = load_model(os.path.join(args.out, "model_warmup.json"))
    sel = refresh_selection(model, cfg, train, None, Toggles())
    part = sel.partition
    wmax = sel.weighted.max(axis=1)
    write_csv(os.path.join(args.out, "selection.csv"),
              ["sample_id", "observed_label", "true_label", "weighted_max", "own_class_distance",
               "clean_prob", "clean_flag"],
              ([i, int(train.observed_labels[i]), int(train.true_labels[i]), wmax[i], part.own_distance[i],
                part.clean_prob[i], bool(part.clean_mask[i])] for i in range(len(train))))
    probs = forward(model, train.features)
    baseline = small_loss_baseline(probs, train.observed_labels, cfg.baseline_threshold)
    ours = selection_f1(part.clean_mask, train)
    base = selection_f1(baseline, train)
    write_json(os.path.join(args.out, "selection.json"), {
        "tau_trace": sel.thresholds.history,
        "centroid_support": sel.centroids.support.tolist(),
        "fallback_centroids": np.flatnonzero(sel.centroids.fallback).tolist(),
        "gmm": None if sel.gmm is None else {
            "means": sel.gmm.means.tolist(), "variances": sel.gmm.variances.tolist(),
            "mixing": sel.gmm.mixing.tolist(), "converged": sel.gmm.converged},
        "n_clean": int(part.clean_mask.sum()),
        "f1": ours.to_dict(),
        "baseline_f1": base.to_dict(),
        "baseline_threshold": cfg.baseline_threshold,
    })
    plotting.group_f1_bars({"cross-selection": {g.name: g.f1 for g in ours.groups},
                            "small-loss": {g.name: g.f1 for g in base.groups}},
                           os.path.join(args.out, "selection_f1.png"))
    print(f"selected {int(part.clean_mask.sum())} of {len(train)} as clean; "
          f"tail F1 {ours.by_name('tail').f1} vs baseline {base.by_name('tail').f1}")
    return inputs, ["selection.csv", "selection.json", "selection_f1.png"]


def rounds_rows(rounds):
    return (r.row() for r in rounds)


def cmd_train(args, cfg):
    manifest = load_manifest(args.out)
    train, test, inputs = _datasets(args, cfg, manifest)
    warm_path = os.path.join(args.out, "model_warmup.json")
    warm = None
    if os.path.exists(warm_path):
        inputs.update(check_inputs(manifest, args.out, ["model_warmup.json"]))
        warm = load_model(warm_path)
    dump = os.path.join(args.out, "plans") if args.dump_plans else None
    res = run_pipeline(cfg, train, test, initial_model=warm, dump_dir=dump)
    with open(os.path.join(args.out, "model_final.json"), "w") as fh:
        fh.write(res.model.to_json())
    write_csv(os.path.join(args.out, "rounds.csv"), RoundMetrics.CSV_FIELDS, rounds_rows(res.rounds))
    outputs = ["model_final.json", "rounds.csv"]
    if res.rounds:
        plotting.round_traces(res.rounds, os.path.join(args.out, "rounds.png"))
        outputs.append("rounds.png")
    print(f"final test accuracy {res.final_test_acc:.4f} (warm-up {res.warmup_test_acc:.4f})")
    return inputs, outputs


def cmd_evaluate(args, cfg):
    manifest = load_manifest(args.out)
    train, test, inputs = _datasets(args, cfg, manifest)
    if not os.path.exists(os.path.join(args.out, "model_final.json")):
        raise CliError("missing model: run `otcurate train` first")
    inputs.update(check_inputs(manifest, args.out, ["model_final.json"]))
    model = load_model(os.path.join(args.out, "model_final.json"))
    pred = np.argmax(forward(model, test.features), axis=1)
    per_class = per_class_accuracy(pred, test.true_labels, cfg.K)
    groups = class_groups(train.class_counts)
    group_name = {int(k): name for name, cls in zip(GROUP_NAMES, groups) for k in cls}
    write_csv(os.path.join(args.out, "evaluation.csv"), ["class", "group", "train_count", "test_accuracy"],
              ([k, group_name[k], int(train.class_counts[k]), per_class[k]] for k in range(cfg.K)))
    report = {
        "test_accuracy": float(np.mean(pred == test.true_labels)),
        "group_accuracy": {name: _nan_to_none(float(np.nanmean(per_class[cls]))) for name, cls in
                           zip(GROUP_NAMES, groups)},
    }
    outputs = ["evaluation.csv", "evaluation.json"]
    sel_json = os.path.join(args.out, "selection.json")
    if os.path.exists(sel_json):
        inputs.update(check_inputs(manifest, args.out, ["selection.json"]))
        with open(sel_json) as fh:
            sel = json.load(fh)
        report["selection_f1"] = {k: sel["f1"][k]["f1"] for k in GROUP_NAMES}
        report["baseline_selection_f1"] = {k: sel["baseline_f1"][k]["f1"] for k in GROUP_NAMES}
        plotting.group_f1_bars({"cross-selection": report["selection_f1"],
                                "small-loss": report["baseline_selection_f1"]},
                               os.path.join(args.out, "f1_bars.png"))
        outputs.append("f1_bars.png")
        if args.gnuplot:
            with open(os.path.join(args.out, "f1_bars.dat"), "w") as fh:
                fh.write("# group cross_selection_f1 small_loss_f1\n")
                for k in GROUP_NAMES:
                    a, b = report["selection_f1"][k], report["baseline_selection_f1"][k]
                    fh.write(f"{k} {'nan' if a is None else repr(a)} {'nan' if b is None else repr(b)}\n")
            outputs.append("f1_bars.dat")
    elif args.gnuplot:
        raise CliError("--gnuplot needs selection.json; run `otcurate select` first")
    write_json(os.path.join(args.out, "evaluation.json"), report)
    print(f"test accuracy {report['test_accuracy']:.4f}")
    return inputs, outputs


def parse_toggles(text) -> tuple:
    if not text:
        return ("cdt", "lcs", "otp")
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in names if t not in ("cdt", "lcs", "otp")]
    if bad:
        raise CliError(f"unknown toggle(s) {', '.join(bad)}; choose from cdt, lcs, otp")
    return names


def cmd_ablate(args, cfg):
    disabled = parse_toggles(args.toggles)
    manifest = load_manifest(args.out)
    inputs = {}
    rows, summary, report = [], {}, {"seeds": [], "disabled": list(disabled)}
    for offset in range(args.n_seeds):
        seed_cfg = cfg.replace(seed=cfg.seed + offset)
        if offset == 0:
            train, test, inputs = _datasets(args, cfg, manifest)
        else:
            train, test = make_benchmark(seed_cfg)
        res = ablation_run(seed_cfg, train, test, disabled)
        report["seeds"].append(seed_cfg.seed)
        for name, r in res.items():
            t = [m for m in r.rounds if m.n_transport]
            n = sum(m.n_transport for m in t)
            t_acc = sum(m.transport_acc * m.n_transport for m in t) / n if n else float("nan")
            m_acc = sum(m.model_acc_on_transport * m.n_transport for m in t) / n if n else float("nan")
            rows.append([seed_cfg.seed, name, r.warmup_test_acc, r.final_test_acc, n, t_acc, m_acc])
            summary.setdefault(name, []).append(r.final_test_acc)
    write_csv(os.path.join(args.out, "ablation.csv"),
              ["seed", "variant", "warmup_test_acc", "final_test_acc", "n_transport", "transport_acc",
               "model_acc_on_transport"], rows)
    report["final_test_acc"] = {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "per_seed": v}
                                for k, v in summary.items()}
    write_json(os.path.join(args.out, "ablation.json"), report)
    plotting.ablation_bars(summary, os.path.join(args.out, "ablation.png"))
    for k, v in report["final_test_acc"].items():
        print(f"{k:8s} {v['mean']:.4f} ± {v['std']:.4f}")
    return inputs, ["ablation.csv", "ablation.json", "ablation.png"]


COMMANDS = {
    "generate": cmd_generate,
    "warmup": cmd_warmup,
    "select": cmd_select,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config with ExperimentConfig field names")
    common.add_argument("--out", metavar="DIR", default="run", help="artifact directory (default: run)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="otcurate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("generate", parents=[common], help="synthesize the long-tailed noisy dataset")
    sub.add_parser("warmup", parents=[common], help="cross-entropy warm-up on observed labels")
    sub.add_parser("select", parents=[common], help="clean/noisy partition from the warm-up model")
    t = sub.add_parser("train", parents=[common], help="semi-supervised rounds with transport pseudo-labels")
    t.add_argument("--dump-plans", action="store_true", help="write every batch's transport plan as JSON")
    e = sub.add_parser("evaluate", parents=[common], help="test accuracy and selection F1 report")
    e.add_argument("--gnuplot", action="store_true", help="also write f1_bars.dat for gnuplot")
    a = sub.add_parser("ablate", parents=[common], help="full method against component ablations")
    a.add_argument("--toggles", metavar="LIST", help="components to ablate, e.g. cdt,lcs,otp (default: all)")
    a.add_argument("--n-seeds", type=int, default=1, metavar="K", help="repeat over K consecutive seeds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = resolve_config(args)
        if stage == "ablate" and args.n_seeds < 1:
            raise CliError("--n-seeds must be ≥ 1")
        os.makedirs(args.out, exist_ok=True)
        t0 = time.perf_counter()
        inputs, outputs = COMMANDS[stage](args, cfg)
        record(args.out, stage, cfg, inputs, outputs, time.perf_counter() - t0)
    except (CliError, ConfigError) as exc:
        print(f"otcurate {stage}: error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"otcurate {stage}: error in stage {exc.stage!r} (round {exc.round_index}): {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"otcurate {stage}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
