"""Command-line pipeline: gen-data -> train -> audit -> compare / report.

Every stage reads one YAML config (flags override it) and writes its
outputs under ``output_dir``. Each output carries the config digest and
the master seed; CSV files put them in ``#`` header lines.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import audit, dataio, stats
from .errors import ConfigError, DataError, FairAuditError, RoundFailure
from .model import CNN_CONVENTION, ModelSpec, batch_predict, load_params, save_params
from .seeding import derive_seed
from .train import TrainConfig, train, write_iteration_log

log = logging.getLogger("fairaudit")

SEED_DERIVATION = (
    "numpy SeedSequence(master_seed, spawn_key=key) -> 64-bit state; "
    "streams: data=(0,), split=(1,), train=(2,), audit=(3,); "
    "audit round r: coins=(audit, r, 0), model seeds=(audit, r, 1, attempt) then (seed, half)"
)
DATA_STREAM, SPLIT_STREAM, TRAIN_STREAM, AUDIT_STREAM = 0, 1, 2, 3

DEFAULTS = {
    "master_seed": 0,
    "output_dir": "runs/default",
    "workers": None,
    "dataset": {
        "source": "blobs",
        "per_class": None,
        "test_fraction": 0.2,
        "audit_size": None,
        "blobs": {"n_per_group": 100, "num_groups": 4, "dim": 10, "separation": 1.0, "label_noise": 0.1, "scale_step": 0.0},
        "idx": {"images": None, "labels": None},
        "csv": {"path": None, "label_column": None, "group_column": None, "categorical": []},
    },
    "model": {"arch": "LR", "hidden": 256},
    "train": {},
    "audit": {"method": "ALOOA", "rounds": 200, "target_index": None, "threshold_rule": "LOWER_LOSS_MEMBER"},
}

# Keys that change where or how fast a run happens but not what it computes.
_DIGEST_EXCLUDED = ("output_dir", "workers")


# ---------------------------------------------------------------- configuration


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base and path != "train.":
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _scalar(value)
    return out


def _set_dotted(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key '{key}'")
        node = node[part]
    if parts[-1] not in node and parts[0] != "train":
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = _scalar(yaml.safe_load(raw))


def _scalar(value):
    # YAML 1.1 reads "1e-6" as a string; accept it as the number it looks like.
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def load_config(path=None, overrides=(), dataset=None, per_class=None, seed=None, output_dir=None) -> dict:
    """Defaults, then the YAML file, then ``--set`` overrides, then the dedicated flags."""
    user = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
    cfg = _merge(DEFAULTS, user)
    for assignment in overrides:
        _set_dotted(cfg, assignment)
    if dataset is not None:
        cfg["dataset"]["source"] = dataset
    if per_class is not None:
        cfg["dataset"]["per_class"] = per_class
    if seed is not None:
        cfg["master_seed"] = seed
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["source"] not in ("blobs", "mnist", "idx", "csv"):
        raise ConfigError(f"dataset.source must be blobs, mnist, idx or csv, got {ds['source']!r}")
    for key in ("images", "labels") if ds["source"] == "idx" else ():
        if not ds["idx"][key] or not Path(ds["idx"][key]).exists():
            raise ConfigError(f"dataset.idx.{key} must name an existing file")
    if ds["source"] == "csv":
        c = ds["csv"]
        if not c["path"] or not Path(c["path"]).exists():
            raise ConfigError("dataset.csv.path must name an existing file")
        if not c["label_column"] or not c["group_column"]:
            raise ConfigError("dataset.csv needs label_column and group_column")
    if not isinstance(cfg["master_seed"], int) or cfg["master_seed"] < 0:
        raise ConfigError("master_seed must be a nonnegative integer")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg["train"]) - known
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    try:
        audit.Method(cfg["audit"]["method"])
        audit.ThresholdRule(cfg["audit"]["threshold_rule"])
        ModelSpec(cfg["model"]["arch"], (1, 28, 28) if cfg["model"]["arch"] == "CNN" else (1,), 2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _train_config(cfg)


def config_digest(cfg: dict) -> str:
    core = {k: v for k, v in cfg.items() if k not in _DIGEST_EXCLUDED}
    return hashlib.sha256(json.dumps(core, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def data_digest(cfg: dict) -> str:
    """Digest of the inputs that determine the dataset and split."""
    core = {"dataset": cfg["dataset"], "master_seed": cfg["master_seed"]}
    return hashlib.sha256(json.dumps(core, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _stamp(cfg: dict) -> dict:
    return {"config_digest": config_digest(cfg), "master_seed": cfg["master_seed"]}


def _header(cfg: dict) -> list[str]:
    st = _stamp(cfg)
    return [f"config_digest {st['config_digest']}", f"master_seed {st['master_seed']}"]


def _train_config(cfg: dict) -> TrainConfig:
    params = dict(cfg["train"])
    params.setdefault("seed", derive_seed(cfg["master_seed"], TRAIN_STREAM))
    try:
        return TrainConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train block: {exc}") from None


def _out(cfg: dict, *parts) -> Path:
    path = Path(cfg["output_dir"]).joinpath(*parts)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    return path


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else v
    return obj


def _rel(path: Path, root: Path) -> str:
    # Relative paths keep reports identical when the same run is redone elsewhere.
    try:
        return str(Path(path).resolve().relative_to(Path(root).resolve()))
    except ValueError:
        return str(path)


def _pct(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else round(100.0 * float(v), 2)


# ---------------------------------------------------------------- data


def build_dataset(cfg: dict) -> dataio.Dataset:
    d = cfg["dataset"]
    data_seed = derive_seed(cfg["master_seed"], DATA_STREAM)
    if d["source"] == "blobs":
        b = d["blobs"]
        ds = dataio.synth_blobs(
            b["n_per_group"], b["num_groups"], b["dim"], b["separation"], b["label_noise"], data_seed, b["scale_step"]
        )
    elif d["source"] == "csv":
        c = d["csv"]
        ds = dataio.load_csv(c["path"], c["label_column"], c["group_column"], c["categorical"])
    else:
        if d["source"] == "idx":
            images, labels = d["idx"]["images"], d["idx"]["labels"]
        else:
            images, labels = dataio.bundled_mnist_to_idx(_out(cfg, "data", "raw"))
        ds = dataio.load_idx(images, labels)
    if d["per_class"] is not None:
        ds = dataio.subsample_per_class(ds, int(d["per_class"]), data_seed)
    return ds


def build_split(cfg: dict, ds: dataio.Dataset) -> dataio.SplitPlan:
    d = cfg["dataset"]
    return dataio.make_split(ds, d["test_fraction"], derive_seed(cfg["master_seed"], SPLIT_STREAM), d["audit_size"])


def _dataset_and_split(cfg: dict):
    """Reuse the gen-data container when it exists and matches this config; otherwise rebuild."""
    prefix = Path(cfg["output_dir"]) / "data" / "dataset"
    split_path = prefix.with_name("split.json")
    if prefix.with_suffix(".json").exists() and split_path.exists():
        meta = json.loads(prefix.with_suffix(".json").read_text())
        if meta.get("data_digest") == data_digest(cfg):
            ds = dataio.load_dataset(prefix)
            s = json.loads(split_path.read_text())
            return ds, dataio.SplitPlan(s["train_indices"], s["test_indices"], s["audit_indices"])
    ds = build_dataset(cfg)
    return ds, build_split(cfg, ds)


def _spec(cfg: dict, ds: dataio.Dataset) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(m["arch"], ds.feature_shape, ds.num_classes, m.get("hidden", 256))


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict) -> dict:
    ds = build_dataset(cfg)
    split = build_split(cfg, ds)
    out = _out(cfg, "data")
    stamp = {**_stamp(cfg), "data_digest": data_digest(cfg)}
    dataio.save_dataset(ds, out / "dataset", stamp)
    _write_json(
        out / "split.json",
        {
            **stamp,
            "train_indices": split.train_indices,
            "test_indices": split.test_indices,
            "audit_indices": split.audit_indices,
        },
    )
    print(f"n={ds.n} d={ds.d} K={ds.num_groups} L={ds.num_classes}  -> {out / 'dataset.bin'}")
    return {"n": ds.n, "d": ds.d, "K": ds.num_groups, "L": ds.num_classes}


def cmd_train(cfg: dict) -> dict:
    ds, split = _dataset_and_split(cfg)
    spec = _spec(cfg, ds)
    tcfg = _train_config(cfg)
    art = train(ds, split.train_indices, spec, tcfg)
    out = _out(cfg, "train")
    stamp = _stamp(cfg)
    save_params(art.final_params, out / "model.bin", stamp)
    write_iteration_log(art.iteration_log, out / "iteration_log.csv", ds.num_groups, _header(cfg))
    with open(out / "grc.csv", "w", newline="") as fh:
        for line in _header(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["group", "grc", "train_size"])
        sizes = np.bincount(ds.groups[split.train_indices], minlength=ds.num_groups)
        for k in range(ds.num_groups):
            w.writerow([k, repr(float(art.grc[k])), int(sizes[k])])
    ledger = art.ledger.to_dict() if art.ledger is not None else None
    if ledger is not None:
        _write_json(out / "ledger.json", {**stamp, **ledger, "sigma": art.sigma, "stat_sigma": art.stat_sigma})
    test = split.test_indices
    acc = float((batch_predict(art.final_params, ds.features[test]) == ds.labels[test]).mean()) if test.size else math.nan
    fair = stats.outcome_fairness(art.final_params, ds, test) if test.size else None
    report = {
        **stamp,
        "train_config": tcfg.to_dict(),
        "model_spec": spec.to_dict(),
        "cnn_convention": CNN_CONVENTION,
        "test_accuracy": acc,
        "iterations": art.iterations,
        "sampling_rate": art.sampling_rate,
        "grc": art.grc,
        "grc_excluded_iterations": art.grc_excluded,
        "ledger": ledger,
        "fairness": fair.to_dict() if fair else None,
    }
    _write_json(out / "train_report.json", report)
    eps = f"  epsilon={ledger['epsilon']:.4f}" if ledger else ""
    print(f"test accuracy {100 * acc:.2f}%{eps}")
    return report


def _audit_plan(cfg: dict, ds, split) -> audit.AuditPlan:
    a = cfg["audit"]
    target = a["target_index"]
    return audit.AuditPlan(
        a["method"],
        int(a["rounds"]),
        split.audit_indices,
        split.train_indices,
        _train_config(cfg),
        _spec(cfg, ds),
        derive_seed(cfg["master_seed"], AUDIT_STREAM),
        None if target in (None, "all") else int(target),
        a["threshold_rule"],
        cfg["workers"],
    )


def cmd_audit(cfg: dict) -> dict:
    ds, split = _dataset_and_split(cfg)
    method = audit.Method(cfg["audit"]["method"])
    if method is audit.Method.LOOA and cfg["audit"]["target_index"] in (None, "all"):
        # One LOOA game per audited record, so the trace lines up with ALOOA's.
        plan = _audit_plan({**cfg, "audit": {**cfg["audit"], "method": "ALOOA"}}, ds, split)
        trace = audit.run_looa_targets(ds, plan, split.audit_indices)
        guesses = audit.guesses_from_trace(trace, plan.threshold_rule)
    else:
        plan = _audit_plan(cfg, ds, split)
        trace, guesses = audit.run_game(ds, plan)
    risk = stats.risk_report(guesses.G, trace.H, trace.sample_groups, ds.num_groups, trace.sample_ids)
    out = _out(cfg, "audit", method.value)
    stamp = _stamp(cfg)
    sidecar = {**stamp, "rounds": plan.rounds, "threshold_rule": plan.threshold_rule.value, "seed_derivation": SEED_DERIVATION}
    audit.write_trace(trace, out / "trace.csv", sidecar, _header(cfg))
    audit.write_guesses(trace, guesses, out / "guesses.csv", _header(cfg))
    _write_json(out / "risk.json", {**stamp, "method": method.value, **risk.to_dict(), "trace_sha256": audit.file_digest(out / "trace.csv")})
    _write_risk_csv(out / "risk.csv", risk, cfg)
    print(f"{method.value}: delta = {100 * risk.delta:.2f} points")
    for k, v in enumerate(risk.adv_k):
        print(f"  group {k}: Adv^k = {'n/a' if math.isnan(v) else f'{100 * v:.2f}'}")
    return risk.to_dict()


def _write_risk_csv(path: Path, risk: stats.RiskReport, cfg: dict) -> None:
    with open(path, "w", newline="") as fh:
        for line in _header(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["group", "count", "adv_k"])
        for k, (c, v) in enumerate(zip(risk.counts, risk.adv_k)):
            w.writerow([k, int(c), "" if math.isnan(v) else repr(float(v))])


def _risk_from_trace(path):
    trace, meta = audit.read_trace(path)
    rule = meta.get("threshold_rule", "LOWER_LOSS_MEMBER")
    groups = trace.sample_groups if trace.sample_groups is not None else np.zeros(trace.sample_ids.size, dtype=np.int64)
    g = audit.guesses_for(trace, rule, groups)
    return trace, meta, stats.risk_report(g.G, trace.H, groups, None, trace.sample_ids)


def cmd_compare(trace_a, trace_b, out_dir) -> dict:
    ta, ma, ra = _risk_from_trace(trace_a)
    tb, mb, rb = _risk_from_trace(trace_b)
    cmp = stats.compare_traces(ra, rb)
    groups = cmp.groups
    if np.unique(groups).size >= 2:
        H, p = stats.kruskal_wallis(cmp.diffs, groups)
    else:
        H, p = None, None
    per_group = {}
    for k in np.unique(groups):
        d = cmp.diffs[groups == k]
        per_group[int(k)] = {"count": int(d.size), "mean_diff": float(d.mean()), "mean_abs_diff": float(np.abs(d).mean())}
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    inputs = {
        "a": {"path": Path(trace_a).name, "method": ma["method"], "config_digest": ma.get("config_digest"), "sha256": audit.file_digest(trace_a)},
        "b": {"path": Path(trace_b).name, "method": mb["method"], "config_digest": mb.get("config_digest"), "sha256": audit.file_digest(trace_b)},
    }
    result = {
        "config_digest": hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest(),
        "master_seed": ma.get("master_seed"),
        "inputs": inputs,
        "trials": [ta.trials, tb.trials],
        "mean_abs_diff": cmp.mean_abs_diff,
        "mean_signed_diff": cmp.mean_signed_diff,
        "kruskal_wallis_H": H,
        "kruskal_wallis_p": p,
        "per_group": per_group,
    }
    _write_json(out / "comparison.json", result)
    with open(out / "comparison.csv", "w", newline="") as fh:
        fh.write(f"# config_digest {result['config_digest']}\n# master_seed {result['master_seed']}\n")
        w = csv.writer(fh)
        w.writerow(["sample_id", "group", "acc_a", "acc_b", "diff"])
        pos = {s: j for j, s in enumerate(rb.sample_ids.tolist())}
        for i, sid in enumerate(ra.sample_ids.tolist()):
            w.writerow([sid, int(groups[i]), repr(float(ra.acc_i[i])), repr(float(rb.acc_i[pos[sid]])), repr(float(cmp.diffs[i]))])
    ptxt = "n/a" if p is None else f"{p:.4f}"
    print(f"mean |diff| {cmp.mean_abs_diff:.4f}  mean diff {cmp.mean_signed_diff:+.4f}  Kruskal-Wallis p {ptxt}")
    return result


def cmd_report(cfg: dict, trace_path=None, params_path=None) -> dict:
    root = Path(cfg["output_dir"])
    trace_path = Path(trace_path) if trace_path else root / "audit" / cfg["audit"]["method"] / "trace.csv"
    params_path = Path(params_path) if params_path else root / "train" / "model.bin"
    train_report_path = params_path.with_name("train_report.json")
    for p in (trace_path, trace_path.with_suffix(".json"), params_path, train_report_path):
        if not p.exists():
            raise DataError(f"missing artifact: {p}")
    trace, meta, risk = _risk_from_trace(trace_path)
    _, header = load_params(params_path)
    tr = json.loads(train_report_path.read_text())
    grc = np.array([math.nan if v is None else v for v in tr["grc"]])
    K = max(grc.size, risk.adv_k.size)
    adv_k = np.full(K, math.nan)
    adv_k[: risk.adv_k.size] = risk.adv_k
    corr = stats.grc_correlation(grc, adv_k)
    fair = tr.get("fairness") or {}
    report = {
        **_stamp(cfg),
        "inputs": {
            "trace": {"path": _rel(trace_path, root), "sha256": audit.file_digest(trace_path), "config_digest": meta.get("config_digest")},
            "params": {"path": _rel(params_path, root), "sha256": audit.file_digest(params_path), "config_digest": header.get("config_digest")},
        },
        "method": meta["method"],
        "trials": trace.trials,
        "accuracy": _pct(tr["test_accuracy"]),
        "delta": _pct(risk.delta),
        "adv_k": [_pct(v) for v in adv_k],
        "group_counts": risk.counts,
        "excluded_groups": risk.excluded_groups,
        "grc": tr["grc"],
        "grc_spearman": corr.spearman,
        "grc_pearson": corr.pearson,
        "grc_permutation_p": corr.permutation_p,
        "grc_note": corr.note,
        "fairness": {k: _pct(fair.get(k)) for k in ("ap", "dmp", "eop", "eod")},
        "fairness_excluded": fair.get("excluded"),
        "ledger": tr.get("ledger"),
        "cnn_convention": tr.get("cnn_convention", CNN_CONVENTION),
        "seed_derivation": meta.get("seed_derivation", SEED_DERIVATION),
        "units": "accuracy, delta, adv_k and fairness in percentage points",
    }
    out = _out(cfg, "report")
    _write_json(out / "report.json", report)
    with open(out / "report.csv", "w", newline="") as fh:
        for line in _header(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["group", "adv_k_pct", "grc", "count"])
        for k in range(K):
            v = report["adv_k"][k]
            g = grc[k] if k < grc.size else math.nan
            c = int(risk.counts[k]) if k < risk.counts.size else 0
            w.writerow([k, "" if v is None else f"{v:.2f}", "" if math.isnan(g) else repr(float(g)), c])
        w.writerow(["all", f"{report['delta']:.2f}", "", int(risk.counts.sum())])
    print(f"accuracy {report['accuracy']:.2f}%  delta {report['delta']:.2f} points  GRC rho {corr.spearman}")
    return report


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairaudit", description="Group privacy-risk auditing for DP training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--dataset", choices=["blobs", "mnist", "idx", "csv"])
        sp.add_argument("--per-class", type=int)
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--output-dir")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
        return sp

    with_config(sub.add_parser("gen-data", help="write the dataset container and split"))
    with_config(sub.add_parser("train", help="train once; write params, ledger, GRC, iteration log"))
    with_config(sub.add_parser("audit", help="run an auditing game; write trace, guesses, risk report"))
    cp = sub.add_parser("compare", help="compare per-sample accuracies of two traces")
    cp.add_argument("trace_a")
    cp.add_argument("trace_b")
    cp.add_argument("--out", required=True, help="directory for comparison.json / comparison.csv")
    rp = with_config(sub.add_parser("report", help="consolidate train and audit outputs"))
    rp.add_argument("--trace")
    rp.add_argument("--params")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.trace_a, args.trace_b, args.out)
            return 0
        cfg = load_config(args.config, args.set, args.dataset, args.per_class, args.seed, args.output_dir)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "audit":
            cmd_audit(cfg)
        else:
            cmd_report(cfg, args.trace, args.params)
        return 0
    except RoundFailure as exc:
        print(f"error: {exc} (round {exc.round_index}, seed {exc.seed})", file=sys.stderr)
        return exc.exit_code
    except FairAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
