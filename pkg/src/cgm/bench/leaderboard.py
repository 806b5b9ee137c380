"""Run datasets x synthesizers x seeds and assemble a report."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import jsonschema
import numpy as np

from ..data import SplitSpec, load_csv, split
from .metrics import _seeds, classifier_scores, likelihood_metrics, simulated_tables
from .simulators import make_simulator
from .synthesizers import make_synthesizer

log = logging.getLogger(__name__)

METRICS = ("L_syn", "L_test", "accuracy", "f1")
DEFAULTS = {"datasets": [], "synthesizers": [], "seeds": [0, 1, 2], "workers": 1,
            "record_timing": True, "cgm": {}}


class ConfigError(ValueError):
    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _load_json(name):
    return json.loads(resources.files("cgm.bench").joinpath(f"data/{name}").read_text())


def config_schema():
    return _load_json("config.schema.json")


def report_schema():
    return _load_json("report.schema.json")


def default_config():
    return _load_json("default_config.json")


def _pointer(path):
    return "".join(f"/{p}" for p in path)


def validate_config(config):
    """Fill defaults and validate; raises ConfigError naming the bad field."""
    validator = jsonschema.Draft202012Validator(config_schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(config))
    if err is not None:
        raise ConfigError(err.message, _pointer(err.absolute_path))
    out = copy.deepcopy(DEFAULTS)
    out.update(copy.deepcopy(config))
    names = [d["name"] for d in out["datasets"]]
    for i, name in enumerate(names):
        if names.index(name) != i:
            raise ConfigError(f"duplicate dataset name {name!r}", f"/datasets/{i}/name")
    for d in out["datasets"]:
        if "simulator" in d:
            d.setdefault("n_train", 10000)
            d.setdefault("n_test", 10000)
        else:
            d.setdefault("test_fraction", 0.3)
        d.setdefault("pairwise", False)
    return out


def apply_filters(config, filters):
    """Keep only cells matching ``key=value`` pairs (keys: dataset, synthesizer, seed)."""
    config = copy.deepcopy(config)
    for f in filters or []:
        key, _, value = f.partition("=")
        if key == "dataset":
            config["datasets"] = [d for d in config["datasets"] if d["name"] == value]
        elif key == "synthesizer":
            config["synthesizers"] = [s for s in config["synthesizers"] if s == value]
        elif key == "seed":
            config["seeds"] = [s for s in config["seeds"] if str(s) == value]
        else:
            raise ConfigError(f"unknown filter key {key!r}; use dataset, synthesizer or seed")
    return config


def config_hash(config):
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- cells

def _real_tables(spec, seed):
    table = load_csv(spec["csv"], spec.get("schema"))
    return split(table, SplitSpec(spec["test_fraction"], seed, spec["target"]))


def run_cell(dataset, synth_name, seed, cgm_options=None):
    """One leaderboard cell; failures are caught and recorded."""
    cell = {"dataset": dataset["name"], "synthesizer": synth_name, "seed": seed,
            "status": "ok", "error": None}
    for key in ("L_syn", "L_test", "L_true", "refit_converged", "note", "quantization_loss",
                "accuracy", "f1", "missing_classes"):
        cell[key] = None
    start = time.perf_counter()
    try:
        s_fit, s_gen, s_refit = _seeds(seed, 5)[2:]
        if "simulator" in dataset:
            model = make_simulator(dataset["simulator"])
            train, test = simulated_tables(model, dataset["n_train"], dataset["n_test"], seed)
        else:
            model = None
            train, test = _real_tables(dataset, seed)
        options = dict(cgm_options or {}) if synth_name == "cgm" else {}
        synth = make_synthesizer(synth_name, **options)
        synth.fit(train, s_fit)
        syn = synth.sample(train.n_rows, s_gen)
        if model is not None:
            res = likelihood_metrics(model, train, test, syn, s_refit)
            cell.update(res.to_json())
        target = dataset.get("target")
        if target:
            classes = sorted({str(v) for v in train.column(target) if v is not None}
                             | {str(v) for v in test.column(target) if v is not None})
            acc, f1, missing = classifier_scores(syn, test, target, classes,
                                                 dataset.get("pairwise", False))
            cell.update(accuracy=acc, f1=f1, missing_classes=missing)
    except Exception as exc:  # isolate the cell
        log.warning("cell %s/%s/%s failed: %s", dataset["name"], synth_name, seed, exc)
        cell["status"] = "error"
        cell["error"] = f"{type(exc).__name__}: {exc}"
        log.debug("%s", traceback.format_exc())
    cell["wall_time"] = time.perf_counter() - start
    for key in ("L_syn", "L_test", "L_true", "quantization_loss", "accuracy", "f1"):
        v = cell[key]
        if v is not None and not math.isfinite(v):
            cell[key] = None
            cell["note"] = ((cell["note"] or "") + f" {key} not finite;").strip()
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def _summarize(cells, config):
    out = []
    for d in config["datasets"]:
        for s in config["synthesizers"]:
            group = [c for c in cells if c["dataset"] == d["name"] and c["synthesizer"] == s]
            ok = [c for c in group if c["status"] == "ok"]
            row = {"dataset": d["name"], "synthesizer": s, "n_ok": len(ok),
                   "n_failed": len(group) - len(ok)}
            for m in METRICS:
                vals = [c[m] for c in ok if c[m] is not None]
                row[m] = None if not vals else {"mean": float(np.mean(vals)),
                                                "std": float(np.std(vals))}
            out.append(row)
    return out


def run_leaderboard(config, workers=None):
    """Run every (dataset, synthesizer, seed) cell and return the report dict."""
    config = validate_config(config)
    jobs = [(d, s, seed, config["cgm"]) for d in config["datasets"]
            for s in config["synthesizers"] for seed in config["seeds"]]
    workers = min(workers or config["workers"], os.cpu_count() or 1, max(len(jobs), 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [run_cell(*job) for job in jobs]
    if not config["record_timing"]:
        for c in cells:
            c["wall_time"] = None
    return {
        "format": "cgm-benchmark-report",
        "version": 1,
        "config": config,
        "config_hash": config_hash(config),
        "cells": cells,
        "summary": _summarize(cells, config),
    }


def validate_report(report):
    jsonschema.validate(report, report_schema())


def dump_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_table(report):
    """Plain-text leaderboard; the best mean per dataset and column is wrapped in ** **."""
    rows = report["summary"]
    if not rows:
        return "(empty report)"
    best = {}
    for r in rows:
        for m in METRICS:
            if r[m] is not None:
                key = (r["dataset"], m)
                best[key] = max(best.get(key, -math.inf), r[m]["mean"])
    header = ["dataset", "synthesizer"] + list(METRICS)
    lines = []
    for r in rows:
        cells = [r["dataset"], r["synthesizer"]]
        for m in METRICS:
            v = r[m]
            if v is None:
                cells.append("-")
                continue
            text = f"{v['mean']:.3f} ± {v['std']:.3f}"
            if v["mean"] == best[(r["dataset"], m)]:
                text = f"**{text}**"
            cells.append(text)
        if r["n_failed"]:
            cells[1] += f" ({r['n_failed']} failed)"
        lines.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    out += [fmt.format(*line) for line in lines]
    return "\n".join(out)
