"""Audit orchestration and report emission."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, run_bootstrap, strata_labels
from .dataset import Schema, encode, load_csv, split
from .esl import ALL_FAMILIES, EslFamily, evaluated_masks, gap_attribution, group_values, multi_stage, two_stage
from .errors import (
    AuditError,
    DegenerateVarianceError,
    DomainError,
    ShapeError,
    UndefinedMetricError,
    UndefinedTestError,
)
from .inference import (
    TestResult,
    criterion_verdict,
    estimate_second_stage_covariances,
    first_stage,
    majority_vote,
    multi_stage_contrast,
    second_stage_test,
)
from .metrics import Baseline, Characteristic, MetricKind, metrics_for_criterion
from .model import ClassifierConfig, build_coalition_table, import_predictions, required_coalitions

SCHEMA_VERSION = "eslaudit.report/1"
SIGNIFICANT_DIGITS = 12
SOFT_FAILURES = (UndefinedMetricError, UndefinedTestError, DegenerateVarianceError)

CONVENTION_NOTES = {
    "characteristic": "v = metric on the selected groups divided by the baseline; v(empty) = 0",
    "factor_of_two": ("with baseline 1/2, v = 2 * rate, so the group gap b1 * (v1 - v2) equals "
                      "2 * b1 * (p1 - p2); the first-stage standard error is (b1 / baseline) * "
                      "sqrt(p (1 - p) (1/n1 + 1/n2)) with the pooled rate p"),
    "npv": "NPV is P(Y=1 | Yhat=0) (smaller is better), not the conventional P(Y=0 | Yhat=0)",
    "ppv_npv_second_stage": ("second-stage variances for PPV and NPV reuse the fixed-denominator "
                             "recipe and are marked extrapolated"),
    "shares": "percentage shares are phi_g / v(all groups)",
    "first_stage_ci": ("ci uses the pooled null standard error; ci_unpooled uses per-group "
                       "variances"),
}


class StageError(AuditError):
    """A hard failure inside one audit stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class AuditConfig:
    """Everything needed to reproduce an audit; embedded in every report."""

    data: str | None = None
    predictions: str | None = None
    labels: str | None = None
    label_col: str = "label"
    positive_label: str | None = None
    group_col: str | None = None
    group_cols: list[str] = field(default_factory=list)
    group_levels: dict[str, list[str]] = field(default_factory=dict)
    features: list[str] | None = None
    criterion: str = "eod"
    metrics: list[str] | str = "auto"
    families: list[str] = field(default_factory=lambda: [f.value for f in ALL_FAMILIES])
    baseline: str = "half"
    threshold: float = 0.5
    alpha: float = 0.05
    bootstrap: int = 0
    seed: int = 0
    test_fraction: float = 0.3
    learning_rate: float = 0.5
    epochs: int = 500
    l2: float = 0.0
    class_weighted: bool = True
    two_stage: bool = True
    both_orders: bool = False
    n_jobs: int = 1
    out: str | None = None
    formats: list[str] = field(default_factory=lambda: ["json"])

    def __post_init__(self):
        if not self.families:
            raise DomainError("at least one ESL family is required")
        self.families = [EslFamily.parse(f).value for f in self.families]
        metrics_for_criterion(self.criterion)
        if self.data is None and (self.predictions is None or self.labels is None):
            raise DomainError("supply --data, or both --predictions and --labels")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.bootstrap and self.bootstrap < 2:
            raise DomainError("bootstrap needs at least two replications")
        for fmt in self.formats:
            if fmt not in ("json", "csv"):
                raise DomainError(f"unknown output format {fmt!r}")

    @property
    def attributes(self) -> list[str]:
        first = self.group_col or (self.group_cols[0] if self.group_cols else None)
        if first is None:
            raise DomainError("a sensitive attribute (--group-col) is required")
        return list(dict.fromkeys([first, *self.group_cols]))

    @property
    def metric_kinds(self) -> list[MetricKind]:
        if self.metrics == "auto" or self.metrics == ["auto"]:
            return list(metrics_for_criterion(self.criterion))
        return [MetricKind.parse(m) for m in self.metrics]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AuditConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in ("out", "formats", "n_jobs")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class AuditReport:
    config: AuditConfig
    document: dict
    warnings: list[dict] = field(default_factory=list)
    exit_code: int = 0

    @property
    def criterion(self) -> dict:
        return self.document["criterion"]

    def section(self, metric: str, family: str) -> dict:
        for m in self.document["metrics"]:
            if m["metric"] == metric:
                for f in m["families"]:
                    if f["family"] == family:
                        return f
        raise KeyError((metric, family))

    def to_json(self) -> str:
        return json.dumps(_round(self.document), indent=2) + "\n"

    def content(self) -> dict:
        """Report without its timing section (the deterministic part)."""
        return {k: v for k, v in _round(self.document).items() if k not in ("timing", "content_hash")}


def _round(obj: Any) -> Any:
    """Round floats to 12 significant digits; non-finite values become strings."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
        return float(f"{x:.{SIGNIFICANT_DIGITS}g}")
    return obj


def _undefined(exc: Exception) -> dict:
    return {"status": "undefined", "reason": str(exc)}


class _Timer:
    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except SOFT_FAILURES:
            raise
        except AuditError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        except OSError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


def _load_inputs(config: AuditConfig, timer: _Timer, warnings: list[dict]):
    attrs = config.attributes
    clf = ClassifierConfig(learning_rate=config.learning_rate, epochs=config.epochs, l2=config.l2,
                           class_weighted=config.class_weighted, threshold=config.threshold, seed=config.seed)
    families = [EslFamily.parse(f) for f in config.families]
    levels_override = {a: tuple(v) for a, v in config.group_levels.items()}
    if config.data is not None:
        with timer.stage("load"):
            schema = Schema(label=config.label_col, groups=attrs, features=config.features,
                            positive_label=config.positive_label, group_levels=levels_override)
            data = load_csv(config.data, schema)
            warnings.extend(data.warnings)
        with timer.stage("split_encode"):
            pair = split(data, config.test_fraction, config.seed)
            enc = encode(data, pair)
            warnings.extend(pair.warnings)
            warnings.extend(enc.warnings)
        universe = [f for f in data.feature_names if f not in enc.dropped]
        with timer.stage("train"):
            masks = required_coalitions(len(universe), [f.value for f in families], config.two_stage)
            table = build_coalition_table(data, pair, universe, clf, masks, encoded=enc, n_jobs=config.n_jobs)
        y = data.labels[pair.test_indices]
        groups = data.groups[pair.test_indices]
        levels = data.group_levels
    else:
        with timer.stage("load"):
            schema = Schema(label=config.label_col, groups=attrs, features=[],
                            positive_label=config.positive_label, group_levels=levels_override,
                            id_column="row_id")
            labels = load_csv(config.labels, schema)
            warnings.extend(labels.warnings)
            table = import_predictions(config.predictions, universe=config.features)
            index = {int(r): i for i, r in enumerate(labels.row_ids)}
            missing = [int(r) for r in table.instance_ids if int(r) not in index]
            if missing:
                raise ShapeError(f"{len(missing)} predicted rows have no label, e.g. {missing[:3]}")
            rows = np.array([index[int(r)] for r in table.instance_ids])
            y = labels.labels[rows]
            groups = labels.groups[rows]
            levels = labels.group_levels
    return table, y, groups, levels


def _test_dict(result) -> dict:
    if isinstance(result, Exception):
        return _undefined(result)
    return result.to_dict()


def run_audit(config: AuditConfig) -> AuditReport:
    """Run the full audit described by ``config``.

    Undefined metrics void only the hypotheses that touch them; they are
    reported with status ``undefined``.

    Raises:
        StageError: A hard failure, naming the stage it happened in.
    """
    timer = _Timer()
    warnings: list[dict] = []
    table, y, groups, levels = _load_inputs(config, timer, warnings)
    attrs = config.attributes
    families = [EslFamily.parse(f) for f in config.families]
    group_names = list(levels[attrs[0]])
    with timer.stage("baseline"):
        baseline = Baseline.parse(config.baseline, y)
    n_features = table.n_features
    two = config.two_stage and all(m in table for m in
                                   set().union(*(evaluated_masks(f, n_features) for f in families)))
    if config.two_stage and not two:
        warnings.append({"stage": "esl", "event": "second_stage_skipped",
                         "reason": "prediction table lacks coalitions the families need"})

    metrics_out = []
    first_stage_by_family: dict[str, dict[MetricKind, TestResult]] = {f.value: {} for f in families}
    counts = {}
    bootstrap_seconds = 0.0
    asymptotic_seconds = 0.0
    for kind in config.metric_kinds:
        char = Characteristic(table, y, groups[:, 0], baseline)
        section = {"metric": kind.value, "characteristic": {}, "families": []}
        try:
            section["characteristic"] = {
                "v_all": char.value(kind, 3, table.full),
                "v_group1": char.value(kind, 1, table.full),
                "v_group2": char.value(kind, 2, table.full),
            }
        except UndefinedMetricError as exc:
            section["characteristic"] = _undefined(exc)
        fams = {}
        t_asym = time.perf_counter()
        for fam in families:
            entry: dict[str, Any] = {"family": fam.value}
            with timer.stage("esl"):
                try:
                    alloc, test = first_stage(char, kind, fam, config.alpha)
                    entry["group_values"] = [
                        {"group": g, "level": group_names[i], "value": alloc[i], "share": alloc.shares()[i]}
                        for i, g in enumerate(("1", "2"))
                    ]
                    entry["total"] = alloc.total
                    entry["first_stage"] = test.to_dict()
                    first_stage_by_family[fam.value][kind] = test
                except SOFT_FAILURES as exc:
                    entry["group_values"] = _undefined(exc)
                    entry["first_stage"] = _undefined(exc)
                matrix = None
                if two:
                    try:
                        matrix = two_stage(char, kind, fam)
                        entry["contributions"] = [
                            {"feature": f, "group": g, "value": matrix.values[k, j]}
                            for k, f in enumerate(matrix.features) for j, g in enumerate(("1", "2"))
                        ]
                        entry["feature_gaps"] = [
                            {"feature": f, "delta": d} for f, d in zip(matrix.features, gap_attribution(matrix).deltas)
                        ]
                        entry["evaluations"] = matrix.evaluations
                    except SOFT_FAILURES as exc:
                        entry["contributions"] = _undefined(exc)
            fams[fam] = (entry, matrix)
        if two:
            with timer.stage("inference"):
                needed = sorted(set().union(*(evaluated_masks(f, n_features) for f in families)))
                cov = estimate_second_stage_covariances(table, y, groups[:, 0], kind, baseline, needed)
                for fam, (entry, matrix) in fams.items():
                    if matrix is None:
                        entry["feature_tests"] = [{"status": "undefined", "reason": entry["contributions"]["reason"]}]
                        continue
                    tests = second_stage_test(matrix, cov, fam, config.alpha)
                    entry["feature_tests"] = [
                        {"feature": f, **_test_dict(t)} for f, t in zip(matrix.features, tests)
                    ]
                    entry["_tests"] = tests
        asymptotic_seconds += time.perf_counter() - t_asym
        section["evaluations"] = char.evaluations
        counts[kind.value] = char.evaluations

        if two and len(families) == len(ALL_FAMILIES) and set(families) == set(ALL_FAMILIES):
            votes = []
            for k, feat in enumerate(table.universe):
                per = {fam: fams[fam][0].get("_tests", [None] * n_features)[k] for fam in families}
                if any(not isinstance(t, TestResult) for t in per.values()):
                    votes.append({"feature": feat, "status": "undefined"})
                    continue
                votes.append({"feature": feat, **majority_vote(per, config.alpha).to_dict()})
            section["votes"] = votes

        if config.bootstrap:
            t0 = time.perf_counter()
            with timer.stage("bootstrap"):
                _bootstrap_section(config, char, kind, fams, families, two, y, groups)
            bootstrap_seconds += time.perf_counter() - t0

        for fam in families:
            fams[fam][0].pop("_tests", None)
            section["families"].append(fams[fam][0])
        if len(attrs) > 1:
            with timer.stage("multi_stage"):
                section["multi_stage"] = _multi_stage_section(config, table, y, groups, baseline, kind, families)
        metrics_out.append(section)

    criterion = _criterion_section(config, families, first_stage_by_family)
    doc = {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "config": config.to_dict(),
        "provenance": {
            "config_hash": config.digest(),
            "seeds": {"split": config.seed, "bootstrap_master": config.seed},
            "coalition_semantics": table.provenance.get("coalition_semantics", "unknown"),
            "baseline": {"mode": baseline.mode, "value": baseline.value},
            "groups": {a: list(levels[a]) for a in attrs},
            "features": list(table.universe),
            "test_rows": int(len(y)),
            "conventions": CONVENTION_NOTES,
        },
        "criterion": criterion,
        "metrics": metrics_out,
        "warnings": warnings,
        "evaluation_counts": counts,
    }
    content = json.dumps(_round(doc), sort_keys=True).encode()
    doc["content_hash"] = hashlib.sha256(content).hexdigest()
    doc["timing"] = {
        "stages": dict(timer.seconds),
        "asymptotic_path": asymptotic_seconds,
        "bootstrap_path": bootstrap_seconds if config.bootstrap else None,
    }
    exit_code = 2 if criterion.get("satisfied") is False else 0
    return AuditReport(config=config, document=doc, warnings=warnings, exit_code=exit_code)


def _bootstrap_section(config, char, kind, fams, families, two, y, groups):
    strata = strata_labels(groups[:, 0], y)
    bcfg = BootstrapConfig(replications=config.bootstrap, alpha=config.alpha, master_seed=config.seed,
                           n_jobs=config.n_jobs)
    for fam in families:
        entry = fams[fam][0]

        def statistic(idx, fam=fam):
            c = char.resample(idx)
            d = group_values(c, kind, fam).gap
            if not two:
                return [d]
            return [d, *gap_attribution(two_stage(c, kind, fam)).deltas]

        labels = ["groups"] + (list(char.table.universe) if two else [])
        try:
            run = run_bootstrap(statistic, strata, bcfg, labels)
        except SOFT_FAILURES as exc:
            entry["bootstrap"] = _undefined(exc)
            continue
        results = []
        for j, lab in enumerate(labels):
            r = run.result(j)
            results.append({"target": lab, "mean": r.mean, "ci": list(r.ci), "failures": r.failures,
                            "unstable": r.unstable, "replications": bcfg.replications})
        entry["bootstrap"] = results
        if config.out:
            out = Path(config.out)
            out.mkdir(parents=True, exist_ok=True)
            run.write_csv(out / f"bootstrap_{kind.value}_{fam.value}.csv")


def _multi_stage_section(config, table, y, groups, baseline, kind, families):
    attrs = config.attributes
    orders = [list(range(len(attrs)))]
    if config.both_orders:
        orders.append(list(reversed(orders[0])))
    out = []
    for order in orders:
        names = [attrs[j] for j in order]
        char = Characteristic(table, y, groups[:, order], baseline)
        for fam in families:
            try:
                res = multi_stage(char, kind, fam, names)
            except SOFT_FAILURES as exc:
                out.append({"order": names, "family": fam.value, **_undefined(exc)})
                continue
            cells = [{"cell": list(c), "value": v, "undefined": c in res.undefined}
                     for depth in res.levels for c, v in depth.items()]
            contrasts = []
            for depth in range(1, len(names) + 1):
                for prefix in sorted({c[: depth - 1] for c in res.levels[depth - 1]}):
                    a, b = prefix + (1,), prefix + (2,)
                    try:
                        t = multi_stage_contrast(char, kind, fam, a, b, config.alpha)
                        contrasts.append({"cells": [list(a), list(b)], **t.to_dict()})
                    except SOFT_FAILURES as exc:
                        contrasts.append({"cells": [list(a), list(b)], **_undefined(exc)})
            out.append({"order": names, "family": fam.value, "total": res.total,
                        "cells": cells, "contrasts": contrasts})
    return out


def _criterion_section(config, families, first_stage_by_family) -> dict:
    per_family = []
    any_violation = False
    all_defined = True
    for fam in families:
        try:
            v = criterion_verdict(first_stage_by_family[fam.value], config.criterion, config.alpha)
        except AuditError as exc:
            per_family.append({"family": fam.value, **_undefined(exc)})
            all_defined = False
            continue
        any_violation |= not v.satisfied
        per_family.append({"family": fam.value, **v.to_dict()})
    satisfied = None if (not all_defined and not any_violation) else not any_violation
    return {"criterion": config.criterion, "satisfied": satisfied, "alpha": config.alpha, "by_family": per_family}


def _fmt(x: Any) -> Any:
    if isinstance(x, float):
        return f"{x:.{SIGNIFICANT_DIGITS}g}"
    return x


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def emit(report: AuditReport, out_dir: str | Path, formats: list[str] | str = "json") -> list[Path]:
    """Write the report as ``report.json`` and/or a bundle of CSV tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats = [formats] if isinstance(formats, str) else list(formats)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(report.to_json(), encoding="utf-8")
        written.append(p)
    if "csv" in formats:
        written.extend(_emit_csv(report, out))
    if report.warnings:
        p = out / "audit_log.jsonl"
        with p.open("w", encoding="utf-8") as fh:
            for w in report.warnings:
                fh.write(json.dumps(_round(w)) + "\n")
        written.append(p)
    return written


def _test_row(t: dict) -> list:
    if t.get("status") != "ok":
        return ["", "", "", "", "", "", "", t.get("status", "undefined")]
    return [t["estimate"], t["standard_error"], t["z"], t["p_value"], t["ci"][0], t["ci"][1], t["stars"], "ok"]


def _emit_csv(report: AuditReport, out: Path) -> list[Path]:
    doc = _round(report.document)
    gv, fs, contrib, tests, votes, boots, cells = [], [], [], [], [], [], []
    test_head = ["estimate", "standard_error", "z", "p_value", "ci_lo", "ci_hi", "stars", "status"]
    for m in doc["metrics"]:
        metric = m["metric"]
        for f in m["families"]:
            fam = f["family"]
            if isinstance(f["group_values"], list):
                for g in f["group_values"]:
                    gv.append([metric, fam, g["group"], g["level"], g["value"], g["share"], "ok"])
            else:
                gv.append([metric, fam, "", "", "", "", "undefined"])
            fs.append([metric, fam, *_test_row(f["first_stage"])])
            if isinstance(f.get("contributions"), list):
                for c in f["contributions"]:
                    contrib.append([metric, fam, c["feature"], c["group"], c["value"]])
            for t in f.get("feature_tests", []):
                tests.append([metric, fam, t.get("feature", ""), *_test_row(t)])
            for b in f.get("bootstrap", []) if isinstance(f.get("bootstrap"), list) else []:
                boots.append([metric, fam, b["target"], b["mean"], b["ci"][0], b["ci"][1], b["failures"], b["unstable"]])
        for v in m.get("votes", []):
            votes.append([metric, v["feature"], v.get("votes", ""), v.get("verdict", v.get("status"))])
        for ms in m.get("multi_stage", []):
            for c in ms.get("cells", []):
                cells.append([metric, ms["family"], ">".join(ms["order"]), "-".join(map(str, c["cell"])),
                              c["value"], c["undefined"]])
    files = {
        "group_values.csv": (["metric", "family", "group", "level", "value", "share", "status"], gv),
        "first_stage.csv": (["metric", "family", *test_head], fs),
        "contributions.csv": (["metric", "family", "feature", "group", "value"], contrib),
        "feature_tests.csv": (["metric", "family", "feature", *test_head], tests),
        "votes.csv": (["metric", "feature", "votes", "verdict"], votes),
        "timings.csv": (["stage", "seconds"], [[k, v] for k, v in doc["timing"]["stages"].items()]),
    }
    if boots:
        files["bootstrap.csv"] = (["metric", "family", "target", "mean", "ci_lo", "ci_hi", "failures", "unstable"], boots)
    if cells:
        files["multi_stage.csv"] = (["metric", "family", "order", "cell", "value", "undefined"], cells)
    written = []
    for name, (head, rows) in files.items():
        _write_rows(out / name, head, rows)
        written.append(out / name)
    return written
