"""Command-line entry point: ``audit --data F --label-col Y --group-col A ...``.

Exit codes: 0 when the audit ran and the criterion holds (or could not be
evaluated), 2 when the criterion is violated, 1 on error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import AuditError
from .esl import ALL_FAMILIES
from .report import AuditConfig, emit, run_audit


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="audit", description="Group-fairness audit with ESL values.")
    src = p.add_argument_group("inputs")
    src.add_argument("--data", help="CSV with features, label and sensitive attributes")
    src.add_argument("--predictions", help="prediction table CSV (coalition,row_id,y_hat)")
    src.add_argument("--labels", help="CSV with row_id, label and sensitive attributes for --predictions")
    src.add_argument("--rerun", metavar="REPORT", help="repeat the audit embedded in a report.json")
    src.add_argument("--label-col")
    src.add_argument("--positive-label", help="raw label value meaning Y=1 (default: labels are 0/1)")
    src.add_argument("--group-col", help="sensitive attribute for the group and feature stages")
    src.add_argument("--group-cols", type=_csv_list, default=[],
                     help="comma-separated attributes for the intersectional stage, in nesting order")
    src.add_argument("--levels", action="append", default=[], metavar="ATTR=L1,L2",
                     help="level order of a sensitive attribute (default: first appearance)")
    src.add_argument("--features", type=_csv_list, help="comma-separated feature universe")

    an = p.add_argument_group("analysis")
    an.add_argument("--criterion", default="eod", choices=["independence", "separation", "sufficiency", "eod"])
    an.add_argument("--metric", default="auto", help="sr, tpr, fpr, ppv, npv, a comma list, or auto")
    an.add_argument("--esl", default="all", help="family name, comma list, or all")
    an.add_argument("--baseline", default="half", help="half, prevalence, or a number in (0,1)")
    an.add_argument("--threshold", type=float, default=0.5)
    an.add_argument("--alpha", type=float, default=0.05)
    an.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap replications (0 = off)")
    an.add_argument("--first-stage-only", action="store_true", help="skip the feature decomposition")
    an.add_argument("--both-orders", action="store_true", help="also run the intersectional stage reversed")

    tr = p.add_argument_group("training")
    tr.add_argument("--test-fraction", type=float, default=0.3)
    tr.add_argument("--epochs", type=int, default=500)
    tr.add_argument("--learning-rate", type=float, default=0.5)
    tr.add_argument("--l2", type=float, default=0.0)
    tr.add_argument("--no-class-weight", action="store_true")

    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", default="json", choices=["json", "csv", "both"])
    p.add_argument("--quiet", action="store_true")
    return p


def _parse_levels(items: list[str]) -> dict[str, list[str]]:
    out = {}
    for item in items:
        attr, sep, rest = item.partition("=")
        levels = _csv_list(rest)
        if not sep or len(levels) != 2:
            raise AuditError(f"--levels expects ATTR=L1,L2, got {item!r}")
        out[attr.strip()] = levels
    return out


def config_from_args(args: argparse.Namespace) -> AuditConfig:
    families = [f.value for f in ALL_FAMILIES] if args.esl == "all" else _csv_list(args.esl)
    metrics = "auto" if args.metric == "auto" else _csv_list(args.metric)
    return AuditConfig(
        data=args.data,
        predictions=args.predictions,
        labels=args.labels,
        label_col=args.label_col,
        positive_label=args.positive_label,
        group_col=args.group_col,
        group_cols=args.group_cols,
        group_levels=_parse_levels(args.levels),
        features=args.features,
        criterion=args.criterion,
        metrics=metrics,
        families=families,
        baseline=args.baseline,
        threshold=args.threshold,
        alpha=args.alpha,
        bootstrap=args.bootstrap,
        seed=args.seed,
        test_fraction=args.test_fraction,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        l2=args.l2,
        class_weighted=not args.no_class_weight,
        two_stage=not args.first_stage_only,
        both_orders=args.both_orders,
        n_jobs=args.jobs,
        out=args.out,
        formats=["json", "csv"] if args.format == "both" else [args.format],
    )


def _summary(report) -> str:
    doc = report.document
    lines = []
    for m in doc["metrics"]:
        for f in m["families"]:
            t = f["first_stage"]
            if t.get("status") == "ok":
                lines.append(f"{m['metric']:>4} {f['family']:<14} gap={t['estimate']:+.4f} "
                             f"CI=[{t['ci'][0]:+.4f}, {t['ci'][1]:+.4f}] p={t['p_value']:.3g}{t['stars']}")
            else:
                lines.append(f"{m['metric']:>4} {f['family']:<14} undefined: {t.get('reason', '')}")
    crit = doc["criterion"]
    state = {True: "satisfied", False: "violated", None: "undetermined"}[crit["satisfied"]]
    lines.append(f"criterion {crit['criterion']}: {state}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.rerun and (not args.label_col or not args.out):
        parser.error("--label-col and --out are required unless --rerun is given")
    try:
        if args.rerun:
            config = load_config(args.rerun)
            if args.out:
                config.out = args.out
        else:
            config = config_from_args(args)
        report = run_audit(config)
        emit(report, config.out, config.formats)
    except (AuditError, OSError) as exc:
        print(f"audit: error: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(_summary(report))
    return report.exit_code


def load_config(report_path: str) -> AuditConfig:
    """Configuration embedded in a previously emitted report."""
    try:
        with open(report_path, encoding="utf-8") as fh:
            return AuditConfig.from_dict(json.load(fh)["config"])
    except (KeyError, ValueError) as exc:
        raise AuditError(f"{report_path}: not an audit report ({exc})") from None


if __name__ == "__main__":
    sys.exit(main())
