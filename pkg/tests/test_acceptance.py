"""Acceptance suite: one PASS/FAIL line per criterion.

Under pytest the lines are collected into an "acceptance criteria" section
of the terminal summary; ``python tests/test_acceptance.py`` prints them
directly.  Each ``criterion_*`` function returns ``(ok, detail)``; the
pytest wrappers record the line and assert ``ok``.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, permutation_shapley, random_values, table_from_columns, write_audit_inputs  # noqa: E402
from eslaudit.cli import main  # noqa: E402
from eslaudit.esl import (  # noqa: E402
    ALL_FAMILIES,
    EslFamily,
    FeatureContributionMatrix,
    Game,
    esl_value,
    gap_attribution,
    multi_stage,
    two_stage,
)
from eslaudit.inference import TestResult, first_stage, first_stage_test, majority_vote, multi_stage_contrast  # noqa: E402
from eslaudit.metrics import Characteristic  # noqa: E402
from eslaudit.report import AuditConfig, run_audit  # noqa: E402
from eslaudit.synthetic import (  # noqa: E402
    equalized_table,
    intersectional_table,
    planted_tpr_table,
    random_prediction_table,
)

FEATURES = ("Age", "Educ Num", "Hours/Week", "Marital status")

# Published ES contributions per group (men, women) and their feature order.
ES_CONTRIBUTIONS = {
    "1": [0.681, 0.009, 0.126, 0.231],
    "2": [-0.137, 0.161, -0.092, 0.633],
}

# Published contribution gaps with 95% intervals: family -> feature -> (estimate, lo, hi, stars).
GAP_TABLE = {
    "equal_surplus": {
        "Age": (0.817, 0.707, 0.928, "***"),
        "Educ Num": (-0.152, -0.337, 0.033, ""),
        "Hours/Week": (0.218, 0.100, 0.337, "***"),
        "Marital status": (-0.402, -0.598, -0.205, "***"),
    },
    "shapley": {
        "Age": (0.430, 0.366, 0.493, "***"),
        "Educ Num": (0.067, -0.035, 0.169, ""),
        "Hours/Week": (0.281, 0.217, 0.344, "***"),
        "Marital status": (-0.296, -0.439, -0.152, "***"),
    },
    "solidarity": {
        "Age": (0.131, 0.105, 0.157, "***"),
        "Educ Num": (0.042, 0.010, 0.074, "**"),
        "Hours/Week": (0.087, 0.061, 0.113, "***"),
        "Marital status": (-0.019, -0.059, 0.021, ""),
    },
    "consensus": {
        "Age": (0.624, 0.549, 0.698, "***"),
        "Educ Num": (-0.043, -0.176, 0.091, ""),
        "Hours/Week": (0.250, 0.170, 0.329, "***"),
        "Marital status": (-0.349, -0.508, -0.190, "***"),
    },
    "lsp": {
        "Age": (0.409, 0.340, 0.479, "***"),
        "Educ Num": (0.076, -0.025, 0.178, ""),
        "Hours/Week": (0.288, 0.219, 0.357, "***"),
        "Marital status": (-0.292, -0.434, -0.151, "***"),
    },
}

EXPECTED_VOTES = {"Age": 5, "Hours/Week": 4, "Educ Num": 1, "Marital status": 4}


def line(number: int, ok: bool, detail: str) -> str:
    return f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"


def _emit(number: int, result: tuple[bool, str]) -> None:
    ok, detail = result
    ACCEPTANCE_LINES.append(line(number, ok, detail))
    assert ok, detail


def criterion_1() -> tuple[bool, str]:
    rng = np.random.default_rng(101)
    worst = 0.0
    engine_seconds = 0.0
    for i in range(100):
        n = 2 + i % 7
        vals = random_values(n, rng)
        t0 = time.perf_counter()
        phi = esl_value(Game.from_values(n, vals), "shapley").values
        engine_seconds += time.perf_counter() - t0
        worst = max(worst, float(np.max(np.abs(phi - permutation_shapley(n, lambda m: vals[m])))))
    ok = worst <= 1e-10 and engine_seconds < 10.0
    return ok, f"shapley vs permutation oracle on 100 games: max error {worst:.2e}, engine {engine_seconds:.2f}s"


def _swap(mask: int, i: int, j: int) -> int:
    bi, bj = (mask >> i) & 1, (mask >> j) & 1
    if bi != bj:
        mask ^= (1 << i) | (1 << j)
    return mask


def criterion_2() -> tuple[bool, str]:
    rng = np.random.default_rng(202)
    worst = {"efficiency": 0.0, "linearity": 0.0, "symmetry": 0.0}
    for i in range(100):
        n = 2 + i % 7
        u, w = random_values(n, rng), random_values(n, rng)
        a, b = rng.normal(size=2)
        sym = np.array([(u[m] + u[_swap(m, 0, 1)]) / 2 for m in range(1 << n)])
        for fam in ALL_FAMILIES:
            pu = esl_value(Game.from_values(n, u), fam).values
            pw = esl_value(Game.from_values(n, w), fam).values
            pc = esl_value(Game.from_values(n, a * u + b * w), fam).values
            ps = esl_value(Game.from_values(n, sym), fam).values
            worst["efficiency"] = max(worst["efficiency"], abs(pu.sum() - u[-1]))
            worst["linearity"] = max(worst["linearity"], float(np.max(np.abs(pc - (a * pu + b * pw)))))
            worst["symmetry"] = max(worst["symmetry"], abs(ps[0] - ps[1]))
    ok = all(v <= 1e-9 for v in worst.values())
    return ok, "axioms over 100 games x 5 families: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def criterion_3() -> tuple[bool, str]:
    v_all, gap = 1.61, 0.482
    v2 = 0.3
    game_values = {1: v2 + gap, 2: v2, 3: v_all}
    expected = {f: (1.046, 0.564) for f in ALL_FAMILIES}
    expected[EslFamily.SOLIDARITY] = (0.926, 0.685)
    worst = 0.0
    parts = []
    for fam in ALL_FAMILIES:
        phi = esl_value(Game.from_values(2, game_values), fam).values
        worst = max(worst, float(np.max(np.abs(phi - expected[fam]))))
        parts.append(f"{fam.value}=({phi[0]:.4f}, {phi[1]:.4f})")
    return worst <= 0.001, f"group values from v_A=1.61, gap 0.482 (max dev {worst:.4f}): " + " ".join(parts)


def criterion_4() -> tuple[bool, str]:
    t = first_stage_test(0.482, (2862, 501), 0.805, 1.0, alpha=0.05)
    lo, hi = t.ci
    ok = abs(lo - 0.407) <= 0.001 and abs(hi - 0.557) <= 0.001
    return ok, f"first-stage CI [{lo:.4f}, {hi:.4f}] vs [0.407, 0.557]"


def criterion_5() -> tuple[bool, str]:
    m = FeatureContributionMatrix.from_columns(FEATURES, ES_CONTRIBUTIONS, "equal_surplus")
    s1, s2 = m.group_totals
    age_gap = float(gap_attribution(m).deltas[0])
    ok = abs(s1 - 1.047) <= 0.002 and abs(s2 - 0.565) <= 0.002 and abs(age_gap - 0.817) <= 0.002
    return ok, f"ES column sums ({s1:.3f}, {s2:.3f}) vs (1.047, 0.565); Age gap {age_gap:.3f} vs 0.817"


def table_votes() -> dict[str, int]:
    out = {}
    for feature in FEATURES:
        results = {f: TestResult.from_ci(f"{f}:{feature}", *GAP_TABLE[f][feature][:3]) for f in GAP_TABLE}
        out[feature] = majority_vote(results).votes
    return out


def criterion_6() -> tuple[bool, str]:
    votes = table_votes()
    wrong = [f for f in FEATURES if votes[f] != EXPECTED_VOTES[f]]
    detail = ", ".join(f"{f} {votes[f]}/5 (expected {EXPECTED_VOTES[f]}/5)" for f in FEATURES)
    return not wrong, "majority votes on the transcribed gap table: " + detail


def criterion_7() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    n_pos, n_neg = 500, 500
    y = np.tile(np.r_[np.ones(n_pos), np.zeros(n_neg)], 2).astype(np.int8)
    g = np.repeat([1, 2], n_pos + n_neg).astype(np.int8)
    trials = 1000
    rejected = 0
    t0 = time.perf_counter()
    for _ in range(trials):
        yhat = np.where(y == 1, rng.random(len(y)) < 0.8, rng.random(len(y)) < 0.2).astype(np.int8)
        char = Characteristic(table_from_columns(("x",), {1: yhat}), y, g, 0.5)
        rejected += first_stage(char, "tpr", "shapley")[1].rejects()
    seconds = time.perf_counter() - t0
    rate = rejected / trials
    ok = 0.035 <= rate <= 0.065 and seconds < 60.0
    return ok, f"rejection rate under equal TPR 0.8: {rate:.3f} over {trials} trials in {seconds:.1f}s"


_planted_cache: dict = {}


def planted_report(directory: Path):
    """Full audit of the planted 2-feature table with B=1000, computed once."""
    if "report" not in _planted_cache:
        pred, lab = write_audit_inputs(planted_tpr_table(n=5000, n_features=2, tpr_offset=0.1), directory)
        cfg = AuditConfig(predictions=str(pred), labels=str(lab), group_col="gender", bootstrap=1000, n_jobs=4)
        _planted_cache["report"] = run_audit(cfg)
    return _planted_cache["report"]


def criterion_8(directory: Path) -> tuple[bool, str]:
    report = planted_report(directory)
    worst = 0.0
    disagree = []
    for fam in report.document["metrics"][0]["families"]:
        for test, boot in zip(fam["feature_tests"], fam["bootstrap"][1:]):
            for a, b in zip(test["ci"], boot["ci"]):
                worst = max(worst, abs(a - b) / abs(b))
            boot_rejects = not (boot["ci"][0] <= 0.0 <= boot["ci"][1])
            if boot_rejects != test["reject"]:
                disagree.append(f"{fam['family']}:{test['feature']}")
    ok = worst <= 0.15 and not disagree
    return ok, (f"asymptotic vs B=1000 bootstrap endpoints: max relative distance {worst:.3f}, "
                f"significance disagreements {len(disagree)}")


def criterion_9(directory: Path) -> tuple[bool, str]:
    timing = planted_report(directory).document["timing"]
    ratio = timing["asymptotic_path"] / timing["bootstrap_path"]
    counts = []
    ok = ratio < 0.2
    for n in (4, 10):
        audit = random_prediction_table(n)
        es = two_stage(Characteristic(audit.table, audit.y_true, audit.groups, 0.5), "tpr", "equal_surplus")
        sh = two_stage(Characteristic(audit.table, audit.y_true, audit.groups, 0.5), "tpr", "shapley")
        ok &= es.evaluations == 3 * (n + 1) and sh.evaluations == 3 * (2**n - 1)
        counts.append(f"N={n}: ES {es.evaluations}/{3 * (n + 1)}, Shapley {sh.evaluations}/{3 * (2**n - 1)}")
    return ok, f"asymptotic/bootstrap time ratio {ratio:.4f}; " + "; ".join(counts)


def criterion_10(directory: Path) -> tuple[bool, str]:
    pred, lab = write_audit_inputs(equalized_table(), directory)
    out = directory / "out"
    code = main(["--predictions", str(pred), "--labels", str(lab), "--label-col", "label", "--group-col", "gender",
                 "--criterion", "eod", "--esl", "all", "--out", str(out), "--quiet"])
    doc = json.loads((out / "report.json").read_text())
    worst = 0.0
    for fam in doc["metrics"][0]["families"]:
        worst = max(worst, abs(fam["first_stage"]["estimate"]), *(abs(d["delta"]) for d in fam["feature_gaps"]))
    verdict = doc["criterion"]
    ok = code == 0 and worst <= 1e-12 and verdict["criterion"] == "eod" and verdict["satisfied"] is True
    return ok, f"equalized predictions via import path: max |gap| {worst:.1e}, eod satisfied={verdict['satisfied']}"


def criterion_11() -> tuple[bool, str]:
    fair = intersectional_table({c: 0.8 for c in [(1, 1), (1, 2), (2, 1), (2, 2)]})
    char = Characteristic(fair.table, fair.y_true, fair.groups, 0.5)
    v_all = char.value("tpr", (3, 3), fair.table.full)
    worst = 0.0
    for fam in ALL_FAMILIES:
        cells = multi_stage(char, "tpr", fam, ("gender", "race")).cells
        worst = max(worst, max(abs(v - v_all / 4) for v in cells.values()))
    rigged = intersectional_table({(1, 1): 0.9, (1, 2): 0.7, (2, 1): 0.7, (2, 2): 0.9})
    rchar = Characteristic(rigged.table, rigged.y_true, rigged.groups, 0.5)
    top = multi_stage_contrast(rchar, "tpr", "shapley", (1,), (2,))
    inner = multi_stage_contrast(rchar, "tpr", "shapley", (1, 1), (1, 2))
    ok = worst <= 1e-9 and not top.rejects() and inner.rejects()
    return ok, (f"fair cells vs v_A/4: max dev {worst:.1e}; gender level p={top.p_value:.3f}, "
                f"within-gender p={inner.p_value:.1e}")


# pytest wrappers


@pytest.fixture(scope="module")
def planted_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("planted")


def test_criterion_01_shapley_oracle():
    _emit(1, criterion_1())


def test_criterion_02_axioms():
    _emit(2, criterion_2())


def test_criterion_03_group_values():
    _emit(3, criterion_3())


def test_criterion_04_first_stage_ci():
    _emit(4, criterion_4())


def test_criterion_05_contribution_sums():
    _emit(5, criterion_5())


def test_criterion_06_majority_votes():
    _emit(6, criterion_6())


def test_gap_table_transcription_consistent():
    """Stars in the transcribed table agree with intervals excluding zero."""
    for fam, rows in GAP_TABLE.items():
        for feature, (est, lo, hi, stars) in rows.items():
            assert bool(stars) == TestResult.from_ci(feature, est, lo, hi).rejects(), (fam, feature)


@pytest.mark.parametrize("feature", ["Age", "Educ Num", "Marital status"])
def test_votes_per_feature(feature):
    assert table_votes()[feature] == EXPECTED_VOTES[feature]


def test_hours_week_vote_as_transcribed():
    assert table_votes()["Hours/Week"] == 5


def test_criterion_07_test_size():
    _emit(7, criterion_7())


def test_criterion_08_bootstrap_agreement(planted_dir):
    _emit(8, criterion_8(planted_dir))


def test_criterion_09_runtime_and_counts(planted_dir):
    _emit(9, criterion_9(planted_dir))


def test_criterion_10_mitigation(tmp_path):
    _emit(10, criterion_10(tmp_path))


def test_criterion_11_multi_stage():
    _emit(11, criterion_11())


if __name__ == "__main__":
    import tempfile

    failures = 0
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / "planted").mkdir()
        (root / "mitigation").mkdir()
        runs = [
            (1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5),
            (6, criterion_6), (7, criterion_7), (8, lambda: criterion_8(root / "planted")),
            (9, lambda: criterion_9(root / "planted")), (10, lambda: criterion_10(root / "mitigation")),
            (11, criterion_11),
        ]
        for number, fn in runs:
            ok, detail = fn()
            failures += not ok
            print(line(number, ok, detail))
    sys.exit(1 if failures else 0)
