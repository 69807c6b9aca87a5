import threading

import numpy as np
import pytest

from eslaudit.dataset import split
from eslaudit.errors import CompletenessError, DegenerateModelError, DomainError, PredictionValueError, ShapeError
from eslaudit.model import (
    ClassifierConfig,
    CoalitionPredictionTable,
    TrainedModel,
    build_coalition_table,
    class_weights,
    import_predictions,
    predict,
    predict_proba,
    required_coalitions,
    train,
    write_predictions,
)
from eslaudit.synthetic import census_like

FAMILIES = ["equal_surplus", "shapley", "solidarity", "consensus", "lsp"]


def test_separable_toy_fits():
    x = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    y = np.array([0, 0, 1, 1])
    model = train(x, y, ClassifierConfig(learning_rate=0.5, epochs=500))
    assert np.array_equal(predict(model, x, 0.5), y)


def test_identical_rows_predict_half():
    x = np.ones((6, 2))
    y = np.array([1, 0, 1, 0, 1, 0])
    model = train(x, y, ClassifierConfig())
    np.testing.assert_allclose(predict_proba(model, x), 0.5, atol=1e-6)


def test_class_weights_balance_totals():
    y = np.array([1] * 10 + [0] * 90)
    w = class_weights(y)
    assert w[y == 1].sum() == pytest.approx(w[y == 0].sum(), abs=1e-9)


def test_single_class_is_degenerate():
    with pytest.raises(DegenerateModelError):
        train(np.zeros((3, 1)), np.ones(3), ClassifierConfig(), ("a",))


def test_threshold_boundary():
    model = TrainedModel(np.array([1.0]), 0.0, ("a",))
    assert predict(model, np.array([[0.0]]), 0.5)[0] == 1
    assert predict(model, np.array([[-10.0]]), 0.5)[0] == 0


def test_positive_count_monotone_in_threshold(rng):
    x = rng.normal(size=(100, 3))
    y = (x[:, 0] + rng.normal(size=100) > 0).astype(int)
    model = train(x, y, ClassifierConfig(epochs=50))
    counts = [predict(model, x, t).sum() for t in np.linspace(0.1, 0.9, 9)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_column_mismatch():
    model = TrainedModel(np.array([1.0, 2.0]), 0.0, ("a",))
    with pytest.raises(ShapeError):
        predict(model, np.zeros((2, 3)), 0.5)


def test_config_domain():
    with pytest.raises(DomainError):
        ClassifierConfig(threshold=1.0)
    with pytest.raises(DomainError):
        ClassifierConfig(epochs=0)


# coalition tables

@pytest.fixture(scope="module")
def census():
    d = census_like(n=600, seed=5)
    return d, split(d, 0.3, 0)


def test_all_coalitions(census):
    d, s = census
    table = build_coalition_table(d, s, d.feature_names, ClassifierConfig(epochs=50))
    assert len(table) == 15
    assert len(table.instance_ids) == len(s.test_indices)


def test_coalition_count_law():
    for n in (2, 3, 4, 8):
        assert len(required_coalitions(n, ["equal_surplus"], two_stage=False)) == 1
        assert len(required_coalitions(n, ["equal_surplus"])) == n + 1
        for f in FAMILIES[1:]:
            assert len(required_coalitions(n, [f])) == 2**n - 1
        assert len(required_coalitions(n, FAMILIES)) == 2**n - 1


def test_equal_surplus_only_tables(census):
    d, s = census
    cfg = ClassifierConfig(epochs=50)
    first = build_coalition_table(d, s, d.feature_names, cfg, required_coalitions(4, ["equal_surplus"], False))
    assert first.masks() == [15]
    two = build_coalition_table(d, s, d.feature_names, cfg, required_coalitions(4, ["equal_surplus"]))
    assert two.masks() == [1, 2, 4, 8, 15]


def test_outside_universe(census):
    d, s = census
    with pytest.raises(DomainError):
        build_coalition_table(d, s, ("age", "educational-num"), ClassifierConfig(), [4])
    with pytest.raises(DomainError):
        build_coalition_table(d, s, ("age", "nope"), ClassifierConfig())


def test_build_deterministic_and_parallel_safe(census):
    d, s = census
    cfg = ClassifierConfig(epochs=40)
    a = build_coalition_table(d, s, d.feature_names, cfg)
    b = build_coalition_table(d, s, d.feature_names, cfg, n_jobs=4)
    assert a.equals(b)


def test_table_write_once_and_binary():
    t = CoalitionPredictionTable(("a",), [0, 1])
    t.add(1, np.array([0, 1]))
    with pytest.raises(DomainError):
        t.add(1, np.array([1, 1]))
    with pytest.raises(PredictionValueError):
        CoalitionPredictionTable(("a",), [0, 1]).add(1, np.array([0.5, 1]))
    with pytest.raises(ShapeError):
        CoalitionPredictionTable(("a",), [0, 1]).add(1, np.array([0, 1, 1]))
    assert not t.column(1).flags.writeable


def test_concurrent_adds():
    t = CoalitionPredictionTable(tuple("abcdef"), range(10))
    threads = [threading.Thread(target=t.add, args=(m, np.ones(10))) for m in range(1, 64)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(t) == 63


# import

def test_import_three_entries(tmp_path):
    p = tmp_path / "pred.csv"
    rows = ["coalition,row_id,y_hat"]
    for coal in ("a", "b", "a;b"):
        rows += [f"{coal},{i},{i % 2}" for i in range(3)]
    p.write_text("\n".join(rows) + "\n")
    table = import_predictions(p)
    assert len(table) == 3 and table.universe == ("a", "b")


def test_import_missing_full(tmp_path):
    p = tmp_path / "pred.csv"
    p.write_text("coalition,row_id,y_hat\na,0,1\nb,0,0\n")
    with pytest.raises(CompletenessError):
        import_predictions(p, universe=("a", "b"))


def test_import_fractional_prediction(tmp_path):
    p = tmp_path / "pred.csv"
    p.write_text("coalition,row_id,y_hat\na,0,0.7\n")
    with pytest.raises(PredictionValueError):
        import_predictions(p)


def test_import_instance_ids_must_match(tmp_path):
    p = tmp_path / "pred.csv"
    p.write_text("coalition,row_id,y_hat\na,0,1\na,1,0\n")
    with pytest.raises(ShapeError):
        import_predictions(p, instance_ids=[0, 2])


def test_write_import_round_trip(census, tmp_path):
    d, s = census
    table = build_coalition_table(d, s, d.feature_names, ClassifierConfig(epochs=30))
    write_predictions(table, tmp_path / "p.csv")
    back = import_predictions(tmp_path / "p.csv", universe=d.feature_names)
    assert back.equals(table)
