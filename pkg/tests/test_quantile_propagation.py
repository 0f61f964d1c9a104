import numpy as np
import pandas as pd
import pytest

import quantile_propagation
from modules.lookup import GridSpec


@pytest.fixture
def pima_like(tmp_path, rng):
    X = rng.standard_normal((18, 3))
    frame = pd.DataFrame(X, columns=["glucose", "bmi", "age"])
    frame["Outcome"] = (X[:, 0] + 0.2 * rng.standard_normal(18) > 0).astype(int)
    path = tmp_path / "pima.csv"
    frame.to_csv(path, index=False)
    return path


def test_fit_then_predict(pima_like, tmp_path, capsys):
    model = tmp_path / "model.npz"
    code = quantile_propagation.main(["fit", "--data", str(pima_like), "--dataset", "pima", "--no-hyperopt",
                                      "--model-out", str(model)])
    assert code == 0
    assert "Log evidence" in capsys.readouterr().out

    features = pd.read_csv(pima_like).drop(columns="Outcome")
    features.to_csv(tmp_path / "new.csv", index=False)
    out = tmp_path / "pred.csv"
    assert quantile_propagation.main(["predict", "--model", str(model), "--data", str(tmp_path / "new.csv"),
                                      "--output", str(out)]) == 0
    predictions = pd.read_csv(out)
    assert list(predictions.columns) == ["latent_mean", "latent_var", "probability", "prediction"]
    assert np.all((predictions["probability"] > 0) & (predictions["probability"] < 1))


def test_validation_errors_exit_with_code_2(pima_like, tmp_path, capsys):
    config = tmp_path / "bad.yaml"
    config.write_text("not_an_option: 1\n", encoding="utf-8")
    code = quantile_propagation.main(["fit", "--data", str(pima_like), "--dataset", "pima", "--config", str(config)])
    assert code == 2
    assert "not_an_option" in capsys.readouterr().out

    code = quantile_propagation.main(["fit", "--data", str(pima_like)])
    assert code == 2


def test_missing_table_is_a_usage_error(pima_like, tmp_path, monkeypatch):
    monkeypatch.setenv("QP_TABLE_DIR", str(tmp_path / "tables"))
    code = quantile_propagation.main(["fit", "--data", str(pima_like), "--dataset", "pima", "--no-hyperopt",
                                      "--method", "qp", "--sigma-source", "table"])
    assert code == 2


def test_precompute_small_table(tmp_path, monkeypatch):
    monkeypatch.setattr(quantile_propagation, "spot_check", lambda table, likelihood, n: 0.0)
    real_precompute = quantile_propagation.precompute_table
    monkeypatch.setattr(quantile_propagation, "precompute_table",
                        lambda likelihood, y_set, grid, processes: real_precompute(likelihood, y_set, GridSpec.toy(3), processes, progress=False))
    output = tmp_path / "probit.qplt"
    code = quantile_propagation.main(["precompute-table", "--likelihood", "probit", "--mu-count", "3",
                                      "--sigma-count", "3", "--output", str(output)])
    assert code == 0
    assert output.stat().st_size > 0
