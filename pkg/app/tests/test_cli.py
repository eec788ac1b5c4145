import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.main import main
from app.services.records import save_dataset
from app.tests import example


@pytest.fixture
def raw_tables(tmp_path, corpus) -> tuple[Path, Path]:
    return save_dataset(corpus, tmp_path / "raw")


@pytest.fixture
def dataset_dir(tmp_path, raw_tables) -> Path:
    sessions, personnel = raw_tables
    out = tmp_path / "dataset"
    assert main(["ingest", "--sessions", str(sessions), "--personnel", str(personnel), "--out", str(out)]) == 0
    return out


@pytest.fixture
def features_csv(tmp_path, dataset_dir) -> Path:
    censuses = tmp_path / "censuses.csv"
    features = tmp_path / "features.csv"
    assert main(["census", "--dataset", str(dataset_dir), "--out", str(censuses)]) == 0
    assert main(["features", "--dataset", str(dataset_dir), "--censuses", str(censuses), "--top-k", "20", "--horizon", "2", "--out", str(features)]) == 0
    return features


def test_ingest_writes_dataset(dataset_dir, corpus):
    assert (dataset_dir / "sessions.csv").exists()
    assert (dataset_dir / "personnel.csv").exists()
    assert len(pd.read_csv(dataset_dir / "sessions.csv")) == len(corpus)


def test_ingest_rerun_is_a_no_op(raw_tables, dataset_dir):
    sessions, personnel = raw_tables
    marker = dataset_dir / "sessions.csv"
    marker.write_text(marker.read_text() + "# untouched\n")
    argv = ["ingest", "--sessions", str(sessions), "--personnel", str(personnel), "--out", str(dataset_dir)]

    assert main(argv) == 0
    assert marker.read_text().endswith("# untouched\n")

    # a stale digest invalidates the output
    (dataset_dir / "sessions.csv.inputs").write_text("stale\n")
    assert main(argv) == 0
    assert not marker.read_text().endswith("# untouched\n")


def test_graph_weights(tmp_path):
    sessions, personnel = save_dataset(example.kind_of_blue_dataset(), tmp_path / "kob")
    out = tmp_path / "weights.csv"

    assert main(["graph", "weights", "--dataset", str(tmp_path / "kob"), "--session", example.KIND_OF_BLUE_ID, "--out", str(out)]) == 0
    matrix = pd.read_csv(out, index_col=0)
    assert sorted(np.diag(matrix.to_numpy()).tolist()) == [20, 23, 24, 25, 35, 58]
    assert matrix.loc["chambers", "coltrane"] == 35


def test_census_and_features(tmp_path, features_csv, corpus):
    censuses = pd.read_csv(tmp_path / "censuses.csv")
    features = pd.read_csv(features_csv)
    exclusions = pd.read_csv(tmp_path / "features_exclusions.csv")

    assert len(censuses) == len(corpus)
    assert len(features) + exclusions["sessions"].sum() == len(corpus)
    assert (features["releases"] >= 1).all()


def test_fit_and_margins(tmp_path, features_csv):
    fit_json = tmp_path / "fit_nb.json"
    margins = tmp_path / "margins.csv"

    assert main(["fit", "--features", str(features_csv), "--model", "nb", "--out", str(fit_json)]) == 0
    summary = fit_json.with_suffix(".txt").read_text()
    assert "model = negbin\n" in summary
    assert json.loads(fit_json.read_text())["link"] == "log"

    assert main(["margins", "--fit", str(fit_json), "--grid", "0:1:0.25", "--at", "n_musicians=5", "--out", str(margins)]) == 0
    table = pd.read_csv(margins)
    assert table["value"].tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert (table["prediction"] > 0).all()


def test_fixed_effects_fit(tmp_path, features_csv):
    out = tmp_path / "fit_fe.json"

    assert main(["fit", "--features", str(features_csv), "--fixed-effects", "leader", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["model"] == "fe_ols"


def test_permute(tmp_path, features_csv):
    out = tmp_path / "permutation.csv"

    assert main(["permute", "--features", str(features_csv), "--n", "5", "--seed", "1", "--out", str(out)]) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == ["term", "coefficient", "exceedances", "p_value"]
    assert table["p_value"].between(1 / 6, 1).all()
    assert "n_permutations = 5\n" in out.with_suffix(".txt").read_text()


def test_rewire(tmp_path, dataset_dir):
    out = tmp_path / "worlds"

    assert main(["rewire", "--dataset", str(dataset_dir), "--worlds", "2", "--seed", "11", "--out", str(out)]) == 0
    index = pd.read_csv(out / "worlds.csv")
    assert index["world"].tolist() == [0, 1]
    assert (index["violations"] == 0).all()


def test_malformed_at_is_a_config_error(tmp_path, features_csv):
    fit_json = tmp_path / "fit.json"
    assert main(["fit", "--features", str(features_csv), "--out", str(fit_json)]) == 0

    assert main(["margins", "--fit", str(fit_json), "--at", "n_musicians", "--out", str(tmp_path / "m.csv")]) == 2


def test_unknown_regressor_fails(tmp_path, features_csv):
    fit_json = tmp_path / "fit.json"
    assert main(["fit", "--features", str(features_csv), "--out", str(fit_json)]) == 0

    assert main(["margins", "--fit", str(fit_json), "--vary", "tempo", "--out", str(tmp_path / "m.csv")]) == 1


def test_missing_config_exit_code(tmp_path):
    assert main(["pipeline", "run", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "out")]) == 2


def test_unknown_command():
    with pytest.raises(SystemExit):
        main(["tempo"])
