"""Command-line behavior: outputs, reproducibility, exit codes."""

import csv
import json

import numpy as np
import pytest

from evacert import mnist_mlp_config, save_idx, save_model
from evacert.cli import main

rng = np.random.default_rng(0)


@pytest.fixture
def workspace(tmp_path):
    net = mnist_mlp_config(0, input_size=64)
    save_model(net, tmp_path / "model.json", tmp_path / "model.bin")
    np.save(tmp_path / "x.npy", rng.random(64))
    save_idx(rng.random((4, 8, 8)), np.arange(4), tmp_path / "imgs.idx", tmp_path / "lbls.idx")
    return tmp_path


def run(workspace, *extra):
    return main(
        ["explain", "--model", str(workspace / "model.json"), "--image", str(workspace / "x.npy"),
         "--grid", "4", "--eps", "0.1", *extra]
    )


def test_explain_writes_outputs(workspace):
    out = workspace / "out"
    assert run(workspace, "--out", str(out)) == 0
    assert (out / "heatmap.png").exists()
    assert (out / "metadata.json").exists()
    with open(out / "cells.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["cell", "row", "col", "score"]
    assert len(rows) - 1 == 16  # g^2 cells
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["grid"] == 4 and meta["eps"] == 0.1 and "seed" in meta


def test_rerun_is_byte_identical(workspace):
    a, b = workspace / "a", workspace / "b"
    assert run(workspace, "--out", str(a)) == 0
    assert run(workspace, "--out", str(b)) == 0
    assert (a / "cells.csv").read_bytes() == (b / "cells.csv").read_bytes()
    assert (a / "heatmap.png").read_bytes() == (b / "heatmap.png").read_bytes()


def test_explain_from_dataset_index(workspace):
    out = workspace / "ds_out"
    code = main(
        ["explain", "--model", str(workspace / "model.json"),
         "--data", f"{workspace/'imgs.idx'},{workspace/'lbls.idx'}", "--index", "2",
         "--grid", "4", "--eps", "0.1", "--out", str(out)]
    )
    assert code == 0 and (out / "cells.csv").exists()


def test_targeted_outputs_signed_values(workspace):
    out = workspace / "targeted"
    code = run(workspace, "--method", "targeted", "--target", "3", "--out", str(out))
    assert code == 0
    with open(out / "cells.csv") as fh:
        scores = [float(r["score"]) for r in csv.DictReader(fh)]
    assert any(s < 0 for s in scores) or any(s > 0 for s in scores)
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["target_class"] == 3


def test_baseline_method(workspace):
    out = workspace / "sal"
    assert run(workspace, "--method", "baseline:saliency", "--out", str(out)) == 0


def test_config_errors_exit_2(workspace):
    assert run(workspace, "--method", "targeted", "--out", str(workspace / "o1")) == 2
    assert run(workspace, "--method", "eva-hybrid", "--out", str(workspace / "o2")) == 2
    assert run(workspace, "--method", "baseline:nope", "--out", str(workspace / "o3")) == 2
    assert main(["explain", "--model", str(workspace / "model.json"), "--grid", "4",
                 "--out", str(workspace / "o4")]) == 2  # neither --image nor --data


def test_model_data_errors_exit_3(workspace, tmp_path):
    assert main(["explain", "--model", str(tmp_path / "missing.json"),
                 "--image", str(workspace / "x.npy"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{\"format_version\": 42, \"layers\": []}")
    (tmp_path / "bad.bin").write_bytes(b"")
    assert main(["explain", "--model", str(bad), "--image", str(workspace / "x.npy"),
                 "--out", str(tmp_path / "o")]) == 3


def test_verify_certificate(workspace, capsys):
    code = main(["verify", "--model", str(workspace / "model.json"),
                 "--image", str(workspace / "x.npy"), "--eps", "0.0001",
                 "--bound", "ibp+fo+ba", "--out", str(workspace / "v")])
    assert code == 0
    out = capsys.readouterr().out
    assert "CERTIFIED" in out
    payload = json.loads((workspace / "v" / "verify.json").read_text())
    assert payload["certified_robust"] is True


def test_verify_combined_tighter_than_ibp(workspace, capsys):
    for bound in ("ibp", "ibp+fo+ba"):
        main(["verify", "--model", str(workspace / "model.json"),
              "--image", str(workspace / "x.npy"), "--eps", "0.05", "--bound", bound,
              "--out", str(workspace / f"v_{bound.replace('+', '_')}")])
    ibp = json.loads((workspace / "v_ibp" / "verify.json").read_text())
    comb = json.loads((workspace / "v_ibp_fo_ba" / "verify.json").read_text())
    gaps_ibp = np.array(ibp["upper"]) - np.array(ibp["lower"])
    gaps_comb = np.array(comb["upper"]) - np.array(comb["lower"])
    assert np.all(gaps_comb <= gaps_ibp + 1e-12)


def test_benchmark_rows_and_empty_methods(workspace):
    out = workspace / "bench"
    code = main(["benchmark", "--model", str(workspace / "model.json"),
                 "--data", f"{workspace/'imgs.idx'},{workspace/'lbls.idx'}",
                 "--methods", "eva,baseline:saliency", "--count", "3",
                 "--grid", "4", "--eps", "0.1", "--out", str(out)])
    assert code == 0
    with open(out / "per_image.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == 6  # two methods x three images
    assert main(["benchmark", "--model", str(workspace / "model.json"),
                 "--data", f"{workspace/'imgs.idx'},{workspace/'lbls.idx'}",
                 "--methods", "", "--out", str(out)]) == 2


def test_unknown_bound_rejected(workspace):
    assert run(workspace, "--bound", "crown", "--out", str(workspace / "ob")) == 2
