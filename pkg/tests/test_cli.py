import json

import numpy as np
import pytest

from agfanet import cli, metrics
from agfanet.data import LabelMask, load_dataset, load_volume, save_volume
from agfanet.training import checkpoint_load, predict


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph")
    assert cli.main(["phantom", "--count", "4", "--seed", "7", "--extents", "16", "16", "16", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(phantoms, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--config", "baseline", "--data-manifest", str(phantoms / "manifest.json"),
                     "--epochs", "5", "--out", str(out), "--no-augment"])
    assert code == 0
    return out


def test_phantom_count_manifest_and_header(phantoms):
    doc = json.loads((phantoms / "manifest.json").read_text())
    assert len(doc["samples"]) == 4
    for entry in doc["samples"]:
        v = load_volume(phantoms / entry["volume"])
        assert v.extents == (16, 16, 16)
        assert isinstance(load_volume(phantoms / entry["mask"]), LabelMask)


def test_phantom_deterministic(phantoms, tmp_path):
    cli.main(["phantom", "--count", "4", "--seed", "7", "--extents", "16", "16", "16", "--out-dir", str(tmp_path)])
    for f in sorted(phantoms.iterdir()):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_train_log_has_one_line_per_epoch(trained):
    lines = (trained / "fold0" / "train.log").read_text().splitlines()
    assert len(lines) == 5
    assert [ln.split()[0] for ln in lines] == [f"epoch={i}" for i in range(5)]
    assert (trained / "fold0" / "checkpoint.agck").exists()
    assert "use_frm = false" in (trained / "model.cfg").read_text().lower()


def test_infer_matches_library(trained, phantoms, tmp_path):
    vol = phantoms / "phantom_000_volume.agv"
    out = tmp_path / "pred.agv"
    assert cli.main(["infer", "--checkpoint", str(trained / "fold0" / "checkpoint.agck"), "--volume", str(vol),
                     "--out", str(out), "--postprocess"]) == 0
    pred = load_volume(out)
    src = load_volume(vol)
    assert pred.same_geometry(src)
    assert metrics.count_components(pred.values) <= 1
    from agfanet.data import normalize
    net, _ = checkpoint_load(trained / "fold0" / "checkpoint.agck")
    np.testing.assert_array_equal(pred.values, predict(net, normalize(src), postprocess=True).values)


def test_eval_matches_library(phantoms, tmp_path, capsys):
    truth = phantoms / "phantom_000_mask.agv"
    other = phantoms / "phantom_001_mask.agv"
    report = tmp_path / "r.json"
    assert cli.main(["eval", "--pred", str(other), "--truth", str(truth), "--report", str(report)]) == 0
    text = capsys.readouterr().out
    lib = metrics.compute_report(load_volume(other).values, load_volume(truth).values)
    assert metrics.MetricsReport.from_json(report.read_text()) == lib
    assert metrics.MetricsReport.from_text(text) == lib
    cli.main(["eval", "--pred", str(truth), "--truth", str(truth)])
    same = metrics.MetricsReport.from_text(capsys.readouterr().out)
    assert same.dice == 1.0 and same.hd_mm == 0.0


def test_eval_disjoint(tmp_path, capsys):
    a, b = np.zeros((4, 4, 4), np.uint8), np.zeros((4, 4, 4), np.uint8)
    a[0, 0, 0], b[3, 3, 3] = 1, 1
    save_volume(LabelMask(a), tmp_path / "a.agv")
    save_volume(LabelMask(b), tmp_path / "b.agv")
    cli.main(["eval", "--pred", str(tmp_path / "a.agv"), "--truth", str(tmp_path / "b.agv")])
    assert metrics.MetricsReport.from_text(capsys.readouterr().out).dice == 0.0


def test_ablate_table(phantoms, tmp_path, capsys):
    args = ["ablate", "--data-manifest", str(phantoms / "manifest.json"), "--epochs", "1", "--out"]
    assert cli.main(args + [str(tmp_path / "a")]) == 0
    assert cli.main(args + [str(tmp_path / "b")]) == 0
    table = (tmp_path / "a" / "ablation.txt").read_text()
    assert table == (tmp_path / "b" / "ablation.txt").read_text()
    rows = json.loads((tmp_path / "a" / "ablation.json").read_text())["rows"]
    assert len(rows) == 11 and rows[-1]["name"] == "AGFA-Net"
    assert all(0.0 <= r["dice"] <= 1.0 for r in rows)


# -- exit codes ------------------------------------------------------------------------------

def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--pred", "x"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["phantom", "--out-dir", "x", "--bogus"])
    assert e.value.code == 1
    assert cli.main(["train", "--config", "net42", "--data-manifest", "m.json", "--out", "o"]) == 1


def test_data_errors_exit_2(phantoms, tmp_path):
    assert cli.main(["eval", "--pred", str(tmp_path / "missing.agv"), "--truth", str(tmp_path / "missing.agv")]) == 2
    a = np.zeros((4, 4, 4), np.uint8)
    save_volume(LabelMask(a), tmp_path / "a.agv")
    save_volume(LabelMask(a, (0.5, 1, 1)), tmp_path / "b.agv")
    assert cli.main(["eval", "--pred", str(tmp_path / "a.agv"), "--truth", str(tmp_path / "b.agv")]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["phantom", "--count", "1", "--out-dir", str(blocker / "sub")]) == 2


def test_infer_incompatible_extents_exit_2(trained, tmp_path):
    from agfanet.data import Volume
    save_volume(Volume(np.zeros((12, 16, 16))), tmp_path / "v.agv")
    assert cli.main(["infer", "--checkpoint", str(trained / "fold0" / "checkpoint.agck"),
                     "--volume", str(tmp_path / "v.agv"), "--out", str(tmp_path / "o.agv")]) == 2


def test_nan_training_exits_3(phantoms, tmp_path):
    vol = load_volume(phantoms / "phantom_000_volume.agv")
    bad = tmp_path / "bad"
    bad.mkdir()
    vol.intensities[0, 0, 0] = np.nan
    save_volume(vol, bad / "v.agv")
    save_volume(load_volume(phantoms / "phantom_000_mask.agv"), bad / "m.agv")
    (bad / "manifest.json").write_text(json.dumps({"samples": [{"id": "x", "volume": "v.agv", "mask": "m.agv"}]}))
    code = cli.main(["train", "--config", "baseline", "--data-manifest", str(bad / "manifest.json"),
                     "--epochs", "1", "--out", str(tmp_path / "o"), "--no-augment"])
    assert code == 3
