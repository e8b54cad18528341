"""
End-to-end runs of the command line: synth -> train -> eval / stats / render
"""
import json

import pytest

from conftest import SMALL_MODEL, TINY_SYNTH
from main import main
from network import OPECNet
from skeleton import load_skeleton
from store import LOSS_LOG, MANIFEST, RunStore, read_loss_log
from training import TrainingConfig


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = write_config(root / "synth.json", synth={k: v for k, v in TINY_SYNTH.items()
                                                       if k not in ("num_images", "seed")})
    data = root / "data"
    assert main(["synth", "--out", str(data), "--num-images", "4", "--seed", "7", "--config", synth_cfg]) == 0
    return root, data


@pytest.fixture(scope="module")
def untrained_checkpoint(workspace):
    root, _ = workspace
    model = OPECNet(load_skeleton("ocpose12"), SMALL_MODEL)
    store = RunStore(root / "untrained")
    return store.save_checkpoint(model, epoch=0, step=0, config=TrainingConfig.from_dict({}).to_dict())


def test_synth_writes_dataset(workspace):
    _, data = workspace
    assert (data / "annotations.json").exists()
    assert len(list(data.glob("*.png"))) == 4
    manifest = json.loads((data / MANIFEST).read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 7


def test_train_smoke(workspace):
    root, data = workspace
    cfg = write_config(root / "train.json", model=SMALL_MODEL, training={"batch_size": 4})
    out = root / "run"
    assert main(["train", "--dataset", str(data), "--out", str(out), "--config", cfg,
                 "--epochs", "2", "--seed", "3"]) == 0

    checkpoints = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert checkpoints == ["base_epoch_001.pt", "base_epoch_002.pt"]
    manifest = json.loads((out / MANIFEST).read_text())
    assert manifest["command"] == "train"
    assert len(manifest["checkpoints"]) == 2
    rows = read_loss_log(out / LOSS_LOG)
    assert rows and list(rows[0]) == ["step", "epoch", "lr", "loss", "init", "pose1", "pose2", "final"]


def test_eval_of_untrained_model(workspace, untrained_checkpoint):
    root, data = workspace
    reports = []
    for name in ("eval_a", "eval_b"):
        out = root / name
        assert main(["eval", "--dataset", str(data), "--out", str(out),
                     "--checkpoint", str(untrained_checkpoint)]) == 0
        reports.append(json.loads((out / "eval_report.json").read_text()))
        assert (out / "eval_summary.txt").exists()

    first, second = reports
    assert first == second
    assert first["initial"]["ap"] == first["final"]["ap"]
    assert first["initial"]["joint_error"] == first["final"]["joint_error"]


def test_eval_with_couple_graph(workspace, untrained_checkpoint):
    root, data = workspace
    out = root / "eval_couple"
    assert main(["eval", "--dataset", str(data), "--out", str(out),
                 "--checkpoint", str(untrained_checkpoint), "--couple-graph"]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["initial"]["ap"] == report["final"]["ap"]


def test_stats(workspace):
    root, data = workspace
    out = root / "stats"
    assert main(["stats", "--dataset", str(data), "--out", str(out)]) == 0
    stats = json.loads((out / "occlusion_stats.json").read_text())
    assert stats["total"] == 4


def test_render_one_png_per_image(workspace, untrained_checkpoint):
    root, data = workspace
    out = root / "render_run"
    assert main(["render", "--dataset", str(data), "--out", str(out),
                 "--checkpoint", str(untrained_checkpoint)]) == 0
    assert len(list((out / "render").glob("*.png"))) == 4
    legend = json.loads((out / "legend.json").read_text())
    assert list(legend) == ["final", "ground_truth", "initial"]


def test_empty_dataset(workspace, untrained_checkpoint, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "annotations.json").write_text(json.dumps({"images": [], "annotations": []}))

    assert main(["render", "--dataset", str(empty), "--out", str(tmp_path / "r"),
                 "--checkpoint", str(untrained_checkpoint)]) == 0
    assert not (tmp_path / "r" / "render").exists()

    assert main(["eval", "--dataset", str(empty), "--out", str(tmp_path / "e"),
                 "--checkpoint", str(untrained_checkpoint)]) == 0
    report = json.loads((tmp_path / "e" / "eval_report.json").read_text())
    assert report["final"]["joint_error"]["visible_count"] == 0

    assert main(["stats", "--dataset", str(empty)]) == 0


@pytest.mark.parametrize("doc, key", [
    ({"training": {"learnig_rate": 0.1}}, "learnig_rate"),
    ({"modle": {}}, "modle"),
    ({"model": {"crop_sise": [32, 32]}}, "crop_sise"),
    ({"training": {"epochs": 0}}, "epochs"),
])
def test_bad_config_names_the_key(workspace, tmp_path, capsys, doc, key):
    _, data = workspace
    cfg = write_config(tmp_path / "bad.json", **doc)
    assert main(["train", "--dataset", str(data), "--out", str(tmp_path / "o"), "--config", cfg]) == 2
    assert key in capsys.readouterr().out


def test_missing_inputs_exit_codes(workspace, tmp_path):
    _, data = workspace
    assert main(["stats", "--dataset", str(tmp_path / "nowhere")]) == 3
    assert main(["eval", "--dataset", str(data), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "missing.pt")]) == 3
    assert main(["synth", "--out", str(tmp_path / "s"), "--occlusion", "1.5"]) == 2


def test_verify(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "5/5 checks passed" in out


def run_train(data, cfg, out, *extra):
    return main(["train", "--dataset", str(data), "--out", str(out), "--config", cfg,
                 "--epochs", "2", "--seed", "3", *extra])


def test_same_seed_gives_identical_loss_log(workspace, tmp_path):
    root, data = workspace
    cfg = write_config(tmp_path / "train.json", model=SMALL_MODEL, training={"batch_size": 4})
    assert run_train(data, cfg, tmp_path / "first") == 0
    assert run_train(data, cfg, tmp_path / "second") == 0
    assert (tmp_path / "first" / LOSS_LOG).read_text() == (tmp_path / "second" / LOSS_LOG).read_text()


def test_resume_from_command_line(workspace, tmp_path):
    _, data = workspace
    cfg = write_config(tmp_path / "train.json", model=SMALL_MODEL, training={"batch_size": 4})
    full = tmp_path / "full"
    assert run_train(data, cfg, full) == 0

    resumed = tmp_path / "resumed"
    assert run_train(data, cfg, resumed, "--resume", str(full / "checkpoints" / "base_epoch_001.pt")) == 0
    assert sorted(p.name for p in (resumed / "checkpoints").iterdir()) == ["base_epoch_002.pt"]

    expected, got = read_loss_log(full / LOSS_LOG), read_loss_log(resumed / LOSS_LOG)
    assert [(r["step"], r["epoch"]) for r in got] == [(r["step"], r["epoch"]) for r in expected]
    for a, b in zip(expected, got):
        assert float(a["loss"]) == pytest.approx(float(b["loss"]), abs=1e-9)


def test_unwritable_output_exits_with_data_error(workspace, tmp_path, capsys):
    _, data = workspace
    out = tmp_path / "stats"
    (out / "occlusion_stats.json").mkdir(parents=True)
    assert main(["stats", "--dataset", str(data), "--out", str(out)]) == 3
    assert "occlusion_stats.json" in capsys.readouterr().out
