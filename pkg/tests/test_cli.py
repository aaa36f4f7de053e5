import hashlib
import json
import shutil

import numpy as np
import pytest

from sketchdensity import checkpoint as ckpt
from sketchdensity import cli, dataset

CONFIG = """
[run]
epochs_mdtn = 1
epochs_mdsg = 1
epochs_finetune = 1
output_dir = runs
[model]
resolution = 32
mdtn_widths = 4,8,8,8,16
merge_widths = 4,8,8,8,8
residual_blocks = 1
disc_channels = 4
mdsg_base_channels = 4
mdsg_bottleneck_channels = 8
[data]
root = data
num_train = 8
num_eval = 4
seed = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Output root holding a prepared dataset plus MDTN and MDSG checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    (root / "c.ini").write_text(CONFIG)
    mp = pytest.MonkeyPatch()
    mp.setenv(cli.OUTPUT_ROOT_ENV, str(root))
    assert cli.main(["prepare-data", "--config", "c.ini"]) == 0
    assert cli.main(["train", "--config", "c.ini", "--phase", "pretrain-mdtn"]) == 0
    assert cli.main(["train", "--config", "c.ini", "--phase", "train-mdsg"]) == 0
    yield root
    mp.undo()


@pytest.fixture
def in_root(workspace, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(workspace))
    return workspace


def manifest(root, command):
    return json.loads((root / "runs" / f"{command}.manifest.json").read_text())


def test_prepare_data_manifest(in_root):
    m = manifest(in_root, "prepare-data")
    assert m["dataset_id"] == dataset.dataset_digest(in_root / "data")
    assert m["seed"] == 0 and m["start_time"] <= m["end_time"]
    assert len(dataset.read_manifest(in_root / "data")) == 12


def test_prepare_data_rerun_same_digest(in_root, tmp_path):
    assert cli.main(["prepare-data", "--config", "c.ini", "--out", str(tmp_path / "again")]) == 0
    assert dataset.dataset_digest(tmp_path / "again") == dataset.dataset_digest(in_root / "data")


def test_train_manifests_match_files(in_root):
    for command, name, file in (("train-pretrain-mdtn", "pretrain_mdtn", "mdtn.ckpt"),
                                ("train-train-mdsg", "train_mdsg", "mdsg.ckpt")):
        m = manifest(in_root, command)
        path = in_root / "runs" / file
        assert m["checkpoint_digests"][name] == ckpt.file_digest(path)
        assert m["outputs"][name] == str(path)
        assert (in_root / "runs" / file.replace(".ckpt", ".losses.csv")).is_file()


def test_resume_flag_honoured(in_root):
    assert cli.main(["train", "--config", "c.ini", "--phase", "pretrain-mdtn",
                     "--checkpoint", "runs/part.ckpt", "--stop-after", "1"]) == 0
    assert cli.main(["train", "--config", "c.ini", "--phase", "pretrain-mdtn",
                     "--checkpoint", "runs/resumed.ckpt", "--resume-from", "runs/part.ckpt"]) == 0
    assert (ckpt.file_digest(in_root / "runs" / "resumed.ckpt")
            == ckpt.file_digest(in_root / "runs" / "mdtn.ckpt"))


def test_finetune_phase(in_root):
    assert cli.main(["train", "--config", "c.ini", "--phase", "finetune"]) == 0
    kind, meta, _ = ckpt.load(in_root / "runs" / "finetune.ckpt")
    assert kind == "joint_finetune"
    g_c, _, _ = __import__("sketchdensity.training", fromlist=["x"]).load_mdsg(in_root / "runs" / "mdsg.ckpt")
    assert meta["mdsg_digest"] == ckpt.module_digest(g_c)


def test_eval_writes_both_modes(in_root):
    assert cli.main(["eval", "--config", "c.ini", "--out", "runs/ev1"]) == 0
    recs = json.loads((in_root / "runs" / "ev1" / "metrics.json").read_text())
    assert {r["mode"] for r in recs} == {"reconstruction", "transfer", "linearity"}
    header = (in_root / "runs" / "ev1" / "metrics.csv").read_text().splitlines()[0].split(",")
    assert {"ssim", "recon_l1", "edge_iou", "style_distance", "linearity_r2"} <= set(header)
    assert cli.main(["eval", "--config", "c.ini", "--out", "runs/ev2"]) == 0
    a = (in_root / "runs" / "ev1" / "metrics.json").read_bytes()
    assert a == (in_root / "runs" / "ev2" / "metrics.json").read_bytes()


def test_eval_missing_checkpoint(in_root, capsys):
    assert cli.main(["eval", "--config", "c.ini", "--mdtn", "runs/nope.ckpt"]) == 2
    assert "nope.ckpt" in capsys.readouterr().err


def test_grid_default_range(in_root):
    assert cli.main(["grid", "--config", "c.ini", "--image-id", "eval_00000",
                     "--reference-id", "eval_00001"]) == 0
    out = in_root / "runs" / "grid_eval_00000.png"
    img = dataset.read_image(out)
    assert img.shape == (64, 8 * 32, 3)
    cells = json.loads(out.with_suffix(".cells.json").read_text())
    assert [c["scale"] for c in cells] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    m = manifest(in_root, "grid")
    assert m["outputs"]["grid"] == str(out)


def test_grid_unknown_id(in_root, capsys):
    assert cli.main(["grid", "--config", "c.ini", "--image-id", "eval_09999"]) == 2
    assert "eval_09999" in capsys.readouterr().err


def test_parse_scale_range():
    assert cli.parse_scale_range("0.1:0.8:0.1") == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    assert cli.parse_scale_range("0.2,0.5") == (0.2, 0.5)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_edit_apply_round_trip(in_root):
    """An unedited extracted sketch gives the same bytes as a direct reconstruction."""
    import torch
    from sketchdensity.training import load_mdtn
    sketch = in_root / "data" / "sketches" / "level4" / "eval_00000.png"
    assert cli.main(["edit-apply", "--config", "c.ini", "--sketch", str(sketch),
                     "--reference-id", "eval_00000", "--density", "0.8",
                     "--out", "runs/edit.png"]) == 0
    model, _ = load_mdtn(in_root / "runs" / "mdtn.ckpt")
    sk = torch.from_numpy(dataset.read_sketch(sketch))[None, None]
    ref = dataset.read_image(in_root / "data" / "images" / "eval_00000.png")
    with torch.no_grad():
        out = model(sk, torch.from_numpy(ref.transpose(2, 0, 1).copy())[None])
    direct = in_root / "runs" / "direct.png"
    dataset.write_png(direct, np.round(np.clip(out[0].permute(1, 2, 0).numpy(), 0, 1) * 255)
                      .astype(np.uint8))
    assert sha(direct) == sha(in_root / "runs" / "edit.png")
    assert manifest(in_root, "edit-apply")["density"] == 0.8


@pytest.mark.parametrize("density", ["1.5", "-0.1"])
def test_edit_apply_invalid_density(in_root, density):
    sketch = in_root / "data" / "sketches" / "level4" / "eval_00000.png"
    assert cli.main(["edit-apply", "--config", "c.ini", "--sketch", str(sketch),
                     "--reference-id", "eval_00000", "--density", density]) == 2


def test_edit_apply_resolution_mismatch(in_root, tmp_path, capsys):
    small = tmp_path / "small.png"
    dataset.write_png(small, np.zeros((16, 16), dtype=np.uint8))
    assert cli.main(["edit-apply", "--config", "c.ini", "--sketch", str(small),
                     "--reference-id", "eval_00000", "--density", "0.5"]) == 2
    assert "16x16" in capsys.readouterr().err


def test_usage_errors(in_root):
    assert cli.main([]) == 1
    assert cli.main(["train", "--phase", "bogus"]) == 1
    assert cli.main(["frobnicate"]) == 1


def test_bad_config_exit_code(in_root, capsys):
    (in_root / "bad.ini").write_text("[run]\nsed = 1\n")
    assert cli.main(["prepare-data", "--config", "bad.ini"]) == 2
    assert "sed" in capsys.readouterr().err


def test_external_missing_mask_names_id(in_root, tmp_path, capsys):
    src = tmp_path / "ext"
    for sub in ("images", "annotations", "label_masks"):
        shutil.copytree(in_root / "data" / sub, src / sub)
    ann = src / "annotations" / "train_00001.json"
    data = json.loads(ann.read_text())
    del data["label_mask"]
    ann.write_text(json.dumps(data))
    (tmp_path / "ext.ini").write_text(CONFIG + f"source = {src}\n")
    assert cli.main(["prepare-data", "--config", str(tmp_path / "ext.ini"),
                     "--out", str(tmp_path / "o")]) == 2
    assert "train_00001" in capsys.readouterr().err


def test_training_error_exit_code(in_root, monkeypatch):
    from sketchdensity import training
    from sketchdensity.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("loss became NaN at step 0")
    monkeypatch.setattr(training, "train_mdsg", boom)
    assert cli.main(["train", "--config", "c.ini", "--phase", "train-mdsg",
                     "--checkpoint", "runs/x.ckpt"]) == 3
