import json

import numpy as np
import pytest
import torch

from sketchdensity import evaluation as ev
from sketchdensity.errors import InputError
from sketchdensity.mdsg import ContentGenerator, MdsgConfig
from sketchdensity.mdtn import MDTN, MdtnConfig


# ----------------------------------------------------------------- SSIM

def ssim_direct(a, b, win=7, data_range=1.0):
    """Windowed SSIM with plain loops: uniform window, sample covariance, valid windows only."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    n = win * win
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        for i in range(x.shape[0] - win + 1):
            for j in range(x.shape[1] - win + 1):
                px, py = x[i:i + win, j:j + win].ravel(), y[i:i + win, j:j + win].ravel()
                mx, my = px.sum() / n, py.sum() / n
                vx = ((px - mx) ** 2).sum() / (n - 1)
                vy = ((py - my) ** 2).sum() / (n - 1)
                cxy = ((px - mx) * (py - my)).sum() / (n - 1)
                vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identical():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert ev.ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_half_scaled_matches_direct_formula():
    img = np.random.default_rng(1).random((16, 20, 3))
    assert ev.ssim(img, 0.5 * img) == pytest.approx(ssim_direct(img, 0.5 * img), abs=1e-6)


def test_ssim_noise_pair_near_zero():
    vals = [ev.ssim(np.random.default_rng(s).random((32, 32, 3)),
                    np.random.default_rng(100 + s).random((32, 32, 3))) for s in range(10)]
    assert abs(np.mean(vals)) < 0.1


def test_ssim_shape_mismatch():
    with pytest.raises(InputError):
        ev.ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


# ----------------------------------------------------------------- edge IoU

def test_ink_iou_set_arithmetic():
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[2, 2] = a[2, 3] = 1
    b[2, 2] = b[5, 6] = 1
    assert ev.ink_iou(a, b, dilation=0) == pytest.approx(1 / 3)


def test_ink_iou_disjoint_and_empty():
    a = np.zeros((16, 16))
    b = np.zeros((16, 16))
    a[2, 2] = 1
    b[12, 12] = 1
    assert ev.ink_iou(a, b) == 0.0
    assert ev.ink_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_edge_iou_self_consistent():
    img = np.full((32, 32, 3), 0.2)
    img[8:24, 8:24] = 0.9
    sk = ev.extract_sketch(img, 0.8)
    assert sk.sum() > 0
    assert ev.edge_iou(sk, img, 0.8) == 1.0
    blank = np.zeros((32, 32))
    assert ev.edge_iou(blank, img, 0.8) == 0.0
    with pytest.raises(InputError):
        ev.edge_iou(np.zeros((16, 16)), img)


# ----------------------------------------------------------------- style distance

def test_style_distance_examples():
    img = np.random.default_rng(2).random((16, 16, 3)) * 0.8
    assert ev.style_distance(img, img) == 0.0
    assert ev.style_distance(img + 0.1, img) == pytest.approx(0.3, abs=1e-9)


def test_style_distance_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.random((12, 10, 3)), rng.random((7, 9, 3))
    want = 0.0
    for c in range(3):
        xa = [float(v) for v in a[..., c].ravel()]
        xb = [float(v) for v in b[..., c].ravel()]
        ma, mb = sum(xa) / len(xa), sum(xb) / len(xb)
        sa = (sum((v - ma) ** 2 for v in xa) / len(xa)) ** 0.5
        sb = (sum((v - mb) ** 2 for v in xb) / len(xb)) ** 0.5
        want += abs(ma - mb) + abs(sa - sb)
    assert ev.style_distance(a, b) == pytest.approx(want, abs=1e-6)


# ----------------------------------------------------------------- linearity

SCALES = ev.DEFAULT_LINEARITY_SCALES


def test_default_scales():
    assert SCALES == (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


def test_affine_features_are_perfectly_linear():
    rng = np.random.default_rng(4)
    s = np.asarray(SCALES)
    feats = np.stack([rng.normal(size=16) + np.outer(s, rng.normal(size=16)) for _ in range(5)])
    assert ev.linearity_from_features(feats, SCALES) == pytest.approx(1.0, abs=1e-9)


def test_noise_features_score_low():
    vals = [ev.linearity_from_features(np.random.default_rng(t).normal(size=(8, 7, 16)), SCALES)
            for t in range(20)]
    assert np.mean(vals) < 0.3


def test_linearity_affine_invariance():
    rng = np.random.default_rng(5)
    s = np.asarray(SCALES)
    feats = np.stack([np.outer(np.sin(3 * s) + 0.2 * rng.normal(size=7), rng.normal(size=6))
                      + rng.normal(size=(7, 6)) * 0.1 for _ in range(4)])
    base = ev.linearity_from_features(feats, SCALES)
    scale = rng.uniform(0.5, 3.0, size=6)
    assert ev.linearity_from_features(feats * scale + 7.0, SCALES) == pytest.approx(base, abs=1e-9)
    assert ev.linearity_from_features(-2.0 * feats, SCALES) == pytest.approx(base, abs=1e-9)


def test_linearity_rejects_bad_scales():
    f = np.zeros((2, 2, 3))
    with pytest.raises(InputError):
        ev.linearity_from_features(f, (0.2, 0.4))
    with pytest.raises(InputError):
        ev.linearity_from_features(np.zeros((2, 3, 3)), (0.2, 0.4, 0.3))


def test_constant_features_give_zero():
    assert ev.linearity_from_features(np.ones((3, 7, 4)), SCALES) == 0.0


def test_linearity_score_on_network():
    torch.manual_seed(0)
    g_c = ContentGenerator(MdsgConfig(resolution=32, base_channels=4, bottleneck_channels=8))
    images = torch.rand(3, 3, 32, 32)
    r2 = ev.linearity_score(g_c, images)
    assert 0.0 <= r2 <= 1.0
    assert ev.linearity_score(g_c, images) == r2
    assert ev.pc1_scores(g_c, images).shape == (3, 7)


# ----------------------------------------------------------------- harness pieces

def test_cross_pairing():
    assert ev.cross_pairing(4) == [1, 2, 3, 0]


def tiny_models():
    torch.manual_seed(0)
    g_c = ContentGenerator(MdsgConfig(resolution=32, base_channels=4, bottleneck_channels=8))
    model = MDTN(MdtnConfig(resolution=32, widths=(4, 8, 8, 8, 16), merge_widths=(4, 8, 8, 8, 8),
                            residual_blocks=1, disc_channels=4))
    return g_c, model


def test_interpolation_grid_layout():
    g_c, model = tiny_models()
    img, ref = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
    grid, cells = ev.interpolation_grid(g_c, model, img, ref)
    assert len(cells) == 8
    assert [c["scale"] for c in cells] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    assert grid.shape == (64, 8 * 32, 3)
    assert grid.min() >= 0.0 and grid.max() <= 1.0
    with pytest.raises(InputError):
        ev.interpolation_grid(g_c, model, img, ref, scales=(0.5, 0.3, 0.6))


def test_ink_monotonicity_violations():
    assert ev.ink_monotonicity_violations([[1, 2, 2, 5], [3, 1, 4, 6]]) == pytest.approx(1 / 6)
    assert ev.ink_monotonicity_violations([]) == 0.0


def test_evaluate_mdtn_and_records(tiny_data, tmp_path):
    from sketchdensity.dataset import load_split
    _, model = tiny_models()
    data = load_split(tiny_data, "eval")
    per = ev.evaluate_mdtn(model, data)
    assert len(per) == 4 and [p["id"] for p in per] == list(data.ids)
    for p in per:
        assert -1.0 <= p["ssim"] <= 1.0 and 0.0 <= p["edge_iou"] <= 1.0
    s = ev.summarize(per)
    rec = ev.MetricsRecord("full", "abc", 0, **s)
    ev.write_records([rec], tmp_path / "m.csv", tmp_path / "m.json")
    back = json.loads((tmp_path / "m.json").read_text())
    assert back[0]["variant"] == "full" and back[0]["linearity_r2"] is None
    assert (tmp_path / "m.csv").read_text().splitlines()[0].startswith("variant,")


def test_run_ablation_record_count(tiny_data, tiny_config, tmp_path):
    cfg = tiny_config.with_overrides(run={"epochs_mdtn": 1, "epochs_mdsg": 1})
    recs = ev.run_ablation(["full", "no_skip"], tiny_data, cfg, tmp_path, mdsg_settings=["recon"])
    assert [r.variant for r in recs] == ["full", "no_skip", "recon"]
    assert recs[2].mode == "linearity" and 0.0 <= recs[2].linearity_r2 <= 1.0
    assert (tmp_path / "mdtn_no_skip.ckpt").is_file() and (tmp_path / "mdsg_recon.ckpt").is_file()
