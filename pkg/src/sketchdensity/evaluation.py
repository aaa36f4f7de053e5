"""Metrics and experiment harness.

Images for the metric functions are H x W x 3 numpy arrays in [0, 1] and
sketches H x W arrays; the harness functions take torch batches from
:mod:`sketchdensity.dataset` and convert as needed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from skimage.metrics import structural_similarity

from .errors import InputError
from .sketch_extraction import (
    cld_params_for_density,
    compute_etf,
    fdog_filter,
    simplify_sketch,
)

SSIM_WINDOW = 7
DEFAULT_LINEARITY_SCALES = tuple(round(0.2 + 0.1 * i, 1) for i in range(7))
DEFAULT_GRID_SCALES = tuple(round(0.1 * i, 1) for i in range(1, 9))


def _as_hwc(x):
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
        if x.ndim == 4:
            x = x[0]
        if x.ndim == 3 and x.shape[0] in (1, 3):
            x = x.transpose(1, 2, 0)
    return np.asarray(x, dtype=np.float64)


def _as_hw(x):
    x = _as_hwc(x)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    return x


def ssim(a, b):
    """Mean SSIM with a 7x7 uniform window, data range 1, averaged over channels."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    kwargs = {"channel_axis": 2} if a.ndim == 3 else {}
    return float(structural_similarity(a, b, win_size=SSIM_WINDOW, data_range=1.0, **kwargs))


def ink_iou(a, b, dilation=1):
    """IoU of two ink sets after a square dilation of ``dilation`` px; empty union -> 1."""
    a, b = _as_hw(a) > 0.5, _as_hw(b) > 0.5
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if dilation > 0:
        st = np.ones((2 * dilation + 1,) * 2, dtype=bool)
        a, b = ndimage.binary_dilation(a, st), ndimage.binary_dilation(b, st)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def extract_sketch(image, density):
    """Re-extract a line drawing with the CLD level matching ``density``."""
    params = cld_params_for_density(density)
    image = _as_hwc(image)
    return simplify_sketch(fdog_filter(image, compute_etf(image, params), params))


def edge_iou(input_sketch, output_image, density=0.8):
    """Content-fidelity proxy: IoU of the input sketch and a sketch re-drawn from the output."""
    sketch = _as_hw(input_sketch)
    image = _as_hwc(output_image)
    if sketch.shape != image.shape[:2]:
        raise InputError("sketch and image resolutions differ")
    return ink_iou(sketch, extract_sketch(image, density))


def style_distance(output, reference):
    """L1 distance between per-channel (mean, std) statistics."""
    o, r = _as_hwc(output), _as_hwc(reference)
    o = o.reshape(-1, o.shape[-1])
    r = r.reshape(-1, r.shape[-1])
    return float(np.abs(o.mean(0) - r.mean(0)).sum() + np.abs(o.std(0) - r.std(0)).sum())


def _check_scales(scales):
    scales = np.asarray(scales, dtype=np.float64)
    if len(scales) < 3:
        raise InputError("linearity needs at least three scales")
    if np.any(np.diff(scales) <= 0):
        raise InputError("scales must be strictly increasing")
    return scales


def pc1_from_features(features):
    """First principal component score per (image, scale), shape (n_images, n_scales).

    Dimensions are standardised over all (image, scale) rows first; constant
    dimensions are dropped. Returns zeros when nothing varies.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise InputError("features must be (images, scales, dims)")
    n, s, d = feats.shape
    rows = feats.reshape(n * s, d)
    std = rows.std(0)
    keep = std > 1e-12 * max(1.0, float(np.abs(rows).max(initial=0.0)))
    if not keep.any():
        return np.zeros((n, s))
    z = (rows[:, keep] - rows[:, keep].mean(0)) / std[keep]
    _, _, vt = np.linalg.svd(z, full_matrices=False)
    return (z @ vt[0]).reshape(n, s)


def linearity_from_features(features, scales):
    """Mean per-image R^2 of the PC1 score regressed on scale."""
    scales = _check_scales(scales)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[1] != len(scales):
        raise InputError("features must be (images, scales, dims)")
    x = scales - scales.mean()
    r2 = []
    for y in pc1_from_features(feats):
        yc = y - y.mean()
        ss_tot = float(yc @ yc)
        if ss_tot <= 1e-24:
            r2.append(0.0)
            continue
        r = float(x @ yc) / math.sqrt(float(x @ x) * ss_tot)
        r2.append(r * r)
    return float(np.mean(r2))


def bottleneck_features(g_c, images, scales):
    g_c.eval()
    with torch.no_grad():
        return torch.stack([g_c.features(images, float(s)) for s in scales], dim=1).numpy()


def pc1_scores(g_c, images, scales=None):
    scales = DEFAULT_LINEARITY_SCALES if scales is None else scales
    return pc1_from_features(bottleneck_features(g_c, images, _check_scales(scales)))


def linearity_score(g_c, images, scales=DEFAULT_LINEARITY_SCALES):
    """Linearity R^2 of the pooled G_c bottleneck over ``scales``."""
    scales = _check_scales(scales)
    return linearity_from_features(bottleneck_features(g_c, images, scales), scales)


# --------------------------------------------------------------------------- harness

@dataclass
class MetricsRecord:
    variant: str
    corpus_id: str
    seed: int
    ssim: float = float("nan")
    recon_l1: float = float("nan")
    edge_iou: float = float("nan")
    style_distance: float = float("nan")
    linearity_r2: float = float("nan")
    mode: str = "reconstruction"


def write_records(records, csv_path=None, json_path=None):
    names = [f.name for f in fields(MetricsRecord)]
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in records:
                w.writerow(asdict(r))
    if json_path:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        data = [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                 for k, v in asdict(r).items()} for r in records]
        Path(json_path).write_text(json.dumps(data, indent=1, sort_keys=True))


def _translate(model, sketches, references, batch=16):
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(sketches), batch):
            out.append(model(sketches[i:i + batch], references[i:i + batch]))
    return torch.cat(out)


def cross_pairing(n):
    """Reference index for each content index: i -> (i + 1) mod n."""
    return [(i + 1) % n for i in range(n)]


def level_index(densities, density):
    return min(range(len(densities)), key=lambda i: abs(densities[i] - density))


def evaluate_mdtn(model, data, density=0.8):
    """Per-scene metrics for the key level nearest ``density``.

    Reconstruction mode uses each scene as its own reference; transfer mode
    pairs scene i's sketch with scene (i+1 mod N) as reference.
    """
    k = level_index(data.densities, density)
    sketches = data.sketches[:, k:k + 1]
    recon = _translate(model, sketches, data.images)
    pair = cross_pairing(len(data))
    transfer = _translate(model, sketches, data.images[pair])
    per = []
    for i in range(len(data)):
        src = data.images[i].permute(1, 2, 0).numpy()
        rec = recon[i].permute(1, 2, 0).numpy()
        tr = transfer[i].permute(1, 2, 0).numpy()
        ref = data.images[pair[i]].permute(1, 2, 0).numpy()
        per.append({
            "id": data.ids[i],
            "ssim": ssim(rec, src),
            "ssim_random_pair": ssim(ref, src),
            "recon_l1": float(np.abs(rec - src).mean()),
            "edge_iou": edge_iou(sketches[i, 0].numpy(), rec, density),
            "style_distance": style_distance(tr, ref),
            "transfer_edge_iou": edge_iou(sketches[i, 0].numpy(), tr, density),
        })
    return per


def summarize(per, keys=("ssim", "recon_l1", "edge_iou", "style_distance")):
    return {k: float(np.mean([p[k] for p in per])) for k in keys}


def mdsg_sketches(g_c, images, density, threshold=0.5, batch=32):
    g_c.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append((g_c(images[i:i + batch], float(density)) > threshold).float())
    return torch.cat(out)


def recon_l1_at_density(g_c, model, images, density):
    """Mean L1 of MDTN(MDSG sketch at ``density``, image) against the image."""
    sketches = mdsg_sketches(g_c, images, density)
    out = _translate(model, sketches, images)
    return float((out - images).abs().mean())


def density_encoder_error(e_s, data):
    e_s.eval()
    errs = []
    with torch.no_grad():
        for k, d in enumerate(data.densities):
            errs.append((e_s(data.sketches[:, k:k + 1]) - d).abs())
    return float(torch.cat(errs).mean())


def interpolation_grid(g_c, model, image, reference, scales=DEFAULT_GRID_SCALES):
    """Sketch row over result row, one column per scale.

    Returns ``(grid, cells)``: ``grid`` is a (2H, len(scales)*W, 3) array and
    ``cells`` lists ``{scale, ink, edge_iou, style_distance}`` per column.
    """
    scales = [float(s) for s in scales]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise InputError("scales must be strictly increasing")
    img = image if torch.is_tensor(image) else torch.from_numpy(np.asarray(image, np.float32).transpose(2, 0, 1))
    ref = reference if torch.is_tensor(reference) else torch.from_numpy(np.asarray(reference, np.float32).transpose(2, 0, 1))
    img, ref = img.reshape(1, *img.shape[-3:]), ref.reshape(1, *ref.shape[-3:])
    h, w = img.shape[-2:]
    grid = np.zeros((2 * h, len(scales) * w, 3))
    cells = []
    g_c.eval()
    model.eval()
    with torch.no_grad():
        for j, s in enumerate(scales):
            sketch = (g_c(img, s) > 0.5).float()
            out = model(sketch, ref)[0].permute(1, 2, 0).numpy()
            sk = sketch[0, 0].numpy()
            grid[:h, j * w:(j + 1) * w] = (1.0 - sk)[..., None]
            grid[h:, j * w:(j + 1) * w] = out
            cells.append({"scale": s, "ink": int(sk.sum()),
                          "edge_iou": edge_iou(sk, out, max(s, 0.2)),
                          "style_distance": style_distance(out, ref[0].permute(1, 2, 0).numpy())})
    return grid, cells


def ink_monotonicity_violations(ink_rows):
    """Fraction of adjacent column pairs where ink decreases, over all rows."""
    pairs = viol = 0
    for row in ink_rows:
        for a, b in zip(row, row[1:]):
            pairs += 1
            viol += b < a
    return viol / pairs if pairs else 0.0


def run_ablation(variants, dataset_root, base_config, out_dir, mdsg_settings=(), eval_limit=None):
    """Train and evaluate each requested variant with identical seeds.

    ``variants`` are MDTN structural variants; ``mdsg_settings`` names MDSG
    loss settings among ``recon``, ``recon+scale``, ``recon+scale+afd``.
    Returns one :class:`MetricsRecord` per variant and setting.
    """
    from .dataset import dataset_digest, load_split
    from .training import load_mdsg, load_mdtn, pretrain_mdtn, train_mdsg

    out_dir = Path(out_dir)
    corpus = dataset_digest(dataset_root)[:16]
    data = load_split(dataset_root, "eval", eval_limit)
    seed = base_config.run.seed
    records = []
    for variant in variants:
        path = out_dir / f"mdtn_{variant}.ckpt"
        if not path.is_file():
            pretrain_mdtn(base_config, dataset_root, path, variant=variant)
        model, _ = load_mdtn(path)
        per = evaluate_mdtn(model, data)
        s = summarize(per)
        records.append(MetricsRecord(variant, corpus, seed, ssim=s["ssim"], recon_l1=s["recon_l1"],
                                     edge_iou=s["edge_iou"], style_distance=s["style_distance"]))
    for setting in mdsg_settings:
        flags = MDSG_SETTINGS[setting]
        cfg = base_config.with_overrides(losses=flags)
        path = out_dir / f"mdsg_{setting.replace('+', '_')}.ckpt"
        if not path.is_file():
            train_mdsg(cfg, dataset_root, path)
        g_c, _, _ = load_mdsg(path)
        records.append(MetricsRecord(setting, corpus, seed, mode="linearity",
                                     linearity_r2=linearity_score(g_c, data.images)))
    return records


MDSG_SETTINGS = {
    "recon": {"use_scale": False, "use_afd": False},
    "recon+scale": {"use_scale": True, "use_afd": False},
    "recon+scale+afd": {"use_scale": True, "use_afd": True},
}
