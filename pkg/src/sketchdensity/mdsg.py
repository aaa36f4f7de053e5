"""Multi-density sketch generator: image plus density scalar to sketch.

``ContentGenerator`` (G_c) is a small U-Net conditioned on a constant density
mask; ``DensityEncoder`` (E_s) reads a sketch back to its density. Tensors are
NCHW float tensors; images have 3 channels in [0, 1], sketches one channel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InputError

AFD_EPS = 1e-3
KEY_EXACT_EPS = 1e-6
AFD_GAP_EPS = 1e-3


@dataclass(frozen=True)
class MdsgConfig:
    resolution: int = 64
    base_channels: int = 32
    bottleneck_channels: int = 256
    n_down: int = 4
    encoder_channels: int = 32
    encoder_layers: int = 5

    def __post_init__(self):
        if self.resolution % (2 ** self.n_down) or self.resolution < 16:
            raise InputError("resolution must be >= 16 and divisible by 2**n_down")
        if self.resolution < 2 ** self.encoder_layers:
            raise InputError("resolution too small for the density encoder depth")

    def to_dict(self):
        return asdict(self)


def make_density_mask(s, height, width):
    """Constant ``height`` x ``width`` x 1 array filled with ``s``."""
    s = float(s)
    if not 0.0 <= s <= 1.0 or math.isnan(s):
        raise InputError(f"density {s} outside [0, 1]")
    if height < 1 or width < 1:
        raise InputError("mask size must be positive")
    return np.full((height, width, 1), s, dtype=np.float32)


def _density_plane(s, like):
    """Broadcast densities ``s`` (scalar or (B,)) to a (B,1,H,W) plane."""
    b, _, h, w = like.shape
    s = torch.as_tensor(s, dtype=like.dtype, device=like.device).reshape(-1)
    if s.numel() == 1:
        s = s.expand(b)
    if s.numel() != b:
        raise InputError("one density per batch item required")
    if bool(((s < 0) | (s > 1)).any()):
        raise InputError("densities must lie in [0, 1]")
    return s.view(b, 1, 1, 1).expand(b, 1, h, w)


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2))


def _up(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.ReLU())


def _clamp_st(x):
    """Clamp to [0, 1] on the forward pass, identity gradient on the backward.

    An L1 loss behind a sigmoid saturates: sparse sketches first drive
    every logit far negative, after which ink pixels receive almost no
    gradient. With the straight-through clamp a pixel already at 0 with a
    blank target gets zero gradient while missed ink still pulls upward.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


class ContentGenerator(nn.Module):
    """G_c: (density mask, image) -> sketch, with a pooled bottleneck hook.

    A full-resolution stem feeds both the encoder and the last skip, so the
    head sees edge-sensitive features at the sketch's own resolution.
    """

    def __init__(self, config=MdsgConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(4, c, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, c, 3, 1, 1), nn.LeakyReLU(0.2))
        widths = [c * 2 ** i for i in range(config.n_down - 1)]
        widths.append(config.bottleneck_channels)
        self.down = nn.ModuleList()
        cin = c
        for wd in widths:
            self.down.append(_down(cin, wd))
            cin = wd
        self.up = nn.ModuleList()
        for i in reversed(range(config.n_down)):
            cout = widths[i - 1] if i > 0 else c
            src = widths[i] if i == config.n_down - 1 else 2 * widths[i]
            self.up.append(_up(src, cout))
        self.refine = nn.Sequential(nn.Conv2d(2 * c, c, 3, 1, 1), nn.LeakyReLU(0.2))
        self.head = nn.Conv2d(c, 1, 3, 1, 1)

    def _check(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise InputError("image batch must be N x 3 x H x W")
        r = self.config.resolution
        if tuple(image.shape[2:]) != (r, r):
            raise InputError(f"image resolution {tuple(image.shape[2:])} != model resolution {r}")

    def _encode(self, image, s):
        self._check(image)
        x = torch.cat([image, _density_plane(s, image)], dim=1)
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        return feats

    def features(self, image, s):
        """Gamma: channel-wise global average of the bottleneck, shape (B, C)."""
        return self._encode(image, s)[-1].mean(dim=(2, 3))

    def forward(self, image, s):
        feats = self._encode(image, s)
        h = feats[-1]
        for j, layer in enumerate(self.up):
            h = torch.cat([layer(h), feats[len(feats) - 2 - j]], dim=1)
        return _clamp_st(self.head(self.refine(h)) + 0.5)


class DensityEncoder(nn.Module):
    """E_s: strided reducer, global average pool and sigmoid scalar head."""

    def __init__(self, config=MdsgConfig()):
        super().__init__()
        self.config = config
        layers, cin = [], 1
        for i in range(config.encoder_layers):
            cout = config.encoder_channels * min(2 ** i, 8)
            layers.append(nn.Conv2d(cin, cout, 3, 2, 1))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def theta(self, sketch):
        """Pooled features before the scalar head."""
        r = self.config.resolution
        if sketch.dim() != 4 or sketch.shape[1] != 1 or tuple(sketch.shape[2:]) != (r, r):
            raise InputError(f"sketch batch must be N x 1 x {r} x {r}")
        return self.body(sketch).mean(dim=(2, 3))

    def forward(self, sketch):
        return torch.sigmoid(self.head(self.theta(sketch))).squeeze(1)


def generate_sketch(g_c, image, s):
    """Sketch in [0, 1] for image batch ``image`` at density ``s`` (inference)."""
    was_training = g_c.training
    g_c.eval()
    try:
        with torch.no_grad():
            return g_c(image, s)
    finally:
        g_c.train(was_training)


def encode_density(e_s, sketch):
    """Predicted density per sketch, in [0, 1]."""
    with torch.no_grad():
        return e_s(sketch)


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_sketch_recon(pred, key):
    """Mean absolute pixel difference between generated and key sketches."""
    _same_shape(pred, key)
    return (pred - key).abs().mean()


def loss_sketch_weighted(pred, key, ink_weight=1.0):
    """L1 with ink pixels of ``key`` weighted by ``ink_weight``, normalised by total weight.

    Equals :func:`loss_sketch_recon` at ``ink_weight=1``. Sketches are a few
    percent ink, so the plain mean is minimised early by an all-blank output;
    up-weighting ink makes a missed stroke cost more than a stray one.
    """
    _same_shape(pred, key)
    w = 1.0 + (ink_weight - 1.0) * (key > 0.5).to(pred.dtype)
    return (w * (pred - key).abs()).sum() / w.sum()


def loss_density_recon(s, s_hat):
    """|s - s_hat|, averaged when batched."""
    s = torch.as_tensor(s, dtype=torch.float64) if not torch.is_tensor(s) else s
    s_hat = torch.as_tensor(s_hat, dtype=s.dtype) if not torch.is_tensor(s_hat) else s_hat
    return (s.to(s_hat.dtype) - s_hat).abs().mean()


def neighbor_keys(s_prime, densities):
    """Bracketing key indices for ``s_prime``.

    Returns ``(lower, upper, key_exact, clamped)``. ``s_prime`` is clamped into
    the key range first; a value within 1e-6 of a key is flagged key-exact and
    reported as the segment starting at that key (the last key uses the final
    segment).
    """
    keys = [float(d) for d in densities]
    if len(keys) < 2:
        raise InputError("at least two key densities are needed")
    if any(b <= a for a, b in zip(keys, keys[1:])):
        raise InputError("key densities must be strictly increasing")
    s = min(max(float(s_prime), keys[0]), keys[-1])
    for i, k in enumerate(keys):
        if abs(s - k) <= KEY_EXACT_EPS:
            lower = min(i, len(keys) - 2)
            return lower, lower + 1, True, k
    for i in range(len(keys) - 1):
        if keys[i] < s < keys[i + 1]:
            return i, i + 1, False, s
    raise AssertionError("unreachable")  # pragma: no cover


def afd_weights(s_prime, s_lower, s_upper, eps=AFD_EPS):
    """Normalised inverse-distance weights (w_lower, w_upper)."""
    d_l = max(s_prime - s_lower, eps)
    d_u = max(s_upper - s_prime, eps)
    inv_l, inv_u = 1.0 / d_l, 1.0 / d_u
    w_l = inv_l / (inv_l + inv_u)
    return w_l, 1.0 - w_l


def loss_afd(gamma_pred, theta_lower, theta_upper, s_prime, s_lower, s_upper):
    """Mean |gamma_pred - (w_l * theta_lower + w_u * theta_upper)|."""
    if not s_lower < s_prime < s_upper:
        raise InputError("s_prime must lie strictly inside (s_lower, s_upper)")
    _same_shape(gamma_pred, theta_lower)
    _same_shape(gamma_pred, theta_upper)
    w_l, w_u = afd_weights(s_prime, s_lower, s_upper)
    return (gamma_pred - (w_l * theta_lower + w_u * theta_upper)).abs().mean()


def loss_afd_batch(gamma_pred, gamma_lower, gamma_upper, weights, gap_eps=AFD_GAP_EPS):
    """Batched AFD used in training, measured relative to the neighbour gap.

    ``weights`` is (B, 2) from :func:`afd_weights`. Each item's distance is
    divided by the detached mean |gamma_upper - gamma_lower|, so shrinking the
    bottleneck's response to density does not lower the loss. Gradients reach
    all three feature sets.
    """
    _same_shape(gamma_pred, gamma_lower)
    _same_shape(gamma_pred, gamma_upper)
    w = torch.as_tensor(weights, dtype=gamma_pred.dtype)
    target = w[:, :1] * gamma_lower + w[:, 1:] * gamma_upper
    gap = (gamma_upper - gamma_lower).abs().mean(dim=1, keepdim=True).detach() + gap_eps
    return ((gamma_pred - target).abs() / gap).mean()


def image_to_tensor(image):
    """H x W x 3 array -> 1 x 3 x H x W float tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError("image must be H x W x 3")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def sketch_to_tensor(sketch):
    """H x W (or H x W x 1) array -> 1 x 1 x H x W float tensor."""
    arr = np.asarray(sketch, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise InputError("sketch must be H x W")
    return torch.from_numpy(np.ascontiguousarray(arr))[None, None]
