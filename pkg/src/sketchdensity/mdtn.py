"""Multi-density translation network: (sketch, reference image) -> image.

Pyramid level ``i`` lives at ``H / 2**i``; level 0 is full resolution and the
deepest level is the 512-channel bottleneck. The merge chain starts at the
bottleneck and climbs back to full resolution, fusing the content level, the
style level where configured, and the upsampled previous merge output.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InputError

EPS_PROB = 1e-7


class AblationVariant(str, enum.Enum):
    FULL = "full"
    NO_SKIP = "no_skip"
    NO_MULTI_STYLE = "no_multi_style"


@dataclass(frozen=True)
class MdtnConfig:
    resolution: int = 64
    widths: tuple = (16, 32, 64, 128, 512)
    merge_widths: tuple = (16, 32, 64, 128, 256)
    n_style: int = 2
    residual_blocks: int = 4
    n_disc_scales: int = 2
    disc_channels: int = 32
    variant: str = AblationVariant.FULL.value

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "merge_widths", tuple(int(w) for w in self.merge_widths))
        object.__setattr__(self, "variant", AblationVariant(self.variant).value)
        n = len(self.widths) - 1
        if n < 1 or len(self.merge_widths) != len(self.widths):
            raise InputError("widths and merge_widths must list n_levels + 1 entries")
        # 8 px is enough for the network itself; data are held to 16 px elsewhere
        if self.resolution % (2 ** n) or self.resolution < 8:
            raise InputError("resolution must be >= 8 and divisible by 2**n_levels")
        if not 1 <= self.n_style <= n + 1:
            raise InputError("n_style must be between 1 and n_levels + 1")
        if self.n_disc_scales < 1:
            raise InputError("n_disc_scales must be positive")

    @property
    def n_levels(self):
        return len(self.widths) - 1

    def content_levels(self):
        """Pyramid levels whose content code reaches a merge layer."""
        if self.variant == AblationVariant.NO_SKIP.value:
            return {self.n_levels}
        return set(range(self.n_levels + 1))

    def style_levels(self):
        """Pyramid levels whose style code reaches a merge layer."""
        n_style = 1 if self.variant == AblationVariant.NO_MULTI_STYLE.value else self.n_style
        return set(range(self.n_levels + 1 - n_style, self.n_levels + 1))

    def to_dict(self):
        d = asdict(self)
        d["widths"], d["merge_widths"] = list(self.widths), list(self.merge_widths)
        return d


class PyramidEncoder(nn.Module):
    """Level 0 keeps full resolution; each further level halves it."""

    def __init__(self, in_channels, widths, resolution):
        super().__init__()
        self.in_channels = in_channels
        self.resolution = resolution
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1), nn.LeakyReLU(0.2))
        self.downs = nn.ModuleList(
            nn.Sequential(nn.Conv2d(a, b, 4, 2, 1), nn.LeakyReLU(0.2))
            for a, b in zip(widths, widths[1:]))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise InputError(f"expected N x {self.in_channels} x H x W input")
        if tuple(x.shape[2:]) != (self.resolution, self.resolution):
            raise InputError(f"input resolution {tuple(x.shape[2:])} != {self.resolution}")
        feats = [self.stem(x)]
        for layer in self.downs:
            feats.append(layer(feats[-1]))
        return feats


class MergeLayer(nn.Module):
    """Concatenate the available inputs, fuse with a 3x3 conv and LeakyReLU."""

    def __init__(self, content_ch, style_ch, prev_ch, out_ch):
        super().__init__()
        self.expects = (content_ch > 0, style_ch > 0, prev_ch > 0)
        self.fuse = nn.Conv2d(content_ch + style_ch + prev_ch, out_ch, 3, 1, 1)

    def forward(self, y=None, z=None, m_prev=None):
        parts = []
        size = None
        for name, t, want in (("content", y, self.expects[0]), ("style", z, self.expects[1])):
            if want != (t is not None):
                raise InputError(f"merge layer {'requires' if want else 'does not take'} {name}")
            if t is not None:
                if size is not None and tuple(t.shape[2:]) != size:
                    raise InputError("content and style maps differ in spatial size")
                size = tuple(t.shape[2:])
                parts.append(t)
        if self.expects[2] != (m_prev is not None):
            raise InputError("merge layer previous-input mismatch")
        if m_prev is not None:
            up = F.interpolate(m_prev, scale_factor=2, mode="nearest")
            if size is not None and tuple(up.shape[2:]) != size:
                raise InputError("upsampled previous merge does not match level size")
            parts.append(up)
        return F.leaky_relu(self.fuse(torch.cat(parts, dim=1)), 0.2)


def merge_layer(layer, y, z=None, m_prev=None):
    return layer(y, z, m_prev)


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1), nn.LeakyReLU(0.2), nn.Conv2d(ch, ch, 3, 1, 1))

    def forward(self, x):
        return F.leaky_relu(x + self.body(x), 0.2)


class Generator(nn.Module):
    """Merge chain, residual trunk G_R and output layer."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        n = config.n_levels
        content, style = config.content_levels(), config.style_levels()
        self.merges = nn.ModuleDict()
        for level in range(n, -1, -1):
            self.merges[str(level)] = MergeLayer(
                config.widths[level] if level in content else 0,
                config.widths[level] if level in style else 0,
                config.merge_widths[level + 1] if level < n else 0,
                config.merge_widths[level])
        self.trunk = nn.Sequential(*[ResidualBlock(config.merge_widths[0])
                                     for _ in range(config.residual_blocks)])
        self.output = nn.Conv2d(config.merge_widths[0], 3, 3, 1, 1)

    def forward(self, y, z):
        n = self.config.n_levels
        if len(y) != n + 1 or len(z) != n + 1:
            raise InputError("feature pyramids must have n_levels + 1 entries")
        content, style = self.config.content_levels(), self.config.style_levels()
        m = None
        for level in range(n, -1, -1):
            m = self.merges[str(level)](
                y[level] if level in content else None,
                z[level] if level in style else None,
                m)
        return torch.sigmoid(self.output(self.trunk(m)))


class PatchDiscriminator(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(4, ch, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(ch, 2 * ch, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * ch, 1, 3, 1, 1))

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class Discriminator(nn.Module):
    """Conditional multi-scale discriminator over (image, sketch) pairs."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(PatchDiscriminator(config.disc_channels)
                                    for _ in range(config.n_disc_scales))

    def forward(self, image, sketch):
        if image.shape[0] != sketch.shape[0] or tuple(image.shape[2:]) != tuple(sketch.shape[2:]):
            raise InputError("image and sketch batches must match in size")
        x = torch.cat([image, sketch], dim=1)
        out = []
        for i, d in enumerate(self.scales):
            out.append(d(x))
            if i + 1 < len(self.scales):
                x = F.avg_pool2d(x, 2)
        return out


class FeatureExtractor(nn.Module):
    """Fixed random conv stack standing in for a perceptual backbone."""

    def __init__(self, seed=0, channels=(16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        layers, cin = [], 3
        for i, c in enumerate(channels):
            conv = nn.Conv2d(cin, c, 3, 2 if i else 1, 1)
            with torch.no_grad():
                bound = (6.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.zero_()
            layers.append(conv)
            cin = c
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class MDTN(nn.Module):
    def __init__(self, config=MdtnConfig()):
        super().__init__()
        self.config = config
        self.content_encoder = PyramidEncoder(1, config.widths, config.resolution)
        self.appearance_encoder = PyramidEncoder(3, config.widths, config.resolution)
        self.generator = Generator(config)

    def forward(self, sketch, reference):
        return self.generator(self.content_encoder(sketch), self.appearance_encoder(reference))


def encode_content(model, sketch):
    return model.content_encoder(sketch)


def encode_appearance(model, image):
    return model.appearance_encoder(image)


def generate(model, y, z):
    return model.generator(y, z)


def reconstruct(model, sketch, reference):
    """Inference-mode translation of ``sketch`` with the style of ``reference``."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(sketch, reference)
    finally:
        model.train(was)


def discriminate(disc, image, sketch):
    return disc(image, sketch)


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_image_recon(x, x_hat):
    _same_shape(x, x_hat)
    return (x - x_hat).abs().mean()


def loss_feature(x, x_hat, phi):
    """Sum over extractor layers of the mean absolute feature difference."""
    _same_shape(x, x_hat)
    fx, fy = phi(x), phi(x_hat)
    if torch.is_tensor(fx):
        fx, fy = [fx], [fy]
    return sum((a - b).abs().mean() for a, b in zip(fx, fy))


def loss_adversarial(real_scores, fake_scores):
    """(d_loss, g_loss) for cross-entropy GAN terms averaged over scales."""
    if len(real_scores) != len(fake_scores) or not real_scores:
        raise InputError("score lists must be non-empty and of equal length")
    d_terms, g_terms = [], []
    for r, f in zip(real_scores, fake_scores):
        r = r.clamp(EPS_PROB, 1 - EPS_PROB)
        f = f.clamp(EPS_PROB, 1 - EPS_PROB)
        d_terms.append(-(torch.log(r).mean() + torch.log(1 - f).mean()))
        g_terms.append(-torch.log(f).mean())
    return torch.stack(d_terms).mean(), torch.stack(g_terms).mean()


@dataclass(frozen=True)
class MdtnLossWeights:
    recon: float = 10.0
    feature: float = 1.0
    adversarial: float = 1.0


def generator_objective(image, fake, fake_scores, phi, weights=MdtnLossWeights()):
    """Weighted generator loss for an already generated ``fake``."""
    recon = loss_image_recon(image, fake)
    feat = loss_feature(image, fake, phi)
    g_adv = torch.stack([-torch.log(f.clamp(EPS_PROB, 1 - EPS_PROB)).mean()
                         for f in fake_scores]).mean()
    total = weights.recon * recon + weights.feature * feat + weights.adversarial * g_adv
    return total, {"recon": recon, "feature": feat, "g_adv": g_adv}


def generator_loss(model, disc, phi, sketch, image, weights=MdtnLossWeights(), reference=None):
    """Weighted generator objective; returns (total, parts dict, fake image)."""
    fake = model(sketch, image if reference is None else reference)
    total, parts = generator_objective(image, fake, disc(fake, sketch), phi, weights)
    return total, parts, fake
