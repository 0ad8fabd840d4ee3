"""Hybrid-feature discriminator.

Three feature branches feed an MLP head: a learned noise-trace extractor
(input minus a learned low-pass prediction, then a convolutional feature
head), a fixed DCT radial-band energy transform, and a small semantic
embedding network. Auxiliary objectives shape the noise branch: a
difference-aware regression from noise-feature differences to latent
differences, and a supervised contrastive loss separating real from fake
features.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.fft

from . import artifacts, nn
from .errors import PreconditionError

FREQ_LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_diff: float = 0.2
    lambda_contrast: float = 1.0
    alpha: float = 0.2

    def validate(self):
        if min(self.lambda_diff, self.lambda_contrast, self.alpha) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DetectorConfig:
    resolution: int = 32
    d_noise: int = 128
    d_freq: int = 32
    d_sem: int = 128
    latent_shape: tuple = (4, 8, 8)
    enable_noise: bool = True
    enable_freq: bool = True
    enable_sem: bool = True
    temperature: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if not (self.enable_noise or self.enable_freq or self.enable_sem):
            raise ValueError("at least one feature branch must be enabled")
        self.loss_weights.validate()


# -- frequency branch (fixed transform) -----------------------------------------

_band_cache = {}


def _band_index(h, w, d_bands):
    key = (h, w, d_bands)
    if key not in _band_cache:
        u = np.arange(h)[:, None] / max(h - 1, 1)
        v = np.arange(w)[None, :] / max(w - 1, 1)
        radius = np.sqrt(u * u + v * v) / np.sqrt(2.0)
        idx = np.minimum((radius * d_bands).astype(np.int64), d_bands - 1)
        idx[0, 0] = -1  # DC excluded from every band
        _band_cache[key] = idx.ravel()
    return _band_cache[key]


def freq_features_batch(pixels, d_bands=32):
    """(B, H, W, 3) -> (B, d_bands) log mean-energy per DCT radial band."""
    luma = pixels.mean(axis=3)
    coef = scipy.fft.dctn(luma, axes=(1, 2), norm="ortho")
    power = (coef * coef).reshape(len(pixels), -1)
    idx = _band_index(pixels.shape[1], pixels.shape[2], d_bands)
    keep = idx >= 0
    bins = idx[keep]
    counts = np.bincount(bins, minlength=d_bands).astype(np.float64)
    sums = np.stack([np.bincount(bins, weights=p[keep], minlength=d_bands)
                     for p in power])
    energy = sums / np.maximum(counts, 1.0)
    return np.log(energy + FREQ_LOG_FLOOR).astype(np.float32)


def freq_features(pixels, d_bands=32):
    return freq_features_batch(pixels[None], d_bands)[0]


# -- learned branches ------------------------------------------------------------


class NoiseBranch(nn.Module):
    """5-layer convolutional residual extractor, pooled to d_out."""

    def __init__(self, rng, d_out=128, dtype=nn.DEFAULT_DTYPE):
        self.lowpass = nn.Conv2d(3, 3, 5, rng, dtype=dtype)
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 12, 3, rng, dtype=dtype), nn.ReLU(),
            nn.Conv2d(12, 24, 3, rng, stride=2, dtype=dtype), nn.ReLU(),
            nn.Conv2d(24, 48, 3, rng, stride=2, dtype=dtype), nn.ReLU(),
            nn.Conv2d(48, d_out, 3, rng, stride=2, dtype=dtype), nn.ReLU(),
        )
        self.pool = nn.GlobalAvgPool()

    def forward(self, x, return_map=False):
        residual = x - self.lowpass(x)
        fmap = self.trunk(residual)
        pooled = self.pool(fmap)
        if return_map:
            return pooled, fmap
        return pooled


class SemanticBranch(nn.Module):
    def __init__(self, rng, d_out=128, dtype=nn.DEFAULT_DTYPE):
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 16, 3, rng, stride=2, dtype=dtype), nn.ReLU(),
            nn.Conv2d(16, 32, 3, rng, stride=2, dtype=dtype), nn.ReLU(),
            nn.Conv2d(32, 64, 3, rng, stride=2, dtype=dtype), nn.ReLU(),
        )
        self.pool = nn.GlobalAvgPool()
        self.proj = nn.Linear(64, d_out, rng, dtype=dtype)

    def forward(self, x):
        return self.proj(self.pool(self.trunk(x)))


class Projector(nn.Module):
    """Maps noise-feature differences to the flattened latent difference."""

    def __init__(self, rng, d_in, latent_size, hidden=128, dtype=nn.DEFAULT_DTYPE):
        self.fc1 = nn.Linear(d_in, hidden, rng, dtype=dtype)
        self.fc2 = nn.Linear(hidden, latent_size, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(nn.relu(self.fc1(x)))


class Head(nn.Module):
    def __init__(self, rng, d_in, hidden=128, dtype=nn.DEFAULT_DTYPE):
        self.fc1 = nn.Linear(d_in, hidden, rng, dtype=dtype)
        self.fc2 = nn.Linear(hidden, 1, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(nn.relu(self.fc1(x)))


class DetectorModel(nn.Module):
    """Branches + head; feature concatenation order is noise, freq, sem."""

    def __init__(self, config, rng, dtype=nn.DEFAULT_DTYPE):
        config.validate()
        self.config = config
        if config.enable_noise:
            self.noise = NoiseBranch(rng, config.d_noise, dtype)
            self.projector = Projector(rng, config.d_noise,
                                       int(np.prod(config.latent_shape)),
                                       dtype=dtype)
        if config.enable_sem:
            self.sem = SemanticBranch(rng, config.d_sem, dtype)
        self.head = Head(rng, self.feature_dim, dtype=dtype)

    @property
    def feature_dim(self):
        c = self.config
        return (c.d_noise * c.enable_noise + c.d_freq * c.enable_freq
                + c.d_sem * c.enable_sem)

    # -- forward paths -------------------------------------------------------

    def noise_features(self, x, return_map=False):
        if not self.config.enable_noise:
            raise PreconditionError("noise branch is disabled in this config")
        return self.noise(x, return_map=return_map)

    def features(self, x, freq):
        """x: (B,3,H,W) Tensor; freq: (B,d_freq) array -> (B, D) Tensor."""
        parts = []
        if self.config.enable_noise:
            parts.append(self.noise(x))
        if self.config.enable_freq:
            parts.append(nn.Tensor(np.asarray(freq, dtype=x.dtype)))
        if self.config.enable_sem:
            parts.append(self.sem(x))
        return parts[0] if len(parts) == 1 else nn.concat(parts, axis=1)

    def logits(self, x, freq):
        return self.head(self.features(x, freq))

    def predict_proba(self, pixels):
        """(B,H,W,3) float array in [0,1] -> (B,) probability of fake."""
        if pixels.shape[1] != self.config.resolution:
            raise ValueError(f"expected resolution {self.config.resolution}, "
                             f"got {pixels.shape[1]}")
        x = np.ascontiguousarray(pixels.transpose(0, 3, 1, 2), dtype=np.float32)
        freq = (freq_features_batch(pixels, self.config.d_freq)
                if self.config.enable_freq else None)
        with nn.no_grad():
            logit = self.logits(nn.Tensor(x), freq)
        return _sigmoid(logit.data[:, 0])

    def discriminate(self, hybrid):
        """Probability of fake from an already-assembled hybrid feature."""
        hybrid = np.asarray(hybrid, dtype=np.float32)
        if hybrid.shape[-1] != self.feature_dim:
            raise ValueError(f"hybrid feature must have {self.feature_dim} "
                             f"dims, got {hybrid.shape[-1]}")
        with nn.no_grad():
            logit = self.head(nn.Tensor(hybrid.reshape(1, -1)))
        return float(_sigmoid(logit.data[0, 0]))

    # -- persistence -----------------------------------------------------------

    def save(self, path, extra_meta=None):
        cfg = asdict(self.config)
        cfg["latent_shape"] = list(self.config.latent_shape)
        meta = {"config": cfg}
        meta.update(extra_meta or {})
        artifacts.save_container(path, "detector", meta, self.state_dict())


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def load_detector(path):
    _, meta, arrays = artifacts.load_container(path, "detector")
    cfg_dict = dict(meta["config"])
    cfg_dict["latent_shape"] = tuple(cfg_dict["latent_shape"])
    cfg_dict["loss_weights"] = LossWeights(**cfg_dict["loss_weights"])
    config = DetectorConfig(**cfg_dict)
    model = DetectorModel(config, np.random.default_rng(0))
    model.load_state_dict(arrays)
    return model, meta


def classify(prob, threshold=0.5):
    """Decision rule: ties at the threshold go to fake."""
    return "fake" if prob >= threshold else "real"


# -- losses -----------------------------------------------------------------------


def loss_diff(delta_f, delta_z, projector):
    """MSE between the projected noise difference and the latent difference.

    delta_f: (B, d_noise) Tensor; delta_z: (B, C, h, w) or (B, L) array.
    """
    pred = projector(delta_f)
    target = np.asarray(delta_z, dtype=pred.dtype).reshape(pred.shape[0], -1)
    if target.shape != pred.shape:
        raise ValueError(f"latent difference shape {target.shape} does not "
                         f"match projector output {pred.shape}")
    return nn.tmean(nn.square(pred - nn.Tensor(target)))


def loss_contrast(real_features, fake_features, temperature=0.1):
    """Supervised contrastive loss on L2-normalized features.

    Anchors average the log-probability of their same-label positives
    against all other batch members; anchors without positives are skipped.
    """
    real_features = nn.astensor(real_features)
    fake_features = nn.astensor(fake_features)
    n_real, n_fake = real_features.shape[0], fake_features.shape[0]
    if n_real < 2 or n_fake < 1:
        raise PreconditionError(
            f"contrastive batch needs >= 2 reals and >= 1 fake, got "
            f"{n_real}/{n_fake}")
    n = n_real + n_fake
    z = nn.l2_normalize(nn.concat([real_features, fake_features], axis=0))
    sim = nn.mul(nn.matmul(z, z.T), 1.0 / temperature)
    eye = np.eye(n, dtype=sim.dtype)
    sim = sim + nn.Tensor(-1e9 * eye)
    log_prob = sim - nn.logsumexp_rows(sim)

    labels = np.array([0] * n_real + [1] * n_fake)
    positives = ((labels[:, None] == labels[None, :]).astype(sim.dtype)
                 * (1.0 - eye))
    pos_counts = positives.sum(axis=1)
    valid = pos_counts > 0
    coeff = np.where(valid, 1.0 / np.maximum(pos_counts, 1.0), 0.0)
    coeff = coeff / max(valid.sum(), 1)
    weights = positives * coeff[:, None]
    return nn.mul(nn.tsum(nn.mul(log_prob, nn.Tensor(weights))), -1.0)


def loss_total(l_bce, l_diff, l_contrast, weights):
    """Weighted sum of the detection loss and the auxiliary losses."""
    return l_bce + weights.alpha * (weights.lambda_diff * l_diff
                                    + weights.lambda_contrast * l_contrast)
