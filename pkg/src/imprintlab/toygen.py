"""Small trained generative reconstructors.

Each generator handle bundles a convolutional encoder/decoder pair (4-channel
latent at 1/4 spatial resolution) and an optional latent denoiser driven by a
100-step variance-preserving noise schedule. Reconstruction is a partial
noise-then-denoise round trip in latent space; its residual against the
original latent is the generator's imprint.

Families are diversified by channel width, nonlinearity, latent
regularization weight, and seed, so their imprint statistics differ while the
latent shape stays shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import artifacts, nn
from .corpus import Image, LabeledImageSet
from .errors import CapabilityError, ConfigurationError, TrainingFailure

LATENT_CHANNELS = 4
SCHEDULE_STEPS = 100
DEFAULT_MSE_CEILING = 0.01

ARCH_SPECS = {
    "w12-relu": dict(width=12, act="relu", latent_reg=1e-4),
    "w12-tanh": dict(width=12, act="tanh", latent_reg=3e-4),
    "w16-relu": dict(width=16, act="relu", latent_reg=1e-4),
    "w16-leaky": dict(width=16, act="leaky_relu", latent_reg=2e-4),
    "w16-silu": dict(width=16, act="silu", latent_reg=1e-4),
    "w20-tanh": dict(width=20, act="tanh", latent_reg=2e-4),
    "w20-leaky": dict(width=20, act="leaky_relu", latent_reg=1e-4),
    "w24-silu": dict(width=24, act="silu", latent_reg=3e-4),
}

# default family order: index 0 trains the "known fakes", the tail entries
# serve as simulator members or held-out generators per experiment config
FAMILY_PLAN = ["w16-relu", "w12-tanh", "w20-leaky", "w24-silu",
               "w16-silu", "w12-relu", "w20-tanh", "w16-leaky"]


@dataclass
class ReconstructionSettings:
    steps: int = 8
    strength: float = 0.1
    guidance: float = 0.0  # accepted for config parity; the denoiser is unconditional

    def validate(self):
        if self.steps < 1:
            raise ConfigurationError("reconstruction steps must be >= 1")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigurationError("reconstruction strength must lie in [0, 1]")


def noise_schedule(steps=SCHEDULE_STEPS):
    """alpha_bar[t] for t = 0..steps, with alpha_bar[0] = 1."""
    betas = np.linspace(1e-4, 0.02, steps)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def center_pixels(x):
    """[0, 1] pixels -> [-1, 1] network inputs."""
    return (x - 0.5) * 2.0


def uncenter_pixels(x):
    return x * 0.5 + 0.5


_ALPHA_BAR = noise_schedule()


def _act(name):
    return nn.ACTIVATIONS[name]()


def _build_encoder(width, act, rng, dtype):
    # lossless 4x space-to-depth packing, then convolutions at latent
    # resolution only; inputs are pre-centered by the handle
    return nn.Sequential(
        nn.SpaceToDepth(4),
        nn.Conv2d(48, 2 * width, 3, rng, dtype=dtype), _act(act),
        nn.Conv2d(2 * width, 2 * width, 3, rng, dtype=dtype), _act(act),
        nn.Conv2d(2 * width, LATENT_CHANNELS, 3, rng, dtype=dtype),
    )


def _build_decoder(width, act, rng, dtype):
    # mirror of the encoder: convolutions at latent resolution, one 4x
    # sub-pixel rearrangement; output is linear (decode un-centers and clips)
    return nn.Sequential(
        nn.Conv2d(LATENT_CHANNELS, 2 * width, 3, rng, dtype=dtype), _act(act),
        nn.Conv2d(2 * width, 2 * width, 3, rng, dtype=dtype), _act(act),
        nn.Conv2d(2 * width, 48, 3, rng, dtype=dtype),
        nn.DepthToSpace(4),
    )


def _build_denoiser(width, act, rng, dtype):
    # +1 input channel carries the normalized timestep as a constant plane
    return nn.Sequential(
        nn.Conv2d(LATENT_CHANNELS + 1, width, 3, rng, dtype=dtype), _act(act),
        nn.Conv2d(width, width, 3, rng, dtype=dtype), _act(act),
        nn.Conv2d(width, LATENT_CHANNELS, 3, rng, dtype=dtype),
    )


class GeneratorHandle:
    """Immutable-after-training reconstructor; see module docstring."""

    def __init__(self, generator_id, arch_tag, resolution, encoder, decoder,
                 denoiser=None, provenance=None):
        if arch_tag not in ARCH_SPECS:
            raise ConfigurationError(f"unsupported arch_tag {arch_tag!r}")
        self.generator_id = generator_id
        self.arch_tag = arch_tag
        self.resolution = resolution
        self.encoder = encoder
        self.decoder = decoder
        self.denoiser = denoiser
        self.provenance = dict(provenance or {})

    @property
    def latent_shape(self):
        return (LATENT_CHANNELS, self.resolution // 4, self.resolution // 4)

    # -- batched numpy front ends ------------------------------------------

    def encode_batch(self, pixels):
        """(B, H, W, 3) float array in [0,1] -> (B, C, h, w) latents."""
        if pixels.shape[1] != self.resolution or pixels.shape[2] != self.resolution:
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, "
                f"got {pixels.shape[1]}x{pixels.shape[2]}")
        x = np.ascontiguousarray(pixels.transpose(0, 3, 1, 2), dtype=np.float32)
        with nn.no_grad():
            return self.encoder(nn.Tensor(center_pixels(x))).data

    def decode_batch(self, latents):
        if tuple(latents.shape[1:]) != self.latent_shape:
            raise ValueError(
                f"expected latents {self.latent_shape}, got {tuple(latents.shape[1:])}")
        with nn.no_grad():
            out = self.decoder(nn.Tensor(latents.astype(np.float32))).data
        return np.clip(uncenter_pixels(out).transpose(0, 2, 3, 1), 0.0, 1.0)

    def reconstruct_batch(self, latents, settings, rng):
        settings.validate()
        if self.denoiser is None:
            raise CapabilityError(
                f"generator {self.generator_id} has no denoiser")
        if tuple(latents.shape[1:]) != self.latent_shape:
            raise ValueError(
                f"expected latents {self.latent_shape}, got {tuple(latents.shape[1:])}")
        z = latents.astype(np.float32)
        if settings.strength == 0.0:
            return z.copy()
        t0 = max(1, int(round(settings.strength * SCHEDULE_STEPS)))
        eps = rng.standard_normal(z.shape).astype(np.float32)
        z_t = (np.sqrt(_ALPHA_BAR[t0]) * z
               + np.sqrt(1.0 - _ALPHA_BAR[t0]) * eps).astype(np.float32)
        ladder = np.unique(np.round(np.linspace(0, t0, settings.steps + 1))
                           .astype(int))[::-1]
        with nn.no_grad():
            for t_cur, t_next in zip(ladder[:-1], ladder[1:]):
                z0_hat = self._denoise(z_t, t_cur)
                if t_next == 0:
                    z_t = z0_hat
                    break
                a_cur, a_next = _ALPHA_BAR[t_cur], _ALPHA_BAR[t_next]
                eps_hat = (z_t - np.sqrt(a_cur) * z0_hat) / np.sqrt(1.0 - a_cur)
                z_t = (np.sqrt(a_next) * z0_hat
                       + np.sqrt(1.0 - a_next) * eps_hat).astype(np.float32)
        return z_t

    def _denoise(self, z_t, t):
        b = z_t.shape[0]
        plane = np.full((b, 1) + z_t.shape[2:], t / SCHEDULE_STEPS, dtype=np.float32)
        x = np.concatenate([z_t, plane], axis=1)
        return self.denoiser(nn.Tensor(x)).data

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        meta = {
            "generator_id": self.generator_id,
            "arch_tag": self.arch_tag,
            "resolution": self.resolution,
            "has_denoiser": self.denoiser is not None,
            "provenance": self.provenance,
        }
        arrays = {}
        for part, module in (("encoder", self.encoder), ("decoder", self.decoder),
                             ("denoiser", self.denoiser)):
            if module is None:
                continue
            for name, value in module.state_dict().items():
                arrays[f"{part}/{name}"] = value
        artifacts.save_container(path, "generator", meta, arrays)


def load_generator(path):
    _, meta, arrays = artifacts.load_container(path, expected_kind="generator")
    spec = ARCH_SPECS[meta["arch_tag"]]
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    encoder = _build_encoder(spec["width"], spec["act"], rng, np.float32)
    decoder = _build_decoder(spec["width"], spec["act"], rng, np.float32)
    denoiser = (_build_denoiser(spec["width"], spec["act"], rng, np.float32)
                if meta["has_denoiser"] else None)
    handle = GeneratorHandle(meta["generator_id"], meta["arch_tag"],
                             meta["resolution"], encoder, decoder, denoiser,
                             meta["provenance"])
    for part, module in (("encoder", encoder), ("decoder", decoder),
                         ("denoiser", denoiser)):
        if module is None:
            continue
        state = {name.split("/", 1)[1]: arr for name, arr in arrays.items()
                 if name.startswith(part + "/")}
        module.load_state_dict(state)
    return handle


# -- spec-level single-image operations ----------------------------------------


def encode(gen, img):
    return gen.encode_batch(img.pixels[None])[0]


def decode(gen, z):
    return gen.decode_batch(z[None])[0]


def reconstruct_latent(gen, z, settings, rng):
    return gen.reconstruct_batch(z[None], settings, rng)[0]


# -- training --------------------------------------------------------------------


def _pixel_array(images):
    return np.stack([img.pixels for img in images]).astype(np.float32)


def train_autoencoder(images, arch_tag, seed, epochs, lr=2e-3, batch_size=64,
                      mse_ceiling=DEFAULT_MSE_CEILING, generator_id=None,
                      holdout_fraction=0.1):
    """Train one codec; raises TrainingFailure if held-out MSE stays above
    the ceiling."""
    if arch_tag not in ARCH_SPECS:
        raise ConfigurationError(f"unsupported arch_tag {arch_tag!r}")
    reals = [img for img in images.items if img.label == "real"]
    if len(reals) < 64:
        raise ConfigurationError("need at least 64 training images")
    spec = ARCH_SPECS[arch_tag]
    resolution = reals[0].pixels.shape[0]

    seq = np.random.SeedSequence(seed)
    init_rng, shuffle_rng = [np.random.default_rng(s) for s in seq.spawn(2)]
    encoder = _build_encoder(spec["width"], spec["act"], init_rng, np.float32)
    decoder = _build_decoder(spec["width"], spec["act"], init_rng, np.float32)

    pixels = _pixel_array(reals)
    n_val = max(1, int(round(len(reals) * holdout_fraction)))
    order = shuffle_rng.permutation(len(reals))
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_all = center_pixels(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2)))

    params = encoder.params() + decoder.params()
    opt = nn.AdamW(params, lr=lr, weight_decay=1e-5)
    reg = spec["latent_reg"]
    for _ in range(epochs):
        for start in range(0, len(train_idx), batch_size):
            idx = train_idx[start:start + batch_size]
            x = nn.Tensor(x_all[idx])
            z = encoder(x)
            recon = decoder(z)
            loss = nn.tmean(nn.square(recon - x)) + reg * nn.tmean(nn.square(z))
            opt.zero_grad()
            loss.backward()
            opt.step()
        train_idx = shuffle_rng.permutation(train_idx)

    with nn.no_grad():
        xv = nn.Tensor(x_all[val_idx])
        recon = np.clip(uncenter_pixels(decoder(encoder(xv)).data), 0.0, 1.0)
        val_mse = float(np.mean((recon - uncenter_pixels(xv.data)) ** 2))
    if val_mse > mse_ceiling:
        raise TrainingFailure(
            f"autoencoder {arch_tag} did not converge: held-out MSE "
            f"{val_mse:.5f} > ceiling {mse_ceiling}", final_loss=val_mse)

    gid = generator_id or f"gen-{arch_tag}-s{seed}"
    provenance = {"seed": seed, "epochs": epochs, "arch_tag": arch_tag,
                  "val_mse": val_mse, "latent_reg": reg, "n_train": len(reals)}
    return GeneratorHandle(gid, arch_tag, resolution, encoder, decoder,
                           provenance=provenance)


def train_denoiser(handle, images, seed, epochs, lr=2e-3, batch_size=128):
    """Attach a latent denoiser (z0 prediction over the noise schedule)."""
    spec = ARCH_SPECS[handle.arch_tag]
    seq = np.random.SeedSequence(seed)
    init_rng, noise_rng = [np.random.default_rng(s) for s in seq.spawn(2)]
    denoiser = _build_denoiser(spec["width"], spec["act"], init_rng, np.float32)

    reals = [img for img in images.items if img.label == "real"]
    latents = handle.encode_batch(_pixel_array(reals))
    n = latents.shape[0]
    params = denoiser.params()
    opt = nn.AdamW(params, lr=lr, weight_decay=1e-5)
    for _ in range(epochs):
        order = noise_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            z0 = latents[idx]
            t = noise_rng.integers(1, SCHEDULE_STEPS + 1, size=len(idx))
            a = _ALPHA_BAR[t][:, None, None, None].astype(np.float32)
            eps = noise_rng.standard_normal(z0.shape).astype(np.float32)
            z_t = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps
            plane = (t / SCHEDULE_STEPS)[:, None, None, None] * np.ones(
                (len(idx), 1) + z0.shape[2:], dtype=np.float32)
            x = nn.Tensor(np.concatenate([z_t, plane], axis=1).astype(np.float32))
            loss = nn.tmean(nn.square(denoiser(x) - nn.Tensor(z0)))
            opt.zero_grad()
            loss.backward()
            opt.step()

    out = GeneratorHandle(handle.generator_id, handle.arch_tag, handle.resolution,
                          handle.encoder, handle.decoder, denoiser,
                          dict(handle.provenance, denoiser_seed=seed,
                               denoiser_epochs=epochs))
    return out


def make_generator_family(m, base_corpus, seed, epochs=14, denoiser_epochs=40,
                          arch_plan=None, mse_ceiling=DEFAULT_MSE_CEILING):
    """Train m reconstructors with distinct arch tags and sub-seeds."""
    if m < 1:
        raise ConfigurationError("family size must be >= 1")
    plan = arch_plan or FAMILY_PLAN
    if m > len(plan):
        raise ConfigurationError(
            f"family size {m} exceeds the {len(plan)}-entry arch plan")
    seq = np.random.SeedSequence(seed)
    sub_seeds = [int(s.generate_state(1)[0]) for s in seq.spawn(m)]
    handles = []
    for i in range(m):
        tag = plan[i]
        handle = train_autoencoder(base_corpus, tag, sub_seeds[i], epochs,
                                   mse_ceiling=mse_ceiling,
                                   generator_id=f"g{i}-{tag}")
        handle = train_denoiser(handle, base_corpus, sub_seeds[i] + 1,
                                denoiser_epochs)
        handles.append(handle)
    shapes = {h.latent_shape for h in handles}
    if len(shapes) != 1:
        raise ConfigurationError(f"family latent shapes diverge: {shapes}")
    return handles


def generate_fakes(gen, reals, settings, rng, batch_size=256):
    """Reconstruct real images through a generator to produce its fakes."""
    items = []
    pixels = _pixel_array(reals.items if isinstance(reals, LabeledImageSet)
                          else reals)
    sources = (reals.items if isinstance(reals, LabeledImageSet) else reals)
    for start in range(0, len(pixels), batch_size):
        chunk = pixels[start:start + batch_size]
        z = gen.encode_batch(chunk)
        z_rec = gen.reconstruct_batch(z, settings, rng)
        out = gen.decode_batch(z_rec)
        for j, img in enumerate(sources[start:start + len(chunk)]):
            items.append(Image(out[j].astype(np.float32),
                               f"{gen.generator_id}:{img.source_id}",
                               "fake", gen.generator_id))
    return LabeledImageSet(items)
