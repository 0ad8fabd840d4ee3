"""Latent imprint statistics: collection, Laplace modeling, fusion, sampling,
and training-data expansion.

An imprint is the latent difference between an image's encoding and its
generative reconstruction. Stacking imprints over n real images gives an
empirical batch; per-element moment matching yields a Laplace field
(mu = mean over n, b = population-sigma / sqrt(2), floored at epsilon).
Batches from several generators fuse by an index-wise weighted average
before refitting, and sampled perturbations turn real images into simulated
fakes for data expansion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import artifacts, toygen
from .corpus import Image, LabeledImageSet
from .errors import AlignmentError, EmptyDatasetError, PolicyError, PreconditionError

EPSILON_B = 1e-6


@dataclass
class ImprintBatch:
    samples: np.ndarray  # (n, C, h, w) float64
    generator_id: str
    image_ids: list[str]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be (n, C, h, w), got {self.samples.shape}")
        if len(self.image_ids) != self.samples.shape[0]:
            raise ValueError("image id list length must match n")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image id list contains duplicates")

    @property
    def n(self):
        return self.samples.shape[0]

    def save(self, path):
        artifacts.save_container(path, "imprint-batch",
                                 {"generator_id": self.generator_id,
                                  "image_ids": list(self.image_ids)},
                                 {"samples": self.samples})

    @staticmethod
    def load(path):
        _, meta, arrays = artifacts.load_container(path, "imprint-batch")
        return ImprintBatch(arrays["samples"], meta["generator_id"],
                            meta["image_ids"])


@dataclass
class LaplaceField:
    mu: np.ndarray  # (C, h, w) float64
    b: np.ndarray   # (C, h, w) float64, strictly positive
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.mu.shape != self.b.shape:
            raise ValueError("mu and b must share a shape")
        if not np.all(self.b > 0):
            raise ValueError("b must be strictly positive (epsilon-floored)")

    @property
    def shape(self):
        return self.mu.shape

    def save(self, path):
        artifacts.save_container(path, "laplace-field", {"provenance": self.provenance},
                                 {"mu": self.mu, "b": self.b})

    @staticmethod
    def load(path):
        _, meta, arrays = artifacts.load_container(path, "laplace-field")
        return LaplaceField(arrays["mu"], arrays["b"], meta["provenance"])


@dataclass
class FusionSpec:
    generator_ids: list[str]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.generator_ids) != self.weights.shape[0]:
            raise ValueError("one weight per generator id required")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")

    @staticmethod
    def uniform(generator_ids):
        m = len(generator_ids)
        return FusionSpec(list(generator_ids), np.full(m, 1.0 / m))


@dataclass
class ExpansionPolicy:
    real_fraction: float = 0.05
    variants_per_image: int = 5
    seed: int | None = None

    def validate(self):
        if not 0.0 <= self.real_fraction <= 1.0:
            raise PolicyError("real_fraction must lie in [0, 1]")
        if self.variants_per_image < 1:
            raise PolicyError("variants_per_image must be >= 1")


@dataclass
class ExpansionManifest:
    removed_fake_ids: list[str]
    inserted: list[dict]  # {"new_id", "source_real_id", "variant_index"}

    @property
    def pairs(self):
        """(source real id, simulated fake id) links for the pair losses."""
        return [(rec["source_real_id"], rec["new_id"]) for rec in self.inserted]


# -- collection ------------------------------------------------------------------


def extract_imprint(gen, img, settings, rng):
    """Latent difference: reconstruction minus encoding, for one image."""
    z0 = toygen.encode(gen, img)
    z0_rec = toygen.reconstruct_latent(gen, z0, settings, rng)
    return z0_rec - z0


def collect_imprints(gen, images, settings, rng, batch_size=256):
    """Stack imprints over a set of real images, ordered by image id."""
    reals = [img for img in images.items]
    if any(img.label != "real" for img in reals):
        raise PreconditionError("imprints are collected on real images only")
    if not reals:
        raise EmptyDatasetError("no images to collect imprints from")
    reals = sorted(reals, key=lambda img: img.source_id)
    pixels = np.stack([img.pixels for img in reals]).astype(np.float32)
    deltas = []
    for start in range(0, len(reals), batch_size):
        chunk = pixels[start:start + batch_size]
        z0 = gen.encode_batch(chunk)
        z0_rec = gen.reconstruct_batch(z0, settings, rng)
        deltas.append((z0_rec - z0).astype(np.float64))
    return ImprintBatch(np.concatenate(deltas, axis=0), gen.generator_id,
                        [img.source_id for img in reals])


# -- fitting and fusion -----------------------------------------------------------


def fit_laplace(batch, epsilon=EPSILON_B):
    """Per-element moment fit: mean over n, population sigma, b = sigma/sqrt(2)."""
    n = batch.n
    if n == 0:
        raise EmptyDatasetError("cannot fit an empty imprint batch")
    if n == 1:
        warnings.warn("fitting a single-sample batch: scale is fully floored",
                      stacklevel=2)
    x = batch.samples
    mu = x.mean(axis=0)
    sigma = np.sqrt(np.mean((x - mu) ** 2, axis=0))
    b = np.maximum(sigma / np.sqrt(2.0), epsilon)
    provenance = {"n": int(n), "generator_id": batch.generator_id,
                  "epsilon": epsilon}
    return LaplaceField(mu, b, provenance)


def fuse_batches(batches, spec):
    """Index-wise weighted average of aligned imprint batches."""
    if not batches:
        raise PreconditionError("need at least one batch to fuse")
    if [b.generator_id for b in batches] != list(spec.generator_ids):
        raise AlignmentError("fusion spec generator ids do not match batches")
    ref = batches[0]
    for b in batches[1:]:
        if b.samples.shape != ref.samples.shape:
            raise AlignmentError("imprint batches differ in shape")
        if b.image_ids != ref.image_ids:
            raise AlignmentError(
                "imprint batches must share one ordered source-image-id list")
    fused = np.zeros_like(ref.samples)
    for w, b in zip(spec.weights, batches):
        fused += w * b.samples
    return ImprintBatch(fused, "fused", list(ref.image_ids))


def build_fused_field(batches, spec, epsilon=EPSILON_B):
    field_ = fit_laplace(fuse_batches(batches, spec), epsilon)
    field_.provenance["fused_from"] = list(spec.generator_ids)
    field_.provenance["weights"] = [float(w) for w in spec.weights]
    return field_


# -- sampling and expansion --------------------------------------------------------


def sample_imprint(field, rng, size=None):
    """Inverse-CDF Laplace draws, elementwise over the field.

    mu - b * sign(u) * ln(1 - 2|u|) with u uniform on (-1/2, 1/2); the
    log argument is floored to the smallest positive double to rule out
    log(0) at the closed end of the generator's interval.
    """
    shape = field.shape if size is None else (size,) + field.shape
    u = rng.random(shape) - 0.5
    inner = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return field.mu - field.b * np.sign(u) * np.log(inner)


def simulate_fake(gen_codec, img, field, rng, variant_id=None):
    """Decode the image's latent after adding one sampled perturbation."""
    if img.label != "real":
        raise PreconditionError("simulated fakes are derived from real images")
    if tuple(field.shape) != tuple(gen_codec.latent_shape):
        raise ValueError(
            f"field shape {field.shape} does not match codec latent shape "
            f"{gen_codec.latent_shape}")
    z0 = toygen.encode(gen_codec, img)
    z_star = z0 + sample_imprint(field, rng).astype(np.float32)
    pixels = toygen.decode(gen_codec, z_star)
    new_id = variant_id or f"sim:{img.source_id}"
    return Image(pixels.astype(np.float32), new_id, "fake", "simulated")


def _simulate_batch(gen_codec, images, field, rng, k):
    """k perturbed decodes per image; draws are consumed image-major so the
    result matches k sequential simulate_fake calls per image."""
    pixels = np.stack([img.pixels for img in images]).astype(np.float32)
    z0 = gen_codec.encode_batch(pixels)
    draws = sample_imprint(field, rng, size=len(images) * k)
    z0_rep = np.repeat(z0, k, axis=0)
    z_star = z0_rep + draws.astype(np.float32)
    return gen_codec.decode_batch(z_star)


def expand_dataset(data, gen_codec, field, policy, rng=None):
    """Replace a slice of the original fakes with simulated fakes.

    Selects round(|real| * real_fraction) distinct reals, synthesizes
    variants_per_image fakes from each, removes the same number of original
    fakes uniformly at random, and returns the new set plus a manifest of
    the replacement. Label totals are conserved.
    """
    policy.validate()
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    reals = [img for img in data.items if img.label == "real"]
    fakes = [img for img in data.items if img.label == "fake"]
    k = policy.variants_per_image
    n_src = int(round(len(reals) * policy.real_fraction))
    r = n_src * k
    if r > len(fakes):
        raise PolicyError(
            f"expansion needs {r} replacements but only {len(fakes)} fakes exist")
    if n_src == 0:
        return (LabeledImageSet(list(data.items)), ExpansionManifest([], []))

    src_idx = rng.choice(len(reals), size=n_src, replace=False)
    removed_idx = set(rng.choice(len(fakes), size=r, replace=False).tolist())
    sources = [reals[i] for i in src_idx]

    simulated = []
    inserted = []
    batch = 64
    for start in range(0, n_src, batch):
        chunk = sources[start:start + batch]
        out = _simulate_batch(gen_codec, chunk, field, rng, k)
        for i, src in enumerate(chunk):
            for j in range(k):
                new_id = f"sim:{src.source_id}:v{j}"
                simulated.append(Image(out[i * k + j].astype(np.float32),
                                       new_id, "fake", "simulated"))
                inserted.append({"new_id": new_id,
                                 "source_real_id": src.source_id,
                                 "variant_index": j})

    kept_fakes = [img for i, img in enumerate(fakes) if i not in removed_idx]
    removed_ids = [fakes[i].source_id for i in sorted(removed_idx)]
    new_items = reals + kept_fakes + simulated
    return (LabeledImageSet(new_items),
            ExpansionManifest(removed_ids, inserted))
