"""Image corpus: procedural synthesis, disk I/O, augmentation, perturbation.

Images are (H, W, 3) float32 arrays in [0, 1]. The procedural "real" corpus
mixes smooth gradients, geometric shapes, and band-limited textures, then
adds per-image Gaussian sensor noise so real images carry a noise floor.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, EmptyDatasetError

VALID_RESOLUTIONS = (16, 32, 64)
JPEG_LADDER = (95, 90, 75, 50)
BLUR_LADDER = (1.0, 2.0, 3.0, 4.0)

# blur kernels truncated at 4 sigma, reflect padding at borders
BLUR_TRUNCATE = 4.0
BLUR_MODE = "reflect"

DEFAULT_NOISE_SIGMA = (0.004, 0.05)


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, 3) float32, values in [0, 1]
    source_id: str
    label: str  # "real" or "fake"
    generator_id: str | None = None

    def validate(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"{self.source_id}: expected (H, W, 3), got {p.shape}")
        if p.shape[0] != p.shape[1] or p.shape[0] < 16:
            raise ValueError(f"{self.source_id}: resolution must be square and >= 16")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError(f"{self.source_id}: pixel values outside [0, 1]")
        if self.label not in ("real", "fake"):
            raise ValueError(f"{self.source_id}: bad label {self.label!r}")
        if self.label == "fake" and not self.generator_id:
            raise ValueError(f"{self.source_id}: fake image without generator id")

    def with_pixels(self, pixels):
        return Image(pixels.astype(np.float32), self.source_id, self.label,
                     self.generator_id)


@dataclass
class LabeledImageSet:
    items: list[Image]
    load_warnings: list[str] = field(default_factory=list)

    @property
    def counts_by_label(self):
        counts = {}
        for img in self.items:
            counts[img.label] = counts.get(img.label, 0) + 1
        return counts

    @property
    def counts_by_generator(self):
        counts = {}
        for img in self.items:
            if img.generator_id is not None:
                counts[img.generator_id] = counts.get(img.generator_id, 0) + 1
        return counts

    def subset(self, label=None, generator_id=None):
        items = [img for img in self.items
                 if (label is None or img.label == label)
                 and (generator_id is None or img.generator_id == generator_id)]
        return LabeledImageSet(items)

    def validate(self):
        for img in self.items:
            img.validate()

    def __len__(self):
        return len(self.items)


@dataclass
class AugmentPolicy:
    jpeg_quality_range: tuple[int, int] = (30, 100)
    blur_sigma_range: tuple[float, float] = (0.1, 3.0)
    jpeg_probability: float = 0.1
    blur_probability: float = 0.1

    def validate(self):
        if self.jpeg_quality_range[0] > self.jpeg_quality_range[1]:
            raise ConfigurationError("jpeg_quality_range is empty")
        if not 1 <= self.jpeg_quality_range[0] <= 100:
            raise ConfigurationError("jpeg quality must lie in 1..100")
        if self.blur_sigma_range[0] > self.blur_sigma_range[1]:
            raise ConfigurationError("blur_sigma_range is empty")
        for p in (self.jpeg_probability, self.blur_probability):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError("apply probabilities must lie in [0, 1]")


# -- procedural synthesis ------------------------------------------------------


def _coords(res):
    ax = np.linspace(0.0, 1.0, res, dtype=np.float32)
    return np.meshgrid(ax, ax, indexing="ij")


def _gradient_image(res, rng):
    yy, xx = _coords(res)
    img = np.empty((res, res, 3), dtype=np.float32)
    angle = rng.uniform(0, 2 * np.pi)
    direction = np.cos(angle) * xx + np.sin(angle) * yy
    freq = rng.uniform(0.5, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * direction + phase)
    for c in range(3):
        a = rng.uniform(-0.3, 0.3, size=3)
        img[:, :, c] = a[0] * xx + a[1] * yy + a[2] * wave
    return img


def _shapes_image(res, rng):
    yy, xx = _coords(res)
    img = np.tile(rng.uniform(-0.2, 0.2, size=3).astype(np.float32), (res, res, 1))
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(-0.5, 0.5, size=3).astype(np.float32)
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            w, h = rng.uniform(0.08, 0.4, size=2)
            mask = (np.abs(xx - cx) < w) & (np.abs(yy - cy) < h)
        else:
            r = rng.uniform(0.06, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img[mask] = color
    return img


def _texture_image(res, rng):
    sigma = rng.uniform(0.6, 2.5)
    base = gaussian_filter(rng.standard_normal((res, res)), sigma, mode="wrap")
    scale = base.std()
    base = base / scale if scale > 0 else base
    contrast = rng.uniform(0.1, 0.35)
    tint = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    return (contrast * base)[:, :, None] * tint[None, None, :]


def _procedural_image(res, rng, noise_sigma_range):
    kind = rng.integers(0, 4)
    if kind == 0:
        img = _gradient_image(res, rng)
    elif kind == 1:
        img = _shapes_image(res, rng)
    elif kind == 2:
        img = _texture_image(res, rng)
    else:
        img = (_gradient_image(res, rng)
               + _shapes_image(res, rng) * rng.uniform(0.3, 0.8)
               + _texture_image(res, rng))
    # slight optical softness, as a lens would apply before the sensor
    soft = rng.uniform(0.4, 0.8)
    for c in range(3):
        img[:, :, c] = gaussian_filter(img[:, :, c], soft, mode="reflect")
    base = rng.uniform(0.2, 0.8)
    img = img - img.mean() + base
    sigma = rng.uniform(*noise_sigma_range)
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_toy_corpus(seed, n, resolution, noise_sigma_range=DEFAULT_NOISE_SIGMA,
                     id_prefix="real"):
    """Deterministic procedural corpus of n "real"-labeled images."""
    if resolution not in VALID_RESOLUTIONS:
        raise ConfigurationError(
            f"resolution must be one of {VALID_RESOLUTIONS}, got {resolution}")
    if n < 0:
        raise ConfigurationError("n must be >= 0")
    root = np.random.SeedSequence(seed)
    items = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=root.entropy, spawn_key=(i,)))
        pixels = _procedural_image(resolution, rng, noise_sigma_range)
        items.append(Image(pixels, f"{id_prefix}/{i:05d}", "real"))
    return LabeledImageSet(items)


# -- disk I/O ------------------------------------------------------------------


def _decode_png(path):
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_dataset(dataset, root):
    """Write the documented layout: root/real/*.png, root/fake/<gen>/*.png."""
    root = Path(root)
    for img in dataset.items:
        if img.label == "real":
            sub = root / "real"
        else:
            sub = root / "fake" / img.generator_id
        sub.mkdir(parents=True, exist_ok=True)
        name = img.source_id.replace("/", "_").replace(":", "_") + ".png"
        arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr).save(sub / name)


def load_dataset(root):
    """Load the documented layout; decoding failures are warnings, not fatal."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    items, warnings = [], []

    def _load(path, label, generator_id=None):
        try:
            pixels = _decode_png(path)
        except Exception as exc:  # noqa: BLE001
            warnings.append(f"{path}: {exc}")
            return
        img = Image(pixels, str(path.relative_to(root)), label, generator_id)
        items.append(img)

    for path in sorted((root / "real").glob("*.png")):
        _load(path, "real")
    fake_root = root / "fake"
    if fake_root.is_dir():
        for gen_dir in sorted(p for p in fake_root.iterdir() if p.is_dir()):
            for path in sorted(gen_dir.glob("*.png")):
                _load(path, "fake", gen_dir.name)
    if not items:
        raise EmptyDatasetError(f"no decodable images under {root}")
    return LabeledImageSet(items, warnings)


# -- degradations --------------------------------------------------------------


def jpeg_roundtrip(pixels, quality):
    """In-memory JPEG encode/decode at the given quality factor (1..100)."""
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="JPEG", quality=int(quality),
                                 subsampling=0)
    buf.seek(0)
    with PILImage.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return out


def gaussian_blur(pixels, sigma):
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        out[:, :, c] = gaussian_filter(pixels[:, :, c], sigma,
                                       mode=BLUR_MODE, truncate=BLUR_TRUNCATE)
    return np.clip(out, 0.0, 1.0)


def augment(img, policy, rng):
    """Randomized training degradation: optional blur, then optional JPEG."""
    policy.validate()
    pixels = img.pixels
    if rng.random() < policy.blur_probability:
        sigma = rng.uniform(*policy.blur_sigma_range)
        pixels = gaussian_blur(pixels, sigma)
    if rng.random() < policy.jpeg_probability:
        lo, hi = policy.jpeg_quality_range
        quality = int(rng.integers(lo, hi + 1))
        pixels = jpeg_roundtrip(pixels, quality)
    return img.with_pixels(np.clip(pixels, 0.0, 1.0))


def perturb(img, kind, level):
    """Deterministic single degradation from the evaluation ladder."""
    if kind == "jpeg":
        if int(level) not in JPEG_LADDER or level != int(level):
            raise ConfigurationError(
                f"jpeg level must be one of {JPEG_LADDER}, got {level}")
        return img.with_pixels(jpeg_roundtrip(img.pixels, int(level)))
    if kind == "blur":
        if float(level) not in BLUR_LADDER:
            raise ConfigurationError(
                f"blur level must be one of {BLUR_LADDER}, got {level}")
        return img.with_pixels(gaussian_blur(img.pixels, float(level)))
    raise ConfigurationError(f"unknown perturbation kind {kind!r}")
