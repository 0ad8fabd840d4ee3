"""Distribution diagnostics for imprint batches.

Covers the Laplace-vs-Gaussian tail comparison, 2-D PCA projections of
imprint samples (per generator, plus the fused batch), and a closed-form
KL distance between Laplace fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .imprint import EPSILON_B

TAIL_QUANTILE = 0.95


@dataclass
class TailFitReport:
    laplace_ll: float        # mean held-out log-likelihood, all elements
    gaussian_ll: float
    tail_laplace_ll: float   # restricted to |x - mu| above the tail quantile
    tail_gaussian_ll: float
    n_train: int
    n_holdout: int
    verdict: bool            # Laplace fits the tails at least as well

    def to_dict(self):
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else
                    int(v) if isinstance(v, (int, np.integer)) else float(v))
                for k, v in vars(self).items()}


@dataclass
class ProjectionReport:
    coords: np.ndarray          # (N, 2)
    tags: list[str]             # one tag per point
    explained_variance: tuple   # ratio for the two components
    centroids: dict = field(default_factory=dict)


def tail_fit_compare(batch, holdout_fraction=0.3, tail_quantile=TAIL_QUANTILE):
    """Moment-matched Laplace vs Gaussian on held-out imprint samples.

    Both families share the train-split per-element mean and sigma, so the
    comparison isolates tail shape. The tail set is the held-out entries
    whose |x - mu| exceeds the pooled tail_quantile quantile.
    """
    n = batch.n
    if n < 50:
        raise PreconditionError(f"tail comparison needs n >= 50, got {n}")
    n_hold = max(1, int(round(n * holdout_fraction)))
    train = batch.samples[:n - n_hold]
    hold = batch.samples[n - n_hold:]

    mu = train.mean(axis=0)
    sigma = np.sqrt(np.mean((train - mu) ** 2, axis=0))
    sigma = np.maximum(sigma, EPSILON_B)
    b = np.maximum(sigma / np.sqrt(2.0), EPSILON_B)

    dev = hold - mu
    lap = -np.log(2.0 * b) - np.abs(dev) / b
    gau = -0.5 * np.log(2.0 * np.pi * sigma ** 2) - dev ** 2 / (2.0 * sigma ** 2)

    cut = np.quantile(np.abs(dev), tail_quantile)
    tail = np.abs(dev) > cut
    report = TailFitReport(
        laplace_ll=float(lap.mean()),
        gaussian_ll=float(gau.mean()),
        tail_laplace_ll=float(lap[tail].mean()),
        tail_gaussian_ll=float(gau[tail].mean()),
        n_train=n - n_hold,
        n_holdout=n_hold,
        verdict=bool(lap[tail].mean() >= gau[tail].mean()),
    )
    return report


def pca_project(batches, fused=None, standardize=False):
    """Project flattened imprint samples onto their two leading components.

    Sign convention: each component's largest-|loading| coordinate is made
    positive, so repeated runs agree exactly.
    """
    groups = list(batches) + ([fused] if fused is not None else [])
    if not groups:
        raise PreconditionError("no batches to project")
    flat = [g.samples.reshape(g.n, -1) for g in groups]
    dims = {f.shape[1] for f in flat}
    if len(dims) != 1:
        raise ValueError(f"flattened sample dimensions differ: {dims}")
    x = np.concatenate(flat, axis=0)
    if x.shape[0] < 2:
        raise PreconditionError("need at least 2 samples for a projection")
    if standardize:
        x = (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-12)

    center = x.mean(axis=0)
    xc = x - center
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2].copy()
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    if comps.shape[0] < 2:  # single sample direction; pad a zero component
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    coords = xc @ comps.T
    total = float((s ** 2).sum())
    ratios = tuple(float(si ** 2) / total if total > 0 else 0.0 for si in s[:2])
    if len(ratios) < 2:
        ratios = (ratios + (0.0, 0.0))[:2]

    tags = []
    for g in groups:
        tag = "fused" if fused is not None and g is fused else g.generator_id
        tags.extend([tag] * g.n)
    centroids = {}
    offset = 0
    for g in groups:
        tag = "fused" if fused is not None and g is fused else g.generator_id
        centroids[tag] = coords[offset:offset + g.n].mean(axis=0)
        offset += g.n
    if not np.all(np.isfinite(coords)):
        raise ValueError("projection produced non-finite coordinates")
    return ProjectionReport(coords, tags, ratios, centroids)


def distribution_distance(a, b):
    """Mean element-wise KL divergence KL(a || b) between Laplace fields."""
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {a.shape} vs {b.shape}")
    delta = np.abs(a.mu - b.mu)
    kl = (np.log(b.b / a.b)
          + (a.b * np.exp(-delta / a.b) + delta) / b.b
          - 1.0)
    return float(kl.mean())


def emit_scatter(report, path, title="imprint projection"):
    """Write a PCA scatter plot (PNG) with per-generator colors."""
    if len(report.tags) == 0:
        raise ValueError("cannot plot an empty projection report")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    order = sorted(set(report.tags), key=lambda t: (t == "fused", t))
    cmap = plt.get_cmap("tab10")
    tags = np.array(report.tags)
    for i, tag in enumerate(order):
        mask = tags == tag
        ax.scatter(report.coords[mask, 0], report.coords[mask, 1],
                   s=8, alpha=0.6, label=tag,
                   color="black" if tag == "fused" else cmap(i % 10))
    ev = report.explained_variance
    ax.set_xlabel(f"component 1 ({ev[0]:.1%})")
    ax.set_ylabel(f"component 2 ({ev[1]:.1%})")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "imprintlab"})
    plt.close(fig)
    return path
