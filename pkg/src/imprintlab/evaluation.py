"""Metrics, robustness sweeps, and the ablation runner.

Accuracy is balanced over real and fake sides at a fixed 0.5 threshold
(ties classified fake). Robustness re-evaluates under the documented JPEG
and blur ladders; the ablation runner trains one configuration per grid row
with shared seeds and emits a comparison table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import config as config_mod, corpus
from .corpus import BLUR_LADDER, JPEG_LADDER
from .errors import PreconditionError

THRESHOLD = 0.5


@dataclass
class MetricsReport:
    real_accuracy: float
    fake_accuracy_by_generator: dict
    balanced_by_generator: dict
    overall_fake_accuracy: float
    overall_balanced: float
    counts: dict
    config_hash: str = ""
    seed: int | None = None

    def to_dict(self):
        return {
            "real_accuracy": self.real_accuracy,
            "fake_accuracy_by_generator": self.fake_accuracy_by_generator,
            "balanced_by_generator": self.balanced_by_generator,
            "overall_fake_accuracy": self.overall_fake_accuracy,
            "overall_balanced": self.overall_balanced,
            "counts": self.counts,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d):
        return MetricsReport(**d)


@dataclass
class RobustnessCurve:
    kind: str
    points: list            # [(level, balanced accuracy)] over the full ladder
    baseline: float         # unperturbed balanced accuracy (level-0 point)


def _is_fake(prob):
    return prob >= THRESHOLD  # ties go to fake


def balanced_accuracy(preds):
    """Mean of real-side and fake-side rates x 100; needs both classes."""
    reals = [p for p, label in preds if label == "real"]
    fakes = [p for p, label in preds if label == "fake"]
    if not reals or not fakes:
        raise PreconditionError(
            "balanced accuracy needs both classes; use tpr_only for fake-only sets")
    real_rate = float(np.mean([not _is_fake(p) for p in reals]))
    fake_rate = float(np.mean([_is_fake(p) for p in fakes]))
    return (real_rate + fake_rate) / 2.0 * 100.0


def tpr_only(probs):
    """Fraction of fake-only predictions classified fake, x 100."""
    if len(probs) == 0:
        raise PreconditionError("tpr_only needs at least one prediction")
    return float(np.mean([_is_fake(p) for p in probs])) * 100.0


def _predict_set(model, dataset, batch_size=512):
    probs = np.empty(len(dataset.items))
    pixels = [img.pixels for img in dataset.items]
    for start in range(0, len(pixels), batch_size):
        chunk = np.stack(pixels[start:start + batch_size])
        probs[start:start + len(chunk)] = model.predict_proba(chunk)
    return probs


def evaluate(model, dataset, split_by_generator=True, config_hash="", seed=None):
    """Per-generator fake-side accuracy against the shared real side."""
    if not dataset.items:
        raise PreconditionError("evaluation dataset is empty")
    probs = _predict_set(model, dataset)
    labels = [img.label for img in dataset.items]
    gens = [img.generator_id for img in dataset.items]

    real_probs = probs[[lab == "real" for lab in labels]]
    if real_probs.size == 0:
        raise PreconditionError("evaluation dataset lacks real images")
    real_acc = float(np.mean([not _is_fake(p) for p in real_probs])) * 100.0

    fake_by_gen, balanced_by_gen = {}, {}
    counts = {"real": int(real_probs.size)}
    gen_ids = sorted({g for g, lab in zip(gens, labels) if lab == "fake"})
    if not split_by_generator and gen_ids:
        gen_ids = ["all"]
    all_fake = probs[[lab == "fake" for lab in labels]]
    for gid in gen_ids:
        if gid == "all":
            fp = all_fake
        else:
            fp = probs[[lab == "fake" and g == gid
                        for g, lab in zip(gens, labels)]]
        acc = float(np.mean([_is_fake(p) for p in fp])) * 100.0
        fake_by_gen[gid] = acc
        balanced_by_gen[gid] = (real_acc + acc) / 2.0
        counts[gid] = int(fp.size)
    overall_fake = (float(np.mean([_is_fake(p) for p in all_fake])) * 100.0
                    if all_fake.size else float("nan"))
    overall_balanced = ((real_acc + overall_fake) / 2.0 if all_fake.size
                        else float("nan"))
    return MetricsReport(real_acc, fake_by_gen, balanced_by_gen, overall_fake,
                         overall_balanced, counts, config_hash, seed)


def robustness_suite(model, dataset, perturb_reals=True):
    """Balanced-accuracy curves over the JPEG and blur ladders."""
    baseline = evaluate(model, dataset).overall_balanced
    curves = []
    for kind, ladder in (("jpeg", JPEG_LADDER), ("blur", BLUR_LADDER)):
        points = []
        for level in ladder:
            items = []
            for img in dataset.items:
                if img.label == "fake" or perturb_reals:
                    items.append(corpus.perturb(img, kind, level))
                else:
                    items.append(img)
            perturbed = corpus.LabeledImageSet(items)
            points.append((level, evaluate(model, perturbed).overall_balanced))
        curves.append(RobustnessCurve(kind, points, baseline))
    return curves


def plot_robustness(curves, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(curves), figsize=(5 * len(curves), 4))
    axes = np.atleast_1d(axes)
    for ax, curve in zip(axes, curves):
        levels = [p[0] for p in curve.points]
        accs = [p[1] for p in curve.points]
        ax.plot(levels, accs, marker="o")
        ax.axhline(curve.baseline, ls="--", lw=0.8, color="gray",
                   label="unperturbed")
        ax.set_xlabel(curve.kind)
        ax.set_ylabel("balanced accuracy")
        ax.set_ylim(0, 105)
        if curve.kind == "jpeg":
            ax.invert_xaxis()
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


# -- ablation runner ---------------------------------------------------------------


@dataclass
class AblationRow:
    tag: str
    overrides: dict
    per_seed: list = dc_field(default_factory=list)  # dicts of metric values

    def mean(self, key):
        vals = [m[key] for m in self.per_seed if m.get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")


def ablation_run(base_cfg, grid, seeds, workdir, cache_dir=None, log=None):
    """Train/evaluate each configuration delta with shared seeds.

    grid: list of (tag, overrides) where overrides use dotted config paths.
    Returns AblationRow list; also writes ablation.csv in the workdir.
    """
    from . import train as train_mod

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir else workdir / "cache"
    rows = []
    for tag, overrides in grid:
        row = AblationRow(tag, overrides)
        for seed in seeds:
            cfg = config_mod.apply_overrides(base_cfg, dict(overrides))
            cfg = config_mod.apply_overrides(cfg, {"seed": seed})
            run_dir = workdir / f"{tag}-s{seed}"
            if log:
                log(f"[ablate] {tag} seed {seed}")
            run = train_mod.fit(cfg, run_dir, cache_dir=cache_dir, log=log)
            m = run.metrics
            family_ids = run.report["generator_ids"]
            g = cfg.generators
            seen_id = family_ids[g.train_index]
            unseen_id = family_ids[g.holdout_index]
            row.per_seed.append({
                "seed": seed,
                "seen_balanced": m.balanced_by_generator.get(seen_id),
                "unseen_balanced": m.balanced_by_generator.get(unseen_id),
                "real_accuracy": m.real_accuracy,
                "overall_balanced": m.overall_balanced,
                "checkpoint": str(run.checkpoint_path),
            })
        rows.append(row)

    csv_path = workdir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "seed", "seen_balanced", "unseen_balanced",
                         "real_accuracy", "overall_balanced"])
        for row in rows:
            for m in row.per_seed:
                writer.writerow([row.tag, m["seed"],
                                 f"{m['seen_balanced']:.3f}" if m["seen_balanced"] is not None else "",
                                 f"{m['unseen_balanced']:.3f}" if m["unseen_balanced"] is not None else "",
                                 f"{m['real_accuracy']:.3f}",
                                 f"{m['overall_balanced']:.3f}"])
            writer.writerow([row.tag, "mean",
                             f"{row.mean('seen_balanced'):.3f}",
                             f"{row.mean('unseen_balanced'):.3f}",
                             f"{row.mean('real_accuracy'):.3f}",
                             f"{row.mean('overall_balanced'):.3f}"])
    (workdir / "ablation.json").write_text(json.dumps(
        [{"tag": r.tag, "overrides": r.overrides, "per_seed": r.per_seed}
         for r in rows], indent=1))
    return rows
