"""End-to-end training: corpus -> generator family -> imprint fusion ->
data expansion -> detector optimization.

The master seed spawns one child stream per stage, so any stage is
reproducible in isolation and the whole trajectory is deterministic on a
single worker. Stage artifacts (generator checkpoints, imprint batches) are
memoized in a cache directory keyed by the hash of the exact inputs that
produce them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts, config as config_mod, corpus, detector as det, imprint, nn, toygen
from .errors import TrainingFailure

STAGE_SEEDS = ("corpus_train", "corpus_eval", "corpus_fit", "family", "fakes",
               "imprints", "expansion", "detector_init", "train_loop", "augment")


@dataclass
class TrainingPair:
    real_pixels: np.ndarray   # (H, W, 3)
    fake_pixels: np.ndarray
    delta_z: np.ndarray       # frozen-codec latent difference, (C, h, w)
    real_id: str
    fake_id: str


@dataclass
class TrainingRun:
    checkpoint_path: Path
    report: dict
    metrics: "object"
    model: det.DetectorModel
    field_path: Path | None
    workdir: Path


def _stage_rngs(seed):
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(STAGE_SEEDS))
    return {name: child for name, child in zip(STAGE_SEEDS, children)}


def _seed_int(seq):
    return int(seq.generate_state(1)[0])


def _rng(seq):
    return np.random.default_rng(seq)


def build_corpora(cfg, rngs):
    c = cfg.corpus
    if c.source != "synthetic":
        full = corpus.load_dataset(c.source)
        reals = full.subset(label="real").items
        need = c.n_train_real + c.n_eval_real + c.n_fit_real
        if len(reals) < need:
            raise ValueError(f"dataset has {len(reals)} reals, need {need}")
        train = corpus.LabeledImageSet(reals[:c.n_train_real])
        evalr = corpus.LabeledImageSet(reals[c.n_train_real:c.n_train_real + c.n_eval_real])
        fit = corpus.LabeledImageSet(
            reals[c.n_train_real + c.n_eval_real:need])
        return train, evalr, fit
    train = corpus.synth_toy_corpus(_seed_int(rngs["corpus_train"]), c.n_train_real,
                                    c.resolution, c.noise_sigma, id_prefix="train")
    evalr = corpus.synth_toy_corpus(_seed_int(rngs["corpus_eval"]), c.n_eval_real,
                                    c.resolution, c.noise_sigma, id_prefix="eval")
    fit = corpus.synth_toy_corpus(_seed_int(rngs["corpus_fit"]), c.n_fit_real,
                                  c.resolution, c.noise_sigma, id_prefix="fit")
    return train, evalr, fit


def build_family(cfg, rngs, cache_dir):
    """Train or load the generator family; cached per config+seed."""
    g = cfg.generators
    key = artifacts.config_hash({
        "corpus": config_mod.to_dict(cfg.corpus),
        "generators": config_mod.to_dict(g),
        "seed": _seed_int(rngs["family"]),
    })
    paths = [Path(cache_dir) / f"family-{key}-{i}.gen" for i in range(g.family_size)]
    if all(p.exists() for p in paths):
        return [toygen.load_generator(p) for p in paths]
    train_reals, _, _ = build_corpora(cfg, rngs)
    handles = toygen.make_generator_family(
        g.family_size, train_reals, _seed_int(rngs["family"]),
        epochs=g.epochs, denoiser_epochs=g.denoiser_epochs,
        mse_ceiling=g.mse_ceiling)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    for handle, path in zip(handles, paths):
        handle.save(path)
    return handles


def collect_family_imprints(cfg, family, fit_reals, rngs):
    g = cfg.generators
    batches = []
    base = rngs["imprints"].spawn(len(g.simulator_indices))
    for seq, idx in zip(base, g.simulator_indices):
        batches.append(imprint.collect_imprints(
            family[idx], fit_reals, g.reconstruction, _rng(seq)))
    return batches


def build_pairs(expanded, manifest, codec):
    """Materialize (real, simulated fake) training pairs from the manifest.

    Latents come from the frozen codec; unlinked images never enter pair
    batches."""
    if not manifest.inserted:
        return []
    by_id = {img.source_id: img for img in expanded.items}
    pairs = []
    reals, fakes = [], []
    for rec in manifest.inserted:
        real = by_id.get(rec["source_real_id"])
        fake = by_id.get(rec["new_id"])
        if real is None or fake is None:
            raise ValueError(f"manifest references missing image {rec}")
        reals.append(real)
        fakes.append(fake)
    zr = codec.encode_batch(np.stack([im.pixels for im in reals]))
    zf = codec.encode_batch(np.stack([im.pixels for im in fakes]))
    for i, rec in enumerate(manifest.inserted):
        pairs.append(TrainingPair(reals[i].pixels, fakes[i].pixels,
                                  zf[i] - zr[i], rec["source_real_id"],
                                  rec["new_id"]))
    return pairs


def train_step(model, optimizer, bce_batch, pair_batch, weights):
    """One update of the combined loss; returns the component losses."""
    x, freq, labels = bce_batch
    logits = model.logits(nn.Tensor(x), freq)
    l_bce = nn.bce_with_logits(logits, labels)
    l_diff_v = l_contrast_v = 0.0
    total = l_bce
    if pair_batch is not None and model.config.enable_noise:
        xr, xf, dz = pair_batch
        f_r = model.noise_features(nn.Tensor(xr))
        f_f = model.noise_features(nn.Tensor(xf))
        l_diff = det.loss_diff(f_f - f_r, dz, model.projector)
        l_contrast = det.loss_contrast(f_r, f_f, model.config.temperature)
        total = det.loss_total(l_bce, l_diff, l_contrast, weights)
        l_diff_v, l_contrast_v = l_diff.item(), l_contrast.item()
    total_v = total.item()
    if not np.isfinite(total_v):
        raise TrainingFailure(
            f"non-finite loss: bce={l_bce.item()} diff={l_diff_v} "
            f"contrast={l_contrast_v}", final_loss=total_v)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {"bce": l_bce.item(), "diff": l_diff_v, "contrast": l_contrast_v,
            "total": total_v}


def _to_nchw(pixels):
    return np.ascontiguousarray(pixels.transpose(0, 3, 1, 2), dtype=np.float32)


def _batch_arrays(images, aug_section, aug_rng):
    """Pixels (+ optional augmentation) and labels for one batch."""
    out = []
    policy = aug_section.to_policy() if aug_section and aug_section.enabled else None
    for img in images:
        if policy is not None and (img.label == "real" or aug_section.augment_fakes):
            img = corpus.augment(img, policy, aug_rng)
        out.append(img.pixels)
    pixels = np.stack(out)
    labels = np.array([1.0 if im.label == "fake" else 0.0 for im in images],
                      dtype=np.float32)[:, None]
    return pixels, labels


def train_detector(cfg, model, train_set, pairs, rngs, log=None):
    """Optimization loop: detection batches, with aux pair batches interleaved
    at the configured ratio when the manifest provided pairs."""
    t = cfg.train
    weights = model.config.loss_weights
    items = list(train_set.items)
    opt = nn.AdamW(model.params(), lr=t.learning_rate,
                   weight_decay=t.weight_decay)
    loop_rng = _rng(rngs["train_loop"])
    aug_rng = _rng(rngs["augment"])
    aux_on = (model.config.enable_noise and pairs
              and (weights.lambda_diff > 0 or weights.lambda_contrast > 0)
              and weights.alpha > 0)
    history = []
    pair_cursor = 0
    pair_order = loop_rng.permutation(len(pairs)) if pairs else None
    credit = 0.0
    for epoch in range(t.epochs):
        order = loop_rng.permutation(len(items))
        sums, count = {"bce": 0.0, "diff": 0.0, "contrast": 0.0, "total": 0.0}, 0
        for start in range(0, len(items), t.batch_size):
            batch_items = [items[i] for i in order[start:start + t.batch_size]]
            pixels, labels = _batch_arrays(batch_items, t.augment, aug_rng)
            freq = (det.freq_features_batch(pixels, model.config.d_freq)
                    if model.config.enable_freq else None)
            bce_batch = (_to_nchw(pixels), freq, labels)
            pair_batch = None
            if aux_on:
                credit += t.pair_ratio
                if credit >= 1.0:
                    credit -= 1.0
                    take = []
                    for _ in range(min(t.pair_batch_size, len(pairs))):
                        if pair_cursor == len(pair_order):
                            pair_order = loop_rng.permutation(len(pairs))
                            pair_cursor = 0
                        take.append(pairs[pair_order[pair_cursor]])
                        pair_cursor += 1
                    xr = _to_nchw(np.stack([p.real_pixels for p in take]))
                    xf = _to_nchw(np.stack([p.fake_pixels for p in take]))
                    dz = np.stack([p.delta_z for p in take])
                    pair_batch = (xr, xf, dz)
            metrics = train_step(model, opt, bce_batch, pair_batch, weights)
            for k in sums:
                sums[k] += metrics[k]
            count += 1
        epoch_means = {k: sums[k] / max(count, 1) for k in sums}
        history.append(epoch_means)
        if log:
            log(f"epoch {epoch + 1}/{t.epochs}: " +
                " ".join(f"{k}={v:.4f}" for k, v in epoch_means.items()))
    return history


def fit(cfg, workdir, cache_dir=None, resume=True, log=None):
    """Full pipeline; persists a checkpoint, training report, and artifacts.

    With resume=True an existing checkpoint whose config hash matches is
    loaded instead of retrained.
    """
    from . import evaluation

    cfg.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir else workdir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_mod.hash_config(cfg)
    ckpt_path = workdir / "detector.ckpt"
    report_path = workdir / "report.json"
    field_path = workdir / "fused_field.bin"

    if resume and ckpt_path.exists() and report_path.exists():
        report = json.loads(report_path.read_text())
        if report.get("config_hash") == cfg_hash:
            model, _ = det.load_detector(ckpt_path)
            metrics = evaluation.MetricsReport.from_dict(report["metrics"])
            return TrainingRun(ckpt_path, report, metrics, model,
                               field_path if field_path.exists() else None,
                               workdir)

    timings = {}
    rngs = _stage_rngs(cfg.seed)
    t0 = time.perf_counter()
    train_reals, eval_reals, fit_reals = build_corpora(cfg, rngs)
    timings["corpus"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    family = build_family(cfg, rngs, cache_dir)
    timings["family"] = time.perf_counter() - t0
    g = cfg.generators
    codec = family[g.train_index]
    codec_state_before = {k: v.copy() for k, v in codec.encoder.state_dict().items()}

    t0 = time.perf_counter()
    fakes_rng = _rng(rngs["fakes"])
    train_fakes = toygen.generate_fakes(codec, train_reals, g.reconstruction,
                                        fakes_rng)
    eval_sets = {}
    for idx in sorted({g.train_index, g.holdout_index}):
        eval_sets[idx] = toygen.generate_fakes(family[idx], eval_reals,
                                               g.reconstruction, fakes_rng)
    eval_set = corpus.LabeledImageSet(
        list(eval_reals.items)
        + [im for s in eval_sets.values() for im in s.items])
    timings["fakes"] = time.perf_counter() - t0

    field_obj = None
    manifest = imprint.ExpansionManifest([], [])
    train_set = corpus.LabeledImageSet(list(train_reals.items)
                                       + list(train_fakes.items))
    sim = cfg.simulator
    t0 = time.perf_counter()
    if sim.enabled and sim.expansion.real_fraction > 0 and g.simulator_indices:
        batches = collect_family_imprints(cfg, family, fit_reals, rngs)
        spec = imprint.FusionSpec.uniform([b.generator_id for b in batches])
        field_obj = imprint.build_fused_field(batches, spec)
        field_obj.save(field_path)
        for i, b in enumerate(batches):
            b.save(workdir / f"imprints-{b.generator_id}.bin")
        train_set, manifest = imprint.expand_dataset(
            train_set, codec, field_obj, sim.expansion, _rng(rngs["expansion"]))
        (workdir / "expansion_manifest.json").write_text(json.dumps(
            {"removed": manifest.removed_fake_ids, "inserted": manifest.inserted},
            indent=1))
    timings["simulator"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pairs = build_pairs(train_set, manifest, codec)
    model = det.DetectorModel(cfg.detector_config(), _rng(rngs["detector_init"]))
    history = train_detector(cfg, model, train_set, pairs, rngs, log=log)
    timings["detector"] = time.perf_counter() - t0

    codec_state_after = codec.encoder.state_dict()
    codec_frozen = all(np.array_equal(codec_state_before[k], codec_state_after[k])
                       for k in codec_state_before)

    t0 = time.perf_counter()
    metrics = evaluation.evaluate(model, eval_set, config_hash=cfg_hash,
                                  seed=cfg.seed)
    timings["eval"] = time.perf_counter() - t0

    model.save(ckpt_path, extra_meta={"config_hash": cfg_hash, "seed": cfg.seed})
    report = {
        "config": config_mod.to_dict(cfg),
        "config_hash": cfg_hash,
        "seed": cfg.seed,
        "epochs": history,
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "n_pairs": len(pairs),
        "codec_frozen": bool(codec_frozen),
        "generator_ids": [h.generator_id for h in family],
        "metrics": metrics.to_dict(),
    }
    report_path.write_text(json.dumps(report, indent=1))
    return TrainingRun(ckpt_path, report, metrics, model,
                       field_path if field_obj is not None else None, workdir)
