"""Command-line entry point: experiment lifecycle subcommands.

Every run writes a manifest (config echo, seed, artifact hashes) into the
output directory. Errors exit nonzero with a single machine-parsable line
``error:<tag>: <message>`` on stderr. The output directory resolves from
--out, else the IMPRINTLAB_OUT environment variable, else the config's
output_dir.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as config_mod, corpus, detector as det
from . import evaluation, imprint, toygen, train as train_mod
from .errors import ImprintLabError


def _out_dir(args, cfg=None):
    if getattr(args, "out", None):
        path = Path(args.out)
    elif os.environ.get("IMPRINTLAB_OUT"):
        path = Path(os.environ["IMPRINTLAB_OUT"])
    elif cfg is not None:
        path = Path(cfg.output_dir)
    else:
        path = Path("runs/out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_manifest(out_dir, cfg, artifacts_list, extra=None):
    manifest = {
        "config": config_mod.to_dict(cfg) if cfg else None,
        "config_hash": config_mod.hash_config(cfg) if cfg else None,
        "seed": cfg.seed if cfg else None,
        "artifacts": {str(p): _file_hash(p) for p in artifacts_list
                      if Path(p).exists()},
    }
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def _load_cfg(args):
    cfg = config_mod.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = config_mod.apply_overrides(cfg, {"seed": args.seed})
    return cfg


def cmd_synth_corpus(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    rngs = train_mod._stage_rngs(cfg.seed)
    train_reals, eval_reals, fit_reals = train_mod.build_corpora(cfg, rngs)
    for name, subset in (("train", train_reals), ("eval", eval_reals),
                         ("fit", fit_reals)):
        corpus.save_dataset(subset, out / name)
    write_manifest(out, cfg, [], extra={"counts": {
        "train": len(train_reals), "eval": len(eval_reals), "fit": len(fit_reals)}})
    print(f"wrote corpus splits under {out}")
    return 0


def cmd_train_generators(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    family = train_mod.build_family(cfg, train_mod._stage_rngs(cfg.seed), out)
    paths = sorted(out.glob("family-*.gen"))
    write_manifest(out, cfg, paths,
                   extra={"generator_ids": [h.generator_id for h in family]})
    for h in family:
        print(f"{h.generator_id}: val_mse={h.provenance.get('val_mse'):.5f}")
    return 0


def cmd_fit_imprint(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    rngs = train_mod._stage_rngs(cfg.seed)
    family = train_mod.build_family(cfg, rngs, out / "cache")
    _, _, fit_reals = train_mod.build_corpora(cfg, rngs)
    batches = train_mod.collect_family_imprints(cfg, family, fit_reals, rngs)
    paths = []
    for batch in batches:
        path = out / f"imprints-{batch.generator_id}.bin"
        batch.save(path)
        field = imprint.fit_laplace(batch)
        fpath = out / f"field-{batch.generator_id}.bin"
        field.save(fpath)
        paths += [path, fpath]
        print(f"{batch.generator_id}: n={batch.n} "
              f"mean|mu|={np.abs(field.mu).mean():.5f} mean b={field.b.mean():.5f}")
    write_manifest(out, cfg, paths)
    return 0


def cmd_fuse(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    batches = [imprint.ImprintBatch.load(p) for p in args.batches]
    spec = imprint.FusionSpec.uniform([b.generator_id for b in batches])
    field = imprint.build_fused_field(batches, spec)
    path = out / "fused_field.bin"
    field.save(path)
    write_manifest(out, cfg, [path])
    print(f"fused {len(batches)} batches -> {path}")
    return 0


def cmd_expand(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    rngs = train_mod._stage_rngs(cfg.seed)
    family = train_mod.build_family(cfg, rngs, out / "cache")
    codec = family[cfg.generators.train_index]
    train_reals, _, fit_reals = train_mod.build_corpora(cfg, rngs)
    fakes = toygen.generate_fakes(codec, train_reals,
                                  cfg.generators.reconstruction,
                                  train_mod._rng(rngs["fakes"]))
    data = corpus.LabeledImageSet(list(train_reals.items) + list(fakes.items))
    batches = train_mod.collect_family_imprints(cfg, family, fit_reals, rngs)
    spec = imprint.FusionSpec.uniform([b.generator_id for b in batches])
    field = imprint.build_fused_field(batches, spec)
    expanded, manifest = imprint.expand_dataset(
        data, codec, field, cfg.simulator.expansion,
        train_mod._rng(rngs["expansion"]))
    corpus.save_dataset(expanded, out / "expanded")
    mpath = out / "expansion_manifest.json"
    mpath.write_text(json.dumps({"removed": manifest.removed_fake_ids,
                                 "inserted": manifest.inserted}, indent=1))
    write_manifest(out, cfg, [mpath], extra={
        "counts": expanded.counts_by_label,
        "n_simulated": len(manifest.inserted)})
    print(f"expanded dataset under {out}: {expanded.counts_by_label}")
    return 0


def cmd_fit(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    run = train_mod.fit(cfg, out, resume=not args.no_resume, log=print)
    write_manifest(out, cfg, [run.checkpoint_path,
                              out / "report.json"],
                   extra={"metrics": run.metrics.to_dict()})
    print(json.dumps(run.metrics.to_dict(), indent=1))
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    model, _ = det.load_detector(args.checkpoint)
    if args.dataset:
        dataset = corpus.load_dataset(args.dataset)
    else:
        dataset = _eval_set(cfg)
    report = evaluation.evaluate(model, dataset,
                                 config_hash=config_mod.hash_config(cfg),
                                 seed=cfg.seed)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=1))
    write_manifest(out, cfg, [args.checkpoint, out / "eval.json"])
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def _eval_set(cfg):
    rngs = train_mod._stage_rngs(cfg.seed)
    family = train_mod.build_family(cfg, rngs, Path(cfg.output_dir) / "cache")
    _, eval_reals, _ = train_mod.build_corpora(cfg, rngs)
    fakes_rng = train_mod._rng(rngs["fakes"])
    items = list(eval_reals.items)
    g = cfg.generators
    for idx in sorted({g.train_index, g.holdout_index}):
        items += toygen.generate_fakes(family[idx], eval_reals,
                                       g.reconstruction, fakes_rng).items
    return corpus.LabeledImageSet(items)


def cmd_robustness(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    model, _ = det.load_detector(args.checkpoint)
    dataset = (corpus.load_dataset(args.dataset) if args.dataset
               else _eval_set(cfg))
    curves = evaluation.robustness_suite(model, dataset,
                                         perturb_reals=cfg.eval.perturb_reals)
    plot = evaluation.plot_robustness(curves, out / "robustness.png")
    data = [{"kind": c.kind, "baseline": c.baseline,
             "points": [[lvl, acc] for lvl, acc in c.points]} for c in curves]
    (out / "robustness.json").write_text(json.dumps(data, indent=1))
    write_manifest(out, cfg, [plot, out / "robustness.json"])
    print(json.dumps(data, indent=1))
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    grid_spec = json.loads(Path(args.grid).read_text())
    grid = [(row["tag"], row.get("overrides", {})) for row in grid_spec]
    seeds = args.seeds or [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    rows = evaluation.ablation_run(cfg, grid, seeds, out, log=print)
    write_manifest(out, cfg, [out / "ablation.csv", out / "ablation.json"])
    for row in rows:
        print(f"{row.tag}: seen={row.mean('seen_balanced'):.2f} "
              f"unseen={row.mean('unseen_balanced'):.2f}")
    return 0


def cmd_analyze(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    rngs = train_mod._stage_rngs(cfg.seed)
    family = train_mod.build_family(cfg, rngs, out / "cache")
    _, _, fit_reals = train_mod.build_corpora(cfg, rngs)
    batches = train_mod.collect_family_imprints(cfg, family, fit_reals, rngs)
    written = []
    if args.pca:
        spec = imprint.FusionSpec.uniform([b.generator_id for b in batches])
        fused = imprint.fuse_batches(batches, spec)
        report = analysis.pca_project(batches, fused)
        plot = analysis.emit_scatter(report, out / "pca.png")
        written.append(plot)
        records = [{"tag": tag,
                    "centroid": [float(v) for v in report.centroids[tag]]}
                   for tag in sorted(report.centroids)]
        rpath = out / "pca.jsonl"
        rpath.write_text("\n".join(json.dumps(r) for r in records) + "\n")
        written.append(rpath)
        print(f"pca scatter -> {plot}")
    if args.tails:
        rpath = out / "tails.jsonl"
        with open(rpath, "w") as fh:
            for batch in batches:
                rep = analysis.tail_fit_compare(batch)
                rec = {"generator_id": batch.generator_id, **rep.to_dict()}
                fh.write(json.dumps(rec) + "\n")
                print(json.dumps(rec))
        written.append(rpath)
    if not args.pca and not args.tails:
        print("nothing to do: pass --pca and/or --tails", file=sys.stderr)
        return 2
    write_manifest(out, cfg, written)
    return 0


def cmd_predict(args):
    model, meta = det.load_detector(args.checkpoint)
    pixels = corpus._decode_png(Path(args.image))
    if pixels.shape[0] != model.config.resolution:
        raise ValueError(
            f"image resolution {pixels.shape[0]} does not match checkpoint "
            f"resolution {model.config.resolution}")
    prob = float(model.predict_proba(pixels[None])[0])
    label = det.classify(prob)
    print(json.dumps({"image": args.image, "probability_fake": prob,
                      "label": label}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="imprintlab",
        description="noise-imprint statistics and generated-image detection lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", "-c", required=(name != "predict"),
                       help="experiment config (YAML)")
        p.add_argument("--out", "-o", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    add("synth-corpus", cmd_synth_corpus, help="write procedural corpus splits")
    add("train-generators", cmd_train_generators, help="train the toy family")
    add("fit-imprint", cmd_fit_imprint, help="collect imprints and fit fields")
    p = add("fuse", cmd_fuse, help="fuse imprint batches into one field")
    p.add_argument("--batches", nargs="+", required=True)
    add("expand", cmd_expand, help="expand the training set with simulated fakes")
    p = add("fit", cmd_fit, help="run the full training pipeline")
    p.add_argument("--no-resume", action="store_true")
    p = add("eval", cmd_eval, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (default: config eval set)")
    p = add("robustness", cmd_robustness, help="perturbation ladder sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p = add("ablate", cmd_ablate, help="train/evaluate a config grid")
    p.add_argument("--grid", required=True, help="JSON grid file")
    p.add_argument("--seeds", type=int, nargs="*")
    p = add("analyze", cmd_analyze, help="distribution diagnostics")
    p.add_argument("--pca", action="store_true")
    p.add_argument("--tails", action="store_true")
    p = sub.add_parser("predict", help="classify one image")
    p.set_defaults(fn=cmd_predict)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ImprintLabError as exc:
        print(f"error:{exc.tag}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error:{type(exc).__name__.lower()}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
