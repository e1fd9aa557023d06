"""Command line driver for the ordinal depth pipeline.

    python -m ordinal_depth --out run synth --count 20 --test-count 5
    python -m ordinal_depth --out run sample-pairs --manifest run/manifest.jsonl
    python -m ordinal_depth --out run train --manifest run/pairs_manifest.jsonl
    python -m ordinal_depth --out run predict --checkpoint run/model.ckpt \\
        --manifest run/pairs_manifest.jsonl
    python -m ordinal_depth --out run reconstruct --probs run/probs/scene_0100.csv \\
        --image run/scene_0100.ppm --labels run/labels/scene_0100.pgm \\
        --priors run/priors.json
    python -m ordinal_depth --out run eval --depth run/scene_0100_depth.pfm \\
        --pairs run/pairs/scene_0100.csv

Every command is deterministic for a given ``--seed`` and flag set.
"""

import argparse
import csv
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, metrics, reconstruct
from .context import PairDataset, build_context, save_bundles
from .dataio import ManifestRecord
from .errors import (
    DimensionMismatch, InvalidConfig, LengthMismatch, NonFiniteLoss, OrdinalDepthError,
)
from .micronet.model import BLOCK_KINDS, STREAM_PRESETS, ModelConfig, OrdinalNet
from .micronet.train import load_checkpoint, predict_proba, save_checkpoint, train
from .superpixel import (
    Ordinal, SuperpixelMap, depth_at, generate_samples, read_pairs_csv, slic_segment, write_pairs_csv,
)

log = logging.getLogger("ordinal_depth")


# --- helpers ----------------------------------------------------------------

def _map(fn, items, jobs):
    """Ordered map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _rel(path, start):
    return os.path.relpath(path, start)


def _resolve(manifest, rel):
    return None if rel is None else Path(manifest).parent / rel


def _stem(rec):
    return Path(rec.image).stem


def _image_key(text):
    """Stable per-image seed offset (str hashes are salted per process)."""
    return zlib.crc32(text.encode()) % 100000


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _records(manifest, split=None):
    recs = dataio.read_manifest(manifest)
    return [r for r in recs if split is None or r.split == split]


def _load_pairs(manifest, rec):
    if rec.pairs is None:
        raise InvalidConfig(f"{rec.image}: manifest record has no pairs file")
    return read_pairs_csv(_resolve(manifest, rec.pairs))


def _dataset(manifest, split, mode="standard"):
    images, pair_lists = [], []
    for rec in _records(manifest, split):
        images.append(dataio.load_image(_resolve(manifest, rec.image)))
        pair_lists.append([p for p in _load_pairs(manifest, rec) if p.label is not None])
    return PairDataset.from_images(images, pair_lists, mode=mode)


def _model_config(args):
    return ModelConfig(streams=STREAM_PRESETS[args.streams], block_kind=args.block,
                       dense_layers_per_block=args.layers, growth_rate=args.k,
                       seed=args.seed)


# --- commands ---------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(args.count + args.test_count):
        split = "train" if k < args.count else "test"
        seed = args.seed * 100003 + k
        image, depth = dataio.synth_scene(seed, args.size, args.size, args.objects)
        name = f"scene_{k:04d}"
        dataio.save_image(out / f"{name}.ppm", image)
        dataio.write_depth_pfm(depth, out / f"{name}_depth.pfm")
        records.append(ManifestRecord(f"{name}.ppm", f"{name}_depth.pfm", None, split))
    dataio.write_manifest(out / "manifest.jsonl", records)
    print(f"wrote {len(records)} scenes to {out / 'manifest.jsonl'}")


def _sample_one(job):
    manifest, rec, args, out = job
    image = dataio.load_image(_resolve(manifest, rec.image))
    if rec.depth is None:
        raise InvalidConfig(f"{rec.image}: depth is required to label pairs")
    depth = dataio.load_depth(_resolve(manifest, rec.depth), like=image)
    spmap = slic_segment(image, args.segments, args.compactness)
    samples = generate_samples(spmap, depth, args.n_per_image,
                               args.seed + _image_key(rec.image), args.delta)
    name = _stem(rec)
    pairs_path = out / "pairs" / f"{name}.csv"
    write_pairs_csv(pairs_path, samples)
    dataio.write_pnm(out / "labels" / f"{name}.pgm", spmap.labels, 65535)
    stats = [(depth_at(depth, s.p_i), depth_at(depth, s.p_j), s.label)
             for s in samples] if rec.split == "train" else []
    return pairs_path, [int(s.label) for s in samples], stats


def cmd_sample_pairs(args):
    out = Path(args.out)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    recs = _records(args.manifest)
    results = _map(_sample_one, [(args.manifest, r, args, out) for r in recs], args.jobs)
    new, counts, stats = [], np.zeros(3, dtype=np.int64), []
    for rec, (pairs_path, labels, st) in zip(recs, results):
        counts += np.bincount(labels, minlength=3)
        stats += st
        src = Path(args.manifest).parent
        new.append(ManifestRecord(_rel(src / rec.image, out),
                                  None if rec.depth is None else _rel(src / rec.depth, out),
                                  _rel(pairs_path, out), rec.split))
    dataio.write_manifest(out / "pairs_manifest.jsonl", new)
    if stats:
        reconstruct.slack_priors_from_data(stats).save(out / "priors.json")
    total = int(counts.sum())
    print("class,count,fraction")
    for o in Ordinal:
        print(f"{o.name},{counts[o]},{counts[o] / max(total, 1):.4f}")
    print(f"total,{total},1.0000")


def _extract_one(job):
    manifest, rec, mode, out = job
    image = dataio.load_image(_resolve(manifest, rec.image))
    pairs = _load_pairs(manifest, rec)
    path = out / "bundles" / f"{_stem(rec)}.bin"
    save_bundles(path, [build_context(image, p, mode) for p in pairs])
    return len(pairs)


def cmd_extract(args):
    out = Path(args.out)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    recs = _records(args.manifest, args.split)
    counts = _map(_extract_one, [(args.manifest, r, args.mode, out) for r in recs], args.jobs)
    print(f"extracted {sum(counts)} bundles from {len(recs)} images")


def _train_model(args, streams=None):
    config = _model_config(args)
    if streams is not None:
        config = ModelConfig(**{**config.to_dict(), "streams": STREAM_PRESETS[streams]})
    data = _dataset(args.manifest, "train", args.mode)
    model = OrdinalNet(config)
    ckpt = Path(args.out) / "model.ckpt"
    try:
        model, trace = train(model, data, lr=args.lr, weight_decay=args.wd,
                             iterations=args.iters, batch_size=args.batch, seed=args.seed)
    except NonFiniteLoss:
        save_checkpoint(ckpt, model)
        raise
    return model, trace


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, trace = _train_model(args)
    save_checkpoint(out / "model.ckpt", model)
    trace.write_csv(out / "loss.csv")
    tail = trace.accuracy[-min(50, len(trace.accuracy)):]
    acc = float(np.mean(tail)) if tail else float("nan")
    print(f"final train accuracy {acc:.4f} (mean of last {len(tail)} batches)")


def cmd_predict(args):
    out = Path(args.out) / "probs"
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    for rec in _records(args.manifest, args.split):
        image = dataio.load_image(_resolve(args.manifest, rec.image))
        pairs = _load_pairs(args.manifest, rec)
        data = PairDataset([(image, p) for p in pairs], mode=args.mode)
        probs = predict_proba(model, data, args.batch).astype(np.float64)
        probs /= probs.sum(axis=1, keepdims=True)
        reconstruct.write_probs_csv(out / f"{_stem(rec)}.csv",
                                    reconstruct.OrdinalProbs([(p.i, p.j) for p in pairs], probs))
    print(f"wrote probabilities to {out}")


def cmd_reconstruct(args):
    # a subdirectory keeps results apart from ground-truth ``*_depth`` files
    out = Path(args.out) / "recon"
    out.mkdir(parents=True, exist_ok=True)
    image = dataio.load_image(args.image)
    raw, _ = dataio.read_pnm(args.labels)
    spmap = SuperpixelMap.from_labels(raw[:, :, 0])
    if spmap.labels.shape != (image.height, image.width):
        raise DimensionMismatch("label map and image differ in size")
    probs = reconstruct.read_probs_csv(args.probs)
    priors = reconstruct.SlackPriors.load(args.priors)
    spec = reconstruct.build_spec(image, spmap, probs, priors, args.k1, args.k2, args.rho,
                                  args.lo, args.hi)
    sol = reconstruct.solve(spec, args.tol, args.max_iter)
    depth = reconstruct.floodfill(spmap, sol.y)
    name = args.name or Path(args.probs).stem
    dataio.write_depth_pgm(depth, out / f"{name}_depth.pgm", args.lo, args.hi)
    dataio.write_depth_pfm(depth, out / f"{name}_depth.pfm")
    reconstruct.write_solution_csv(out / f"{name}_segments.csv", spmap, sol)
    with open(out / f"{name}_energy.csv", "w") as fh:
        fh.write("iteration,energy\n")
        fh.writelines(f"{k},{e:.12g}\n" for k, e in enumerate(sol.trace))
    diag = {"iterations": sol.iterations, "energy": sol.energy,
            "converged": sol.converged, "stalled": sol.stalled,
            "segments": spmap.n_segments, "pairs": len(probs)}
    _write_json(out / f"{name}_diagnostics.json", diag)
    print(json.dumps(diag, sort_keys=True))


def cmd_eval(args):
    pairs = [p for p in read_pairs_csv(args.pairs) if p.label is not None]
    if args.depth:
        depth = dataio.load_depth(args.depth)
        report = metrics.wkdr(depth, pairs, args.delta, diw=args.diw)
    elif args.probs:
        probs = reconstruct.read_probs_csv(args.probs)
        if len(probs) != len(pairs):
            raise LengthMismatch("probability and pair files differ in length")
        pred = probs.values.argmax(axis=1)
        report = metrics.report_from_predictions(pred, [p.label for p in pairs], diw=args.diw)
    else:
        raise InvalidConfig("eval needs --depth or --probs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (args.report or "report.csv")
    report.write_csv(path)
    print(path.read_text(), end="")


ABLATION_STEPS = (("a", "patches"), ("b", "box"), ("c", "single"))


def cmd_ablate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = _dataset(args.manifest, "test", args.mode)
    labels = test.labels()
    majority = float(np.bincount(labels, minlength=3).max() / len(labels))
    rows = []
    for tag, preset in ABLATION_STEPS:
        model, _ = _train_model(args, preset)
        pred = predict_proba(model, test, args.batch).argmax(axis=1)
        rows.append((tag, "+".join(STREAM_PRESETS[preset]), metrics.accuracy(pred, labels)))
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model", "streams", "accuracy"])
        wr.writerow(["majority", "", "%.4f" % majority])
        for tag, streams, acc in rows:
            wr.writerow([tag, streams, "%.4f" % acc])
    print((out / "ablation.csv").read_text(), end="")


# --- argument parsing -------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--streams", choices=sorted(STREAM_PRESETS), default="all",
                   help="input streams: patches, box (+scale1), single (+masks) or all")
    p.add_argument("--block", choices=BLOCK_KINDS, default="dense", help="scale-stream block")
    p.add_argument("--k", type=int, default=5, help="dense growth rate")
    p.add_argument("--layers", type=int, default=5, help="conv layers per dense block")
    p.add_argument("--iters", type=int, default=2000, help="SGD iterations")
    p.add_argument("--batch", type=int, default=32, help="mini-batch size")
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate (x0.1 at 75%%)")
    p.add_argument("--wd", type=float, default=0.0005, help="weight decay")
    p.add_argument("--mode", choices=("standard", "diw"), default="standard",
                   help="context geometry")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ordinal-depth", description=__doc__.split("\n")[0],
                                     formatter_class=fmt)
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for per-image stages")
    parser.add_argument("--config", help="JSON file of flag values; overrides the command line")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes", formatter_class=fmt)
    p.add_argument("--count", type=int, default=20, help="training scenes")
    p.add_argument("--test-count", type=int, default=5, help="held-out scenes")
    p.add_argument("--size", type=int, default=128, help="scene width and height")
    p.add_argument("--objects", type=int, default=4, help="objects per scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample-pairs", help="superpixels and labeled pairs", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="input manifest (JSON lines)")
    p.add_argument("--n-per-image", type=int, default=1600, help="pairs kept per image")
    p.add_argument("--delta", type=float, default=0.02, help="equality tolerance")
    p.add_argument("--segments", type=int, default=320, help="target superpixel count")
    p.add_argument("--compactness", type=float, default=10.0, help="SLIC compactness")
    p.set_defaults(func=cmd_sample_pairs)

    p = sub.add_parser("extract", help="cache context bundles", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest with pairs")
    p.add_argument("--split", choices=dataio.SPLITS, default=None, help="restrict to a split")
    p.add_argument("--mode", choices=("standard", "diw"), default="standard", help="context geometry")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the classifier", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest with pairs")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="pair probabilities", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="trained model")
    p.add_argument("--manifest", required=True, help="manifest with pairs")
    p.add_argument("--split", choices=dataio.SPLITS, default=None, help="restrict to a split")
    p.add_argument("--batch", type=int, default=64, help="inference batch size")
    p.add_argument("--mode", choices=("standard", "diw"), default="standard", help="context geometry")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("reconstruct", help="solve for a dense depth map (written under OUT/recon)", formatter_class=fmt)
    p.add_argument("--probs", required=True, help="probabilities CSV (i,j,p_eq,p_gt,p_lt)")
    p.add_argument("--image", required=True, help="image the pairs belong to")
    p.add_argument("--labels", required=True, help="superpixel label map (16-bit PGM)")
    p.add_argument("--priors", required=True, help="slack priors JSON")
    p.add_argument("--name", default=None, help="output basename (default: probs file stem)")
    p.add_argument("--tol", type=float, default=1e-8, help="relative energy decrease to stop")
    p.add_argument("--max-iter", type=int, default=20000, help="iteration cap")
    p.add_argument("--k1", type=float, default=0.5, help="color smoothness weight")
    p.add_argument("--k2", type=float, default=0.5, help="equality smoothness weight")
    p.add_argument("--rho", type=float, default=0.1, help="color sensitivity")
    p.add_argument("--lo", type=float, default=0.1, help="lower depth bound")
    p.add_argument("--hi", type=float, default=10.0, help="upper depth bound")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="disagreement rates and accuracy", formatter_class=fmt)
    p.add_argument("--pairs", required=True, help="labeled pairs CSV")
    p.add_argument("--depth", default=None, help="predicted depth (PFM or 16-bit PGM)")
    p.add_argument("--probs", default=None, help="predicted probabilities CSV")
    p.add_argument("--delta", type=float, default=0.02, help="equality tolerance")
    p.add_argument("--diw", action="store_true", help="labels have no EQ class")
    p.add_argument("--report", default=None, help="report file name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="stream ablation table", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest with pairs and a test split")
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        return action.choices[command]


def apply_config(parser, args):
    """Overlay a JSON object of flag values (dest names) onto ``args``."""
    with open(args.config) as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise InvalidConfig(f"{args.config}: expected a JSON object")
    known = {a.dest for a in parser._actions} | {a.dest for a in _subparser(parser, args.command)._actions}
    known -= {"help", "config", "command", "func"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InvalidConfig(f"{args.config}: unknown keys {unknown}")
    for key, value in values.items():
        setattr(args, key, value)
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            apply_config(parser, args)
        args.func(args)
    except (OrdinalDepthError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
