"""Command-line pipeline: synth, train, fit-detector, detect, eval, sweep.

Every command reads one JSON config (--config), honors the global --seed /
--threads / --out flags, writes its artifacts plus an atomically-replaced
manifest.json, and is reproducible from (config, seed) at --threads 1.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, backend
from . import config as cfgmod
from . import diffusion, evaluation, features, iforest, imageio
from .errors import ConfigurationError, ContractError, DefectscanError
from .patching import PatchDataset, extract_patches, stitch_noise_map
from .unet import load_checkpoint, save_checkpoint, unet_init


def _write_manifest(out_dir, payload):
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    os.replace(tmp, path)
    return path


def _manifest_skeleton(command, cfg, args):
    return {
        "command": command,
        "version": __version__,
        "backend": backend.active_backend(),
        "seeds": {s: cfg[s]["seed"] for s in ("unet", "train", "forest", "detect", "synth")},
        "threads": args.threads,
        "config": cfg,
        "timings": {},
        "counts": {},
        "artifacts": {},
        "warnings": [],
    }


def _list_images(directory):
    if not os.path.isdir(directory):
        raise ConfigurationError(f"not a directory: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    return [os.path.join(directory, n) for n in names]


def _load_images(paths, size, manifest):
    imgs, kept = [], []
    for p in paths:
        try:
            imgs.append(imageio.load_grayscale(p, size=size))
            kept.append(p)
        except Exception as e:  # unreadable file: skip, warn, count
            manifest["warnings"].append(f"skipped unreadable image {p}: {e}")
    manifest["counts"]["images_skipped"] = len(paths) - len(kept)
    return np.asarray(imgs, dtype=np.float32), kept


def _noise_map(model, img01, cfg, sched, image_index, threads):
    """Stitched predicted-noise map for one [0,1] image: one U-Net pass per
    patch per noise draw, fanned out over patch batches."""
    det = cfg["detect"]
    x = imageio.to_model_range(img01)
    grid, patches = extract_patches(x, cfg["patch"]["size"], cfg["patch"]["stride"])
    batch = max(1, cfg["patch"]["batch"])
    spans = [(lo, min(lo + batch, len(patches))) for lo in range(0, len(patches), batch)]

    def run(span_index):
        lo, hi = spans[span_index]
        rng = np.random.default_rng(
            np.random.SeedSequence([det["seed"], image_index, span_index]))
        return diffusion.predict_noise_single_step(
            model, patches[lo:hi, None, :, :], sched, rng,
            t_star=det["t_star"], draws=det["noise_draws"])

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(spans))))
    else:
        results = [run(i) for i in range(len(spans))]
    maps = np.concatenate([r[:, 0] for r in results], axis=0)
    return stitch_noise_map(grid, maps)


def _image_features(model, img01, cfg, sched, image_index, threads, params):
    stitched = _noise_map(model, img01, cfg, sched, image_index, threads)
    return stitched, features.extract_feature_vector(stitched, params)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, args):
    out = args.out or "corpus"
    man = _manifest_skeleton("synth", cfg, args)
    syn = cfg["synth"]
    t0 = time.perf_counter()
    from .datagen import gen_corpus
    rows = gen_corpus(out, syn["n_normal_train"], syn["n_normal_test"],
                      syn["n_anomalous_test"], cfgmod.texture_specs(cfg),
                      cfgmod.defect_specs(cfg), seed=syn["seed"],
                      height=syn["height"], width=syn["width"])
    man["timings"]["generate"] = time.perf_counter() - t0
    man["counts"]["images"] = len(rows)
    man["artifacts"]["corpus"] = out
    man["artifacts"]["labels"] = os.path.join(out, "manifest.csv")
    _write_manifest(out, man)
    print(f"synth: wrote {len(rows)} images under {out}")
    return 0


def cmd_train(cfg, args):
    out = args.out or "run_train"
    os.makedirs(out, exist_ok=True)
    man = _manifest_skeleton("train", cfg, args)
    t0 = time.perf_counter()
    imgs, kept = _load_images(_list_images(args.data_dir), cfg["image"]["size"], man)
    if imgs.size == 0:
        raise ConfigurationError(f"no readable training images in {args.data_dir}")
    dataset = PatchDataset(imageio.to_model_range(imgs), cfg["patch"]["size"],
                           cfg["patch"]["stride"])
    man["timings"]["ingest"] = time.perf_counter() - t0
    man["counts"]["train_images"] = len(kept)
    man["counts"]["train_patches"] = len(dataset)

    model = unet_init(cfgmod.unet_config(cfg), seed=cfg["unet"]["seed"])
    man["counts"]["parameters"] = model.parameter_count
    t0 = time.perf_counter()
    _, history = diffusion.train(model, dataset, cfgmod.train_config(cfg),
                                 cfgmod.schedule(cfg), out_dir=out)
    man["timings"]["train"] = time.perf_counter() - t0
    man["counts"]["train_steps"] = len(history)

    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(model, ckpt, step_count=len(history),
                    extra={"patch_size": cfg["patch"]["size"],
                           "image_size": cfg["image"]["size"]})
    loss_csv = os.path.join(out, "loss.csv")
    diffusion.write_loss_csv(history, loss_csv)
    man["artifacts"]["checkpoint"] = ckpt
    man["artifacts"]["loss_csv"] = loss_csv
    _write_manifest(out, man)
    print(f"train: {len(kept)} images, {len(dataset)} patches, "
          f"{len(history)} steps -> {ckpt}")
    return 0


def cmd_fit_detector(cfg, args):
    out = args.out or "run_fit"
    os.makedirs(out, exist_ok=True)
    man = _manifest_skeleton("fit-detector", cfg, args)
    model, header = load_checkpoint(args.checkpoint)
    _check_patch_size(header, cfg)
    sched = cfgmod.schedule(cfg)
    params = cfgmod.feature_params(cfg)

    imgs, kept = _load_images(_list_images(args.data_dir), cfg["image"]["size"], man)
    if imgs.size == 0:
        raise ConfigurationError(f"no readable images in {args.data_dir}")
    t0 = time.perf_counter()
    vectors = []
    for i in range(imgs.shape[0]):
        _, fv = _image_features(model, imgs[i], cfg, sched, i, args.threads, params)
        vectors.append(fv)
    man["timings"]["features"] = time.perf_counter() - t0
    man["counts"]["train_images"] = len(kept)
    man["counts"]["unet_patch_evals"] = model.eval_count

    t0 = time.perf_counter()
    forest = iforest.fit(vectors, n_estimators=cfg["forest"]["n_estimators"],
                         subsample=cfg["forest"]["subsample"],
                         contamination=cfg["forest"]["contamination"],
                         seed=cfg["forest"]["seed"])
    man["timings"]["fit_forest"] = time.perf_counter() - t0

    forest_path = os.path.join(out, "forest.json")
    iforest.save(forest, forest_path)
    feat_csv = os.path.join(out, "features.csv")
    with open(feat_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "global", "local"])
        for path, fv in zip(kept, vectors):
            writer.writerow([os.path.basename(path), repr(fv.global_l2), repr(fv.local_max_l2)])
    man["artifacts"]["forest"] = forest_path
    man["artifacts"]["features_csv"] = feat_csv
    _write_manifest(out, man)
    print(f"fit-detector: {len(kept)} images -> {forest_path} "
          f"(threshold {forest.score_threshold:.4f})")
    return 0


def _check_patch_size(header, cfg):
    trained = header.get("extra", {}).get("patch_size")
    p = cfg["patch"]["size"]
    if trained is not None and trained != p:
        raise ConfigurationError(
            f"patch size mismatch: checkpoint was trained on {trained}, "
            f"config requests {p}")


def cmd_detect(cfg, args):
    out = args.out or "run_detect"
    os.makedirs(out, exist_ok=True)
    man = _manifest_skeleton("detect", cfg, args)
    model, header = load_checkpoint(args.checkpoint)
    _check_patch_size(header, cfg)
    forest = iforest.load(args.forest)
    sched = cfgmod.schedule(cfg)
    params = cfgmod.feature_params(cfg)

    paths = []
    for d in args.image_dir:
        paths.extend(_list_images(d))
    if not paths:
        raise ConfigurationError(f"no images found under {args.image_dir}")

    heat_dir = os.path.join(out, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    rows = []
    patch_evals_before = model.eval_count
    total_patches = 0
    for i, path in enumerate(paths):
        t0 = time.perf_counter()
        img = imageio.load_grayscale(path, size=cfg["image"]["size"])
        stitched, fv = _image_features(model, img, cfg, sched, i, args.threads, params)
        score = iforest.score(forest, fv)
        verdict = "anomalous" if score > forest.score_threshold else "normal"
        seconds = time.perf_counter() - t0
        total_patches += int(stitched.coverage.sum() / (cfg["patch"]["size"] ** 2))
        if verdict == "anomalous" or cfg["detect"]["all_heatmaps"] \
                or getattr(args, "all_heatmaps", False):
            hm = features.pixel_heatmap(stitched, params)
            stem = os.path.splitext(os.path.basename(path))[0]
            features.save_heatmap(hm, os.path.join(heat_dir, f"{stem}.png"),
                                  os.path.join(heat_dir, f"{stem}.npy"))
        rows.append([os.path.basename(path), repr(fv.global_l2), repr(fv.local_max_l2),
                     repr(score), verdict, f"{seconds:.6f}"])

    verdicts_csv = os.path.join(out, "verdicts.csv")
    with open(verdicts_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "global", "local", "score", "predicted", "seconds"])
        writer.writerows(rows)
    man["counts"]["images"] = len(paths)
    man["counts"]["patches"] = total_patches
    man["counts"]["unet_patch_evals"] = model.eval_count - patch_evals_before
    man["counts"]["flagged"] = sum(1 for r in rows if r[4] == "anomalous")
    man["artifacts"]["verdicts_csv"] = verdicts_csv
    man["artifacts"]["heatmaps"] = heat_dir
    _write_manifest(out, man)
    print(f"detect: {len(paths)} images, {man['counts']['flagged']} flagged "
          f"-> {verdicts_csv}")
    return 0


def _read_verdicts(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigurationError(f"{path}: empty verdicts file")
    return rows


def _read_labels(path):
    """Label CSV: any file with 'path' (or 'id') and 'label' columns."""
    with open(path) as f:
        rows = list(csv.DictReader(f))
    key = "path" if rows and "path" in rows[0] else "id"
    labels = {}
    for r in rows:
        labels[os.path.basename(r[key])] = int(r["label"])
    return labels


def _join_labels(verdicts, labels):
    joined = []
    for r in verdicts:
        name = os.path.basename(r["id"])
        if name not in labels:
            raise ConfigurationError(f"no label for image {name!r} in labels file")
        joined.append((r, labels[name]))
    return joined


def cmd_eval(cfg, args):
    out = args.out or "run_eval"
    os.makedirs(out, exist_ok=True)
    man = _manifest_skeleton("eval", cfg, args)
    joined = _join_labels(_read_verdicts(args.verdicts), _read_labels(args.labels))
    pairs = [(1 if r["predicted"] == "anomalous" else 0, actual) for r, actual in joined]
    report = evaluation.compute_metrics(pairs)
    man["warnings"].extend(report.warnings)

    metrics_csv = os.path.join(out, "metrics.csv")
    evaluation.write_metrics_csv(report, metrics_csv)
    verdicts_csv = os.path.join(out, "verdicts.csv")
    with open(verdicts_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "global", "local", "score", "predicted", "actual"])
        for r, actual in joined:
            writer.writerow([r["id"], r["global"], r["local"], r["score"],
                             r["predicted"], actual])
    man["counts"]["images"] = len(joined)
    man["artifacts"]["metrics_csv"] = metrics_csv
    man["artifacts"]["verdicts_csv"] = verdicts_csv
    _write_manifest(out, man)
    print(f"eval: accuracy={report.accuracy:.4f} precision={report.precision:.4f} "
          f"recall={report.recall:.4f} f1={report.f1:.4f}")
    return 0


def _parse_grid(text):
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"grid {text!r}: expected start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ConfigurationError(f"grid step must be > 0, got {step}")
        values, v, i = [], start, 0
        while v <= stop + 1e-9:
            values.append(round(v, 10))
            i += 1
            v = start + i * step
        return values
    return [float(p) for p in text.split(",")]


def cmd_sweep(cfg, args):
    out = args.out or "run_sweep"
    os.makedirs(out, exist_ok=True)
    man = _manifest_skeleton("sweep", cfg, args)
    forest = iforest.load(args.forest)
    joined = _join_labels(_read_verdicts(args.verdicts), _read_labels(args.labels))
    scores = [float(r["score"]) for r, _ in joined]
    actual = [a for _, a in joined]
    grid = _parse_grid(args.grid)
    rows = evaluation.sensitivity_sweep(scores, actual, forest.train_scores, grid)
    sweep_csv = os.path.join(out, "sweep.csv")
    evaluation.write_sweep_csv(rows, sweep_csv)
    man["counts"]["grid_points"] = len(rows)
    man["artifacts"]["sweep_csv"] = sweep_csv
    _write_manifest(out, man)
    print(f"sweep: {len(rows)} contamination levels -> {sweep_csv}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="defectscan",
        description="Single-pass diffusion noise-map defect detection")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override every stage seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="patch-inference worker threads (1 = fully serial)")
    parser.add_argument("--out", help="output directory for this run")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic labeled corpus")

    p = sub.add_parser("train", help="train the noise predictor on normal images")
    p.add_argument("data_dir", help="directory of normal training PNGs")

    p = sub.add_parser("fit-detector", help="fit the isolation forest on training features")
    p.add_argument("data_dir", help="directory of normal training PNGs")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("detect", help="score images and emit verdicts + heatmaps")
    p.add_argument("image_dir", nargs="+", help="directories of PNGs to score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--forest", required=True)
    p.add_argument("--all-heatmaps", action="store_true",
                   help="emit heatmaps for every image, not only flagged ones")

    p = sub.add_parser("eval", help="compute metrics from verdicts and labels")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--labels", required=True)

    p = sub.add_parser("sweep", help="contamination sensitivity sweep (rethreshold only)")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--forest", required=True)
    p.add_argument("--grid", default="0:0.5:0.05",
                   help="start:stop:step or comma list of contamination levels")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "fit-detector": cmd_fit_detector,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        if args.seed is not None:
            cfgmod.override_seed(cfg, args.seed)
        if args.threads < 1:
            raise ConfigurationError(f"--threads must be >= 1, got {args.threads}")
        return _COMMANDS[args.command](cfg, args)
    except (ConfigurationError, ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DefectscanError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything unexpected is a runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
