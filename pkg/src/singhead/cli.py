"""Command-line entry point: ``singhead <command> [flags]``.

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric divergence.
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import audio as audio_mod
from . import container, cvae, dataset, generation, headfit, metrics, synthetic, training
from .errors import DataError, SingHeadError, UsageError, ValidationError
from .motion_core import ShapeParams, load_motion, save_motion

log = logging.getLogger("singhead")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, obj):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _backend(name):
    if name == "filterbank":
        return audio_mod.FilterbankBackend()
    if name == "wav2vec2":
        return audio_mod.Wav2Vec2Backend()
    raise ValidationError(f"unknown backend {name!r}")


def _load_features(path):
    meta, arrays = container.read_arrays(path)
    if meta.get("kind") != "features" or "features" not in arrays:
        raise DataError(f"{path}: not a feature file")
    return arrays["features"].astype(np.float64)


def cmd_features(args):
    clip = audio_mod.load_wav(args.audio)
    backend = _backend(args.backend)
    feats = audio_mod.features_for_motion(clip, args.fps, backend, args.frames)
    container.write_arrays(args.out, {"features": feats}, {
        "kind": "features", "fps": args.fps, "backend": args.backend, "T": feats.shape[0]})
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {args.out}")


def cmd_segment(args):
    inv = _read_json(args.inventory)
    items = inv["records"] if isinstance(inv, dict) else inv
    try:
        records = [dataset.SequenceRecord(str(r["id"]), float(r["duration"]), float(r.get("fps", args.fps)),
                                          r.get("audio", ""), r.get("motion", "")) for r in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.inventory}: bad record ({exc})") from None
    clips = dataset.segment(records, args.seconds, args.fps)
    _write_json(args.out, {
        "config": {"seconds": args.seconds, "fps": args.fps},
        "n_records": len(records),
        "n_clips": len(clips),
        "clips": [dict(asdict(c), id=c.id) for c in clips],
    })
    print(f"{len(clips)} clips from {len(records)} records")


def cmd_split(args):
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if args.clips:
        data = _read_json(args.clips)
        items = data["clips"] if isinstance(data, dict) else data
        ids = [c["id"] if isinstance(c, dict) else str(c) for c in items]
    elif args.n is not None:
        ids = [f"clip-{i:06d}" for i in range(args.n)]
    else:
        raise UsageError("split needs --clips or --n")
    train, val, test = dataset.split(ids, ratios, args.seed)
    _write_json(args.out, {
        "config": {"seed": args.seed, "ratios": list(ratios), "n": len(ids)},
        "counts": {"train": len(train), "val": len(val), "test": len(test)},
        "train": train, "val": val, "test": test,
    })
    print(f"train={len(train)} val={len(val)} test={len(test)}")


def cmd_cropplan(args):
    data = _read_json(args.track)
    try:
        track = dataset.CropTrack(np.asarray(data["landmarks"], dtype=float), tuple(data["frame_size"]),
                                  int(data.get("check_every", 6)), int(data.get("n_frames", 0)))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{args.track}: bad track ({exc})") from None
    plan = dataset.crop_plan(track, args.margin, args.threshold, args.output_size)
    _write_json(args.out, {
        "config": {"margin": args.margin, "threshold": args.threshold, "output_size": args.output_size,
                   "check_every": track.check_every},
        "segments": [s.to_dict() for s in plan],
    })
    print(f"{len(plan)} segment(s)")


def _training_data(args, d_a):
    if args.synthetic:
        return synthetic.make_dataset(args.synthetic, T=args.synthetic_frames, d_a=d_a, seed=args.seed)
    if not args.data:
        raise UsageError("train needs --data or --synthetic")
    items = _read_json(args.data)
    base = os.path.dirname(os.path.abspath(args.data))
    out = []
    for item in items:
        motion, shape = load_motion(os.path.join(base, item["motion"]))
        if "features" in item:
            feats = audio_mod.align_to_frames(_load_features(os.path.join(base, item["features"])), len(motion))
        else:
            clip = audio_mod.load_wav(os.path.join(base, item["audio"]))
            feats = audio_mod.features_for_motion(clip, motion.fps, None, len(motion))
        out.append(training.Example(feats, shape, motion))
    return out


def cmd_train(args):
    model_cfg, train_cfg = cvae.ModelConfig(), training.TrainConfig()
    if args.config:
        model_cfg, train_cfg = training.load_config(args.config, model_cfg, train_cfg)
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "checkpoint_every")
                 if getattr(args, k) is not None}
    train_cfg = replace(train_cfg, seed=args.seed, **overrides)
    if args.d is not None:
        model_cfg = replace(model_cfg, d=args.d)

    data = _training_data(args, model_cfg.d_a)
    model = training.build_model(model_cfg, args.seed)
    result = training.train(model, data, train_cfg, os.path.join(args.out, "checkpoints"), args.resume)
    cvae.save_checkpoint(os.path.join(args.out, "model.ckpt"), result.model)
    training.write_history_csv(os.path.join(args.out, "losses.csv"), result.history)
    _write_json(os.path.join(args.out, "run.json"), {
        "model_config": asdict(model_cfg),
        "train_config": training._config_dict(train_cfg),
        "n_examples": len(data),
        "final": result.history[-1],
    })
    print(f"trained {train_cfg.epochs} epochs; final total loss {result.history[-1]['total']:.6g}")


def _shape_arg(path):
    if not path:
        return ShapeParams.zeros()
    if path.endswith(".json"):
        return ShapeParams(_read_json(path))
    return load_motion(path)[1]


def cmd_generate(args):
    model = cvae.load_checkpoint(args.checkpoint)
    shape = _shape_arg(args.shape)
    if args.features:
        source = _load_features(args.features)
    elif args.audio:
        source = audio_mod.load_wav(args.audio)
    else:
        raise UsageError("generate needs --audio or --features")
    samples = generation.generate(model, source, shape, args.samples, args.seed, args.fps)
    generation.write_samples(samples, shape, args.out, args.seed, {
        "config": {"checkpoint": args.checkpoint, "samples": args.samples, "fps": args.fps,
                   "audio": args.audio, "features": args.features, "shape": args.shape}})
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_fit(args):
    data = _read_json(args.tracks)
    try:
        observed = np.asarray(data["landmarks"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.tracks}: bad landmark track ({exc})") from None
    model = headfit.load_head_model(args.model) if args.model else headfit.make_toy_model()
    if args.shape:
        shape = _shape_arg(args.shape)
    elif "beta" in data:
        shape = ShapeParams(data["beta"])
    else:
        shape = ShapeParams.zeros()
    fit = headfit.fit_sequence(model, shape.beta, observed, lambda_s=args.lambda_s)
    fps = float(data.get("fps", 30.0))
    save_motion(fit.motion(fps), shape, args.out, identity=data.get("identity", ""))
    _write_json(args.out + ".cameras.json", {
        "config": {"lambda_s": args.lambda_s, "model": args.model or "toy-default"},
        "rmse_px": fit.rmse,
        "converged": fit.converged,
        "cameras": [{"scale": c.scale, "translation": list(c.translation)} for c in fit.cameras],
    })
    print(f"fitted {len(observed)} frames, reprojection RMSE {fit.rmse:.4f}px")


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_evaluate(args):
    if args.mode == "3d":
        if not args.gt or not args.samples:
            raise UsageError("3d evaluation needs --gt and --samples")
        gt, _ = load_motion(args.gt)
        samples = [load_motion(p)[0] for p in args.samples]
        row = {"n": len(samples), "MinDist": metrics.min_dist(samples, gt),
               "MeanDist": metrics.mean_dist(samples, gt),
               "APD": metrics.apd(samples) if len(samples) > 1 else None}
    else:
        row = {"LMD": None, "FID": None, "SSIM": None}
        if args.pred_landmarks and args.gt_landmarks:
            row["LMD"] = metrics.lmd(np.asarray(_read_json(args.pred_landmarks)["landmarks"], float),
                                     np.asarray(_read_json(args.gt_landmarks)["landmarks"], float))
        if args.pred_embeds and args.gt_embeds:
            row["FID"] = metrics.fid(np.load(args.pred_embeds), np.load(args.gt_embeds))
        if args.pred_images and args.gt_images:
            a, b = np.load(args.pred_images), np.load(args.gt_images)
            if a.shape != b.shape:
                raise DataError(f"image stacks differ in shape: {a.shape} vs {b.shape}")
            row["SSIM"] = float(np.mean([metrics.ssim(x, y, args.data_range) for x, y in zip(a, b)]))
        if all(v is None for v in row.values()):
            raise UsageError("2d evaluation needs landmark, embedding or image inputs")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(row))
        writer.writerow([v if isinstance(v, int) else _fmt(v) for v in row.values()])
    print(", ".join(f"{k}={v}" for k, v in row.items()))


def build_parser():
    p = argparse.ArgumentParser(prog="singhead", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("features", help="audio WAV -> frame-aligned feature file")
    s.add_argument("--audio", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--frames", type=int)
    s.add_argument("--backend", default="filterbank", choices=["filterbank", "wav2vec2"])
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("segment", help="cut records into fixed-length clips")
    s.add_argument("--inventory", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seconds", type=float, default=dataset.SEGMENT_SECONDS)
    s.add_argument("--fps", type=float, default=30.0)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("split", help="seeded train/val/test split")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--clips")
    g.add_argument("--n", type=int)
    s.add_argument("--ratios", default="0.80,0.05,0.15")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("cropplan", help="plan square crop segments from a landmark track")
    s.add_argument("--track", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--margin", type=float, default=0.25)
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--output-size", type=int, default=1024)
    s.set_defaults(func=cmd_cropplan)

    s = sub.add_parser("train", help="train the motion CVAE")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--synthetic", type=int, default=0, help="train on N synthetic sequences")
    s.add_argument("--synthetic-frames", type=int, default=60)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample motion sequences from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--audio")
    s.add_argument("--features")
    s.add_argument("--shape", help="motion file or JSON list of 100 shape coefficients")
    s.add_argument("--fps", type=float, default=30.0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("fit", help="fit expression/pose/camera to 2D landmark tracks")
    s.add_argument("--tracks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model")
    s.add_argument("--shape")
    s.add_argument("--lambda-s", type=float, default=0.1)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("evaluate", help="score table as CSV")
    s.add_argument("--mode", choices=["3d", "2d"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gt")
    s.add_argument("--samples", nargs="*")
    s.add_argument("--pred-landmarks")
    s.add_argument("--gt-landmarks")
    s.add_argument("--pred-embeds")
    s.add_argument("--gt-embeds")
    s.add_argument("--pred-images")
    s.add_argument("--gt-images")
    s.add_argument("--data-range", type=float, default=255.0)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return exc.code if isinstance(exc.code, int) else UsageError.exit_code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SingHeadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
