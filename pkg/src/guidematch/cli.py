"""Command-line surface.

Subcommands: synth, train, coarse-match, match, eval-pck, eval-pose,
grad-check. Exit codes: 0 success, 1 usage error, 2 runtime failure. Every
command accepts --seed (beaten only by an explicit value; the
GUIDEMATCH_SEED environment variable overrides the built-in default),
--config and --out. Outputs are byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from guidematch import coarse_matcher as cm
from guidematch import evaluation as ev
from guidematch import keypoint_matching as km
from guidematch import supervision as sup
from guidematch.geometry import SceneConfig, generate_scene, load_scene, load_scene_dir, save_scene


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    env = os.environ.get("GUIDEMATCH_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"GUIDEMATCH_SEED must be an integer, got {env!r}") from exc
    return 0


def _parse_kv_file(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="rng seed (beats GUIDEMATCH_SEED)")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", default=None, help="output path or directory")
    p.add_argument("--threads", type=int, default=1, help="parallelism cap (runs are serial)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="guidematch", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate synthetic scene archives")
    _add_common(p)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--planes", type=int, default=None)
    p.add_argument("--repeated", type=int, default=None, help="repeated texture stamps per scene")

    p = subs.add_parser("train", help="train the coarse matcher")
    _add_common(p)
    p.add_argument("--mode", choices=sup.MODES, default=None)
    p.add_argument("--dataset", default=None, help="scene archive directory")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--freeze-steps", type=int, default=None)

    p = subs.add_parser("coarse-match", help="write the coarse match field of a pair")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--direction", choices=("AB", "BA"), default="AB")
    p.add_argument("--max-side", type=int, default=497)

    p = subs.add_parser("match", help="match keypoints of a scene pair, write CSV")
    _add_common(p)
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--variant", default="raw", help="|".join(ev.POSE_VARIANTS))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--window", type=float, default=16.0)
    p.add_argument("--window-frame", choices=("resized", "original"), default="resized")
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--band", type=float, default=3.0)
    p.add_argument("--max-side", type=int, default=497)
    p.add_argument("--max-keypoints", type=int, default=300)

    p = subs.add_parser("eval-pck", help="coarse-match accuracy over a scene set")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--thresholds", default="8,16,32")
    p.add_argument("--max-side", type=int, default=497)

    p = subs.add_parser("eval-pose", help="two-view pose accuracy over a scene set")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", default="mutual", help="|".join(ev.POSE_VARIANTS))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ransac-thresholds", default="1.0")
    p.add_argument("--pose-thresholds", default="5,10,20")
    p.add_argument("--window", type=float, default=16.0)
    p.add_argument("--window-frame", choices=("resized", "original"), default="resized")
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--band", type=float, default=3.0)
    p.add_argument("--max-side", type=int, default=497)
    p.add_argument("--max-keypoints", type=int, default=300)
    p.add_argument("--keypoint-source", choices=("detect", "gt"), default="detect")
    p.add_argument("--keypoint-noise", type=float, default=0.0)
    p.add_argument("--descriptor-corruption", type=float, default=0.0)

    p = subs.add_parser("grad-check", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=20)

    return parser


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _require_out(args, name="--out") -> Path:
    if args.out is None:
        raise UsageError(f"{name} is required for this command")
    return Path(args.out)


def _cmd_synth(args, seed: int) -> int:
    out = _require_out(args)
    overrides = {}
    if args.config:
        values = _parse_kv_file(args.config)
        for key in (
            "width", "height", "n_planes", "repeated_stamps", "n_gt_points", "stamp_px", "stride",
        ):
            if key in values:
                overrides[key] = int(values[key])
        for key in ("texel_px", "background_amplitude", "tilt_max", "stamp_min_sep_px"):
            if key in values:
                overrides[key] = float(values[key])
    if args.width is not None:
        overrides["width"] = args.width
    if args.height is not None:
        overrides["height"] = args.height
    if args.planes is not None:
        overrides["n_planes"] = args.planes
    if args.repeated is not None:
        overrides["repeated_stamps"] = args.repeated
    config = SceneConfig(**overrides)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_scene(config, seed + i)
        save_scene(out / f"scene_{i:04d}", scene)
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def _cmd_train(args, seed: int) -> int:
    overrides = dict(
        mode=args.mode,
        dataset_dir=args.dataset,
        out_dir=args.out,
        iterations=args.iterations,
        lr=args.lr,
        freeze_steps=args.freeze_steps,
        seed=args.seed,  # only an explicit flag overrides the config file
    )
    if args.config:
        config = sup.TrainConfig.from_file(args.config, **overrides)
    else:
        missing = [k for k in ("mode", "dataset_dir", "out_dir") if overrides.get(k) is None]
        if missing:
            raise UsageError(f"train needs --config or flags for: {', '.join(missing)}")
        config = sup.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    result = sup.train(config)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss curve: {Path(config.out_dir) / 'loss_curve.csv'}")
    return 0


def _cmd_coarse_match(args, seed: int) -> int:
    out = _require_out(args)
    model = cm.CoarseModel.load(args.checkpoint)
    scene = load_scene(args.scene_dir)
    field = cm.compute_match_field(model, scene.image_a, scene.image_b, args.direction, args.max_side)
    out.parent.mkdir(parents=True, exist_ok=True)
    cm.write_match_field(out, field)
    print(f"wrote {field.target_cells.shape[0] * field.target_cells.shape[1]} cells to {out}")
    return 0


def _cmd_match(args, seed: int) -> int:
    out = _require_out(args)
    scene = load_scene(args.scene_dir)
    model = cm.CoarseModel.load(args.checkpoint) if args.checkpoint else None
    matcher = ev.make_matcher(
        args.variant, model, args.window, args.window_frame, args.ratio, args.band, args.max_side
    )
    kps_a = km.detect_keypoints(scene.image_a, args.max_keypoints)
    kps_b = km.detect_keypoints(scene.image_b, args.max_keypoints)
    feats = ev.PairFeatures(
        kps_a, km.describe(scene.image_a, kps_a), kps_b, km.describe(scene.image_b, kps_b)
    )
    matches = matcher(scene, feats, np.random.default_rng(seed))
    out.parent.mkdir(parents=True, exist_ok=True)
    km.save_matches(out, matches, feats.kps_a, feats.kps_b)
    print(f"wrote {len(matches)} matches to {out}")
    return 0


def _cmd_eval_pck(args, seed: int) -> int:
    out = _require_out(args)
    model = cm.CoarseModel.load(args.checkpoint)
    scenes = load_scene_dir(args.dataset)
    thresholds = _floats(args.thresholds)
    meta = {
        "checkpoint": Path(args.checkpoint).name,
        "seed": seed,
        "config_hash": ev.config_digest(
            {"thresholds": args.thresholds, "max_side": args.max_side, "dataset": Path(args.dataset).name}
        ),
    }
    report = ev.eval_pck(model, scenes, thresholds, args.max_side, metadata=meta)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "pck.csv", "rows")
    agg = report.aggregates[0]
    print(", ".join(f"pck@{t:g} = {agg[f'pck_{t:g}']:.4f}" for t in thresholds))
    print(f"report: {out / 'pck.csv'}")
    return 0


def _cmd_eval_pose(args, seed: int) -> int:
    out = _require_out(args)
    scenes = load_scene_dir(args.dataset)
    model = cm.CoarseModel.load(args.checkpoint) if args.checkpoint else None
    if args.variant in ("guided",) and model is None:
        raise UsageError("guided variant needs --checkpoint")
    pose_thresholds = _floats(args.pose_thresholds)
    meta = {
        "variant": args.variant,
        "seed": seed,
        "checkpoint": Path(args.checkpoint).name if args.checkpoint else "none",
        "config_hash": ev.config_digest(
            {
                "variant": args.variant,
                "ransac": args.ransac_thresholds,
                "pose": args.pose_thresholds,
                "window": args.window,
                "ratio": args.ratio,
                "band": args.band,
                "noise": args.keypoint_noise,
                "corruption": args.descriptor_corruption,
            }
        ),
    }
    report = ev.eval_pose(
        scenes,
        args.variant,
        model=model,
        ransac_thresholds=_floats(args.ransac_thresholds),
        pose_thresholds=pose_thresholds,
        window_px=args.window,
        window_frame=args.window_frame,
        ratio=args.ratio,
        band_px=args.band,
        max_side=args.max_side,
        max_keypoints=args.max_keypoints,
        keypoint_source=args.keypoint_source,
        keypoint_noise_px=args.keypoint_noise,
        descriptor_corruption=args.descriptor_corruption,
        seed=seed,
        metadata=meta,
    )
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "pose_pairs.csv", "rows")
    report.write_csv(out / "pose_summary.csv", "aggregates")
    for agg in report.aggregates:
        stats = ", ".join(f"auc@{t:g} = {agg[f'auc_{t:g}']:.4f}" for t in pose_thresholds)
        print(f"ransac {agg['ransac_px']:g} px: {stats}, fm_recall = {agg['fm_recall']:.4f}")
    print(f"reports: {out / 'pose_pairs.csv'}, {out / 'pose_summary.csv'}")
    return 0


def _cmd_grad_check(args, seed: int) -> int:
    from guidematch.gradsuite import run_gradient_suite

    results = run_gradient_suite(n_seeds=args.seeds)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:28s} max_rel_err {r.max_rel_error:.3e}  seeds {r.seeds}  {status}")
        failed |= not r.passed
    return 2 if failed else 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "coarse-match": _cmd_coarse_match,
    "match": _cmd_match,
    "eval-pck": _cmd_eval_pck,
    "eval-pose": _cmd_eval_pose,
    "grad-check": _cmd_grad_check,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        seed = args.seed if args.seed is not None else _default_seed()
        return _COMMANDS[args.command](args, seed)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
