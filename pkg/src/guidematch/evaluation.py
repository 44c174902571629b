"""Evaluation protocols: coarse-match PCK and two-view pose AUC.

Reports are plain CSV with per-pair rows plus aggregate rows recomputed
from them; everything is seeded per pair, so a fixed configuration is
byte-reproducible. Wall-clock metadata is deliberately kept out of the
artifacts for the same reason.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from guidematch import coarse_matcher as cm
from guidematch import keypoint_matching as km
from guidematch import robust_pose as rp
from guidematch.geometry import SyntheticScene, pose_error
from guidematch.geometry.scene import trace_rays

POSE_VARIANTS = ("raw", "mutual", "ratio", "ratio+mutual", "guided", "model-guided")
FM_CORRECT_SAMPSON_PX = 3.0


@dataclass
class EvalReport:
    rows: list[dict]
    aggregates: list[dict]
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path, which: str = "rows") -> None:
        data = self.rows if which == "rows" else self.aggregates
        if not data:
            raise ValueError("nothing to write")
        header = list(data[0])
        lines = [f"# {k} = {v}" for k, v in sorted(self.metadata.items())]
        lines.append(",".join(header))
        for row in data:
            lines.append(",".join(_format_cell(row[k]) for k in header))
        Path(path).write_text("\n".join(lines) + "\n")


def _format_cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def config_digest(parts: dict) -> str:
    text = ";".join(f"{k}={parts[k]}" for k in sorted(parts))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


# -- coarse matching accuracy -------------------------------------------------


def pck_fractions(distances: np.ndarray, thresholds) -> list[float]:
    """Fraction of distances strictly below each threshold."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no distances to evaluate")
    return [float((d < t).mean()) for t in thresholds]


def eval_pck(
    model: cm.CoarseModel,
    scenes: list[SyntheticScene],
    thresholds=(8.0, 16.0, 32.0),
    max_side: int = 497,
    metadata: dict | None = None,
) -> EvalReport:
    """Coarse-match accuracy against each scene's ground-truth pairs.

    Distances are measured in resized-image pixels between the interpolated
    coarse match of the A point and the true B point.
    """
    thresholds = list(thresholds)
    rows = []
    for scene in scenes:
        image_a, scale_a = cm.resize_image(scene.image_a, max_side, model.stride)
        image_b, scale_b = cm.resize_image(scene.image_b, max_side, model.stride)
        vol = cm.compute_volume(model, image_a, image_b)
        fld = cm.extract_matches(vol, "AB")
        pts_a = scene.gt_points[:, :2] * scale_a
        pts_b = scene.gt_points[:, 2:] * scale_b
        mapped = cm.interpolate_matches(fld, pts_a)
        d = np.hypot(mapped[:, 0] - pts_b[:, 0], mapped[:, 1] - pts_b[:, 1])
        row = {"scene": scene.seed, "n_points": len(d)}
        for t, frac in zip(thresholds, pck_fractions(d, thresholds)):
            row[f"below_{t:g}"] = int((d < t).sum())
            row[f"pck_{t:g}"] = frac
        rows.append(row)
    total = sum(r["n_points"] for r in rows)
    agg = {"scene": "ALL", "n_points": total}
    for t in thresholds:
        below = sum(r[f"below_{t:g}"] for r in rows)
        agg[f"below_{t:g}"] = below
        agg[f"pck_{t:g}"] = below / total
    return EvalReport(rows, [agg], metadata or {})


# -- pose accuracy -------------------------------------------------------------


def pose_auc(errors, thresholds) -> list[float]:
    """Exact integral of the step recall curve, normalized per threshold.

    Failures must be encoded as infinite errors; they depress recall without
    being dropped.
    """
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise ValueError("no errors to integrate")
    n = len(errs)
    finite = np.sort(errs[np.isfinite(errs)])
    out = []
    for tau in thresholds:
        pts = finite[finite <= tau]
        area = 0.0
        prev = 0.0
        count = 0
        for i, e in enumerate(pts):
            area += (e - prev) * (count / n)
            prev = e
            count = i + 1
        area += (tau - prev) * (count / n)
        out.append(area / tau)
    return out


@dataclass
class PairFeatures:
    kps_a: list
    desc_a: km.DescriptorSet
    kps_b: list
    desc_b: km.DescriptorSet


MatcherFn = Callable[[SyntheticScene, PairFeatures, np.random.Generator], km.MatchSet]


def _guided_fields(model: cm.CoarseModel, scene: SyntheticScene, max_side: int):
    image_a, scale_a = cm.resize_image(scene.image_a, max_side, model.stride)
    image_b, scale_b = cm.resize_image(scene.image_b, max_side, model.stride)
    vol = cm.compute_volume(model, image_a, image_b)
    ab = cm.extract_matches(vol, "AB")
    ab.scale_src, ab.scale_tgt = scale_a, scale_b
    ba = cm.extract_matches(vol, "BA")
    ba.scale_src, ba.scale_tgt = scale_b, scale_a
    return ab, ba


def make_matcher(
    variant: str | MatcherFn,
    model: cm.CoarseModel | None = None,
    window_px: float = 16.0,
    window_frame: str = "resized",
    ratio: float | None = None,
    band_px: float = 3.0,
    max_side: int = 497,
) -> MatcherFn:
    """Build the match-and-prune chain for an evaluation variant.

    The guided variants apply the mutual check between the two matching
    directions; `ratio` adds a ratio test before it when set. The guidance
    window is interpreted in resized-image pixels by default and converted
    through the field's scales (`window_frame="original"` skips that).
    """
    if callable(variant):
        return variant

    def raw_chain(scene, feats, rng, mutual):
        ab = km.match_raw(feats.desc_a, feats.desc_b)
        if ratio is not None:
            ab = km.ratio_test(ab, ratio)
        if not mutual:
            return ab
        ba = km.match_raw(feats.desc_b, feats.desc_a)
        if ratio is not None:
            ba = km.ratio_test(ba, ratio)
        return km.mutual_check(ab, ba)

    if variant == "raw":
        return lambda scene, feats, rng: raw_chain(scene, feats, rng, mutual=False)
    if variant == "mutual":
        return lambda scene, feats, rng: raw_chain(scene, feats, rng, mutual=True)
    if variant == "ratio":
        if ratio is None:
            raise ValueError("ratio variant needs a ratio value")
        return lambda scene, feats, rng: raw_chain(scene, feats, rng, mutual=False)
    if variant == "ratio+mutual":
        if ratio is None:
            raise ValueError("ratio+mutual variant needs a ratio value")
        return lambda scene, feats, rng: raw_chain(scene, feats, rng, mutual=True)
    if variant == "guided":
        if model is None:
            raise ValueError("guided variant needs a coarse model checkpoint")

        def guided(scene, feats, rng):
            fld_ab, fld_ba = _guided_fields(model, scene, max_side)
            if window_frame == "resized":
                sb = 0.5 * (fld_ab.scale_tgt[0] + fld_ab.scale_tgt[1])
                sa = 0.5 * (fld_ba.scale_tgt[0] + fld_ba.scale_tgt[1])
                w_ab = window_px / sb
                w_ba = window_px / sa
            else:
                w_ab = w_ba = window_px
            ab = km.match_guided(feats.kps_a, feats.desc_a, feats.kps_b, feats.desc_b, fld_ab, w_ab)
            ba = km.match_guided(feats.kps_b, feats.desc_b, feats.kps_a, feats.desc_a, fld_ba, w_ba)
            if ratio is not None:
                ab = km.ratio_test(ab, ratio)
                ba = km.ratio_test(ba, ratio)
            return km.mutual_check(ab, ba)

        return guided
    if variant == "model-guided":

        def model_guided(scene, feats, rng, override=None):
            ab = km.match_model_guided(
                feats.kps_a, feats.desc_a, feats.kps_b, feats.desc_b, band_px, model_override=override
            )
            ba = km.match_model_guided(
                feats.kps_b, feats.desc_b, feats.kps_a, feats.desc_a, band_px,
                model_override=None if override is None else override.transposed(),
            )
            if ratio is not None:
                ab = km.ratio_test(ab, ratio)
                ba = km.ratio_test(ba, ratio)
            return km.mutual_check(ab, ba)

        return model_guided
    raise ValueError(f"unknown variant {variant!r}, expected one of {POSE_VARIANTS}")


def corrupt_features(feats: PairFeatures, rng: np.random.Generator, keypoint_noise_px: float, descriptor_corruption: float) -> PairFeatures:
    """Perturb keypoint positions and replace a fraction of descriptors.

    Used to stress matching pipelines: position noise is isotropic gaussian,
    corrupted descriptors become random unit vectors.
    """
    def corrupt(kps, desc):
        kps2 = [km.Keypoint(k.x, k.y, k.scale, k.response) for k in kps]
        if keypoint_noise_px > 0:
            noise = rng.normal(0.0, keypoint_noise_px, size=(len(kps2), 2))
            for k, (dx, dy) in zip(kps2, noise):
                k.x += dx
                k.y += dy
        vecs = desc.vectors.copy()
        if descriptor_corruption > 0 and len(vecs):
            hit = rng.random(len(vecs)) < descriptor_corruption
            fresh = rng.standard_normal((int(hit.sum()), vecs.shape[1]))
            norms = np.linalg.norm(fresh, axis=1, keepdims=True)
            vecs[hit] = fresh / np.maximum(norms, 1e-12)
        return kps2, km.DescriptorSet(vecs)

    ka, da = corrupt(feats.kps_a, feats.desc_a)
    kb, db = corrupt(feats.kps_b, feats.desc_b)
    return PairFeatures(ka, da, kb, db)


def eval_pose(
    scenes: list[SyntheticScene],
    variant: str | MatcherFn,
    model: cm.CoarseModel | None = None,
    ransac_thresholds=(1.0,),
    pose_thresholds=(5.0, 10.0, 20.0),
    window_px: float = 16.0,
    window_frame: str = "resized",
    ratio: float | None = None,
    band_px: float = 3.0,
    max_side: int = 497,
    max_keypoints: int = 300,
    keypoint_source: str = "detect",
    keypoint_noise_px: float = 0.0,
    descriptor_corruption: float = 0.0,
    seed: int = 0,
    metadata: dict | None = None,
) -> EvalReport:
    """Match each pair, estimate the essential matrix per RANSAC threshold,
    recover the pose, and aggregate pose AUC plus fundamental-matrix recall.

    Per-pair failures (too few matches, degenerate estimation, no cheirality
    majority) count as infinite pose error and an incorrect fundamental
    matrix; they never abort the sweep. An estimated fundamental matrix is
    deemed correct when its worst Sampson error over the scene's held-out
    ground-truth pairs stays below 3 px.

    ``keypoint_source="gt"`` places keypoints at the scene's exact
    ground-truth correspondences instead of running the detector, which is
    the noiseless sanity mode; detector localization error otherwise bounds
    the achievable pose accuracy.
    """
    matcher = make_matcher(variant, model, window_px, window_frame, ratio, band_px, max_side)
    ransac_thresholds = list(ransac_thresholds)
    pose_thresholds = list(pose_thresholds)
    rows = []
    for pair_index, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, pair_index]))
        if keypoint_source == "gt":
            kps_a = [km.Keypoint(x, y, 9.0, 1.0) for x, y in scene.gt_points[:, :2]]
            kps_b = [km.Keypoint(x, y, 9.0, 1.0) for x, y in scene.gt_points[:, 2:]]
        elif keypoint_source == "detect":
            kps_a = km.detect_keypoints(scene.image_a, max_keypoints)
            kps_b = km.detect_keypoints(scene.image_b, max_keypoints)
        else:
            raise ValueError(f"keypoint_source must be 'detect' or 'gt', got {keypoint_source!r}")
        feats = PairFeatures(
            kps_a, km.describe(scene.image_a, kps_a), kps_b, km.describe(scene.image_b, kps_b)
        )
        if keypoint_noise_px or descriptor_corruption:
            feats = corrupt_features(feats, rng, keypoint_noise_px, descriptor_corruption)
        try:
            matches = matcher(scene, feats, rng)
            coords_a, coords_b = km.match_coords(matches, feats.kps_a, feats.kps_b)
        except (km.MatchingError, rp.EstimationError, ValueError):
            matches = None
            coords_a = coords_b = np.zeros((0, 2))
        for t_index, thr in enumerate(ransac_thresholds):
            row = {
                "pair": scene.seed,
                "ransac_px": thr,
                "n_matches": len(coords_a),
                "n_inliers": 0,
                "rot_deg": math.inf,
                "trans_deg": math.inf,
                "pose_err_deg": math.inf,
                "fm_correct": False,
            }
            cfg = rp.RansacConfig(
                threshold=thr, seed=int(np.random.SeedSequence([seed, pair_index, t_index]).generate_state(1)[0] % 2**31)
            )
            if len(coords_a) >= 8 and scene.pose is not None:
                est = rp.ransac_essential(coords_a, coords_b, scene.cam_a.K, scene.cam_b.K, cfg)
                if est.success:
                    row["n_inliers"] = len(est.inliers)
                    try:
                        pose = rp.recover_pose(
                            est, coords_a[est.inliers], coords_b[est.inliers], scene.cam_a.K, scene.cam_b.K
                        )
                        rot, trans = pose_error(pose, scene.pose)
                        row["rot_deg"] = rot
                        row["trans_deg"] = trans
                        row["pose_err_deg"] = max(rot, trans)
                    except rp.EstimationError:
                        pass
                est_f = rp.ransac_fundamental(coords_a, coords_b, cfg)
                if est_f.success and len(scene.gt_points):
                    worst = rp.sampson_distances(
                        est_f.matrix, scene.gt_points[:, :2], scene.gt_points[:, 2:]
                    ).max()
                    row["fm_correct"] = bool(worst < FM_CORRECT_SAMPSON_PX)
            rows.append(row)
    aggregates = []
    for thr in ransac_thresholds:
        sub = [r for r in rows if r["ransac_px"] == thr]
        errors = [r["pose_err_deg"] for r in sub]
        agg = {"ransac_px": thr, "n_pairs": len(sub)}
        for tau, auc in zip(pose_thresholds, pose_auc(errors, pose_thresholds)):
            agg[f"auc_{tau:g}"] = auc
        agg["fm_recall"] = float(np.mean([r["fm_correct"] for r in sub]))
        aggregates.append(agg)
    return EvalReport(rows, aggregates, metadata or {})


def oracle_match_field(scene: SyntheticScene, stride: int = 16) -> cm.CoarseMatchField:
    """Ground-truth coarse field: each source cell maps to the target cell
    containing the true correspondence of its center (clamped for cells whose
    center is occluded or leaves the frame)."""
    h, w = scene.image_a.shape
    gh, gw = h // stride, w // stride
    ys, xs = np.mgrid[0:gh, 0:gw]
    centers = np.column_stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride])
    mapped, _ = scene.map_a_to_b(centers)
    hb, wb = scene.image_b.shape
    cols = np.clip(np.floor(np.nan_to_num(mapped[:, 0], nan=0.0) / stride), 0, wb // stride - 1)
    rows_ = np.clip(np.floor(np.nan_to_num(mapped[:, 1], nan=0.0) / stride), 0, hb // stride - 1)
    cells = np.stack([rows_, cols], axis=-1).astype(np.int64).reshape(gh, gw, 2)
    return cm.CoarseMatchField("AB", cells, np.ones((gh, gw)), stride, stride, (h, w), (hb, wb))
