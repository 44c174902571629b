"""Trainable coarse correspondence network.

A small strided conv backbone turns each grayscale image into a grid of
unit feature vectors; all pairwise dot products form a 4D correlation
volume; a stack of 4D convolutions re-scores it so that coherent
neighborhoods win (applied in both image orders and averaged, which makes
the scores symmetric under swapping the images); per-cell argmax plus
bilinear interpolation of the surviving matches yields a pixel-level
coarse match field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from guidematch import numerics
from guidematch.imageops import resize_bilinear
from guidematch.numerics import Tensor

LEAKY_SLOPE = 0.1
NORM_EPS = 1e-8


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Backbone:
    """Strided conv feature extractor; stride doubles per block.

    Default: 4 blocks of 3x3 convs with leaky rectifiers, strides
    (2, 2, 2, 2) and channels (8, 16, 32, 32), so the total stride is 16.
    """

    def __init__(self, channels=(8, 16, 32, 32), rng: np.random.Generator | None = None, frozen: bool = False):
        rng = rng or np.random.default_rng(0)
        self.channels = tuple(int(c) for c in channels)
        self.stride = 2 ** len(self.channels)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = 1
        for i, c_out in enumerate(self.channels):
            fan_in = c_in * 9
            self.weights.append(
                numerics.parameter(_he_uniform(rng, (c_out, c_in, 3, 3), fan_in), f"backbone/{i}/weight")
            )
            self.biases.append(numerics.parameter(np.zeros(c_out), f"backbone/{i}/bias"))
            c_in = c_out
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        for p in self.parameters():
            p.requires_grad = not self._frozen

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, image: np.ndarray) -> Tensor:
        x = Tensor(image[None])
        for w, b in zip(self.weights, self.biases):
            x = numerics.leaky_relu(numerics.conv2d(x, w, b, stride=2, zero_pad=1), LEAKY_SLOPE)
        return x


class ConsensusFilter:
    """Stack of 4D convolutions over the correlation volume.

    Default: single-channel in and out through hidden widths (16, 16),
    i.e. three conv layers, kernel 3, zero padding 1, leaky rectifiers
    between layers and a linear final layer.
    """

    def __init__(self, hidden=(16, 16), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        dims = [1, *[int(h) for h in hidden], 1]
        self.hidden = tuple(int(h) for h in hidden)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        last = len(dims) - 2
        for i, (c_in, c_out) in enumerate(zip(dims[:-1], dims[1:])):
            fan_in = c_in * 81
            w = _he_uniform(rng, (c_out, c_in, 3, 3, 3, 3), fan_in)
            if i == last:
                # zero output head: scores start uniform, so early training is
                # driven by the correlation statistics instead of having to
                # unlearn an arbitrary random re-scoring of the volume
                w = np.zeros_like(w)
            self.weights.append(numerics.parameter(w, f"filter/{i}/weight"))
            self.biases.append(numerics.parameter(np.zeros(c_out), f"filter/{i}/bias"))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, volume: Tensor) -> Tensor:
        """Apply to a (Ha, Wa, Hb, Wb) volume, preserving its shape."""
        spatial = volume.shape
        x = volume.reshape((1, *spatial))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = numerics.conv4d(x, w, b)
            if i != last:
                x = numerics.leaky_relu(x, LEAKY_SLOPE)
        return x.reshape(spatial)


@dataclass
class FeatureMap:
    """Grid of channel vectors with the pixel geometry it was computed from."""

    grid: Tensor  # (C, H_f, W_f)
    stride: int
    image_size: tuple[int, int]  # (H_px, W_px)
    normalized: bool = False

    def __post_init__(self):
        c, hf, wf = self.grid.shape
        h_px, w_px = self.image_size
        if hf * self.stride != h_px or wf * self.stride != w_px:
            raise ValueError(
                f"feature grid {hf}x{wf} at stride {self.stride} does not cover image {h_px}x{w_px}"
            )


@dataclass
class CorrelationVolume:
    """Raw correlations plus, once computed, filtered and normalized scores."""

    raw: Tensor  # (Ha, Wa, Hb, Wb)
    stride_a: int
    stride_b: int
    image_size_a: tuple[int, int]
    image_size_b: tuple[int, int]
    filtered: Tensor | None = None
    prob_ab: Tensor | None = None  # softmax over the B dimensions
    prob_ba: Tensor | None = None  # softmax over the A dimensions

    @property
    def grid_a(self) -> tuple[int, int]:
        return self.raw.shape[:2]

    @property
    def grid_b(self) -> tuple[int, int]:
        return self.raw.shape[2:]


@dataclass
class CoarseMatchField:
    """Per-source-cell argmax matches, interpolatable to pixel level."""

    direction: str  # "AB" or "BA"
    target_cells: np.ndarray  # (Hs, Ws, 2) int, rows then cols
    scores: np.ndarray  # (Hs, Ws)
    stride_src: int
    stride_tgt: int
    src_image_size: tuple[int, int]
    tgt_image_size: tuple[int, int]
    # original -> working scale factors (sx, sy); (1, 1) unless images were resized
    scale_src: tuple[float, float] = (1.0, 1.0)
    scale_tgt: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        hs, ws, two = self.target_cells.shape
        assert two == 2
        ht = self.tgt_image_size[0] // self.stride_tgt
        wt = self.tgt_image_size[1] // self.stride_tgt
        if self.target_cells[..., 0].min() < 0 or self.target_cells[..., 0].max() >= ht:
            raise ValueError("target cell row out of bounds")
        if self.target_cells[..., 1].min() < 0 or self.target_cells[..., 1].max() >= wt:
            raise ValueError("target cell col out of bounds")


def resize_image(image: np.ndarray, max_side: int, stride: int) -> tuple[np.ndarray, tuple[float, float]]:
    """Bound the longest side and round both sides down to stride multiples.

    Returns the resized image and the achieved per-axis scale factors
    (sx, sy) mapping original to resized coordinates: p' = (sx*x, sy*y).
    """
    if max_side < stride:
        raise ValueError(f"max_side {max_side} smaller than stride {stride}")
    h, w = image.shape
    if h < 2 or w < 2:
        raise ValueError(f"degenerate image {h}x{w}")
    ratio = min(1.0, max_side / max(h, w))
    ht = int(h * ratio) // stride * stride
    wt = int(w * ratio) // stride * stride
    if ht < stride or wt < stride:
        raise ValueError(f"image {h}x{w} too small for stride {stride} under max_side {max_side}")
    if (ht, wt) == (h, w):
        return image.copy(), (1.0, 1.0)
    return resize_bilinear(image, ht, wt), (wt / w, ht / h)


def extract_features(backbone: Backbone, image: np.ndarray) -> FeatureMap:
    """Backbone forward pass followed by per-cell L2 normalization."""
    h, w = image.shape
    s = backbone.stride
    if h % s or w % s:
        raise ValueError(
            f"image size {h}x{w} is not a multiple of the backbone stride {s}; "
            "resize it first (see resize_image)"
        )
    grid = numerics.l2_normalize_channels(backbone.forward(image), NORM_EPS)
    return FeatureMap(grid, s, (h, w), normalized=True)


def correlate(fa: FeatureMap, fb: FeatureMap) -> CorrelationVolume:
    """Dense dot products between every cell of A and every cell of B."""
    if not (fa.normalized and fb.normalized):
        raise ValueError("feature maps must be normalized before correlation")
    ca, ha, wa = fa.grid.shape
    cb, hb, wb = fb.grid.shape
    if ca != cb:
        raise ValueError(f"channel mismatch: {ca} vs {cb}")
    left = fa.grid.reshape((ca, ha * wa)).transpose((1, 0))
    right = fb.grid.reshape((cb, hb * wb))
    raw = numerics.matmul(left, right).reshape((ha, wa, hb, wb))
    return CorrelationVolume(raw, fa.stride, fb.stride, fa.image_size, fb.image_size)


_SWAP_AB = (2, 3, 0, 1)


def filter_symmetric(cons: ConsensusFilter, vol: CorrelationVolume) -> CorrelationVolume:
    """Run the consensus filter in both image orders and average.

    Guarantees filtered(A,B)[i,j,k,l] == filtered(B,A)[k,l,i,j].
    """
    direct = cons.forward(vol.raw)
    swapped = cons.forward(vol.raw.transpose(_SWAP_AB)).transpose(_SWAP_AB)
    vol.filtered = (direct + swapped) * 0.5
    return vol


def normalize_scores(vol: CorrelationVolume) -> CorrelationVolume:
    if vol.filtered is None:
        raise ValueError("run filter_symmetric before normalize_scores")
    vol.prob_ab = numerics.softmax_over(vol.filtered, (2, 3))
    vol.prob_ba = numerics.softmax_over(vol.filtered, (0, 1))
    return vol


def extract_matches(vol: CorrelationVolume, direction: str = "AB") -> CoarseMatchField:
    """Argmax over the target image's grid; ties go to the lowest linear index.

    The softmax preserves per-slice argmaxes, so extracting from the raw
    filtered scores and from the normalized ones is equivalent.
    """
    if vol.filtered is None:
        raise ValueError("run filter_symmetric before extract_matches")
    s = vol.filtered.data
    ha, wa, hb, wb = s.shape
    if direction == "AB":
        flat = s.reshape(ha * wa, hb * wb)
        arg = flat.argmax(axis=1)
        scores = flat[np.arange(ha * wa), arg].reshape(ha, wa)
        cells = np.stack(np.unravel_index(arg, (hb, wb)), axis=-1).reshape(ha, wa, 2)
        return CoarseMatchField(
            "AB", cells, scores, vol.stride_a, vol.stride_b, vol.image_size_a, vol.image_size_b
        )
    if direction == "BA":
        flat = s.transpose(_SWAP_AB).reshape(hb * wb, ha * wa)
        arg = flat.argmax(axis=1)
        scores = flat[np.arange(hb * wb), arg].reshape(hb, wb)
        cells = np.stack(np.unravel_index(arg, (ha, wa)), axis=-1).reshape(hb, wb, 2)
        return CoarseMatchField(
            "BA", cells, scores, vol.stride_b, vol.stride_a, vol.image_size_b, vol.image_size_a
        )
    raise ValueError(f"direction must be 'AB' or 'BA', got {direction!r}")


def interpolate_matches(field: CoarseMatchField, pts: np.ndarray) -> np.ndarray:
    """Pixel-level match positions for source points, in target pixels.

    Feature cell (i, j) has center ((j+0.5)*stride, (i+0.5)*stride) and its
    match point is the center of its target cell; the four cells around the
    query blend bilinearly, with queries clamped to the center bounding box.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    h_px, w_px = field.src_image_size
    xs, ys = pts[:, 0], pts[:, 1]
    if (xs < 0).any() or (xs >= w_px).any() or (ys < 0).any() or (ys >= h_px).any():
        raise ValueError("query point outside the source image")
    s = field.stride_src
    hs, ws = field.target_cells.shape[:2]
    gx = np.clip(xs / s - 0.5, 0.0, max(ws - 1, 0))
    gy = np.clip(ys / s - 0.5, 0.0, max(hs - 1, 0))
    j0 = np.minimum(gx.astype(np.int64), max(ws - 2, 0))
    i0 = np.minimum(gy.astype(np.int64), max(hs - 2, 0))
    tx = np.clip(gx - j0, 0.0, 1.0)
    ty = np.clip(gy - i0, 0.0, 1.0)
    j1 = np.minimum(j0 + 1, ws - 1)
    i1 = np.minimum(i0 + 1, hs - 1)
    st = field.stride_tgt
    # match point of a cell: its target cell center, (col+0.5, row+0.5)*stride
    targets = (field.target_cells[..., ::-1] + 0.5) * st
    p00 = targets[i0, j0]
    p01 = targets[i0, j1]
    p10 = targets[i1, j0]
    p11 = targets[i1, j1]
    wx = tx[:, None]
    wy = ty[:, None]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return top * (1 - wy) + bot * wy


def interpolate_match(field: CoarseMatchField, p) -> tuple[float, float]:
    out = interpolate_matches(field, np.asarray(p, dtype=np.float64)[None])[0]
    return float(out[0]), float(out[1])


def write_match_field(path, field: CoarseMatchField) -> None:
    """One line per source cell: `i j k l score`."""
    lines = []
    hs, ws = field.target_cells.shape[:2]
    for i in range(hs):
        for j in range(ws):
            k, l = field.target_cells[i, j]
            lines.append(f"{i} {j} {k} {l} {float(field.scores[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class CoarseModel:
    """Backbone plus consensus filter, the trainable unit."""

    backbone: Backbone
    cons_filter: ConsensusFilter

    @classmethod
    def create(
        cls,
        seed: int = 0,
        backbone_channels=(8, 16, 32, 32),
        filter_hidden=(16, 16),
        frozen_backbone: bool = False,
    ) -> "CoarseModel":
        ss = np.random.SeedSequence([seed])
        rng_backbone, rng_filter = (np.random.default_rng(s) for s in ss.spawn(2))
        return cls(
            Backbone(backbone_channels, rng_backbone, frozen=frozen_backbone),
            ConsensusFilter(filter_hidden, rng_filter),
        )

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.cons_filter.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {
            "meta/stride": np.array(float(self.stride)),
            "meta/backbone_channels": np.array([float(c) for c in self.backbone.channels]),
            "meta/filter_hidden": np.array([float(h) for h in self.cons_filter.hidden]),
        }
        for p in self.parameters():
            out[p.name] = p.data
        return out

    def save(self, path) -> None:
        numerics.save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "CoarseModel":
        arrays = numerics.load_checkpoint(path)
        channels = tuple(int(c) for c in arrays["meta/backbone_channels"])
        hidden = tuple(int(h) for h in arrays["meta/filter_hidden"])
        model = cls.create(0, channels, hidden)
        for p in model.parameters():
            if p.name not in arrays:
                raise ValueError(f"checkpoint missing parameter {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ValueError(f"checkpoint parameter {p.name!r} has shape {arrays[p.name].shape}")
            p.data = arrays[p.name]
        return model


def compute_volume(model: CoarseModel, image_a: np.ndarray, image_b: np.ndarray) -> CorrelationVolume:
    """Full forward pass: features, correlation, symmetric filter, softmax."""
    fa = extract_features(model.backbone, image_a)
    fb = extract_features(model.backbone, image_b)
    vol = correlate(fa, fb)
    filter_symmetric(model.cons_filter, vol)
    return normalize_scores(vol)


def compute_match_field(
    model: CoarseModel,
    image_a: np.ndarray,
    image_b: np.ndarray,
    direction: str = "AB",
    max_side: int | None = None,
) -> CoarseMatchField:
    """Resize, run the model, extract a field stamped with the resize scales."""
    if max_side is not None:
        image_a, scale_a = resize_image(image_a, max_side, model.stride)
        image_b, scale_b = resize_image(image_b, max_side, model.stride)
    else:
        scale_a = scale_b = (1.0, 1.0)
    vol = compute_volume(model, image_a, image_b)
    fld = extract_matches(vol, direction)
    if direction == "AB":
        fld.scale_src, fld.scale_tgt = scale_a, scale_b
    else:
        fld.scale_src, fld.scale_tgt = scale_b, scale_a
    return fld
