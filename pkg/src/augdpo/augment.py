"""Raster augmentations used to provoke disagreeing answers.

All kinds are deterministic given (spec.seed, image), preserve raster shape,
and clamp output to [0, 1] — except forward diffusion noise, which returns the
unclamped raster together with its (min, max) so consumers can renormalize.
Noise strength is controlled by the diffusion step t, the knob the pair
synthesis sweep turns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .world import ToyImage

KINDS = (
    "identity",
    "rand_flip",
    "rand_resized_crop",
    "random_crop",
    "center_crop",
    "random_affine",
    "random_invert",
    "diffusion_noise",
    "moco_recipe",
)


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-diffusion schedule: betas and their cumulative alpha products."""

    T: int
    betas: tuple[float, ...]
    alpha_bars: tuple[float, ...]

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T)
        alpha_bars = np.cumprod(1.0 - betas)
        sched = cls(T=T, betas=tuple(betas), alpha_bars=tuple(alpha_bars))
        sched.validate()
        return sched

    def validate(self) -> None:
        b = np.asarray(self.betas)
        ab = np.asarray(self.alpha_bars)
        if len(b) != self.T or len(ab) != self.T:
            raise ValueError("schedule: length mismatch")
        if not (0.0 < b[0] and (np.diff(b) >= 0).all() and b[-1] < 1.0):
            raise ValueError("schedule: betas must be nondecreasing in (0, 1)")
        if not (np.diff(ab) < 0).all():
            raise ValueError("schedule: alpha_bar must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at step t, with alpha_bar(0) == 1 by convention."""
        if not 0 <= t <= self.T:
            raise ValueError(f"diffusion step t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else self.alpha_bars[t - 1]


DEFAULT_SCHEDULE = NoiseSchedule.linear()

# Weak/strong diffusion presets used by the pair-generation sweep.
DIFFUSION_WEAK_STEP = 500
DIFFUSION_STRONG_STEP = 800


@dataclass(frozen=True)
class AugmentSpec:
    """Declarative description of one augmentation draw."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "diffusion_noise":
            t = int(self.params.get("t", 0))
            T = int(self.params.get("T", DEFAULT_SCHEDULE.T))
            if not 0 <= t <= T:
                raise ValueError(f"diffusion step t={t} outside [0, {T}]")

    def reseeded(self, seed: int) -> "AugmentSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        return cls(kind=d["kind"], params=dict(d.get("params", {})), seed=int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, s: str) -> "AugmentSpec":
        return cls.from_dict(json.loads(s))


def diffusion_spec(t: int, seed: int = 0) -> AugmentSpec:
    return AugmentSpec(kind="diffusion_noise", params={"t": int(t)}, seed=seed)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def diffuse(
    image: ToyImage,
    t: int,
    seed: int,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
) -> ToyImage:
    """Forward diffusion: x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps.

    t = 0 returns the input exactly.  Output is unclamped; the raster's
    (min, max) is recorded on the result for downstream renormalization.
    """
    ab = schedule.alpha_bar(t)
    if t == 0:
        return image
    eps = _rng(seed).standard_normal(image.pixels.shape)
    x_t = np.sqrt(ab) * image.pixels + np.sqrt(1.0 - ab) * eps
    return image.with_pixels(x_t, norm_range=(float(x_t.min()), float(x_t.max())))


def _resize(pixels: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample to an exact output shape."""
    in_h, in_w = pixels.shape
    out_h, out_w = out_shape
    rows = np.linspace(0, in_h - 1, out_h)
    cols = np.linspace(0, in_w - 1, out_w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(pixels, [rr, cc], order=1, mode="nearest")


def _crop_resize(pixels: np.ndarray, top: int, left: int, ch: int, cw: int) -> np.ndarray:
    h, w = pixels.shape
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    crop = pixels[top : top + ch, left : left + cw]
    return _resize(crop, (h, w))


def _apply_rand_flip(pixels, params, rng):
    axis = params.get("axis", "horizontal")
    prob = float(params.get("prob", 0.5))
    if rng.random() < prob:
        return np.flip(pixels, axis=1 if axis == "horizontal" else 0).copy()
    return pixels.copy()


def _apply_rand_resized_crop(pixels, params, rng):
    h, w = pixels.shape
    lo, hi = params.get("scale", (0.5, 1.0))
    ratio_lo, ratio_hi = params.get("ratio", (0.75, 4.0 / 3.0))
    area = h * w * rng.uniform(lo, hi)
    ratio = np.exp(rng.uniform(np.log(ratio_lo), np.log(ratio_hi)))
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return _crop_resize(pixels, top, left, ch, cw)


def _apply_random_crop(pixels, params, rng):
    h, w = pixels.shape
    frac = float(params.get("fraction", 0.75))
    ch, cw = max(1, round(h * frac)), max(1, round(w * frac))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return _crop_resize(pixels, top, left, ch, cw)


def _apply_center_crop(pixels, params, rng):
    h, w = pixels.shape
    frac = float(params.get("fraction", 0.75))
    ch, cw = max(1, round(h * frac)), max(1, round(w * frac))
    return _crop_resize(pixels, (h - ch) // 2, (w - cw) // 2, ch, cw)


def _apply_random_affine(pixels, params, rng):
    h, w = pixels.shape
    degrees = float(params.get("degrees", 15.0))
    tx_frac, ty_frac = params.get("translate", (0.1, 0.1))
    angle = np.deg2rad(rng.uniform(-degrees, degrees))
    tx = rng.uniform(-tx_frac, tx_frac) * w
    ty = rng.uniform(-ty_frac, ty_frac) * h
    cos, sin = np.cos(angle), np.sin(angle)
    # Inverse map around the raster center, then translate.
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    rot = np.array([[cos, -sin], [sin, cos]])
    offset = center - rot @ center - rot @ np.array([ty, tx])
    return ndimage.affine_transform(pixels, rot, offset=offset, order=1, mode="constant", cval=0.0)


def _apply_random_invert(pixels, params, rng):
    prob = float(params.get("prob", 0.5))
    if rng.random() < prob:
        return 1.0 - pixels
    return pixels.copy()


_GEOMETRIC = {
    "rand_flip": _apply_rand_flip,
    "rand_resized_crop": _apply_rand_resized_crop,
    "random_crop": _apply_random_crop,
    "center_crop": _apply_center_crop,
    "random_affine": _apply_random_affine,
    "random_invert": _apply_random_invert,
}


def apply(spec: AugmentSpec, image: ToyImage) -> ToyImage:
    """Apply one augmentation draw.  Identity returns the input unchanged."""
    if spec.kind == "identity":
        return image
    if spec.kind == "diffusion_noise":
        t = int(spec.params.get("t", 0))
        if "T" in spec.params or "beta_start" in spec.params:
            schedule = NoiseSchedule.linear(
                T=int(spec.params.get("T", DEFAULT_SCHEDULE.T)),
                beta_start=float(spec.params.get("beta_start", 1e-4)),
                beta_end=float(spec.params.get("beta_end", 0.02)),
            )
        else:
            schedule = DEFAULT_SCHEDULE
        return diffuse(image, t, spec.seed, schedule)
    if spec.kind == "moco_recipe":
        # Crop + occasional invert + flip; an intensity-grid rendition of the
        # usual contrastive-learning recipe (no color ops on a gray raster).
        out = image
        out = apply(
            AugmentSpec("rand_resized_crop", {"scale": spec.params.get("scale", (0.4, 1.0))}, seed=0).reseeded(
                _child_seed(spec.seed, 0)
            ),
            out,
        )
        out = apply(
            AugmentSpec("random_invert", {"prob": spec.params.get("invert_prob", 0.2)}, seed=0).reseeded(
                _child_seed(spec.seed, 1)
            ),
            out,
        )
        out = apply(
            AugmentSpec("rand_flip", {"prob": spec.params.get("flip_prob", 0.5)}, seed=0).reseeded(
                _child_seed(spec.seed, 2)
            ),
            out,
        )
        return out
    fn = _GEOMETRIC[spec.kind]
    pixels = fn(image.pixels, spec.params, _rng(spec.seed))
    return image.with_pixels(np.clip(pixels, 0.0, 1.0))


def _child_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def distortion_strength(spec: AugmentSpec, sample: list[ToyImage]) -> float:
    """Mean normalized L2 distance between augmented and original rasters."""
    if not sample:
        raise ValueError("distortion_strength: empty sample")
    total = 0.0
    for img in sample:
        diff = apply(spec, img).pixels - img.pixels
        denom = np.linalg.norm(img.pixels)
        total += np.linalg.norm(diff) / (denom + 1e-12)
    return total / len(sample)
