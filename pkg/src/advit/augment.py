"""Basic and heavy data augmentations on NHWC float images in [0, 1].

Per-image ops take an ``(H, W, C)`` array and an explicit
``np.random.Generator``; batch ops (MixUp, CutMix) take a
:class:`LabeledBatch` whose labels are probability rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

RA_MAX_MAGNITUDE = 30.0
RA_OPS = (
    "rotate",
    "translate_x",
    "translate_y",
    "shear_x",
    "shear_y",
    "brightness",
    "contrast",
    "sharpness",
    "posterize",
    "solarize",
)


@dataclass(frozen=True)
class BasicAugConfig:
    flip_prob: float = 0.5
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        object.__setattr__(self, "ratio", tuple(float(v) for v in self.ratio))
        for name in ("scale", "ratio"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range must be a nonempty interval with positive endpoints, got {(lo, hi)}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("color jitter strengths must be nonnegative")


# low-resolution fine-tuning ranges; color jitter removed
LOW_RES_BASIC = BasicAugConfig(scale=(0.8, 1.2), ratio=(0.95, 1.05), brightness=0.0, contrast=0.0, saturation=0.0)


@dataclass(frozen=True)
class AugPolicy:
    mixup: bool = False
    mixup_alpha: float = 1.0
    cutmix: bool = False
    cutmix_alpha: float = 1.0
    randaugment: bool = False
    ra_num_ops: int = 2
    ra_magnitude: float = 9.0
    random_erasing: bool = False
    re_prob: float = 0.25
    re_area: tuple[float, float] = (0.02, 1 / 3)
    re_mode: str = "normal"
    basic: BasicAugConfig = field(default_factory=BasicAugConfig)

    def __post_init__(self):
        object.__setattr__(self, "re_area", tuple(float(v) for v in self.re_area))
        if self.mixup_alpha <= 0 or self.cutmix_alpha <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.ra_num_ops < 0 or not 0 <= self.ra_magnitude <= RA_MAX_MAGNITUDE:
            raise ValueError("RandAugment needs num_ops >= 0 and magnitude in [0, 30]")
        lo, hi = self.re_area
        if not 0 < lo <= hi < 1:
            raise ValueError("random erasing area range must lie inside (0, 1)")
        if self.re_mode not in ("zeros", "normal"):
            raise ValueError(f"unknown random erasing fill mode {self.re_mode!r}")
        if not 0 <= self.re_prob <= 1:
            raise ValueError("re_prob must be in [0, 1]")

    @property
    def heavy(self) -> tuple[bool, bool, bool, bool]:
        return (self.mixup, self.cutmix, self.randaugment, self.random_erasing)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugPolicy":
        d = dict(d)
        if isinstance(d.get("basic"), dict):
            d["basic"] = BasicAugConfig(**d["basic"])
        return cls(**d)


def light_policy(**kw) -> AugPolicy:
    return AugPolicy(**kw)


def canonical_policy(**kw) -> AugPolicy:
    return AugPolicy(mixup=True, cutmix=True, randaugment=True, random_erasing=True, **kw)


def policy_grid(basic: BasicAugConfig | None = None) -> list[AugPolicy]:
    """All 16 on/off combinations of the four heavy augmentations."""
    basic = basic or BasicAugConfig()
    out = []
    for mask in range(16):
        flags = [(mask >> i) & 1 == 1 for i in range(4)]
        out.append(AugPolicy(mixup=flags[0], cutmix=flags[1], randaugment=flags[2], random_erasing=flags[3], basic=basic))
    return out


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def validate(self, tol: float = 1e-9):
        if self.images.min(initial=0.0) < 0 or self.images.max(initial=1.0) > 1:
            raise ValueError("image values outside [0, 1]")
        if (self.labels < -tol).any() or not np.allclose(self.labels.sum(axis=1), 1.0, atol=tol, rtol=0):
            raise ValueError("label rows must be probability vectors")
        return self

    @classmethod
    def from_ints(cls, images: np.ndarray, labels: np.ndarray, num_classes: int) -> "LabeledBatch":
        return cls(np.asarray(images, dtype=np.float64), np.eye(num_classes)[np.asarray(labels, dtype=int)])


# ------------------------------------------------------------ batch mixing


def _pair(batch: LabeledBatch, rng: np.random.Generator, name: str):
    n = len(batch.images)
    if n < 2:
        warnings.warn(f"{name} needs at least two images; batch returned unchanged", stacklevel=3)
        return None
    return rng.permutation(n)


def mixup(batch: LabeledBatch, lam: float, rng: np.random.Generator) -> LabeledBatch:
    """Convex combination lam * X1 + (1 - lam) * X2 with X2 a seeded permutation of X1."""
    if not 0 <= lam <= 1:
        raise ValueError("lam must be in [0, 1]")
    perm = _pair(batch, rng, "mixup")
    if perm is None:
        return LabeledBatch(batch.images.copy(), batch.labels.copy())
    x2, y2 = batch.images[perm], batch.labels[perm]
    return LabeledBatch(lam * batch.images + (1 - lam) * x2, lam * batch.labels + (1 - lam) * y2)


def cutmix_box(height: int, width: int, lam: float, center: tuple[int, int]) -> tuple[int, int, int, int]:
    """Box of floor(H sqrt(1-lam)) x floor(W sqrt(1-lam)) around ``center``, clipped; (y0, y1, x0, x1)."""
    cut = math.sqrt(1.0 - lam)
    rh, rw = int(math.floor(height * cut)), int(math.floor(width * cut))
    cy, cx = center
    y0, x0 = cy - rh // 2, cx - rw // 2
    return (
        int(np.clip(y0, 0, height)),
        int(np.clip(y0 + rh, 0, height)),
        int(np.clip(x0, 0, width)),
        int(np.clip(x0 + rw, 0, width)),
    )


def cutmix_mask(height: int, width: int, box: tuple[int, int, int, int]) -> np.ndarray:
    y0, y1, x0, x1 = box
    m = np.zeros((height, width))
    m[y0:y1, x0:x1] = 1.0
    return m


def cutmix(batch: LabeledBatch, lam: float, rng: np.random.Generator, center: tuple[int, int] | None = None) -> LabeledBatch:
    """X = M * X1 + (1 - M) * X2 where M is one inside the box and zero elsewhere.

    The label weight is the realized (clipped) box area fraction, so
    lam = 1 gives an empty box and returns X2 with label y2.
    """
    if not 0 <= lam <= 1:
        raise ValueError("lam must be in [0, 1]")
    perm = _pair(batch, rng, "cutmix")
    if perm is None:
        return LabeledBatch(batch.images.copy(), batch.labels.copy())
    _, H, W, _ = batch.images.shape
    if center is None:
        center = (int(rng.integers(H)), int(rng.integers(W)))
    box = cutmix_box(H, W, lam, center)
    m = cutmix_mask(H, W, box)[None, :, :, None]
    a = m.sum() / (H * W)
    x2, y2 = batch.images[perm], batch.labels[perm]
    return LabeledBatch(m * batch.images + (1 - m) * x2, a * batch.labels + (1 - a) * y2)


# ----------------------------------------------------------- per-image ops


def random_erasing(
    image: np.ndarray,
    rng: np.random.Generator,
    prob: float = 0.25,
    area: tuple[float, float] = (0.02, 1 / 3),
    ratio: tuple[float, float] = (0.3, 3.3),
    mode: str = "normal",
    mean: float | np.ndarray = 0.0,
    std: float | np.ndarray = 1.0,
    attempts: int = 10,
) -> np.ndarray:
    """Occlude one rectangle with zeros or N(mean, std) noise (clipped to [0, 1])."""
    if prob <= 0 or rng.random() >= prob:
        return image
    H, W, C = image.shape
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = rng.uniform(*area) * H * W
        aspect = math.exp(rng.uniform(*log_r))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < H and 0 < w < W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            out = image.copy()
            if mode == "zeros":
                out[top : top + h, left : left + w] = 0.0
            else:
                noise = rng.normal(size=(h, w, C)) * np.asarray(std) + np.asarray(mean)
                out[top : top + h, left : left + w] = np.clip(noise, 0.0, 1.0)
            return out
    return image


def _gray(image: np.ndarray) -> np.ndarray:
    if image.shape[-1] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    return image.mean(axis=-1)


def _blend(degenerate: np.ndarray, image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(degenerate + factor * (image - degenerate), 0.0, 1.0)


def _affine(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray, fill: float = 0.5) -> np.ndarray:
    """Apply an output->input (row, col) affine map about the image center."""
    H, W, _ = image.shape
    center = np.array([(H - 1) / 2, (W - 1) / 2])
    off = center - matrix @ center + offset
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.affine_transform(image[..., c], matrix, off, order=1, mode="constant", cval=fill)
    return out


def _ra_apply(op: str, image: np.ndarray, level: float, sign: float) -> np.ndarray:
    H, W, _ = image.shape
    if op in ("rotate", "translate_x", "translate_y", "shear_x", "shear_y"):
        if level == 0:
            return image.copy()
        m, off = np.eye(2), np.zeros(2)
        if op == "rotate":
            t = math.radians(30.0 * level * sign)
            m = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        elif op == "translate_x":
            off[1] = 0.45 * W * level * sign
        elif op == "translate_y":
            off[0] = 0.45 * H * level * sign
        elif op == "shear_x":
            m = np.array([[1.0, 0.0], [0.3 * level * sign, 1.0]])
        else:
            m = np.array([[1.0, 0.3 * level * sign], [0.0, 1.0]])
        return _affine(image, m, off)
    factor = 1.0 + 0.9 * level * sign
    if op == "brightness":
        return _blend(np.zeros_like(image), image, factor)
    if op == "contrast":
        return _blend(np.full_like(image, _gray(image).mean()), image, factor)
    if op == "sharpness":
        kernel = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
        smooth = np.stack([ndimage.convolve(image[..., c], kernel, mode="nearest") for c in range(image.shape[2])], -1)
        return _blend(smooth, image, factor)
    if op == "posterize":
        bits = 8 - int(round(4 * level))
        if bits >= 8:
            return image.copy()
        q = np.round(image * 255).astype(np.uint8) & np.uint8((0xFF << (8 - bits)) & 0xFF)
        return q / 255.0
    if op == "solarize":
        threshold = 1.0 - level
        return np.where(image > threshold, 1.0 - image, image)
    raise ValueError(f"unknown RandAugment op {op!r}")


def sample_ra_ops(rng: np.random.Generator, num_ops: int) -> list[str]:
    """Each slot picks one of the K transforms with probability 1/K."""
    return [RA_OPS[i] for i in rng.integers(len(RA_OPS), size=num_ops)]


def rand_augment(image: np.ndarray, rng: np.random.Generator, num_ops: int = 2, magnitude: float = 9.0) -> np.ndarray:
    level = magnitude / RA_MAX_MAGNITUDE
    out = image
    for op in sample_ra_ops(rng, num_ops):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = _ra_apply(op, out, level, sign)
    return np.clip(out, 0.0, 1.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :].copy()


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize; identity when the size is unchanged."""
    H, W, _ = image.shape
    if (H, W) == (out_h, out_w):
        return image.copy()

    def coords(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = coords(H, out_h)
    x0, x1, wx = coords(W, out_w)
    top = image[y0][:, x0] * (1 - wx)[None, :, None] + image[y0][:, x1] * wx[None, :, None]
    bot = image[y1][:, x0] * (1 - wx)[None, :, None] + image[y1][:, x1] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bot * wy[:, None, None]


def random_resized_crop_box(H: int, W: int, scale, ratio, rng: np.random.Generator, attempts: int = 10):
    area = H * W
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1)), h, w
    # fallback: center crop at the closest allowed aspect ratio
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        h, w = H, W
    return (H - h) // 2, (W - w) // 2, h, w


def color_jitter(image: np.ndarray, cfg: BasicAugConfig, rng: np.random.Generator) -> np.ndarray:
    out = image
    if cfg.brightness > 0:
        f = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
        out = np.clip(out * f, 0.0, 1.0)
    if cfg.contrast > 0:
        f = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
        out = _blend(np.full_like(out, _gray(out).mean()), out, f)
    if cfg.saturation > 0 and out.shape[-1] == 3:
        f = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
        out = _blend(np.repeat(_gray(out)[..., None], 3, axis=-1), out, f)
    return out


def basic_augment(image: np.ndarray, cfg: BasicAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, random resized crop back to the input size, color jitter."""
    H, W, _ = image.shape
    out = image
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = hflip(out)
    top, left, h, w = random_resized_crop_box(H, W, cfg.scale, cfg.ratio, rng)
    out = resize_bilinear(out[top : top + h, left : left + w], H, W)
    out = color_jitter(out, cfg, rng)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- pipeline


@dataclass
class Pipeline:
    policy: AugPolicy
    dataset_mean: float | np.ndarray = 0.5
    dataset_std: float | np.ndarray = 0.25

    def per_image(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p = self.policy
        out = basic_augment(image, p.basic, rng)
        if p.randaugment:
            out = rand_augment(out, rng, p.ra_num_ops, p.ra_magnitude)
        if p.random_erasing:
            out = random_erasing(
                out, rng, p.re_prob, p.re_area, mode=p.re_mode, mean=self.dataset_mean, std=self.dataset_std
            )
        return out

    def __call__(self, batch: LabeledBatch, rng: np.random.Generator) -> LabeledBatch:
        images = np.stack([self.per_image(img, rng) for img in batch.images]) if len(batch.images) else batch.images
        out = LabeledBatch(images, batch.labels.astype(np.float64))
        p = self.policy
        use_mixup, use_cutmix = p.mixup, p.cutmix
        if use_mixup and use_cutmix:
            use_mixup = rng.random() < 0.5
            use_cutmix = not use_mixup
        if use_mixup:
            out = mixup(out, float(rng.beta(p.mixup_alpha, p.mixup_alpha)), rng)
        elif use_cutmix:
            out = cutmix(out, float(rng.beta(p.cutmix_alpha, p.cutmix_alpha)), rng)
        return out


def compose_policy(policy: AugPolicy, **kwargs) -> Callable[[LabeledBatch, np.random.Generator], LabeledBatch]:
    """Basic augmentation always; then RandAugment, Random Erasing, MixUp/CutMix as enabled."""
    return Pipeline(policy, **kwargs)


__all__ = [
    "AugPolicy",
    "BasicAugConfig",
    "LabeledBatch",
    "LOW_RES_BASIC",
    "RA_OPS",
    "basic_augment",
    "canonical_policy",
    "compose_policy",
    "cutmix",
    "cutmix_box",
    "hflip",
    "light_policy",
    "mixup",
    "policy_grid",
    "rand_augment",
    "random_erasing",
    "sample_ra_ops",
]
