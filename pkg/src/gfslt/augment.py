"""Seeded geometric / colour / temporal augmentation of video clips."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .corpus import ConfigError, VideoClip

MIN_FRAMES = 4


@dataclass(frozen=True)
class AugmentPolicy:
    crop_min: float = 1.0
    crop_max: float = 1.0
    shift: float = 0.0          # max |translation| as a fraction of the frame side
    rotation: float = 0.0       # max |angle| in degrees
    brightness: float = 0.0     # max |additive delta|
    contrast_min: float = 1.0
    contrast_max: float = 1.0
    noise_std: float = 0.0
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    max_length_change: float = 0.0
    p_geometric: float = 0.0
    p_color: float = 0.0
    p_temporal: float = 0.0
    eval_crop: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.crop_min <= self.crop_max <= 1:
            raise ConfigError("need 0 < crop_min <= crop_max <= 1")
        if not 0 < self.contrast_min <= self.contrast_max:
            raise ConfigError("need 0 < contrast_min <= contrast_max")
        for name in ("shift", "rotation", "brightness", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("drop_prob", "dup_prob", "p_geometric", "p_color", "p_temporal"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")
        if self.drop_prob >= 1 or not 0 <= self.max_length_change < 1:
            raise ConfigError("temporal policy could empty the clip: need drop_prob < 1 "
                              "and 0 <= max_length_change < 1")
        if not 0 < self.eval_crop <= 1:
            raise ConfigError("eval_crop must be in (0, 1]")

    @property
    def is_identity(self) -> bool:
        return self == AugmentPolicy(seed=self.seed, eval_crop=self.eval_crop)

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(seed=seed)

    @classmethod
    def strong(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(crop_min=0.7, crop_max=1.0, shift=0.1, rotation=10.0, brightness=0.2,
                   contrast_min=0.8, contrast_max=1.25, noise_std=0.05, drop_prob=0.1,
                   dup_prob=0.1, max_length_change=0.25, p_geometric=0.5, p_color=0.5,
                   p_temporal=0.5, seed=seed)

    @classmethod
    def light(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(crop_min=0.9, crop_max=1.0, p_geometric=0.5, seed=seed)

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "AugmentPolicy":
        try:
            return {"none": cls.identity, "light": cls.light, "strong": cls.strong}[name](seed)
        except KeyError:
            raise ConfigError(f"unknown augmentation preset {name!r}") from None

    def with_seed(self, seed: int) -> "AugmentPolicy":
        return replace(self, seed=seed)


POLICY_FIELDS = tuple(f.name for f in fields(AugmentPolicy))


def _bilinear(frames: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``frames[T,H,W,C]`` at float coordinates (zero outside)."""
    T, H, W, C = frames.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0).astype(np.float32)[..., None]
    fc = (cols - c0).astype(np.float32)[..., None]
    out = np.zeros((T,) + rows.shape + (C,), dtype=np.float32)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            w = (wr * wc) * ok[..., None]
            if not w.any():
                continue
            vals = frames[:, np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)]
            out += vals * w[None]
    return out


def crop_resize(frames: np.ndarray, box: tuple[float, float, float, float],
                out_hw: tuple[int, int]) -> np.ndarray:
    """Crop ``box = (top, left, height, width)`` and bilinearly resize to ``out_hw``."""
    T, H, W, C = frames.shape
    top, left, h, w = box
    if h <= 0 or w <= 0:
        raise ValueError(f"empty crop box {box}")
    if top < 0 or left < 0 or top + h > H + 1e-9 or left + w > W + 1e-9:
        raise ValueError(f"crop box {box} outside frame bounds {(H, W)}")
    oh, ow = out_hw
    rows = top + (np.arange(oh) + 0.5) * (h / oh) - 0.5
    cols = left + (np.arange(ow) + 0.5) * (w / ow) - 0.5
    rows = np.clip(rows, 0, H - 1)
    cols = np.clip(cols, 0, W - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear(frames, rr, cc)


def center_crop(frames: np.ndarray, fraction: float) -> np.ndarray:
    if fraction >= 1.0:
        return frames
    T, H, W, C = frames.shape
    h, w = H * fraction, W * fraction
    return crop_resize(frames, ((H - h) / 2, (W - w) / 2, h, w), (H, W))


def _geometric(frames: np.ndarray, pol: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    T, H, W, C = frames.shape
    frac = rng.uniform(pol.crop_min, pol.crop_max)
    h, w = H * frac, W * frac
    top = rng.uniform(0, H - h)
    left = rng.uniform(0, W - w)
    dy, dx = rng.uniform(-pol.shift, pol.shift, size=2) * (H, W)
    angle = np.deg2rad(rng.uniform(-pol.rotation, pol.rotation))
    # output pixel -> crop-box pixel, rotated about the box centre, then shifted
    oy, ox = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    y = oy * (h / H) - h / 2
    x = ox * (w / W) - w / 2
    cos, sin = np.cos(angle), np.sin(angle)
    ry = cos * y - sin * x + top + h / 2 - dy - 0.5
    rx = sin * y + cos * x + left + w / 2 - dx - 0.5
    return _bilinear(frames, ry, rx)


def _color(frames: np.ndarray, pol: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    delta = rng.uniform(-pol.brightness, pol.brightness)
    factor = np.exp(rng.uniform(np.log(pol.contrast_min), np.log(pol.contrast_max)))
    mu = frames.mean()
    out = (frames - mu) * factor + mu + delta
    if pol.noise_std > 0:
        out = out + rng.normal(0, pol.noise_std, size=frames.shape)
    return out.astype(np.float32)


def temporal_indices(T: int, pol: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Order-preserving frame index list after random drops and duplications."""
    budget = int(np.floor(pol.max_length_change * T))
    drops = rng.random(T) < pol.drop_prob
    dups = rng.random(T) < pol.dup_prob
    max_drop = min(budget, max(0, T - MIN_FRAMES))
    if drops.sum() > max_drop:
        keep = np.flatnonzero(drops)[:max_drop]
        drops[:] = False
        drops[keep] = True
    dups &= ~drops
    if dups.sum() > budget:
        keep = np.flatnonzero(dups)[:budget]
        dups[:] = False
        dups[keep] = True
    idx = []
    for t in range(T):
        if drops[t]:
            continue
        idx.append(t)
        if dups[t]:
            idx.append(t)
    return np.asarray(idx, dtype=np.int64)


def augment_clip(clip: VideoClip, policy: AugmentPolicy, sample_seed: int) -> VideoClip:
    """Training-time augmentation; a pure function of ``(clip, policy, sample_seed)``."""
    frames = clip.frames[:clip.valid_len]
    if len(frames) == 0:
        raise ValueError("cannot augment an empty clip")
    if policy.is_identity:
        return VideoClip(frames.copy())
    rng = np.random.default_rng(np.random.SeedSequence([policy.seed, sample_seed]))
    use_geo, use_col, use_tmp = rng.random(3) < (policy.p_geometric, policy.p_color,
                                                 policy.p_temporal)
    out = frames
    if use_tmp:
        out = out[temporal_indices(len(out), policy, rng)]
    if use_geo:
        out = _geometric(out, policy, rng)
    if use_col:
        out = _color(out, policy, rng)
    return VideoClip(np.clip(out, 0.0, 1.0).astype(np.float32))


def eval_clip(clip: VideoClip, policy: AugmentPolicy | None = None) -> VideoClip:
    """Deterministic evaluation path: centre crop only."""
    frames = clip.frames[:clip.valid_len]
    frac = 1.0 if policy is None else policy.eval_crop
    return VideoClip(center_crop(frames, frac).astype(np.float32))
