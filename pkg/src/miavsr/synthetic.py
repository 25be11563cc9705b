"""Procedural sequences with controllable temporal redundancy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATTERNS = ("static", "moving_square", "mixed")


@dataclass(frozen=True)
class SyntheticSpec:
    """``H``/``W`` are high-resolution dims; LR frames are ``H/scale x W/scale``."""

    T: int = 5
    H: int = 64
    W: int = 64
    pattern: str = "mixed"
    velocity: tuple = (1, 0)
    fraction: float = 0.25
    noise: float = 0.0
    seed: int = 0
    scale: int = 4

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.T < 1 or self.H < 1 or self.W < 1:
            raise ValueError("T, H and W must be positive")
        if self.scale < 1 or self.H % self.scale or self.W % self.scale:
            raise ValueError(f"{self.H}x{self.W} is not divisible by scale {self.scale}")
        if len(self.velocity) != 2 or not all(float(v).is_integer() for v in self.velocity):
            raise ValueError("velocity must be two integers")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise stddev must be non-negative")


def _texture(rng, H, W) -> np.ndarray:
    """Smooth colour background with a few sinusoids; values in [0.1, 0.9]."""
    y, x = np.mgrid[0:H, 0:W] / max(H, W)
    img = np.zeros((H, W, 3))
    for c in range(3):
        for _ in range(3):
            fy, fx = rng.uniform(1, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            img[..., c] += np.sin(2 * np.pi * (fy * y + fx * x) + ph)
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    return 0.1 + 0.8 * img


def _square(rng, img, H, W):
    side = max(1, min(H, W) // 4)
    y0, x0 = rng.integers(0, H - side + 1), rng.integers(0, W - side + 1)
    img[y0:y0 + side, x0:x0 + side] = rng.uniform(0.0, 1.0, size=3)
    return img


def _band(H: int, W: int, count: int) -> np.ndarray:
    """First ``count`` pixels in column-major order, as an H x W boolean map."""
    m = np.zeros(H * W, dtype=bool)
    m[:count] = True
    return m.reshape(W, H).T


def box_downsample(img: np.ndarray, s: int) -> np.ndarray:
    H, W, C = img.shape
    return img.reshape(H // s, s, W // s, s, C).mean(axis=(1, 3))


def render_hr(spec: SyntheticSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    H, W = spec.H, spec.W
    base = _texture(rng, H, W)
    if spec.pattern == "static":
        return [base.copy() for _ in range(spec.T)]
    if spec.pattern == "moving_square":
        base = _square(rng, base, H, W)
        dy, dx = (int(v) for v in spec.velocity)
        return [np.roll(base, (t * dy, t * dx), axis=(0, 1)) for t in range(spec.T)]
    # mixed: a static background and a band whose every pixel changes each frame
    band = _band(H, W, int(round(spec.fraction * H * W)))
    ramp = 0.05 + 0.9 * np.arange(H) / max(H - 1, 1)  # distinct per row
    tint = np.array([1.0, 0.8, 0.6])
    frames = []
    for t in range(spec.T):
        moving = np.roll(ramp, t)[:, None, None] * tint[None, None, :]
        f = base.copy()
        f[band] = np.broadcast_to(moving, (H, W, 3))[band]
        frames.append(f)
    return frames


def gen_synthetic(spec: SyntheticSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """(LR frames, HR frames), float32 in [0, 1]. Noise, if any, is added to LR only."""
    hr = render_hr(spec)
    rng = np.random.default_rng([spec.seed, 1])
    lr = []
    for f in hr:
        x = box_downsample(f, spec.scale)
        if spec.noise > 0:
            x = np.clip(x + rng.normal(0.0, spec.noise, size=x.shape), 0.0, 1.0)
        lr.append(x.astype(np.float32))
    return lr, [f.astype(np.float32) for f in hr]
