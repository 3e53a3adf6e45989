"""Synthetic HR/LR video clips and shape-driven minibatch sampling.

Each clip is a periodic random texture (sinusoids plus band-limited noise)
translated by a constant integer velocity with wrap-around, so longer
temporal windows genuinely carry more information. LR frames are the exact
4x4 box mean of the HR frames, which makes degradation checks exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

SCALE = 4  # HR = SCALE x LR in both spatial dims

_F = TypeVar("_F")


class DataError(ValueError):
    """Invalid clip or sampling request."""


@dataclass(frozen=True)
class VideoClip:
    """Paired HR/LR frame sequences plus their degradation provenance."""

    hr: np.ndarray        # T x 3 x H x W, values in [0,1]
    lr: np.ndarray        # T x 3 x H/4 x W/4, exact 4x4 box mean of hr
    velocity: tuple[int, int]   # (dy, dx) HR pixels per frame
    seed: int

    @property
    def frames(self) -> int:
        return self.hr.shape[0]


def box_downsample(hr: np.ndarray) -> np.ndarray:
    """Exact 4x4 box mean over the trailing two axes, accumulated at
    float64 so the result does not depend on the storage precision."""
    *lead, h, w = hr.shape
    if h % SCALE or w % SCALE:
        raise DataError(f"HR dims {h}x{w} not divisible by {SCALE}")
    blocks = hr.reshape(*lead, h // SCALE, SCALE, w // SCALE, SCALE)
    return blocks.astype(np.float64).mean(axis=(-3, -1)).astype(hr.dtype)


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Periodic texture: 8 integer-wavevector sinusoids plus band-limited
    noise reaching past the LR Nyquist rate, so 4x downsampling genuinely
    aliases and multi-frame fusion has something to recover."""
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    tex = np.zeros((height, width))
    for _ in range(8):
        while True:
            ky, kx = rng.integers(-6, 7, size=2)
            if ky or kx:
                break
        amp = rng.uniform(0.4, 1.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        tex += amp * np.sin(2.0 * np.pi * (ky * yy / height + kx * xx / width) + phase)
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    freq = np.sqrt(fy ** 2 + fx ** 2)

    def band_noise(lo_f, hi_f):
        spec = np.fft.rfft2(rng.standard_normal((height, width)))
        spec[(freq < lo_f) | (freq > hi_f)] = 0.0
        field = np.fft.irfft2(spec, s=(height, width))
        return field / field.std() if field.std() > 0 else field

    # smooth recoverable detail, plus a thinner band past the 0.125
    # post-4x Nyquist that aliases away and acts as a quality floor
    tex += 0.8 * band_noise(0.0, 0.09)
    tex += 0.35 * band_noise(0.15, 0.35)
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo) if hi > lo else np.full_like(tex, 0.5)


def generate_clip(seed: int, t_max: int, h_full: int, w_full: int,
                  dtype: np.dtype = np.float32) -> VideoClip:
    """Deterministic clip: per-channel base textures translated by a
    constant per-clip velocity drawn uniformly from {-2..2}^2."""
    if h_full % SCALE or w_full % SCALE:
        raise DataError(f"HR dims {h_full}x{w_full} not divisible by {SCALE}")
    if t_max < 1:
        raise DataError(f"clip needs >= 1 frames, got {t_max}")
    rng = np.random.Generator(np.random.PCG64(seed))
    base = np.stack([_texture(rng, h_full, w_full) for _ in range(3)])
    dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
    hr = np.empty((t_max, 3, h_full, w_full))
    for t in range(t_max):
        hr[t] = np.roll(base, shift=(t * dy, t * dx), axis=(1, 2))
    hr = hr.astype(dtype)
    lr = box_downsample(hr)
    return VideoClip(hr=hr, lr=lr, velocity=(dy, dx), seed=seed)


def flip_concat(frames: Sequence[_F]) -> list[_F]:
    """Append the time-reversed copy: [f0..fL-1] -> [f0..fL-1, fL-1..f0]."""
    if len(frames) < 1:
        raise DataError("flip_concat needs at least one frame")
    return list(frames) + list(reversed(frames))


def _segment_indices(clip_len: int, temporal: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Random contiguous temporal window, extending the clip by repeated
    flip-concat when it is shorter than the requested window."""
    indices = list(range(clip_len))
    while len(indices) < temporal:
        indices = flip_concat(indices)
    start = int(rng.integers(0, len(indices) - temporal + 1))
    return np.asarray(indices[start:start + temporal])


def sample_minibatch(clips: Sequence[VideoClip], shape,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw a (lr, hr) minibatch of the requested MinibatchShape.

    Per sample: uniform clip choice, random temporal window (flip-concat
    extended if needed), random LR-aligned crop; the HR crop is exactly
    4x the LR window. Returns (T,N,3,h,w) and (T,N,3,4h,4w).
    """
    if not clips:
        raise DataError("sample_minibatch needs a nonempty clip pool")
    h, w = shape.spatial
    lr_h, lr_w = clips[0].lr.shape[2:]
    if h > lr_h or w > lr_w:
        raise DataError(f"requested crop {h}x{w} exceeds LR frame {lr_h}x{lr_w}")
    lr_parts = []
    hr_parts = []
    for _ in range(shape.batch):
        clip = clips[int(rng.integers(0, len(clips)))]
        seg = _segment_indices(clip.frames, shape.temporal, rng)
        y = int(rng.integers(0, lr_h - h + 1))
        x = int(rng.integers(0, lr_w - w + 1))
        lr_parts.append(clip.lr[seg][:, :, y:y + h, x:x + w])
        hr_parts.append(clip.hr[seg][:, :, SCALE * y:SCALE * (y + h),
                                     SCALE * x:SCALE * (x + w)])
    return np.stack(lr_parts, axis=1), np.stack(hr_parts, axis=1)


def export_ppm(clip: VideoClip, out_dir: str | Path, prefix: str = "frame") -> list[Path]:
    """Dump HR frames as binary PPM images for eyeballing."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(clip.frames):
        img = np.clip(clip.hr[t] * 255.0, 0, 255).astype(np.uint8)
        img = img.transpose(1, 2, 0)  # H,W,3
        path = out / f"{prefix}_{t:04d}.ppm"
        with open(path, "wb") as f:
            f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            f.write(img.tobytes())
        paths.append(path)
    return paths
