"""Procedural segmentation stacks: a soft-edged ellipse on textured noise."""

from __future__ import annotations

import numpy as np


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    kernel = np.exp(-2 * (np.pi * sigma) ** 2 * (fy**2 + fx**2))
    out = np.fft.irfft2(np.fft.rfft2(noise) * kernel, s=(h, w))
    return out / out.std()


def ellipse_radius(h: int, w: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    """Normalised elliptic radius at every pixel centre (<= 1 inside)."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = y - cy, x - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _sample_ellipse(rng, h, w, min_frac, max_frac):
    frac = rng.uniform(min_frac, max_frac)
    ratio = rng.uniform(0.5, 1.0)
    a = np.sqrt(frac * h * w / (np.pi * ratio))
    b = ratio * a
    margin = a + 2
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    return cy, cx, a, b, rng.uniform(0, np.pi)


def synth_dataset(seed: int | np.random.Generator, n: int, size: int | tuple[int, int] = 64,
                  in_slices: int = 3, contrast: float = 2.5, noise: float = 0.5,
                  texture: float = 0.6, texture_sigma: float = 2.0):
    """Generate ``n`` labelled stacks.

    Returns ``(images, masks, ellipses)``: float32 ``(n, in_slices, H, W)``
    stacks normalised per sample to zero mean and unit variance, uint8
    ``(n, H, W)`` masks of the central slice's rasterised ellipse, and the
    ``(cy, cx, a, b, theta)`` parameters of each mask ellipse. Every stack also
    carries an unlabelled dark blob as a distractor, placed clear of the
    foreground when possible. Neighbouring slices jitter
    the ellipse centre by up to one pixel and its size by up to 5%.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = (size, size) if isinstance(size, int) else size
    centre = in_slices // 2
    images = np.empty((n, in_slices, h, w), dtype=np.float32)
    masks = np.empty((n, h, w), dtype=np.uint8)
    ellipses = np.empty((n, 5))
    for i in range(n):
        cy, cx, a, b, th = _sample_ellipse(rng, h, w, 0.02, 0.10)
        ellipses[i] = (cy, cx, a, b, th)
        masks[i] = ellipse_radius(h, w, cy, cx, a, b, th) <= 1.0
        for _ in range(20):
            dcy, dcx, da, db, dth = _sample_ellipse(rng, h, w, 0.03, 0.08)
            if np.hypot(dcy - cy, dcx - cx) > a + da + 2:
                break
        background = texture * _smooth_noise(rng, h, w, texture_sigma)
        softness = rng.uniform(0.05, 0.15)
        for s in range(in_slices):
            if s == centre:
                jy = jx = 0.0
                js = 1.0
            else:
                jy, jx = rng.uniform(-1, 1, size=2)
                js = rng.uniform(0.95, 1.05)
            rho = ellipse_radius(h, w, cy + jy, cx + jx, a * js, b * js, th)
            fg = contrast / (1 + np.exp(-(1 - rho) / softness))
            rho_d = ellipse_radius(h, w, dcy + jy, dcx + jx, da * js, db * js, dth)
            distractor = -contrast / (1 + np.exp(-(1 - rho_d) / softness))
            img = background + fg + distractor + noise * rng.standard_normal((h, w))
            images[i, s] = img
        stack = images[i]
        images[i] = (stack - stack.mean()) / stack.std()
    return images, masks, ellipses
