"""Procedural 8-class texture dataset for the toy trainer.

Each class is a sinusoidal grating with one of four orientations and one of
two spatial frequencies, drawn with a random phase and a random colour mix
plus pixel noise. Because the phase is uniform, every class has a zero mean
image, so a linear model on raw pixels cannot separate them; telling them
apart needs orientation/frequency energy, which is a nonlinear feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 8
ANGLES = (0.0, 45.0, 90.0, 135.0)
PERIODS = (16.0, 6.0)  # pixels at a 64-pixel side; scaled with the image side


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # [N, 3, S, S] float32
    labels: np.ndarray  # [N] int64


def _class_params(label: int) -> tuple[float, float]:
    return ANGLES[label % 4], PERIODS[label // 4]


def render(label: int, side: int, rng: np.random.Generator, noise: float = 0.3) -> np.ndarray:
    angle, period = _class_params(label)
    period = period * side / 64.0
    theta = np.deg2rad(angle + rng.uniform(-8.0, 8.0))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    u = xx * np.cos(theta) + yy * np.sin(theta)
    wave = np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
    colour = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1.0, 1.0])
    img = colour[:, None, None] * wave[None] + noise * rng.standard_normal((3, side, side))
    return img.astype(np.float32)


def make_split(n: int, side: int, seed: int) -> Split:
    """``n`` images, label-balanced (``n`` must be a multiple of 8), shuffled deterministically."""
    if n % NUM_CLASSES:
        raise ValueError(f"split size {n} is not a multiple of {NUM_CLASSES}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(NUM_CLASSES), n // NUM_CLASSES)
    rng.shuffle(labels)
    images = np.stack([render(int(y), side, rng) for y in labels])
    return Split(images, labels.astype(np.int64))


def make_dataset(side: int, seed: int = 0, n_train: int = 512, n_test: int = 128) -> tuple[Split, Split]:
    return make_split(n_train, side, seed * 2 + 1), make_split(n_test, side, seed * 2 + 2)
