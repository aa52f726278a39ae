"""Synthetic event-camera recordings for tests and desk-scale experiments.

Each class is a bar of a distinct orientation sweeping across the sensor;
pixels entering the bar emit on-events, pixels leaving emit off-events,
plus uniform background noise.  Per-sample variation comes from random
phase, sweep direction, speed jitter, and the noise realization, so
classes are separable by oriented spatiotemporal structure but samples
within a class are not duplicates.
"""

import numpy as np

from .events import EventStream, save_dataset_dir


def moving_bar_stream(
    width: int,
    height: int,
    duration_ms: float,
    angle: float,
    rng,
    speed_px_ms: float = 0.35,
    thickness: float = 1.2,
    noise_hz_per_px: float = 3.0,
) -> EventStream:
    """Events from one bar sweep at the given orientation.

    The bar is the set of pixels within ``thickness`` of the moving line
    x.cos(angle) + y.sin(angle) = offset(t); the offset wraps so the bar
    crosses the frame repeatedly for long recordings.
    """
    T = int(round(duration_ms))
    yy, xx = np.mgrid[0:height, 0:width]
    dist = xx * np.cos(angle) + yy * np.sin(angle)  # static signed distance field
    lo, hi = dist.min() - 2 * thickness, dist.max() + 2 * thickness
    span = hi - lo
    phase = rng.uniform(0, span)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    speed = speed_px_ms * rng.uniform(0.8, 1.25)

    ts, xs, ys, ps = [], [], [], []
    prev = np.zeros((height, width), dtype=bool)
    for t in range(T):
        offset = lo + (phase + direction * speed * t) % span
        inside = np.abs(dist - offset) <= thickness
        on = inside & ~prev
        off = prev & ~inside
        prev = inside
        for mask, pol in ((on, 1), (off, 0)):
            y, x = np.nonzero(mask)
            if len(y):
                ts.append(t * 1000 + rng.integers(0, 1000, len(y)))
                xs.append(x)
                ys.append(y)
                ps.append(np.full(len(y), pol, dtype=np.uint8))
        n_noise = rng.poisson(noise_hz_per_px * width * height * 1e-3)
        if n_noise:
            ts.append(t * 1000 + rng.integers(0, 1000, n_noise))
            xs.append(rng.integers(0, width, n_noise))
            ys.append(rng.integers(0, height, n_noise))
            ps.append(rng.integers(0, 2, n_noise).astype(np.uint8))
    if ts:
        t_all = np.concatenate(ts)
        order = np.argsort(t_all, kind="stable")
        return EventStream(
            t=t_all[order],
            x=np.concatenate(xs)[order],
            y=np.concatenate(ys)[order],
            polarity=np.concatenate(ps)[order],
            width=width,
            height=height,
        )
    return EventStream(
        t=np.empty(0, np.int64), x=np.empty(0, np.int32), y=np.empty(0, np.int32),
        polarity=np.empty(0, np.uint8), width=width, height=height,
    )


def class_angle(label: int, n_classes: int) -> float:
    return np.pi * label / n_classes


def synthetic_entries(
    n_classes: int,
    n_per_class: int,
    width: int,
    height: int,
    duration_ms: float,
    seed: int,
    **bar_kwargs,
):
    """Balanced (stream, label, subject, light) tuples, label-interleaved."""
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_per_class):
        for label in range(n_classes):
            stream = moving_bar_stream(
                width, height, duration_ms, class_angle(label, n_classes), rng, **bar_kwargs
            )
            entries.append((stream, label, f"s{i % 7}", "led"))
    return entries


def write_synthetic_dataset(
    root,
    n_classes: int,
    n_train_per_class: int,
    n_test_per_class: int,
    width: int,
    height: int,
    duration_ms: float,
    seed: int = 0,
    **bar_kwargs,
) -> None:
    """Create ``root/train`` and ``root/test`` dataset directories."""
    from pathlib import Path

    root = Path(root)
    save_dataset_dir(
        root / "train",
        synthetic_entries(n_classes, n_train_per_class, width, height, duration_ms, seed, **bar_kwargs),
    )
    save_dataset_dir(
        root / "test",
        synthetic_entries(n_classes, n_test_per_class, width, height, duration_ms, seed + 104729, **bar_kwargs),
    )
