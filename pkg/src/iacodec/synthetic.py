"""Procedural texture sequences for demos and self-contained tests.

Each sequence mixes a handful of oriented sinusoidal gratings with a
drifting soft blob over a smooth color ramp.  Phases advance a little
per frame, giving correlated content that rewards instance adaptation
without being trivial to code.
"""

from __future__ import annotations

import numpy as np


def texture_frames(seed: int, frames: int = 8, size: int = 64,
                   drift: float = 0.35) -> list:
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    yy = yy / size
    xx = xx / size
    n_wave = int(rng.integers(3, 6))
    angle = rng.uniform(0.0, np.pi, n_wave)
    freq = rng.uniform(2.0, 9.0, n_wave) * 2.0 * np.pi
    phase = rng.uniform(0.0, 2.0 * np.pi, n_wave)
    speed = rng.normal(1.0, 0.4, n_wave)
    amp = rng.uniform(0.05, 0.18, (n_wave, 3))
    ramp = (rng.uniform(-0.2, 0.2, 3)[:, None, None] * (xx + yy)[None]
            + rng.uniform(0.35, 0.65, 3)[:, None, None])
    blob_c = rng.uniform(0.2, 0.8, 2)
    blob_v = rng.uniform(-0.05, 0.05, 2)
    blob_amp = rng.uniform(0.1, 0.3, 3)
    blob_r = rng.uniform(0.08, 0.2)

    out = []
    for f in range(frames):
        img = ramp.copy()
        for k in range(n_wave):
            carrier = np.sin(freq[k] * (np.cos(angle[k]) * xx
                                        + np.sin(angle[k]) * yy)
                             + phase[k] + drift * speed[k] * f)
            img += amp[k][:, None, None] * carrier[None]
        cy = blob_c[0] + blob_v[0] * f
        cx = blob_c[1] + blob_v[1] * f
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * blob_r ** 2)))
        img += blob_amp[:, None, None] * blob[None]
        out.append(np.clip(img, 0.0, 1.0))
    return out


def texture_library(seed: int, count: int, size: int = 64) -> list:
    """Independent single textures for global-model training."""
    root = np.random.default_rng(seed)
    return [texture_frames(int(root.integers(1 << 31)), frames=1,
                           size=size)[0] for _ in range(count)]


def main(argv=None):
    import argparse
    from .dataio import save_frames

    ap = argparse.ArgumentParser(
        description="write a synthetic texture sequence as PNG frames")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)
    paths = save_frames(args.out_dir, texture_frames(args.seed, args.frames,
                                                     args.size))
    print(f"wrote {len(paths)} frames to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
