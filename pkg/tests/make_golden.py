"""Regenerate the golden bitstream fixtures in tests/data.

Run from the repository root:

    python3 tests/make_golden.py

The fixtures pin the full encode path: model initialization, latent
table construction, frequency rounding, and range coder output.  Any
intentional format change must regenerate them (and FORMAT.md).
"""

import hashlib
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))

from conftest import tiny_config, tiny_frames  # noqa: E402

from iacodec.bitstream import encode_instance  # noqa: E402
from iacodec.model import CodecModel, save_checkpoint  # noqa: E402
from iacodec.prior import PmfTable, SpikeSlabPrior  # noqa: E402

MODEL_SEED = 1234
FRAME_SEED = 4321
FRAME_COUNT = 2
FRAME_SIZE = 32
BETA = 1e-3
DELTA_SEED = 99
DELTA_DENSITY = 0.05


def sparse_delta(model, table, rng):
    delta = {}
    for p in model.parameters("theta"):
        idx = np.full(p.tensor.size, table.n_bins // 2, dtype=np.int64)
        hot = rng.random(p.tensor.size) < DELTA_DENSITY
        idx[hot] = rng.integers(0, table.n_bins, size=int(hot.sum()))
        delta[p.name] = table.grid.value_for_index(idx).reshape(p.tensor.shape)
    return delta


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "data")
    os.makedirs(out_dir, exist_ok=True)
    model = CodecModel(tiny_config(), rng=np.random.default_rng(MODEL_SEED))
    frames = tiny_frames(FRAME_SEED, count=FRAME_COUNT, size=FRAME_SIZE)
    prior = SpikeSlabPrior()
    table = PmfTable(prior)
    delta = sparse_delta(model, table, np.random.default_rng(DELTA_SEED))

    result = encode_instance(frames, model, prior, BETA, delta)
    ckpt = os.path.join(out_dir, "golden_model.ckpt")
    save_checkpoint(model, ckpt, extra={"beta": BETA})
    iac = os.path.join(out_dir, "golden.iac")
    with open(iac, "wb") as f:
        f.write(result.payload)

    frame_sha = hashlib.sha256()
    for rec in result.reconstructions:
        frame_sha.update(np.ascontiguousarray(rec).tobytes())
    meta = {
        "model_seed": MODEL_SEED,
        "frame_seed": FRAME_SEED,
        "frame_count": FRAME_COUNT,
        "frame_size": FRAME_SIZE,
        "beta": BETA,
        "delta_seed": DELTA_SEED,
        "delta_density": DELTA_DENSITY,
        "payload_sha256": hashlib.sha256(result.payload).hexdigest(),
        "payload_bytes": len(result.payload),
        "model_hash": model.receiver_hash().hex(),
        "reconstruction_sha256": frame_sha.hexdigest(),
        "latent_bits_coded": result.latent_bits_coded,
        "update_bits_coded": result.update_bits_coded,
        "latent_bits_computed": repr(result.latent_bits_computed),
        "update_bits_computed": repr(result.update_bits_computed),
        "mse": repr(result.mse),
        "psnr": repr(result.psnr),
    }
    with open(os.path.join(out_dir, "golden.json"), "w") as f:
        json.dump(meta, f, indent=1)
    print(f"wrote {iac} ({len(result.payload)} bytes), {ckpt}, golden.json")


if __name__ == "__main__":
    main()
