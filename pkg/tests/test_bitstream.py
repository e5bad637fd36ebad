"""Bitstream container: framing, round trips, corruption, goldens."""

import hashlib
import json
import os

import numpy as np
import pytest

from iacodec.bitstream import (BitstreamError, CrcMismatchError,
                               ModelHashMismatchError, StreamHeader,
                               TruncatedStreamError, build_latent_tables,
                               decode_instance, encode_instance,
                               write_bitstream)
from iacodec.model import CodecModel, load_checkpoint
from iacodec.prior import PmfTable, SpikeSlabPrior
from iacodec.quantizer import quantize_np

from conftest import tiny_config, tiny_frames, tiny_model

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def make_delta(model, table, rng, density=0.05):
    """A sparse on-grid update for every receiver tensor."""
    delta = {}
    for p in model.parameters("theta"):
        raw = np.zeros(p.tensor.size)
        hot = rng.random(p.tensor.size) < density
        raw[hot] = rng.normal(scale=0.03, size=int(hot.sum()))
        delta[p.name] = quantize_np(raw, table.grid).reshape(p.tensor.shape)
    return delta


@pytest.fixture(scope="module")
def coded():
    model = tiny_model(21)
    frames = tiny_frames(22, count=2, size=32)
    prior = SpikeSlabPrior()
    table = PmfTable(prior)
    delta = make_delta(model, table, np.random.default_rng(23))
    result = encode_instance(frames, model, prior, 1e-3, delta)
    return model, frames, delta, result


class TestHeader:
    def test_pack_unpack_roundtrip(self):
        hdr = StreamHeader(64, 48, 3, 1e-3, 0.005, 0.05, 1000.0, 59,
                           bytes(range(32)), [(10, 77), (5, 33), (6, 41),
                                              (7, 50)])
        packed = hdr.pack()
        got, off = StreamHeader.unpack(packed + b"tail")
        assert off == len(packed)
        assert got == hdr

    def test_bad_magic(self):
        hdr = StreamHeader(8, 8, 1, 0.1, 0.005, 0.05, 1.0, 59, bytes(32),
                           [(1, 1), (1, 1)])
        blob = bytearray(hdr.pack())
        blob[:4] = b"JUNK"
        with pytest.raises(BitstreamError):
            StreamHeader.unpack(bytes(blob))

    def test_truncation(self):
        hdr = StreamHeader(8, 8, 1, 0.1, 0.005, 0.05, 1.0, 59, bytes(32),
                           [(1, 1), (1, 1)])
        packed = hdr.pack()
        with pytest.raises(TruncatedStreamError):
            StreamHeader.unpack(packed[:40])
        with pytest.raises(TruncatedStreamError):
            StreamHeader.unpack(packed[:-6])

    def test_header_crc(self):
        hdr = StreamHeader(8, 8, 1, 0.1, 0.005, 0.05, 1.0, 59, bytes(32),
                           [(1, 1), (1, 1)])
        blob = bytearray(hdr.pack())
        blob[10] ^= 0x40
        with pytest.raises(CrcMismatchError):
            StreamHeader.unpack(bytes(blob))

    def test_stream_count_consistency(self):
        hdr = StreamHeader(8, 8, 2, 0.1, 0.005, 0.05, 1.0, 59, bytes(32),
                           [(1, 1), (1, 1)])  # 2 frames need 3 streams
        with pytest.raises(BitstreamError):
            StreamHeader.unpack(hdr.pack())


class TestLatentTables:
    def test_support_scales_with_sigma(self):
        mean = np.zeros(3)
        scale = np.array([0.5, 2.0, 40.0])
        lo, cums = build_latent_tables(mean, scale)
        widths = [len(c) - 1 for c in cums]
        assert widths[0] == 33      # floor half-support of 16 each side
        assert widths[1] == 33
        assert widths[2] == 513     # ceil(8 * 40) clamps at half-width 256
        assert lo[0] == -16

    def test_center_follows_mean(self):
        lo, cums = build_latent_tables(np.array([7.3]), np.array([1.0]))
        assert lo[0] == 7 - 16

    def test_tables_are_complete(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(scale=3.0, size=50)
        scale = np.abs(rng.normal(scale=2.0, size=50)) + 0.01
        lo, cums = build_latent_tables(mean, scale)
        for c in cums:
            assert c[0] == 0 and c[-1] == 1 << 16
            assert all(b > a for a, b in zip(c, c[1:]))

    def test_deterministic(self):
        mean = np.linspace(-2, 2, 10)
        scale = np.linspace(0.3, 3.0, 10)
        lo1, cums1 = build_latent_tables(mean, scale)
        lo2, cums2 = build_latent_tables(mean, scale)
        np.testing.assert_array_equal(lo1, lo2)
        assert cums1 == cums2


class TestRoundTrip:
    def test_decode_matches_encode_bitwise(self, coded):
        model, frames, delta, result = coded
        out = decode_instance(result.payload, model)
        assert len(out.frames) == len(frames)
        for dec, enc in zip(out.frames, result.reconstructions):
            np.testing.assert_array_equal(dec, enc)
        assert set(out.delta_bar) == set(delta)
        for name in delta:
            np.testing.assert_array_equal(out.delta_bar[name], delta[name])
        for name, theta in out.theta_bar.items():
            np.testing.assert_array_equal(
                theta, model.param(name).tensor.data + delta[name])

    def test_decode_agrees_on_rates(self, coded):
        model, _, _, result = coded
        out = decode_instance(result.payload, model)
        assert out.latent_bits_coded == result.latent_bits_coded
        assert out.update_bits_coded == result.update_bits_coded
        assert out.update_bits_computed == result.update_bits_computed
        np.testing.assert_allclose(out.latent_bits_computed,
                                   result.latent_bits_computed, rtol=1e-12)

    def test_zero_update_roundtrip(self):
        model = tiny_model(31)
        frames = tiny_frames(32, count=1, size=32)
        prior = SpikeSlabPrior()
        result = encode_instance(frames, model, prior, 1e-3, None)
        out = decode_instance(result.payload, model)
        assert all(np.all(v == 0.0) for v in out.delta_bar.values())
        np.testing.assert_array_equal(out.frames[0],
                                      result.reconstructions[0])

    def test_odd_frame_sizes_pad_and_crop(self):
        model = tiny_model(31)
        frames = [f[:, :33, :45] for f in tiny_frames(33, count=2, size=64)]
        prior = SpikeSlabPrior()
        result = encode_instance(frames, model, prior, 1e-3, None)
        out = decode_instance(result.payload, model)
        assert out.header.width == 45 and out.header.height == 33
        assert out.frames[0].shape == (3, 33, 45)
        np.testing.assert_array_equal(out.frames[1],
                                      result.reconstructions[1])

    def test_rate_consistency_small(self, coded):
        _, _, _, result = coded
        update_err = abs(result.update_bits_coded
                         - result.update_bits_computed)
        latent_err = abs(result.latent_bits_coded
                         - result.latent_bits_computed)
        assert update_err <= 64 + 0.01 * 3183
        assert latent_err <= 2 * 64 + 0.01 * 2 * (3 + 96)

    def test_wrong_model_is_refused(self, coded):
        _, _, _, result = coded
        other = tiny_model(500)
        with pytest.raises(ModelHashMismatchError):
            decode_instance(result.payload, other)

    def test_off_grid_delta_rejected(self, coded):
        model, frames, delta, _ = coded
        bad = dict(delta)
        first = next(iter(bad))
        bad[first] = bad[first] + 0.001
        with pytest.raises(BitstreamError):
            encode_instance(frames, model, SpikeSlabPrior(), 1e-3, bad)

    def test_unknown_parameter_rejected(self, coded):
        model, frames, _, _ = coded
        with pytest.raises(BitstreamError):
            encode_instance(frames, model, SpikeSlabPrior(), 1e-3,
                            {"nonexistent.weight": np.zeros(3)})

    def test_empty_and_ragged_frames_rejected(self, coded):
        model, frames, _, _ = coded
        with pytest.raises(BitstreamError):
            encode_instance([], model, SpikeSlabPrior(), 1e-3)
        ragged = [frames[0], frames[1][:, :32, :16]]
        with pytest.raises(BitstreamError):
            encode_instance(ragged, model, SpikeSlabPrior(), 1e-3)


class TestCorruption:
    def test_every_region_is_guarded(self, coded):
        """Flipping any single byte must raise a container error."""
        model, _, _, result = coded
        blob = bytearray(result.payload)
        step = max(1, len(blob) // 101)
        for pos in range(0, len(blob), step):
            tampered = bytearray(blob)
            tampered[pos] ^= 0x55
            with pytest.raises(BitstreamError):
                decode_instance(bytes(tampered), model)

    def test_update_stream_drives_latent_decode(self, coded):
        """Re-signing a tampered update stream changes the decode: the
        latent tables hang off the updated receiver, so the frames (and
        the update itself) must differ from the original transmission."""
        import struct
        import zlib
        model, _, _, result = coded
        hdr_len = len(result.header.pack())
        payload_len = result.header.stream_sizes[0][0]
        blob = bytearray(result.payload)
        start = hdr_len + 4
        blob[start + payload_len // 2] ^= 0x10
        crc = zlib.crc32(bytes(blob[start:start + payload_len]))
        blob[start + payload_len:start + payload_len + 4] = struct.pack(
            "<I", crc)
        out = decode_instance(bytes(blob), model)
        delta_same = all(np.array_equal(out.delta_bar[n], v)
                         for n, v in coded[2].items())
        frames_same = all(np.array_equal(a, b) for a, b in
                          zip(out.frames, result.reconstructions))
        assert not delta_same
        assert not frames_same

    def test_truncated_payload(self, coded):
        model, _, _, result = coded
        with pytest.raises(TruncatedStreamError):
            decode_instance(result.payload[:-30], model)


class TestWriteBitstream:
    def test_atomic_write(self, tmp_path, coded):
        _, _, _, result = coded
        path = str(tmp_path / "out.iac")
        write_bitstream(path, result.payload)
        assert open(path, "rb").read() == result.payload
        assert not os.path.exists(path + ".tmp")


@pytest.fixture(scope="module")
def golden():
    with open(os.path.join(DATA_DIR, "golden.json")) as f:
        meta = json.load(f)
    blob = open(os.path.join(DATA_DIR, "golden.iac"), "rb").read()
    model, _ = load_checkpoint(os.path.join(DATA_DIR, "golden_model.ckpt"))
    return meta, blob, model


class TestGolden:
    def test_payload_identity(self, golden):
        meta, blob, model = golden
        assert len(blob) == meta["payload_bytes"]
        assert hashlib.sha256(blob).hexdigest() == meta["payload_sha256"]
        assert model.receiver_hash().hex() == meta["model_hash"]

    def test_decode_reproduces_frozen_output(self, golden):
        meta, blob, model = golden
        out = decode_instance(blob, model)
        sha = hashlib.sha256()
        for frame in out.frames:
            sha.update(np.ascontiguousarray(frame).tobytes())
        assert sha.hexdigest() == meta["reconstruction_sha256"]
        assert out.latent_bits_coded == meta["latent_bits_coded"]
        assert out.update_bits_coded == meta["update_bits_coded"]
        assert repr(out.update_bits_computed) == meta["update_bits_computed"]

    def test_reencode_is_byte_identical(self, golden):
        meta, blob, model = golden
        out = decode_instance(blob, model)
        frames = tiny_frames(meta["frame_seed"],
                             count=meta["frame_count"],
                             size=meta["frame_size"])
        redo = encode_instance(frames, model, SpikeSlabPrior(),
                               meta["beta"], out.delta_bar)
        assert redo.payload == blob
