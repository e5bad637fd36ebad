"""Mean-scale hyperprior image codec at desk scale.

Three stride-2 convolution stages map an RGB image to a 32-channel latent
(spatial reduction 8); two more stages map that latent to a 16-channel
hyper latent (further reduction 4, 32 total).  The receiver side holds a
factorized per-channel prior over the hyper latent, a hyper decoder
predicting the image latent's conditional mean and scale, and the image
decoder with inverse GDN stages and a linear output.

Parameters split into the transmitter side ("phi": encoder and hyper
encoder, never serialized into a bitstream) and the receiver side
("theta": everything a decoder needs).  Instance adaptation perturbs the
receiver side only, so the receiver ordering here is the wire ordering of
the update stream.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCALE_FLOOR = 1e-2
PROB_FLOOR = 2.0 ** -16
LN2 = math.log(2.0)

_CKPT_MAGIC = b"IACM"
_CKPT_VERSION = 1


def softplus_inverse(y: float) -> float:
    return float(y + math.log1p(-math.exp(-y)))


@dataclass(frozen=True)
class CodecConfig:
    image_channels: int = 3
    codec_channels: int = 32
    latent_channels: int = 32
    hyper_channels: int = 16
    scale_floor: float = SCALE_FLOOR

    # geometry is fixed: kernel-5 stride-2 codec stages, kernel-3 stride-2
    # hyper stages, so the spatial reductions below are structural
    @property
    def s_codec(self) -> int:
        return 8

    @property
    def s_hyper(self) -> int:
        return 4

    @property
    def s_total(self) -> int:
        return self.s_codec * self.s_hyper

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


@dataclass
class LatentPair:
    """Hyper latent and image latent produced by one analysis pass."""

    hyper: Tensor
    image: Tensor


@dataclass
class MeanScale:
    mean: Tensor
    scale: Tensor


@dataclass
class ParamInfo:
    name: str
    side: str   # "phi" (transmitter) or "theta" (receiver)
    group: str  # reporting group for update histograms
    owner: object
    attr: str

    @property
    def tensor(self) -> Tensor:
        return getattr(self.owner, self.attr)


class _Conv:
    def __init__(self, cin, cout, kernel, stride, rng):
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        w = rng.normal(0.0, std, (cout, cin, kernel, kernel)) if rng else np.zeros(
            (cout, cin, kernel, kernel))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(cout))
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class _Deconv:
    def __init__(self, cin, cout, kernel, stride, rng):
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        w = rng.normal(0.0, std, (cin, cout, kernel, kernel)) if rng else np.zeros(
            (cin, cout, kernel, kernel))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(cout))
        self.stride = stride
        self.padding = kernel // 2
        self.output_padding = stride - 1

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride,
                                   self.padding, self.output_padding)


class _Gdn:
    """GDN/IGDN with softplus-reparameterized positive coefficients."""

    _BETA_RAW = softplus_inverse(1.0)
    _GAMMA_DIAG_RAW = softplus_inverse(0.1)
    _GAMMA_OFF_RAW = -10.0

    def __init__(self, channels, inverse):
        self.beta_raw = Tensor(np.full(channels, self._BETA_RAW))
        graw = np.full((channels, channels), self._GAMMA_OFF_RAW)
        np.fill_diagonal(graw, self._GAMMA_DIAG_RAW)
        self.gamma_raw = Tensor(graw)
        self.inverse = inverse

    def __call__(self, x):
        beta = ad.softplus(self.beta_raw)
        gamma = ad.softplus(self.gamma_raw)
        return ad.gdn(x, beta, gamma, inverse=self.inverse)


class CodecModel:
    def __init__(self, config: CodecConfig | None = None,
                 rng: np.random.Generator | None = None):
        cfg = config or CodecConfig()
        self.config = cfg
        ci, cc, cl, ch = (cfg.image_channels, cfg.codec_channels,
                          cfg.latent_channels, cfg.hyper_channels)

        self.enc_conv0 = _Conv(ci, cc, 5, 2, rng)
        self.enc_gdn0 = _Gdn(cc, inverse=False)
        self.enc_conv1 = _Conv(cc, cc, 5, 2, rng)
        self.enc_gdn1 = _Gdn(cc, inverse=False)
        self.enc_conv2 = _Conv(cc, cl, 5, 2, rng)

        self.henc_conv0 = _Conv(cl, ch, 3, 2, rng)
        self.henc_conv1 = _Conv(ch, ch, 3, 2, rng)

        self.prior_mean = Tensor(np.zeros(ch))
        self.prior_scale_raw = Tensor(np.full(ch, softplus_inverse(1.0)))

        self.hdec_shared = _Deconv(ch, cl, 3, 2, rng)
        self.hdec_mean = _Deconv(cl, cl, 3, 2, rng)
        self.hdec_scale = _Deconv(cl, cl, 3, 2, rng)

        self.dec_deconv0 = _Deconv(cl, cc, 5, 2, rng)
        self.dec_igdn0 = _Gdn(cc, inverse=True)
        self.dec_deconv1 = _Deconv(cc, cc, 5, 2, rng)
        self.dec_igdn1 = _Gdn(cc, inverse=True)
        self.dec_deconv2 = _Deconv(cc, ci, 5, 2, rng)

        self._params = self._build_registry()
        self._by_name = {p.name: p for p in self._params}

    # ------------------------------------------------------------ registry

    def _build_registry(self) -> list[ParamInfo]:
        params: list[ParamInfo] = []

        def reg(side, group, owner, prefix, attrs):
            for a in attrs:
                params.append(ParamInfo(f"{prefix}.{a}", side, group, owner, a))

        # receiver ordering below is the wire ordering for update streams
        params.append(ParamInfo("hyperprior.mean", "theta", "hyperprior",
                                self, "prior_mean"))
        params.append(ParamInfo("hyperprior.scale_raw", "theta", "hyperprior",
                                self, "prior_scale_raw"))
        for tag, layer in (("shared", self.hdec_shared),
                           ("mean_head", self.hdec_mean),
                           ("scale_head", self.hdec_scale)):
            reg("theta", "hyper_decoder", layer, f"hyper_decoder.{tag}",
                ("weight", "bias"))
        for i, layer in enumerate((self.dec_deconv0, self.dec_deconv1,
                                   self.dec_deconv2)):
            params.append(ParamInfo(f"decoder.deconv{i}.weight", "theta",
                                    "decoder_conv", layer, "weight"))
            params.append(ParamInfo(f"decoder.deconv{i}.bias", "theta",
                                    "decoder_bias", layer, "bias"))
        for i, layer in enumerate((self.dec_igdn0, self.dec_igdn1)):
            reg("theta", "igdn", layer, f"decoder.igdn{i}",
                ("beta_raw", "gamma_raw"))

        for i, layer in enumerate((self.enc_conv0, self.enc_conv1,
                                   self.enc_conv2)):
            reg("phi", "encoder", layer, f"encoder.conv{i}", ("weight", "bias"))
        for i, layer in enumerate((self.enc_gdn0, self.enc_gdn1)):
            reg("phi", "encoder", layer, f"encoder.gdn{i}",
                ("beta_raw", "gamma_raw"))
        for i, layer in enumerate((self.henc_conv0, self.henc_conv1)):
            reg("phi", "encoder", layer, f"hyper_encoder.conv{i}",
                ("weight", "bias"))
        return params

    def parameters(self, side: str | None = None) -> list[ParamInfo]:
        if side is None:
            return list(self._params)
        return [p for p in self._params if p.side == side]

    def param(self, name: str) -> ParamInfo:
        return self._by_name[name]

    def receiver_parameter_count(self) -> int:
        return sum(p.tensor.size for p in self.parameters("theta"))

    def set_requires_grad(self, side: str, flag: bool):
        for p in self.parameters(side):
            p.tensor.requires_grad = flag

    @contextmanager
    def override_receiver(self, mapping: dict[str, Tensor]):
        """Temporarily replace receiver tensors (e.g. with updated ones)."""
        saved = []
        for name, tensor in mapping.items():
            info = self._by_name[name]
            if info.side != "theta":
                raise ValueError(f"override_receiver: {name} is not receiver-side")
            saved.append((info, getattr(info.owner, info.attr)))
            setattr(info.owner, info.attr, tensor)
        try:
            yield
        finally:
            for info, tensor in saved:
                setattr(info.owner, info.attr, tensor)

    def _phi_ids(self) -> set:
        return {id(p.tensor) for p in self.parameters("phi")}

    # ------------------------------------------------------------ forwards

    def analysis(self, x) -> tuple[Tensor, Tensor]:
        """Image -> (image latent, hyper latent), both pre-quantization."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[0] != self.config.image_channels or len(x.shape) != 3:
            raise ValueError(f"analysis: expected (C,H,W) image, got {x.shape}")
        if x.shape[1] % self.config.s_total or x.shape[2] % self.config.s_total:
            raise ValueError(
                f"analysis: spatial dims {x.shape[1:]} must be multiples of "
                f"{self.config.s_total}; pad first")
        h = self.enc_gdn0(self.enc_conv0(x))
        h = self.enc_gdn1(self.enc_conv1(h))
        y_image = self.enc_conv2(h)
        g = ad.leaky_relu(self.henc_conv0(y_image), 0.01)
        y_hyper = self.henc_conv1(g)
        return y_image, y_hyper

    def encode_latents(self, x, mode: str,
                       rng: np.random.Generator | None = None) -> LatentPair:
        y_image, y_hyper = self.analysis(x)
        if mode == "noisy":
            if rng is None:
                raise ValueError("encode_latents: noisy mode needs an rng")
            return LatentPair(ad.add_uniform_noise(y_hyper, 1.0, rng),
                              ad.add_uniform_noise(y_image, 1.0, rng))
        if mode == "rounded":
            return LatentPair(ad.ste_round(y_hyper), ad.ste_round(y_image))
        if mode == "deterministic":
            return LatentPair(y_hyper, y_image)
        raise ValueError(f"encode_latents: unknown mode {mode!r}")

    def hyper_prior(self) -> MeanScale:
        ch = self.config.hyper_channels
        mean = ad.reshape(self.prior_mean, (ch, 1, 1))
        scale = ad.add(ad.softplus(ad.reshape(self.prior_scale_raw, (ch, 1, 1))),
                       self.config.scale_floor)
        return MeanScale(mean, scale)

    def hyper_synthesis(self, z_hyper) -> MeanScale:
        z = z_hyper if isinstance(z_hyper, Tensor) else Tensor(z_hyper)
        h = ad.leaky_relu(self.hdec_shared(z), 0.01)
        mean = self.hdec_mean(h)
        scale = ad.add(ad.softplus(self.hdec_scale(h)), self.config.scale_floor)
        return MeanScale(mean, scale)

    def synthesis(self, z_image) -> Tensor:
        """Image latent -> reconstruction; must never touch phi."""
        z = z_image if isinstance(z_image, Tensor) else Tensor(z_image)
        tape = ad.active_tape()
        start = len(tape.nodes) if tape is not None else 0
        h = self.dec_igdn0(self.dec_deconv0(z))
        h = self.dec_igdn1(self.dec_deconv1(h))
        out = self.dec_deconv2(h)
        if tape is not None:
            phi = self._phi_ids()
            for node in tape.nodes[start:]:
                for inp in node.inputs:
                    if id(inp) in phi:
                        raise AssertionError(
                            "synthesis: transmitter parameter on the decode tape")
        return out

    def reconstruct(self, latents: LatentPair) -> Tensor:
        return self.synthesis(latents.image)

    def latent_rate(self, latents: LatentPair) -> Tensor:
        """Total code length of both latents in bits under unit-width bins.

        The hyper latent is rated under the factorized prior; the image
        latent under the mean/scale tables the hyper decoder produces
        from the hyper latent exactly as given in the pair.
        """
        prior = self.hyper_prior()
        bits = gaussian_bin_bits(latents.hyper, prior.mean, prior.scale)
        tables = self.hyper_synthesis(latents.hyper)
        return ad.add(bits, gaussian_bin_bits(latents.image, tables.mean,
                                              tables.scale))

    # --------------------------------------------------------- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data for p in self._params}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for p in self._params:
            if p.name not in state:
                raise ValueError(f"checkpoint missing parameter {p.name}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.tensor.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {p.name}: "
                    f"{value.shape} vs {p.tensor.shape}")
            p.tensor.data = value.copy()

    def clone(self) -> "CodecModel":
        other = CodecModel(self.config)
        other.load_state_arrays(self.state_arrays())
        return other

    def receiver_hash(self) -> bytes:
        """sha256 over receiver parameters in wire order."""
        h = hashlib.sha256()
        for p in self.parameters("theta"):
            h.update(p.name.encode())
            h.update(np.asarray(p.tensor.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(p.tensor.data,
                                          dtype="<f8").tobytes())
        return h.digest()


def gaussian_bin_bits(value, mean, scale) -> Tensor:
    """-log2 of unit-width bin masses under N(mean, scale), summed.

    Per-bin probabilities are floored at 2**-16 so far-tail values cost a
    finite 16 bits instead of overflowing.
    """
    inv = ad.div(1.0, ad.mul(scale, math.sqrt(2.0)))
    centered = ad.sub(value, mean)
    hi = ad.erf(ad.mul(ad.add(centered, 0.5), inv))
    lo = ad.erf(ad.mul(ad.sub(centered, 0.5), inv))
    p = ad.mul(ad.sub(hi, lo), 0.5)
    p = ad.maximum(p, PROB_FLOOR)
    return ad.mul(ad.sum_all(ad.log(p)), -1.0 / LN2)


def pad_to_multiple(x: np.ndarray, multiple: int) -> np.ndarray:
    """Replicate-pad (C,H,W) on the bottom/right to a size multiple."""
    _, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")


def crop_to(x: np.ndarray, height: int, width: int) -> np.ndarray:
    return x[:, :height, :width]


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: CodecModel, path: str, extra: dict | None = None):
    meta = json.dumps({"config": model.config.to_dict(),
                       "extra": extra or {}}).encode()
    blob = bytearray()
    blob += struct.pack("<4sHI", _CKPT_MAGIC, _CKPT_VERSION, len(meta))
    blob += meta
    params = model.parameters()
    blob += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode()
        data = np.ascontiguousarray(p.tensor.data, dtype="<f8")
        blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[CodecModel, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"not a codec checkpoint: {path}")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise ValueError(f"checkpoint CRC mismatch: {path}")
    _, version, meta_len = struct.unpack_from("<4sHI", blob, 0)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, "<f8", n, off).reshape(shape)
        off += 8 * n
    model = CodecModel(CodecConfig.from_dict(meta["config"]))
    model.load_state_arrays(state)
    return model, meta.get("extra", {})
