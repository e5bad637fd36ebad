"""Training loops: global model fitting and per-instance adaptation.

Per step the loss is beta * rate + distortion, normalized to bits per
pixel.  Rate uses noise-smoothed latents; distortion uses hard-rounded
image latents with straight-through gradients.  Full-model adaptation
adds the update-rate term beta * M / set_pixels, where M is the
interpolated bin-mass code length of the (straight-through quantized)
receiver update.

Evaluation always runs on rounded latents with reconstructions clamped
to [0, 1] and cropped to the source frame.  Reported totals follow

    total_bpp = (beta * latent_bits + distortion) / pixels
                + beta * update_bits / pixels

with update_bits the discrete table cost of the quantized update, so a
zero-step full-model run differs from the plain global evaluation by
exactly the all-zero update cost.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (CodecConfig, CodecModel, LatentPair, pad_to_multiple,
                    crop_to)
from .prior import PmfTable, SpikeSlabPrior
from .quantizer import quantize, quantize_np

REGIMES = ("full_model", "encoder_only", "direct_latent")

# ablation cases: flags are (quantization_aware, model_rate_loss); the
# lettered aliases reuse the unregularized runs but account without the
# update-rate term (and, for VI, without quantizing the update)
CASE_FLAGS = {"I": (True, True), "II": (False, True),
              "III": (True, False), "IV": (False, False)}
CASE_ALIAS = {"V": "III", "VI": "IV"}


def default_lr(regime: str, beta: float) -> float:
    if regime == "full_model":
        return 1e-4
    if regime == "encoder_only":
        return 1e-6
    if regime == "direct_latent":
        return 5e-4 if beta >= 1e-3 else 1e-3
    raise ValueError(f"unknown regime {regime!r}")


@dataclass
class FinetuneConfig:
    regime: str = "full_model"
    beta: float = 1e-3
    steps: int = 5000
    lr: float | None = None
    eval_interval: int = 250
    seed: int = 0
    quantization_aware: bool = True
    model_rate_loss: bool = True
    t: float = 0.005
    sigma: float = 0.05
    alpha: float = 1000.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.steps < 0 or self.eval_interval < 1:
            raise ValueError("steps must be >= 0 and eval_interval >= 1")

    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else default_lr(self.regime,
                                                              self.beta)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        # per-tensor step counts: a tensor skipped this step (no grad)
        # keeps its bias correction consistent with its own history
        self._t = [0] * len(self.params)

    def step(self):
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self._t[i] += 1
            t = self._t[i]
            m, v = self._m[i], self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ------------------------------------------------------------- evaluation


@dataclass
class EvalMetrics:
    beta: float
    frames: int
    pixels: int
    latent_bits: float
    update_bits: float
    distortion: float  # sum of squared errors, equal to its bit cost
    mse: float
    psnr: float

    @property
    def latent_bpp(self) -> float:
        return self.latent_bits / self.pixels

    @property
    def update_bpp(self) -> float:
        return self.update_bits / self.pixels

    @property
    def distortion_pp(self) -> float:
        return self.distortion / self.pixels

    @property
    def total_bpp(self) -> float:
        return ((self.beta * self.latent_bits + self.distortion) / self.pixels
                + self.beta * self.update_bits / self.pixels)


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse <= 0.0 else -10.0 * math.log10(mse)


def _rounded_pair(model: CodecModel, frame_padded: np.ndarray) -> LatentPair:
    y_img, y_hyp = model.analysis(frame_padded)
    return LatentPair(Tensor(ad.round_half_away(y_hyp.data)),
                      Tensor(ad.round_half_away(y_img.data)))


def evaluate_set(model: CodecModel, frames, beta: float, *,
                 table: PmfTable | None = None,
                 delta: dict | None = None,
                 quantize_delta: bool = True,
                 count_update_rate: bool = True) -> EvalMetrics:
    """Discrete-path metrics over an instance set.

    ``delta`` maps receiver parameter names to raw update arrays.  The
    reconstruction uses the quantized update unless ``quantize_delta`` is
    off; the reported update cost is always the table cost of the
    quantized update (or zero when not counted).
    """
    update_bits = 0.0
    over = None
    if delta is not None:
        if table is None:
            raise ValueError("evaluate_set: delta given without a pmf table")
        over = {}
        for name, raw in delta.items():
            applied = quantize_np(raw, table.grid) if quantize_delta else raw
            over[name] = Tensor(model.param(name).tensor.data + applied)
        if count_update_rate:
            update_bits = sum(
                table.rate_bits(quantize_np(raw, table.grid))
                for raw in delta.values())
    latent_bits = 0.0
    sq_err = 0.0
    pixels = 0
    ctx = model.override_receiver(over) if over else nullcontext()
    with ctx:
        for frame in frames:
            c, h, w = frame.shape
            fp = pad_to_multiple(frame, model.config.s_total)
            pair = _rounded_pair(model, fp)
            latent_bits += model.latent_rate(pair).item()
            xhat = crop_to(np.clip(model.synthesis(pair.image).data, 0.0, 1.0),
                           h, w)
            sq_err += float(((xhat - frame) ** 2).sum())
            pixels += h * w
    mse = sq_err / (pixels * frames[0].shape[0])
    return EvalMetrics(beta, len(frames), pixels, latent_bits, update_bits,
                       sq_err, mse, psnr_from_mse(mse))


def evaluate_latents(model: CodecModel, frames, latents, beta: float) -> EvalMetrics:
    """Metrics for directly-optimized latents (one pair per frame)."""
    latent_bits = 0.0
    sq_err = 0.0
    pixels = 0
    for frame, (y_hyp, y_img) in zip(frames, latents):
        c, h, w = frame.shape
        pair = LatentPair(Tensor(ad.round_half_away(y_hyp.data)),
                          Tensor(ad.round_half_away(y_img.data)))
        latent_bits += model.latent_rate(pair).item()
        xhat = crop_to(np.clip(model.synthesis(pair.image).data, 0.0, 1.0), h, w)
        sq_err += float(((xhat - frame) ** 2).sum())
        pixels += h * w
    mse = sq_err / (pixels * frames[0].shape[0])
    return EvalMetrics(beta, len(frames), pixels, latent_bits, 0.0,
                       sq_err, mse, psnr_from_mse(mse))


# -------------------------------------------------------------- finetuning


@dataclass
class FinetuneResult:
    config: FinetuneConfig
    table: PmfTable
    curves: list = field(default_factory=list)
    best_step: int = 0
    best_selection: float = math.inf
    best_metrics: EvalMetrics | None = None            # quantized + counted
    best_selection_metrics: EvalMetrics | None = None  # config-consistent
    best_delta: dict | None = None
    best_phi: dict | None = None
    best_latents: list | None = None
    final_delta: dict | None = None
    final_phi: dict | None = None
    final_latents: list | None = None

    def delta_bar(self, which: str = "best") -> dict | None:
        src = self.best_delta if which == "best" else self.final_delta
        if src is None:
            return None
        return {k: quantize_np(v, self.table.grid) for k, v in src.items()}

    def update_nnz(self, which: str = "best") -> int:
        bar = self.delta_bar(which)
        if bar is None:
            return 0
        return int(sum(np.count_nonzero(v) for v in bar.values()))


def _loss_parts(model, frame_t, beta, rng, pixels):
    y_img, y_hyp = model.analysis(frame_t)
    pair = LatentPair(ad.add_uniform_noise(y_hyp, 1.0, rng),
                      ad.add_uniform_noise(y_img, 1.0, rng))
    rate = model.latent_rate(pair)
    xhat = model.synthesis(ad.ste_round(y_img))
    diff = ad.sub(xhat, frame_t)
    dist = ad.sum_all(ad.mul(diff, diff))
    loss = ad.mul(ad.add(ad.mul(rate, beta), dist), 1.0 / pixels)
    return loss, rate, dist


def finetune(global_model: CodecModel, frames, config: FinetuneConfig) -> FinetuneResult:
    """Adapt to one instance set; returns curves plus best/final states.

    The best snapshot minimizes the run's own objective in discrete form:
    quantized iff quantization-aware, update cost counted iff the
    update-rate term is in the loss.  Reported curve rows always use the
    quantized-and-counted accounting.
    """
    if not frames:
        raise ValueError("finetune: empty instance set")
    model = global_model.clone()
    prior = SpikeSlabPrior(config.t, config.sigma, config.alpha)
    table = PmfTable(prior)
    grid = table.grid
    rng = np.random.default_rng(config.seed)
    padded = [pad_to_multiple(f, model.config.s_total) for f in frames]
    padded_t = [Tensor(f) for f in padded]
    frame_px = [f.shape[1] * f.shape[2] for f in padded]
    set_px = sum(frame_px)
    beta = config.beta
    result = FinetuneResult(config=config, table=table)

    model.set_requires_grad("phi", False)
    model.set_requires_grad("theta", False)
    deltas: dict[str, Tensor] = {}
    latents: list[tuple[Tensor, Tensor]] = []

    if config.regime == "full_model":
        model.set_requires_grad("phi", True)
        deltas = {p.name: Tensor(np.zeros(p.tensor.shape), requires_grad=True)
                  for p in model.parameters("theta")}
        trainables = [p.tensor for p in model.parameters("phi")]
        trainables += list(deltas.values())
    elif config.regime == "encoder_only":
        model.set_requires_grad("phi", True)
        trainables = [p.tensor for p in model.parameters("phi")]
    else:
        for fp in padded:
            y_img, y_hyp = model.analysis(fp)
            latents.append((Tensor(y_hyp.data.copy(), requires_grad=True),
                            Tensor(y_img.data.copy(), requires_grad=True)))
        trainables = [t for pair in latents for t in pair]

    opt = Adam(trainables, config.resolved_lr())

    def snapshot_state():
        snap = {}
        if config.regime in ("full_model", "encoder_only"):
            snap["phi"] = {p.name: p.tensor.data.copy()
                           for p in model.parameters("phi")}
        if config.regime == "full_model":
            snap["delta"] = {k: t.data.copy() for k, t in deltas.items()}
        if config.regime == "direct_latent":
            snap["latents"] = [(a.data.copy(), b.data.copy())
                               for a, b in latents]
        return snap

    def run_eval(done: int):
        if config.regime == "full_model":
            raw = {k: t.data for k, t in deltas.items()}
            report = evaluate_set(model, frames, beta, table=table, delta=raw,
                                  quantize_delta=True, count_update_rate=True)
            if (config.quantization_aware, config.model_rate_loss) == (True, True):
                sel = report
            else:
                sel = evaluate_set(model, frames, beta, table=table, delta=raw,
                                   quantize_delta=config.quantization_aware,
                                   count_update_rate=config.model_rate_loss)
        elif config.regime == "encoder_only":
            report = evaluate_set(model, frames, beta)
            sel = report
        else:
            report = evaluate_latents(model, frames, latents, beta)
            sel = report
        result.curves.append({
            "step": done,
            "latent_bpp": report.latent_bpp,
            "update_bpp": report.update_bpp,
            "mse": report.mse,
            "psnr": report.psnr,
            "total_bpp": report.total_bpp,
        })
        if sel.total_bpp < result.best_selection:
            result.best_selection = sel.total_bpp
            result.best_step = done
            result.best_metrics = report
            result.best_selection_metrics = sel
            snap = snapshot_state()
            result.best_phi = snap.get("phi")
            result.best_delta = snap.get("delta")
            result.best_latents = snap.get("latents")

    def train_step(step: int):
        idx = step % len(frames)
        with ad.record() as tape:
            if config.regime == "full_model":
                over = {}
                applied = {}
                for name, d in deltas.items():
                    dq = quantize(d, grid) if config.quantization_aware else d
                    applied[name] = dq
                    over[name] = ad.add(model.param(name).tensor, dq)
                with model.override_receiver(over):
                    loss, _, _ = _loss_parts(model, padded_t[idx], beta, rng,
                                             frame_px[idx])
                if config.model_rate_loss:
                    mbits = None
                    for name in applied:
                        term = prior.update_rate_op(applied[name])
                        mbits = term if mbits is None else ad.add(mbits, term)
                    loss = ad.add(loss, ad.mul(mbits, beta / set_px))
            elif config.regime == "encoder_only":
                loss, _, _ = _loss_parts(model, padded_t[idx], beta, rng,
                                         frame_px[idx])
            else:
                y_hyp, y_img = latents[idx]
                pair = LatentPair(ad.add_uniform_noise(y_hyp, 1.0, rng),
                                  ad.add_uniform_noise(y_img, 1.0, rng))
                rate = model.latent_rate(pair)
                xhat = model.synthesis(ad.ste_round(y_img))
                diff = ad.sub(xhat, padded_t[idx])
                dist = ad.sum_all(ad.mul(diff, diff))
                loss = ad.mul(ad.add(ad.mul(rate, beta), dist),
                              1.0 / frame_px[idx])
        ad.backward(loss, tape)
        opt.step()
        opt.zero_grad()

    run_eval(0)
    for step in range(config.steps):
        train_step(step)
        done = step + 1
        if done % config.eval_interval == 0 or done == config.steps:
            run_eval(done)

    final = snapshot_state()
    result.final_phi = final.get("phi")
    result.final_delta = final.get("delta")
    result.final_latents = final.get("latents")
    return result


# ---------------------------------------------------------- global training


@dataclass
class GlobalTrainConfig:
    beta: float = 1e-3
    steps: int = 2000
    lr: float = 1e-4
    crop: int = 64
    seed: int = 0
    lr_drop_fraction: float = 0.9
    model: CodecConfig = field(default_factory=CodecConfig)


def train_global(images, config: GlobalTrainConfig):
    """Fit a global model on random crops; returns (model, curve rows)."""
    if not images:
        raise ValueError("train_global: no training images")
    if config.crop % CodecConfig().s_total:
        raise ValueError(f"train_global: crop must be a multiple of "
                         f"{CodecConfig().s_total}")
    seqs = np.random.SeedSequence(config.seed).spawn(3)
    model = CodecModel(config.model, rng=np.random.default_rng(seqs[0]))
    model.set_requires_grad("phi", True)
    model.set_requires_grad("theta", True)
    opt = Adam([p.tensor for p in model.parameters()], config.lr)
    data_rng = np.random.default_rng(seqs[1])
    noise_rng = np.random.default_rng(seqs[2])
    drop_at = math.ceil(config.lr_drop_fraction * config.steps)
    px = config.crop * config.crop
    curves = []
    for step in range(config.steps):
        opt.lr = config.lr if step < drop_at else config.lr / 10.0
        img = images[int(data_rng.integers(len(images)))]
        _, h, w = img.shape
        if h < config.crop or w < config.crop:
            raise ValueError("train_global: image smaller than the crop")
        oy = int(data_rng.integers(h - config.crop + 1))
        ox = int(data_rng.integers(w - config.crop + 1))
        patch = Tensor(img[:, oy:oy + config.crop, ox:ox + config.crop])
        with ad.record() as tape:
            loss, rate, dist = _loss_parts(model, patch, config.beta,
                                           noise_rng, px)
        ad.backward(loss, tape)
        opt.step()
        opt.zero_grad()
        curves.append({"step": step + 1, "lr": opt.lr, "loss": loss.item(),
                       "latent_bpp": rate.item() / px,
                       "distortion_pp": dist.item() / px})
    model.set_requires_grad("phi", False)
    model.set_requires_grad("theta", False)
    return model, curves


# ---------------------------------------------------------------- ablation


def ablate(global_model: CodecModel, frames, config: FinetuneConfig, cases):
    """Run the requested ablation cases, sharing runs between aliases.

    Returns (rows, runs): one report row per requested case, and the
    underlying FinetuneResult per base case that was trained.
    """
    cases = list(cases)
    for case in cases:
        if case not in CASE_FLAGS and case not in CASE_ALIAS:
            raise ValueError(f"unknown ablation case {case!r}")
    needed = sorted({CASE_ALIAS.get(c, c) for c in cases})

    def run_one(base_case: str):
        qa, ml = CASE_FLAGS[base_case]
        cfg = replace(config, regime="full_model", quantization_aware=qa,
                      model_rate_loss=ml)
        return base_case, finetune(global_model, frames, cfg)

    workers = int(os.environ.get("IAC_THREADS", "1"))
    if workers > 1 and len(needed) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = dict(pool.map(run_one, needed))
    else:
        runs = dict(run_one(c) for c in needed)

    rows = []
    for case in cases:
        base = CASE_ALIAS.get(case, case)
        run = runs[base]
        counted = case in CASE_FLAGS
        metrics = run.best_metrics if counted else run.best_selection_metrics
        qa, ml = CASE_FLAGS[base]
        rows.append({
            "case": case,
            "quantization_aware": qa,
            "model_rate_loss": ml,
            "update_counted": counted,
            "best_step": run.best_step,
            "latent_bpp": metrics.latent_bpp,
            "update_bpp": metrics.update_bpp,
            "distortion_pp": metrics.distortion_pp,
            "mse": metrics.mse,
            "psnr": metrics.psnr,
            "total_bpp": metrics.total_bpp,
            "update_nnz_best": run.update_nnz("best"),
            "update_nnz_final": run.update_nnz("final"),
        })
    return rows, runs


def temporal_frame_counts(available: int, requested=None) -> list[int]:
    base = requested or [1, 2, 5, 10, 25, 50, 100, 250, 500]
    out = []
    for f in base:
        f = min(int(f), available)
        if f >= 1 and f not in out:
            out.append(f)
    return sorted(out)


def temporal_indices(available: int, count: int) -> list[int]:
    """Equispaced frame indices starting at zero."""
    return [int(math.floor(k * available / count)) for k in range(count)]


def temporal_ablate(global_model: CodecModel, frames, betas,
                    config: FinetuneConfig, counts=None):
    """Finetune on equispaced subsets of growing size, per beta."""
    rows = []
    for beta in betas:
        for f in temporal_frame_counts(len(frames), counts):
            idx = temporal_indices(len(frames), f)
            subset = [frames[i] for i in idx]
            cfg = replace(config, regime="full_model", beta=beta)
            run = finetune(global_model, subset, cfg)
            m = run.best_metrics
            rows.append({
                "beta": beta,
                "frame_count": f,
                "indices": " ".join(str(i) for i in idx),
                "best_step": run.best_step,
                "latent_bpp": m.latent_bpp,
                "update_bpp": m.update_bpp,
                "update_kb": m.update_bits / 8.0 / 1024.0,
                "distortion_pp": m.distortion_pp,
                "psnr": m.psnr,
                "total_bpp": m.total_bpp,
            })
    return rows


# --------------------------------------------------------------- selection


def select_representative(loss_table: dict, n: int) -> list[str]:
    """Pick n instances spreading the per-beta difficulty ranking.

    ``loss_table`` maps instance name -> {beta -> loss}.  Instances get
    competition-style ranks per beta (ties share a rank), rank averages
    become percentiles of the pool size, and for each target percentile
    k/(n+1) the nearest unchosen instance wins, ties resolved by name.
    """
    names = sorted(loss_table)
    m = len(names)
    if not 0 < n <= m:
        raise ValueError(f"select_representative: need 0 < n <= {m}, got {n}")
    betas = sorted(loss_table[names[0]])
    for nm in names:
        if sorted(loss_table[nm]) != betas:
            raise ValueError(f"select_representative: {nm} misses some betas")
    rank_sum = {nm: 0.0 for nm in names}
    for b in betas:
        losses = {nm: loss_table[nm][b] for nm in names}
        for nm in names:
            rank_sum[nm] += 1 + sum(1 for v in losses.values()
                                    if v < losses[nm])
    pct = {nm: rank_sum[nm] / len(betas) / m for nm in names}
    chosen: list[str] = []
    for k in range(1, n + 1):
        target = k / (n + 1)
        rest = [nm for nm in names if nm not in chosen]
        chosen.append(min(rest, key=lambda nm: (abs(pct[nm] - target), nm)))
    return chosen


# ------------------------------------------------------ update checkpoints


_UPDATE_MAGIC = b"IACU"
_UPDATE_VERSION = 1


@dataclass
class UpdateCheckpoint:
    meta: dict
    delta_bar: dict
    phi: dict
    latents: list


def _pack_arrays(items) -> bytes:
    out = bytearray(struct.pack("<I", len(items)))
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f8")
        enc = name.encode()
        out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<B", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    return bytes(out)


def _unpack_arrays(blob: bytes, off: int):
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    items = []
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
        items.append((name, np.frombuffer(blob, "<f8", n, off).reshape(shape)))
        off += 8 * n
    return items, off


def save_update(path: str, model: CodecModel, result: FinetuneResult,
                which: str = "best"):
    """Persist a finetune outcome: quantized update, phi, or latents."""
    cfg = result.config
    metrics = result.best_metrics  # pixel/frame counts describe the set
    meta = {
        "regime": cfg.regime,
        "beta": cfg.beta,
        "t": cfg.t,
        "sigma": cfg.sigma,
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "lr": cfg.resolved_lr(),
        "quantization_aware": cfg.quantization_aware,
        "model_rate_loss": cfg.model_rate_loss,
        "best_step": result.best_step,
        "model_hash": model.receiver_hash().hex(),
        "groups": {p.name: p.group for p in model.parameters("theta")},
        "pixels": metrics.pixels if metrics else 0,
        "frames": metrics.frames if metrics else 0,
    }
    bar = result.delta_bar(which) or {}
    phi = (result.best_phi if which == "best" else result.final_phi) or {}
    latents = (result.best_latents if which == "best"
               else result.final_latents) or []
    lat_items = []
    for i, (y_hyp, y_img) in enumerate(latents):
        lat_items.append((f"frame{i}.hyper", y_hyp))
        lat_items.append((f"frame{i}.image", y_img))
    meta_b = json.dumps(meta).encode()
    blob = bytearray(struct.pack("<4sHI", _UPDATE_MAGIC, _UPDATE_VERSION,
                                 len(meta_b)))
    blob += meta_b
    blob += _pack_arrays(sorted(bar.items()))
    blob += _pack_arrays(sorted(phi.items()))
    blob += _pack_arrays(lat_items)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_update(path: str) -> UpdateCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:4] != _UPDATE_MAGIC:
        raise ValueError(f"not an update checkpoint: {path}")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise ValueError(f"update checkpoint CRC mismatch: {path}")
    _, version, meta_len = struct.unpack_from("<4sHI", blob, 0)
    if version != _UPDATE_VERSION:
        raise ValueError(f"unsupported update checkpoint version {version}")
    off = 10
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    bar_items, off = _unpack_arrays(blob, off)
    phi_items, off = _unpack_arrays(blob, off)
    lat_items, off = _unpack_arrays(blob, off)
    latents = []
    by_name = dict(lat_items)
    for i in range(len(lat_items) // 2):
        latents.append((by_name[f"frame{i}.hyper"], by_name[f"frame{i}.image"]))
    return UpdateCheckpoint(meta, dict(bar_items), dict(phi_items), latents)
