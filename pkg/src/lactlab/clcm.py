"""Conditional latent consistency model.

The denoiser sees a noisy clean-target latent (2 channels: global, local)
concatenated with the LACT guidance latents of the N-slice neighbourhood
(2N channels) and predicts the clean latent directly. Training draws two
distinct timesteps per example, diffuses the *same* noise to both, and
minimises

    mse(pred_n, z0) + lambda_cst * mse(pred_n, pred_m)

with gradients through both predictions. Inference is one evaluation at
t = T - 1 from Gaussian noise, with one noise tensor shared by every slice
of a volume.
"""
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, asdict, fields, replace

import numpy as np

from . import io as lio
from . import nn
from . import tensor as T
from .errors import InvalidArgument, InvalidState
from .optim import Adam, TrainingDiverged
from .tensor import Tensor, no_grad
from .tomo import Volume
from .vqvae import neighbour_indices

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# noise schedule
# ----------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray     # index t = 1..T; beta[0] unused (0)
    gamma: np.ndarray    # gamma[0] = 1, gamma[t] = prod_{i<=t} (1 - beta[i])


def cosine_alpha_bar(t, T, s=0.008):
    f = np.cos(((np.asarray(t, dtype=np.float64) / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    f0 = math.cos((s / (1.0 + s)) * math.pi / 2.0) ** 2
    return f / f0


def build_schedule(T=1000, s=0.008, max_beta=0.999):
    if T < 2:
        raise InvalidArgument("T must be at least 2")
    ab = cosine_alpha_bar(np.arange(T + 1), T, s)
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    gamma = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, gamma)


def _check_t(t, sched):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T - 1):
        raise InvalidArgument(f"timesteps must lie in [1, {sched.T - 1}]")
    return t


def forward_diffuse(z0, t, eps, sched):
    """z_t = sqrt(gamma_t) z0 + sqrt(1 - gamma_t) eps, per example."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise InvalidArgument("noise must match the latent shape")
    t = _check_t(t, sched)
    g = sched.gamma[t]
    if np.ndim(g):
        g = g.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(g) * z0 + np.sqrt(1.0 - g) * eps).astype(z0.dtype)


def sample_timestep_pairs(rng, batch, T):
    """Two distinct timesteps per example, uniform over {1, ..., T-1}."""
    pairs = np.stack([rng.choice(T - 1, size=2, replace=False) + 1 for _ in range(batch)])
    return pairs[:, 0], pairs[:, 1]


# ----------------------------------------------------------------------------
# denoiser
# ----------------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    latent_size: int = 16
    n_slices: int = 1
    widths: tuple = (32, 64, 64)
    time_dim: int = 32
    T: int = 1000
    lambda_cst: float = 0.1
    seed: int = 0

    @property
    def in_channels(self):
        return 2 + 2 * self.n_slices

    def to_kv(self):
        d = asdict(self)
        d["widths"] = ",".join(str(w) for w in self.widths)
        return OrderedDict((f"clcm.{k}", str(v)) for k, v in d.items())

    @classmethod
    def from_kv(cls, kv):
        names = {f.name for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            if k.startswith("clcm.") and k[5:] in names:
                name = k[5:]
                if name == "widths":
                    args[name] = tuple(int(w) for w in v.split(","))
                elif name == "lambda_cst":
                    args[name] = float(v)
                else:
                    args[name] = int(v)
        return cls(**args)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class _TimeResBlock(nn.Module):
    def __init__(self, cin, cout, tdim, rng):
        self.norm1 = nn.GroupNorm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, rng)
        self.temb = nn.Linear(tdim, cout, rng)
        self.norm2 = nn.GroupNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng)
        self.conv2.weight.data *= 0.1
        self.skip = nn.Conv2d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(T.relu(self.norm1(x)))
        tb = self.temb(temb)
        h = h + T.reshape(tb, tb.shape + (1, 1))
        h = self.conv2(T.relu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Denoiser(nn.Module):
    """Three-level U-Net with skip connections and additive time embedding."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = nn.make_rng(cfg.seed)
        w1, w2, w3 = cfg.widths
        td = 2 * cfg.time_dim
        self.t1 = nn.Linear(cfg.time_dim, td, rng)
        self.t2 = nn.Linear(td, td, rng)
        self.stem = nn.Conv2d(cfg.in_channels, w1, 3, rng)
        self.down1 = _TimeResBlock(w1, w1, td, rng)
        self.pool1 = nn.Conv2d(w1, w2, 4, rng, stride=2, padding=1)
        self.down2 = _TimeResBlock(w2, w2, td, rng)
        self.pool2 = nn.Conv2d(w2, w3, 4, rng, stride=2, padding=1)
        self.mid = _TimeResBlock(w3, w3, td, rng)
        self.up2 = nn.ConvTranspose2d(w3, w2, rng)
        self.dec2 = _TimeResBlock(2 * w2, w2, td, rng)
        self.up1 = nn.ConvTranspose2d(w2, w1, rng)
        self.dec1 = _TimeResBlock(2 * w1, w1, td, rng)
        self.out_norm = nn.GroupNorm(w1)
        self.out = nn.Conv2d(w1, 2, 3, rng)
        self.out.weight.data *= 0.1
        self.eval_count = 0

    def forward(self, z_t, t, guide):
        if z_t.ndim != 4 or z_t.shape[1] != 2:
            raise InvalidArgument(f"noisy latent must be (B, 2, h, h), got {z_t.shape}")
        if guide.shape[1] != 2 * self.cfg.n_slices or guide.shape[0] != z_t.shape[0] \
                or guide.shape[2:] != z_t.shape[2:]:
            raise InvalidArgument(
                f"guide {guide.shape} does not fit latent {z_t.shape} with N={self.cfg.n_slices}")
        self.eval_count += z_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        temb = Tensor(timestep_embedding(t, self.cfg.time_dim), dtype=z_t.dtype)
        temb = self.t2(T.relu(self.t1(temb)))
        x = self.stem(T.concat_channels([z_t, guide]))
        s1 = self.down1(x, temb)
        s2 = self.down2(self.pool1(s1), temb)
        m = self.mid(self.pool2(s2), temb)
        u2 = self.dec2(T.concat_channels([self.up2(m), s2]), temb)
        u1 = self.dec1(T.concat_channels([self.up1(u2), s1]), temb)
        return self.out(T.relu(self.out_norm(u1)))


def predict_z0(z_t, t, guide, model):
    return model(z_t, t, guide)


def consistency_loss(pred_n, pred_m, z0, lambda_cst):
    """Returns (total, reconstruction, consistency) loss tensors."""
    if not (pred_n.shape == pred_m.shape == z0.shape):
        raise InvalidArgument("consistency_loss: shapes differ")
    rec = T.mse(pred_n, z0)
    cst = T.mse(pred_n, pred_m)
    return rec + cst * lambda_cst, rec, cst


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainBatch:
    z0: np.ndarray       # (B, 2, h, h)
    guide: np.ndarray    # (B, 2N, h, h)
    t_n: np.ndarray
    t_m: np.ndarray
    eps: np.ndarray      # (B, 2, h, h), shared by both timepoints

    def __post_init__(self):
        if np.any(self.t_n == self.t_m):
            raise InvalidArgument("t_n and t_m must differ for every example")


def make_batch(z0, guide, sched, rng):
    t_n, t_m = sample_timestep_pairs(rng, len(z0), sched.T)
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    return TrainBatch(z0, guide, t_n, t_m, eps)


def train_step(batch, model, sched, opt, lambda_cst):
    """One Adam step on the two-timepoint consistency objective."""
    z_n = Tensor(forward_diffuse(batch.z0, batch.t_n, batch.eps, sched))
    z_m = Tensor(forward_diffuse(batch.z0, batch.t_m, batch.eps, sched))
    guide = Tensor(batch.guide)
    pred_n = model(z_n, batch.t_n, guide)
    pred_m = model(z_m, batch.t_m, guide)
    total, rec, cst = consistency_loss(pred_n, pred_m, Tensor(batch.z0), lambda_cst)
    value = total.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"consistency loss became {value} at step {opt.step_count + 1}")
    total.backward()
    opt.step()
    return {"loss": value, "rec": rec.item(), "cst": cst.item()}


def sample_one_step(guide, model, sched, noise):
    """Single denoiser evaluation at t = T - 1 from ``noise``."""
    with no_grad():
        out = model(Tensor(noise), np.full(len(noise), sched.T - 1), Tensor(guide))
    return out.data


# ----------------------------------------------------------------------------
# latent datasets and inference
# ----------------------------------------------------------------------------

class LatentCodec:
    """Frozen VQ-VAE plus the scale that maps its latents to unit variance.

    One scale is shared by both channels. Standardising each channel on its
    own was tried and lost validation MAE: it inflates the small local
    channel, whose LACT encodings sit far from the CT ones.
    """

    def __init__(self, vqvae, scale=1.0, shift=0.0, quantized_guide=True):
        self.vqvae = vqvae
        self.scale = float(scale)
        self.shift = float(shift)
        self.quantized_guide = quantized_guide

    def encode(self, slices, quantized=True):
        z = self.vqvae.encode_slices(np.asarray(slices, dtype=np.float32), quantized=quantized)
        return ((z - self.shift) * self.scale).astype(np.float32)

    def decode(self, z, quantize=True):
        raw = (z / self.scale + self.shift).astype(np.float32)
        if quantize:
            raw = self.vqvae.quantize_array(raw)
        return self.vqvae.decode_latents(raw)


def guide_stack(latents, center, n):
    """(D, 2, h, h) latents -> (2N, h, h) guidance around ``center``."""
    idx = neighbour_indices(center, n, len(latents))
    g = latents[idx]
    return g.reshape((-1,) + g.shape[2:])


def build_pairs(ct_latents, lact_latents, n):
    """Training examples from one volume: middle-slice target + N-slice guide."""
    z0 = ct_latents
    guide = np.stack([guide_stack(lact_latents, c, n) for c in range(len(ct_latents))])
    return z0, guide


def infer_latents(lact_latents, model, sched, rng=None, noise=None, shared_noise=True):
    """One-step prediction for every slice of a volume's guidance latents."""
    D = len(lact_latents)
    n = model.cfg.n_slices
    shape = (2,) + lact_latents.shape[2:]
    if noise is None:
        if shared_noise:
            noise = np.broadcast_to(rng.standard_normal(shape).astype(np.float32), (D,) + shape)
        else:
            noise = rng.standard_normal((D,) + shape).astype(np.float32)
    guides = np.stack([guide_stack(lact_latents, c, n) for c in range(D)])
    return sample_one_step(guides, model, sched, np.ascontiguousarray(noise))


def infer_volume(lact, codec, model, sched, seed=0, shared_noise=True):
    """LACT volume (normalised) -> synthetic CT volume (normalised)."""
    if lact.value_domain != "normalized":
        raise InvalidState("infer_volume expects a normalized LACT volume")
    rng = np.random.default_rng(seed)
    guide_lat = codec.encode(lact.voxels, quantized=codec.quantized_guide)
    z = infer_latents(guide_lat, model, sched, rng, shared_noise=shared_noise)
    sct = np.clip(codec.decode(z), -1.0, 1.0)
    meta = dict(lact.meta)
    meta["source"] = "sct"
    return replace(lact, voxels=sct.astype(np.float32), meta=meta)


@dataclass
class CLCMTrainLog:
    epoch_loss: list
    epoch_rec: list
    epoch_cst: list
    val_mae_hu: list
    best_epoch: int
    epoch_seconds: list


def train_clcm(train_sets, val_sets, codec, cfg, epochs=40, batch_size=8, lr=1e-4, seed=0,
               steps_per_epoch=None):
    """Train a denoiser on latent pairs.

    ``train_sets``: list of (ct_slices, lact_slices) normalised (D, S, S) arrays,
    one entry per (case, angle). ``val_sets`` has the same layout and is scored
    by one-step inference MAE (HU) after every epoch; the best epoch's weights
    are returned.
    """
    sched = build_schedule(cfg.T)
    rng = nn.make_rng(seed)
    model = Denoiser(cfg)
    opt = Adam(model.parameters(), lr=lr)

    z0_all, g_all = [], []
    for ct, lact in train_sets:
        z0, g = build_pairs(codec.encode(ct), codec.encode(lact, codec.quantized_guide), cfg.n_slices)
        z0_all.append(z0)
        g_all.append(g)
    z0_all = np.concatenate(z0_all)
    g_all = np.concatenate(g_all)
    val_lat = [(ct, codec.encode(lact, codec.quantized_guide)) for ct, lact in val_sets]

    n = len(z0_all)
    steps = steps_per_epoch or int(math.ceil(n / batch_size))
    best, best_state = np.inf, None
    rec_log = CLCMTrainLog([], [], [], [], 0, [])
    for ep in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        stats = []
        for k in range(steps):
            sel = order[(k * batch_size) % n:(k * batch_size) % n + batch_size]
            if len(sel) < 2:
                sel = rng.choice(n, size=batch_size, replace=False)
            batch = make_batch(z0_all[sel], g_all[sel], sched, rng)
            stats.append(train_step(batch, model, sched, opt, cfg.lambda_cst))
        val = 0.0
        for i, (ct, glat) in enumerate(val_lat):
            z = infer_latents(glat, model, sched, np.random.default_rng(seed + 1000 + i))
            val += np.abs(np.clip(codec.decode(z), -1, 1) - ct).mean() * 1000.0
        val /= max(len(val_lat), 1)
        rec_log.epoch_loss.append(float(np.mean([s["loss"] for s in stats])))
        rec_log.epoch_rec.append(float(np.mean([s["rec"] for s in stats])))
        rec_log.epoch_cst.append(float(np.mean([s["cst"] for s in stats])))
        rec_log.val_mae_hu.append(float(val))
        rec_log.epoch_seconds.append(time.perf_counter() - t0)
        log.info("clcm[N=%d] epoch %d loss %.5f (rec %.5f, cst %.5f) val_mae %.2f HU (%.1fs)",
                 cfg.n_slices, ep, rec_log.epoch_loss[-1], rec_log.epoch_rec[-1],
                 rec_log.epoch_cst[-1], val, rec_log.epoch_seconds[-1])
        if val < best:
            best = val
            best_state = model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    rec_log.best_epoch = int(np.argmin(rec_log.val_mae_hu)) if rec_log.val_mae_hu else 0
    model.eval_count = 0
    return model, rec_log


def latent_scale_for(codec_vqvae, ct_slices):
    """Shift/scale that standardise the clean latents of a training set."""
    z = codec_vqvae.encode_slices(np.asarray(ct_slices, dtype=np.float32))
    return 1.0 / max(float(z.std()), 1e-6), float(z.mean())


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_clcm(path, model, codec, vqvae_hash, vqvae_cfg_hash, extra=None):
    meta = model.cfg.to_kv()
    meta["kind"] = "clcm"
    meta["latent_scale"] = repr(codec.scale)
    meta["latent_shift"] = repr(codec.shift)
    meta["quantized_guide"] = str(int(codec.quantized_guide))
    meta["vqvae_sha256"] = vqvae_hash
    meta["vqvae_config_hash"] = vqvae_cfg_hash
    for k, v in (extra or {}).items():
        meta[k] = v
    return lio.save_checkpoint(path, model.state_dict(), meta)


def load_clcm(path, vqvae=None, vqvae_hash=None):
    arrays, meta = lio.load_checkpoint(path)
    if meta.get("kind") != "clcm":
        raise InvalidState(f"{path} is not a clcm checkpoint")
    if vqvae is not None and meta.get("vqvae_config_hash") != vqvae.cfg.hash():
        raise InvalidState(f"{path} was trained against vqvae config {meta.get('vqvae_config_hash')}, "
                           f"got {vqvae.cfg.hash()}")
    if vqvae_hash is not None and meta.get("vqvae_sha256") != vqvae_hash:
        raise InvalidState(f"{path} was trained against a different vqvae checkpoint")
    cfg = DenoiserConfig.from_kv(meta)
    model = Denoiser(cfg)
    model.load_state_dict(arrays)
    codec = None
    if vqvae is not None:
        codec = LatentCodec(vqvae, float(meta["latent_scale"]), float(meta["latent_shift"]),
                            meta.get("quantized_guide", "1") == "1")
    return model, codec, meta
