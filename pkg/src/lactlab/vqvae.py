"""Multi-volume VQ-VAE: global and local encoder paths with a fused decoder.

Per slice, the global path sees the full S x S image and downsamples twice;
the local path sees the central S/2 x S/2 crop and downsamples once, so both
land on an h x h grid with h = S/4. Each path emits one latent channel,
quantised against its own scalar codebook. The decoder upsamples the global
channel back to S, decodes the local channel to S/2 features, embeds them in
the centre of a zero canvas, concatenates and fuses to one tanh-bounded
image.

``single_view`` mode is the conventional ablation arm: only the global path,
emitting both latent channels, and a single decoder branch.
"""
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import io as lio
from . import nn
from . import tensor as T
from .errors import InvalidArgument, InvalidState
from .optim import Adam, TrainingDiverged
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LATENT_CHANNELS = 2  # channel 0 = global, channel 1 = local


# ----------------------------------------------------------------------------
# config and data types
# ----------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    mode: str = "multi_view"
    size: int = 64
    n_slices: int = 1
    width_full: int = 16
    width_low: int = 32
    n_res_blocks: int = 2
    codebook_size: int = 128
    commitment: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("single_view", "multi_view"):
            raise InvalidArgument(f"unknown encoder mode {self.mode!r}")
        if self.size % 4:
            raise InvalidArgument("image size must be divisible by 4")
        if self.n_slices % 2 == 0:
            raise InvalidArgument("slice count N must be odd")

    @property
    def latent_size(self):
        return self.size // 4

    def to_kv(self):
        return OrderedDict((f"vq.{k}", str(v)) for k, v in asdict(self).items())

    @classmethod
    def from_kv(cls, kv):
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            if k.startswith("vq."):
                name = k[3:]
                if name in types:
                    args[name] = v if types[name] == "str" or types[name] is str else _num(v)
        return cls(**args)

    def hash(self):
        return lio.config_hash(self.to_kv())


def _num(v):
    try:
        return int(v)
    except ValueError:
        return float(v)


@dataclass
class SubVolume:
    x_G: np.ndarray          # (N, S, S)
    x_L: np.ndarray          # (N, S/2, S/2)
    center_index: int


@dataclass
class LatentVolume:
    z: np.ndarray            # (N, 2, h, h)

    @property
    def z_G(self):
        return self.z[:, 0]

    @property
    def z_L(self):
        return self.z[:, 1]


def neighbour_indices(center, n, depth):
    """Indices of an n-slice window centred on ``center``, edges replicated."""
    half = (n - 1) // 2
    return np.clip(np.arange(center - half, center + half + 1), 0, depth - 1)


def extract_subvolume(v, center, n):
    if n % 2 == 0:
        raise InvalidArgument("N must be odd")
    vox = v.voxels if hasattr(v, "voxels") else np.asarray(v)
    idx = neighbour_indices(center, n, vox.shape[0])
    x_g = vox[idx]
    S = x_g.shape[-1]
    q = S // 4
    return SubVolume(x_g.copy(), x_g[:, q:q + S // 2, q:q + S // 2].copy(), int(center))


# ----------------------------------------------------------------------------
# quantisation
# ----------------------------------------------------------------------------

class Codebook(nn.Module):
    def __init__(self, n_codes, dim, rng):
        self.entries = Tensor(rng.uniform(-1.0, 1.0, (n_codes, dim)), requires_grad=True)
        self.usage = np.zeros(n_codes, dtype=np.int64)
        self.initialised = False

    @property
    def n_codes(self):
        return self.entries.shape[0]

    def nearest(self, flat):
        """Index of the closest entry (squared Euclidean) for each row of ``flat``."""
        if self.n_codes == 0:
            raise InvalidState("empty codebook")
        e = self.entries.data
        d = ((flat[:, None, :] - e[None, :, :]) ** 2).sum(axis=2)
        return d.argmin(axis=1)

    def init_from(self, flat, rng):
        pick = rng.choice(len(flat), size=self.n_codes, replace=len(flat) < self.n_codes)
        self.entries.data[:] = flat[pick] + rng.normal(0.0, 1e-3, (self.n_codes, flat.shape[1]))
        self.initialised = True

    def restart_dead(self, flat, rng):
        dead = np.flatnonzero(self.usage == 0)
        if len(dead) and len(flat):
            pick = rng.choice(len(flat), size=len(dead), replace=len(flat) < len(dead))
            self.entries.data[dead] = flat[pick]
        self.usage[:] = 0
        return len(dead)


def quantize(z, book):
    """Nearest-codebook quantisation of z (B, E, h, w) with straight-through grads.

    Returns (zq, indices, codebook_loss, commitment_loss). ``zq`` carries the
    codebook values forward and hands its gradient straight to ``z``.
    """
    B, E, h, w = z.shape
    if book.entries.shape[1] != E:
        raise InvalidArgument(f"codebook width {book.entries.shape[1]} != latent channels {E}")
    flat = z.data.transpose(0, 2, 3, 1).reshape(-1, E)
    idx = book.nearest(flat)
    np.add.at(book.usage, idx, 1)
    e = T.take_rows(book.entries, idx)                        # (B*h*w, E)
    e_img = T.transpose(T.reshape(e, (B, h, w, E)), (0, 3, 1, 2))
    zq = T.straight_through(z, e_img.data)
    codebook_loss = T.mse(e_img, z.detach())
    commitment_loss = T.mse(z, e_img.detach())
    return zq, idx.reshape(B, h, w), codebook_loss, commitment_loss


# ----------------------------------------------------------------------------
# network
# ----------------------------------------------------------------------------

class _EncoderPath(nn.Module):
    def __init__(self, n_down, out_ch, cfg, rng):
        self.stem = nn.Conv2d(1, cfg.width_full, 3, rng)
        self.down = []
        cin = cfg.width_full
        for _ in range(n_down):
            self.down.append(nn.Conv2d(cin, cfg.width_low, 4, rng, stride=2, padding=1))
            cin = cfg.width_low
        self.res = nn.ResidualStack(cfg.width_low, cfg.n_res_blocks, rng)
        self.head = nn.Conv2d(cfg.width_low, out_ch, 1, rng)

    def forward(self, x):
        h = T.relu(self.stem(x))
        for i, d in enumerate(self.down):
            h = d(h)
            if i < len(self.down) - 1:
                h = T.relu(h)
        return self.head(self.res(h))


class _DecoderPath(nn.Module):
    def __init__(self, in_ch, n_up, cfg, rng):
        self.stem = nn.Conv2d(in_ch, cfg.width_low, 3, rng)
        self.res = nn.ResidualStack(cfg.width_low, cfg.n_res_blocks, rng)
        self.up = []
        for i in range(n_up):
            cout = cfg.width_full if i == n_up - 1 else cfg.width_low
            self.up.append(nn.ConvTranspose2d(cfg.width_low, cout, rng))

    def forward(self, z):
        h = self.res(self.stem(z))
        for u in self.up:
            h = T.relu(u(h))
        return h


class MultiVolumeVQVAE(nn.Module):
    def __init__(self, cfg):
        self.cfg = cfg
        rng = nn.make_rng(cfg.seed)
        S = cfg.size
        if cfg.mode == "multi_view":
            self.enc_global = _EncoderPath(2, 1, cfg, rng)
            self.enc_local = _EncoderPath(1, 1, cfg, rng)
            self.dec_global = _DecoderPath(1, 2, cfg, rng)
            self.dec_local = _DecoderPath(1, 1, cfg, rng)
            fuse_in = 2 * cfg.width_full
        else:
            self.enc_global = _EncoderPath(2, LATENT_CHANNELS, cfg, rng)
            self.dec_global = _DecoderPath(LATENT_CHANNELS, 2, cfg, rng)
            fuse_in = cfg.width_full
        self.fuse1 = nn.Conv2d(fuse_in, cfg.width_full, 3, rng)
        self.fuse2 = nn.Conv2d(cfg.width_full, 1, 3, rng)
        # one scalar codebook per latent channel (global / local)
        self.books = [Codebook(cfg.codebook_size, 1, rng) for _ in range(LATENT_CHANNELS)]
        self._S = S

    # -- encoder --------------------------------------------------------------

    def encode(self, x_g, x_l=None):
        """x_g (B, 1, S, S) -> pre-quantisation latent (B, 2, h, h)."""
        if x_g.ndim != 4 or x_g.shape[1] != 1 or x_g.shape[2:] != (self._S, self._S):
            raise InvalidArgument(f"encoder expects (B, 1, {self._S}, {self._S}), got {x_g.shape}")
        if self.cfg.mode == "single_view":
            return self.enc_global(x_g)
        if x_l is None:
            x_l = T.center_crop(x_g, self._S // 2)
        return T.concat_channels([self.enc_global(x_g), self.enc_local(x_l)])

    def encode_subvolume(self, sub):
        """Encode every slice of a sub-volume -> LatentVolume (N, 2, h, h), no grad."""
        with no_grad():
            xg = Tensor(sub.x_G[:, None])
            xl = Tensor(sub.x_L[:, None])
            z = self.encode(xg, xl)
        return LatentVolume(z.data.copy())

    # -- quantiser ------------------------------------------------------------

    def quantize(self, z):
        parts, idx, cb, cm = [], [], 0.0, 0.0
        for c, book in enumerate(self.books):
            zq, i, lcb, lcm = quantize(T.channel_slice(z, c, c + 1), book)
            parts.append(zq)
            idx.append(i)
            cb = lcb if c == 0 else cb + lcb
            cm = lcm if c == 0 else cm + lcm
        return T.concat_channels(parts), np.stack(idx, axis=1), cb, cm

    def quantize_array(self, z):
        """Quantise a plain (B, 2, h, h) array without recording usage."""
        out = np.empty_like(z)
        for c, book in enumerate(self.books):
            flat = z[:, c].reshape(-1, 1)
            out[:, c] = book.entries.data[book.nearest(flat), 0].reshape(z[:, c].shape)
        return out

    # -- decoder --------------------------------------------------------------

    def decode(self, zq):
        if zq.ndim != 4 or zq.shape[1] != LATENT_CHANNELS:
            raise InvalidArgument(f"decoder expects (B, 2, h, h), got {zq.shape}")
        h = self.cfg.latent_size
        if zq.shape[2:] != (h, h):
            raise InvalidArgument(f"latent spatial size {zq.shape[2:]} != {(h, h)}")
        if self.cfg.mode == "single_view":
            feat = self.dec_global(zq)
        else:
            g = self.dec_global(T.channel_slice(zq, 0, 1))
            loc = self.dec_local(T.channel_slice(zq, 1, 2))
            feat = T.concat_channels([g, T.zero_pad_embed(loc, self._S)])
        return T.tanh(self.fuse2(T.relu(self.fuse1(feat))))

    def forward(self, x):
        z = self.encode(x)
        zq, idx, cb, cm = self.quantize(z)
        return self.decode(zq), z, zq, cb, cm

    def codebook_parameters(self):
        return [b.entries for b in self.books]

    # -- array helpers (inference, no graph) -----------------------------------

    def encode_slices(self, slices, batch=32, quantized=True):
        """(D, S, S) normalised slices -> (D, 2, h, h) latents."""
        out = []
        with no_grad():
            for i in range(0, len(slices), batch):
                z = self.encode(Tensor(slices[i:i + batch, None])).data
                out.append(self.quantize_array(z) if quantized else z)
        return np.concatenate(out, axis=0)

    def decode_latents(self, z, batch=32):
        out = []
        with no_grad():
            for i in range(0, len(z), batch):
                out.append(self.decode(Tensor(z[i:i + batch])).data[:, 0])
        return np.concatenate(out, axis=0)

    def reconstruct(self, slices, batch=32):
        return self.decode_latents(self.encode_slices(slices, batch), batch)


# ----------------------------------------------------------------------------
# training and checkpoints
# ----------------------------------------------------------------------------

@dataclass
class TrainLog:
    epoch_loss: list
    val_mae_hu: list
    best_epoch: int
    epoch_seconds: list


def vqvae_loss(model, x):
    recon, z, zq, cb, cm = model(x)
    rec = T.mse(recon, x)
    total = rec + cb + cm * model.cfg.commitment
    return total, rec


def train_vqvae(train_slices, val_slices, cfg, epochs=40, batch_size=8, lr=1e-3, seed=0):
    """Fit a VQ-VAE on normalised slices; keeps the best-validation-MAE weights.

    ``train_slices`` and ``val_slices`` are (M, S, S) arrays in [-1, 1].
    Returns (model, TrainLog).
    """
    model = MultiVolumeVQVAE(cfg)
    rng = nn.make_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    n = len(train_slices)
    if n == 0:
        raise InvalidArgument("empty training set")

    with no_grad():
        first = train_slices[rng.choice(n, size=min(n, 64), replace=False)]
        z0 = model.encode(Tensor(first[:, None])).data
    for c, book in enumerate(model.books):
        book.init_from(z0[:, c].reshape(-1, 1), rng)

    best, best_state, best_books = np.inf, None, None
    losses, vals, secs = [], [], []
    for ep in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        ep_loss = []
        for i in range(0, n, batch_size):
            xb = Tensor(train_slices[order[i:i + batch_size], None])
            total, rec = vqvae_loss(model, xb)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"vqvae loss became {total.item()} at epoch {ep}")
            total.backward()
            opt.step()
            ep_loss.append(total.item())
        with no_grad():
            zlast = model.encode(xb).data
        for c, book in enumerate(model.books):
            book.restart_dead(zlast[:, c].reshape(-1, 1), rng)
        val = float(np.abs(model.reconstruct(val_slices) - val_slices).mean() * 1000.0)
        losses.append(float(np.mean(ep_loss)))
        vals.append(val)
        secs.append(time.perf_counter() - t0)
        log.info("vqvae[%s] epoch %d loss %.5f val_mae %.2f HU (%.1fs)",
                 cfg.mode, ep, losses[-1], val, secs[-1])
        if val < best:
            best = val
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return model, TrainLog(losses, vals, int(np.argmin(vals)), secs)


def save_vqvae(path, model, extra=None):
    meta = model.cfg.to_kv()
    meta["kind"] = "vqvae"
    meta["config_hash"] = model.cfg.hash()
    for k, v in (extra or {}).items():
        meta[k] = v
    return lio.save_checkpoint(path, model.state_dict(), meta)


def load_vqvae(path):
    arrays, meta = lio.load_checkpoint(path)
    if meta.get("kind") != "vqvae":
        raise InvalidState(f"{path} is not a vqvae checkpoint")
    cfg = EncoderConfig.from_kv(meta)
    model = MultiVolumeVQVAE(cfg)
    model.load_state_dict(arrays)
    for b in model.books:
        b.initialised = True
    return model, meta
