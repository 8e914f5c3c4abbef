"""Masked convolutional VAE for normalized population grids.

The encoder is a stack of stride-2 convolutions down to a small map followed
by two dense heads (``mu`` and ``logvar``). The decoder mirrors it with
transposed convolutions, appends the activity mask as an extra channel, and
finishes with a 1x1 convolution and a sigmoid. The result is multiplied by the
mask, so inactive cells decode to exactly zero.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import NumericalError, check_finite, load_state, save_checkpoint, seed_everything
from .data import ActivityMask, GridSeries

log = logging.getLogger(__name__)


@dataclass
class VAEConfig:
    height: int = 16
    width: int = 16
    n_channels: int = 1
    latent_dim: int = 8
    widths: list = field(default_factory=lambda: [32, 64])
    head_channels: int = 16
    min_map: int = 4
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    seed: int = 0

    @property
    def n_down(self) -> int:
        n = int(math.log2(max(min(self.height, self.width) // self.min_map, 1)))
        return max(n, 1)

    def widths_for_depth(self) -> list[int]:
        w = list(self.widths)
        while len(w) < self.n_down:
            w.append(w[-1] * 2)
        return w[: self.n_down]

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LatentGaussian:
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass
class VibrancyEmbedding:
    z: torch.Tensor
    source: str  # "sampled" or "mean"


class MaskedVAE(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_down
        if cfg.height % (2**n) or cfg.width % (2**n):
            raise ValueError(f"grid {cfg.height}x{cfg.width} is not divisible by 2^{n}")
        widths = cfg.widths_for_depth()
        self.map_h, self.map_w = cfg.height >> n, cfg.width >> n
        enc, c_in = [], cfg.n_channels
        for w in widths:
            enc += [nn.Conv2d(c_in, w, 4, stride=2, padding=1), nn.ReLU()]
            c_in = w
        self.encoder = nn.Sequential(*enc)
        flat = widths[-1] * self.map_h * self.map_w
        self.fc_mu = nn.Linear(flat, cfg.latent_dim)
        self.fc_logvar = nn.Linear(flat, cfg.latent_dim)

        self.fc_dec = nn.Linear(cfg.latent_dim, flat)
        dec = []
        rev = widths[::-1]
        for i, w in enumerate(rev):
            out = rev[i + 1] if i + 1 < len(rev) else cfg.head_channels
            dec += [nn.ConvTranspose2d(w, out, 4, stride=2, padding=1), nn.ReLU()]
        self.deconv = nn.Sequential(*dec)
        self.head = nn.Conv2d(cfg.head_channels + 1, cfg.n_channels, 1)

    # inputs are channels-last [B, H, W, n_c]
    def _check_grid(self, C: torch.Tensor) -> None:
        if C.shape[1:] != (self.cfg.height, self.cfg.width, self.cfg.n_channels):
            raise ValueError(f"grid shape {tuple(C.shape[1:])} does not match model "
                             f"{(self.cfg.height, self.cfg.width, self.cfg.n_channels)}")

    def encode(self, C: torch.Tensor) -> LatentGaussian:
        self._check_grid(C)
        h = self.encoder(C.permute(0, 3, 1, 2)).flatten(1)
        return LatentGaussian(self.fc_mu(h), self.fc_logvar(h))

    def decode(self, z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.shape != (self.cfg.height, self.cfg.width):
            raise ValueError(f"mask shape {tuple(mask.shape)} != {(self.cfg.height, self.cfg.width)}")
        lead = z.shape[:-1]
        z = z.reshape(-1, self.cfg.latent_dim)
        h = torch.relu(self.fc_dec(z)).view(z.shape[0], -1, self.map_h, self.map_w)
        h = self.deconv(h)
        m = mask.to(h.dtype).expand(h.shape[0], 1, -1, -1)
        out = torch.sigmoid(self.head(torch.cat([h, m], dim=1))) * m
        return out.permute(0, 2, 3, 1).reshape(*lead, self.cfg.height, self.cfg.width, self.cfg.n_channels)

    def forward(self, C: torch.Tensor, mask: torch.Tensor, noise: torch.Tensor | None = None):
        g = self.encode(C)
        z = sample_latent(g, noise).z
        return self.decode(z, mask), g


def sample_latent(g: LatentGaussian, noise: torch.Tensor | None) -> VibrancyEmbedding:
    """Reparameterized draw ``mu + exp(logvar / 2) * noise``; no noise gives ``mu``."""
    if noise is None:
        return VibrancyEmbedding(g.mu, "mean")
    noise = torch.as_tensor(noise, dtype=g.mu.dtype)
    if not torch.any(noise != 0):
        return VibrancyEmbedding(g.mu, "mean")
    return VibrancyEmbedding(g.mu + torch.exp(0.5 * g.logvar) * noise, "sampled")


def masked_mse(C: torch.Tensor, C_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared error averaged over active cells (and batch/channels) only."""
    n_active = mask.sum()
    if n_active <= 0:
        raise ValueError("mask has no active cells")
    m = mask.to(C.dtype)[..., None]
    per_item = C[..., 0, 0, 0].numel() * C.shape[-1] * n_active
    return (((C - C_hat) ** 2) * m).sum() / per_item


def kl_divergence(g: LatentGaussian) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over any leading batch dims."""
    kl = -0.5 * (1.0 + g.logvar - g.mu**2 - torch.exp(g.logvar)).sum(-1)
    return kl.mean()


def vae_loss(C, C_hat, g: LatentGaussian, mask, beta: float = 1.0):
    """Return ``(total, recon, kl)`` with ``total = recon + beta * kl``."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    recon = masked_mse(C, C_hat, mask)
    kl = kl_divergence(g)
    return recon + beta * kl, recon, kl


# -- numpy-facing wrappers ---------------------------------------------------

def _as_batch(C: np.ndarray | torch.Tensor, dtype=torch.float32) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(C) if not isinstance(C, torch.Tensor) else C, dtype=dtype)
    single = t.ndim == 3
    return (t[None] if single else t), single


def encode(C, model: MaskedVAE) -> LatentGaussian:
    """Posterior parameters for one grid ``[H,W,n_c]`` or a batch ``[B,H,W,n_c]``."""
    dtype = next(model.parameters()).dtype
    x, single = _as_batch(C, dtype)
    with torch.no_grad():
        g = model.eval().encode(x)
    if single:
        return LatentGaussian(g.mu[0], g.logvar[0])
    return g


def decode(z, mask: ActivityMask | np.ndarray, model: MaskedVAE) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    m = torch.as_tensor(mask.mask if isinstance(mask, ActivityMask) else np.asarray(mask), dtype=dtype)
    zt = z.z if isinstance(z, VibrancyEmbedding) else torch.as_tensor(np.asarray(z) if not isinstance(z, torch.Tensor) else z, dtype=dtype)
    with torch.no_grad():
        return model.eval().decode(zt.to(dtype), m).numpy()


def embed_series(grid: GridSeries | np.ndarray, model: MaskedVAE, batch_size: int = 256) -> np.ndarray:
    """Posterior-mean embedding of every snapshot, ``[T, d]``."""
    values = grid.values if isinstance(grid, GridSeries) else np.asarray(grid)
    out = []
    for s in range(0, len(values), batch_size):
        out.append(encode(values[s: s + batch_size], model).mu.numpy())
    if not out:
        return np.zeros((0, model.cfg.latent_dim), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


# -- training ----------------------------------------------------------------

@dataclass
class TrainHistory:
    train_total: list = field(default_factory=list)
    val_total: list = field(default_factory=list)
    val_recon: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_total(self) -> float:
        return min(self.val_total) if self.val_total else math.inf


def _evaluate(model: MaskedVAE, data: torch.Tensor, mask: torch.Tensor, beta: float,
              batch_size: int = 512) -> tuple[float, float]:
    model.eval()
    total = recon = 0.0
    n = len(data)
    with torch.no_grad():
        for s in range(0, n, batch_size):
            xb = data[s: s + batch_size]
            g = model.encode(xb)
            out = model.decode(g.mu, mask)
            t, r, _ = vae_loss(xb, out, g, mask, beta)
            total += float(t) * len(xb)
            recon += float(r) * len(xb)
    return total / n, recon / n


def train_vae(grid: GridSeries | np.ndarray, mask: ActivityMask, train_idx, val_idx,
              cfg: VAEConfig) -> tuple[MaskedVAE, TrainHistory]:
    """Fit the VAE on snapshots ``train_idx``; keep the best-validation weights."""
    gen = seed_everything(cfg.seed)
    values = grid.values if isinstance(grid, GridSeries) else np.asarray(grid)
    data = torch.as_tensor(np.asarray(values, dtype=np.float32))
    train = data[torch.as_tensor(np.asarray(train_idx), dtype=torch.long)]
    val = data[torch.as_tensor(np.asarray(val_idx), dtype=torch.long)]
    m = torch.as_tensor(mask.mask, dtype=torch.float32)

    model = MaskedVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    hist = TrainHistory()
    best_state, best, stale = None, math.inf, 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(train), generator=gen)
        running, count = 0.0, 0
        for s in range(0, len(train), cfg.batch_size):
            xb = train[perm[s: s + cfg.batch_size]]
            noise = torch.randn(len(xb), cfg.latent_dim, generator=gen)
            out, g = model(xb, m, noise)
            total, _, _ = vae_loss(xb, out, g, m, cfg.beta)
            check_finite(total, f"VAE loss at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            running += float(total.detach()) * len(xb)
            count += len(xb)
        vt, vr = _evaluate(model, val, m, cfg.beta)
        if not math.isfinite(vt):
            raise NumericalError(f"non-finite VAE validation loss at epoch {epoch}")
        hist.train_total.append(running / count)
        hist.val_total.append(vt)
        hist.val_recon.append(vr)
        log.info("vae epoch %d train %.5f val %.5f recon %.5f", epoch, running / count, vt, vr)
        if vt < best:
            best, stale, hist.best_epoch = vt, 0, epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, hist


def save_vae(directory, model: MaskedVAE, **metadata) -> None:
    save_checkpoint(directory, model, asdict(model.cfg), kind="vae", **metadata)


def load_vae(directory) -> MaskedVAE:
    info, state = load_state(directory)
    model = MaskedVAE(VAEConfig.from_dict(info["config"]))
    model.load_state_dict(state)
    return model.eval()
