"""Sequence-to-sequence LSTM forecasting of vibrancy embeddings.

The forecaster maps ``p`` observed embeddings to ``q`` future ones. Training
never touches the VAE: predictions are decoded by the frozen VAE decoder and
scored against the future grids in pixel space.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import NumericalError, check_finite, load_state, save_checkpoint, seed_everything, state_checksum
from .data import ActivityMask, window_index
from .vae import MaskedVAE, masked_mse

log = logging.getLogger(__name__)


@dataclass
class ForecasterConfig:
    latent_dim: int = 8
    hidden: int = 64
    p: int = 6
    q: int = 6
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    patience: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ForecasterConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class UVESeq2Seq(nn.Module):
    """LSTM encoder-decoder over embedding sequences.

    The decoder starts from the last observed embedding and, at inference,
    feeds back its own previous prediction.
    """

    def __init__(self, cfg: ForecasterConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.LSTM(cfg.latent_dim, cfg.hidden, batch_first=True)
        self.decoder = nn.LSTMCell(cfg.latent_dim, cfg.hidden)
        self.proj = nn.Linear(cfg.hidden, cfg.latent_dim)

    def forward(self, history: torch.Tensor, teacher: torch.Tensor | None = None,
                tf_ratio: float = 0.0, generator: torch.Generator | None = None) -> torch.Tensor:
        if history.shape[-2] != self.cfg.p:
            raise ValueError(f"history must have exactly p={self.cfg.p} steps, got {history.shape[-2]}")
        _, (h, c) = self.encoder(history)
        h, c = h[0], c[0]
        inp = history[:, -1]
        outs = []
        for step in range(self.cfg.q):
            h, c = self.decoder(inp, (h, c))
            z_hat = self.proj(h)
            outs.append(z_hat)
            if teacher is not None and tf_ratio > 0:
                use = torch.rand(len(z_hat), 1, generator=generator) < tf_ratio
                inp = torch.where(use, teacher[:, step], z_hat)
            else:
                inp = z_hat
        return torch.stack(outs, dim=1)


def forecast_embeddings(history, model: UVESeq2Seq) -> np.ndarray:
    """Predict ``[q, d]`` (or ``[B, q, d]``) from ``[p, d]`` (or ``[B, p, d]``)."""
    h = torch.as_tensor(np.asarray(history, dtype=np.float32))
    single = h.ndim == 2
    if single:
        h = h[None]
    if h.shape[1] != model.cfg.p:
        raise ValueError(f"history must have exactly p={model.cfg.p} steps, got {h.shape[1]}")
    with torch.no_grad():
        out = model.eval()(h).numpy()
    return out[0] if single else out


def forecaster_loss(predicted_z: torch.Tensor, target_C: torch.Tensor, mask: torch.Tensor,
                    vae: MaskedVAE) -> torch.Tensor:
    """Active-cell pixel MSE of decoded predictions, averaged over the horizon."""
    C_hat = vae.decode(predicted_z, mask)
    return masked_mse(target_C, C_hat, mask)


def persistence_mse(grid: np.ndarray, anchors, q: int, mask: ActivityMask) -> np.ndarray:
    """Per-horizon pixel MSE of repeating the last observed grid, ``[q]``."""
    _, future = window_index(anchors, 1, q)
    last = grid[np.asarray(anchors)][:, None]
    m = mask.mask[None, None, :, :, None]
    err = ((grid[future] - last) ** 2) * m
    return err.sum(axis=(0, 2, 3, 4)) / (len(future) * mask.n_active * grid.shape[-1])


def horizon_mse(model: UVESeq2Seq, vae: MaskedVAE, embeddings: np.ndarray, grid: np.ndarray,
                anchors, mask: ActivityMask, batch_size: int = 256) -> np.ndarray:
    """Per-horizon pixel MSE of decoded forecasts, ``[q]``."""
    p, q = model.cfg.p, model.cfg.q
    past, future = window_index(anchors, p, q)
    m = torch.as_tensor(mask.mask)
    sums = np.zeros(q)
    with torch.no_grad():
        for s in range(0, len(past), batch_size):
            zp = torch.as_tensor(embeddings[past[s: s + batch_size]])
            C_hat = vae.decode(model.eval()(zp), m).numpy()
            err = ((grid[future[s: s + batch_size]] - C_hat) ** 2) * mask.mask[None, None, :, :, None]
            sums += err.sum(axis=(0, 2, 3, 4))
    return sums / (len(past) * mask.n_active * grid.shape[-1])


@dataclass
class ForecasterHistory:
    train_loss: list = field(default_factory=list)
    val_pixel_mse: list = field(default_factory=list)
    val_embed_mse: list = field(default_factory=list)
    best_epoch: int = -1


def train_forecaster(embeddings: np.ndarray, grid: np.ndarray, mask: ActivityMask, train_anchors,
                     val_anchors, vae: MaskedVAE, cfg: ForecasterConfig) -> tuple[UVESeq2Seq, ForecasterHistory]:
    """Fit the forecaster through the frozen VAE decoder.

    Teacher forcing decays linearly from 1 to 0 over the epochs (scheduled
    sampling). The returned model is the best on validation pixel MSE.
    Raises ``RuntimeError`` if the VAE weights changed.
    """
    gen = seed_everything(cfg.seed)
    vae.eval()
    frozen = [p.requires_grad for p in vae.parameters()]
    vae.requires_grad_(False)
    before = state_checksum(vae)

    E = torch.as_tensor(np.asarray(embeddings, dtype=np.float32))
    Cg = torch.as_tensor(np.asarray(grid, dtype=np.float32))
    m = torch.as_tensor(mask.mask)
    tr_past, tr_fut = (torch.as_tensor(a) for a in window_index(train_anchors, cfg.p, cfg.q))
    va_past, va_fut = (torch.as_tensor(a) for a in window_index(val_anchors, cfg.p, cfg.q))

    model = UVESeq2Seq(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    hist = ForecasterHistory()
    best_state, best, stale = copy.deepcopy(model.state_dict()), math.inf, 0
    try:
        for epoch in range(cfg.epochs):
            ratio = max(0.0, 1.0 - epoch / max(cfg.epochs - 1, 1))
            model.train()
            perm = torch.randperm(len(tr_past), generator=gen)
            running = 0.0
            for s in range(0, len(perm), cfg.batch_size):
                idx = perm[s: s + cfg.batch_size]
                zp, zf, cf = E[tr_past[idx]], E[tr_fut[idx]], Cg[tr_fut[idx]]
                pred = model(zp, teacher=zf, tf_ratio=ratio, generator=gen)
                loss = forecaster_loss(pred, cf, m, vae)
                check_finite(loss, f"forecaster loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += float(loss.detach()) * len(idx)
            model.eval()
            with torch.no_grad():
                pred = model(E[va_past])
                vloss = float(forecaster_loss(pred, Cg[va_fut], m, vae))
                vemb = float(((pred - E[va_fut]) ** 2).mean())
            if not math.isfinite(vloss):
                raise NumericalError(f"non-finite forecaster validation loss at epoch {epoch}")
            hist.train_loss.append(running / len(perm))
            hist.val_pixel_mse.append(vloss)
            hist.val_embed_mse.append(vemb)
            log.info("forecaster epoch %d tf %.2f train %.5f val %.5f emb %.5f",
                     epoch, ratio, running / len(perm), vloss, vemb)
            if vloss < best:
                best, stale, hist.best_epoch = vloss, 0, epoch
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        for p, r in zip(vae.parameters(), frozen):
            p.requires_grad_(r)
    if state_checksum(vae) != before:
        raise RuntimeError("VAE parameters changed during forecaster training")
    model.load_state_dict(best_state)
    return model.eval(), hist


def forecast_cache(model: UVESeq2Seq, embeddings: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """``[T, q, d]`` forecasts anchored at every step; rows before ``p - 1`` are NaN."""
    p, q, d = model.cfg.p, model.cfg.q, model.cfg.latent_dim
    T = len(embeddings)
    out = np.full((T, q, d), np.nan, dtype=np.float32)
    anchors = np.arange(p - 1, T)
    past, _ = window_index(anchors, p, 0)
    for s in range(0, len(anchors), batch_size):
        out[anchors[s: s + batch_size]] = forecast_embeddings(embeddings[past[s: s + batch_size]], model)
    return out


def save_forecaster(directory, model: UVESeq2Seq, **metadata) -> None:
    save_checkpoint(directory, model, asdict(model.cfg), kind="forecaster", **metadata)


def load_forecaster(directory) -> UVESeq2Seq:
    info, state = load_state(directory)
    model = UVESeq2Seq(ForecasterConfig.from_dict(info["config"]))
    model.load_state_dict(state)
    return model.eval()
