"""Traffic predictors with vibrancy-knowledge injection.

``GRUPredictor`` flattens all sensors into one vector per step and
concatenates the temporal embedding ``f(Z_T || Z_V)`` to every encoder and
decoder input (variants NONE/TE/VE/TVE).

``DCRNNPredictor`` is a diffusion-convolution GRU encoder-decoder. Encoder
inputs are ``f(X_tau) + Z_STV[:, tau]``; the decoder consumes
``Z_STV[:, p + tau]`` where a plain model would see a zero GO token
(variants NONE/STE/SVE/STVE).
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
from .graphs import SensorGraph, transition_matrices
from .stve import GRAPH_VARIANTS, GRU_VARIANTS, STVEFusion, check_variant

log = logging.getLogger(__name__)


# -- diffusion convolution ----------------------------------------------------

def _supports(graph, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(graph, tuple):
        return tuple(torch.as_tensor(np.asarray(g) if not isinstance(g, torch.Tensor) else g, dtype=dtype) for g in graph)
    P_f, P_b = transition_matrices(graph)
    return torch.as_tensor(P_f, dtype=dtype), torch.as_tensor(P_b, dtype=dtype)


def diffusion_conv(H, graph, K: int, weights) -> torch.Tensor:
    """``sum_k P_f^k H W_f[k] + P_b^k H W_b[k]`` for ``k = 0..K``.

    ``H`` is ``[n_s, c_in]`` or ``[B, n_s, c_in]``; ``weights`` is ``(W_f, W_b)``
    each ``[K+1, c_in, c_out]``. ``graph`` is a :class:`SensorGraph`, a dense
    adjacency matrix, or a precomputed ``(P_f, P_b)`` pair.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    W_f, W_b = (torch.as_tensor(w) for w in weights)
    if W_f.shape[0] != K + 1 or W_b.shape[0] != K + 1:
        raise ValueError(f"weights must have K+1={K + 1} slices")
    H = torch.as_tensor(H, dtype=W_f.dtype)
    P_f, P_b = _supports(graph, W_f.dtype)
    out = H @ (W_f[0] + W_b[0])
    xf = xb = H
    for k in range(1, K + 1):
        xf = P_f @ xf
        xb = P_b @ xb
        out = out + xf @ W_f[k] + xb @ W_b[k]
    return out


class DiffusionConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, K: int, supports: tuple[torch.Tensor, torch.Tensor],
                 bias_init: float = 0.0):
        super().__init__()
        self.K = K
        self.register_buffer("P_f", supports[0].float())
        self.register_buffer("P_b", supports[1].float())
        scale = 1.0 / math.sqrt(c_in * (2 * K + 2))
        self.W_f = nn.Parameter(torch.empty(K + 1, c_in, c_out).uniform_(-scale, scale))
        self.W_b = nn.Parameter(torch.empty(K + 1, c_in, c_out).uniform_(-scale, scale))
        self.bias = nn.Parameter(torch.full((c_out,), float(bias_init)))

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        return diffusion_conv(H, (self.P_f.to(H.dtype), self.P_b.to(H.dtype)), self.K,
                              (self.W_f, self.W_b)) + self.bias


class DCGRUCell(nn.Module):
    """GRU cell whose gates are diffusion convolutions over the sensor graph."""

    def __init__(self, input_dim: int, hidden: int, K: int, supports):
        super().__init__()
        self.hidden = hidden
        self.gates = DiffusionConv(input_dim + hidden, 2 * hidden, K, supports, bias_init=1.0)
        self.cand = DiffusionConv(input_dim + hidden, hidden, K, supports)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        ru = torch.sigmoid(self.gates(torch.cat([x, h], dim=-1)))
        r, u = ru.split(self.hidden, dim=-1)
        c = torch.tanh(self.cand(torch.cat([x, r * h], dim=-1)))
        return u * h + (1.0 - u) * c


# -- configuration -------------------------------------------------------------

@dataclass
class PredictorConfig:
    model: str = "dcrnn"  # "gru" or "dcrnn"
    variant: str = "NONE"
    n_sensors: int = 12
    n_features: int = 1
    p: int = 6
    q: int = 6
    d: int = 32  # width of f(X), Z_STV and the DCGRU state
    d_v: int = 8  # vibrancy embedding width
    hidden: int = 64  # GRU baseline state width
    K: int = 2
    autoregressive: bool = False
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    patience: int = 10
    clip_grad: float = 5.0
    loss: str = "mae"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _fusion(cfg: PredictorConfig) -> STVEFusion | None:
    if cfg.variant == "NONE":
        return None
    return STVEFusion(cfg.variant, cfg.n_sensors, cfg.d, cfg.d_v)


def _check_knowledge(variant: str, z_t, z_v) -> None:
    supplied = z_t is not None or z_v is not None
    if variant == "NONE" and supplied:
        raise ValueError("variant NONE takes no embedding inputs")
    if variant != "NONE" and not supplied:
        raise ValueError(f"variant {variant} needs embedding inputs")


class GRUPredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        check_variant(cfg.variant)
        if cfg.variant not in GRU_VARIANTS:
            raise ValueError(f"GRU predictor supports {GRU_VARIANTS}, not {cfg.variant}")
        self.cfg = cfg
        self.fusion = _fusion(cfg)
        flat = cfg.n_sensors * cfg.n_features
        extra = cfg.d if self.fusion is not None else 0
        self.encoder = nn.GRU(flat + extra, cfg.hidden, batch_first=True)
        self.decoder = nn.GRUCell(flat + extra, cfg.hidden)
        self.out = nn.Linear(cfg.hidden, flat)

    def knowledge(self, z_t, z_v) -> torch.Tensor | None:
        _check_knowledge(self.cfg.variant, z_t, z_v)
        if self.fusion is None:
            return None
        return self.fusion.temporal(z_t, z_v)  # [B, p+q, d]

    def forward(self, x_past: torch.Tensor, z_t=None, z_v=None) -> torch.Tensor:
        cfg = self.cfg
        B = x_past.shape[0]
        z_tv = self.knowledge(z_t, z_v)
        x = x_past.reshape(B, cfg.p, -1)
        enc_in = x if z_tv is None else torch.cat([x, z_tv[:, : cfg.p]], dim=-1)
        _, h = self.encoder(enc_in)
        h = h[0]
        prev = x[:, -1]
        outs = []
        for step in range(cfg.q):
            inp = prev if z_tv is None else torch.cat([prev, z_tv[:, cfg.p + step]], dim=-1)
            h = self.decoder(inp, h)
            prev = self.out(h)
            outs.append(prev)
        return torch.stack(outs, dim=1).reshape(B, cfg.q, cfg.n_sensors, cfg.n_features)


def adapter_inject(encoder_inputs: torch.Tensor, decoder_inputs: torch.Tensor | None,
                   z_stv: torch.Tensor | None, p: int | None = None):
    """Apply STVE injection rules to an external model's per-step inputs.

    ``encoder_inputs`` is ``[B, p, n_s, d]`` (already projected to width d),
    ``decoder_inputs`` ``[B, q, n_s, d]`` or ``None`` (GO tokens), ``z_stv``
    ``[B, n_s, p+q, d]``. Encoder inputs get ``Z_STV[:, :, :p]`` added;
    decoder inputs are replaced by ``Z_STV[:, :, p:]``. With ``z_stv=None`` the
    inputs pass through and missing decoder inputs become zero GO tokens.
    """
    B, p_in, n_s, d = encoder_inputs.shape
    p = p_in if p is None else p
    if z_stv is None:
        if decoder_inputs is None:
            raise ValueError("need decoder inputs or their count when z_stv is absent")
        return encoder_inputs, decoder_inputs
    if z_stv.shape[-1] != d or z_stv.shape[1] != n_s:
        raise ValueError(f"z_stv shape {tuple(z_stv.shape)} incompatible with inputs {tuple(encoder_inputs.shape)}")
    enc = encoder_inputs + z_stv[:, :, :p].transpose(1, 2)
    dec = z_stv[:, :, p:].transpose(1, 2)
    if decoder_inputs is not None and decoder_inputs.shape != dec.shape:
        raise ValueError(f"decoder inputs {tuple(decoder_inputs.shape)} vs z_stv slice {tuple(dec.shape)}")
    return enc, dec


class DCRNNPredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig, graph: SensorGraph | np.ndarray | tuple):
        super().__init__()
        check_variant(cfg.variant)
        if cfg.variant not in GRAPH_VARIANTS:
            raise ValueError(f"DCRNN predictor supports {GRAPH_VARIANTS}, not {cfg.variant}")
        n = graph.n_s if isinstance(graph, SensorGraph) else (graph[0].shape[0] if isinstance(graph, tuple) else np.asarray(graph).shape[0])
        if n != cfg.n_sensors:
            raise ValueError(f"graph has {n} nodes but config has {cfg.n_sensors} sensors")
        self.cfg = cfg
        supports = _supports(graph, torch.float32)
        self.fusion = _fusion(cfg)
        self.f_in = nn.Sequential(nn.Linear(cfg.n_features, cfg.d), nn.ReLU(), nn.Linear(cfg.d, cfg.d))
        self.encoder = DCGRUCell(cfg.d, cfg.d, cfg.K, supports)
        self.decoder = DCGRUCell(cfg.d, cfg.d, cfg.K, supports)
        self.out = nn.Linear(cfg.d, cfg.n_features)

    def knowledge(self, z_t, z_v) -> torch.Tensor | None:
        _check_knowledge(self.cfg.variant, z_t, z_v)
        if self.fusion is None:
            return None
        return self.fusion(z_t, z_v)  # [B, n_s, p+q, d]

    def step_inputs(self, x_past: torch.Tensor, z_stv: torch.Tensor | None):
        """Per-step encoder and decoder inputs, ``([B,p,n_s,d], [B,q,n_s,d])``."""
        cfg = self.cfg
        B = x_past.shape[0]
        enc = []
        for tau in range(cfg.p):
            fx = self.f_in(x_past[:, tau])
            enc.append(fx if z_stv is None else fx + z_stv[:, :, tau])
        dec = []
        for tau in range(cfg.q):
            if z_stv is None:
                dec.append(x_past.new_zeros(B, cfg.n_sensors, cfg.d))
            else:
                dec.append(z_stv[:, :, cfg.p + tau])
        return torch.stack(enc, dim=1), torch.stack(dec, dim=1)

    def forward(self, x_past: torch.Tensor, z_t=None, z_v=None) -> torch.Tensor:
        cfg = self.cfg
        if x_past.shape[2] != cfg.n_sensors:
            raise ValueError(f"input has {x_past.shape[2]} sensors, graph has {cfg.n_sensors}")
        z_stv = self.knowledge(z_t, z_v)
        enc, dec = self.step_inputs(x_past, z_stv)
        h = x_past.new_zeros(x_past.shape[0], cfg.n_sensors, cfg.d)
        for tau in range(cfg.p):
            h = self.encoder(enc[:, tau], h)
        outs = []
        prev = None
        for tau in range(cfg.q):
            inp = dec[:, tau]
            if cfg.autoregressive and prev is not None:
                inp = inp + self.f_in(prev)
            h = self.decoder(inp, h)
            prev = self.out(h)
            outs.append(prev)
        return torch.stack(outs, dim=1)


def build_predictor(cfg: PredictorConfig, graph=None) -> nn.Module:
    if cfg.model == "gru":
        return GRUPredictor(cfg)
    if cfg.model == "dcrnn":
        if graph is None:
            raise ValueError("DCRNN predictor needs a sensor graph")
        return DCRNNPredictor(cfg, graph)
    raise ValueError(f"unknown model {cfg.model!r}")


# -- datasets, training and evaluation ------------------------------------------

@dataclass
class PredictorData:
    """Everything a predictor needs, aligned on one hourly timeline.

    ``forecasts[t]`` holds the forecaster's ``q`` embeddings anchored at ``t``;
    ``forecast_source`` records where they came from.
    """

    traffic: np.ndarray  # [T, n_s, n_f] original units
    time_rows: np.ndarray  # [T + q, 31] calendar one-hot, extends q past the end
    embeddings: np.ndarray | None  # [T, d_v]
    forecasts: np.ndarray | None  # [T, q, d_v]
    mean: np.ndarray  # [n_f]
    std: np.ndarray  # [n_f]
    forecast_source: str = "forecaster"

    def normalized(self) -> np.ndarray:
        return ((self.traffic - self.mean) / self.std).astype(np.float32)


def traffic_scaler(traffic: np.ndarray, rows) -> tuple[np.ndarray, np.ndarray]:
    """Global per-channel mean/std over the timeline ``rows``."""
    block = np.asarray(traffic, dtype=np.float64)[np.asarray(rows)]
    mean = block.reshape(-1, block.shape[-1]).mean(0)
    std = block.reshape(-1, block.shape[-1]).std(0)
    return mean, np.where(std > 0, std, 1.0)


def gather_batch(data: PredictorData, xnorm: np.ndarray, anchors, cfg: PredictorConfig):
    """Tensors ``(x_past, x_future, z_t, z_v)`` for windows anchored at ``anchors``."""
    a = np.asarray(anchors, dtype=np.int64)
    past = a[:, None] + np.arange(-cfg.p + 1, 1)
    fut = a[:, None] + np.arange(1, cfg.q + 1)
    x_past = torch.as_tensor(xnorm[past])
    x_fut = torch.as_tensor(xnorm[fut])
    variant = cfg.variant
    z_t = z_v = None
    if variant in ("TE", "TVE", "STE", "STVE"):
        z_t = torch.as_tensor(data.time_rows[np.concatenate([past, fut], axis=1)])
    if variant in ("VE", "TVE", "SVE", "STVE"):
        if data.embeddings is None or data.forecasts is None:
            raise ValueError(f"variant {variant} needs embedding and forecast caches")
        obs = data.embeddings[past]
        fc = data.forecasts[a]
        if not np.isfinite(fc).all():
            raise ValueError("forecast cache has no entry for some anchors")
        z_v = torch.as_tensor(np.concatenate([obs, fc], axis=1).astype(np.float32))
    return x_past, x_fut, z_t, z_v


def predict(model: nn.Module, data: PredictorData, anchors, batch_size: int = 256) -> np.ndarray:
    """Denormalized predictions ``[N, q, n_s, n_f]`` for the given anchors."""
    cfg = model.cfg
    xnorm = data.normalized()
    out = []
    model.eval()
    with torch.no_grad():
        for s in range(0, len(anchors), batch_size):
            xp, _, zt, zv = gather_batch(data, xnorm, anchors[s: s + batch_size], cfg)
            out.append(model(xp, zt, zv).numpy())
    pred = np.concatenate(out).astype(np.float64)
    return pred * data.std + data.mean


def truth(data: PredictorData, anchors, q: int) -> np.ndarray:
    fut = np.asarray(anchors)[:, None] + np.arange(1, q + 1)
    return np.asarray(data.traffic, dtype=np.float64)[fut]


def evaluate_mae(preds: np.ndarray, target: np.ndarray, horizons=(1, 2, 3, 6)) -> dict[int, float]:
    """Per-horizon MAE over all windows, sensors and channels.

    Arrays are ``[N, q, n_s, n_f]`` in original units; horizon ``h`` is column ``h - 1``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if preds.shape != target.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {target.shape}")
    q = preds.shape[1]
    result = {}
    for h in horizons:
        if not 1 <= h <= q:
            raise ValueError(f"horizon {h} outside [1, {q}]")
        result[int(h)] = float(np.mean(np.abs(preds[:, h - 1] - target[:, h - 1])))
    return result


@dataclass
class PredictorHistory:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_val_mae: list = field(default_factory=list)
    best_epoch: int = -1


def train_predictor(data: PredictorData, graph, cfg: PredictorConfig, train_anchors,
                    val_anchors) -> tuple[nn.Module, PredictorHistory]:
    """Jointly fit predictor and fusion networks; keep the best validation MAE."""
    gen = seed_everything(cfg.seed)
    model = build_predictor(cfg, graph)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    xnorm = data.normalized()
    train_anchors = np.asarray(train_anchors)
    val_anchors = np.asarray(val_anchors)
    y_val = truth(data, val_anchors, cfg.q)
    loss_fn = nn.L1Loss() if cfg.loss == "mae" else nn.MSELoss()
    hist = PredictorHistory()
    best_state, best, stale = copy.deepcopy(model.state_dict()), math.inf, 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(train_anchors), generator=gen).numpy()
        running = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = train_anchors[perm[s: s + cfg.batch_size]]
            if len(idx) < 2:  # batch norm needs more than one row
                continue
            xp, xf, zt, zv = gather_batch(data, xnorm, idx, cfg)
            loss = loss_fn(model(xp, zt, zv), xf)
            check_finite(loss, f"{cfg.model}-{cfg.variant} loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if cfg.clip_grad:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad)
            opt.step()
            running += float(loss.detach()) * len(idx)
        vmae = float(np.mean(np.abs(predict(model, data, val_anchors) - y_val)))
        if not math.isfinite(vmae):
            raise NumericalError(f"non-finite validation MAE at epoch {epoch}")
        hist.train_loss.append(running / len(perm))
        hist.val_mae.append(vmae)
        if vmae < best:
            best, stale, hist.best_epoch = vmae, 0, epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        hist.best_val_mae.append(best)
        log.info("%s-%s epoch %d train %.4f val MAE %.4f", cfg.model, cfg.variant, epoch,
                 running / len(perm), vmae)
        if stale >= cfg.patience:
            break
    model.load_state_dict(best_state)
    return model.eval(), hist


def save_predictor(directory, model: nn.Module, **metadata) -> None:
    save_checkpoint(directory, model, asdict(model.cfg), kind="predictor", **metadata)


def load_predictor(directory, graph=None) -> nn.Module:
    info, state = load_state(directory)
    cfg = PredictorConfig.from_dict(info["config"])
    model = build_predictor(cfg, graph)
    model.load_state_dict(state)
    return model.eval()
