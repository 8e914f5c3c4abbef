"""Spatio-temporal vibrancy embedding.

``Z_STV = f1(Z_S) + f2(Z_T || Z_V)`` where ``Z_S`` is the sensor identity,
``Z_T`` the day-of-week/hour-of-day one-hot rows and ``Z_V`` the observed plus
forecast vibrancy embeddings. Ablations drop pieces of the sum:

=======  ============  =====================
variant  f1(Z_S)       f2 input
=======  ============  =====================
STVE     yes           Z_T || Z_V  (31 + d)
STE      yes           Z_T         (31)
SVE      yes           Z_V         (d)
TVE      no            Z_T || Z_V
TE       no            Z_T
VE       no            Z_V
=======  ============  =====================
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

N_DOW, N_HOD = 7, 24
TIME_WIDTH = N_DOW + N_HOD

VARIANTS = ("NONE", "TE", "VE", "TVE", "STE", "SVE", "STVE")
SPATIAL = {"STE", "SVE", "STVE"}
USES_TIME = {"TE", "TVE", "STE", "STVE"}
USES_VIBRANCY = {"VE", "TVE", "SVE", "STVE"}
GRU_VARIANTS = ("NONE", "TE", "VE", "TVE")
GRAPH_VARIANTS = ("NONE", "STE", "SVE", "STVE")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def time_onehot(timestamps) -> np.ndarray:
    """``[N, 31]`` one-hot rows: day of week (Monday=0) then hour of day."""
    ts = np.asarray(timestamps).astype("datetime64[h]")
    hours = ts.view("int64")
    dow = (hours // 24 + 3) % 7  # 1970-01-01 was a Thursday
    hod = hours % 24
    out = np.zeros((len(ts), TIME_WIDTH), dtype=np.float32)
    out[np.arange(len(ts)), dow] = 1.0
    out[np.arange(len(ts)), N_DOW + hod] = 1.0
    return out


def encode_time(anchor, p: int, q: int) -> np.ndarray:
    """Rows for the instants ``anchor - p + 1 .. anchor + q``."""
    a = np.datetime64(anchor, "h")
    return time_onehot(a + np.arange(-p + 1, q + 1) * np.timedelta64(1, "h"))


def sensor_encoding(n_s: int) -> np.ndarray:
    return np.eye(n_s, dtype=np.float32)


@dataclass
class VibrancyBlock:
    values: np.ndarray  # [p + q, d]
    p: int
    source: str  # where the forecast rows came from: "forecaster" or "ground_truth"


def assemble_vibrancy(observed, forecast, source: str = "forecaster") -> VibrancyBlock:
    observed = np.asarray(observed)
    forecast = np.asarray(forecast)
    if observed.ndim != 2 or forecast.ndim != 2 or observed.shape[1] != forecast.shape[1]:
        raise ValueError(f"embedding widths differ: {observed.shape} vs {forecast.shape}")
    if source not in ("forecaster", "ground_truth"):
        raise ValueError(f"unknown forecast source {source!r}")
    return VibrancyBlock(np.concatenate([observed, forecast], axis=0), len(observed), source)


class RowwiseLinear(nn.Linear):
    """Linear layer whose result for a row does not depend on the other rows.

    A plain matmul may change its accumulation order with the batch size; the
    explicit multiply-and-reduce keeps every row bitwise identical whether it is
    evaluated alone or inside a batch.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x.unsqueeze(-1) * self.weight.t()).sum(-2) + self.bias


def _mlp(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(RowwiseLinear(d_in, d_out), nn.BatchNorm1d(d_out), nn.ReLU(),
                         RowwiseLinear(d_out, d_out), nn.BatchNorm1d(d_out))


def f2_width(variant: str, d_v: int) -> int:
    check_variant(variant)
    if variant == "NONE":
        return 0
    return (TIME_WIDTH if variant in USES_TIME else 0) + (d_v if variant in USES_VIBRANCY else 0)


class STVEFusion(nn.Module):
    """The ``f1`` / ``f2`` fusion networks for one variant."""

    def __init__(self, variant: str, n_s: int, d: int, d_v: int):
        super().__init__()
        check_variant(variant)
        if variant == "NONE":
            raise ValueError("variant NONE has no fusion network")
        self.variant, self.n_s, self.d, self.d_v = variant, n_s, d, d_v
        self.f1 = _mlp(n_s, d) if variant in SPATIAL else None
        self.f2 = _mlp(f2_width(variant, d_v), d)

    def f2_input(self, z_t: torch.Tensor | None, z_v: torch.Tensor | None) -> torch.Tensor:
        parts = []
        if self.variant in USES_TIME:
            if z_t is None:
                raise ValueError(f"variant {self.variant} needs time encodings")
            parts.append(z_t)
        if self.variant in USES_VIBRANCY:
            if z_v is None:
                raise ValueError(f"variant {self.variant} needs vibrancy embeddings")
            if z_v.shape[-1] != self.d_v:
                raise ValueError(f"vibrancy width {z_v.shape[-1]} != {self.d_v}")
            parts.append(z_v)
        return torch.cat(parts, dim=-1)

    def temporal(self, z_t, z_v) -> torch.Tensor:
        """``f2(...)`` for ``[B, L, .]`` inputs, returning ``[B, L, d]``."""
        x = self.f2_input(z_t, z_v)
        lead = x.shape[:-1]
        return self.f2(x.reshape(-1, x.shape[-1])).reshape(*lead, self.d)

    def spatial(self, dtype=torch.float32) -> torch.Tensor:
        eye = torch.eye(self.n_s, dtype=dtype)
        return self.f1(eye)

    def forward(self, z_t, z_v) -> torch.Tensor:
        """``[B, n_s, L, d]``; temporal-only variants repeat f2 across sensors."""
        tmp = self.temporal(z_t, z_v)  # [B, L, d]
        if self.f1 is None:
            return tmp[:, None].expand(-1, self.n_s, -1, -1)
        return self.spatial(tmp.dtype)[None, :, None, :] + tmp[:, None, :, :]


def build_stve(Z_S, Z_T, Z_V, params: STVEFusion, variant: str) -> torch.Tensor:
    """Functional form: ``f1(Z_S)[s] + f2(Z_T || Z_V)[tau]`` as ``[n_s, p+q, d]``.

    ``Z_T``/``Z_V`` may carry a leading batch axis, in which case the result is
    ``[B, n_s, p+q, d]``.
    """
    check_variant(variant)
    if variant != params.variant:
        raise ValueError(f"fusion params were built for {params.variant}, not {variant}")
    as_t = lambda a: None if a is None else torch.as_tensor(np.asarray(a) if not isinstance(a, torch.Tensor) else a, dtype=torch.float32)
    z_t, z_v = as_t(Z_T), as_t(Z_V)
    single = (z_t if z_t is not None else z_v).ndim == 2
    if single:
        z_t = None if z_t is None else z_t[None]
        z_v = None if z_v is None else z_v[None]
    tmp = params.temporal(z_t, z_v)
    if params.f1 is None:
        out = tmp[:, None].expand(-1, params.n_s, -1, -1)
    else:
        zs = as_t(Z_S)
        if zs.shape != (params.n_s, params.n_s):
            raise ValueError(f"sensor encoding must be {params.n_s}x{params.n_s}")
        out = params.f1(zs)[None, :, None, :] + tmp[:, None, :, :]
    return out[0] if single else out
