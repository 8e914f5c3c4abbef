"""PCA views of embedding series: component selection, 2-D trajectories and
decoded principal directions."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import write_csv


@dataclass
class PCAModel:
    mean: np.ndarray  # [d]
    components: np.ndarray  # [k_max, d], orthonormal rows
    explained_variance: np.ndarray  # [k_max], descending

    @property
    def total_variance(self) -> float:
        return float(self.explained_variance.sum())


def fit_pca(E: np.ndarray) -> PCAModel:
    """PCA by eigendecomposition of the sample covariance.

    Each component is sign-flipped so its largest-magnitude coordinate is
    positive, which keeps plots reproducible.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or len(E) < 2:
        raise ValueError("need at least two embeddings to fit PCA")
    mean = E.mean(axis=0)
    X = E - mean
    cov = X.T @ X / (len(E) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(len(comps)), pivot])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PCAModel(mean, comps, evals)


def project(z: np.ndarray, model: PCAModel, k: int = 2) -> np.ndarray:
    return (np.asarray(z, dtype=np.float64) - model.mean) @ model.components[:k].T


def reconstruct(coords: np.ndarray, model: PCAModel) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    k = coords.shape[-1]
    return model.mean + coords @ model.components[:k]


def retained_variance(model: PCAModel, E: np.ndarray, k: int) -> float:
    """Fraction of the centred sum of squares kept by a rank-``k`` reconstruction."""
    E = np.asarray(E, dtype=np.float64)
    X = E - model.mean
    total = float(np.sum(X**2))
    if total == 0.0:
        return 1.0
    resid = E - reconstruct(project(E, model, k), model)
    return 1.0 - float(np.sum(resid**2)) / total


def select_components(model: PCAModel, E: np.ndarray, threshold: float = 0.997) -> int:
    """Smallest ``k`` whose reconstruction retains at least ``threshold`` of the variance."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    k_max = len(model.components)
    for k in range(1, k_max + 1):
        if retained_variance(model, E, k) >= threshold:
            return k
    return k_max


def decode_component(model: PCAModel, idx: int, alpha: float, mask, vae) -> np.ndarray:
    """Decode ``mean + alpha * components[idx]`` to an ``[H, W, n_c]`` grid."""
    from .vae import decode

    if not 0 <= idx < len(model.components):
        raise IndexError(f"component {idx} out of range [0, {len(model.components)})")
    z = (model.mean + alpha * model.components[idx]).astype(np.float32)
    return decode(z[None], mask, vae)[0]


# -- trajectories ---------------------------------------------------------------

def _calendar(timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ts = np.asarray(timestamps).astype("datetime64[h]")
    hours = ts.view("int64")
    hod = hours % 24
    dow = (hours // 24 + 3) % 7
    month = ts.astype("datetime64[M]").astype(int) % 12 + 1
    return hod, dow, month


def group_labels(timestamps: np.ndarray, grouping: str) -> np.ndarray:
    hod, dow, month = _calendar(timestamps)
    if grouping == "none":
        return np.full(len(hod), "all", dtype=object)
    if grouping == "weekday/weekend":
        return np.where(dow < 5, "weekday", "weekend").astype(object)
    if grouping == "bimonthly":
        lo = (month - 1) // 2 * 2 + 1
        return np.array([f"m{a:02d}-{a + 1:02d}" for a in lo], dtype=object)
    raise ValueError(f"unknown grouping {grouping!r}")


def hourly_centroids(coords: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    """Mean 2-D position per hour of day, ``[24, 2]`` (NaN for absent hours)."""
    hod, _, _ = _calendar(timestamps)
    out = np.full((24, coords.shape[1]), np.nan)
    for h in range(24):
        sel = hod == h
        if sel.any():
            out[h] = coords[sel].mean(axis=0)
    return out


def loop_closure(coords: np.ndarray, timestamps: np.ndarray) -> tuple[float, float]:
    """``(distance between hour-0 and hour-23 centroids, loop diameter)``."""
    cent = hourly_centroids(coords, timestamps)
    gap = float(np.linalg.norm(cent[0] - cent[23]))
    c = cent[~np.isnan(cent).any(axis=1)]
    diam = float(np.max(np.linalg.norm(c[:, None] - c[None], axis=-1)))
    return gap, diam


def export_trajectories(E: np.ndarray, timestamps: np.ndarray, model: PCAModel, grouping: str,
                        out_dir, render: bool = True) -> list[Path]:
    """Per-group CSV (``time,pc1,pc2,hour,dayofweek,month``) and scatter PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ts = np.asarray(timestamps).astype("datetime64[h]")
    coords = project(E, model, 2)
    hod, dow, month = _calendar(ts)
    labels = group_labels(ts, grouping)
    written = []
    for group in sorted(set(labels.tolist())):
        sel = labels == group
        rows = [(str(t), repr(float(a)), repr(float(b)), int(h), int(d), int(m))
                for t, (a, b), h, d, m in zip(ts[sel], coords[sel], hod[sel], dow[sel], month[sel])]
        path = out_dir / f"{group}_trajectory.csv"
        write_csv(path, ["time", "pc1", "pc2", "hour", "dayofweek", "month"], rows)
        written.append(path)
        if render:
            png = out_dir / f"{group}_trajectory.png"
            render_scatter(png, coords[sel], hod[sel], title=group)
            written.append(png)
    return written


def render_scatter(path, coords: np.ndarray, hours: np.ndarray, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5), dpi=100)
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=hours, cmap="viridis", vmin=0, vmax=23, s=6)
    fig.colorbar(sc, ax=ax, label="hour of day")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_heatmap(path, image: np.ndarray, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    im = ax.imshow(np.asarray(image)[..., 0], vmin=0.0, vmax=1.0, cmap="magma")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
