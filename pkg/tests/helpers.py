"""Shared oracles for tests."""
import numpy as np
import torch


def finite_difference_check(module: torch.nn.Module, loss_fn, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences over all parameters."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    numeric = torch.zeros_like(analytic)
    i = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = loss_fn().item()
                flat[j] = orig - eps
                down = loss_fn().item()
                flat[j] = orig
                numeric[i] = (up - down) / (2 * eps)
                i += 1
    num = torch.linalg.norm(analytic - numeric)
    den = torch.linalg.norm(analytic) + torch.linalg.norm(numeric)
    return float(num / den) if den > 0 else 0.0


def dense_diffusion(H, A, K, W_f, W_b):
    """``sum_k P_f^k H W_f[k] + P_b^k H W_b[k]`` with explicit matrix powers."""
    A = np.asarray(A, dtype=np.float64)

    def rownorm(M):
        out = np.zeros_like(M)
        for r in range(len(M)):
            s = M[r].sum()
            if s > 0:
                out[r] = M[r] / s
        return out

    P_f, P_b = rownorm(A), rownorm(A.T)
    out = np.zeros((H.shape[0], W_f.shape[-1]))
    for k in range(K + 1):
        out += np.linalg.matrix_power(P_f, k) @ H @ W_f[k]
        out += np.linalg.matrix_power(P_b, k) @ H @ W_b[k]
    return out
