"""Shared test utilities: finite-difference gradient checking in float64."""

import numpy as np

from anchorbert.tensor import Tensor


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error of a against reference b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(make_loss, t: Tensor, step: float = 1e-4, entries=None) -> np.ndarray:
    """Central finite differences of make_loss() w.r.t. t.data.

    Perturbs t.data in place (restoring it) and rebuilds the graph each
    evaluation. With `entries`, only those flat indices are estimated and the
    rest stay zero (for large parameters).
    """
    flat = t.data.reshape(-1)
    g = np.zeros_like(flat)
    idxs = range(flat.size) if entries is None else entries
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        lp = make_loss().item()
        flat[i] = orig - step
        lm = make_loss().item()
        flat[i] = orig
        g[i] = (lp - lm) / (2 * step)
    return g.reshape(t.shape)


def clustered_queries_and_keys(n=64, dk=64, m=8, r=0.0, eps=0.005, seed=0):
    """Queries in m tight clusters on the unit sphere, keys nearly orthogonal
    to the cluster span.

    Cluster centers are orthonormal; the first m query rows ARE the centers,
    so anchor indices 0..m-1 give one anchor per cluster. Remaining rows sit
    within chord distance r of their center on the sphere. Keys are unit
    vectors mostly in the orthogonal complement of the center span, with an
    eps-sized in-span component: the exact and anchored similarities use
    different softmax temperatures (1/sqrt(dk) vs 1), so their rows only agree
    where the key scores vary little across the cluster span, which this
    construction guarantees with margin.
    Returns (Q, K, anchor_indices).
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dk, dk)))
    centers = basis[:, :m].T
    comp = basis[:, m:]
    Q = np.zeros((n, dk))
    Q[:m] = centers
    theta = 2 * np.arcsin(min(r, 1.999) / 2) if r > 0 else 0.0
    for i in range(m, n):
        c = centers[i % m]
        u = rng.normal(size=dk)
        u -= (u @ c) * c
        u /= np.linalg.norm(u)
        t = theta * rng.uniform()
        Q[i] = np.cos(t) * c + np.sin(t) * u
    K = np.zeros((n, dk))
    for i in range(n):
        w = comp @ rng.normal(size=dk - m)
        w /= np.linalg.norm(w)
        v = centers.T @ rng.normal(size=m)
        v /= np.linalg.norm(v)
        K[i] = np.sqrt(max(0.0, 1 - eps ** 2)) * w + eps * v
    return Q, K, np.arange(m)


def mean_row_tv(S: np.ndarray, S_tilde: np.ndarray) -> float:
    """Mean per-row total-variation distance between two stochastic matrices."""
    return float(0.5 * np.abs(S - S_tilde).sum(axis=-1).mean())


def check_grad(make_loss, tensors: list[Tensor], rtol: float = 1e-4, step: float = 1e-4,
               entries_per_tensor: int | None = None, rng=None):
    """Assert analytic grads of make_loss() match finite differences.

    Each tensor must be float64 with requires_grad=True. Returns the worst
    relative error seen.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradient checks run in float64"
        t.grad = None
    loss = make_loss()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        if entries_per_tensor is None or t.data.size <= entries_per_tensor:
            entries = None
            ref = numeric_grad(make_loss, t, step)
            got = t.grad
        else:
            entries = rng.choice(t.data.size, size=entries_per_tensor, replace=False)
            ref = numeric_grad(make_loss, t, step, entries=entries)
            got = np.zeros_like(t.grad)
            got.reshape(-1)[entries] = t.grad.reshape(-1)[entries]
        err = rel_err(got, ref)
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol}"
    return worst
