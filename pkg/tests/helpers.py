"""Numerical oracles shared by the tests."""
import numpy as np

from minimoe.tensor import Tensor


def numeric_grad(fn, x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar fn() with respect to x.data."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn().item()
        flat[i] = orig - eps
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def check_grad(fn, inputs, rtol: float = 1e-4, eps: float = 1e-6) -> None:
    """Compare autodiff gradients of fn() against central differences for every input."""
    for t in inputs:
        t.zero_grad()
    fn().backward()
    for t in inputs:
        expected = numeric_grad(fn, t, eps)
        actual = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = max(np.abs(expected).max(), np.abs(actual).max(), 1e-8)
        err = np.abs(actual - expected).max() / scale
        assert err < rtol, f"relative gradient error {err:.2e} for input of shape {t.shape}"


def jacobi_singular_values(a: np.ndarray, sweeps: int = 60) -> np.ndarray:
    """One-sided Jacobi SVD; descending singular values, independent of numpy.linalg."""
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = u[:, i] @ u[:, i]
                beta = u[:, j] @ u[:, j]
                gamma = u[:, i] @ u[:, j]
                if abs(gamma) <= 1e-15 * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ui, uj = u[:, i].copy(), u[:, j].copy()
                u[:, i] = c * ui - s * uj
                u[:, j] = s * ui + c * uj
        if not rotated:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]
