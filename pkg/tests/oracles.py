"""Independent reference computations used by several test modules."""

import numpy as np
import sympy as sp


def fibonacci_sphere(count: int, dim: int) -> np.ndarray:
    """Near-uniform unit vectors: circle angles for dim 2, Fibonacci lattice for dim 3."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        a = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(a), np.sin(a)])
    if dim == 3:
        i = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * i / count)
        th = np.pi * (1 + 5 ** 0.5) * i
        return np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])
    x = np.random.default_rng(11).normal(size=(count, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def c1_grid_oracle(B: np.ndarray, gram: np.ndarray, count: int, chunk: int = 500) -> float:
    """Dense search of <B(w, v), w> over V-normalised raw-coordinate directions w and v."""
    n = B.shape[0]
    D = fibonacci_sphere(count, n)
    D = D / np.sqrt(np.einsum("pi,ij,pj->p", D, gram, D))[:, None]
    best = -np.inf
    for s in range(0, len(D), chunk):
        W = D[s:s + chunk]
        C = np.einsum("pi,ijk,pk->pj", W, B, W)
        best = max(best, float(np.max(C @ D.T)))
    return best


def power_iteration_trace(T: np.ndarray, gram: np.ndarray, iters: int = 5000) -> float:
    """Largest generalized eigenvalue of (T, gram) by power iteration on gram^-1 T."""
    x = np.ones(T.shape[0])
    lam = 0.0
    for _ in range(iters):
        y = np.linalg.solve(gram, T @ x)
        x_new = y / np.linalg.norm(y)
        lam_new = float(x_new @ T @ x_new / (x_new @ gram @ x_new))
        if abs(lam_new - lam) <= 1e-16 * max(1.0, abs(lam_new)) and np.allclose(x_new, x, atol=1e-15):
            break
        x, lam = x_new, lam_new
    return float(np.sqrt(lam_new))


def edge_integral_of_trace(stream_function: str) -> np.ndarray:
    """Exact int_Gamma u dsigma for u = curl psi on the unit square (sympy)."""
    x, y = sp.symbols("x y")
    psi = sp.sympify(stream_function, locals={"x": x, "y": y})
    u = (sp.diff(psi, y), -sp.diff(psi, x))
    total = np.zeros(2)
    for comp in range(2):
        val = (sp.integrate(u[comp].subs(y, 0), (x, 0, 1)) + sp.integrate(u[comp].subs(y, 1), (x, 0, 1))
               + sp.integrate(u[comp].subs(x, 0), (y, 0, 1)) + sp.integrate(u[comp].subs(x, 1), (y, 0, 1)))
        total[comp] = float(val)
    return total
