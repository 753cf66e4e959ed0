"""Poisson editing: re-solve hole pixels so their Laplacian matches the
generated guidance image while known pixels stay fixed at the input.

Discretization is the 5-point Laplacian, truncated at the image border;
each channel yields one symmetric positive-definite system over the hole
pixels, solved by conjugate gradients.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConvergenceError, IsolatedHoleError, ShapeError

_SHIFTS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def worker_count():
    """Parallelism cap from LATENT_INPAINT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("LATENT_INPAINT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PoissonProblem:
    guidance: np.ndarray  # generated image, [C,H,W] or [H,W]
    boundary: np.ndarray  # damaged input providing Dirichlet values
    mask: np.ndarray  # [H,W], 1 = known, 0 = hole
    tolerance: float = 1e-6
    max_iterations: Optional[int] = None
    clip: Optional[tuple] = (-1.0, 1.0)  # gamut for solved hole values; None disables


def solve_spd_system(apply_A, b, tol=1e-8, max_iter=None):
    """Conjugate gradients for SPD `A x = b` given only `apply_A`.

    Stops when ||Ax - b|| <= tol * ||b||; exceeding `max_iter` (default
    10 * len(b)) raises ConvergenceError, as does loss of positive
    definiteness.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros_like(b)
    r = b.copy()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return x
    p = r.copy()
    rs = r @ r
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * b_norm:
            return x
        ap = apply_A(p)
        p_ap = p @ ap
        if p_ap <= 0:
            raise ConvergenceError("operator is not positive definite on this subspace")
        alpha = rs / p_ap
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) <= tol * b_norm:
        return x
    raise ConvergenceError(
        f"conjugate gradient did not reach tol {tol} within {max_iter} iterations"
    )


def _check_hole_connectivity(mask):
    """Every hole pixel must reach a known pixel through 4-connected holes."""
    hole = mask == 0
    if not hole.any():
        return
    known = ~hole
    seeds = np.zeros_like(hole)
    seeds[1:, :] |= hole[1:, :] & known[:-1, :]
    seeds[:-1, :] |= hole[:-1, :] & known[1:, :]
    seeds[:, 1:] |= hole[:, 1:] & known[:, :-1]
    seeds[:, :-1] |= hole[:, :-1] & known[:, 1:]
    reached = seeds
    while True:
        grown = reached.copy()
        grown[1:, :] |= reached[:-1, :]
        grown[:-1, :] |= reached[1:, :]
        grown[:, 1:] |= reached[:, :-1]
        grown[:, :-1] |= reached[:, 1:]
        grown &= hole
        if (grown == reached).all():
            break
        reached = grown
    if (hole & ~reached).any():
        n_bad = int((hole & ~reached).sum())
        raise IsolatedHoleError(
            f"{n_bad} hole pixel(s) have no 4-connected path to a known pixel"
        )


def _degree(h, w):
    deg = np.full((h, w), 4.0)
    deg[0, :] -= 1
    deg[-1, :] -= 1
    deg[:, 0] -= 1
    deg[:, -1] -= 1
    return deg


def _neighbor_sum(img):
    """Sum of in-image 4-neighbors at each pixel."""
    out = np.zeros_like(img)
    out[1:, :] += img[:-1, :]
    out[:-1, :] += img[1:, :]
    out[:, 1:] += img[:, :-1]
    out[:, :-1] += img[:, 1:]
    return out


def _solve_channel(g, y, hole, deg, tol, max_iter, clip):
    h, w = hole.shape
    known = ~hole
    # rhs: divergence of guidance plus Dirichlet contribution of known pixels
    div_g = deg * g - _neighbor_sum(g)
    dirichlet = _neighbor_sum(np.where(known, y, 0.0))
    b = (div_g + dirichlet)[hole]

    def apply_A(x):
        field = np.zeros((h, w))
        field[hole] = x
        return (deg * field - _neighbor_sum(field))[hole]

    x = solve_spd_system(apply_A, b, tol=min(tol, 1e-8), max_iter=max_iter)
    # verify the editing residual in the image domain
    full = np.where(hole, 0.0, y)
    full[hole] = x
    residual = (deg * full - _neighbor_sum(full)) - div_g
    res_inf = np.abs(residual[hole]).max() if hole.any() else 0.0
    if res_inf > tol * 2.0:
        raise ConvergenceError(f"Poisson residual {res_inf:.3e} above {tol * 2.0:.3e}")
    out = y.copy()
    out[hole] = x if clip is None else np.clip(x, clip[0], clip[1])
    return out


def poisson_blend(problem):
    """Match hole-pixel gradients to the guidance image per channel;
    known pixels pass through bit-exactly, hole values follow
    `problem.clip` (default [-1, 1])."""
    g = np.asarray(problem.guidance, dtype=np.float64)
    y = np.asarray(problem.boundary, dtype=np.float64)
    mask = np.asarray(problem.mask)
    if g.shape != y.shape:
        raise ShapeError(f"guidance {g.shape} and boundary {y.shape} differ")
    if g.shape[-2:] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not match image plane {g.shape[-2:]}")
    _check_hole_connectivity(mask)
    hole = mask == 0
    if not hole.any():
        return np.asarray(problem.boundary).copy()

    single = g.ndim == 2
    g3 = g[None] if single else g
    y3 = np.asarray(problem.boundary, dtype=np.float64)
    y3 = y3[None] if single else y3
    deg = _degree(*mask.shape)
    max_iter = problem.max_iterations or 10 * int(hole.sum())

    def run(c):
        return _solve_channel(g3[c], y3[c].copy(), hole, deg, problem.tolerance, max_iter,
                              problem.clip)

    channels = range(g3.shape[0])
    n_workers = min(worker_count(), g3.shape[0])
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            out = np.stack(list(pool.map(run, channels)))
    else:
        out = np.stack([run(c) for c in channels])
    result = out[0] if single else out
    # known pixels must be bit-identical to the boundary image
    src = np.asarray(problem.boundary)
    if single:
        result[~hole] = src[~hole]
    else:
        result[:, ~hole] = src[:, ~hole]
    return result
