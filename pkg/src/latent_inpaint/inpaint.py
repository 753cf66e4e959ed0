"""Latent-code recovery for a damaged image.

Given a trained generator G and critic D, the damaged image y and its
mask M (1 = known), we minimize over the latent code z

    alpha * L_contextual + beta * L_gradient + eta * L_prior

where the contextual term is a weighted L1 fit of G(z) to the known
pixels, the gradient term matches finite differences of G(z) and y using
only stencils supported by known data, and the prior term is -D(G(z)).
Pixel weights emphasize known pixels whose local window contains hole
pixels.  The optimized z is clamped to a box after every Adam step.
"""

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, zero_grads
from .errors import NumericalError, ShapeError
from .poisson import PoissonProblem, poisson_blend, worker_count
from .train import Adam


@dataclass
class InpaintConfig:
    alpha: float = 0.1
    beta: float = None  # defaults to 1 - alpha
    eta: float = 0.5
    window: int = 7
    iterations: int = 1000
    adam_lr: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    z_clamp: tuple = (-1.0, 1.0)
    restarts: int = 1

    def __post_init__(self):
        if self.beta is None:
            self.beta = 1.0 - self.alpha
        if min(self.alpha, self.beta, self.eta) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and positive")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be positive")
        lo, hi = self.z_clamp
        if not lo < hi:
            raise ValueError("z_clamp must be an increasing interval")


def _box_sum(field, window):
    """Sum of `field` over the window-truncated neighborhood of each pixel."""
    h, w = field.shape
    r = window // 2
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = field.cumsum(0).cumsum(1)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    return ii[i1][:, j1] - ii[i0][:, j1] - ii[i1][:, j0] + ii[i0][:, j0]


def compute_weight_map(mask, window=7):
    """Fraction of hole pixels in each known pixel's window; 0 on holes.

    The window is truncated at the image border, so the denominator
    counts in-image pixels only and weights never exceed 1.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    mask = np.asarray(mask)
    hole = (mask == 0).astype(np.float64)
    counts = _box_sum(hole, window)
    area = _box_sum(np.ones_like(hole), window)
    return np.where(mask != 0, counts / area, 0.0)


def _as_chw(img, what):
    arr = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=np.float64))
    if arr.ndim == 2:
        arr = arr.reshape(1, *arr.shape)
    if arr.ndim != 3:
        raise ShapeError(f"{what} must be [C,H,W] or [H,W], got shape {arr.shape}")
    return arr


def _check_spatial(img, mask, what):
    if img.shape[-2:] != mask.shape:
        raise ShapeError(f"{what} plane {img.shape[-2:]} does not match mask {mask.shape}")


def contextual_loss(z, y, mask, weights, generator):
    """Weighted L1 distance between G(z) and y on the known pixels."""
    gz = _as_chw(generator(z), "generated image")
    y = _as_chw(y, "damaged image")
    if gz.shape != y.shape:
        raise ShapeError(f"generator output {gz.shape} does not match image {y.shape}")
    _check_spatial(y, np.asarray(mask), "image")
    wm = Tensor((np.asarray(weights) * np.asarray(mask))[None, :, :])
    return (wm * ad.tabs(gz - y)).sum()


def _masked_diff(d, mask, axis):
    """Finite difference of `d` along `axis` using only known neighbors.

    Per pixel: central difference when both neighbors are known and in
    the image, else forward (next known), else backward (previous known),
    else zero.
    """
    m = np.asarray(mask, dtype=np.float64)
    n = d.shape[axis]
    usable_next = np.zeros_like(m)
    usable_prev = np.zeros_like(m)
    sl_head = [slice(None)] * m.ndim
    sl_tail = [slice(None)] * m.ndim
    ax2 = axis % m.ndim
    sl_head[ax2] = slice(0, n - 1)
    sl_tail[ax2] = slice(1, n)
    usable_next[tuple(sl_head)] = m[tuple(sl_tail)]
    usable_prev[tuple(sl_tail)] = m[tuple(sl_head)]
    c_central = usable_next * usable_prev
    c_forward = usable_next * (1.0 - usable_prev)
    c_backward = usable_prev * (1.0 - usable_next)

    d_next = ad.pad_axis(ad.narrow(d, axis, 1, n - 1), axis, 0, 1)
    d_prev = ad.pad_axis(ad.narrow(d, axis, 0, n - 1), axis, 1, 0)
    cc = Tensor(c_central[None, :, :])
    cf = Tensor(c_forward[None, :, :])
    cb = Tensor(c_backward[None, :, :])
    return (
        cc * ad.mul_const(d_next - d_prev, 0.5)
        + cf * (d_next - d)
        + cb * (d - d_prev)
    )


def gradient_loss(z, y, mask, weights, generator):
    """Weighted L1 distance between the masked finite differences of
    G(z) and of y (computed jointly on their difference)."""
    gz = _as_chw(generator(z), "generated image")
    y = _as_chw(y, "damaged image")
    if gz.shape != y.shape:
        raise ShapeError(f"generator output {gz.shape} does not match image {y.shape}")
    mask = np.asarray(mask)
    _check_spatial(y, mask, "image")
    diff = gz - y
    gx = _masked_diff(diff, mask, axis=-1)
    gy = _masked_diff(diff, mask, axis=-2)
    wm = Tensor((np.asarray(weights) * mask)[None, :, :])
    return (wm * (ad.tabs(gx) + ad.tabs(gy))).sum()


def prior_loss(z, generator, critic):
    """-D(G(z)): low when the critic believes the sample."""
    score = critic(generator(z))
    return -(score.mean() if score.ndim else score)


def total_loss(z, y, mask, weights, cfg, generator, critic):
    """alpha * contextual + beta * gradient + eta * prior."""
    loss = Tensor(0.0)
    if cfg.alpha:
        loss = loss + ad.mul_const(contextual_loss(z, y, mask, weights, generator), cfg.alpha)
    if cfg.beta:
        loss = loss + ad.mul_const(gradient_loss(z, y, mask, weights, generator), cfg.beta)
    if cfg.eta:
        if critic is None:
            raise ValueError("eta > 0 requires a critic")
        loss = loss + ad.mul_const(prior_loss(z, generator, critic), cfg.eta)
    return loss


@dataclass
class InpaintResult:
    z: np.ndarray
    loss: float
    traces: list  # one loss-per-iteration array per restart
    best_restart: int


def _weights_for(mask, window):
    weights = compute_weight_map(mask, window)
    if not weights.any():  # no holes: fall back to uniform known-pixel weights
        weights = np.asarray(mask, dtype=np.float64).copy()
    return weights


def _one_restart(y, mask, weights, generator, critic, cfg, seed, restart):
    rng = np.random.default_rng([seed, restart])
    z = ad.parameter(rng.standard_normal(generator.latent_dim))
    opt = Adam({"z": z}, cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2)
    lo, hi = cfg.z_clamp
    best_val = np.inf
    best_z = z.data.copy()
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        zero_grads([z])
        loss = total_loss(z, y, mask, weights, cfg, generator, critic)
        val = loss.item()
        trace[it] = val
        if not np.isfinite(val):
            trace[it:] = np.inf
            break
        if val < best_val:
            best_val = val
            best_z = z.data.copy()
        backward(loss)
        opt.step()
        np.clip(z.data, lo, hi, out=z.data)
    return best_val, best_z, trace


def find_closest_encoding(y, mask, generator, critic, cfg=None, seed=0):
    """Optimize the latent code explaining the known pixels of `y`.

    Runs `cfg.restarts` independent Adam descents from Gaussian starts
    (z clamped to `cfg.z_clamp` after every step) and returns the best
    recorded iterate across all of them, with per-restart loss traces.
    """
    cfg = cfg or InpaintConfig()
    mask = np.asarray(mask)
    y_t = _as_chw(np.asarray(y, dtype=np.float64), "damaged image")
    _check_spatial(y_t, mask, "damaged image")
    weights = _weights_for(mask, cfg.window)

    def run(r):
        return _one_restart(y_t, mask, weights, generator, critic, cfg, seed, r)

    n_workers = min(worker_count(), cfg.restarts)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(run, range(cfg.restarts)))
    else:
        outcomes = [run(r) for r in range(cfg.restarts)]

    best = min(range(cfg.restarts), key=lambda r: outcomes[r][0])
    best_val, best_z, _ = outcomes[best]
    if not np.isfinite(best_val):
        raise NumericalError("every restart diverged to a non-finite loss")
    return InpaintResult(best_z, best_val, [o[2] for o in outcomes], best)


def composite(y, mask, g_img, blend="overlay", tolerance=1e-6):
    """Merge generated content into the hole; known pixels keep y exactly.

    `blend="overlay"` pastes generated pixels into the hole;
    `blend="poisson"` re-solves hole values so their gradients follow the
    generated image under Dirichlet data from the known pixels.
    """
    y = np.asarray(y, dtype=np.float64)
    g_img = np.asarray(g_img, dtype=np.float64)
    mask = np.asarray(mask)
    if y.shape != g_img.shape:
        raise ShapeError(f"image {y.shape} and generated image {g_img.shape} differ")
    if y.shape[-2:] != mask.shape:
        raise ShapeError(f"mask {mask.shape} does not match image plane {y.shape[-2:]}")
    if blend == "overlay":
        known = mask != 0
        return np.where(known if y.ndim == 2 else known[None, :, :], y, g_img)
    if blend == "poisson":
        return poisson_blend(PoissonProblem(g_img, y, mask, tolerance=tolerance))
    raise ValueError(f"unknown blend mode {blend!r}")


def config_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["z_clamp"] = list(d["z_clamp"])
    return d
