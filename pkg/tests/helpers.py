"""Shared test machinery: finite-difference oracles, toy networks, and
naive reference implementations kept independent of the library code
they check."""

import numpy as np

from latent_inpaint import autodiff as ad
from latent_inpaint.autodiff import Tensor, parameter


# ---- finite-difference oracle ---------------------------------------------


def finite_diff(loss_fn, arr, coord, h):
    """Central difference of `loss_fn()` w.r.t. arr.flat[coord]."""
    flat = arr.ravel()
    orig = flat[coord]
    flat[coord] = orig + h
    fp = loss_fn()
    flat[coord] = orig - h
    fm = loss_fn()
    flat[coord] = orig
    return (fp - fm) / (2.0 * h)


def coords_for(arr, n, seed=0):
    size = arr.size
    if size <= n:
        return list(range(size))
    return list(np.random.default_rng(seed).choice(size, size=n, replace=False))


def gradcheck(make_loss, tensors, h=1e-3, tol=1e-4, n_coords=6, require_valid=0.5):
    """Compare analytic gradients of a scalar loss against central finite
    differences on a sample of coordinates of each tensor.

    Each probe is self-validated by Richardson consistency: the h and h/2
    estimates must agree, otherwise the loss is locally non-smooth there
    (a relu/abs kink inside the interval) and the probe is excluded; at
    least `require_valid` of the probes must survive.  Error is reported
    as max |ad - fd| / max(|fd|) over the surviving probes.
    """
    loss = make_loss()
    grads = ad.grad(loss, tensors)
    scalar = lambda: make_loss().item()
    probes = []
    for t, g in zip(tensors, grads):
        for c in coords_for(t.data, n_coords, seed=t.size):
            fd_h = finite_diff(scalar, t.data, c, h)
            fd_half = finite_diff(scalar, t.data, c, h / 2.0)
            probes.append((g.data.ravel()[c], fd_h, fd_half))
    scale = max(max(abs(p[1]) for p in probes), 1e-10)
    valid = [(a, f) for a, f, f2 in probes if abs(f - f2) <= 0.25 * tol * scale]
    assert len(valid) >= require_valid * len(probes), (
        f"only {len(valid)}/{len(probes)} probes had a trustworthy oracle"
    )
    err = max(abs(a - f) for a, f in valid) / scale
    assert err <= tol, f"gradient mismatch: max rel err {err:.3e} > {tol}"
    return err


# ---- toy networks (MLP; fast enough for training-loop tests) --------------


class ToyGenerator:
    def __init__(self, rng, latent_dim=4, hidden=64, shape=(1, 8, 8)):
        self.latent_dim = latent_dim
        self.shape = shape
        n = int(np.prod(shape))
        self.w1 = parameter(rng.normal(size=(hidden, latent_dim)) / np.sqrt(latent_dim))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.normal(size=(n, hidden)) / np.sqrt(hidden))
        self.b2 = parameter(np.zeros(n))

    def __call__(self, z):
        single = z.ndim == 1
        z2 = z.reshape(1, -1) if single else z
        h = ad.relu(ad.matmul(z2, self.w1.swapaxes(0, 1)) + self.b1)
        x = ad.tanh(ad.matmul(h, self.w2.swapaxes(0, 1)) + self.b2)
        out = x.reshape(z2.shape[0], *self.shape)
        return out.reshape(*self.shape) if single else out

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class ToyCritic:
    def __init__(self, rng, shape=(1, 8, 8), hidden=64):
        self.shape = shape
        n = int(np.prod(shape))
        self.w1 = parameter(rng.normal(size=(hidden, n)) / np.sqrt(n))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.normal(size=(1, hidden)) / np.sqrt(hidden))
        self.b2 = parameter(np.zeros(1))

    def __call__(self, img):
        single = img.ndim == len(self.shape)
        x = img.reshape(1, -1) if single else img.reshape(img.shape[0], -1)
        h = ad.relu(ad.matmul(x, self.w1.swapaxes(0, 1)) + self.b1)
        s = (ad.matmul(h, self.w2.swapaxes(0, 1)) + self.b2).reshape(x.shape[0])
        return s.reshape(()) if single else s

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class LinearTanhDecoder:
    """Fixed random linear map plus tanh; a generator stand-in that a
    latent optimizer should invert almost perfectly."""

    def __init__(self, rng, latent_dim, shape, scale=1.0):
        self.latent_dim = latent_dim
        self.shape = shape
        n = int(np.prod(shape))
        self.w = Tensor(rng.normal(size=(n, latent_dim)) * scale / np.sqrt(latent_dim))

    def __call__(self, z):
        single = z.ndim == 1
        z2 = z.reshape(1, -1) if single else z
        out = ad.tanh(ad.matmul(z2, self.w.swapaxes(0, 1)))
        out = out.reshape(z2.shape[0], *self.shape)
        return out.reshape(*self.shape) if single else out


def two_patterns():
    """The fixed pair of 8x8 single-channel training patterns."""
    a = np.full((8, 8), -0.8)
    a[:, ::2] = 0.8  # vertical stripes
    b = np.full((8, 8), -0.8)
    b[::2, :] = 0.8  # horizontal stripes
    return np.stack([a[None], b[None]])


# ---- naive reference implementations ---------------------------------------


def brute_force_weight_map(mask, window):
    """Direct double-loop version of the hole-proximity weights."""
    h, w = mask.shape
    r = window // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if mask[i, j] == 0:
                continue
            holes = total = 0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        total += 1
                        holes += mask[ii, jj] == 0
            out[i, j] = holes / total
    return out


def naive_ssim(x, y, kernel, c1, c2, c3):
    """Per-window l*c*s with explicit loops and the three separate factors."""
    h, w = x.shape
    kh, kw = kernel.shape
    vals = []
    for i in range(h - kh + 1):
        for j in range(w - kw + 1):
            wx = x[i : i + kh, j : j + kw]
            wy = y[i : i + kh, j : j + kw]
            mx = (kernel * wx).sum()
            my = (kernel * wy).sum()
            vx = max((kernel * (wx - mx) ** 2).sum(), 0.0)
            vy = max((kernel * (wy - my) ** 2).sum(), 0.0)
            cov = (kernel * (wx - mx) * (wy - my)).sum()
            lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
            con = (2 * np.sqrt(vx) * np.sqrt(vy) + c2) / (vx + vy + c2)
            struct = (cov + c3) / (np.sqrt(vx) * np.sqrt(vy) + c3)
            vals.append(lum * con * struct)
    return float(np.mean(vals))
