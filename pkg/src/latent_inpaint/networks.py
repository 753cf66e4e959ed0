"""Residual generator and critic.

The generator projects a Gaussian latent vector onto a 4x4 feature map
and doubles the resolution with each residual block until the output
convolution produces a tanh-bounded RGB image.  The critic mirrors the
schedule downward and flattens its last feature map into a single score
per sample.  Both networks normalize per sample (layer norm, never
across the batch) and use plain ReLU inside the blocks.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import parameter
from .errors import ShapeError


def _uniform_fan_in(rng, shape, fan_in):
    # variance 1/fan_in
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d:
    def __init__(self, rng, cin, cout, k, stride=1, pad=0):
        self.stride = stride
        self.pad = pad
        self.w = parameter(_uniform_fan_in(rng, (cout, cin, k, k), cin * k * k))
        self.b = parameter(np.zeros(cout))

    def __call__(self, x):
        y = ad.conv2d(x, self.w, self.stride, self.pad)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return {"w": self.w, "b": self.b}


class Linear:
    def __init__(self, rng, n_in, n_out):
        self.w = parameter(_uniform_fan_in(rng, (n_out, n_in), n_in))
        self.b = parameter(np.zeros(n_out))

    def __call__(self, x):
        return ad.matmul(x, self.w.swapaxes(0, 1)) + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    """Per-sample normalization over (C,H,W) with a per-channel affine."""

    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.g = parameter(np.ones((channels, 1, 1)))
        self.b = parameter(np.zeros((channels, 1, 1)))

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b, self.eps)

    def params(self):
        return {"g": self.g, "b": self.b}


class ResidualBlock:
    """Pre-activation residual block: out = F(x) + skip(x).

    `mode` is "keep", "up" (nearest x2 before the first conv) or "down"
    (2x2 mean pool after the last conv); the skip path is resampled the
    same way and passes through a 1x1 projection when the channel count
    changes.
    """

    def __init__(self, rng, cin, cout, mode="keep"):
        if mode not in ("keep", "up", "down"):
            raise ValueError(f"unknown residual mode {mode!r}")
        self.mode = mode
        self.ln1 = LayerNorm(cin)
        self.conv1 = Conv2d(rng, cin, cout, 3, pad=1)
        self.ln2 = LayerNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, pad=1)
        self.proj = Conv2d(rng, cin, cout, 1) if cin != cout else None

    def __call__(self, x):
        h = ad.relu(self.ln1(x))
        if self.mode == "up":
            h = ad.upsample2x(h)
        h = self.conv1(h)
        h = ad.relu(self.ln2(h))
        h = self.conv2(h)
        if self.mode == "down":
            h = ad.avg_pool2(h)

        s = x
        if self.mode == "up":
            s = ad.upsample2x(s)
        elif self.mode == "down":
            s = ad.avg_pool2(s)
        if self.proj is not None:
            s = self.proj(s)
        return h + s

    def params(self):
        out = {}
        for name, layer in (
            ("ln1", self.ln1),
            ("conv1", self.conv1),
            ("ln2", self.ln2),
            ("conv2", self.conv2),
        ):
            for k, v in layer.params().items():
                out[f"{name}.{k}"] = v
        if self.proj is not None:
            for k, v in self.proj.params().items():
                out[f"proj.{k}"] = v
        return out


def _collect(layers):
    out = {}
    for prefix, layer in layers:
        for k, v in layer.params().items():
            out[f"{prefix}.{k}"] = v
    return out


class Generator:
    """latent vector -> image in (-1, 1), side length 4 * 2**stages."""

    def __init__(self, rng, latent_dim=128, base_channels=512, stages=4, out_channels=3):
        self.latent_dim = latent_dim
        self.stages = stages
        self.image_size = 4 << stages
        self.out_channels = out_channels
        self.base_channels = base_channels
        self.proj = Linear(rng, latent_dim, base_channels * 16)
        self.blocks = [
            ResidualBlock(rng, base_channels >> i, base_channels >> (i + 1), "up")
            for i in range(stages)
        ]
        top = base_channels >> stages
        self.out_ln = LayerNorm(top)
        self.out_conv = Conv2d(rng, top, out_channels, 3, pad=1)

    def __call__(self, z):
        single = z.ndim == 1
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"expected latent dimension {self.latent_dim}, got {z.shape[-1]}")
        if single:
            z = z.reshape(1, self.latent_dim)
        h = self.proj(z).reshape(z.shape[0], self.base_channels, 4, 4)
        for block in self.blocks:
            h = block(h)
        h = ad.relu(self.out_ln(h))
        img = ad.tanh(self.out_conv(h))
        return img.reshape(*img.shape[1:]) if single else img

    def params(self):
        layers = [("proj", self.proj)]
        layers += [(f"block{i}", b) for i, b in enumerate(self.blocks)]
        layers += [("out_ln", self.out_ln), ("out_conv", self.out_conv)]
        return _collect(layers)


class Critic:
    """image batch -> one unbounded realism score per sample."""

    def __init__(self, rng, in_channels=3, base_channels=32, stages=4):
        self.in_channels = in_channels
        self.stages = stages
        self.image_size = 4 << stages
        self.in_conv = Conv2d(rng, in_channels, base_channels, 3, pad=1)
        self.blocks = [
            ResidualBlock(rng, base_channels << i, base_channels << (i + 1), "down")
            for i in range(stages)
        ]
        self.head = Linear(rng, (base_channels << stages) * 16, 1)

    def __call__(self, img):
        single = img.ndim == 3
        if single:
            img = img.reshape(1, *img.shape)
        n = img.shape[0]
        h = self.in_conv(img)
        for block in self.blocks:
            h = block(h)
        h = ad.relu(h)
        # row-wise dot product instead of one [N,D]@[D,1] GEMM: every
        # sample's arithmetic is then independent of its batch position,
        # so permuting the batch permutes scores bit-exactly
        flat = h.reshape(n, -1)
        score = (flat * self.head.w.reshape(1, -1)).sum(axis=1) + self.head.b
        return score.reshape(()) if single else score

    def params(self):
        layers = [("in_conv", self.in_conv)]
        layers += [(f"block{i}", b) for i, b in enumerate(self.blocks)]
        layers += [("head", self.head)]
        return _collect(layers)


def init_params(seed, latent_dim=128, base_channels=512, stages=4, image_channels=3,
                critic_base_channels=32):
    """Freshly initialized (generator, critic), reproducible from `seed`.

    Weights are fan-in scaled uniform (variance 1/fan_in), biases zero,
    layer-norm gains one.
    """
    rng = np.random.default_rng(seed)
    gen = Generator(rng, latent_dim, base_channels, stages, image_channels)
    critic = Critic(rng, image_channels, critic_base_channels, stages)
    return gen, critic


def param_vector(params):
    """Flatten a name->tensor dict into one array (test/debug helper)."""
    return np.concatenate([params[k].data.ravel() for k in sorted(params)])


def restore_params(net, saved, what="network"):
    """Copy a name->array dict into a network's parameter tensors."""
    from .errors import CheckpointError

    params = net.params()
    if set(params) != set(saved):
        diff = sorted(set(params) ^ set(saved))
        raise CheckpointError(f"{what} parameter names do not match checkpoint: {diff[:6]}")
    for name, p in params.items():
        if tuple(saved[name].shape) != p.shape:
            raise CheckpointError(
                f"{what} parameter {name!r} has shape {saved[name].shape}, expected {p.shape}"
            )
        p.data[...] = saved[name]


def _count_blocks(params):
    idx = -1
    for name in params:
        if name.startswith("block"):
            idx = max(idx, int(name.split(".")[0][5:]))
    return idx + 1


def build_from_checkpoint(ckpt):
    """Reconstruct (generator, critic) whose architecture matches the
    parameter shapes stored in a checkpoint, then load the weights."""
    gp = ckpt.gen_params
    base16, latent = gp["proj.w"].shape
    gen = Generator(
        np.random.default_rng(0),
        latent_dim=latent,
        base_channels=base16 // 16,
        stages=_count_blocks(gp),
        out_channels=gp["out_conv.w"].shape[0],
    )
    restore_params(gen, gp, "generator")
    cp = ckpt.critic_params
    critic = Critic(
        np.random.default_rng(0),
        in_channels=cp["in_conv.w"].shape[1],
        base_channels=cp["in_conv.w"].shape[0],
        stages=_count_blocks(cp),
    )
    restore_params(critic, cp, "critic")
    return gen, critic
