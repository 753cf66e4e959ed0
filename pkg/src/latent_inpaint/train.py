"""WGAN training with gradient penalty.

The critic minimizes  mean D(fake) - mean D(real) + lambda * GP  where GP
penalizes the squared excess of the input-gradient norm over 1 at points
interpolated between real and fake samples (one uniform epsilon per
sample).  The generator minimizes -mean D(G(z)).  Several critic updates
run per generator update; everything is driven by a single seeded RNG so
a (seed, config, dataset) triple fixes the whole parameter trajectory.
"""

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, input_gradient_norm, no_grad, zero_grads
from .data_io import Checkpoint, save_checkpoint
from .errors import CheckpointError, NumericalError
from .networks import restore_params

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "critic_loss", "wasserstein_estimate", "gp_term", "gen_loss")


@dataclass
class TrainConfig:
    iterations: int = 50000
    batch_size: int = 64
    learning_rate: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    latent_dim: int = 128
    gp_lambda: float = 10.0
    critic_steps_per_gen: int = 5
    seed: int = 0
    hflip_augment: bool = True

    def validate(self):
        if self.iterations <= 0 or self.batch_size <= 0 or self.latent_dim <= 0:
            raise ValueError("iterations, batch_size and latent_dim must be positive")
        if self.learning_rate <= 0 or self.gp_lambda < 0 or self.critic_steps_per_gen < 1:
            raise ValueError("invalid learning_rate, gp_lambda or critic_steps_per_gen")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("Adam betas must lie in [0, 1)")
        return self


class Adam:
    """Bias-corrected Adam over a name -> parameter-tensor dict.

    Parameters whose `.grad` is None are treated as zero-gradient (their
    moments still decay), so one optimizer instance can serve losses that
    touch different parameter subsets.
    """

    def __init__(self, params, lr, beta1, beta2, eps=1e-8):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * np.square(g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state.get("t", 0))
        for group_name, group in (("m", self.m), ("v", self.v)):
            saved = state.get(group_name, {})
            for k in group:
                if k in saved:
                    if saved[k].shape != group[k].shape:
                        raise CheckpointError(f"optimizer state shape mismatch for {k!r}")
                    group[k] = saved[k].astype(group[k].dtype).copy()


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"{what} is not finite ({value})")
    return value


def gradient_penalty(critic, real, fake, eps):
    """mean((||grad_x D(x_hat)||_2 - 1)^2) at x_hat = eps*real + (1-eps)*fake."""
    eps = np.asarray(eps).reshape(-1, *([1] * (real.ndim - 1)))
    x_hat = Tensor(eps * real.data + (1.0 - eps) * fake.data)
    norms = input_gradient_norm(critic, x_hat, create_graph=True)
    excess = norms - 1.0
    return (excess * excess).mean()


def _critic_terms(real, fake, critic, gp_lambda, eps):
    if real.shape != fake.shape:
        raise ValueError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    w_term = critic(fake).mean() - critic(real).mean()
    gp = gradient_penalty(critic, real, fake, eps)
    loss = w_term + gp_lambda * gp
    _check_finite(w_term.item(), "Wasserstein term")
    _check_finite(gp.item(), "gradient penalty")
    return loss, -w_term.item(), gp.item()


def critic_loss(real, fake, critic, gp_lambda, eps=None, rng=None):
    """mean D(fake) - mean D(real) + gp_lambda * gradient penalty.

    `eps` supplies the per-sample interpolation draws; when omitted they
    come from `rng` (or fresh randomness as a last resort).
    """
    if eps is None:
        rng = rng or np.random.default_rng()
        eps = rng.uniform(size=real.shape[0])
    loss, _, _ = _critic_terms(real, fake, critic, gp_lambda, eps)
    return loss


def generator_loss(z, generator, critic):
    """-mean D(G(z)): the generator pushes its samples up the critic."""
    score = critic(generator(z))
    loss = -(score.mean() if score.ndim else score)
    _check_finite(loss.item(), "generator loss")
    return loss


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list


def make_checkpoint(iteration, generator, critic, opt_gen, opt_critic, rng, config):
    return Checkpoint(
        iteration=iteration,
        gen_params={k: p.data.copy() for k, p in generator.params().items()},
        critic_params={k: p.data.copy() for k, p in critic.params().items()},
        opt_gen=opt_gen.state_dict(),
        opt_critic=opt_critic.state_dict(),
        rng_state=rng.bit_generator.state,
        config=dataclasses.asdict(config),
    )


def train(config, dataset, generator, critic, out_dir=None, resume=None,
          checkpoint_every=1000):
    """Run the WGAN-GP loop; returns the final checkpoint and loss history.

    `dataset` is a data_io.Dataset or an [M,C,H,W] array in [-1,1].  With
    `out_dir` set, a loss CSV row per iteration and periodic checkpoints
    (every `checkpoint_every` iterations plus the final one) are written.
    A non-finite loss raises NumericalError; checkpoints already on disk
    are left in place.
    """
    config.validate()
    images = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("dataset must be a nonempty [M,C,H,W] array")
    n_data = images.shape[0]

    rng = np.random.default_rng(config.seed)
    opt_gen = Adam(generator.params(), config.learning_rate, config.adam_beta1,
                   config.adam_beta2)
    opt_critic = Adam(critic.params(), config.learning_rate, config.adam_beta1,
                      config.adam_beta2)
    start = 0
    if resume is not None:
        restore_params(generator, resume.gen_params, "generator")
        restore_params(critic, resume.critic_params, "critic")
        opt_gen.load_state_dict(resume.opt_gen)
        opt_critic.load_state_dict(resume.opt_critic)
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss.csv"
        fresh = start == 0 or not log_path.exists()
        csv_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(LOG_FIELDS)

    gen_params = list(generator.params().values())
    critic_params = list(critic.params().values())
    history = []
    try:
        for it in range(start + 1, config.iterations + 1):
            for _ in range(config.critic_steps_per_gen):
                idx = rng.integers(0, n_data, size=config.batch_size)
                batch = images[idx]
                if config.hflip_augment:
                    flips = rng.random(config.batch_size) < 0.5
                    batch = batch.copy()
                    batch[flips] = batch[flips, :, :, ::-1]
                z = rng.standard_normal((config.batch_size, config.latent_dim))
                eps = rng.uniform(size=config.batch_size)
                with no_grad():
                    fake = generator(Tensor(z))
                zero_grads(gen_params)
                zero_grads(critic_params)
                loss_c, w_est, gp_term = _critic_terms(
                    Tensor(batch), fake, critic, config.gp_lambda, eps
                )
                backward(loss_c)
                c_val = _check_finite(loss_c.item(), "critic loss")
                opt_critic.step()

            z = rng.standard_normal((config.batch_size, config.latent_dim))
            zero_grads(gen_params)
            zero_grads(critic_params)
            loss_g = generator_loss(Tensor(z), generator, critic)
            backward(loss_g)
            opt_gen.step()

            row = (it, c_val, w_est, gp_term, loss_g.item())
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                csv_file.flush()
            if out_dir is not None and (it % checkpoint_every == 0 or it == config.iterations):
                ckpt = make_checkpoint(it, generator, critic, opt_gen, opt_critic, rng, config)
                path = out_dir / f"ckpt_{it:06d}.bin"
                save_checkpoint(ckpt, path)
                log.info("wrote checkpoint %s", path)
    finally:
        if csv_file is not None:
            csv_file.close()

    final = make_checkpoint(config.iterations, generator, critic, opt_gen, opt_critic,
                            rng, config)
    return TrainResult(final, history)
