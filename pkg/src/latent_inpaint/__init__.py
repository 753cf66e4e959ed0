"""Semantic image inpainting with an improved Wasserstein GAN.

Train a residual generator/critic pair with a gradient penalty, recover
the latent code that best explains a damaged image under contextual,
gradient and prior losses, composite the result (overlay or Poisson
blending), and score reconstructions with MSE/PSNR/SSIM.
"""

from .autodiff import Tensor, backward, grad, input_gradient_norm, no_grad, parameter
from .data_io import Checkpoint, Dataset, load_checkpoint, load_dataset, make_mask, save_checkpoint
from .inpaint import InpaintConfig, composite, compute_weight_map, find_closest_encoding
from .metrics import MetricReport, evaluate_pair_set, mse, psnr, ssim
from .networks import Critic, Generator, init_params
from .poisson import PoissonProblem, poisson_blend, solve_spd_system
from .train import Adam, TrainConfig, critic_loss, generator_loss, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Checkpoint",
    "Critic",
    "Dataset",
    "Generator",
    "InpaintConfig",
    "MetricReport",
    "PoissonProblem",
    "Tensor",
    "TrainConfig",
    "backward",
    "composite",
    "compute_weight_map",
    "critic_loss",
    "evaluate_pair_set",
    "find_closest_encoding",
    "generator_loss",
    "grad",
    "init_params",
    "input_gradient_norm",
    "load_checkpoint",
    "load_dataset",
    "make_mask",
    "mse",
    "no_grad",
    "parameter",
    "poisson_blend",
    "psnr",
    "save_checkpoint",
    "solve_spd_system",
    "ssim",
    "train",
]
