import numpy as np
import pytest

from helpers import gradcheck
from latent_inpaint.autodiff import Tensor, no_grad
from latent_inpaint.data_io import Checkpoint
from latent_inpaint.errors import ShapeError
from latent_inpaint.networks import (
    Critic,
    Generator,
    ResidualBlock,
    build_from_checkpoint,
    init_params,
    param_vector,
    restore_params,
)


def small_nets(seed, latent=6, base=16, stages=2, channels=3, critic_base=4):
    rng = np.random.default_rng(seed)
    gen = Generator(rng, latent_dim=latent, base_channels=base, stages=stages,
                    out_channels=channels)
    critic = Critic(rng, in_channels=channels, base_channels=critic_base, stages=stages)
    return gen, critic


class TestResidualBlock:
    def zero_branch(self, block):
        for t in (block.conv1.w, block.conv1.b, block.conv2.w, block.conv2.b):
            t.data[...] = 0.0

    def test_keep_identity_when_branch_zeroed(self):
        block = ResidualBlock(np.random.default_rng(0), 4, 4, "keep")
        self.zero_branch(block)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 6, 6)))
        assert np.array_equal(block(x).data, x.data)

    def test_up_doubles_spatial(self):
        block = ResidualBlock(np.random.default_rng(0), 8, 4, "up")
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8, 4, 4)))
        assert block(x).shape == (1, 4, 8, 8)

    def test_down_halves_spatial(self):
        block = ResidualBlock(np.random.default_rng(0), 4, 8, "down")
        x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 8, 8)))
        assert block(x).shape == (1, 8, 4, 4)

    def test_up_zero_branch_is_projected_upsample(self):
        from latent_inpaint import autodiff as ad

        block = ResidualBlock(np.random.default_rng(2), 4, 6, "up")
        self.zero_branch(block)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 4, 4)))
        expected = block.proj(ad.upsample2x(x))
        assert np.array_equal(block(x).data, expected.data)

    def test_down_zero_branch_is_projected_pool(self):
        from latent_inpaint import autodiff as ad

        block = ResidualBlock(np.random.default_rng(4), 4, 6, "down")
        self.zero_branch(block)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 4, 8, 8)))
        expected = block.proj(ad.avg_pool2(x))
        assert np.array_equal(block(x).data, expected.data)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            ResidualBlock(np.random.default_rng(0), 4, 4, "sideways")

    @pytest.mark.parametrize("mode", ["keep", "up", "down"])
    def test_gradient_check_through_block(self, mode):
        block = ResidualBlock(np.random.default_rng(3), 3, 5, mode)
        x_shape = (1, 3, 4, 4) if mode != "down" else (1, 3, 6, 6)
        x = Tensor(np.random.default_rng(4).normal(size=x_shape), requires_grad=True)
        out_shape = block(x).shape
        w = Tensor(np.random.default_rng(5).normal(size=out_shape))

        def loss():
            return (block(x) * w).sum()

        gradcheck(loss, [x, block.conv1.w, block.ln1.g, block.proj.w], n_coords=4)


class TestGenerator:
    def test_default_output_is_3x64x64(self):
        gen, _ = init_params(0, base_channels=64)  # narrow but full depth
        z = Tensor(np.random.default_rng(0).standard_normal(128))
        img = gen(z)
        assert img.shape == (3, 64, 64)

    def test_batched_output_shape(self):
        gen, _ = small_nets(0)
        z = Tensor(np.random.default_rng(0).standard_normal((5, 6)))
        assert gen(z).shape == (5, 3, 16, 16)

    def test_tanh_range_strict(self):
        gen, _ = small_nets(1)
        z = Tensor(np.random.default_rng(1).standard_normal(6))
        assert np.abs(gen(z).data).max() < 1.0

    def test_deterministic(self):
        gen, _ = small_nets(2)
        z = Tensor(np.random.default_rng(2).standard_normal(6))
        with no_grad():
            a = gen(z).data
            b = gen(z).data
        assert np.array_equal(a, b)

    def test_wrong_latent_dim_rejected(self):
        gen, _ = small_nets(3)
        with pytest.raises(ShapeError):
            gen(Tensor(np.zeros(7)))

    @pytest.mark.parametrize("seed", range(3))
    def test_dz_gradient_spot_check(self, seed):
        gen, _ = small_nets(seed, latent=4, base=8, stages=1, channels=1)
        z = Tensor(np.random.default_rng(seed + 50).standard_normal(4), requires_grad=True)
        w = Tensor(np.random.default_rng(seed + 60).normal(size=(1, 8, 8)))

        def loss():
            return (gen(z) * w).sum()

        gradcheck(loss, [z], n_coords=4)


class TestCritic:
    def test_scalar_per_sample(self):
        _, critic = small_nets(0)
        imgs = Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 3, 16, 16)))
        out = critic(imgs)
        assert out.shape == (4,)
        assert np.isfinite(out.data).all()

    def test_single_image_scalar(self):
        _, critic = small_nets(0)
        img = Tensor(np.random.default_rng(1).uniform(-1, 1, (3, 16, 16)))
        assert critic(img).shape == ()

    def test_zero_image_zero_head_scores_zero(self):
        _, critic = small_nets(1)
        critic.head.w.data[...] = 0.0
        critic.head.b.data[...] = 0.0
        out = critic(Tensor(np.zeros((2, 3, 16, 16))))
        assert np.array_equal(out.data, np.zeros(2))

    def test_batch_permutation_equivariance_exact(self):
        _, critic = small_nets(2)
        imgs = np.random.default_rng(3).uniform(-1, 1, (6, 3, 16, 16))
        perm = [4, 0, 5, 2, 1, 3]
        a = critic(Tensor(imgs)).data
        b = critic(Tensor(imgs[perm])).data
        assert np.array_equal(b, a[perm])

    def test_sample_score_independent_of_other_samples(self):
        _, critic = small_nets(2)
        imgs = np.random.default_rng(4).uniform(-1, 1, (3, 3, 16, 16))
        base = critic(Tensor(imgs)).data[0]
        imgs2 = imgs.copy()
        imgs2[1:] = 0.123
        assert critic(Tensor(imgs2)).data[0] == base

    @pytest.mark.parametrize("seed", range(3))
    def test_dinput_gradient_spot_check(self, seed):
        _, critic = small_nets(seed, latent=4, base=8, stages=1, channels=1, critic_base=4)
        img = Tensor(np.random.default_rng(seed + 9).uniform(-0.8, 0.8, (1, 1, 8, 8)),
                     requires_grad=True)

        def loss():
            return critic(img).sum()

        gradcheck(loss, [img], n_coords=6)


class TestInit:
    def test_same_seed_identical(self):
        g1, c1 = init_params(7, base_channels=32, critic_base_channels=8)
        g2, c2 = init_params(7, base_channels=32, critic_base_channels=8)
        assert np.array_equal(param_vector(g1.params()), param_vector(g2.params()))
        assert np.array_equal(param_vector(c1.params()), param_vector(c2.params()))

    def test_different_seed_differs(self):
        g1, _ = init_params(7, base_channels=32)
        g2, _ = init_params(8, base_channels=32)
        assert not np.array_equal(param_vector(g1.params()), param_vector(g2.params()))

    def test_conv_weight_variance_matches_scheme(self):
        # fan-in scaled uniform: variance 1/fan_in, checked within 10%
        gen, critic = init_params(0, base_channels=64)
        checked = 0
        for params in (gen.params(), critic.params()):
            for name, p in params.items():
                if not name.endswith(".w") or p.ndim != 4 or p.size < 5000:
                    continue
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                ratio = p.data.var() * fan_in
                assert abs(ratio - 1.0) < 0.1, f"{name}: variance ratio {ratio:.3f}"
                checked += 1
        assert checked >= 4

    def test_biases_zero_gains_one(self):
        gen, _ = init_params(1, base_channels=16)
        params = gen.params()
        assert np.array_equal(params["proj.b"].data, np.zeros_like(params["proj.b"].data))
        assert np.array_equal(params["block0.ln1.g"].data,
                              np.ones_like(params["block0.ln1.g"].data))


class TestCheckpointRebuild:
    def test_build_from_checkpoint_round_trip(self):
        gen, critic = small_nets(11, latent=5, base=8, stages=1, channels=1, critic_base=4)
        ckpt = Checkpoint(
            iteration=0,
            gen_params={k: p.data.copy() for k, p in gen.params().items()},
            critic_params={k: p.data.copy() for k, p in critic.params().items()},
        )
        gen2, critic2 = build_from_checkpoint(ckpt)
        assert gen2.latent_dim == 5 and gen2.image_size == 8
        z = Tensor(np.random.default_rng(0).standard_normal(5))
        with no_grad():
            assert np.array_equal(gen(z).data, gen2(z).data)
            img = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 8, 8)))
            assert np.array_equal(critic(img).data, critic2(img).data)

    def test_restore_params_validates(self):
        gen, _ = small_nets(0, latent=4, base=8, stages=1, channels=1)
        good = {k: p.data.copy() for k, p in gen.params().items()}
        bad = dict(good)
        bad.pop("proj.w")
        from latent_inpaint.errors import CheckpointError

        with pytest.raises(CheckpointError):
            restore_params(gen, bad, "generator")
        bad2 = dict(good)
        bad2["proj.w"] = np.zeros((1, 1))
        with pytest.raises(CheckpointError):
            restore_params(gen, bad2, "generator")
