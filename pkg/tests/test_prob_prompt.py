import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import grad_rel_error, projected
from ppap.errors import InvalidArgument, InvalidState
from ppap.prob_prompt import (SIGMA_FLOOR, PromptDistribution, TextDecoder, VisualTextDecoder,
                              decode_means, decode_variances, diversity_loss, kl_to_standard_normal,
                              normalized_gram, prompt_loss, sample_prompts)


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestDiversityLoss:
    def test_orthonormal_rows_give_zero(self):
        agn = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]])
        assert float(diversity_loss(agn)) == 0.0

    def test_identical_rows_give_two(self):
        row = torch.tensor([0.6, 0.8])
        assert float(diversity_loss(torch.stack([row, row])[None])) == pytest.approx(2.0, abs=1e-12)

    def test_single_attribute_is_zero(self):
        assert float(diversity_loss(_randn(4, 1, 5))) == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_row_raises(self):
        with pytest.raises(InvalidState):
            diversity_loss(torch.zeros(1, 2, 3))

    def test_duplicated_keypoint_contributes_two_over_k(self):
        k = 4
        agn = torch.eye(3, dtype=torch.float64)[:2].repeat(k, 1, 1)
        agn[1, 1] = agn[1, 0]
        assert float(diversity_loss(agn)) == pytest.approx(2.0 / k, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 8), st.integers(0, 10_000))
    def test_non_negative_and_zero_iff_identity_gram(self, k, n_p, c, seed):
        agn = _randn(k, n_p, c, seed=seed)
        val = float(diversity_loss(agn))
        assert val >= 0
        gram = normalized_gram(agn)
        is_eye = torch.allclose(gram, torch.eye(n_p, dtype=gram.dtype).expand_as(gram), atol=1e-9)
        assert (val < 1e-12) == is_eye

    def test_gradient(self):
        agn = _randn(3, 3, 8, seed=1)
        assert grad_rel_error(diversity_loss, agn) < 1e-4


class TestDecoders:
    def test_mean_shape_and_single_attribute(self):
        dec = TextDecoder(8).double()
        assert decode_means(_randn(3, 2, 8), dec).shape == (3, 2, 8)
        out = decode_means(_randn(3, 1, 8), dec)
        assert out.shape == (3, 1, 8) and torch.isfinite(out).all()

    def test_mean_permutation_equivariant(self):
        dec = TextDecoder(8).double()
        p = _randn(2, 3, 8)
        perm = torch.tensor([2, 0, 1])
        assert torch.allclose(decode_means(p[:, perm], dec), decode_means(p, dec)[:, perm], atol=1e-12)

    def test_mean_attention_stays_within_keypoint(self):
        dec = TextDecoder(8).double()
        p = _randn(2, 2, 8)
        q = p.clone()
        q[1] += 1.0
        assert torch.allclose(decode_means(p, dec)[0], decode_means(q, dec)[0], atol=1e-12)

    def test_mean_gradient(self):
        torch.manual_seed(0)
        dec = TextDecoder(8).double()
        assert grad_rel_error(projected(lambda x: decode_means(x, dec)), _randn(3, 3, 8)) < 1e-4

    def test_variance_floor_and_shape(self):
        torch.manual_seed(0)
        dec = VisualTextDecoder(8).double()
        with torch.no_grad():
            dec.mlp[2].bias.fill_(-50.0)  # drive softplus toward 0
        sigma = decode_variances(_randn(3, 2, 8), _randn(4, 36, 8), dec)
        assert sigma.shape == (4, 3, 2, 8)
        assert float(sigma.detach().min()) >= SIGMA_FLOOR

    def test_variance_depends_on_image(self):
        torch.manual_seed(0)
        dec = VisualTextDecoder(8).double()
        p = _randn(3, 2, 8)
        assert not torch.allclose(decode_variances(p, _randn(36, 8, seed=1), dec),
                                  decode_variances(p, _randn(36, 8, seed=2), dec))

    def test_variance_gradient_wrt_visual_tokens(self):
        torch.manual_seed(0)
        dec = VisualTextDecoder(8).double()
        p = _randn(2, 3, 8)
        f = projected(lambda v: decode_variances(p, v, dec))
        assert grad_rel_error(f, _randn(36, 8, seed=3)) < 1e-4

    def test_variance_gradient_wrt_prompts(self):
        torch.manual_seed(0)
        dec = VisualTextDecoder(8).double()
        v = _randn(16, 8, seed=4)
        assert grad_rel_error(projected(lambda p: decode_variances(p, v, dec)), _randn(3, 2, 8)) < 1e-4


class TestSampling:
    def test_zero_noise_returns_mean(self):
        mu, sigma = _randn(2, 2, 4), _randn(2, 2, 4, seed=1).abs() + 0.1
        out = sample_prompts(PromptDistribution(mu, sigma), 3, noise=torch.zeros(3, 2, 2, 4, dtype=torch.float64))
        assert torch.equal(out.z, mu.expand(3, 2, 2, 4))

    def test_reparameterization_identity(self):
        mu, sigma = _randn(2, 2, 4), _randn(5, 2, 2, 4, seed=1).abs() + 0.1
        gen = torch.Generator().manual_seed(7)
        out = sample_prompts(PromptDistribution(mu, sigma), 3, generator=gen)
        assert out.z.shape == (5, 3, 2, 2, 4)
        assert torch.equal(out.z, mu + out.noise * sigma.unsqueeze(-4))
        assert torch.allclose(out.z - mu, out.noise * sigma.unsqueeze(-4), rtol=0, atol=1e-15)
        again = sample_prompts(PromptDistribution(mu, sigma), 3, generator=torch.Generator().manual_seed(7))
        assert torch.equal(again.z, out.z)

    def test_gradient_coefficients(self):
        mu = _randn(1, 1, 3).requires_grad_(True)
        sigma = (_randn(1, 1, 3, seed=1).abs() + 0.5).requires_grad_(True)
        out = sample_prompts(PromptDistribution(mu, sigma), 1, generator=torch.Generator().manual_seed(0))
        out.z.sum().backward()
        assert torch.equal(mu.grad, torch.ones_like(mu))
        assert torch.allclose(sigma.grad, out.noise[0])

    def test_monte_carlo_moments_at_floor(self):
        mu = _randn(1, 2, 3)
        sigma = torch.full((1, 2, 3), SIGMA_FLOOR, dtype=torch.float64)
        n = 100_000
        z = sample_prompts(PromptDistribution(mu, sigma), n, generator=torch.Generator().manual_seed(0)).z
        std = z.std(dim=0)
        assert torch.all((std / SIGMA_FLOOR - 1).abs() < 0.05)
        assert torch.all((z.mean(dim=0) - mu).abs() < 4 * SIGMA_FLOOR / math.sqrt(n))

    def test_requires_positive_count(self):
        with pytest.raises(InvalidArgument):
            sample_prompts(PromptDistribution(torch.zeros(1, 1, 1), torch.ones(1, 1, 1)), 0)


class TestKL:
    def test_prior_is_zero(self):
        kl = kl_to_standard_normal(PromptDistribution(torch.zeros(2, 3, 4), torch.ones(2, 3, 4)))
        assert kl.shape == (2, 3)
        assert torch.equal(kl, torch.zeros(2, 3))

    def test_unit_shift(self):
        kl = kl_to_standard_normal(PromptDistribution(torch.ones(1, 1, 1), torch.ones(1, 1, 1)))
        assert float(kl) == 0.5

    def test_non_positive_sigma_raises(self):
        with pytest.raises(InvalidArgument):
            kl_to_standard_normal(PromptDistribution(torch.zeros(1, 1, 2), torch.tensor([[[1.0, 0.0]]])))

    def test_matches_monte_carlo(self):
        mu = torch.tensor([0.3, -0.7, 1.1], dtype=torch.float64)
        sigma = torch.tensor([0.5, 1.4, 0.8], dtype=torch.float64)
        closed = float(kl_to_standard_normal(PromptDistribution(mu[None, None], sigma[None, None])))
        z = mu + sigma * torch.randn(1_000_000, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        log_q = (-0.5 * ((z - mu) / sigma) ** 2 - torch.log(sigma)).sum(-1)
        log_p = (-0.5 * z**2).sum(-1)
        mc = float((log_q - log_p).mean())
        assert abs(mc - closed) / closed < 0.01

    def test_gradient_and_sigma_direction(self):
        mu = _randn(2, 2, 3)
        sigma = _randn(2, 2, 3, seed=1).abs() + 0.05

        def f(s):
            return kl_to_standard_normal(PromptDistribution(mu, s)).sum()

        s = sigma.clone().requires_grad_(True)
        f(s).backward()
        assert torch.allclose(s.grad, sigma - 1 / sigma, rtol=0, atol=1e-12)
        assert torch.all(s.grad[sigma < 1] < 0)
        assert grad_rel_error(f, sigma) < 1e-4
        assert grad_rel_error(lambda m: kl_to_standard_normal(PromptDistribution(m, sigma)).sum(), mu) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.floats(0.05, 4.0))
    def test_non_negative(self, mus, s):
        mu = torch.tensor(mus, dtype=torch.float64)[None, None]
        kl = float(kl_to_standard_normal(PromptDistribution(mu, torch.full_like(mu, s))))
        assert kl >= -1e-12
        if kl < 1e-9:
            assert np.allclose(mus, 0, atol=1e-4) and abs(s - 1) < 1e-4


class TestPromptLoss:
    def test_vanishes_at_fixed_point(self):
        agn = torch.eye(2)[None]
        dist = PromptDistribution(torch.zeros(1, 2, 2), torch.ones(1, 2, 2))
        assert float(prompt_loss(agn, dist)) == 0.0

    def test_doubling_mean_increases(self):
        agn = _randn(3, 2, 4)
        mu, sigma = _randn(3, 2, 4, seed=1), _randn(3, 2, 4, seed=2).abs() + 0.1
        assert float(prompt_loss(agn, PromptDistribution(2 * mu, sigma))) > float(
            prompt_loss(agn, PromptDistribution(mu, sigma)))

    def test_is_sum_of_parts(self):
        agn = _randn(3, 2, 4)
        dist = PromptDistribution(_randn(3, 2, 4, seed=1), _randn(5, 3, 2, 4, seed=2).abs() + 0.1)
        kl = kl_to_standard_normal(dist)  # (5, 3, 2)
        expected = diversity_loss(agn) + kl.sum(-1).mean() / 2
        assert torch.allclose(prompt_loss(agn, dist), expected, atol=1e-12)

    def test_toggles(self):
        agn = _randn(3, 2, 4)
        dist = PromptDistribution(_randn(3, 2, 4, seed=1), _randn(3, 2, 4, seed=2).abs() + 0.1)
        assert float(prompt_loss(agn, dist, use_div=False, use_kl=False)) == 0.0
        assert torch.allclose(prompt_loss(agn, dist, use_kl=False), diversity_loss(agn))
