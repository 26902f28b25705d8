import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import TINY, make_identity
from ren import autodiff as ad
from ren import special
from ren.autodiff import Adam
from ren.datasets import gen_toy
from ren.distributions import LOG_2PI, DiagGaussian, gaussian_kl_standard, gaussian_log_prob
from ren.elbo import TERMS, elbo_plain, elbo_ren, elbo_ren_dpvae, elbo_ren_vae
from ren.layers import Linear
from ren.models import ModelConfig, ToySpec
from ren.networks import DecoderNet, EncoderNet, RelevanceEncoder, RenModel, build_model
from ren.utils import ConfigError, DomainError

VEC_LGAMMA = np.vectorize(math.lgamma)


def diag_log_prob(x, mu, log_sigma):
    return np.sum(-0.5 * LOG_2PI - log_sigma - 0.5 * ((x - mu) * np.exp(-log_sigma)) ** 2, axis=-1)


def gamma_log_density(alpha, a, b):
    return np.sum(a * np.log(b) - VEC_LGAMMA(a) + (a - 1.0) * np.log(alpha) - b * alpha)


def manual_flow_log_prob(flow, z):
    log_det = np.zeros(z.shape[0])
    for block in flow.blocks:
        kept = z * block.mask
        s = block.scale_net(ad.Tensor(kept)).data
        if block.scale_bound:
            s = block.scale_bound * np.tanh(s)
        t = block.translate_net(ad.Tensor(kept)).data
        free = 1.0 - block.mask
        z = kept + free * (z * np.exp(s) + t)
        log_det += np.sum(free * s, axis=-1)
    return np.sum(-0.5 * LOG_2PI - 0.5 * z ** 2, axis=-1) + log_det


def oracle(model, X, seed):
    """Five ELBO terms computed directly with numpy, one z per row and one α per batch."""
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    with ad.no_grad():
        q = model.encode(X)
        mu, log_sigma = q.mu.data, q.log_sigma.data
        z = mu + np.exp(log_sigma) * rng.standard_normal(mu.shape)
        mu_x = model.decode(z)[0].data
        log_sigma_dec = model.decoder.log_sigma_dec.data
        g = model.infer_relevance(X, z)
        a, b = g.concentration.data, g.rate.data
        alpha = special.sample_gamma_unit(a.copy(), rng) / b
        if model.flow is None:
            prior_z = np.sum(-0.5 * LOG_2PI + 0.5 * np.log(alpha) - 0.5 * alpha * z ** 2, axis=-1)
        else:
            prior_z = manual_flow_log_prob(model.flow, z)
    a0, b0 = model.prior.concentration.data, model.prior.rate.data
    return {
        "recon": diag_log_prob(X, mu_x, log_sigma_dec).mean(),
        "neg_entropy_q_z": diag_log_prob(z, mu, log_sigma).mean(),
        "neg_entropy_q_alpha": gamma_log_density(alpha, a, b) / n,
        "prior_z": prior_z.mean(),
        "prior_alpha": gamma_log_density(alpha, a0, b0) / n,
    }


def test_total_is_the_signed_sum_of_terms(tiny_model, toy_batch):
    terms = elbo_ren(tiny_model, toy_batch, np.random.default_rng(0)).as_floats()
    expected = (terms["recon"] - terms["neg_entropy_q_z"] - terms["neg_entropy_q_alpha"]
                + terms["prior_z"] + terms["prior_alpha"])
    assert_allclose(terms["total"], expected, rtol=1e-14)


@pytest.mark.parametrize("fixture", ["tiny_vae", "tiny_model"])
def test_terms_match_numpy_oracle(fixture, toy_batch, request):
    model = request.getfixturevalue(fixture)
    objective = elbo_ren_vae if model.flow is None else elbo_ren_dpvae
    terms = objective(model, toy_batch, np.random.default_rng(11)).as_floats()
    expected = oracle(model, toy_batch, 11)
    for name in TERMS:
        assert_allclose(terms[name], expected[name], rtol=1e-10, atol=1e-10, err_msg=name)


def test_identity_flow_dpvae_matches_vae_at_unit_alpha(tiny_model, toy_batch):
    make_identity(tiny_model.flow)
    dp = elbo_plain(tiny_model, toy_batch, np.random.default_rng(3)).as_floats()
    vae = elbo_plain(tiny_model, toy_batch, np.random.default_rng(3), variant="vae").as_floats()
    for name in ("recon", "neg_entropy_q_z", "prior_z", "total"):
        assert_allclose(dp[name], vae[name], rtol=1e-15, err_msg=name)


def test_plain_objective_has_no_hyperprior_terms(tiny_model, toy_batch):
    terms = elbo_plain(tiny_model, toy_batch, np.random.default_rng(0)).as_floats()
    assert terms["neg_entropy_q_alpha"] == 0.0 and terms["prior_alpha"] == 0.0


def test_hyperposterior_equal_to_prior_cancels(toy_batch, monkeypatch):
    model = build_model("one_moon", ModelConfig(**TINY, prior_concentration=2.0, prior_rate=1.0), seed=0)
    monkeypatch.setattr(model, "infer_relevance", lambda X, Z: model.prior)
    terms = elbo_ren(model, toy_batch, np.random.default_rng(4)).as_floats()
    assert terms["prior_alpha"] - terms["neg_entropy_q_alpha"] == 0.0


def test_relevance_objective_needs_two_rows(tiny_vae, toy_batch):
    with pytest.raises(DomainError):
        elbo_ren_vae(tiny_vae, toy_batch[:1], np.random.default_rng(0))


def test_dpvae_objective_needs_a_flow(tiny_vae, toy_batch):
    with pytest.raises(ConfigError):
        elbo_ren_dpvae(tiny_vae, toy_batch, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        elbo_plain(tiny_vae, toy_batch, np.random.default_rng(0), variant="dpvae")


def test_monte_carlo_kl_matches_closed_form(tiny_vae, toy_batch):
    x = toy_batch[:1]
    terms = elbo_plain(tiny_vae, np.tile(x, (100_000, 1)), np.random.default_rng(5)).as_floats()
    with ad.no_grad():
        exact = gaussian_kl_standard(tiny_vae.encode(x)).data[0]
    assert abs(terms["neg_entropy_q_z"] - terms["prior_z"] - exact) < 0.01


def test_closed_form_entropy_option(tiny_vae, toy_batch):
    terms = elbo_plain(tiny_vae, toy_batch, np.random.default_rng(6), closed_form_entropy=True).as_floats()
    with ad.no_grad():
        log_sigma = tiny_vae.encode(toy_batch).log_sigma.data
    expected = -np.mean(np.sum(0.5 * math.log(2 * math.pi * math.e) + log_sigma, axis=-1))
    assert_allclose(terms["neg_entropy_q_z"], expected, rtol=1e-13)


@pytest.mark.parametrize("fixture", ["tiny_vae", "tiny_model"])
def test_end_to_end_gradient_matches_finite_differences(fixture, toy_batch, monkeypatch, request):
    model = request.getfixturevalue(fixture)
    # inverse-CDF draws make α a smooth function of the shape at fixed noise
    monkeypatch.setattr(special, "sample_gamma_unit",
                        lambda a, rng: special.gammaincinv(a, rng.uniform(size=np.shape(a))))
    X = toy_batch[:4]
    ad.backward(elbo_ren(model, X, np.random.default_rng(7)).total)

    def value():
        with ad.no_grad():
            return elbo_ren(model, X, np.random.default_rng(7)).total.item()

    for name, p in model.named_parameters().items():
        assert_allclose(p.grad, ad.numerical_grad(value, p.data), rtol=1e-3, atol=1e-6, err_msg=name)


def linear_gaussian_model(weight, noise, prior):
    """x = w z + noise, z ~ N(0, 1/α), α ~ Γ(prior); the encoder is the exact posterior at α = 1."""
    rng = np.random.default_rng(0)
    config = ModelConfig(variant="vae", latent_dim=1, feature_dim=4, feature_hidden=[4],
                         prior_concentration=prior[0], prior_rate=prior[1])
    posterior_var = noise ** 2 / (weight ** 2 + noise ** 2)
    encoder_body = Linear(1, 2, rng, head=True)
    encoder_body.weight.data[...] = [[weight / (weight ** 2 + noise ** 2), 0.0]]
    encoder_body.bias.data[...] = [0.0, 0.5 * math.log(posterior_var)]
    decoder_body = Linear(1, 1, rng, head=True)
    decoder_body.weight.data[...] = weight
    decoder = DecoderNet(decoder_body, sigmoid_mean=False)
    decoder.log_sigma_dec.data[...] = math.log(noise)
    relevance = RelevanceEncoder(1, 1, rng, feature_dim=4, feature_hidden=[4])
    return RenModel("one_moon", 1, config, EncoderNet(encoder_body, 1), decoder, relevance, None)


def linear_gaussian_log_evidence(X, weight, noise, prior):
    """log p(X) = log ∫ Π_i N(x_i; 0, w²/α + s²) Γ(α; a0, b0) dα, by quadrature in log α."""
    a0, b0 = prior
    log_alpha = np.linspace(-25.0, 12.0, 400_001)
    alpha = np.exp(log_alpha)
    var = weight ** 2 / alpha + noise ** 2
    log_lik = -0.5 * (len(X) * (LOG_2PI + np.log(var)) + np.sum(X ** 2) / var)
    log_prior = a0 * math.log(b0) - math.lgamma(a0) + (a0 - 1.0) * log_alpha - b0 * alpha
    integrand = log_lik + log_prior + log_alpha
    peak = integrand.max()
    scaled = np.exp(integrand - peak)
    return peak + math.log(float(np.sum(0.5 * (scaled[1:] + scaled[:-1]) * np.diff(log_alpha))))


def test_relevance_objective_bounds_the_log_evidence():
    weight, noise, prior = 1.0, 0.5, (2.0, 1.0)
    X = np.random.default_rng(1).normal(scale=1.2, size=(8, 1))
    model = linear_gaussian_model(weight, noise, prior)
    rng = np.random.default_rng(2)
    with ad.no_grad():
        # total is per row; the bound holds for the batch sum
        totals = np.array([len(X) * elbo_ren_vae(model, X, rng).total.item() for _ in range(500)])
    log_evidence = linear_gaussian_log_evidence(X[:, 0], weight, noise, prior)
    standard_error = totals.std(ddof=1) / math.sqrt(len(totals))
    assert totals.mean() <= log_evidence + 3.0 * standard_error


def test_training_steps_raise_the_objective(tiny_vae):
    X = gen_toy(ToySpec(family="one_moon", n=64, seed=1))
    optimizer = Adam(tiny_vae.vae_parameters(), lr=1e-2)

    def score():
        with ad.no_grad():
            return elbo_plain(tiny_vae, X, np.random.default_rng(99)).total.item()

    before = score()
    rng = np.random.default_rng(8)
    for _ in range(200):
        optimizer.zero_grad()
        ad.backward(-elbo_plain(tiny_vae, X, rng).total)
        optimizer.step()
    assert score() > before


def test_decoder_scale_settles_at_the_residual_variance(tiny_vae, toy_batch):
    with ad.no_grad():
        mu_x = tiny_vae.decode(tiny_vae.encode(toy_batch).mu)[0].data
    log_sigma_dec = tiny_vae.decoder.log_sigma_dec
    optimizer = Adam({"log_sigma_dec": log_sigma_dec}, lr=2e-3)
    for _ in range(4000):
        recon = gaussian_log_prob(toy_batch, DiagGaussian(ad.Tensor(mu_x), log_sigma_dec)).mean()
        ad.backward(-recon)
        optimizer.step()
    residual = np.mean((toy_batch - mu_x) ** 2)
    assert_allclose(np.exp(2 * log_sigma_dec.item()), residual, rtol=0.01)
