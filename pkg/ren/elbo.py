"""
Five-term ELBOs for relevance encoding networks.

    total = recon - neg_entropy_q_z - neg_entropy_q_alpha + prior_z + prior_alpha

All terms are per-datum averages over the batch: the z-terms average over rows,
and the global α terms are divided by the batch size. One z is drawn per row and
one α per batch; z is drawn before α from the same generator.
"""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ren import autodiff as ad
from ren.autodiff import Tensor
from ren.distributions import (DiagGaussian, GammaParams, gamma_implicit_rsample, gamma_log_prob,
                               gaussian_entropy, gaussian_log_prob, gaussian_rsample,
                               latent_prior_log_prob)
from ren.flows import flow_prior_log_prob
from ren.networks import RenModel
from ren.utils import ConfigError, DomainError, ren_error

TERMS = ("recon", "neg_entropy_q_z", "neg_entropy_q_alpha", "prior_z", "prior_alpha")


@dataclass
class ElboBreakdown:
    recon: Tensor
    neg_entropy_q_z: Tensor
    neg_entropy_q_alpha: Tensor
    prior_z: Tensor
    prior_alpha: Tensor
    total: Tensor
    q_alpha: Optional[GammaParams] = None
    alpha: Optional[Tensor] = None

    @classmethod
    def assemble(cls, recon, neg_entropy_q_z, neg_entropy_q_alpha, prior_z, prior_alpha, **extra):
        total = recon - neg_entropy_q_z - neg_entropy_q_alpha + prior_z + prior_alpha
        return cls(recon, neg_entropy_q_z, neg_entropy_q_alpha, prior_z, prior_alpha, total, **extra)

    def as_floats(self) -> Dict[str, float]:
        out = {name: getattr(self, name).item() for name in TERMS}
        out["total"] = self.total.item()
        return out


def _prior_z(model: RenModel, z: Tensor, alpha: Tensor, use_flow: bool) -> Tensor:
    if not use_flow:
        return latent_prior_log_prob(z, alpha)
    if model.config.alpha_scaled_flow:
        scaled = z * ad.exp(0.5 * ad.log(alpha))
        return flow_prior_log_prob(scaled, model.flow) + 0.5 * ad.log(alpha).sum()
    return flow_prior_log_prob(z, model.flow)


def _elbo(model: RenModel, X, rng: np.random.Generator, use_flow: bool, with_relevance: bool,
          closed_form_entropy: bool = False) -> ElboBreakdown:
    X = ad.as_tensor(X)
    n = X.shape[0]
    q = model.encode(X)
    z = gaussian_rsample(q, rng)
    mu_x, log_sigma_dec = model.decode(z)
    recon = gaussian_log_prob(X, DiagGaussian(mu_x, log_sigma_dec)).mean()
    if closed_form_entropy:
        neg_entropy_q_z = -gaussian_entropy(q).mean()
    else:
        neg_entropy_q_z = gaussian_log_prob(z, q).mean()

    if with_relevance:
        q_alpha = model.infer_relevance(X, z)
        alpha = gamma_implicit_rsample(q_alpha, rng)
        prior_alpha = gamma_log_prob(alpha, model.prior) * (1.0 / n)
        neg_entropy_q_alpha = gamma_log_prob(alpha, q_alpha) * (1.0 / n)
    else:
        q_alpha = None
        alpha = Tensor(model.current_alpha)
        prior_alpha = Tensor(0.0)
        neg_entropy_q_alpha = Tensor(0.0)

    prior_z = _prior_z(model, z, alpha, use_flow).mean()
    return ElboBreakdown.assemble(recon, neg_entropy_q_z, neg_entropy_q_alpha, prior_z, prior_alpha,
                                  q_alpha=q_alpha, alpha=alpha)


def _need_set(X, minimum: int):
    n = ad.as_tensor(X).shape[0]
    if n < minimum:
        raise ren_error(DomainError, f"ELBO needs a batch of at least {minimum} rows, got {n}")


def elbo_ren_vae(model: RenModel, X, rng: np.random.Generator, closed_form_entropy: bool = False) -> ElboBreakdown:
    _need_set(X, 2)
    return _elbo(model, X, rng, use_flow=False, with_relevance=True, closed_form_entropy=closed_form_entropy)


def elbo_ren_dpvae(model: RenModel, X, rng: np.random.Generator, closed_form_entropy: bool = False) -> ElboBreakdown:
    if model.flow is None:
        raise ren_error(ConfigError, "elbo_ren_dpvae needs a model with a flow prior")
    _need_set(X, 2)
    return _elbo(model, X, rng, use_flow=True, with_relevance=True, closed_form_entropy=closed_form_entropy)


def elbo_plain(model: RenModel, X, rng: np.random.Generator, variant: Optional[str] = None,
               closed_form_entropy: bool = False) -> ElboBreakdown:
    """VAE / dpVAE objective with α held at `model.current_alpha` and no hyperposterior terms."""
    variant = variant or model.variant
    if variant == "dpvae" and model.flow is None:
        raise ren_error(ConfigError, "dpvae objective needs a model with a flow prior")
    _need_set(X, 1)
    return _elbo(model, X, rng, use_flow=variant == "dpvae", with_relevance=False,
                 closed_form_entropy=closed_form_entropy)


def elbo_ren(model: RenModel, X, rng: np.random.Generator) -> ElboBreakdown:
    """The relevance ELBO matching the model's variant."""
    if model.flow is not None:
        return elbo_ren_dpvae(model, X, rng)
    return elbo_ren_vae(model, X, rng)
