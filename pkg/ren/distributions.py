"""
Gaussian and Gamma pieces of the relevance ELBOs.

Every log-density reduces the last axis, so a batch of N rows gives N values and
a single vector gives a 0-d tensor. Gamma distributions use the rate
convention throughout: mean a/b, so a precision with prior Γ(a, b) has mean a/b.
"""
import math
from dataclasses import dataclass

import numpy as np

from ren import autodiff as ad
from ren import special
from ren.autodiff import Tensor
from ren.utils import DomainError, ShapeError, ren_error

LOG_2PI = math.log(2.0 * math.pi)
LOG_2PIE = math.log(2.0 * math.pi * math.e)


@dataclass
class DiagGaussian:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return ad.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class GammaParams:
    concentration: Tensor
    rate: Tensor

    def mean(self) -> np.ndarray:
        return self.concentration.data / self.rate.data

    def detach(self) -> "GammaParams":
        return GammaParams(self.concentration.detach(), self.rate.detach())

    @classmethod
    def constant(cls, concentration: float, rate: float, dim: int) -> "GammaParams":
        return cls(Tensor(np.full(dim, concentration)), Tensor(np.full(dim, rate)))


def _check_last_dim(op: str, x: Tensor, expected: int):
    if x.ndim == 0 or x.shape[-1] != expected:
        raise ren_error(ShapeError, f"{op}: expected last dimension {expected}, got shape {x.shape}",
                        shapes=(x.shape, (expected,)))


def _check_positive(op: str, name: str, t: Tensor):
    if np.any(t.data <= 0) or not np.all(np.isfinite(t.data)):
        raise ren_error(DomainError, f"{op}: {name} must be finite and strictly positive", op=op)


def gaussian_log_prob(x, d: DiagGaussian) -> Tensor:
    x = ad.as_tensor(x)
    _check_last_dim("gaussian_log_prob", x, d.dim)
    resid = (x - d.mu) * ad.exp(-d.log_sigma)
    return (-0.5 * LOG_2PI - d.log_sigma - 0.5 * ad.square(resid)).sum(axis=-1)


def gaussian_rsample(d: DiagGaussian, rng: np.random.Generator) -> Tensor:
    """z = μ + σ ⊙ ε with ε ~ N(0, I); differentiable in μ and log σ."""
    eps = rng.standard_normal(d.mu.shape)
    return d.mu + ad.exp(d.log_sigma) * eps


def gaussian_entropy(d: DiagGaussian) -> Tensor:
    return (0.5 * LOG_2PIE + d.log_sigma).sum(axis=-1)


def gaussian_kl_standard(d: DiagGaussian) -> Tensor:
    """Closed-form KL(N(μ, σ²) ‖ N(0, I))."""
    return 0.5 * (ad.square(d.mu) + ad.exp(2.0 * d.log_sigma) - 1.0 - 2.0 * d.log_sigma).sum(axis=-1)


def standard_normal_log_prob(z) -> Tensor:
    z = ad.as_tensor(z)
    return (-0.5 * LOG_2PI - 0.5 * ad.square(z)).sum(axis=-1)


def latent_prior_log_prob(z, alpha) -> Tensor:
    """log N(z; 0, α⁻¹ I)."""
    z, alpha = ad.as_tensor(z), ad.as_tensor(alpha)
    _check_last_dim("latent_prior_log_prob", z, alpha.shape[-1])
    _check_positive("latent_prior_log_prob", "alpha", alpha)
    return (-0.5 * LOG_2PI + 0.5 * ad.log(alpha) - 0.5 * alpha * ad.square(z)).sum(axis=-1)


def gamma_log_prob(alpha, g: GammaParams) -> Tensor:
    alpha = ad.as_tensor(alpha)
    _check_last_dim("gamma_log_prob", alpha, g.concentration.shape[-1])
    _check_positive("gamma_log_prob", "alpha", alpha)
    _check_positive("gamma_log_prob", "concentration", g.concentration)
    _check_positive("gamma_log_prob", "rate", g.rate)
    a, b = g.concentration, g.rate
    return (a * ad.log(b) - ad.lgamma(a) + (a - 1.0) * ad.log(alpha) - b * alpha).sum(axis=-1)


def shape_cdf_derivative(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """∂P(a, x)/∂a by central differences, step 1e-4·max(1, a) (halved near a = 0)."""
    h = np.minimum(1e-4 * np.maximum(1.0, a), 0.5 * a)
    return (special.gammainc(a + h, x) - special.gammainc(a - h, x)) / (2.0 * h)


def gamma_implicit_rsample(g: GammaParams, rng: np.random.Generator) -> Tensor:
    """Draw α ~ Γ(a, b) with implicit reparameterization gradients.

    With s ~ Γ(a, 1) and α = s / b, differentiating F(α; a, b) = P(a, bα) = u at
    fixed u gives ∂α/∂a = -(∂P/∂a)(a, s) / (b p(s; a)) and ∂α/∂b = -α / b.
    """
    a, b = g.concentration, g.rate
    _check_positive("gamma_implicit_rsample", "concentration", a)
    _check_positive("gamma_implicit_rsample", "rate", b)
    a_data = np.broadcast_to(a.data, np.broadcast_shapes(a.shape, b.shape)).copy()
    b_data = np.broadcast_to(b.data, a_data.shape).copy()
    s = special.sample_gamma_unit(a_data, rng)
    alpha = np.maximum(np.exp(np.log(s) - np.log(b_data)), special.TINY)

    def vjp(grad):
        # p(s; a) itself overflows for tiny s when a < 1
        log_pdf = special.gamma_log_pdf_unit(a_data, s)
        dp_da = shape_cdf_derivative(a_data, s)
        dalpha_da = -dp_da * np.exp(np.minimum(-log_pdf, 700.0)) / b_data
        dalpha_db = -alpha / b_data
        return (ad.unbroadcast(grad * dalpha_da, a.shape),
                ad.unbroadcast(grad * dalpha_db, b.shape))

    return ad.custom(alpha, (a, b), vjp, "gamma_implicit_rsample")
