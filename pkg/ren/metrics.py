"""
Evaluation: reconstruction error, relevance ranking and a classifier-free
generation distance.
"""
from typing import Optional

import numpy as np

from ren import autodiff as ad
from ren.flows import flow_inverse
from ren.logger import get_logger
from ren.models import RelevanceReport
from ren.networks import RenModel
from ren.utils import DomainError, ShapeError, ren_error

logger = get_logger()

EXPLAINED_TARGET = 0.95
PAIR_CHUNK_ELEMENTS = 1 << 22


def relevance_report(alpha: np.ndarray, variances: Optional[np.ndarray] = None) -> RelevanceReport:
    """Rank latent dimensions by variance (1/α unless given) and find the fewest covering 95%."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size == 0 or not np.all(alpha > 0):
        raise ren_error(DomainError, f"relevance needs a non-empty positive α, got {alpha.tolist()}")
    variances = 1.0 / alpha if variances is None else np.asarray(variances, dtype=np.float64).reshape(-1)
    if variances.shape != alpha.shape:
        raise ren_error(ShapeError, f"variances {variances.shape} do not match α {alpha.shape}",
                        shapes=(variances.shape, alpha.shape))

    order = np.argsort(-variances, kind="stable")
    ranked = variances[order]
    ratio = ranked / ranked.sum()
    cumulative = np.cumsum(ratio)
    cumulative[-1] = 1.0
    l_star = int(np.argmax(cumulative >= EXPLAINED_TARGET - 1e-12)) + 1
    return RelevanceReport(
        alpha=alpha.tolist(),
        variances=ranked.tolist(),
        explained_ratio=ratio.tolist(),
        cumulative=cumulative.tolist(),
        order=order.tolist(),
        l_star=l_star,
    )


def recon_mse(model: RenModel, X: np.ndarray) -> float:
    """Mean over rows and dimensions of (x - decode(encoder mean))²."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.data_dim:
        raise ren_error(ShapeError, f"recon_mse: model expects D={model.data_dim}, found data of shape {X.shape}",
                        shapes=(X.shape, (model.data_dim,)))
    with ad.no_grad():
        mu_x, _ = model.decode(model.encode(X).mu)
    return float(np.mean((X - mu_x.data) ** 2))


def _mean_pairwise(A: np.ndarray, B: np.ndarray, exclude_diagonal: bool = False) -> float:
    rows = max(1, PAIR_CHUNK_ELEMENTS // max(1, B.shape[0] * B.shape[1]))
    total = 0.0
    for start in range(0, A.shape[0], rows):
        diff = A[start:start + rows, None, :] - B[None, :, :]
        total += float(np.sqrt(np.sum(diff * diff, axis=-1)).sum())
    pairs = A.shape[0] * B.shape[0]
    if exclude_diagonal:
        pairs -= A.shape[0]
    return total / pairs


def energy_distance(A: np.ndarray, B: np.ndarray, unbiased: bool = False) -> float:
    """2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖ over all pairs.

    The default V-statistic is exactly zero for identical sets; `unbiased`
    drops the self-pairs from the within-set means and can go slightly negative.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[1] != B.shape[1]:
        raise ren_error(ShapeError, f"energy_distance: sample widths differ, {A.shape} vs {B.shape}",
                        shapes=(A.shape, B.shape))
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ren_error(DomainError, f"energy_distance needs at least 2 samples per set, got {A.shape[0]} and {B.shape[0]}")
    # canonical argument order makes d(A, B) and d(B, A) the same computation
    if (A.shape, A.tobytes()) > (B.shape, B.tobytes()):
        A, B = B, A
    cross = _mean_pairwise(A, B)
    within_a = _mean_pairwise(A, A, exclude_diagonal=unbiased)
    within_b = _mean_pairwise(B, B, exclude_diagonal=unbiased)
    value = 2.0 * cross - within_a - within_b
    return value if unbiased else max(value, 0.0)


def sample_latents(model: RenModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the model's latent prior: the inverted flow for dpvae, N(0, α⁻¹ I) for vae."""
    if n < 0:
        raise ren_error(DomainError, f"cannot draw {n} samples")
    alpha = np.asarray(model.current_alpha, dtype=np.float64)
    z0 = rng.standard_normal((n, model.latent_dim))
    if model.flow is None:
        return z0 / np.sqrt(alpha)
    if n == 0:
        return z0
    with ad.no_grad():
        z = flow_inverse(z0, model.flow).data
    if model.config.alpha_scaled_flow:
        z = z / np.sqrt(alpha)
    return z


def generate(model: RenModel, n: int, rng: np.random.Generator) -> np.ndarray:
    z = sample_latents(model, n, rng)
    if n == 0:
        return np.empty((0, model.data_dim))
    with ad.no_grad():
        mu_x, _ = model.decode(z)
    return mu_x.data


def empirical_latent_variances(model: RenModel, X: np.ndarray) -> np.ndarray:
    """Per-axis variance of the encoder means over a data set (aggregate-posterior spread)."""
    with ad.no_grad():
        mu = model.encode(np.asarray(X, dtype=np.float64)).mu.data
    variances = mu.var(axis=0)
    logger.info(f"Empirical latent variances over {mu.shape[0]} rows: {np.round(variances, 6).tolist()}")
    return variances
