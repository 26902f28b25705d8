"""Full-length toy runs with the default schedule. Each takes minutes; run with `pytest -m slow`."""
import functools

import numpy as np
import pytest

from ren.datasets import load_dataset
from ren.metrics import empirical_latent_variances, recon_mse, relevance_report, sample_latents
from ren.models import DatasetConfig, ModelConfig
from ren.networks import build_model
from ren.trainer import default_config, train

SEED = 42
WALL_BUDGET_SECONDS = 15 * 60

pytestmark = pytest.mark.slow


@functools.lru_cache(maxsize=None)
def relevance_run(family, noise, latent_dim=2):
    X_train, X_test = load_dataset(DatasetConfig(name=family, noise_frac=noise), SEED)
    model = build_model(family, ModelConfig(latent_dim=latent_dim), SEED)
    log = train(model, X_train, default_config(family))
    return model, log, X_train, X_test


@pytest.mark.parametrize("family, noise, threshold", [
    ("one_moon", 0.10, 0.75),
    ("circle", 0.10, 0.75),
    ("one_moon", 0.05, 0.70),
    ("one_moon", 0.01, 0.70),
])
def test_toy_relevance_recovery(family, noise, threshold):
    model, log, X_train, _ = relevance_run(family, noise)
    assert len(log) == default_config(family).epochs
    report = relevance_report(model.current_alpha)
    assert report.explained_ratio[0] >= threshold
    # encoder-mean spread follows the prior variances 1/α
    variances = empirical_latent_variances(model, X_train)
    np.testing.assert_array_equal(np.argsort(variances), np.argsort(1.0 / model.current_alpha))


def test_one_moon_run_fits_the_wall_budget():
    _, log, _, _ = relevance_run("one_moon", 0.10)
    assert sum(r.seconds for r in log.records) < WALL_BUDGET_SECONDS


def test_one_moon_reconstruction_near_the_noise_floor():
    model, _, _, X_test = relevance_run("one_moon", 0.10)
    noise_floor = 0.10 ** 2
    assert recon_mse(model, X_test) <= 2.0 * noise_floor


def test_generated_latents_spread_follows_inverse_alpha():
    model, _, _, _ = relevance_run("one_moon", 0.10)
    z = sample_latents(model, 4096, np.random.default_rng(SEED))
    spread = z.var(axis=0)
    assert spread[np.argmin(model.current_alpha)] > spread[np.argmax(model.current_alpha)]


def test_spurious_dimensions_are_suppressed():
    model, _, _, _ = relevance_run("one_moon", 0.10, latent_dim=4)
    report = relevance_report(model.current_alpha)
    assert report.l_star <= 2
    assert sum(report.explained_ratio[2:]) < 0.10
