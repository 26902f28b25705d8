import numpy as np
import pytest
from pydantic import ValidationError

import ren.trainer as trainer
from conftest import TINY
from ren import autodiff as ad
from ren.datasets import gen_toy
from ren.models import EpochRecord, ModelConfig, ToySpec, TrainConfig
from ren.networks import build_model
from ren.trainer import default_config, train
from ren.utils import ConfigError, DomainError, NonFiniteError


def schedule(**overrides):
    settings = dict(epochs=3, burnin=2, lr_vae=1e-3, lr_ren=1e-5, r=4, batch_size=16, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture
def data():
    return gen_toy(ToySpec(family="one_moon", n=64, seed=2))


def counting(monkeypatch, name):
    calls = []
    original = getattr(trainer, name)

    def wrapper(model, X, rng, *args, **kwargs):
        calls.append(np.asarray(X).shape[0])
        return original(model, X, rng, *args, **kwargs)

    monkeypatch.setattr(trainer, name, wrapper)
    return calls


@pytest.mark.parametrize("family, batch_size, epochs", [
    ("one_moon", 128, 1500), ("circle", 128, 1500), ("mnist", 100, 100),
    ("fashion_mnist", 100, 100), ("dsprites", 128, 100),
])
def test_default_config(family, batch_size, epochs):
    cfg = default_config(family)
    assert (cfg.batch_size, cfg.epochs, cfg.r, cfg.seed) == (batch_size, epochs, 4, 42)
    assert cfg.lr_vae == 1e-3 and cfg.lr_ren == 1e-5
    assert cfg.burnin == epochs // 10


def test_default_config_unknown_family():
    with pytest.raises(ConfigError):
        default_config("cifar")


def test_schedule_validation():
    with pytest.raises(ValidationError, match="burnin"):
        schedule(burnin=3)
    with pytest.raises(ValidationError, match="divisible"):
        schedule(batch_size=18)


def test_relevance_phase_starts_after_burnin(tiny_model, data, monkeypatch):
    relevance_calls = counting(monkeypatch, "elbo_ren")
    log = train(tiny_model, data, schedule())
    assert relevance_calls == [16] * 4
    assert log.records[0].alpha == [1.0, 1.0] and log.records[1].alpha == [1.0, 1.0]
    assert log.records[2].alpha != [1.0, 1.0]
    assert log.records[0].prior_alpha == 0.0 and log.records[2].prior_alpha != 0.0


class StopAtRelevance(Exception):
    pass


def test_burnin_leaves_relevance_encoder_untouched(tiny_model, data, monkeypatch):
    before = {k: p.data.copy() for k, p in tiny_model.relevance_parameters().items()}

    def stop(*args, **kwargs):
        raise StopAtRelevance

    monkeypatch.setattr(trainer, "elbo_ren", stop)
    with pytest.raises(StopAtRelevance):
        train(tiny_model, data, schedule())
    for name, p in tiny_model.relevance_parameters().items():
        np.testing.assert_array_equal(p.data, before[name], err_msg=name)
        assert p.grad is None


@pytest.mark.parametrize("r, rows", [(4, 4), (2, 8), (1, 16)])
def test_sub_batch_sizes(tiny_model, data, monkeypatch, r, rows):
    plain_calls = counting(monkeypatch, "elbo_plain")
    train(tiny_model, data, schedule(epochs=2, burnin=1, r=r))
    assert plain_calls == [rows] * (2 * 4 * r)


def test_trailing_partial_batch_is_dropped(tiny_model, monkeypatch):
    plain_calls = counting(monkeypatch, "elbo_plain")
    X = gen_toy(ToySpec(family="one_moon", n=40, seed=3))
    train(tiny_model, X, schedule(epochs=2, burnin=1))
    assert len(plain_calls) == 2 * 2 * 4


def test_training_is_deterministic(data):
    def run():
        model = build_model("one_moon", ModelConfig(**TINY), seed=5)
        log = train(model, data, schedule(seed=5))
        return model, [r.model_dump(exclude={"seconds"}) for r in log.records]

    (m1, r1), (m2, r2) = run(), run()
    assert r1 == r2
    p2 = m2.named_parameters()
    for name, p in m1.named_parameters().items():
        np.testing.assert_array_equal(p.data, p2[name].data, err_msg=name)
    np.testing.assert_array_equal(m1.current_alpha, m2.current_alpha)


def test_non_finite_term_aborts_with_context(tiny_model, data, monkeypatch):
    original = trainer.elbo_plain

    def poisoned(model, X, rng, *args, **kwargs):
        breakdown = original(model, X, rng, *args, **kwargs)
        breakdown.recon = ad.Tensor(np.nan)
        return breakdown

    monkeypatch.setattr(trainer, "elbo_plain", poisoned)
    with pytest.raises(NonFiniteError) as info:
        train(tiny_model, data, schedule())
    assert info.value.context["term"] == "recon"
    assert info.value.context["epoch"] == 1


def test_too_few_rows(tiny_model, data):
    with pytest.raises(DomainError):
        train(tiny_model, data[:8], schedule())


def test_log_sink_has_one_line_per_epoch(tiny_model, data, tmp_path):
    path = tmp_path / "train_log.jsonl"
    log = train(tiny_model, data, schedule(), log_path=str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == len(log) == 3
    records = [EpochRecord.model_validate_json(line) for line in lines]
    assert [r.epoch for r in records] == [1, 2, 3]
    assert records[-1].total == log.last.total


def test_baseline_keeps_alpha_fixed(data, monkeypatch):
    relevance_calls = counting(monkeypatch, "elbo_ren")
    model = build_model("one_moon", ModelConfig(**TINY, relevance=False), seed=0)
    log = train(model, data, schedule())
    assert relevance_calls == []
    assert all(r.alpha == [1.0, 1.0] for r in log.records)


def test_to_frame(tiny_model, data):
    frame = train(tiny_model, data, schedule()).to_frame()
    assert len(frame) == 3
    assert {"epoch", "total", "recon", "alpha_0", "alpha_1"} <= set(frame.columns)
    assert "alpha" not in frame.columns


@pytest.mark.slow
def test_one_moon_run_improves_the_objective():
    X = gen_toy(ToySpec(family="one_moon", n=1024, seed=42))
    model = build_model("one_moon", ModelConfig(latent_dim=2), seed=42)
    cfg = default_config("one_moon").model_copy(update={"epochs": 200, "burnin": 20})
    log = train(model, X, cfg)
    assert log.last.total > log.records[0].total
    assert np.all(np.isfinite(model.current_alpha)) and np.all(model.current_alpha > 0)
