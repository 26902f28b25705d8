"""
Alternating optimisation of a RenModel.

Each epoch shuffles the training rows, walks full batches (a trailing partial
batch is dropped) and, per batch:

1. splits it into `r` sub-batches and updates (log σ, φ, θ, η) on each with the
   plain ELBO at `lr_vae`, α held at `model.current_alpha`;
2. once `epoch > burnin`, runs the relevance ELBO on the whole batch with a
   fresh encoder pass, sets `current_alpha` to the posterior mean a/b and
   updates every parameter end-to-end at `lr_ren`.
"""
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from ren import autodiff as ad
from ren.autodiff import Adam
from ren.elbo import TERMS, ElboBreakdown, elbo_plain, elbo_ren
from ren.logger import get_logger
from ren.models import IMAGE_FAMILIES, TOY_FAMILIES, EpochRecord, TrainConfig
from ren.networks import RenModel
from ren.utils import ConfigError, DomainError, NonFiniteError, ren_error, rng_stream

logger = get_logger()

TOY_EPOCHS = 1500
IMAGE_EPOCHS = 100
BURNIN_FRACTION = 0.1


def default_config(family: str) -> TrainConfig:
    if family in TOY_FAMILIES:
        epochs, batch_size = TOY_EPOCHS, 128
    elif family in IMAGE_FAMILIES:
        epochs = IMAGE_EPOCHS
        batch_size = 128 if family == "dsprites" else 100
    else:
        raise ren_error(ConfigError, f"unknown dataset family: {family}")
    return TrainConfig(
        epochs=epochs,
        burnin=max(1, int(epochs * BURNIN_FRACTION)),
        lr_vae=1e-3,
        lr_ren=1e-5,
        r=4,
        batch_size=batch_size,
        seed=42,
    )


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            row = record.model_dump(exclude={"alpha"})
            row.update({f"alpha_{i}": a for i, a in enumerate(record.alpha)})
            rows.append(row)
        return pd.DataFrame(rows)


def build_optimizers(model: RenModel, cfg: TrainConfig) -> Dict[str, Adam]:
    """"vae" steps (log σ, φ, θ, η); "ren" steps everything including ψ."""
    return {
        "vae": Adam(model.vae_parameters(), cfg.lr_vae, cfg.clip_norm),
        "ren": Adam(model.named_parameters(), cfg.lr_ren, cfg.clip_norm),
    }


def _check_terms(breakdown: ElboBreakdown, epoch: int, phase: str):
    for name in TERMS + ("total",):
        value = getattr(breakdown, name)
        if not np.all(np.isfinite(value.data)):
            raise ren_error(NonFiniteError, f"non-finite {name} in {phase} step at epoch {epoch}",
                            term=name, epoch=epoch, phase=phase)


def _ascend(breakdown: ElboBreakdown, optimizer: Adam):
    optimizer.zero_grad()
    ad.backward(-breakdown.total)
    optimizer.step()


def _epoch_record(epoch: int, plain: List[Dict[str, float]], relevance: List[Dict[str, float]],
                  model: RenModel, seconds: float) -> EpochRecord:
    averages = {name: float(np.mean([b[name] for b in plain])) for name in TERMS}
    for name in ("neg_entropy_q_alpha", "prior_alpha"):
        averages[name] = float(np.mean([b[name] for b in relevance])) if relevance else 0.0
    total = (averages["recon"] - averages["neg_entropy_q_z"] - averages["neg_entropy_q_alpha"]
             + averages["prior_z"] + averages["prior_alpha"])
    return EpochRecord(
        epoch=epoch,
        total=total,
        log_sigma_dec=float(model.decoder.log_sigma_dec.item()),
        alpha=[float(a) for a in model.current_alpha],
        seconds=seconds,
        **averages,
    )


def train(model: RenModel, X: np.ndarray, cfg: TrainConfig,
          optimizers: Optional[Dict[str, Adam]] = None, log_path: Optional[str] = None) -> TrainLog:
    """Run the full schedule in place on `model`; one EpochRecord per completed epoch."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < cfg.batch_size:
        raise ren_error(DomainError, f"dataset has {n} rows, fewer than batch_size {cfg.batch_size}")
    optimizers = optimizers if optimizers is not None else build_optimizers(model, cfg)
    log_path = log_path or cfg.log_path
    relevance_on = model.config.relevance
    n_batches = n // cfg.batch_size
    log_every = max(1, cfg.epochs // 10)
    log = TrainLog()

    logger.info(f"Training {model.variant} on {n} rows: {cfg.epochs} epochs, burnin {cfg.burnin}, "
                f"{n_batches} batches of {cfg.batch_size} split {cfg.r} ways, relevance={relevance_on}")
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            order = rng_stream(cfg.seed, "shuffle", epoch).permutation(n)
            rng = rng_stream(cfg.seed, "train", epoch)
            relevance_phase = relevance_on and epoch > cfg.burnin
            plain: List[Dict[str, float]] = []
            relevance: List[Dict[str, float]] = []

            for b in range(n_batches):
                batch = X[order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                for sub in np.split(batch, cfg.r):
                    breakdown = elbo_plain(model, sub, rng)
                    _check_terms(breakdown, epoch, "vae")
                    plain.append(breakdown.as_floats())
                    _ascend(breakdown, optimizers["vae"])

                if relevance_phase:
                    breakdown = elbo_ren(model, batch, rng)
                    _check_terms(breakdown, epoch, "relevance")
                    alpha = breakdown.q_alpha.mean()
                    ad.check_finite(alpha, "current_alpha", epoch=epoch)
                    model.current_alpha = alpha
                    relevance.append(breakdown.as_floats())
                    _ascend(breakdown, optimizers["ren"])

            record = _epoch_record(epoch, plain, relevance, model, time.perf_counter() - started)
            log.records.append(record)
            if sink:
                sink.write(record.model_dump_json() + "\n")
                sink.flush()
            if epoch == 1 or epoch == cfg.epochs or epoch % log_every == 0:
                logger.info(f"epoch {epoch}/{cfg.epochs}: elbo={record.total:.4f} recon={record.recon:.4f} "
                            f"log_sigma_dec={record.log_sigma_dec:.4f} alpha={np.round(record.alpha, 4).tolist()}")
    except NonFiniteError as exc:
        logger.error(f"Training aborted: {exc.detail}")
        raise
    finally:
        if sink:
            sink.close()
    return log
