import os
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

TOY_FAMILIES = ("one_moon", "circle")
IMAGE_FAMILIES = ("mnist", "fashion_mnist", "dsprites")
IMAGE_SHAPES = {"mnist": (28, 28), "fashion_mnist": (28, 28), "dsprites": (64, 64)}

DatasetName = Literal["one_moon", "circle", "mnist", "fashion_mnist", "dsprites"]
MetricName = Literal["mse", "relevance", "energy_distance"]


class ToySpec(BaseModel):
    family: Literal["one_moon", "circle"]
    n: int = Field(gt=0)
    noise_frac: float = Field(default=0.10, ge=0)
    radius: float = Field(default=1.0, gt=0)
    seed: int = 42


class DatasetConfig(BaseModel):
    name: DatasetName
    noise_frac: float = Field(default=0.10, ge=0)
    radius: float = Field(default=1.0, gt=0)
    n_train: Optional[int] = Field(default=4096, gt=0)
    n_test: Optional[int] = Field(default=1024, gt=0)
    train_path: Optional[str] = None
    train_labels: Optional[str] = None
    test_path: Optional[str] = None
    test_labels: Optional[str] = None

    @field_validator("train_path", "train_labels", "test_path", "test_labels")
    @classmethod
    def path_exists(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and not os.path.exists(value):
            raise ValueError(f"file not found: {value}")
        return value

    @model_validator(mode="after")
    def image_sets_need_files(self):
        if self.name in IMAGE_FAMILIES:
            missing = [key for key in ("train_path", "test_path") if getattr(self, key) is None]
            if missing:
                raise ValueError(f"dataset {self.name} needs {', '.join(missing)}")
        return self

    @property
    def is_toy(self) -> bool:
        return self.name in TOY_FAMILIES


class ModelConfig(BaseModel):
    variant: Literal["vae", "dpvae"] = "dpvae"
    latent_dim: int = Field(default=2, ge=1)
    relevance: bool = True
    hidden: Optional[List[int]] = None
    feature_dim: int = Field(default=128, gt=0)
    feature_hidden: List[int] = Field(default_factory=lambda: [128, 128])
    flow_blocks: Optional[int] = Field(default=None, ge=2)
    flow_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    flow_scale_bound: float = Field(default=3.0, ge=0)
    alpha_scaled_flow: bool = False
    prior_concentration: float = Field(default=1e-3, gt=0)
    prior_rate: float = Field(default=1e-4, gt=0)


class TrainConfig(BaseModel):
    epochs: int = Field(gt=0)
    burnin: int = Field(gt=0)
    lr_vae: float = Field(gt=0)
    lr_ren: float = Field(gt=0)
    r: int = Field(gt=0)
    batch_size: int = Field(gt=0)
    seed: int = 42
    clip_norm: Optional[float] = Field(default=None, gt=0)
    log_path: Optional[str] = None

    @model_validator(mode="after")
    def schedule_is_consistent(self):
        problems = []
        if self.burnin >= self.epochs:
            problems.append(f"burnin ({self.burnin}) must be smaller than epochs ({self.epochs})")
        if self.batch_size % self.r:
            problems.append(f"batch_size ({self.batch_size}) must be divisible by r ({self.r})")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class EvalConfig(BaseModel):
    metrics: List[MetricName] = Field(default_factory=lambda: ["mse", "relevance", "energy_distance"])
    n_generate: int = Field(default=1024, ge=0)
    empirical_variance: bool = False
    unbiased_energy: bool = False


class ExperimentConfig(BaseModel):
    dataset: DatasetConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str

    @property
    def seed(self) -> int:
        return self.train.seed


class EpochRecord(BaseModel):
    epoch: int
    total: float
    recon: float
    neg_entropy_q_z: float
    neg_entropy_q_alpha: float
    prior_z: float
    prior_alpha: float
    log_sigma_dec: float
    alpha: List[float]
    seconds: float


class MetricRecord(BaseModel):
    metric: str
    value: Union[float, int, Dict[str, Any], List[float]]
    config_hash: str
    seed: int


class RunManifest(BaseModel):
    config: Dict[str, Any]
    config_hash: str
    seed: int
    wall_seconds: float
    checkpoint: str
    checkpoint_hash: str
    epochs_completed: int
    created_at: datetime = Field(default_factory=datetime.now)


class RelevanceReport(BaseModel):
    alpha: List[float]
    variances: List[float]
    explained_ratio: List[float]
    cumulative: List[float]
    order: List[int]
    l_star: int

    @model_validator(mode="after")
    def ordering_is_consistent(self):
        if any(a < b for a, b in zip(self.variances, self.variances[1:])):
            raise ValueError("variances must be sorted descending")
        if any(a > b for a, b in zip(self.cumulative, self.cumulative[1:])):
            raise ValueError("cumulative ratios must be nondecreasing")
        if self.cumulative and abs(self.cumulative[-1] - 1.0) > 1e-12:
            raise ValueError(f"cumulative ratios must end at 1, got {self.cumulative[-1]}")
        if not 1 <= self.l_star <= len(self.alpha):
            raise ValueError(f"l_star {self.l_star} out of range")
        return self
