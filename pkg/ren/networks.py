"""
Encoder φ, σ-calibrated decoder θ, the DeepSets relevance encoder ψ, and the
RenModel that ties them to an optional coupling-flow prior η.

Layer widths are reconstructions: toy nets 2→64→64→2L with mirrored decoders,
dense 784→512→256 stacks for MNIST-like images, and a four-layer stride-2
convolutional pair for 64×64 dSprites rasters. All are overridable through
`ModelConfig.hidden`.
"""
from typing import Dict, Optional, Tuple

import numpy as np

from ren import autodiff as ad
from ren.autodiff import Parameter, Tensor
from ren.distributions import DiagGaussian, GammaParams
from ren.flows import FlowStack
from ren.layers import MLP, Activation, Conv2d, ConvTranspose2d, Linear, Module, Reshape, Sequential
from ren.logger import get_logger
from ren.models import IMAGE_FAMILIES, IMAGE_SHAPES, TOY_FAMILIES, ModelConfig
from ren.utils import ConfigError, DomainError, ShapeError, ren_error, rng_stream

logger = get_logger()

POSITIVE_FLOOR = 1e-6
TOY_HIDDEN = [64, 64]
DENSE_IMAGE_HIDDEN = [512, 256]
TOY_FLOW_BLOCKS = 4
IMAGE_FLOW_BLOCKS = 6


def _check_last(op: str, x: Tensor, expected: int):
    if x.ndim == 0 or x.shape[-1] != expected:
        raise ren_error(ShapeError, f"{op}: expected last dimension {expected}, got shape {x.shape}",
                        shapes=(x.shape, (expected,)))


class EncoderNet(Module):
    def __init__(self, body: Module, latent_dim: int):
        self.body = body
        self.latent_dim = latent_dim

    def forward(self, x: Tensor) -> DiagGaussian:
        out = self.body(x)
        return DiagGaussian(mu=out[..., : self.latent_dim], log_sigma=out[..., self.latent_dim:])


class DecoderNet(Module):
    def __init__(self, body: Module, sigmoid_mean: bool):
        self.body = body
        self.sigmoid_mean = sigmoid_mean
        self.log_sigma_dec = Parameter(np.array(0.0))

    def forward(self, z: Tensor) -> Tensor:
        mu_x = self.body(z)
        return ad.sigmoid(mu_x) if self.sigmoid_mean else mu_x


class RelevanceEncoder(Module):
    """q_ψ(α | X, Z): per-element data and latent features, concatenated, mean-pooled over the set."""

    def __init__(self, data_dim: int, latent_dim: int, rng: np.random.Generator,
                 feature_dim: int = 128, feature_hidden=(128, 128)):
        self.latent_dim = latent_dim
        self.data_features = MLP(data_dim, feature_hidden, feature_dim, rng)
        self.latent_features = MLP(latent_dim, feature_hidden, feature_dim, rng)
        self.head = MLP(2 * feature_dim, [feature_dim], 2 * latent_dim, rng)

    def forward(self, X: Tensor, Z: Tensor) -> GammaParams:
        if X.ndim != 2 or Z.ndim != 2 or X.shape[0] != Z.shape[0]:
            raise ren_error(ShapeError, f"infer_relevance: set shapes {X.shape} and {Z.shape} disagree",
                            shapes=(X.shape, Z.shape))
        if X.shape[0] < 2:
            raise ren_error(DomainError, "infer_relevance: relevance cannot be estimated from a single sample")
        features = ad.concat([ad.relu(self.data_features(X)), ad.relu(self.latent_features(Z))], axis=-1)
        pooled = features.mean(axis=0)
        raw = self.head(pooled)
        return GammaParams(
            concentration=ad.softplus(raw[: self.latent_dim]) + POSITIVE_FLOOR,
            rate=ad.softplus(raw[self.latent_dim:]) + POSITIVE_FLOOR,
        )


class RenModel(Module):
    def __init__(self, family: str, data_dim: int, config: ModelConfig, encoder: EncoderNet,
                 decoder: DecoderNet, relevance: RelevanceEncoder, flow: Optional[FlowStack]):
        self.family = family
        self.data_dim = data_dim
        self.latent_dim = config.latent_dim
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.relevance = relevance
        self.flow = flow
        self.current_alpha = np.ones(config.latent_dim)
        self.prior = GammaParams.constant(config.prior_concentration, config.prior_rate, config.latent_dim)

    @property
    def variant(self) -> str:
        return "dpvae" if self.flow is not None else "vae"

    def encode(self, x) -> DiagGaussian:
        x = ad.as_tensor(x)
        _check_last("encode", x, self.data_dim)
        return self.encoder(x)

    def decode(self, z) -> Tuple[Tensor, Tensor]:
        z = ad.as_tensor(z)
        _check_last("decode", z, self.latent_dim)
        return self.decoder(z), self.decoder.log_sigma_dec

    def infer_relevance(self, X, Z) -> GammaParams:
        X, Z = ad.as_tensor(X), ad.as_tensor(Z)
        _check_last("infer_relevance", X, self.data_dim)
        _check_last("infer_relevance", Z, self.latent_dim)
        return self.relevance(X, Z)

    def vae_parameters(self) -> Dict[str, Parameter]:
        """log σ, φ, θ and, when present, the flow η."""
        return {name: p for name, p in self.named_parameters().items() if not name.startswith("relevance.")}

    def relevance_parameters(self) -> Dict[str, Parameter]:
        return {name: p for name, p in self.named_parameters().items() if name.startswith("relevance.")}


def encode(model: RenModel, x) -> DiagGaussian:
    return model.encode(x)


def decode(model: RenModel, z) -> Tuple[Tensor, Tensor]:
    return model.decode(z)


def infer_relevance(model: RenModel, X, Z) -> GammaParams:
    return model.infer_relevance(X, Z)


def data_dim_for(family: str) -> int:
    if family in TOY_FAMILIES:
        return 2
    if family in IMAGE_FAMILIES:
        height, width = IMAGE_SHAPES[family]
        return height * width
    raise ren_error(ConfigError, f"unknown dataset family: {family}")


def _conv_pair(latent_dim: int, rng: np.random.Generator) -> Tuple[Module, Module]:
    encoder = Sequential(
        Reshape(1, 64, 64),
        Conv2d(1, 32, 4, rng, stride=2, padding=1), Activation("relu"),
        Conv2d(32, 32, 4, rng, stride=2, padding=1), Activation("relu"),
        Conv2d(32, 64, 4, rng, stride=2, padding=1), Activation("relu"),
        Conv2d(64, 64, 4, rng, stride=2, padding=1), Activation("relu"),
        Reshape(64 * 4 * 4),
        Linear(64 * 4 * 4, 256, rng), Activation("relu"),
        Linear(256, 2 * latent_dim, rng, head=True),
    )
    decoder = Sequential(
        Linear(latent_dim, 256, rng), Activation("relu"),
        Linear(256, 64 * 4 * 4, rng), Activation("relu"),
        Reshape(64, 4, 4),
        ConvTranspose2d(64, 64, 4, rng, stride=2, padding=1), Activation("relu"),
        ConvTranspose2d(64, 32, 4, rng, stride=2, padding=1), Activation("relu"),
        ConvTranspose2d(32, 32, 4, rng, stride=2, padding=1), Activation("relu"),
        ConvTranspose2d(32, 1, 4, rng, stride=2, padding=1),
        Reshape(64 * 64),
    )
    return encoder, decoder


def build_model(family: str, config: Optional[ModelConfig] = None, seed: int = 42) -> RenModel:
    config = config or ModelConfig()
    data_dim = data_dim_for(family)
    latent_dim = config.latent_dim
    rng = rng_stream(seed, "init")

    if family == "dsprites" and config.hidden is None:
        encoder_body, decoder_body = _conv_pair(latent_dim, rng)
    else:
        default_hidden = TOY_HIDDEN if family in TOY_FAMILIES else DENSE_IMAGE_HIDDEN
        hidden = default_hidden if config.hidden is None else config.hidden
        encoder_body = MLP(data_dim, hidden, 2 * latent_dim, rng)
        decoder_body = MLP(latent_dim, list(reversed(hidden)), data_dim, rng)

    encoder = EncoderNet(encoder_body, latent_dim)
    decoder = DecoderNet(decoder_body, sigmoid_mean=family in IMAGE_FAMILIES)
    relevance = RelevanceEncoder(data_dim, latent_dim, rng, config.feature_dim, config.feature_hidden)
    flow = None
    if config.variant == "dpvae":
        blocks = config.flow_blocks or (TOY_FLOW_BLOCKS if family in TOY_FAMILIES else IMAGE_FLOW_BLOCKS)
        flow = FlowStack(latent_dim, blocks, rng, config.flow_hidden, config.flow_scale_bound)

    model = RenModel(family, data_dim, config, encoder, decoder, relevance, flow)
    logger.info(f"Built {config.variant} model for {family}: D={data_dim}, L={latent_dim}, "
                f"{sum(p.size for p in model.parameters())} parameters")
    return model
