"""
Decoupled prior: a stack of affine coupling blocks g(z) = z0 with z0 ~ N(0, I).

Block k keeps the coordinates where its mask is 1 and maps the others as
    y = b⊙z + (1 - b)⊙(z⊙exp(s(b⊙z)) + t(b⊙z)),
so its Jacobian is triangular with log-determinant Σ_l (1 - b_l) s_l.
Consecutive blocks use complementary even/odd masks.
"""
from typing import List, Sequence, Tuple

import numpy as np

from ren import autodiff as ad
from ren.autodiff import Tensor
from ren.distributions import standard_normal_log_prob
from ren.layers import MLP, Module
from ren.utils import ConfigError, ShapeError, ren_error

DEFAULT_HIDDEN = (64, 64)
DEFAULT_SCALE_BOUND = 3.0


def alternating_masks(dim: int, blocks: int) -> List[np.ndarray]:
    return [np.array([(l + k) % 2 == 0 for l in range(dim)], dtype=np.float64) for k in range(blocks)]


class CouplingBlock(Module):
    def __init__(self, mask: np.ndarray, rng: np.random.Generator, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 scale_bound: float = DEFAULT_SCALE_BOUND):
        if not np.all((mask == 0) | (mask == 1)):
            raise ren_error(ConfigError, "coupling mask entries must be 0 or 1")
        dim = mask.shape[0]
        self.mask = mask
        # 0 disables the tanh bound on the scale output
        self.scale_bound = scale_bound
        self.scale_net = MLP(dim, hidden, dim, rng, activation="tanh")
        self.translate_net = MLP(dim, hidden, dim, rng, activation="tanh")

    def _scale_translate(self, kept: Tensor) -> Tuple[Tensor, Tensor]:
        s = self.scale_net(kept)
        if self.scale_bound:
            s = self.scale_bound * ad.tanh(s)
        return s, self.translate_net(kept)

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        kept = z * self.mask
        s, t = self._scale_translate(kept)
        free = 1.0 - self.mask
        y = kept + free * (z * ad.exp(s) + t)
        return y, (free * s).sum(axis=-1)

    def inverse(self, y: Tensor) -> Tensor:
        kept = y * self.mask
        s, t = self._scale_translate(kept)
        return kept + (1.0 - self.mask) * ((y - t) * ad.exp(-s))


class FlowStack(Module):
    def __init__(self, dim: int, blocks: int, rng: np.random.Generator,
                 hidden: Sequence[int] = DEFAULT_HIDDEN, scale_bound: float = DEFAULT_SCALE_BOUND):
        if blocks < 2:
            raise ren_error(ConfigError, f"a flow needs at least 2 coupling blocks, got {blocks}")
        self.dim = dim
        self.blocks = [CouplingBlock(mask, rng, hidden, scale_bound) for mask in alternating_masks(dim, blocks)]

    def _check(self, z: Tensor, op: str):
        if z.ndim == 0 or z.shape[-1] != self.dim:
            raise ren_error(ShapeError, f"{op}: expected last dimension {self.dim}, got shape {z.shape}",
                            shapes=(z.shape, (self.dim,)))

    def forward(self, z) -> Tuple[Tensor, Tensor]:
        z = ad.as_tensor(z)
        self._check(z, "flow_forward")
        log_det = ad.Tensor(np.zeros(z.shape[:-1]))
        for block in self.blocks:
            z, block_log_det = block.forward(z)
            log_det = log_det + block_log_det
        return z, log_det

    def inverse(self, z0) -> Tensor:
        z0 = ad.as_tensor(z0)
        self._check(z0, "flow_inverse")
        for block in reversed(self.blocks):
            z0 = block.inverse(z0)
        return z0


def flow_forward(z, flow: FlowStack) -> Tuple[Tensor, Tensor]:
    return flow.forward(z)


def flow_inverse(z0, flow: FlowStack) -> Tensor:
    return flow.inverse(z0)


def flow_prior_log_prob(z, flow: FlowStack) -> Tensor:
    """log N(g(z); 0, I) + log|det ∂g/∂z|."""
    z0, log_det = flow.forward(z)
    return standard_normal_log_prob(z0) + log_det
