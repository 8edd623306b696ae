"""Differentiable cellular-automaton core.

Tensors are laid out ``(batch, channels, height, width)``. Every stochastic
choice draws from an explicit ``torch.Generator`` so rollouts are
reproducible per task seed.
"""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

ALPHA_CHANNEL = 3
ALIVE_THRESHOLD = 0.1
BOUNDARIES = ("toroidal", "zero")

IDENTITY = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
SOBEL_X = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
LAPLACIAN = [[1.0, 2.0, 1.0], [2.0, -12.0, 2.0], [1.0, 2.0, 1.0]]


def stencil_bank(dtype=torch.float32) -> torch.Tensor:
    """Identity, Sobel-x, Sobel-y and Laplacian stencils as a ``(4, 3, 3)`` tensor."""
    sx = torch.tensor(SOBEL_X, dtype=dtype) / 8.0
    return torch.stack(
        [
            torch.tensor(IDENTITY, dtype=dtype),
            sx,
            sx.T.contiguous(),
            torch.tensor(LAPLACIAN, dtype=dtype) / 16.0,
        ]
    )


N_KERNELS = 4


def pad_lattice(x: torch.Tensor, boundary: str) -> torch.Tensor:
    if boundary == "toroidal":
        return F.pad(x, (1, 1, 1, 1), mode="circular")
    if boundary == "zero":
        return F.pad(x, (1, 1, 1, 1), mode="constant", value=0.0)
    raise ValueError(f"unknown boundary {boundary!r}; expected one of {BOUNDARIES}")


def perceive(x: torch.Tensor, kernels: torch.Tensor, boundary: str = "toroidal") -> torch.Tensor:
    """Depthwise 3x3 cross-correlation of every channel with every kernel.

    ``kernels`` is either a shared ``(K, 3, 3)`` bank or per-channel weights of
    shape ``(C*K, 1, 3, 3)``. Output channel ``c*K + k`` is channel ``c``
    seen through kernel ``k``.
    """
    c = x.shape[1]
    if kernels.dim() == 3:
        weight = kernels.to(x.dtype).repeat(c, 1, 1).unsqueeze(1)
    elif kernels.dim() == 4 and kernels.shape[0] % c == 0 and kernels.shape[1:] == (1, 3, 3):
        weight = kernels
    else:
        raise ValueError(f"kernel shape {tuple(kernels.shape)} does not fit {c} channels")
    return F.conv2d(pad_lattice(x, boundary), weight, groups=c)


class Perception(nn.Module):
    """Fixed or learnable depthwise sensing; learnable kernels start at the fixed stencils."""

    def __init__(self, channels: int, learnable: bool = False, boundary: str = "toroidal"):
        super().__init__()
        if boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {boundary!r}")
        self.channels = channels
        self.boundary = boundary
        self.learnable = learnable
        bank = stencil_bank().repeat(channels, 1, 1).unsqueeze(1)
        if learnable:
            self.kernels = nn.Parameter(bank)
        else:
            self.register_buffer("kernels", bank)

    @property
    def out_features(self) -> int:
        return self.channels * N_KERNELS

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return perceive(x, self.kernels, self.boundary)


class UpdateRule(nn.Module):
    """Per-cell MLP (1x1 convolutions): dense -> ReLU -> dense."""

    def __init__(self, in_width: int, hidden_width: int, out_width: int, zero_init: bool = True):
        super().__init__()
        self.hidden = nn.Conv2d(in_width, hidden_width, 1)
        self.out = nn.Conv2d(hidden_width, out_width, 1, bias=False)
        if zero_init:
            nn.init.zeros_(self.out.weight)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.out(F.relu(self.hidden(features)))


def fire_mask(x: torch.Tensor, fire_rate: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    b, _, h, w = x.shape
    if fire_rate >= 1.0:
        return torch.ones((b, 1, h, w), dtype=x.dtype, device=x.device)
    draw = torch.rand((b, 1, h, w), generator=generator, dtype=x.dtype, device=x.device)
    return (draw < fire_rate).to(x.dtype)


def alive_mask(x: torch.Tensor, boundary: str = "toroidal", threshold: float = ALIVE_THRESHOLD) -> torch.Tensor:
    """Cells whose 3x3 neighbourhood holds an alpha above ``threshold``."""
    alpha = x[:, ALPHA_CHANNEL : ALPHA_CHANNEL + 1]
    return F.max_pool2d(pad_lattice(alpha, boundary), 3, stride=1) > threshold


def apply_update(x: torch.Tensor, delta: torch.Tensor, write: slice, mask: torch.Tensor) -> torch.Tensor:
    """Residual update of channels ``write``; others pass through untouched."""
    start, stop = write.start or 0, write.stop if write.stop is not None else x.shape[1]
    if delta.shape[1] != stop - start:
        raise ValueError(f"delta has {delta.shape[1]} channels, write set has {stop - start}")
    parts = [x[:, :start], x[:, start:stop] + delta * mask, x[:, stop:]]
    return torch.cat([p for p in parts if p.shape[1]], dim=1)


class CellularAutomaton(nn.Module):
    """Shared rollout and alive-masking logic; subclasses implement ``update``."""

    channels: int
    fire_rate: float
    alive_masking: bool
    mask_boundary: str

    def update(self, x: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
        raise NotImplementedError

    def step(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        if not self.alive_masking:
            return self.update(x, generator)
        pre = alive_mask(x, self.mask_boundary)
        x = self.update(x, generator)
        post = alive_mask(x, self.mask_boundary)
        return x * (pre & post).to(x.dtype)

    def forward(self, x: torch.Tensor, steps: int = 1, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return rollout(self, x, steps, generator)


def rollout(model: CellularAutomaton, x: torch.Tensor, steps: int, generator: Optional[torch.Generator] = None, record: bool = False):
    """Apply ``model.step`` ``steps`` times. With ``record`` also return all ``steps + 1`` states."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    trajectory = [x] if record else None
    for _ in range(steps):
        x = model.step(x, generator)
        if record:
            trajectory.append(x)
    return (x, trajectory) if record else x


class NCA(CellularAutomaton):
    """Growing-NCA style automaton writing every channel."""

    def __init__(
        self,
        channels: int = 50,
        hidden: int = 64,
        learnable_sensing: bool = False,
        boundary: str = "toroidal",
        fire_rate: float = 0.5,
        alive_masking: bool = True,
    ):
        super().__init__()
        self.channels = channels
        self.fire_rate = fire_rate
        self.alive_masking = alive_masking
        self.mask_boundary = boundary
        self.perception = Perception(channels, learnable_sensing, boundary)
        self.rule = UpdateRule(self.perception.out_features, hidden, channels)

    def update(self, x, generator):
        delta = self.rule(self.perception(x))
        return apply_update(x, delta, slice(0, self.channels), fire_mask(x, self.fire_rate, generator))
