"""EngramNCA: a public/private split automaton, plus the variant registry."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .engine import (
    NCA,
    CellularAutomaton,
    Perception,
    UpdateRule,
    apply_update,
    fire_mask,
    pad_lattice,
)

N_PUBLIC = 30


@dataclass(frozen=True)
class ChannelPartition:
    channels: int = 50
    n_public: int = N_PUBLIC

    def __post_init__(self):
        if not 8 <= self.n_public < self.channels:
            raise ValueError("public block must hold RGBA + binary channels and leave a private block")

    @property
    def public(self) -> slice:
        return slice(0, self.n_public)

    @property
    def private(self) -> slice:
        return slice(self.n_public, self.channels)

    @property
    def n_private(self) -> int:
        return self.channels - self.n_public


def neighborhood(x: torch.Tensor, boundary: str) -> torch.Tensor:
    """3x3 neighbourhood values ``(B, C, 9, H, W)`` in row-major window order (center is 4)."""
    b, c, h, w = x.shape
    patches = F.unfold(pad_lattice(x, boundary), 3)
    return patches.view(b, c, 9, h, w)


def neighborhood_valid(h: int, w: int, boundary: str, device=None) -> Optional[torch.Tensor]:
    """Mask of in-lattice neighbours for the zero boundary; ``None`` when all are valid."""
    if boundary == "toroidal":
        return None
    ones = torch.ones((1, 1, h, w), device=device)
    return neighborhood(ones, "zero") > 0.5


def attend(values: torch.Tensor, logits: torch.Tensor, valid: Optional[torch.Tensor] = None):
    """Softmax over the neighbourhood axis (dim 2) and the weighted sum of ``values``."""
    if valid is not None:
        logits = logits.masked_fill(~valid, float("-inf"))
    weights = torch.softmax(logits, dim=2)
    return (weights * values).sum(2), weights


class LocalChannelAttention(nn.Module):
    """Single-head, per-channel attention over each cell's 3x3 neighbourhood.

    The center cell's query and each neighbour's key are 1x1 projections of
    the full cell state; channel ``c`` of the logit is ``q_c * k_c``. Values
    are the raw neighbour states, so the output is a convex mix per channel.
    """

    def __init__(self, channels: int, boundary: str = "toroidal"):
        super().__init__()
        self.boundary = boundary
        self.query = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        q = self.query(x).unsqueeze(2)
        k = neighborhood(self.key(x), self.boundary)
        v = neighborhood(x, self.boundary)
        valid = neighborhood_valid(x.shape[2], x.shape[3], self.boundary, x.device)
        out, weights = attend(v, q * k, valid)
        return (out, weights) if return_weights else out


class EngramNCA(CellularAutomaton):
    """GeneCA writes the public block, then GenePropCA writes the private block.

    GeneCA senses public channels only, plus the cell's own private vector.
    GenePropCA senses all channels of the post-GeneCA state. One alive mask
    is applied after both sub-steps.
    """

    def __init__(
        self,
        channels: int = 50,
        n_public: int = N_PUBLIC,
        hidden: tuple[int, int] = (32, 32),
        learnable_sensing: bool = False,
        gene_boundary: str = "toroidal",
        prop_boundary: str = "toroidal",
        attention: bool = False,
        fire_rate: float = 0.5,
        alive_masking: bool = True,
    ):
        super().__init__()
        self.partition = ChannelPartition(channels, n_public)
        self.channels = channels
        self.fire_rate = fire_rate
        self.alive_masking = alive_masking
        self.mask_boundary = gene_boundary
        pub, priv = n_public, self.partition.n_private

        self.gene_perception = Perception(pub, learnable_sensing, gene_boundary)
        self.gene_attention = LocalChannelAttention(pub, gene_boundary) if attention else None
        gene_in = self.gene_perception.out_features + priv + (pub if attention else 0)
        self.gene_rule = UpdateRule(gene_in, hidden[0], pub)

        self.prop_perception = Perception(channels, learnable_sensing, prop_boundary)
        self.prop_attention = LocalChannelAttention(channels, prop_boundary) if attention else None
        prop_in = self.prop_perception.out_features + (channels if attention else 0)
        self.prop_rule = UpdateRule(prop_in, hidden[1], priv)

    def gene_features(self, x: torch.Tensor) -> torch.Tensor:
        public = x[:, self.partition.public]
        feats = [self.gene_perception(public), x[:, self.partition.private]]
        if self.gene_attention is not None:
            feats.append(self.gene_attention(public))
        return torch.cat(feats, dim=1)

    def prop_features(self, x: torch.Tensor) -> torch.Tensor:
        feats = [self.prop_perception(x)]
        if self.prop_attention is not None:
            feats.append(self.prop_attention(x))
        return torch.cat(feats, dim=1)

    def update(self, x, generator):
        delta = self.gene_rule(self.gene_features(x))
        x = apply_update(x, delta, self.partition.public, fire_mask(x, self.fire_rate, generator))
        delta = self.prop_rule(self.prop_features(x))
        return apply_update(x, delta, self.partition.private, fire_mask(x, self.fire_rate, generator))


@dataclass(frozen=True)
class VariantSpec:
    name: str
    label: str
    kind: str  # "nca" or "engram"
    sensing: str  # "fixed" or "learnable"
    boundary_split: bool
    attention: bool
    patch_training: bool
    hidden: tuple[int, ...]
    channels: int = 50
    padded: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


VARIANTS: dict[str, VariantSpec] = {
    spec.name: spec
    for spec in [
        VariantSpec("NCA", "NCA", "nca", "fixed", False, False, False, (64,)),
        VariantSpec("v1", "EngramNCA v1", "engram", "fixed", False, False, False, (32, 32)),
        VariantSpec("v2", "EngramNCA v2", "engram", "learnable", False, False, False, (32, 32)),
        VariantSpec("v3", "EngramNCA v3", "engram", "learnable", True, True, False, (32, 32)),
        VariantSpec("v4", "EngramNCA v4", "engram", "learnable", True, True, True, (32, 32)),
        VariantSpec("v3_large", "EngramNCA v3 (132)", "engram", "learnable", True, True, False, (132, 132)),
        VariantSpec(
            "v3_large_padded", "EngramNCA v3 (132) padded", "engram", "learnable", True, True, False, (132, 132), padded=True
        ),
    ]
}


class UnknownVariantError(KeyError):
    def __str__(self) -> str:
        return f"unknown variant {self.args[0]!r}; valid names: {', '.join(VARIANTS)}"


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise UnknownVariantError(name) from None


def build_model(
    spec: VariantSpec,
    seed: int = 0,
    *,
    fire_rate: float = 0.5,
    alive_masking: bool = True,
    channels: Optional[int] = None,
    n_public: int = N_PUBLIC,
) -> CellularAutomaton:
    """Instantiate ``spec`` with parameters drawn from ``seed`` only (global RNG state untouched)."""
    channels = channels or spec.channels
    learnable = spec.sensing == "learnable"
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.kind == "nca":
            return NCA(channels, spec.hidden[0], learnable, "toroidal", fire_rate, alive_masking)
        return EngramNCA(
            channels,
            n_public,
            tuple(spec.hidden),
            learnable,
            gene_boundary="zero" if spec.boundary_split else "toroidal",
            prop_boundary="toroidal",
            attention=spec.attention,
            fire_rate=fire_rate,
            alive_masking=alive_masking,
        )


def build_variant(name: str, seed: int = 0, **kwargs) -> tuple[VariantSpec, CellularAutomaton]:
    spec = get_variant(name)
    return spec, build_model(spec, seed, **kwargs)
