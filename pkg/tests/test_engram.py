import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from arcnca.engine import NCA
from arcnca.engram import (
    VARIANTS,
    ChannelPartition,
    EngramNCA,
    LocalChannelAttention,
    UnknownVariantError,
    attend,
    build_variant,
    neighborhood,
)


def live_state(h=5, w=5, seed=0, dtype=torch.float32):
    x = torch.rand((1, 50, h, w), generator=torch.Generator().manual_seed(seed), dtype=dtype)
    x[:, 3] = 1.0
    return x


def test_build_nca():
    spec, model = build_variant("NCA", seed=0)
    assert isinstance(model, NCA)
    assert model.rule.hidden.out_channels == 64
    assert spec.sensing == "fixed"


def test_build_v3_split_boundaries():
    _, model = build_variant("v3", seed=0)
    assert isinstance(model, EngramNCA)
    assert model.gene_perception.boundary == "zero"
    assert model.prop_perception.boundary == "toroidal"
    assert model.gene_attention is not None and model.prop_attention is not None


def test_variant_flags():
    assert not VARIANTS["v1"].attention and VARIANTS["v1"].sensing == "fixed"
    assert VARIANTS["v2"].sensing == "learnable" and not VARIANTS["v2"].boundary_split
    assert VARIANTS["v4"].patch_training and not VARIANTS["v3"].patch_training
    assert VARIANTS["v3_large"].hidden == (132, 132)


def test_unknown_variant_lists_valid_names():
    with pytest.raises(UnknownVariantError) as info:
        build_variant("v9")
    msg = str(info.value)
    assert "v9" in msg and all(name in msg for name in ("NCA", "v1", "v4"))


def test_partition():
    p = ChannelPartition()
    assert (p.public, p.private, p.n_private) == (slice(0, 30), slice(30, 50), 20)
    with pytest.raises(ValueError):
        ChannelPartition(50, 50)
    with pytest.raises(ValueError):
        ChannelPartition(50, 7)


def test_build_is_pure_and_seeded():
    torch.manual_seed(123)
    before = torch.random.get_rng_state()
    _, a = build_variant("v3", seed=7)
    assert torch.equal(torch.random.get_rng_state(), before)
    _, b = build_variant("v3", seed=7)
    _, c = build_variant("v3", seed=8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_zero_init_identity(name):
    _, model = build_variant(name, seed=0, fire_rate=1.0)
    x = live_state()
    assert torch.equal(model.step(x), x)


def randomize_outputs(model, scale=0.1):
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for m in (model.gene_rule.out, model.prop_rule.out):
            m.weight.copy_(torch.randn(m.weight.shape, generator=g) * scale)


def test_write_sets_are_disjoint():
    _, model = build_variant("v3", seed=0, fire_rate=1.0, alive_masking=False)
    randomize_outputs(model)
    x = live_state()
    with torch.no_grad():
        gene_delta = model.gene_rule(model.gene_features(x))
        prop_delta = model.prop_rule(model.prop_features(x))
    assert gene_delta.shape[1] == 30 and prop_delta.shape[1] == 20

    # with GenePropCA silenced only public channels move
    with torch.no_grad():
        model.prop_rule.out.weight.zero_()
        y = model.step(x)
    assert torch.equal(y[:, 30:], x[:, 30:])
    assert not torch.equal(y[:, :30], x[:, :30])

    # with GeneCA silenced only private channels move
    randomize_outputs(model)
    with torch.no_grad():
        model.gene_rule.out.weight.zero_()
        y = model.step(x)
    assert torch.equal(y[:, :30], x[:, :30])
    assert not torch.equal(y[:, 30:], x[:, 30:])


@pytest.mark.parametrize("name", ["v3", "v4"])
def test_boundary_split_edge_impulse(name):
    _, model = build_variant(name, seed=0)
    w = 6
    x = torch.zeros((1, 50, 5, w))
    x[0, 40, 2, 0] = 1.0  # private channel, left edge
    prop = model.prop_perception(x).view(1, 50, 4, 5, w)
    assert prop[0, 40, 1:, 2, w - 1].abs().sum() > 0

    x = torch.zeros((1, 50, 5, w))
    x[0, 10, 2, 0] = 1.0  # public channel, left edge
    gene = model.gene_perception(x[:, :30]).view(1, 30, 4, 5, w)
    assert gene[0, 10, :, :, w - 1].abs().sum() == 0


def test_unsplit_variant_wraps_public_channels():
    _, model = build_variant("v2", seed=0)
    x = torch.zeros((1, 30, 5, 6))
    x[0, 10, 2, 0] = 1.0
    assert model.gene_perception(x).view(1, 30, 4, 5, 6)[0, 10, :, :, 5].abs().sum() > 0


def test_gene_perception_ignores_private_neighbours():
    _, model = build_variant("v3", seed=0)
    x = live_state(dtype=torch.float32)
    x2 = x.clone()
    x2[0, 35, 1, 1] += 5.0  # private channel of a neighbour of (2, 2)
    f1, f2 = model.gene_features(x), model.gene_features(x2)
    assert torch.equal(f1[..., 2, 2], f2[..., 2, 2])


def test_neighborhood_order():
    x = torch.arange(9.0).view(1, 1, 3, 3)
    n = neighborhood(x, "zero")
    assert n[0, 0, :, 1, 1].tolist() == list(range(9))
    assert n[0, 0, 4].tolist() == x[0, 0].tolist()


def test_attention_uniform_logits_average():
    values = torch.arange(9.0).view(1, 1, 9, 1, 1)
    out, w = attend(values, torch.zeros_like(values))
    assert out.item() == pytest.approx(4.0)
    assert torch.allclose(w, torch.full_like(w, 1 / 9))


def test_attention_one_hot_selects_value():
    values = torch.arange(9.0).view(1, 1, 9, 1, 1)
    logits = torch.zeros_like(values)
    logits[0, 0, 6] = 1e4
    out, _ = attend(values, logits)
    assert out.item() == pytest.approx(6.0)


def test_attention_hand_softmax():
    values = torch.tensor([1.0, 2.0, 3.0, 0, 0, 0, 0, 0, 0], dtype=torch.float64).view(1, 1, 9, 1, 1)
    logits = torch.tensor([0.0, 1.0, 2.0] + [-math.inf] * 6, dtype=torch.float64).view(1, 1, 9, 1, 1)
    out, _ = attend(values, logits)
    e = [math.exp(0), math.exp(1), math.exp(2)]
    assert out.item() == pytest.approx(sum(v * x for v, x in zip([1, 2, 3], e)) / sum(e))


def test_attention_masks_outside_cells_on_zero_boundary():
    att = LocalChannelAttention(4, "zero")
    x = torch.rand(1, 4, 3, 3)
    _, w = att(x, return_weights=True)
    # corner (0,0): neighbours 0,1,2,3,6 are off-lattice
    assert torch.all(w[0, :, [0, 1, 2, 3, 6], 0, 0] == 0)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["toroidal", "zero"]), st.integers(0, 10_000))
def test_attention_weights_are_distribution(boundary, seed):
    torch.manual_seed(seed)
    att = LocalChannelAttention(5, boundary)
    x = torch.randn(2, 5, 4, 3)
    out, w = att(x, return_weights=True)
    assert torch.allclose(w.sum(2), torch.ones(1))
    assert (w >= 0).all()
    # convex mix stays within the neighbourhood range
    n = neighborhood(x, boundary)
    if boundary == "toroidal":
        assert (out <= n.max(2).values + 1e-6).all() and (out >= n.min(2).values - 1e-6).all()
