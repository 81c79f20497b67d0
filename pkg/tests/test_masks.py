import pytest

from hshield.attack import MaskKind, select_parameters, count_masked_parameters, AttackError
from hshield.core import DiffusionModel, ModelConfig


def test_kv_mask_is_exactly_two_tensors(tiny_model):
    mask = select_parameters(tiny_model, MaskKind.HSPACE_KV)
    assert mask.names == frozenset(
        {"unet.mid.cross.to_k.weight", "unet.mid.cross.to_v.weight"})


def test_full_model_is_every_parameter(tiny_model):
    mask = select_parameters(tiny_model, MaskKind.FULL_MODEL)
    assert mask.names == frozenset(n for n, _ in tiny_model.named_parameters())


def test_subset_chain(tiny_model):
    kv = select_parameters(tiny_model, MaskKind.HSPACE_KV).names
    hs = select_parameters(tiny_model, MaskKind.HSPACE_ALL).names
    full = select_parameters(tiny_model, MaskKind.FULL_MODEL).names
    assert kv < hs < full


def test_cross_attn_kv_superset_of_mid_kv(tiny_model):
    kv = select_parameters(tiny_model, MaskKind.HSPACE_KV).names
    all_kv = select_parameters(tiny_model, MaskKind.ALL_CROSS_ATTN_KV).names
    assert kv < all_kv
    # the deepest down block, the mid block, and the first up block each
    # carry one cross-attention
    assert len(all_kv) == 6


def test_default_width_kv_count_is_4096():
    # d_model = 64 at the mid block, d_text = 32: K and V are 64x32 each
    model = DiffusionModel(ModelConfig(image_size=64, base_channels=32, d_text=32))
    mask = select_parameters(model, MaskKind.HSPACE_KV)
    assert count_masked_parameters(mask, model) == 2 * 64 * 32


def test_monotone_counts(tiny_model):
    counts = {
        kind: count_masked_parameters(select_parameters(tiny_model, kind), tiny_model)
        for kind in (MaskKind.HSPACE_KV, MaskKind.HSPACE_ALL, MaskKind.FULL_MODEL)
    }
    assert counts[MaskKind.HSPACE_KV] < counts[MaskKind.HSPACE_ALL] < counts[MaskKind.FULL_MODEL]


def test_full_model_count_is_total(tiny_model):
    mask = select_parameters(tiny_model, MaskKind.FULL_MODEL)
    total = sum(p.numel() for p in tiny_model.parameters())
    assert count_masked_parameters(mask, tiny_model) == total


def test_unknown_kind_rejected(tiny_model):
    with pytest.raises(AttackError):
        select_parameters(tiny_model, "not-a-kind")
