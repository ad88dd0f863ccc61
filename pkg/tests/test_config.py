"""Flat config file parsing and serialization."""

import pytest

from moeformer import ConfigError
from moeformer.config import (
    encoder_from_flat,
    encoder_to_flat,
    parse_kv_text,
    split_right_context,
)
from moeformer.presets import desk_encoder, reference_family
from moeformer.config import AdapterConfig


def test_split_right_context_even_as_possible():
    assert split_right_context(15, 10) == [2, 2, 2, 2, 2, 1, 1, 1, 1, 1]
    assert split_right_context(6, 4) == [2, 2, 1, 1]
    assert split_right_context(0, 3) == [0, 0, 0]
    assert split_right_context(4, 0) == []


@pytest.mark.parametrize("cfg", [
    desk_encoder(),
    desk_encoder(moe_placement="none", num_experts=0),
    desk_encoder(moe_selector="odd"),
    desk_encoder(adapters=AdapterConfig(dim=32, num_groups=4)),
    *reference_family().values(),
])
def test_encoder_flat_roundtrip(cfg):
    text = encoder_to_flat(cfg)
    assert encoder_from_flat(parse_kv_text(text)) == cfg


def test_comments_and_blank_lines_ignored():
    text = encoder_to_flat(desk_encoder())
    noisy = "# leading comment\n\n" + text.replace(
        "encoder.ffn_mult=4", "encoder.ffn_mult=4  # inline comment"
    )
    assert encoder_from_flat(parse_kv_text(noisy)) == desk_encoder()


def test_unknown_keys_rejected():
    text = encoder_to_flat(desk_encoder()) + "encoder.typo=3\n"
    with pytest.raises(ConfigError, match="typo"):
        encoder_from_flat(parse_kv_text(text))


def test_missing_required_key_rejected():
    with pytest.raises(ConfigError, match="feature_dim"):
        encoder_from_flat({"encoder.input_dim": "8"})


def test_right_context_list_length_checked():
    text = encoder_to_flat(desk_encoder()).replace(
        "encoder.right_contexts=2,2,1,1", "encoder.right_contexts=2,2"
    )
    with pytest.raises(ConfigError, match="right_contexts"):
        encoder_from_flat(parse_kv_text(text))


def test_prefix_isolation():
    both = encoder_to_flat(desk_encoder(), prefix="adapter_encoder.") + encoder_to_flat(
        desk_encoder(num_experts=8), prefix="moe_encoder."
    )
    raw = parse_kv_text(both)
    a = encoder_from_flat(raw, prefix="adapter_encoder.")
    b = encoder_from_flat(raw, prefix="moe_encoder.")
    assert a.non_causal[0].num_experts == 4
    assert b.non_causal[0].num_experts == 8
