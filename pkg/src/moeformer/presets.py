"""Ready-made configurations.

``desk_*`` builders are small enough to train on a laptop CPU in minutes.
The ``reference_*`` family mirrors a production-scale streaming multilingual
encoder line (180M dense baseline; expert variants up to 729M total while
activating ~187-246M at inference) and exists purely for size accounting;
those geometries are never executed here.
"""

from __future__ import annotations

from dataclasses import replace

from .config import (
    AdapterConfig,
    ConformerLayerConfig,
    EncoderConfig,
    FrontendConfig,
    InputBlockConfig,
    split_right_context,
)


def desk_encoder(
    moe_placement: str = "end",
    num_experts: int = 4,
    expert_mult: int = 4,
    moe_selector: str = "all",
    adapters: AdapterConfig | None = None,
    causal_layers: int = 3,
    causal_dim: int = 64,
    non_causal_layers: int = 4,
    non_causal_dim: int = 96,
    heads: int = 4,
    feature_dim: int = 16,
    ffn_mult: int = 4,
) -> EncoderConfig:
    """CPU-sized default geometry: 3 causal layers at 64, 4 non-causal at 96."""
    rights = split_right_context(non_causal_layers + 2, non_causal_layers)
    causal = [
        ConformerLayerConfig(
            model_dim=causal_dim, ffn_mult=ffn_mult, heads=heads, conv_kernel=7,
            causal=True, left_context=16, right_context=0,
        )
        for _ in range(causal_layers)
    ]
    non_causal = [
        ConformerLayerConfig(
            model_dim=non_causal_dim, ffn_mult=ffn_mult, heads=heads, conv_kernel=7,
            causal=False, left_context=16, right_context=rights[i],
            moe_placement=moe_placement,
            num_experts=num_experts if moe_placement != "none" else 0,
            expert_mult=expert_mult,
        )
        for i in range(non_causal_layers)
    ]
    return EncoderConfig(
        frontend=FrontendConfig(feature_dim=feature_dim, stack=2, downsample=2),
        input_block=InputBlockConfig(out_dim=causal_dim // 2, num_convs=2, kernel=3),
        causal=causal,
        non_causal=non_causal,
        stack_after=0,
        moe_selector=moe_selector,
        adapters=adapters,
    )


# --------------------------------------------------------------------------
# reference family (accounting only)

_REF_NON_CAUSAL_DIM = 640
_REF_CAUSAL_DIMS = [1024, 512, 512, 512, 512, 512, 512]


def reference_baseline() -> EncoderConfig:
    """The dense 180M-class baseline: 7 causal layers (one wide layer right
    after time stacking, then 512-wide), 10 non-causal 640-wide layers with
    a 15-frame total right context."""
    rights = split_right_context(15, 10)
    causal = [
        ConformerLayerConfig(
            model_dim=d, ffn_mult=4, heads=8, conv_kernel=15,
            causal=True, left_context=30, right_context=0,
        )
        for d in _REF_CAUSAL_DIMS
    ]
    non_causal = [
        ConformerLayerConfig(
            model_dim=_REF_NON_CAUSAL_DIM, ffn_mult=4, heads=8, conv_kernel=15,
            causal=False, left_context=30, right_context=rights[i],
        )
        for i in range(10)
    ]
    return EncoderConfig(
        frontend=FrontendConfig(feature_dim=128, stack=4, downsample=3),
        input_block=InputBlockConfig(out_dim=512, num_convs=3, kernel=3),
        causal=causal,
        non_causal=non_causal,
        stack_after=0,
        moe_selector="all",
    )


def reference_moe(
    placement: str = "end",
    num_experts: int = 8,
    expert_mult: int = 4,
    selector: str = "all",
) -> EncoderConfig:
    cfg = reference_baseline()
    cfg.non_causal = [
        replace(l, moe_placement=placement, num_experts=num_experts,
                expert_mult=expert_mult)
        for l in cfg.non_causal
    ]
    cfg.moe_selector = selector
    return cfg


def reference_adapter() -> EncoderConfig:
    cfg = reference_baseline()
    cfg.adapters = AdapterConfig(dim=512, num_groups=12)
    return cfg


def reference_family() -> dict[str, EncoderConfig]:
    """All size-table variants keyed by their short ids."""
    return {
        "b1": reference_baseline(),
        "e1": reference_moe("start", 8, 4),
        "e2": reference_moe("end", 8, 4),
        "e3": reference_moe("both", 8, 4),
        "e4": reference_moe("end", 4, 4),
        "e5": reference_moe("end", 2, 4),
        "e6": reference_moe("end", 8, 4, selector="odd"),
        "e7": reference_moe("end", 8, 4, selector="first_only"),
        "e8": reference_moe("end", 8, 3),
        "e9": reference_moe("end", 16, 3),
        "e10": reference_moe("end", 24, 3),
        "b3": reference_adapter(),
    }


REFERENCE_SIZES_M = {
    # published (total, inference) sizes in millions for the reference family
    "b1": (180, 180),
    "e1": (400, 211),
    "e2": (400, 211),
    "e3": (640, 246),
    "e4": (295, 211),
    "e5": (211, 211),
    "e6": (295, 196),
    "e7": (203, 183),
    "e8": (336, 187),
    "e9": (532, 187),
    "e10": (729, 187),
    "b3": (280, 187),
}
