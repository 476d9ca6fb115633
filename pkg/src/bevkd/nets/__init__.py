from .blocks import (
    LayerSpec,
    ConvStackSpec,
    ConvStack,
    gradient_reversal,
    voxel_pool,
    lss_transform,
    PatchDiscriminator,
    BevDecoder,
    CenterPointHead,
    BEVEncoderDecoder,
    init_module,
)

__all__ = [
    "LayerSpec", "ConvStackSpec", "ConvStack", "gradient_reversal",
    "voxel_pool", "lss_transform", "PatchDiscriminator", "BevDecoder",
    "CenterPointHead", "BEVEncoderDecoder", "init_module",
]
