"""Self-supervised ViT backbone loading with an offline fallback.

Pretrained weights are fetched when the hub is reachable; otherwise the same
architecture is constructed with a seeded random initialization so the
pipeline stays runnable (features are then meaningless for matching quality
but structurally identical). The fallback is loudly logged.
"""

import logging

import torch

logger = logging.getLogger(__name__)

# variant -> (hub id, hidden size, layers, heads)
VARIANTS = {
    "small": ("facebook/dinov2-small", 384, 12, 6),
    "base": ("facebook/dinov2-base", 768, 12, 12),
    "large": ("facebook/dinov2-large", 1024, 24, 16),
}

PATCH_SIZE = 14

# ImageNet statistics used by the backbone's training pipeline.
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


def load_backbone(variant="small", seed=0):
    """Return (model, channels, pretrained_flag) for the named variant."""
    from transformers import Dinov2Config, Dinov2Model

    if variant not in VARIANTS:
        raise ValueError(f"unknown backbone variant '{variant}'")
    hub_id, hidden, layers, heads = VARIANTS[variant]
    try:
        model = Dinov2Model.from_pretrained(hub_id)
        pretrained = True
    except Exception as exc:  # hub unreachable or cache missing
        logger.warning(
            "pretrained weights for %s unavailable (%s); using a seeded "
            "randomly initialized backbone of the same architecture",
            hub_id, type(exc).__name__,
        )
        torch.manual_seed(seed)
        config = Dinov2Config(
            hidden_size=hidden,
            num_hidden_layers=layers,
            num_attention_heads=heads,
            patch_size=PATCH_SIZE,
            image_size=518,
        )
        model = Dinov2Model(config)
        pretrained = False
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, hidden, pretrained
