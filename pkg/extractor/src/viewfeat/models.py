"""Encoder registry: each entry knows how to load its checkpoint, preprocess
images, and reshape the last layer into a patch grid (plus class token)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class EncoderSpec:
    model_id: str
    input_size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    has_class_token: bool
    build: Callable[[], torch.nn.Module]
    forward: Callable[[torch.nn.Module, torch.Tensor], tuple[torch.Tensor, torch.Tensor | None]]
    # forward returns (patch grid [B, Hp, Wp, d], class token [B, d] or None)


def _vit_forward(model, pixels):
    out = model(pixel_values=pixels).last_hidden_state  # [B, 1(+reg) + N, d]
    n_extra = out.shape[1] - (pixels.shape[-1] // model.config.patch_size) * (
        pixels.shape[-2] // model.config.patch_size
    )
    cls = out[:, 0]
    patches = out[:, n_extra:]
    side_h = pixels.shape[-2] // model.config.patch_size
    side_w = pixels.shape[-1] // model.config.patch_size
    grid = patches.reshape(patches.shape[0], side_h, side_w, patches.shape[-1])
    return grid, cls


def _build_dinov2(checkpoint):
    def build():
        from transformers import AutoModel

        model = AutoModel.from_pretrained(checkpoint)
        model.eval()
        return model

    return build


def _build_clip_vision():
    from transformers import CLIPVisionModel

    model = CLIPVisionModel.from_pretrained("openai/clip-vit-base-patch32")
    model.eval()
    return model


def _build_sam_vision():
    from transformers import SamModel

    model = SamModel.from_pretrained("facebook/sam-vit-base").vision_encoder
    model.eval()
    return model


def _sam_forward(model, pixels):
    out = model(pixels)
    emb = out.last_hidden_state if hasattr(out, "last_hidden_state") else out[0]
    # [B, d, Hp, Wp] -> [B, Hp, Wp, d]
    return emb.permute(0, 2, 3, 1), None


def _build_effnet():
    from torchvision.models import efficientnet_b0

    model = efficientnet_b0(weights="IMAGENET1K_V1").features
    model.eval()
    return model


def _cnn_forward(model, pixels):
    emb = model(pixels)  # [B, d, Hp, Wp]
    return emb.permute(0, 2, 3, 1), None


def _build_tiny_debug():
    from transformers import ViTConfig, ViTModel

    torch.manual_seed(0)
    config = ViTConfig(
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        image_size=224,
        patch_size=16,
    )
    model = ViTModel(config, add_pooling_layer=False)
    model.eval()
    return model


REGISTRY: dict[str, EncoderSpec] = {
    "dino-small": EncoderSpec(
        "dino-small", 224, IMAGENET_MEAN, IMAGENET_STD, True,
        _build_dinov2("facebook/dinov2-small"), _vit_forward,
    ),
    "dino-giant": EncoderSpec(
        "dino-giant", 224, IMAGENET_MEAN, IMAGENET_STD, True,
        _build_dinov2("facebook/dinov2-giant"), _vit_forward,
    ),
    "clip-image": EncoderSpec(
        "clip-image", 224, CLIP_MEAN, CLIP_STD, True,
        _build_clip_vision, _vit_forward,
    ),
    "sam-image": EncoderSpec(
        "sam-image", 1024, IMAGENET_MEAN, IMAGENET_STD, False,
        _build_sam_vision, _sam_forward,
    ),
    "effnet": EncoderSpec(
        "effnet", 224, IMAGENET_MEAN, IMAGENET_STD, False,
        _build_effnet, _cnn_forward,
    ),
    # offline deterministic stand-in for development and format tests
    "tiny-debug": EncoderSpec(
        "tiny-debug", 224, IMAGENET_MEAN, IMAGENET_STD, True,
        _build_tiny_debug, _vit_forward,
    ),
}


def preprocess(images: np.ndarray, spec: EncoderSpec) -> torch.Tensor:
    """uint8 [B, H, W] grayscale or [B, H, W, 3] RGB to normalized float tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.shape[1] != spec.input_size or arr.shape[2] != spec.input_size:
        raise ValueError(
            f"{spec.model_id} expects {spec.input_size}x{spec.input_size} input, "
            f"got {arr.shape[1]}x{arr.shape[2]}; re-render at the encoder's resolution"
        )
    x = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    mean = torch.tensor(spec.mean).view(1, 3, 1, 1)
    std = torch.tensor(spec.std).view(1, 3, 1, 1)
    return (x - mean) / std
