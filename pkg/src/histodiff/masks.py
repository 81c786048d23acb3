"""Semantic-mask conditioning tensors.

The denoiser is conditioned on an 8-channel layout: channels 0-6 one-hot
over {background + six nuclei classes}, channel 7 a binary instance-edge
map. The null tensor (all channels zero, distinguishable from an
all-background layout) encodes "no conditioning" for classifier-free
guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .regions import N_FOREGROUND_CLASSES

N_SEMANTIC_CHANNELS = N_FOREGROUND_CLASSES + 1  # background + 6 classes
N_COND_CHANNELS = N_SEMANTIC_CHANNELS + 1  # + instance-edge channel
EDGE_CHANNEL = N_SEMANTIC_CHANNELS


@dataclass
class ConditioningTensor:
    layout: np.ndarray  # (8, H, W) float32, binary entries
    is_null: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.layout.shape


def instance_edges(inst_map: np.ndarray) -> np.ndarray:
    """Binary map of foreground pixels whose 4-neighborhood holds a
    different instance id or background; out-of-bounds neighbors do not
    count as different."""
    inst = np.asarray(inst_map)
    edge = np.zeros(inst.shape, dtype=bool)
    edge[:-1, :] |= inst[:-1, :] != inst[1:, :]
    edge[1:, :] |= inst[1:, :] != inst[:-1, :]
    edge[:, :-1] |= inst[:, :-1] != inst[:, 1:]
    edge[:, 1:] |= inst[:, 1:] != inst[:, :-1]
    edge &= inst > 0
    return edge


def encode(class_map: np.ndarray, inst_map: np.ndarray) -> ConditioningTensor:
    """One-hot semantic channels plus the instance-edge channel."""
    class_map = np.asarray(class_map)
    inst_map = np.asarray(inst_map)
    if class_map.shape != inst_map.shape or class_map.ndim != 2:
        raise DataError(
            f"class_map {class_map.shape} and inst_map {inst_map.shape} must be equal 2-D shapes"
        )
    if class_map.min() < 0 or class_map.max() >= N_SEMANTIC_CHANNELS:
        raise DataError(
            f"class codes must lie in 0..{N_SEMANTIC_CHANNELS - 1}, "
            f"got range [{class_map.min()}, {class_map.max()}]"
        )
    if ((class_map == 0) != (inst_map == 0)).any():
        raise DataError("class_map and inst_map disagree on background pixels")
    h, w = class_map.shape
    layout = np.zeros((N_COND_CHANNELS, h, w), dtype=np.float32)
    rows, cols = np.indices((h, w))
    layout[class_map, rows, cols] = 1.0
    layout[EDGE_CHANNEL] = instance_edges(inst_map)
    return ConditioningTensor(layout=layout, is_null=False)


def null_mask(height: int, width: int) -> ConditioningTensor:
    """The canonical unconditional tensor: all channels zero."""
    return ConditioningTensor(
        layout=np.zeros((N_COND_CHANNELS, height, width), dtype=np.float32), is_null=True
    )


def render_channels(tensor: ConditioningTensor, scale: int = 2) -> np.ndarray:
    """Grayscale strip of all channels side by side, for mask-view output."""
    chans = (tensor.layout * 255).astype(np.uint8)
    c, h, w = chans.shape
    pad = 2
    canvas = np.full((h, c * (w + pad) - pad), 32, dtype=np.uint8)
    for i in range(c):
        canvas[:, i * (w + pad) : i * (w + pad) + w] = chans[i]
    if scale > 1:
        canvas = np.repeat(np.repeat(canvas, scale, axis=0), scale, axis=1)
    return canvas
