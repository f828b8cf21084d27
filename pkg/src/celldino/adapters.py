"""Feeding C_src-channel images to a backbone that expects C_dst channels.

Two strategies: channel mapping assigns source channels to semantically
matching input slots and leaves the rest at exact zero (zero signal in
normalized space); channel replication embeds each source channel
independently through the frozen backbone and concatenates the features,
so the output dimension scales linearly with the channel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vit import ViTParams, forward_features


@dataclass(frozen=True)
class ChannelMapSpec:
    dst_channel_count: int
    assignments: tuple[tuple[int, int], ...]  # (src_index, dst_index) pairs

    def __post_init__(self):
        if self.dst_channel_count < 1:
            raise ValueError("dst_channel_count must be >= 1")
        srcs = [s for s, _ in self.assignments]
        dsts = [d for _, d in self.assignments]
        if len(set(srcs)) != len(srcs):
            raise ValueError(f"duplicate source indices in {self.assignments}")
        if len(set(dsts)) != len(dsts):
            raise ValueError(f"duplicate destination indices in {self.assignments}")
        for d in dsts:
            if not 0 <= d < self.dst_channel_count:
                raise ValueError(f"destination index {d} outside 0..{self.dst_channel_count - 1}")
        for s in srcs:
            if s < 0:
                raise ValueError(f"negative source index {s}")

    @staticmethod
    def identity(channels: int) -> "ChannelMapSpec":
        return ChannelMapSpec(channels, tuple((i, i) for i in range(channels)))

    @staticmethod
    def parse(entries: list[str], dst_channels: int, channel_names: list[str]) -> "ChannelMapSpec":
        """Build from config strings like "protein:0" using manifest channel names."""
        assignments = []
        for entry in entries:
            name, _, slot = entry.partition(":")
            if name not in channel_names:
                raise ValueError(f"unknown channel {name!r}; manifest has {channel_names}")
            assignments.append((channel_names.index(name), int(slot)))
        return ChannelMapSpec(dst_channels, tuple(assignments))


def map_channels(image: np.ndarray, spec: ChannelMapSpec) -> np.ndarray:
    """(C_src, H, W) -> (C_dst, H, W); unmapped destination slots are zero."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {image.shape}")
    c_src, h, w = image.shape
    for s, _ in spec.assignments:
        if s >= c_src:
            raise ValueError(f"source index {s} outside image with {c_src} channels")
    out = np.zeros((spec.dst_channel_count, h, w), dtype=np.float32)
    for s, d in spec.assignments:
        out[d] = image[s]
    return out


def replicate_embed(image: np.ndarray, backbone: ViTParams, broadcast_width: int | None = None) -> np.ndarray:
    """Embed each source channel independently and concatenate in channel order.

    Each channel is broadcast into every input slot of the backbone, so a
    single-channel-derived image matches what the backbone expects.
    Output length is C_src * embed_dim.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {image.shape}")
    if broadcast_width is None:
        broadcast_width = backbone.config.in_channels
    if broadcast_width != backbone.config.in_channels:
        raise ValueError(
            f"broadcast width {broadcast_width} != backbone channels {backbone.config.in_channels}"
        )
    parts = []
    for c in range(image.shape[0]):
        mono = np.broadcast_to(image[c], (broadcast_width,) + image[c].shape)
        parts.append(forward_features(backbone, mono[None])[0])
    return np.concatenate(parts)
