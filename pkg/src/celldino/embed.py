"""Frozen-backbone feature extraction over a dataset, and the EMB1 file.

EMB1 layout (little-endian): magic "EMB1", version u32, N u64, D u64,
length-prefixed UTF-8 JSON provenance block, N*D f32 matrix, CRC32 of
the matrix payload.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .adapters import ChannelMapSpec, map_channels, replicate_embed
from .binio import (
    FormatError,
    canonical_json,
    check_crc,
    read_json_block,
    read_magic,
    read_u32,
    read_u64,
    write_crc,
    write_json_block,
    write_magic,
    write_u64,
)
from .data import DatasetManifest, dataset_hash, load_image
from .vit import ViTParams, forward_features

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray  # (N, D) float32
    image_ids: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValueError(f"expected (N, D), got shape {self.matrix.shape}")
        if self.matrix.shape[0] != len(self.image_ids):
            raise ValueError(
                f"{self.matrix.shape[0]} rows but {len(self.image_ids)} image ids"
            )

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def backbone_sha256(params: ViTParams) -> str:
    """Hash of the checkpoint-ordered parameter bytes plus config."""
    from .vit import param_order

    h = hashlib.sha256()
    h.update(canonical_json(params.config.__dict__))
    for name, _ in param_order(params.config):
        h.update(np.ascontiguousarray(params.tensors[name].data, dtype="<f4").tobytes())
    return h.hexdigest()


def extract_embeddings(
    manifest: DatasetManifest,
    backbone: ViTParams,
    adapter: ChannelMapSpec | str,
    extra_provenance: dict | None = None,
) -> EmbeddingMatrix:
    """One embedding row per manifest record, in manifest order.

    ``adapter`` is either a ChannelMapSpec or the string "replicate".
    Images are embedded one at a time, so any subset extraction produces
    rows identical to the full run.
    """
    if isinstance(adapter, str) and adapter != "replicate":
        raise ValueError(f"unknown adapter {adapter!r}")
    rows = []
    ids = []
    for record in manifest.records:
        image = load_image(manifest, record)
        if adapter == "replicate":
            rows.append(replicate_embed(image.data, backbone))
        else:
            mapped = map_channels(image.data, adapter)
            rows.append(forward_features(backbone, mapped[None])[0])
        ids.append(record.image_id)
    matrix = np.stack(rows).astype(np.float32)
    if not np.all(np.isfinite(matrix)):
        raise ArithmeticError("embedding matrix contains non-finite values")
    if adapter == "replicate":
        adapter_desc = {"kind": "replicate", "src_channels": len(manifest.channels)}
    else:
        adapter_desc = {
            "kind": "map",
            "dst_channels": adapter.dst_channel_count,
            "assignments": [list(a) for a in adapter.assignments],
        }
    provenance = {
        "backbone_sha256": backbone_sha256(backbone),
        "adapter": adapter_desc,
        "dataset_hash": dataset_hash(manifest),
        "dataset_name": manifest.name,
        "image_ids": ids,
    }
    provenance.update(extra_provenance or {})
    return EmbeddingMatrix(matrix=matrix, image_ids=ids, provenance=provenance)


def save_embeddings(path, emb: EmbeddingMatrix):
    payload = np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes()
    provenance = dict(emb.provenance)
    provenance["image_ids"] = list(emb.image_ids)
    with open(path, "wb") as f:
        write_magic(f, EMB_MAGIC, EMB_VERSION)
        write_u64(f, emb.n)
        write_u64(f, emb.dim)
        write_json_block(f, provenance)
        f.write(payload)
        write_crc(f, payload)


def load_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as f:
        read_magic(f, EMB_MAGIC, EMB_VERSION)
        n = read_u64(f)
        d = read_u64(f)
        provenance = read_json_block(f)
        payload = f.read(n * d * 4)
        if len(payload) != n * d * 4:
            raise FormatError("truncated embedding payload")
        check_crc(f, payload)
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    ids = provenance.get("image_ids")
    if ids is None or len(ids) != n:
        raise FormatError("provenance image_ids missing or wrong length")
    return EmbeddingMatrix(matrix=matrix, image_ids=list(ids), provenance=provenance)
