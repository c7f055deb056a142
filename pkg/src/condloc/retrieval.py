"""Descriptor post-processing, exact cosine index and retrieval localization."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from skimage.transform import resize

from .errors import ArtifactError, DomainError, ShapeError
from .geometry import CameraPose
from .model import ModelParams, NetworkConfig, describe_batch, l2_normalize

DESCRIPTOR_MAGIC = b"CDSC"
DESCRIPTOR_VERSION = 1


@dataclass
class RetrievalConfig:
    multiscale: bool = False
    scales: list = field(default_factory=lambda: [1.0, math.sqrt(2.0), 2.0])
    whitening: bool = False
    whitening_eps: float = 1e-6
    top_k: int = 5


# multi-scale -----------------------------------------------------------------


def rescale(image: np.ndarray, factor: float) -> np.ndarray:
    h, w = image.shape[:2]
    size = (max(1, int(round(h * factor))), max(1, int(round(w * factor))))
    if size == (h, w):
        return np.asarray(image)
    out = resize(image, (*size, image.shape[2]), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    return out.astype(image.dtype)


def combine_scales(per_scale: np.ndarray, p: float) -> np.ndarray:
    """Generalized mean over the first axis of (S, n, K) descriptors, then L2."""
    per_scale = np.asarray(per_scale, dtype=np.float64)
    pooled = np.mean(np.maximum(per_scale, 0.0) ** p, axis=0) ** (1.0 / p)
    return pooled / np.linalg.norm(pooled, axis=-1, keepdims=True)


def multiscale_descriptors(
    params: ModelParams, net: NetworkConfig, images: np.ndarray, conditions, scales: Sequence[float]
) -> np.ndarray:
    if not scales or any(s <= 0 for s in scales):
        raise DomainError("scale factors must be non-empty and positive")
    images = np.asarray(images)
    if len(scales) == 1 and scales[0] == 1.0:
        return describe_batch(params, net, images, conditions)
    per_scale = []
    for s in scales:
        resized = np.stack([rescale(im, s) for im in images])
        if min(resized.shape[1:3]) < net.min_input_size():
            raise ShapeError(f"scale {s} gives {resized.shape[1:3]}, below the network minimum")
        per_scale.append(describe_batch(params, net, resized, conditions))
    return combine_scales(np.stack(per_scale), net.p).astype(per_scale[0].dtype)


def multiscale_descriptor(params, net, image, condition, scale_factors) -> np.ndarray:
    return multiscale_descriptors(params, net, np.asarray(image)[None], [condition], scale_factors)[0]


# whitening -------------------------------------------------------------------


@dataclass(frozen=True)
class WhitenTransform:
    mu: np.ndarray
    W: np.ndarray
    epsilon: float = 1e-6


def positive_difference_covariance(descriptors: np.ndarray, pairs) -> np.ndarray:
    """Second moment of d_i - d_j over the positive pairs (uncentred)."""
    idx = np.asarray(pairs)
    diff = descriptors[idx[:, 0]] - descriptors[idx[:, 1]]
    return diff.T @ diff / len(diff)


def learn_whitening(descriptors: np.ndarray, positive_pairs, epsilon: float = 1e-6) -> WhitenTransform:
    """mu = mean descriptor; W = (C + eps I)^(-1/2) of the positive-difference second moment C."""
    pairs = np.asarray(positive_pairs)
    if pairs.ndim != 2 or len(pairs) < 2:
        raise DomainError("whitening needs at least two positive pairs")
    X = np.asarray(descriptors, dtype=np.float64)
    C = positive_difference_covariance(X, pairs)
    evals, evecs = np.linalg.eigh(C + epsilon * np.eye(len(C)))
    if evals.min() <= 0:
        raise DomainError("positive-difference covariance is singular; use epsilon > 0")
    W = (evecs / np.sqrt(evals)) @ evecs.T
    return WhitenTransform(X.mean(axis=0), W, epsilon)


def apply_whitening(transform: WhitenTransform, descriptor: np.ndarray) -> np.ndarray:
    """normalize(W (d - mu)) for one (K,) descriptor or an (n, K) batch."""
    d = np.asarray(descriptor, dtype=np.float64)
    if d.shape[-1] != len(transform.mu):
        raise ShapeError(f"descriptor has {d.shape[-1]} dims, whitening expects {len(transform.mu)}")
    return l2_normalize((d - transform.mu) @ transform.W.T)


# index -----------------------------------------------------------------------


@dataclass(frozen=True)
class DescriptorIndex:
    image_ids: tuple[str, ...]
    descriptors: np.ndarray
    poses: tuple[CameraPose, ...]
    whitening: WhitenTransform | None = None
    config_hash: str = ""

    def __post_init__(self):
        if len(self.image_ids) != len(set(self.image_ids)):
            raise ShapeError("index image ids must be unique")
        if len(self.image_ids) != len(self.descriptors) or len(self.poses) != len(self.image_ids):
            raise ShapeError("ids, descriptors and poses must have equal length")
        d = np.array(self.descriptors, copy=True)
        d.setflags(write=False)
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "_order_ids", np.asarray(self.image_ids))

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True)
class Match:
    image_id: str
    similarity: float
    pose: CameraPose


def build_index(
    reference_images,
    params: ModelParams,
    net: NetworkConfig,
    options: RetrievalConfig | None = None,
    whitening: WhitenTransform | None = None,
    reference_condition: str = "reference-day",
    config_hash: str = "",
) -> DescriptorIndex:
    """Descriptors of every reference image, computed on the reference branch."""
    options = options or RetrievalConfig()
    refs = list(reference_images)
    if not refs:
        raise DomainError("cannot index an empty reference split")
    images = np.stack([r.pixels for r in refs])
    conds = [reference_condition] * len(refs)
    if options.multiscale:
        d = multiscale_descriptors(params, net, images, conds, options.scales)
    else:
        d = describe_batch(params, net, images, conds)
    if whitening is not None:
        d = apply_whitening(whitening, d)
    return DescriptorIndex(
        tuple(r.image_id for r in refs), np.asarray(d, dtype=np.float32), tuple(r.pose for r in refs),
        whitening, config_hash,
    )


def query_topk(index: DescriptorIndex, descriptor: np.ndarray, k: int = 1) -> list[Match]:
    """Exact top-k by dot product, descending, ties to the smaller image id."""
    if k < 1:
        raise DomainError("k must be >= 1")
    if len(index) == 0:
        raise DomainError("index is empty")
    sims = index.descriptors.astype(np.float64) @ np.asarray(descriptor, dtype=np.float64)
    order = np.lexsort((index._order_ids, -sims))[:k]
    return [Match(index.image_ids[i], float(sims[i]), index.poses[i]) for i in order]


def query_descriptors(params, net, images, conditions, options: RetrievalConfig, whitening=None) -> np.ndarray:
    images = np.asarray(images)
    if options.multiscale:
        d = multiscale_descriptors(params, net, images, conditions, options.scales)
    else:
        d = describe_batch(params, net, images, conditions)
    if whitening is not None:
        d = apply_whitening(whitening, d)
    return np.asarray(d, dtype=np.float32)


def localize_by_retrieval(index, query_image, condition, params, net, options=None) -> tuple[CameraPose, list[Match]]:
    """Pose of the top-1 match, plus the top-k list for diagnostics."""
    options = options or RetrievalConfig()
    d = query_descriptors(params, net, np.asarray(query_image)[None], [condition], options, index.whitening)[0]
    matches = query_topk(index, d, options.top_k)
    return matches[0].pose, matches


# files -----------------------------------------------------------------------


def write_descriptors(path, descriptors: np.ndarray, trailer: dict | None = None) -> Path:
    """b"CDSC", u32 version, u64 count, u32 dim, row-major little-endian f32.

    Index files append a u64 length and a JSON trailer with ids and poses.
    """
    d = np.ascontiguousarray(descriptors, dtype="<f4")
    if d.ndim != 2:
        raise ShapeError("descriptor table must be 2-D")
    body = DESCRIPTOR_MAGIC + struct.pack("<IQI", DESCRIPTOR_VERSION, d.shape[0], d.shape[1]) + d.tobytes()
    if trailer is not None:
        t = json.dumps(trailer, sort_keys=True).encode()
        body += struct.pack("<Q", len(t)) + t
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body)
    return path


def read_descriptors(path) -> tuple[np.ndarray, dict | None]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing descriptor file {path}")
    raw = path.read_bytes()
    if raw[:4] != DESCRIPTOR_MAGIC or len(raw) < 20:
        raise ArtifactError(f"{path} is not a descriptor file")
    version, count, dim = struct.unpack_from("<IQI", raw, 4)
    if version != DESCRIPTOR_VERSION:
        raise ArtifactError(f"unsupported descriptor file version {version}")
    end = 20 + count * dim * 4
    if end > len(raw):
        raise ArtifactError(f"{path} is truncated")
    d = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=20).reshape(count, dim).astype(np.float32)
    trailer = None
    if end < len(raw):
        (n,) = struct.unpack_from("<Q", raw, end)
        if end + 8 + n != len(raw):
            raise ArtifactError(f"{path} has a malformed trailer")
        trailer = json.loads(raw[end + 8 :])
    return d, trailer


def save_index(index: DescriptorIndex, path) -> Path:
    trailer = {
        "config_hash": index.config_hash,
        "image_ids": list(index.image_ids),
        "poses": [{"quaternion_wxyz": list(p.rotation), "translation_xyz": list(p.translation)} for p in index.poses],
        "whitening": None
        if index.whitening is None
        else {"mu": index.whitening.mu.tolist(), "W": index.whitening.W.tolist(), "epsilon": index.whitening.epsilon},
    }
    return write_descriptors(path, index.descriptors, trailer)


def load_index(path) -> DescriptorIndex:
    d, trailer = read_descriptors(path)
    if trailer is None:
        raise ArtifactError(f"{path} holds bare descriptors, not an index")
    w = trailer.get("whitening")
    whitening = None if w is None else WhitenTransform(np.asarray(w["mu"]), np.asarray(w["W"]), w["epsilon"])
    poses = tuple(CameraPose(tuple(p["quaternion_wxyz"]), tuple(p["translation_xyz"])) for p in trailer["poses"])
    return DescriptorIndex(tuple(trailer["image_ids"]), d, poses, whitening, trailer.get("config_hash", ""))
