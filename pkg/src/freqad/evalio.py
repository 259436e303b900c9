"""Ranking metrics, the tensor container format, and heatmap export.

The container is a little-endian binary bundle of named arrays:

    magic "HAD1" | u32 record count | records...
    record: u16 name length | name utf-8 | u8 dtype tag | u8 ndim
            | u32 dims... | raw row-major payload

Supported dtype tags are 0 = float32, 1 = float64, 2 = uint8. Round-trips
are bit-exact, and corrupt magic, truncated payloads, and duplicate names
each raise their own error type.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HAD1"

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


class MetricError(ValueError):
    """The inputs cannot support the requested metric."""


class ContainerError(RuntimeError):
    """Malformed container data."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


# =====================================================================
# ranking metrics
# =====================================================================


def _validate_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise MetricError("no instances")
    uniq = np.unique(labels)
    if not np.all(np.isin(uniq, [0, 1])):
        raise MetricError(f"labels must be binary, saw {uniq}")
    if not np.isfinite(scores).all():
        raise MetricError("scores contain non-finite values")
    return scores, labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic; ties count half.

    Equals the probability that a random positive outscores a random
    negative, with ties credited 0.5. Needs both classes present.
    """
    scores, labels = _validate_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs at least one positive and one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    avg_rank = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = avg_rank[inverse]
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Average precision: step-interpolated area under precision-recall.

    Thresholds sweep the distinct score values from high to low; each
    recall increment is weighted by the precision at that threshold.
    """
    scores, labels = _validate_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("pr_auc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.float64)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    boundary = np.r_[s[1:] != s[:-1], True]
    tp = tp[boundary]
    fp = fp[boundary]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def evaluate(pixel_scores, pixel_labels, image_scores, image_labels) -> dict[str, float]:
    """Pooled pixel-level and image-level ROC/PR areas.

    Pixel inputs are sequences of per-image score and label maps; they are
    flattened and pooled before ranking.
    """
    px_s = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in pixel_scores])
    px_l = np.concatenate([np.asarray(l).ravel() for l in pixel_labels])
    return {
        "P_ROC": roc_auc(px_s, px_l),
        "I_ROC": roc_auc(image_scores, image_labels),
        "P_PR": pr_auc(px_s, px_l),
        "I_PR": pr_auc(image_scores, image_labels),
    }


# =====================================================================
# container codec
# =====================================================================


def write_container(path, records) -> None:
    """Serialize named arrays; accepts a dict or (name, array) pairs.

    Only float32, float64, and uint8 arrays are accepted; anything else
    must be converted explicitly by the caller so round-trips stay
    bit-exact.
    """
    items = list(records.items()) if isinstance(records, dict) else list(records)
    seen = set()
    chunks = [MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate record name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        tag = _DTYPE_TO_TAG.get(arr.dtype)
        if tag is None:
            raise ContainerError(f"unsupported dtype {arr.dtype} for record {name!r}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"record name too long ({len(encoded)} bytes)")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> dict[str, np.ndarray]:
    """Parse a container back into an ordered name -> array mapping."""
    data = Path(path).read_bytes()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"container truncated inside {what} (need {n} bytes at offset {pos})")
        out = data[pos : pos + n]
        pos += n
        return out

    if need(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", need(4, "record count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", need(2, "dtype/ndim"))
        dtype = _TAG_TO_DTYPE.get(tag)
        if dtype is None:
            raise ContainerError(f"unknown dtype tag {tag} in record {name!r}")
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim, "dims"))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = need(size * dtype.itemsize, f"payload of {name!r}")
        if name in out:
            raise DuplicateNameError(f"duplicate record name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return out


# =====================================================================
# heatmap export
# =====================================================================


def export_heatmap(path, scores) -> None:
    """Write a score grid as an 8-bit binary PGM, min-max normalized.

    A constant grid maps to all zeros; otherwise the minimum lands on 0 and
    the maximum on 255. Output bytes are a pure function of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"heatmap wants a 2-D grid, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("heatmap scores contain non-finite values")
    lo = scores.min()
    hi = scores.max()
    if hi > lo:
        img = np.rint((scores - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros_like(scores, dtype=np.uint8)
    h, w = scores.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Parse a binary 8-bit PGM written by export_heatmap."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: {path}")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ValueError("only 8-bit PGM supported")
    img = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    if img.size != w * h:
        raise ValueError("PGM payload truncated")
    return img.reshape(h, w)
