"""Model assembly: gate, both branches, fused reconstruction, scores, losses.

A feature map is split into low/high bands by the spectral gate, each band
runs through its branch, and per-channel heads recombine the branch outputs
into a reconstruction. Patch anomaly scores are cosine dissimilarities
between reconstruction and input; pixel maps come from corner-aligned
bilinear upsampling and the image score is the patch maximum.

Training minimizes six cosine-flavoured terms plus an L2 penalty; the terms
pool across the batch and empty index sets contribute zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import fsam as fsam_mod
from . import gscm as gscm_mod
from . import numerics as nm
from . import softgate
from .autograd import Node, Parameter

COS_GUARD = 1e-24


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    rank: int = 4
    gate: softgate.SoftGateConfig = field(default_factory=softgate.SoftGateConfig)
    use_fsam: bool = True
    use_gscm: bool = True
    use_f2s: bool = True
    bias_base_h: int = 8
    bias_base_w: int = 8

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if not 0 < self.rank < self.channels:
            raise ValueError("rank must sit strictly between 0 and channels")


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative term weights plus the loss constants."""

    lambda_n: float = 1.0
    lambda_a: float = 1.0
    lambda_con: float = 1.0
    lambda_an: float = 1.0
    lambda_far: float = 1.0
    lambda_tri: float = 1.0
    lambda_reg: float = 1e-4
    margin_far: float = 0.2
    margin_tri: float = 0.5
    con_temperature: float = 0.1
    con_radius: float = 2.0

    def __post_init__(self):
        for name in ("lambda_n", "lambda_a", "lambda_con", "lambda_an",
                     "lambda_far", "lambda_tri", "lambda_reg"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.con_temperature <= 0.0:
            raise ValueError("contrastive temperature must be positive")


@dataclass
class AnomalyMap:
    """Scores for one sample: patch grid, upsampled pixels, image scalar."""

    patch_scores: np.ndarray
    pixel_scores: np.ndarray | None
    image_score: float


@dataclass
class ForwardState:
    """Node-valued intermediates of one forward pass."""

    gate: softgate.SoftGateState
    high_out: Node
    low_out: Node
    recon: Node


TERM_NAMES = ("n_cos", "a_cos", "con", "an_cos", "far", "tri")


# =====================================================================
# geometry helpers
# =====================================================================


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def edge_pad(feat: np.ndarray, h: int, w: int) -> np.ndarray:
    """Edge-replicate a (C, H0, W0) map up to (C, h, w)."""
    c, h0, w0 = feat.shape
    return np.pad(feat, ((0, 0), (0, h - h0), (0, w - w0)), mode="edge")


def pixel_map(scores: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling of a patch score grid.

    Grid corners map onto output corners, so node values are reproduced
    exactly and 2x2 [[0,1],[0,1]] upsampled to 4x4 has column values
    {0, 1/3, 2/3, 1}. Downsampling is rejected.
    """
    scores = np.asarray(scores, dtype=np.float64)
    in_h, in_w = scores.shape
    if out_h < in_h or out_w < in_w:
        raise ValueError(f"refusing to downsample {in_h}x{in_w} -> {out_h}x{out_w}")

    def axis(n_in: int, n_out: int):
        if n_in == 1 or n_out == 1:
            idx = np.zeros(n_out, dtype=np.intp)
            return idx, idx, np.zeros(n_out)
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
        return lo, lo + 1, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = scores[y0][:, x0] * (1 - fx) + scores[y0][:, x1] * fx
    bot = scores[y1][:, x0] * (1 - fx) + scores[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# =====================================================================
# scores
# =====================================================================


def patch_anomaly_score(recon_vec: np.ndarray, orig_vec: np.ndarray) -> float:
    """1 - cosine for a single patch pair; two zero vectors score 0."""
    return 1.0 - nm.cosine_similarity(recon_vec, orig_vec)


def patch_score_map(recon: np.ndarray, orig: np.ndarray) -> np.ndarray:
    """Vectorized per-patch 1 - cosine over (C, H, W) maps, range [0, 2]."""
    recon = np.asarray(recon, dtype=np.float64)
    orig = np.asarray(orig, dtype=np.float64)
    if recon.shape != orig.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {orig.shape}")
    dot = np.sum(recon * orig, axis=0)
    nr = np.linalg.norm(recon, axis=0)
    no = np.linalg.norm(orig, axis=0)
    both_zero = (nr == 0.0) & (no == 0.0)
    one_zero = ((nr == 0.0) | (no == 0.0)) & ~both_zero
    denom = np.where(nr * no > 0.0, nr * no, 1.0)
    cos = np.clip(dot / denom, -1.0, 1.0)
    cos = np.where(both_zero, 1.0, np.where(one_zero, 0.0, cos))
    return 1.0 - cos


def fuse_reconstruction(high_out, low_out, head_high, head_low) -> Node:
    """Per-channel heads scale each branch before the sum.

    With both heads at one the output is exactly high_out + low_out.
    """
    high_out = ag.as_node(high_out)
    c = high_out.value.shape[0]
    hh = ag.reshape(ag.as_node(head_high), (c, 1, 1))
    hl = ag.reshape(ag.as_node(head_low), (c, 1, 1))
    return hh * high_out + hl * ag.as_node(low_out)


# =====================================================================
# the model
# =====================================================================


class Model:
    """Parameter container plus the forward/score entry points."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        self.gate_scale = Parameter("gate.scale", np.array(1.0))
        self.gate_shift = Parameter("gate.shift", np.array(0.0))
        self.fsam = fsam_mod.init_params(rng, c)
        self.gscm = gscm_mod.init_params(
            rng, c, cfg.rank, base_h=cfg.bias_base_h, base_w=cfg.bias_base_w
        )
        self.head_high = Parameter("fuse.head_high", np.ones(c))
        self.head_low = Parameter("fuse.head_low", np.ones(c))
        self.params = ag.ParamRegistry(
            [self.gate_scale, self.gate_shift]
            + self.fsam.parameters()
            + self.gscm.parameters()
            + [self.head_high, self.head_low]
        )

    def forward(self, feat: np.ndarray) -> ForwardState:
        """Split, run enabled branches, fuse. Deterministic; (C, H, W) only."""
        feat = np.asarray(feat, dtype=np.float64)
        gate = softgate.split(feat, self.cfg.gate, self.gate_scale, self.gate_shift)
        high = fsam_mod.forward(gate.high, self.fsam, use_f2s=self.cfg.use_f2s) \
            if self.cfg.use_fsam else gate.high
        low = gscm_mod.forward(gate.low, self.gscm) if self.cfg.use_gscm else gate.low
        recon = fuse_reconstruction(high, low, self.head_high, self.head_low)
        return ForwardState(gate=gate, high_out=high, low_out=low, recon=recon)

    def reconstruct(self, feat: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.forward(feat).recon.value

    def score(self, feat: np.ndarray, pixel_hw: tuple[int, int] | None = None) -> AnomalyMap:
        """Anomaly scores for one feature map of any (C, H, W) shape.

        Non-power-of-two grids are edge-padded up to the next power of two
        for the transform and the score grid is cropped back afterwards.
        """
        feat = np.asarray(feat, dtype=np.float64)
        c, h, w = feat.shape
        ph, pw = next_pow2(h), next_pow2(w)
        padded = feat if (ph, pw) == (h, w) else edge_pad(feat, ph, pw)
        recon = self.reconstruct(padded)
        scores = patch_score_map(recon, padded)[:h, :w]
        pixels = pixel_map(scores, *pixel_hw) if pixel_hw is not None else None
        return AnomalyMap(
            patch_scores=scores,
            pixel_scores=pixels,
            image_score=float(scores.max()),
        )


# =====================================================================
# losses
# =====================================================================


@dataclass
class LossSample:
    """One sample's contribution to the batch loss."""

    recon: Node
    original: np.ndarray           # (C, H, W) constant
    patch_mask: np.ndarray | None  # (H, W) bool, True on defective patches
    is_anomalous: bool


def _patch_cos(recon: Node, original: np.ndarray) -> Node:
    """(T,) guarded cosine between reconstruction and input per patch."""
    c, h, w = original.shape
    rt = ag.reshape(recon, (c, h * w))
    ot = original.reshape(c, h * w)
    dot = ag.sum_(rt * ag.constant(ot), axis=0)
    nr2 = ag.sum_(rt * rt, axis=0)
    no2 = np.sum(ot * ot, axis=0)
    return dot / ag.sqrt(nr2 * ag.constant(no2) + COS_GUARD)


def _self_cos_matrix(recon: Node, c: int, t: int) -> Node:
    rt = ag.reshape(recon, (c, t))
    inv_norm = 1.0 / ag.sqrt(ag.sum_(rt * rt, axis=0, keepdims=True) + COS_GUARD)
    unit = rt * inv_norm
    return ag.transpose(unit) @ unit


def _grid_neighbourhood(h: int, w: int, radius: float) -> np.ndarray:
    """(T, T) bool: tokens within Euclidean grid distance ``radius``, self excluded."""
    ys, xs = np.divmod(np.arange(h * w), w)
    d2 = (ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2
    near = d2 <= radius * radius
    np.fill_diagonal(near, False)
    return near


def _contrastive_pieces(sample: LossSample, weights: LossWeights):
    """InfoNCE over reconstructed patches of one defective sample.

    Anchors are normal patches with at least one positive (a normal patch
    within the grid radius); positives share the neighbourhood, negatives
    are the defective patches. Returns (sum Node, anchor count).
    """
    c, h, w = sample.original.shape
    t = h * w
    flat_mask = sample.patch_mask.reshape(-1)
    normal = ~flat_mask
    if int(flat_mask.sum()) == 0 or int(normal.sum()) == 0:
        return None, 0
    near = _grid_neighbourhood(h, w, weights.con_radius)
    pos_pairs = near & normal[None, :] & normal[:, None]
    anchors = normal & (pos_pairs.sum(axis=1) > 0)
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        return None, 0

    cmat = _self_cos_matrix(sample.recon, c, t)
    logits = cmat * (1.0 / weights.con_temperature)
    shifted = ag.exp(logits - float(logits.value.max()))
    pos_sum = ag.sum_(shifted * ag.constant(pos_pairs.astype(np.float64)), axis=1)
    neg_cols = np.broadcast_to(flat_mask.astype(np.float64), (t, t))
    neg_sum = ag.sum_(shifted * ag.constant(neg_cols), axis=1)
    ind = anchors.astype(np.float64)
    # keep excluded rows finite; their coefficient in the sum is zero
    safe_pos = pos_sum + ag.constant(1.0 - ind)
    per_anchor = ag.log(safe_pos + neg_sum) - ag.log(safe_pos)
    return ag.sum_(per_anchor * ag.constant(ind)), n_anchor


def _triplet_pieces(sample: LossSample, weights: LossWeights, cmat: Node):
    """Deterministic raster-paired triplets; distance is 1 - cosine."""
    flat_mask = sample.patch_mask.reshape(-1)
    normal_idx = np.flatnonzero(~flat_mask)
    abnormal_idx = np.flatnonzero(flat_mask)
    k = normal_idx.size
    a = abnormal_idx.size
    if k == 0 or a == 0:
        return None, 0
    anchors = normal_idx
    positives = normal_idx[(np.arange(k) + k // 2) % k]
    negatives = abnormal_idx[np.arange(k) % a]
    d_ap = 1.0 - cmat[anchors, positives]
    d_an = 1.0 - cmat[anchors, negatives]
    return ag.sum_(ag.relu(d_ap - d_an + weights.margin_tri)), k


def batch_loss_terms(samples: list[LossSample], weights: LossWeights) -> dict[str, Node]:
    """Six pooled loss terms over a batch; empty index sets give zero."""
    sums = {name: [] for name in TERM_NAMES}
    counts = {name: 0 for name in TERM_NAMES}

    for sample in samples:
        c, h, w = sample.original.shape
        t = h * w
        cos = _patch_cos(sample.recon, sample.original)
        if not sample.is_anomalous or sample.patch_mask is None or not sample.patch_mask.any():
            sums["n_cos"].append(ag.sum_(1.0 - cos))
            counts["n_cos"] += t
            continue

        flat_mask = sample.patch_mask.reshape(-1).astype(bool)
        normal = (~flat_mask).astype(np.float64)
        masked = flat_mask.astype(np.float64)
        n_norm = int(normal.sum())
        n_mask = int(masked.sum())
        if n_norm:
            sums["an_cos"].append(ag.sum_((1.0 - cos) * ag.constant(normal)))
            counts["an_cos"] += n_norm
        if n_mask:
            sums["a_cos"].append(ag.sum_(cos * ag.constant(masked)))
            counts["a_cos"] += n_mask
            sums["far"].append(ag.sum_(ag.relu(cos - weights.margin_far) * ag.constant(masked)))
            counts["far"] += n_mask

        con_sum, con_n = _contrastive_pieces(sample, weights)
        if con_n:
            sums["con"].append(con_sum)
            counts["con"] += con_n

        cmat = _self_cos_matrix(sample.recon, c, t)
        tri_sum, tri_n = _triplet_pieces(sample, weights, cmat)
        if tri_n:
            sums["tri"].append(tri_sum)
            counts["tri"] += tri_n

    terms = {}
    for name in TERM_NAMES:
        if counts[name] == 0:
            terms[name] = ag.constant(0.0)
        else:
            total = sums[name][0]
            for piece in sums[name][1:]:
                total = total + piece
            terms[name] = total * (1.0 / counts[name])
    return terms


def regularizer(params: ag.ParamRegistry) -> Node:
    total = ag.constant(0.0)
    for p in params:
        total = total + ag.sum_(p * p)
    return total


def total_loss(terms: dict, weights: LossWeights, reg) -> Node:
    """Weighted sum of the six terms plus the L2 penalty.

    ``terms`` values and ``reg`` may be Nodes (training) or floats (logs).
    """
    lam = (weights.lambda_n, weights.lambda_a, weights.lambda_con,
           weights.lambda_an, weights.lambda_far, weights.lambda_tri)
    out = None
    for w, name in zip(lam, TERM_NAMES):
        piece = ag.as_node(terms[name]) * w
        out = piece if out is None else out + piece
    return out + ag.as_node(reg) * weights.lambda_reg


def loss_terms(recon, original, patch_mask=None, is_anomalous=False,
               weights: LossWeights | None = None) -> dict[str, float]:
    """Single-sample convenience: the six pooled terms as plain floats."""
    weights = weights or LossWeights()
    with ag.no_grad():
        sample = LossSample(
            recon=ag.as_node(np.asarray(recon, dtype=np.float64)),
            original=np.asarray(original, dtype=np.float64),
            patch_mask=None if patch_mask is None else np.asarray(patch_mask, dtype=bool),
            is_anomalous=is_anomalous,
        )
        terms = batch_loss_terms([sample], weights)
        return {name: float(node.value) for name, node in terms.items()}
