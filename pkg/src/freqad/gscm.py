"""Low-frequency branch: dynamic affinity, token modulation, gated memory scan.

Tokens of the low band attend through a low-rank affinity with a relative
offset-bucket bias, get rescaled and shifted pointwise, and are aggregated
into a context sequence. A causal gated memory unit then scans the sequence
in raster order, mixing each fresh candidate with the carried state, and the
scan output gates the aggregated context before a coordinate projection is
added back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter


@dataclass
class GscmParams:
    """Affinity, modulation, recurrence, and fusion parameters.

    The relative bias is an offset-bucket table sized for a base grid;
    offsets from larger maps clamp into its range, so one table serves any
    resolution.
    """

    w_q: Parameter      # (C, rank) affinity query
    w_k: Parameter      # (C, rank) affinity key
    b_rel: Parameter    # (2*base_h - 1, 2*base_w - 1) offset-bucket table
    w_pi: Parameter     # (C, C) diagonal scale head
    w_gamma: Parameter  # (C, C) shift head
    w_o: Parameter      # (C, C) scan output projection
    w_d: Parameter      # (C, C) fresh-candidate projection
    w_gd: Parameter     # (C, C) mix gate
    w_r: Parameter      # (C, C) reset gate
    w_go: Parameter     # (C, C) fusion gate
    w_c: Parameter      # (C, 4) coordinate projection
    w_u: Parameter      # (C, C, 3, 3) local conv for the multiplicative path
    b_u: Parameter      # (C,)
    base_h: int = 8
    base_w: int = 8

    def __post_init__(self):
        c, rank = self.w_q.value.shape
        if rank >= c:
            raise ValueError(f"affinity rank {rank} must be below the channel count {c}")
        expect = (2 * self.base_h - 1, 2 * self.base_w - 1)
        if self.b_rel.value.shape != expect:
            raise ValueError(f"bias table shape {self.b_rel.value.shape} != {expect}")

    @property
    def rank(self) -> int:
        return self.w_q.value.shape[1]

    def parameters(self) -> list[Parameter]:
        return [
            self.w_q, self.w_k, self.b_rel, self.w_pi, self.w_gamma, self.w_o,
            self.w_d, self.w_gd, self.w_r, self.w_go, self.w_c, self.w_u, self.b_u,
        ]


def init_params(rng: np.random.Generator, channels: int, rank: int,
                base_h: int = 8, base_w: int = 8, prefix: str = "gscm") -> GscmParams:
    c = channels
    s = 1.0 / np.sqrt(c)

    def mat(name, shape, scale=s):
        return Parameter(f"{prefix}.{name}", rng.standard_normal(shape) * scale)

    return GscmParams(
        w_q=mat("w_q", (c, rank)),
        w_k=mat("w_k", (c, rank)),
        b_rel=Parameter(f"{prefix}.b_rel", np.zeros((2 * base_h - 1, 2 * base_w - 1))),
        w_pi=mat("w_pi", (c, c)),
        w_gamma=mat("w_gamma", (c, c)),
        w_o=mat("w_o", (c, c)),
        w_d=mat("w_d", (c, c)),
        w_gd=mat("w_gd", (c, c)),
        w_r=mat("w_r", (c, c)),
        w_go=mat("w_go", (c, c)),
        w_c=Parameter(f"{prefix}.w_c", np.zeros((c, 4))),
        w_u=mat("w_u", (c, c, 3, 3), scale=1.0 / np.sqrt(9 * c)),
        b_u=Parameter(f"{prefix}.b_u", np.zeros(c)),
        base_h=base_h,
        base_w=base_w,
    )


# =====================================================================
# affinity
# =====================================================================

_BUCKET_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray]] = {}


def _bucket_indices(h: int, w: int, base_h: int, base_w: int) -> tuple[np.ndarray, np.ndarray]:
    key = (h, w, base_h, base_w)
    cached = _BUCKET_CACHE.get(key)
    if cached is None:
        t = h * w
        ys, xs = np.divmod(np.arange(t), w)
        dy = ys[:, None] - ys[None, :]
        dx = xs[:, None] - xs[None, :]
        iy = np.clip(dy, -(base_h - 1), base_h - 1) + base_h - 1
        ix = np.clip(dx, -(base_w - 1), base_w - 1) + base_w - 1
        cached = (iy.astype(np.intp), ix.astype(np.intp))
        _BUCKET_CACHE[key] = cached
    return cached


def relative_bias(h: int, w: int, p: GscmParams) -> Node:
    """(T, T) bias looked up from the offset-bucket table."""
    iy, ix = _bucket_indices(h, w, p.base_h, p.base_w)
    return p.b_rel[iy, ix]


def dynamic_affinity(tokens, p: GscmParams, h: int, w: int) -> Node:
    """Row-softmax of the low-rank token affinity plus relative bias."""
    x = ag.as_node(tokens)
    q = x @ p.w_q
    k = x @ p.w_k
    logits = (q @ ag.transpose(k)) * (1.0 / np.sqrt(p.rank)) + relative_bias(h, w, p)
    return ag.softmax(logits, axis=-1)


def token_modulation(tokens, p: GscmParams) -> Node:
    """Per-token diagonal scale plus learned shift.

    Row t becomes sigmoid(w_pi x_t) * x_t + w_gamma x_t; the sigmoid keeps
    the diagonal scale in (0, 1).
    """
    x = ag.as_node(tokens)
    scale = ag.sigmoid(x @ ag.transpose(p.w_pi))
    return scale * x + x @ ag.transpose(p.w_gamma)


def aggregate(affinity, modulated) -> Node:
    """Context sequence: silu of affinity-weighted modulated tokens."""
    return ag.silu(ag.as_node(affinity) @ ag.as_node(modulated))


# =====================================================================
# gated memory scan
# =====================================================================


def dmu_step(u_t, v_t, s_prev, p: GscmParams, force_gate=None):
    """One step of the gated memory unit.

    Returns (out, s_next). The mixed memory m_t is a convex combination of
    the carried state and a reset-modulated softplus candidate, so it stays
    inside the elementwise hull of the two; the emitted token multiplies the
    local feature u_t, which makes a zero u_t silence the step entirely.
    ``force_gate`` pins the mix gate for tests (0 -> all fresh, 1 -> all
    carry).
    """
    u = ag.as_node(u_t)
    v = ag.as_node(v_t)
    s = ag.as_node(s_prev)
    if force_gate is None:
        gate = ag.sigmoid(p.w_gd @ v)
    else:
        gate = ag.constant(np.broadcast_to(np.asarray(force_gate, dtype=np.float64), u.value.shape))
    reset = ag.sigmoid(p.w_r @ v)
    fresh = ag.softplus(p.w_d @ (reset * v))
    mixed = gate * s + (1.0 - gate) * fresh
    out = p.w_o @ (u * ag.silu(v + mixed))
    return out, mixed


def dmu_scan(u_tokens, v_tokens, p: GscmParams, force_gate=None) -> Node:
    """Raster-order scan with zero initial state; returns (T, C) outputs."""
    u = ag.as_node(u_tokens)
    v = ag.as_node(v_tokens)
    t_len, c = v.value.shape
    state = ag.constant(np.zeros(c))
    outs = []
    for t in range(t_len):
        out, state = dmu_step(u[t], v[t], state, p, force_gate=force_gate)
        outs.append(out)
    return ag.stack(outs, axis=0)


def coordinate_features(h: int, w: int) -> np.ndarray:
    """(T, 4) raster-order position code (x/W, y/H, xy/(WH), 1)."""
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack(
        [xs / w, ys / h, (xs * ys) / (w * h), np.ones(h * w)], axis=1
    )


def output_fusion(scan_tokens, context, p: GscmParams, h: int, w: int) -> Node:
    """Gate the context by the scan output and add the coordinate code."""
    x = ag.as_node(scan_tokens)
    gate = ag.sigmoid(x @ ag.transpose(p.w_go))
    coord = ag.constant(coordinate_features(h, w)) @ ag.transpose(p.w_c)
    return gate * ag.as_node(context) + coord


def conv3x3(x, weight, bias) -> Node:
    """Depth-preserving 3x3 convolution with zero padding, (C, H, W) in/out."""
    c, h, w = ag.as_node(x).value.shape
    o = weight.value.shape[0]
    xp = ag.pad_hw(ag.as_node(x), (1, 1), (1, 1))
    acc = None
    for dy in range(3):
        for dx in range(3):
            patch = ag.reshape(xp[:, dy : dy + h, dx : dx + w], (c, h * w))
            term = weight[:, :, dy, dx] @ patch
            acc = term if acc is None else acc + term
    acc = acc + ag.reshape(bias, (o, 1))
    return ag.reshape(acc, (o, h, w))


# =====================================================================
# the full branch
# =====================================================================


def forward(f_low, p: GscmParams) -> Node:
    """Run the low-frequency branch on a (C, H, W) map."""
    f_low = ag.as_node(f_low)
    c, h, w = f_low.value.shape
    tokens = ag.transpose(ag.reshape(f_low, (c, h * w)))

    affinity = dynamic_affinity(tokens, p, h, w)
    context = aggregate(affinity, token_modulation(tokens, p))

    local = conv3x3(f_low, p.w_u, p.b_u)
    u_tokens = ag.transpose(ag.reshape(local, (c, h * w)))

    scanned = dmu_scan(u_tokens, context, p)
    fused = output_fusion(scanned, context, p, h, w)
    return ag.reshape(ag.transpose(fused), (c, h, w))
