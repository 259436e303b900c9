"""High-frequency branch: amplitude modulation and frequency-to-spatial attention.

The branch lifts the high band into the spectral domain, reweights bin
amplitudes with a learned nonnegative mask while leaving phases untouched,
drops back to the spatial domain, and lets the modulated map attend over the
original one under a relative-offset bias. Queries come from the modulated
map; keys and values come from the unmodulated input, so the attention reads
"where does the reweighted texture look in the original".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter

LOG_AMP_FLOOR = 1e-6


@dataclass
class FsamParams:
    """Projections, offset bias coefficients, and the mask generator."""

    w_q: Parameter       # (C, d)
    w_k: Parameter       # (C, d)
    w_v: Parameter       # (C, d)
    e_theta: Parameter   # (4,) offset bias coefficients
    mask_w1: Parameter   # (C, C)
    mask_b1: Parameter   # (C,)
    mask_w2: Parameter   # (C, C)
    mask_b2: Parameter   # (C,)
    eps: float = 1e-8

    def __post_init__(self):
        if self.w_q.value.shape[1] < 1:
            raise ValueError("attention width must be at least 1")
        if self.eps <= 0.0:
            raise ValueError("modulation eps must be positive")

    def parameters(self) -> list[Parameter]:
        return [
            self.w_q, self.w_k, self.w_v, self.e_theta,
            self.mask_w1, self.mask_b1, self.mask_w2, self.mask_b2,
        ]


def init_params(rng: np.random.Generator, channels: int, prefix: str = "fsam") -> FsamParams:
    c = channels
    s = 1.0 / np.sqrt(c)
    # mask head starts near one: softplus(b) == 1 at b = log(e - 1)
    b2 = np.full(c, np.log(np.e - 1.0))
    return FsamParams(
        w_q=Parameter(f"{prefix}.w_q", rng.standard_normal((c, c)) * s),
        w_k=Parameter(f"{prefix}.w_k", rng.standard_normal((c, c)) * s),
        w_v=Parameter(f"{prefix}.w_v", rng.standard_normal((c, c)) * s),
        e_theta=Parameter(f"{prefix}.e_theta", np.zeros(4)),
        mask_w1=Parameter(f"{prefix}.mask_w1", rng.standard_normal((c, c)) * s),
        mask_b1=Parameter(f"{prefix}.mask_b1", np.zeros(c)),
        mask_w2=Parameter(f"{prefix}.mask_w2", rng.standard_normal((c, c)) * s * 0.1),
        mask_b2=Parameter(f"{prefix}.mask_b2", b2),
    )


# =====================================================================
# relative-offset bias
# =====================================================================


def token_positions(h: int, w: int) -> np.ndarray:
    """(T, 2) array of (x, y) for raster-ordered tokens."""
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack([xs, ys], axis=1)


def offset_descriptor(pos_i, pos_j) -> np.ndarray:
    """[dx, dy, |dx|, |dy|] between two (x, y) positions."""
    xi, yi = pos_i
    xj, yj = pos_j
    dx = float(xi - xj)
    dy = float(yi - yj)
    return np.array([dx, dy, abs(dx), abs(dy)])


def offset_components(positions: np.ndarray) -> np.ndarray:
    """(4, T, T) stack of pairwise offset descriptors."""
    pos = np.asarray(positions, dtype=np.float64)
    dx = pos[:, 0][:, None] - pos[:, 0][None, :]
    dy = pos[:, 1][:, None] - pos[:, 1][None, :]
    return np.stack([dx, dy, np.abs(dx), np.abs(dy)])


_COMPONENT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _raster_components(h: int, w: int) -> np.ndarray:
    key = (h, w)
    comp = _COMPONENT_CACHE.get(key)
    if comp is None:
        comp = offset_components(token_positions(h, w))
        comp.setflags(write=False)
        _COMPONENT_CACHE[key] = comp
    return comp


def bias_matrix(positions: np.ndarray, e_theta):
    """Pairwise bias B[i, j] = e_theta . descriptor(p_i, p_j).

    ``e_theta`` may be a plain 4-vector (returns an array) or a Parameter
    node (returns a Node for the training graph).
    """
    comp = offset_components(positions)
    if isinstance(e_theta, Node):
        return _bias_from_components(comp, e_theta)
    e = np.asarray(e_theta, dtype=np.float64)
    return np.tensordot(e, comp, axes=1)


def _bias_from_components(comp: np.ndarray, e_theta: Node) -> Node:
    terms = [e_theta[k] * ag.constant(comp[k]) for k in range(4)]
    return terms[0] + terms[1] + terms[2] + terms[3]


# =====================================================================
# attention and modulation
# =====================================================================


def f2s_attention(q, k, v, bias=None) -> Node:
    """softmax(q k^T / sqrt(d) + bias) v over token rows."""
    q, k, v = ag.as_node(q), ag.as_node(k), ag.as_node(v)
    d = q.value.shape[-1]
    logits = (q @ ag.transpose(k)) * (1.0 / np.sqrt(d))
    if bias is not None:
        logits = logits + ag.as_node(bias)
    return ag.softmax(logits, axis=-1) @ v


def amplitude_modulation(re, im, mask, eps: float, sigma: str = "softplus"):
    """Reweight spectral amplitudes, preserving every bin's phase.

    The new amplitude is mask * sigma(|X|); each bin keeps its direction via
    X / (|X| + eps). ``sigma`` is "softplus" in the model and "identity" for
    exactness tests. Zero bins stay exactly zero.
    """
    re, im = ag.as_node(re), ag.as_node(im)
    amp = ag.amplitude_pair(re, im)
    if sigma == "softplus":
        target = ag.softplus(amp)
    elif sigma == "identity":
        target = amp
    else:
        raise ValueError(f"unknown modulation nonlinearity {sigma!r}")
    scale = ag.as_node(mask) * target / (amp + eps)
    return scale * re, scale * im


def _to_tokens(x: Node, c: int, h: int, w: int) -> Node:
    return ag.transpose(ag.reshape(x, (c, h * w)))


def _from_tokens(x: Node, c: int, h: int, w: int) -> Node:
    return ag.reshape(ag.transpose(x), (c, h, w))


def modulation_mask(log_amp: Node, p: FsamParams) -> Node:
    """Two-layer pointwise map from log-amplitudes to a nonnegative mask.

    Input and output are (C, N) with each spectral bin treated independently.
    """
    c = p.mask_w1.value.shape[0]
    hidden = ag.silu(p.mask_w1 @ log_amp + ag.reshape(p.mask_b1, (c, 1)))
    return ag.softplus(p.mask_w2 @ hidden + ag.reshape(p.mask_b2, (c, 1)))


def forward(f_high, p: FsamParams, use_f2s: bool = True, sigma: str = "softplus",
            mask_override=None) -> Node:
    """Run the high-frequency branch on a (C, H, W) map.

    ``mask_override`` freezes the modulation mask to a given array (or
    scalar) for tests; ``use_f2s=False`` drops the relative-offset bias from
    the attention logits. Output shape equals input shape, and a zero map
    comes back exactly zero.
    """
    f_high = ag.as_node(f_high)
    c, h, w = f_high.value.shape
    re, im = ag.fft2_real(f_high)

    if mask_override is None:
        amp = ag.amplitude_pair(re, im)
        log_amp = ag.log(amp + LOG_AMP_FLOOR)
        mask = modulation_mask(ag.reshape(log_amp, (c, h * w)), p)
        mask = ag.reshape(mask, (c, h, w))
    else:
        mask = ag.constant(np.broadcast_to(np.asarray(mask_override, dtype=np.float64), (c, h, w)))

    mod_re, mod_im = amplitude_modulation(re, im, mask, p.eps, sigma=sigma)
    modulated = ag.ifft2_pair_to_real(mod_re, mod_im)

    tokens_mod = _to_tokens(modulated, c, h, w)
    tokens_orig = _to_tokens(f_high, c, h, w)
    q = tokens_mod @ p.w_q
    k = tokens_orig @ p.w_k
    v = tokens_orig @ p.w_v
    bias = _bias_from_components(_raster_components(h, w), p.e_theta) if use_f2s else None
    attended = f2s_attention(q, k, v, bias)

    # residual over the modulation delta keeps the single-token identity:
    # with mask 1, identity sigma, and w_v = I the output returns the input
    out_tokens = attended + (tokens_mod - tokens_orig)
    return _from_tokens(out_tokens, c, h, w)
