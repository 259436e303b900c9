"""Adaptive spectral gate: radial profiles, soft cutoff selection, band masks.

The gate scores a bank of candidate cutoff radii from the spectrum's annulus
energies, turns the scores into a softmax expectation (one scalar cutoff per
feature map), and builds complementary low/high radial masks around it. In
soft mode the cutoff is differentiable through the score scale and shift; in
hard mode the cutoff is a fixed threshold and nothing flows back.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .autograd import Node

EPS_ENERGY = 1e-12


def _default_candidates() -> np.ndarray:
    return np.linspace(0.1, 0.9, 8)


@dataclass(frozen=True)
class SoftGateConfig:
    """Cutoff candidate bank and gate behaviour.

    candidates: strictly increasing radii in [0, 1], at least two.
    kappa: softmax sharpness over candidate scores; fixed, not learned.
    tau: sigmoid temperature of the radial masks.
    mode: "soft" (adaptive expectation) or "hard" (fixed threshold).
    """

    candidates: np.ndarray = field(default_factory=_default_candidates)
    kappa: float = 8.0
    tau: float = 0.05
    mode: str = "soft"
    hard_threshold: float = 0.5

    def __post_init__(self):
        cand = np.asarray(self.candidates, dtype=np.float64)
        object.__setattr__(self, "candidates", cand)
        if cand.ndim != 1 or cand.size < 2:
            raise ValueError("need at least two cutoff candidates")
        if np.any(np.diff(cand) <= 0.0):
            raise ValueError("cutoff candidates must be strictly increasing")
        if cand[0] < 0.0 or cand[-1] > 1.0:
            raise ValueError("cutoff candidates must lie in [0, 1]")
        if not self.kappa > 0.0:
            raise ValueError("kappa must be positive")
        if not self.tau > 0.0:
            raise ValueError("tau must be positive")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if not 0.0 <= self.hard_threshold <= 1.0:
            raise ValueError("hard threshold must lie in [0, 1]")


def parse_gate_spec(spec: str) -> tuple[str, float]:
    """Parse a ``soft`` or ``hard:<t>`` gate flag into (mode, threshold)."""
    spec = spec.strip()
    if spec == "soft":
        return "soft", 0.5
    if spec.startswith("hard:"):
        try:
            t = float(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad gate threshold in {spec!r}") from None
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"gate threshold {t} outside [0, 1]")
        return "hard", t
    raise ValueError(f"gate spec must be 'soft' or 'hard:<t>', got {spec!r}")


# =====================================================================
# radial geometry
# =====================================================================

_GRID_CACHE: dict[tuple[int, int, bool], np.ndarray] = {}


def radial_grid(h: int, w: int, shifted: bool = True) -> np.ndarray:
    """Normalized radial distance per spectral bin.

    With ``shifted=False`` the layout is centered: bin (H//2, W//2) is zero
    and the corner bin is exactly 1.0. With ``shifted=True`` (the raw FFT
    layout) the DC bin (0, 0) is zero. The normalizer is the corner distance
    hypot(H//2, W//2).
    """
    key = (h, w, shifted)
    grid = _GRID_CACHE.get(key)
    if grid is not None:
        return grid
    if h < 1 or w < 1:
        raise ValueError("grid extents must be positive")
    if shifted:
        dy = (np.arange(h) + h // 2) % h - h // 2
        dx = (np.arange(w) + w // 2) % w - w // 2
    else:
        dy = np.arange(h) - h // 2
        dx = np.arange(w) - w // 2
    grid = np.hypot(dy[:, None], dx[None, :])
    norm = float(np.hypot(h // 2, w // 2))
    grid = grid / norm if norm > 0.0 else grid
    grid.setflags(write=False)
    _GRID_CACHE[key] = grid
    return grid


def annulus_partition(h: int, w: int, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Assign each FFT-layout bin to the innermost candidate annulus.

    Returns (labels, counts): labels[y, x] is the smallest m with
    r(y, x) <= candidates[m], or -1 for bins beyond the last candidate;
    counts[m] is the bin population of annulus m.
    """
    cand = np.asarray(candidates, dtype=np.float64)
    r = radial_grid(h, w, shifted=True)
    labels = np.searchsorted(cand, r, side="left")
    labels = np.where(labels < cand.size, labels, -1).astype(np.intp)
    counts = np.bincount(labels[labels >= 0].ravel(), minlength=cand.size)
    return labels, counts


def annulus_energy_sums(spectrum: np.ndarray, cfg: SoftGateConfig) -> tuple[np.ndarray, np.ndarray]:
    """Total channel-mean energy per annulus, plus bin counts."""
    spectrum = np.asarray(spectrum)
    if spectrum.ndim != 3:
        raise ValueError(f"expected a (C, H, W) spectrum, got shape {spectrum.shape}")
    _, h, w = spectrum.shape
    labels, counts = annulus_partition(h, w, cfg.candidates)
    energy = np.mean(np.abs(spectrum) ** 2, axis=0)
    sums = np.zeros(cfg.candidates.size)
    valid = labels >= 0
    np.add.at(sums, labels[valid], energy[valid])
    return sums, counts


def _log_mean_energy(spectrum: np.ndarray, cfg: SoftGateConfig) -> np.ndarray:
    sums, counts = annulus_energy_sums(spectrum, cfg)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return np.log(means + EPS_ENERGY)


def score_profile(spectrum: np.ndarray, cfg: SoftGateConfig, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
    """Candidate scores J_m = scale * log(E_m + eps) + shift.

    E_m is the mean per-bin energy of annulus m, averaged over channels. An
    empty annulus scores as if it held no energy at all.
    """
    return scale * _log_mean_energy(spectrum, cfg) + shift


def cutoff_expectation(profile, cfg: SoftGateConfig, kappa: float | None = None):
    """Softmax expectation of the candidate radii under kappa-scaled scores.

    Accepts a plain array (returns floats) or a Node (returns Nodes); the
    result is always one scalar cutoff plus the weight vector.
    """
    k = cfg.kappa if kappa is None else float(kappa)
    cand = cfg.candidates
    if isinstance(profile, Node):
        weights = ag.softmax(profile * k, axis=-1)
        cutoff = ag.sum_(weights * ag.constant(cand))
        return cutoff, weights
    weights = nm.stable_softmax(k * np.asarray(profile, dtype=np.float64))
    return float(np.dot(weights, cand)), weights


def build_masks(h: int, w: int, cutoff, cfg: SoftGateConfig):
    """Complementary radial masks in FFT layout around a cutoff.

    Soft mode: mask_high = sigmoid((r - c) / tau); hard mode: an exact
    indicator of r > c. mask_low is always 1 - mask_high, so the pair sums
    to one at every bin. Increasing the cutoff never decreases mask_low.
    """
    r = radial_grid(h, w, shifted=True)
    if cfg.mode == "hard":
        c = cutoff.value if isinstance(cutoff, Node) else cutoff
        high = (r > float(c)).astype(np.float64)
        return ag.constant(1.0 - high), ag.constant(high)
    if isinstance(cutoff, Node):
        high = ag.sigmoid((ag.constant(r) - cutoff) * (1.0 / cfg.tau))
        return 1.0 - high, high
    high = nm.sigmoid((r - float(cutoff)) / cfg.tau)
    return ag.constant(1.0 - high), ag.constant(high)


# =====================================================================
# the full gate
# =====================================================================


@dataclass
class SoftGateState:
    """Everything the gate produced for one feature map (Node fields)."""

    profile: Node      # (M,) candidate scores
    weights: Node      # (M,) softmax weights
    cutoff: Node       # scalar
    mask_low: Node     # (H, W), FFT layout
    mask_high: Node    # (H, W)
    low: Node          # (C, H, W) low-band component
    high: Node         # (C, H, W) high-band component


def split(feat: np.ndarray, cfg: SoftGateConfig, scale=1.0, shift=0.0) -> SoftGateState:
    """Split a feature map into low/high bands around the gate's cutoff.

    ``scale`` and ``shift`` may be Parameters; in soft mode the cutoff (and
    therefore both masks and both bands) is differentiable through them. The
    two bands sum back to the input up to FFT round-off. In hard mode the
    cutoff is pinned to the configured threshold and the profile is reported
    for logging only.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got shape {feat.shape}")
    _, h, w = feat.shape
    spectrum = nm.fft2(feat)
    log_e = _log_mean_energy(spectrum, cfg)

    if cfg.mode == "hard":
        scale_v = scale.value if isinstance(scale, Node) else scale
        shift_v = shift.value if isinstance(shift, Node) else shift
        profile = ag.constant(float(scale_v) * log_e + float(shift_v))
        weights = ag.constant(nm.stable_softmax(cfg.kappa * profile.value))
        cutoff = ag.constant(cfg.hard_threshold)
    else:
        profile = ag.as_node(scale) * ag.constant(log_e) + ag.as_node(shift)
        cutoff, weights = cutoff_expectation(profile, cfg)

    mask_low, mask_high = build_masks(h, w, cutoff, cfg)
    sr = ag.constant(spectrum.real)
    si = ag.constant(spectrum.imag)
    low = ag.ifft2_pair_to_real(mask_low * sr, mask_low * si)
    high = ag.ifft2_pair_to_real(mask_high * sr, mask_high * si)
    return SoftGateState(profile, weights, cutoff, mask_low, mask_high, low, high)
