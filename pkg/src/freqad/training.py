"""Deterministic data, the frozen patch encoder, Adam, and the train loop.

The encoder is a fixed filter bank over non-overlapping patches; nothing in
it is learned, so features depend only on pixels. The synthetic benchmark
draws per-class textures with seeded generators and injects localized
defects (spots, scratches, texture swaps) with exact pixel masks; every
sample is reproducible from (seed, class, index) alone, which is what makes
the whole training loop bit-deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import evalio
from . import pipeline as pl
from .numerics import NumericsError

# =====================================================================
# frozen patch encoder
# =====================================================================

_BANK_CACHE: dict[tuple[int, int], tuple[np.ndarray, bool]] = {}


def _zigzag_pairs():
    """(a, b) frequency pairs ordered by a+b, skipping DC."""
    pairs = []
    for s in range(1, 16):
        for a in range(s + 1):
            pairs.append((a, s - a))
    return pairs


def _filter_bank(channels: int, patch: int) -> tuple[np.ndarray, bool]:
    """Linear kernels for the bank, plus whether a std channel is included.

    Order: mean, x/y gradients, diagonal, x/y curvature, ring contrast,
    checker, then (from channel 9 on, with the std channel at index 8)
    cosine basis functions in zigzag order. Every kernel except the mean is
    zero-sum and unit-L2, so a constant image excites only the mean channel.
    """
    key = (channels, patch)
    cached = _BANK_CACHE.get(key)
    if cached is not None:
        return cached
    p = patch
    u = (np.arange(p) - (p - 1) / 2.0) / p
    uu, vv = np.meshgrid(u, u, indexing="xy")  # uu varies along x (columns)

    def unit(k):
        k = k - k.mean()
        n = np.linalg.norm(k)
        return k / n if n > 0 else k

    kernels = [np.full((p, p), 1.0 / (p * p))]  # mean responds with the raw mean
    kernels.append(unit(uu))
    kernels.append(unit(vv))
    kernels.append(unit(uu * vv))
    kernels.append(unit(uu * uu))
    kernels.append(unit(vv * vv))
    ring = np.full((p, p), -1.0)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = 1.0
    kernels.append(unit(ring))
    ii, jj = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    kernels.append(unit(np.where((ii + jj) % 2 == 0, 1.0, -1.0)))

    with_std = channels > 8
    n_linear = channels - 1 if with_std else channels
    grid = np.arange(p) + 0.5
    for a, b in _zigzag_pairs():
        if len(kernels) >= n_linear:
            break
        basis = np.cos(np.pi * a * grid[:, None] / p) * np.cos(np.pi * b * grid[None, :] / p)
        kernels.append(unit(basis))
    if len(kernels) < n_linear:
        raise ValueError(f"cannot build {channels} channels at patch size {patch}")
    bank = np.stack(kernels[:n_linear])
    bank.setflags(write=False)
    _BANK_CACHE[key] = (bank, with_std)
    return bank, with_std


def stub_encoder(image: np.ndarray, channels: int = 16, patch: int = 8) -> np.ndarray:
    """Fixed-bank patch features: (H, W) image -> (C, H/p, W/p) float64.

    Deterministic and learning-free. A constant image produces the constant
    in the mean channel and zero everywhere else.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {image.shape}")
    h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    bank, with_std = _filter_bank(channels, patch)
    blocks = image.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    linear = np.tensordot(blocks, bank, axes=([2, 3], [1, 2]))  # (h', w', n_linear)
    feats = [np.moveaxis(linear, -1, 0)]
    if with_std:
        insert_at = 8
        std = blocks.std(axis=(2, 3))[None]
        top, rest = feats[0][:insert_at], feats[0][insert_at:]
        feats = [top, std, rest]
    return np.ascontiguousarray(np.concatenate(feats, axis=0))


# =====================================================================
# synthetic benchmark
# =====================================================================


@dataclass
class SynthSample:
    image: np.ndarray   # (H, W) float64 in [0, 1]
    mask: np.ndarray    # (H, W) uint8, 1 on defective pixels
    class_id: int
    is_anomalous: bool


NOISE_SIGMA = 0.02


def render_base(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Clean texture for a class; classes occupy distinct frequency bands."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    kind = class_id % 3
    level = class_id // 3
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if kind == 0:
        freq = 3.0 + 4.0 * level
        angle = 0.4 + 1.1 * class_id
        t = (xx * np.cos(angle) + yy * np.sin(angle)) / size
        img = 0.5 + 0.33 * np.sin(2.0 * np.pi * freq * t + phase)
    elif kind == 1:
        freq = 5.0 + 3.0 * level
        phase2 = rng.uniform(0.0, 2.0 * np.pi)
        img = 0.5 + 0.33 * np.sin(2.0 * np.pi * freq * xx / size + phase) \
                  * np.sin(2.0 * np.pi * freq * yy / size + phase2)
    else:
        spacing = max(8, 16 - 4 * level)
        sigma = spacing / 3.5
        img = np.full((size, size), 0.35)
        jitter = rng.uniform(-2.0, 2.0, size=(size // spacing + 2, size // spacing + 2, 2))
        for by in range(size // spacing + 2):
            for bx in range(size // spacing + 2):
                cy = by * spacing + spacing / 2 + jitter[by, bx, 0] - spacing
                cx = bx * spacing + spacing / 2 + jitter[by, bx, 1] - spacing
                img += 0.4 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return np.clip(img, 0.0, 1.0)


def inject_defect(image: np.ndarray, class_id: int, classes: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stamp one defect onto a copy of the image; returns (image, mask)."""
    size = image.shape[0]
    out = image.copy()
    mask = np.zeros_like(image, dtype=np.uint8)
    kind = int(rng.integers(0, 3))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    if kind == 0:  # contrast spot
        r = float(rng.uniform(4.0, 8.0))
        cy = float(rng.uniform(r, size - r))
        cx = float(rng.uniform(r, size - r))
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        shift = float(rng.uniform(0.35, 0.55)) * (1 if rng.random() < 0.5 else -1)
        out[disc] = np.clip(out[disc] + shift, 0.0, 1.0)
        mask[disc] = 1
    elif kind == 1:  # scratch line
        length = float(rng.uniform(16.0, 40.0))
        theta = float(rng.uniform(0.0, np.pi))
        cy = float(rng.uniform(8, size - 8))
        cx = float(rng.uniform(8, size - 8))
        dy, dx = np.sin(theta), np.cos(theta)
        # distance from the segment's carrier line, clipped to its extent
        proj = (yy - cy) * dy + (xx - cx) * dx
        perp = np.abs((yy - cy) * dx - (xx - cx) * dy)
        width = float(rng.uniform(0.8, 1.6))
        line = (perp <= width) & (np.abs(proj) <= length / 2)
        shift = float(rng.uniform(0.35, 0.55)) * (1 if rng.random() < 0.5 else -1)
        out[line] = np.clip(out[line] + shift, 0.0, 1.0)
        mask[line] = 1
    else:  # texture swap from a different class
        side = int(rng.integers(10, 21))
        top = int(rng.integers(0, size - side))
        left = int(rng.integers(0, size - side))
        other = (class_id + 1 + int(rng.integers(0, max(classes - 1, 1)))) % max(classes, 2)
        if other == class_id:
            other = (class_id + 1) % max(classes, 2)
        donor = render_base(other, size, rng)
        out[top : top + side, left : left + side] = donor[top : top + side, left : left + side]
        mask[top : top + side, left : left + side] = 1
    return out, mask


def make_sample(seed: int, class_id: int, index: int, size: int, classes: int,
                anomalous: bool) -> SynthSample:
    base_rng = np.random.default_rng([seed, class_id, index, 0])
    image = render_base(class_id, size, base_rng)
    if anomalous:
        defect_rng = np.random.default_rng([seed, class_id, index, 1])
        image, mask = inject_defect(image, class_id, classes, defect_rng)
    else:
        mask = np.zeros((size, size), dtype=np.uint8)
    noise_rng = np.random.default_rng([seed, class_id, index, 2])
    image = np.clip(image + noise_rng.normal(0.0, NOISE_SIGMA, image.shape), 0.0, 1.0)
    return SynthSample(image=image, mask=mask, class_id=class_id, is_anomalous=anomalous)


def synth_dataset(n_per_class: int, classes: int, size: int = 64,
                  anomaly_fraction: float = 0.5, seed: int = 0) -> list[SynthSample]:
    """Deterministic benchmark split, ordered by (class, index).

    The trailing ``anomaly_fraction`` of each class's samples carry one
    injected defect with an exact pixel mask.
    """
    if not 0.0 <= anomaly_fraction <= 1.0:
        raise ValueError("anomaly_fraction must lie in [0, 1]")
    n_anom = int(round(n_per_class * anomaly_fraction))
    out = []
    for cls in range(classes):
        for idx in range(n_per_class):
            anomalous = idx >= n_per_class - n_anom
            out.append(make_sample(seed, cls, idx, size, classes, anomalous))
    return out


def patch_mask_from_pixels(mask: np.ndarray, patch: int) -> np.ndarray:
    """Any-overlap pooling of a pixel mask onto the patch grid."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {h}x{w} not divisible by patch {patch}")
    blocks = mask.reshape(h // patch, patch, w // patch, patch)
    return blocks.any(axis=(1, 3))


@dataclass
class FeatSample:
    """A featurized sample ready for the loss or the scorer."""

    feat: np.ndarray          # (C, h, w)
    patch_mask: np.ndarray    # (h, w) bool
    pixel_mask: np.ndarray    # (H, W) uint8
    is_anomalous: bool
    class_id: int


def featurize(samples: list[SynthSample], channels: int, patch: int) -> list[FeatSample]:
    out = []
    for s in samples:
        out.append(
            FeatSample(
                feat=stub_encoder(s.image, channels, patch),
                patch_mask=patch_mask_from_pixels(s.mask, patch),
                pixel_mask=s.mask,
                is_anomalous=s.is_anomalous,
                class_id=s.class_id,
            )
        )
    return out


# =====================================================================
# gradients and Adam
# =====================================================================


def batch_loss(model: pl.Model, batch: list[FeatSample], weights: pl.LossWeights):
    """Loss node plus term nodes for one batch of featurized samples."""
    samples = []
    for fs in batch:
        state = model.forward(fs.feat)
        mask = fs.patch_mask if fs.is_anomalous else None
        samples.append(pl.LossSample(state.recon, fs.feat, mask, fs.is_anomalous))
    terms = pl.batch_loss_terms(samples, weights)
    total = pl.total_loss(terms, weights, pl.regularizer(model.params))
    return total, terms


def grad(model: pl.Model, batch: list[FeatSample],
         weights: pl.LossWeights) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Backprop through one batch; non-finite values name the culprit."""
    total, terms = batch_loss(model, batch, weights)
    loss = float(total.value)
    if not np.isfinite(loss):
        raise NumericsError(f"non-finite loss {loss}")
    grads = ag.gradients(total, list(model.params))
    out = {}
    for p, g in zip(model.params, grads):
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in parameter {p.name}")
        out[p.name] = g
    return loss, out, {k: float(v.value) for k, v in terms.items()}


def finite_diff(model: pl.Model, batch: list[FeatSample], weights: pl.LossWeights,
                flat_index: int, h: float = 1e-5) -> float:
    """Central difference of the batch loss along one flat parameter index.

    Restores the perturbed scalar bit-exactly before returning.
    """
    reg = model.params

    def value() -> float:
        with ag.no_grad():
            total, _ = batch_loss(model, batch, weights)
            return float(total.value)

    orig = reg.get_flat(flat_index)
    reg.set_flat(flat_index, orig + h)
    hi = value()
    reg.set_flat(flat_index, orig - h)
    lo = value()
    reg.set_flat(flat_index, orig)
    return (hi - lo) / (2.0 * h)


@dataclass
class OptimState:
    """Adam moments per parameter plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: ag.ParamRegistry) -> "OptimState":
        return cls(
            m={p.name: np.zeros_like(p.value) for p in params},
            v={p.name: np.zeros_like(p.value) for p in params},
        )


def adam_step(params: ag.ParamRegistry, grads: dict[str, np.ndarray], state: OptimState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for p in params:
        g = grads[p.name]
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# =====================================================================
# evaluation and the loop
# =====================================================================


def evaluate_model(model: pl.Model, feats: list[FeatSample],
                   pixel_hw: tuple[int, int]) -> dict[str, float]:
    """Pooled pixel and image metrics over a featurized split."""
    pixel_scores, pixel_labels, img_scores, img_labels = [], [], [], []
    for fs in feats:
        amap = model.score(fs.feat, pixel_hw=pixel_hw)
        pixel_scores.append(amap.pixel_scores)
        pixel_labels.append(fs.pixel_mask)
        img_scores.append(amap.image_score)
        img_labels.append(1 if fs.is_anomalous else 0)
    return evalio.evaluate(pixel_scores, pixel_labels, img_scores, img_labels)


@dataclass
class TrainSettings:
    """Desk-scale optimizer and schedule defaults.

    The reference system trains with batch 36 at lr 1e-2 on CLIP ViT-B/16
    features; at this scale batch 8 and lr 1e-3 on the frozen stub encoder
    hold the same role.
    """

    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42


@dataclass
class TrainResult:
    model: pl.Model
    optim: OptimState
    history: list[dict]
    final_metrics: dict[str, float]


def train(model: pl.Model, train_feats: list[FeatSample], val_feats: list[FeatSample],
          settings: TrainSettings, weights: pl.LossWeights,
          pixel_hw: tuple[int, int], log=None) -> TrainResult:
    """Adam over shuffled batches; logs one row per epoch.

    Aborts with NumericsError on a non-finite loss or gradient. Fully
    deterministic for fixed inputs and settings: epoch shuffles derive from
    the settings seed alone.
    """
    optim = OptimState.init(model.params)
    history: list[dict] = []
    n = len(train_feats)
    steps_done = 0
    epoch = 0
    while steps_done < settings.steps:
        order = np.random.default_rng([settings.seed, 777, epoch]).permutation(n)
        losses = []
        for start in range(0, n, settings.batch_size):
            if steps_done >= settings.steps:
                break
            batch = [train_feats[i] for i in order[start : start + settings.batch_size]]
            loss, grads, _ = grad(model, batch, weights)
            adam_step(model.params, grads, optim,
                      lr=settings.lr, beta1=settings.beta1,
                      beta2=settings.beta2, eps=settings.eps)
            losses.append(loss)
            steps_done += 1
        metrics = evaluate_model(model, val_feats, pixel_hw) if val_feats else {}
        row = {"epoch": epoch, "step": steps_done, "loss": float(np.mean(losses))}
        row.update(metrics)
        history.append(row)
        if log is not None:
            log(row)
        epoch += 1
    final = history[-1] if history else {}
    final_metrics = {k: v for k, v in final.items() if k in ("P_ROC", "I_ROC", "P_PR", "I_PR")}
    return TrainResult(model=model, optim=optim, history=history, final_metrics=final_metrics)


# =====================================================================
# checkpoints
# =====================================================================


def save_checkpoint(path, model: pl.Model, optim: OptimState, config_text: str) -> None:
    """Container with parameters, optimizer moments, and the config echo."""
    records: list[tuple[str, np.ndarray]] = []
    for p in model.params:
        records.append((f"param/{p.name}", p.value))
    for name, arr in optim.m.items():
        records.append((f"adam/m/{name}", arr))
    for name, arr in optim.v.items():
        records.append((f"adam/v/{name}", arr))
    records.append(("adam/step", np.float64(optim.step)))
    records.append(("config", np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8)))
    evalio.write_container(path, records)


def load_checkpoint_records(path) -> tuple[dict[str, np.ndarray], str]:
    """Raw checkpoint records plus the decoded config text."""
    records = evalio.read_container(path)
    if "config" not in records:
        raise evalio.ContainerError("checkpoint has no config record")
    config_text = records["config"].tobytes().decode("utf-8")
    return records, config_text


def restore_model(model: pl.Model, records: dict[str, np.ndarray]) -> OptimState:
    """Load parameters and optimizer state into a freshly built model."""
    optim = OptimState.init(model.params)
    for p in model.params:
        key = f"param/{p.name}"
        if key not in records:
            raise evalio.ContainerError(f"checkpoint is missing {key}")
        if records[key].shape != p.value.shape:
            raise evalio.ContainerError(
                f"checkpoint shape {records[key].shape} != model shape {p.value.shape} for {key}"
            )
        p.value[...] = records[key]
        if f"adam/m/{p.name}" in records:
            optim.m[p.name][...] = records[f"adam/m/{p.name}"]
            optim.v[p.name][...] = records[f"adam/v/{p.name}"]
    optim.step = int(records.get("adam/step", np.float64(0.0)))
    return optim
