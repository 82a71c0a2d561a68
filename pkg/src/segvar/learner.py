"""Desk-scale differentiable segmentation learner.

One shared stage of C 3x3 filters (stride 1, zero same-padding, rectifier)
feeds one or two task-specific 1x1 heads with logistic-sigmoid outputs, so
the output resolution always equals the input resolution and the two task
maps may overlap (no softmax). Training minimizes the smoothed soft-Dice
loss with bias-corrected Adam; gradients are computed analytically.

Everything is deterministic given (seed, training ids, kind, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import Batch, augment_pipeline
from .imgcore import DEPTH_MAXVAL, BinaryMask, GrayImage, ValueMap, load_pnm

EPS = 1e-7

KIND_TASKS = {
    "srsn-tumor": ("tumor",),
    "srsn-rectum": ("rectum",),
    "mrsn": ("tumor", "rectum"),
    "mrsn-aug": ("tumor", "rectum"),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 20
    epochs: int = 40
    seed: int = 0
    task_weights: tuple = (1.0, 1.0)
    threshold: float = 0.5
    filters: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0,1)")
        if self.filters < 1:
            raise ValueError("filters must be >= 1")


@dataclass
class ToyNet:
    shared_w: np.ndarray  # (C, 3, 3) filter taps
    shared_b: np.ndarray  # (C,) per-filter offsets
    head_w: np.ndarray    # (T, C) 1x1 mixing weights
    head_b: np.ndarray    # (T,) head offsets
    tasks: tuple

    def params(self):
        return {
            "shared_w": self.shared_w,
            "shared_b": self.shared_b,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }

    def task_index(self, task):
        try:
            return self.tasks.index(task)
        except ValueError:
            raise KeyError(f"net has no task {task!r}, tasks are {self.tasks}") from None


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_he_normal(fan_in, rng, size=None):
    """Zero-mean normal draw with std sqrt(2/fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=size)


def init_glorot_uniform(fan_in, fan_out, rng, size=None):
    """Uniform draw on +-sqrt(6/(fan_in+fan_out)).

    Provided for transposed stages; the default single-resolution net has
    none and does not consume it.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=size)


def init_net(kind, rng, filters=8):
    """Fresh network for a model kind; offsets start at zero.

    Draw order is fixed (shared filters, tumor head, then rectum head) so
    that the shared stage and the tumor head of an MRSN coincide with those
    of an SRSN-tumor initialized from the same seed.
    """
    tasks = KIND_TASKS[kind]
    shared_w = init_he_normal(9, rng, size=(filters, 3, 3))
    head_w = np.stack([init_he_normal(filters, rng, size=(filters,)) for _ in tasks])
    return ToyNet(
        shared_w=shared_w,
        shared_b=np.zeros(filters),
        head_w=head_w,
        head_b=np.zeros(len(tasks)),
        tasks=tasks,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _shift_stack(x):
    """(B,H,W) -> (B,9,H,W) of zero-padded 3x3 neighborhoods."""
    b, h, w = x.shape
    xp = np.zeros((b, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.empty((b, 9, h, w))
    k = 0
    for dy in range(3):
        for dx in range(3):
            out[:, k] = xp[:, dy : dy + h, dx : dx + w]
            k += 1
    return out


def _forward_batch(net, x):
    """Returns (xs, s, a, p) with flattened pixels: (B,9,N), (B,C,N), (B,C,N), (B,T,N)."""
    b, h, w = x.shape
    c = net.shared_w.shape[0]
    xs = _shift_stack(x).reshape(b, 9, h * w)
    s = net.shared_w.reshape(c, 9) @ xs  # (B,C,N) via broadcast matmul
    s += net.shared_b[None, :, None]
    a = np.maximum(s, 0.0)
    z = net.head_w @ a
    z += net.head_b[None, :, None]
    return xs, s, a, _sigmoid(z)


def forward(net: ToyNet, x):
    """Per-task probability maps for one image in [0,1] (float array)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("forward expects a nonempty 2-D array")
    p = _forward_batch(net, x[None])[3][0]
    return {task: ValueMap(p[t].reshape(x.shape)) for t, task in enumerate(net.tasks)}


def dsc_loss(p: ValueMap, g: BinaryMask):
    """Smoothed soft-Dice loss, in [-1, 0]; -1 means perfect overlap."""
    if p.data.shape != g.data.shape:
        raise ValueError("prediction and truth shapes differ")
    return float(_dsc_loss_arr(p.data, g.data.astype(np.float64)))


def _dsc_loss_arr(p, g):
    num = 2.0 * float((p * g).sum()) + EPS
    den = float((p * p).sum()) + float((g * g).sum()) + EPS
    return -num / den


def dsc_loss_grad(p: ValueMap, g: BinaryMask):
    """Exact gradient of dsc_loss with respect to each prediction pixel."""
    if p.data.shape != g.data.shape:
        raise ValueError("prediction and truth shapes differ")
    return _dsc_grad_arr(p.data, g.data.astype(np.float64))


def _dsc_grad_arr(p, g):
    num = 2.0 * (p * g).sum() + EPS
    den = (p * p).sum() + (g * g).sum() + EPS
    return -2.0 * (g * den - p * num) / (den * den)


def loss_and_grads(net: ToyNet, x, g, task_weights):
    """Mean task-weighted Dice loss over a batch, with parameter gradients.

    x: (B,H,W) inputs in [0,1]; g: (B,T,H,W) binary truths aligned with
    net.tasks; returns (loss, grads keyed like net.params()).
    """
    b = x.shape[0]
    n_tasks = len(net.tasks)
    w = np.asarray(task_weights[:n_tasks], dtype=np.float64)
    xs, s, a, p = _forward_batch(net, x)
    gf = g.reshape(b, n_tasks, -1)
    # per-image Dice terms, all at once
    num = 2.0 * (p * gf).sum(axis=2) + EPS          # (B,T)
    den = (p * p).sum(axis=2) + (gf * gf).sum(axis=2) + EPS
    loss = float((w[None, :] * (-num / den)).sum() / b)
    dp = -2.0 * (gf * den[:, :, None] - p * num[:, :, None]) / (den * den)[:, :, None]
    dp *= (w / b)[None, :, None]
    dz = dp * p * (1.0 - p)
    c = net.shared_w.shape[0]
    grads = {}
    grads["head_w"] = (dz @ a.transpose(0, 2, 1)).sum(axis=0)
    grads["head_b"] = dz.sum(axis=(0, 2))
    da = net.head_w.T @ dz
    ds = da * (s > 0.0)
    grads["shared_b"] = ds.sum(axis=(0, 2))
    grads["shared_w"] = (ds @ xs.transpose(0, 2, 1)).sum(axis=0).reshape(c, 3, 3)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def init_adam(params):
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
    )


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update, in place; returns the incremented state."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for k, p in params.items():
        gk = grads[k]
        if gk.shape != p.shape:
            raise ValueError(f"gradient shape mismatch on {k}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * gk
        state.v[k] = b2 * state.v[k] + (1 - b2) * gk * gk
        m_hat = state.m[k] / (1 - b1**t)
        v_hat = state.v[k] / (1 - b2**t)
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def load_items(manifest, ids):
    """Load (image, (tumor mask, rectum mask)) tuples for the given ids."""
    items = []
    for sample_id in ids:
        rec = manifest.by_id(sample_id)
        img = load_pnm(manifest.resolve(rec.image))
        tumor = load_pnm(manifest.resolve(rec.tumor_mask))
        rectum = load_pnm(manifest.resolve(rec.rectum_mask))
        items.append((img, {"tumor": tumor, "rectum": rectum}))
    return items


def _item_arrays(net, images, mask_dicts):
    x = np.stack([img.data for img in images]).astype(np.float64)
    x /= DEPTH_MAXVAL[images[0].depth]
    g = np.stack(
        [
            np.stack([masks[t].data for t in net.tasks])
            for masks in mask_dicts
        ]
    ).astype(np.float64)
    return x, g


def train_on_items(kind, items, rng, cfg: TrainConfig, aug_cfg=None, loss_log=None):
    """Train one model on in-memory items; see `train` for the file-backed path."""
    if not items:
        raise ValueError("empty training set")
    net = init_net(kind, rng, filters=cfg.filters)
    state = init_adam(net.params())
    n = len(items)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            images = [items[i][0] for i in take]
            masks = [items[i][1] for i in take]
            if aug_cfg is not None:
                batch = Batch(images, [(m["rectum"], m["tumor"]) for m in masks])
                batch = augment_pipeline(batch, rng, aug_cfg)
                images = batch.images
                masks = [{"rectum": r, "tumor": t} for r, t in batch.masks]
            x, g = _item_arrays(net, images, masks)
            loss, grads = loss_and_grads(net, x, g, cfg.task_weights)
            adam_step(net.params(), grads, state, cfg)
            epoch_loss += loss
            n_batches += 1
        if loss_log is not None:
            loss_log.append(epoch_loss / n_batches)
    return net


def train(kind, train_ids, manifest, rng, cfg: TrainConfig, aug_cfg=None, loss_log=None):
    """Train one model kind on the given manifest ids.

    `aug_cfg` enables the per-mini-batch augmentation path (the -AUG
    condition); pass None to train on the images as stored.
    """
    if kind not in KIND_TASKS:
        raise ValueError(f"unknown model kind {kind!r}")
    items = load_items(manifest, train_ids)
    return train_on_items(kind, items, rng, cfg, aug_cfg=aug_cfg, loss_log=loss_log)


def predict_mask(net: ToyNet, img: GrayImage, task, threshold=0.5):
    """Binarize one head's probability map: pixel = 1 iff p > threshold."""
    t = net.task_index(task)
    x = img.data.astype(np.float64) / DEPTH_MAXVAL[img.depth]
    p = _forward_batch(net, x[None])[3][0, t].reshape(x.shape)
    return BinaryMask((p > threshold).astype(np.uint8))


# ---------------------------------------------------------------------------
# Parameter files: flat little-endian float64 plus a JSON sidecar
# ---------------------------------------------------------------------------

_PARAM_ORDER = ("shared_w", "shared_b", "head_w", "head_b")


def save_net(net: ToyNet, path, kind, seed=None, config_hash=""):
    path = Path(path)
    params = net.params()
    flat = np.concatenate([params[k].ravel() for k in _PARAM_ORDER])
    path.write_bytes(flat.astype("<f8").tobytes())
    sidecar = {
        "format": "float64-le",
        "kind": kind,
        "tasks": list(net.tasks),
        "filters": int(net.shared_w.shape[0]),
        "shapes": {k: list(params[k].shape) for k in _PARAM_ORDER},
        "seed": seed,
        "config_hash": config_hash,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_net(path):
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    arrays = {}
    off = 0
    for k in _PARAM_ORDER:
        shape = tuple(sidecar["shapes"][k])
        n = int(np.prod(shape))
        arrays[k] = flat[off : off + n].reshape(shape).copy()
        off += n
    net = ToyNet(
        shared_w=arrays["shared_w"],
        shared_b=arrays["shared_b"],
        head_w=arrays["head_w"],
        head_b=arrays["head_b"],
        tasks=tuple(sidecar["tasks"]),
    )
    return net, sidecar
