"""Alternating bi-level optimizer for pixel-reweighted segmentation.

One iteration at step t:

1. virtual step      W' = W - alpha * grad_W mean(R(L; theta) * L(W))
2. meta step         theta <- theta - beta * d(meta loss at W')/d(theta)
3. actual step       W <- W - alpha * grad_W mean(R(L; theta_new) * L(W))

``L`` enters the mask network detached, so the weights act as constant
multipliers in both segmentation steps.  The hypergradient in step 2 is
assembled without second derivatives: a reverse pass of the meta loss at W'
gives a direction g, one forward-mode pass of the training loss map along g
gives the per-pixel inner products s = <dL_q/dW, g>, and a reverse pass
through the mask network with cotangent -alpha * s / (N h w) yields
d(theta).
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from . import networks as nw
from .autodiff import Node, Tape
from .data import Dataset, Sample

HISTORY_COLUMNS = [
    "epoch", "train_weighted_loss", "meta_loss", "test_miou", "test_dice",
    "test_hausdorff", "mean_weight_clean", "mean_weight_corrupted",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``seg_params`` / ``mask_params`` hold the last finite parameters and
    ``history`` the epochs completed before the failure.
    """

    def __init__(self, message, seg_params=None, mask_params=None, history=None):
        super().__init__(message)
        self.seg_params = seg_params
        self.mask_params = mask_params
        self.history = history


@dataclass
class TrainConfig:
    alpha: float = 1e-4
    beta: float = 1e-3
    lr_decay: float = 0.1
    decay_epochs: tuple = (20, 40)
    epochs: int = 60
    batch_size: int = 16
    meta_batch_size: int = 10
    seed: int = 0
    normalize_loss: bool = False
    baseline_optimizer: str = "sgd"
    baseline_alpha: float | None = None  # None: same step size as MCPM
    baseline_include_meta: bool = True
    depth: int = 2
    base_channels: int = 8
    mask_channels: int = 8
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)

    def validate(self) -> None:
        if not (self.alpha > 0 and self.beta >= 0):
            raise ValueError("alpha must be positive and beta non-negative")
        if self.batch_size < 1 or self.meta_batch_size < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.baseline_alpha is not None and not self.baseline_alpha > 0:
            raise ValueError("baseline_alpha must be positive")
        if self.baseline_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.baseline_optimizer!r}")

    def lr_factor(self, epoch: int) -> float:
        """Step decay; ``epoch`` is zero-based."""
        return self.lr_decay ** sum(epoch >= m for m in self.decay_epochs)


@dataclass
class Model:
    """Graph builders for the two networks and the per-pixel loss."""

    seg: Callable[[Node, dict], Node] = nw.seg_net
    mask: Callable[[Node, dict], Node] = nw.mask_net
    loss: Callable[[Node, np.ndarray], Node] = nw.loss_map


DEFAULT_MODEL = Model()


@dataclass
class TrainState:
    W: dict
    theta: dict
    alpha: float
    beta: float
    t: int = 0


@dataclass
class MetaGradient:
    d_theta: dict
    meta_direction: dict  # gradient of the mean meta loss at W'
    inner_products: np.ndarray  # per-pixel <dL_q/dW, meta_direction>, shape of L
    weights: np.ndarray  # R at the current theta
    w_virtual: dict
    meta_loss: float
    train_loss: float  # weighted training loss at W, R
    seg_pass: "SegPass" = field(repr=False)


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, **row) -> None:
        self.records.append({k: row.get(k) for k in HISTORY_COLUMNS})

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for rec in self.records:
                writer.writerow(["" if rec[k] is None else _fmt(rec[k]) for k in HISTORY_COLUMNS])


def _fmt(v):
    return str(v) if isinstance(v, int) else repr(float(v))


# -- parameter arithmetic -------------------------------------------------------

def axpy(a: float, x: dict, y: dict) -> dict:
    """``y + a * x`` per tensor."""
    return {k: y[k] + a * x[k] for k in y}


def _all_finite(params: dict) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())


# -- batches --------------------------------------------------------------------

def as_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(images, labels)`` arrays, a list of samples, or a Dataset."""
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        return batch
    samples = batch.samples if isinstance(batch, Dataset) else list(batch)
    if not samples:
        raise ValueError("batch is empty")
    return (np.stack([s.image for s in samples]), np.stack([s.label for s in samples]))


# -- forward passes kept on tape ------------------------------------------------

class SegPass:
    """Segmentation forward on a batch, kept on tape for repeated VJPs/JVPs."""

    def __init__(self, W: dict, images: np.ndarray, labels: np.ndarray,
                 model: Model = DEFAULT_MODEL):
        self.tape = Tape()
        self.params = nw.leaves(self.tape, W)
        prob = model.seg(self.tape.const(images), self.params)
        self.prob = prob.value
        self.loss = model.loss(prob, labels)
        self.loss_map = self.loss.value
        self.n_pixels = self.loss_map.size

    def grad(self, pixel_weights: np.ndarray) -> dict:
        """Gradient in W of ``sum(pixel_weights * L)``."""
        out = ad.sum(self.tape.const(pixel_weights) * self.loss)
        g = ad.backward(self.tape, out)
        return {k: g[node.id] for k, node in self.params.items()}

    def mean_loss_grad(self) -> tuple[float, dict]:
        return float(self.loss_map.mean()), self.grad(np.full(self.loss_map.shape, 1.0 / self.n_pixels))

    def directional(self, direction: dict) -> np.ndarray:
        """Per-pixel directional derivative of L along ``direction``."""
        tangents = ad.jvp(self.tape, {node.id: direction[k] for k, node in self.params.items()})
        return tangents[self.loss.id]


class MaskPass:
    def __init__(self, theta: dict, loss_map: np.ndarray, model: Model = DEFAULT_MODEL,
                 normalize: bool = False):
        if np.any(loss_map < 0):
            raise ValueError("loss map must be non-negative")
        self.tape = Tape()
        self.params = nw.leaves(self.tape, theta)
        self.weights_node = model.mask(self.tape.const(mask_input(loss_map, normalize)), self.params)
        self.weights = self.weights_node.value

    def vjp(self, cotangent: np.ndarray) -> dict:
        out = ad.sum(self.tape.const(cotangent) * self.weights_node)
        g = ad.backward(self.tape, out)
        return {k: g[node.id] for k, node in self.params.items()}


def mask_input(loss_map: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return loss_map
    axes = tuple(range(1, loss_map.ndim)) if loss_map.ndim == 4 else None
    scale = loss_map.mean(axis=axes, keepdims=True)
    return loss_map / np.maximum(scale, 1e-12)


def weight_map(theta: dict, loss_map: np.ndarray, model: Model = DEFAULT_MODEL,
               normalize: bool = False) -> np.ndarray:
    tape = Tape()
    return model.mask(tape.const(mask_input(loss_map, normalize)), nw.consts(tape, theta)).value


# -- the three steps ------------------------------------------------------------

def weighted_loss(batch, W: dict, theta: dict, model: Model = DEFAULT_MODEL,
                  normalize: bool = False) -> float:
    """Mean over pixels and images of ``R * L`` with R computed from detached L."""
    x, y = as_batch(batch)
    sp = SegPass(W, x, y, model)
    r = weight_map(theta, sp.loss_map, model, normalize)
    return float((r * sp.loss_map).sum() / sp.n_pixels)


def _weighted_step(sp: SegPass, W: dict, r: np.ndarray, alpha: float) -> dict:
    g = sp.grad(r / sp.n_pixels)
    if not _all_finite(g):
        raise DivergenceError("non-finite segmentation gradient")
    return axpy(-alpha, g, W)


def virtual_update(W: dict, theta: dict, batch, alpha: float, model: Model = DEFAULT_MODEL,
                   normalize: bool = False) -> dict:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x, y = as_batch(batch)
    sp = SegPass(W, x, y, model)
    return _weighted_step(sp, W, weight_map(theta, sp.loss_map, model, normalize), alpha)


def actual_update(W: dict, theta_new: dict, batch, alpha: float, model: Model = DEFAULT_MODEL,
                  normalize: bool = False) -> dict:
    # same computation as the virtual step; R now comes from the updated theta
    return virtual_update(W, theta_new, batch, alpha, model, normalize)


def meta_gradient_state(W: dict, theta: dict, train_batch, meta_batch, alpha: float,
                        model: Model = DEFAULT_MODEL, normalize: bool = False,
                        pixel_mask: np.ndarray | None = None,
                        seg_pass: SegPass | None = None) -> MetaGradient:
    """Hypergradient of the meta loss through one virtual step.

    ``pixel_mask`` restricts the contribution to selected training pixels.
    """
    xm, ym = as_batch(meta_batch)
    if len(xm) == 0:
        raise ValueError("meta batch is empty")
    if seg_pass is None:
        x, y = as_batch(train_batch)
        seg_pass = SegPass(W, x, y, model)
    sp = seg_pass
    mp = MaskPass(theta, sp.loss_map, model, normalize)
    r = mp.weights
    train_loss = float((r * sp.loss_map).sum() / sp.n_pixels)
    w_virtual = _weighted_step(sp, W, r, alpha)

    meta = SegPass(w_virtual, xm, ym, model)
    meta_loss, direction = meta.mean_loss_grad()
    if not (math.isfinite(meta_loss) and _all_finite(direction)):
        raise DivergenceError("non-finite meta loss")

    s = sp.directional(direction)
    cot = (-alpha / sp.n_pixels) * s
    if pixel_mask is not None:
        cot = cot * pixel_mask
    d_theta = mp.vjp(cot)
    return MetaGradient(d_theta, direction, s, r, w_virtual, meta_loss, train_loss, sp)


def meta_gradient(W: dict, theta: dict, train_batch, meta_batch, alpha: float,
                  model: Model = DEFAULT_MODEL, normalize: bool = False) -> dict:
    return meta_gradient_state(W, theta, train_batch, meta_batch, alpha, model, normalize).d_theta


def meta_step(state: TrainState, train_batch, meta_batch, model: Model = DEFAULT_MODEL,
              normalize: bool = False) -> dict:
    mg = meta_gradient_state(state.W, state.theta, train_batch, meta_batch, state.alpha,
                             model, normalize)
    return axpy(-state.beta, mg.d_theta, state.theta)


# -- training loops -------------------------------------------------------------

def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def init_params(config: TrainConfig, classes: int = 1):
    init_w, init_theta, _, _ = _streams(config.seed)
    W = nw.init_seg_params(init_w, config.depth, config.base_channels, classes)
    theta = nw.init_mask_params(init_theta, config.mask_channels)
    return W, theta


class _MetaSampler:
    """Batches drawn without replacement; reshuffled when exhausted."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.perm, self.pos = self.rng.permutation(n), 0

    def reshuffle(self):
        self.perm, self.pos = self.rng.permutation(self.n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.size > self.n:
            self.reshuffle()
        idx = self.perm[self.pos:self.pos + self.size]
        self.pos += self.size
        return idx


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _test_row(W, test_set) -> dict:
    if test_set is None or len(test_set) == 0:
        return {}
    rep = metrics.evaluate(W, test_set)
    return {"test_miou": rep.miou, "test_dice": rep.mean_dice, "test_hausdorff": rep.mean_hausdorff}


def _should_eval(config: TrainConfig, epoch: int) -> bool:
    return config.eval_every > 0 and ((epoch + 1) % config.eval_every == 0
                                      or epoch + 1 == config.epochs)


def _checkpoint(config, out_dir, epoch, W, theta=None):
    if not out_dir or config.checkpoint_every <= 0 or (epoch + 1) % config.checkpoint_every:
        return
    tensors = {"seg": W} if theta is None else {"seg": W, "mask": theta}
    nw.save_checkpoint(Path(out_dir) / f"ckpt_epoch{epoch + 1:03d}.mpck", tensors,
                       {"epoch": epoch + 1})


def fit(config: TrainConfig, train_set: Dataset, meta_set: Dataset, test_set: Dataset | None = None,
        model: Model = DEFAULT_MODEL, init: tuple | None = None, out_dir=None,
        log: Callable[[str], None] | None = None):
    """Train with meta reweighting; returns ``(W, theta, History)``."""
    config.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if len(meta_set) == 0:
        raise ValueError("meta set is empty")
    _, _, order_rng, meta_rng = _streams(config.seed)
    classes = train_set[0].label.shape[0]
    W, theta = init if init is not None else init_params(config, classes)
    W, theta = dict(W), dict(theta)
    sampler = _MetaSampler(len(meta_set), config.meta_batch_size, meta_rng)
    x_all, y_all = train_set.images(), train_set.labels()
    band_all = train_set.bands()[:, None].astype(np.float64)
    xm_all, ym_all = meta_set.images(), meta_set.labels()
    history = History()

    for epoch in range(config.epochs):
        factor = config.lr_factor(epoch)
        alpha, beta = config.alpha * factor, config.beta * factor
        sampler.reshuffle()
        losses, meta_losses = [], []
        w_band = w_rest = n_band = n_rest = 0.0
        for idx in _batches(len(train_set), config.batch_size, order_rng):
            midx = sampler.next()
            try:
                sp = SegPass(W, x_all[idx], y_all[idx], model)
                mg = meta_gradient_state(W, theta, None, (xm_all[midx], ym_all[midx]), alpha,
                                         model, config.normalize_loss, seg_pass=sp)
                theta_new = axpy(-beta, mg.d_theta, theta)
                if not _all_finite(theta_new):
                    raise DivergenceError("non-finite mask parameters")
                r_new = weight_map(theta_new, sp.loss_map, model, config.normalize_loss)
                W_new = _weighted_step(sp, W, r_new, alpha)
                if not math.isfinite(mg.train_loss):
                    raise DivergenceError("non-finite training loss")
            except DivergenceError as err:
                raise DivergenceError(f"epoch {epoch}: {err}", W, theta, history) from None
            W, theta = W_new, theta_new
            losses.append(mg.train_loss)
            meta_losses.append(mg.meta_loss)
            band = band_all[idx]
            w_band += float((r_new * band).sum())
            n_band += float(band.sum())
            w_rest += float((r_new * (1 - band)).sum())
            n_rest += float((1 - band).sum())
        row = {
            "epoch": epoch,
            "train_weighted_loss": float(np.mean(losses)),
            "meta_loss": float(np.mean(meta_losses)),
            "mean_weight_clean": w_rest / n_rest if n_rest else None,
            "mean_weight_corrupted": w_band / n_band if n_band else None,
        }
        if _should_eval(config, epoch):
            row.update(_test_row(W, test_set))
        history.append(**row)
        _checkpoint(config, out_dir, epoch, W, theta)
        if log:
            log(_progress(row))
    return W, theta, history


def _merge(a: Dataset, b: Dataset | None) -> Dataset:
    if b is None or len(b) == 0:
        return a
    return Dataset(list(a.samples) + list(b.samples), "train")


def baseline_fit(config: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
                 meta_set: Dataset | None = None, model: Model = DEFAULT_MODEL,
                 init: dict | None = None, out_dir=None,
                 log: Callable[[str], None] | None = None):
    """Unweighted cross-entropy training; returns ``(W, History)``.

    With ``config.baseline_include_meta`` the meta set is appended to the
    training data.
    """
    config.validate()
    data = _merge(train_set, meta_set) if config.baseline_include_meta else train_set
    if len(data) == 0:
        raise ValueError("training set is empty")
    _, _, order_rng, _ = _streams(config.seed)
    classes = data[0].label.shape[0]
    W = dict(init) if init is not None else init_params(config, classes)[0]
    x_all, y_all = data.images(), data.labels()
    adam = _Adam(W) if config.baseline_optimizer == "adam" else None
    alpha0 = config.alpha if config.baseline_alpha is None else config.baseline_alpha
    history = History()

    for epoch in range(config.epochs):
        alpha = alpha0 * config.lr_factor(epoch)
        losses = []
        for idx in _batches(len(data), config.batch_size, order_rng):
            sp = SegPass(W, x_all[idx], y_all[idx], model)
            loss, g = sp.mean_loss_grad()
            if not (math.isfinite(loss) and _all_finite(g)):
                raise DivergenceError(f"epoch {epoch}: non-finite loss", W, None, history)
            W = adam.step(W, g, alpha) if adam else axpy(-alpha, g, W)
            losses.append(loss)
        row = {"epoch": epoch, "train_weighted_loss": float(np.mean(losses))}
        if _should_eval(config, epoch):
            row.update(_test_row(W, test_set))
        history.append(**row)
        _checkpoint(config, out_dir, epoch, W)
        if log:
            log(_progress(row))
    return W, history


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = nw.zeros_like(params)
        self.v = nw.zeros_like(params)
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def step(self, params, grads, lr):
        self.t += 1
        out = {}
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            out[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _progress(row: dict) -> str:
    parts = [f"epoch {row['epoch']:3d}"]
    for key in ("train_weighted_loss", "meta_loss", "test_miou", "mean_weight_clean",
                "mean_weight_corrupted"):
        if row.get(key) is not None:
            parts.append(f"{key}={row[key]:.4f}")
    return " ".join(parts)


def weight_stats(W: dict, theta: dict, dataset: Dataset, model: Model = DEFAULT_MODEL,
                 normalize: bool = False, batch_size: int = 32) -> dict:
    """Mean mask weight on corruption-band vs. remaining training pixels."""
    w_band = w_rest = n_band = n_rest = 0.0
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        sp = SegPass(W, dataset.images(idx), dataset.labels(idx), model)
        r = weight_map(theta, sp.loss_map, model, normalize)
        band = dataset.bands(idx)[:, None]
        w_band += float(r[band].sum())
        n_band += float(band.sum())
        w_rest += float(r[~band].sum())
        n_rest += float((~band).sum())
    return {
        "mean_weight_corrupted": w_band / n_band if n_band else None,
        "mean_weight_clean": w_rest / n_rest if n_rest else None,
        "band_pixels": int(n_band),
    }


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["decay_epochs"] = list(config.decay_epochs)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)
