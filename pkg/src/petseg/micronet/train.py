"""Minibatch training loop and inference helpers."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..augment import AugmentationSpec, sample_transform, warp_arrays
from ..errors import EmptyInputError, ShapeError
from ..volume_io import LabelMap, Volume3D
from .loss import LossSpec, loss_and_grad
from .optim import OptimizerState, sgd_step

TRAIN_DEFAULTS = {"epochs": 1000, "batch_size": 8, "learning_rate": 0.01, "momentum": 0.99}


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    monitor: list = field(default_factory=list)
    seconds: float = 0.0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_loss)

    def to_dict(self) -> dict:
        return {
            "epoch_loss": list(self.epoch_loss),
            "monitor": list(self.monitor),
            "stopped_early": self.stopped_early,
        }


def _as_arrays(item):
    x, y = item
    if isinstance(x, Volume3D):
        x = x.data[None]
    if isinstance(y, LabelMap):
        y = y.labels
    return np.asarray(x), np.asarray(y)


def _augment(x, y, spec: AugmentationSpec, seed: int, spacing):
    t = sample_transform(spec, seed)
    if t.is_identity:
        return x, y
    return warp_arrays(x, y, spacing, t)


def train(
    net,
    dataset,
    epochs: int = TRAIN_DEFAULTS["epochs"],
    batch_size: int = TRAIN_DEFAULTS["batch_size"],
    opt: OptimizerState | None = None,
    spec: LossSpec = LossSpec(),
    aug: AugmentationSpec | None = None,
    seed: int = 0,
    spacing=(1.0, 1.0, 1.0),
    callback=None,
) -> TrainHistory:
    """Run ``epochs`` passes of minibatch SGD over ``dataset``.

    ``dataset`` holds ``(x, y)`` pairs with ``x`` shaped ``(C, D, H, W)`` and
    integer ``y`` shaped ``(D, H, W)``. One ``np.random.default_rng(seed)``
    drives both the per-epoch order and the per-sample augmentation seeds.
    ``callback(epoch, net, mean_loss)`` may return a value; anything other
    than None is appended to ``history.monitor`` and a value of True stops
    training after that epoch.
    """
    data = [_as_arrays(item) for item in dataset]
    if not data:
        raise EmptyInputError("training set is empty")
    shapes = {(x.shape, y.shape) for x, y in data}
    if len(shapes) != 1:
        raise ShapeError(f"all training samples must share one shape, got {sorted(shapes)}")
    opt = opt if opt is not None else OptimizerState()
    rng = np.random.default_rng(seed)
    bs = max(1, min(batch_size, len(data)))
    hist = TrainHistory()
    t0 = time.perf_counter()
    for _ in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for b0 in range(0, len(order), bs):
            idx = order[b0 : b0 + bs]
            aug_seeds = rng.integers(0, 2**63 - 1, size=len(idx))
            xs, ys = [], []
            for i, s in zip(idx, aug_seeds):
                x, y = data[i]
                if aug is not None:
                    x, y = _augment(x, y, aug, int(s), spacing)
                xs.append(x)
                ys.append(y)
            xb = np.stack(xs).astype(net.dtype, copy=False)
            yb = np.stack(ys).astype(np.int64, copy=False)
            loss, dz = loss_and_grad(net.forward_logits(xb, keep_cache=True), yb, spec)
            sgd_step(net, net.backward(dz), opt)
            losses.append(loss * len(idx))
        hist.epoch_loss.append(float(sum(losses) / len(data)))
        opt.epoch += 1
        if callback is not None:
            res = callback(opt.epoch, net, hist.epoch_loss[-1])
            if res is not None:
                hist.monitor.append(res)
            if res is True:
                hist.stopped_early = True
                break
    hist.seconds = time.perf_counter() - t0
    return hist


def predict(net, x, batch_size: int = 4) -> np.ndarray:
    """Class probabilities for ``x`` shaped ``(N, C, D, H, W)`` or ``(C, D, H, W)``."""
    x = np.asarray(x)
    single = x.ndim == 4
    xb = x[None] if single else x
    out = [net.forward(xb[i : i + batch_size].astype(net.dtype, copy=False)) for i in range(0, len(xb), batch_size)]
    probs = np.concatenate(out)
    return probs[0] if single else probs


def predict_labels(net, x, batch_size: int = 4) -> np.ndarray:
    return np.argmax(predict(net, x, batch_size), axis=-4).astype(np.uint8)
