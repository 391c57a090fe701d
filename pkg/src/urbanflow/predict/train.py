"""Mini-batch Adam training shared by the intention and trajectory networks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError, InvalidArgument
from .lstm import Adam, clip_gradients
from .models import IntentionNet, TrajectoryNet, intention_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 60
    seed: int = 0
    batch_size: int = 64
    clip_norm: float = 5.0
    lr_decay: float = 1.0        # multiplicative per epoch
    stride: int = 2              # window stride for trajectory samples

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1 or self.stride < 1:
            raise InvalidArgument("invalid training configuration")


@dataclass
class TrainResult:
    params: dict
    loss_trace: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(model, dataset, cfg: TrainConfig | None = None) -> TrainResult:
    """Fit ``model.params`` in place; the loss trace holds each epoch's mean batch loss.

    ``dataset`` is a list of PairRecords (intention network) or either
    records or precomputed TrajectorySamples (trajectory network).
    """
    cfg = cfg or TrainConfig()
    if isinstance(model, IntentionNet):
        records = list(dataset)
        if not records:
            raise InvalidArgument("empty dataset")
        n = len(records)

        def batch(idx):
            return intention_batch(records, idx)
    elif isinstance(model, TrajectoryNet):
        smp = dataset if hasattr(dataset, "subset") else model.samples(list(dataset), stride=cfg.stride)
        if len(smp) == 0:
            raise InvalidArgument("empty dataset")
        n = len(smp)

        def batch(idx):
            return smp.subset(np.sort(idx))
    else:
        raise InvalidArgument(f"cannot train {type(model).__name__}")

    rng = np.random.default_rng(cfg.seed)
    params = model.params
    opt = Adam(params, lr=cfg.lr)
    trace = []
    last_good = {k: v.copy() for k, v in params.items()}
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(n, cfg.batch_size, rng):
            loss, grads = model.loss_and_grad(params, batch(idx))
            if not math.isfinite(loss):
                model.params = last_good
                raise DivergenceError(f"non-finite loss at epoch {epoch}", params=last_good,
                                      loss_trace=trace)
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            opt.step(params, grads)
            losses.append(loss)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            model.params = last_good
            raise DivergenceError(f"non-finite parameters at epoch {epoch}", params=last_good,
                                  loss_trace=trace)
        last_good = {k: v.copy() for k, v in params.items()}
        trace.append(float(np.mean(losses)))
        opt.lr *= cfg.lr_decay
        log.debug("epoch %d loss %.5f", epoch, trace[-1])
    return TrainResult(params, trace)


@dataclass(frozen=True)
class AblationConfig:
    hidden: int = 64
    window: int = 20
    horizon: int = 30
    intention: TrainConfig = TrainConfig(epochs=60, batch_size=32, lr_decay=0.96)
    trajectory: TrainConfig = TrainConfig(epochs=30, batch_size=64, lr_decay=0.95, stride=3)
    # 0 or 1: conditioned trajectory nets train on the ground-truth labels (teacher forcing);
    # > 1: on out-of-fold intention predictions
    folds: int = 0


def out_of_fold_intents(records, cfg: AblationConfig):
    """``{pair_id: {step: (direction, yield)}}`` predicted by nets that never saw that pair."""
    out = {}
    for k in range(cfg.folds):
        held = records[k::cfg.folds]
        fit = [r for i, r in enumerate(records) if i % cfg.folds != k]
        net = IntentionNet(hidden=cfg.hidden, seed=cfg.intention.seed + k)
        train(net, fit, cfg.intention)
        for r in held:
            p_dir, p_yld = net.predict(r)
            d, y = np.argmax(p_dir, axis=1), np.argmax(p_yld, axis=1)
            out[r.pair_id] = {s: (int(d[s]), int(y[s])) for s in range(r.n_steps)}
    return out


@dataclass
class AblationModels:
    intention: IntentionNet
    trajectory: dict             # mode -> TrajectoryNet


def train_ablation(records, modes=("plain", "intention", "reference"),
                   cfg: AblationConfig | None = None) -> AblationModels:
    """Train the intention network and one trajectory network per mode."""
    cfg = cfg or AblationConfig()
    records = list(records)
    if not records:
        raise InvalidArgument("empty dataset")
    intention = IntentionNet(hidden=cfg.hidden, seed=cfg.intention.seed)
    train(intention, records, cfg.intention)
    intents = None
    if cfg.folds > 1 and any(m != "plain" for m in modes):
        intents = out_of_fold_intents(records, cfg)
    nets = {}
    for mode in modes:
        net = TrajectoryNet(mode=mode, hidden=cfg.hidden, window=cfg.window, horizon=cfg.horizon,
                            seed=cfg.trajectory.seed)
        smp = net.samples(records, stride=cfg.trajectory.stride, intents_by_pair=intents)
        train(net, smp, cfg.trajectory)
        nets[mode] = net
        log.info("trained %s trajectory network on %d windows", mode, len(smp))
    return AblationModels(intention, nets)
