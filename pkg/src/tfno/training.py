"""Season-family dataset splits, Adam training of the operator, evaluation.

The split rule mirrors the data protocol: training may mix withdrawal and
injection scenarios, validation and test hold withdrawal scenarios only.
Training is plain minibatch gradient descent with bias-corrected adaptive
moments, global-norm gradient clipping, and best-validation checkpoint
selection; everything is seeded and single-threaded so a rerun reproduces
the loss history exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .fno import NeuralOperator, OperatorConfig
from .losses import LossWeights, SobolevConfig, sobolev_h1_relative, total_loss
from .ndtensor import Tensor
from .ressim import Dataset


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 10
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    lr_min_factor: float = 0.05   # cosine decay floor as a fraction of lr
    seed: int = 0
    fractions: tuple = (0.7, 0.15, 0.15)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    sobolev: SobolevConfig = field(default_factory=SobolevConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        for b in (self.beta1, self.beta2):
            if not (0.0 < b < 1.0):
                raise ValueError("moment decay rates must lie in (0, 1)")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or len(self.fractions) != 3:
            raise ValueError("split fractions must be three values summing to 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need positive epochs and batch size")


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        total = sum(len(s) for s in sets)
        if len(set().union(*sets)) != total:
            raise ValueError("split ids overlap")


def split_dataset(dataset: Dataset, fractions, seed) -> SplitPlan:
    """Deterministic stratified split; validation and test are withdrawal-only."""
    n = dataset.n_scenarios
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    withdrawal = [i for i, fam in enumerate(dataset.families) if fam == "withdrawal"]
    injection = [i for i, fam in enumerate(dataset.families) if fam == "injection"]
    if len(withdrawal) < n_val + n_test:
        raise ValueError(
            "%d withdrawal scenarios cannot fill validation %d + test %d"
            % (len(withdrawal), n_val, n_test)
        )
    order = np.random.default_rng(seed).permutation(len(withdrawal))
    shuffled = [withdrawal[i] for i in order]
    val_ids = tuple(sorted(shuffled[:n_val]))
    test_ids = tuple(sorted(shuffled[n_val : n_val + n_test]))
    train_ids = tuple(sorted(shuffled[n_val + n_test :] + injection))
    return SplitPlan(train_ids=train_ids, val_ids=val_ids, test_ids=test_ids)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig,
                   lr: float | None = None):
    """Bias-corrected adaptive-moment update; returns (new params, state)."""
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    out = {}
    for name in sorted(params):
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDiverged("non-finite gradient in parameter block %r" % name)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        theta = params[name].data
        update = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if cfg.weight_decay > 0.0:
            update = update + lr * cfg.weight_decay * theta
        out[name] = Tensor.wrap(theta - update)
    return out, state


def clip_gradients(grads: dict, max_norm: float) -> dict:
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}


# --------------------------------------------------------------------------
# batched loss evaluation (shared by training, eval, landscape)
# --------------------------------------------------------------------------


def _as_f64(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


class _SobolevAccumulator:
    """Pools the relative Sobolev norm over chunks exactly: numerators and
    denominators are plain sums over scenarios, so chunked evaluation equals
    one large batch."""

    def __init__(self, cfg: SobolevConfig):
        self.cfg = cfg
        self.num = None
        self.den = None

    def add(self, y_hat: np.ndarray, y: np.ndarray):
        from .losses import fd_derivatives_array

        p = self.cfg.p
        nums = [float(np.sum(np.abs(y_hat - y) ** p))]
        dens = [float(np.sum(np.abs(y) ** p))]
        if self.cfg.k >= 1:
            n1 = d1 = 0.0
            for ax in range(2, y.ndim):
                dh = fd_derivatives_array(y_hat, ax)
                dy = fd_derivatives_array(y, ax)
                n1 += float(np.sum(np.abs(dh - dy) ** p))
                d1 += float(np.sum(np.abs(dy) ** p))
            nums.append(n1)
            dens.append(d1)
        if self.num is None:
            self.num, self.den = nums, dens
        else:
            self.num = [a + b for a, b in zip(self.num, nums)]
            self.den = [a + b for a, b in zip(self.den, dens)]

    def value(self) -> float:
        total = sum(n / (d + self.cfg.eps_den) for n, d in zip(self.num, self.den))
        return float(total ** (1.0 / self.cfg.p))


def batched_loss(model: NeuralOperator, dataset: Dataset, ids, weights: LossWeights,
                 sobolev: SobolevConfig, chunk: int = 10) -> float:
    """Composite loss over a split, pooled over all its scenarios."""
    approx = _SobolevAccumulator(sobolev)
    recon = _SobolevAccumulator(sobolev) if weights.reconstruction > 0 else None
    with nd.checked_off():
        for lo in range(0, len(ids), chunk):
            sel = list(ids[lo : lo + chunk])
            a = Tensor.wrap(_as_f64(dataset.inputs[sel]))
            u = _as_f64(dataset.targets[sel])
            approx.add(model.forward(a).data, u)
            if recon is not None:
                u0 = np.repeat(_as_f64(dataset.inputs[sel][:, 0:1, :, :, 0:1]),
                               u.shape[-1], axis=-1)
                recon.add(model.reconstruct_initial(a).data, u0)
    val = weights.approximation * approx.value()
    if recon is not None:
        val += weights.reconstruction * recon.value()
    return float(val)


def approximation_loss(model: NeuralOperator, dataset: Dataset, ids,
                       sobolev: SobolevConfig, chunk: int = 10) -> float:
    """Pooled relative Sobolev loss of model predictions on a split; this is
    the quantity the loss landscape probes."""
    acc = _SobolevAccumulator(sobolev)
    with nd.checked_off():
        for lo in range(0, len(ids), chunk):
            sel = list(ids[lo : lo + chunk])
            a = Tensor.wrap(_as_f64(dataset.inputs[sel]))
            acc.add(model.forward(a).data, _as_f64(dataset.targets[sel]))
    return acc.value()


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss))


@dataclass
class TrainResult:
    model: NeuralOperator
    history: History
    best_epoch: int
    best_val_loss: float
    consumed_ids: set


def _cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.learning_rate
    floor = cfg.lr_min_factor * cfg.learning_rate
    c = 0.5 * (1.0 + np.cos(np.pi * epoch / (cfg.epochs - 1)))
    return floor + (cfg.learning_rate - floor) * c


def train(model: NeuralOperator, dataset: Dataset, plan: SplitPlan, cfg: TrainConfig,
          log=None) -> TrainResult:
    """Minibatch loop over the train split; keeps the best-validation weights.

    Raises TrainingDiverged as soon as a train loss or gradient goes
    non-finite.  Test ids never enter a gradient computation; the consumed
    id set is returned so callers can audit that.
    """
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.params)
    state = AdamState()
    history = History()
    best_val = np.inf
    best_epoch = -1
    best_params = dict(params)
    consumed: set = set()
    train_ids = np.array(plan.train_ids, dtype=np.int64)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_ids))
        lr = _cosine_lr(cfg, epoch)
        epoch_losses = []
        with nd.checked_off():
            for lo in range(0, len(train_ids), cfg.batch_size):
                sel = train_ids[order[lo : lo + cfg.batch_size]]
                consumed.update(int(i) for i in sel)
                a = Tensor.wrap(_as_f64(dataset.inputs[sel]))
                u = Tensor.wrap(_as_f64(dataset.targets[sel]))
                u0 = Tensor.wrap(_as_f64(dataset.inputs[sel][:, 0:1, :, :, 0]))
                m = model.with_params(params)
                with nd.Tape() as tape:
                    loss, _, _ = total_loss(m, a, u, u0, cfg.loss_weights, cfg.sobolev)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingDiverged("train loss became non-finite at epoch %d" % epoch)
                grads_by_id = tape.gradients(loss, params.values())
                grads = {name: grads_by_id[t.node_id] for name, t in params.items()}
                grads = clip_gradients(grads, cfg.grad_clip)
                params, state = optimizer_step(params, grads, state, cfg, lr=lr)
                epoch_losses.append(loss_val)
        val = batched_loss(model.with_params(params), dataset, plan.val_ids,
                           cfg.loss_weights, cfg.sobolev)
        history.epochs.append(epoch)
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = dict(params)
        if log is not None:
            log("epoch %3d  lr %.2e  train %.5f  val %.5f" % (epoch, lr, history.train_loss[-1], val))

    return TrainResult(model=model.with_params(best_params), history=history,
                       best_epoch=best_epoch, best_val_loss=float(best_val),
                       consumed_ids=consumed)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    ids: tuple
    rel_l2: np.ndarray              # per scenario, normalized units
    r2: float                       # pooled over all cells and steps
    test_loss: float                # pooled Sobolev approximation loss
    predictions: np.ndarray         # [n, 1, nx, ny, nt] float64, normalized
    abs_error_per_decade: np.ndarray  # [nt, nx, ny], mean over scenarios
    neural_seconds_per_scenario: float


def predict(model: NeuralOperator, dataset: Dataset, ids, chunk: int = 10) -> np.ndarray:
    out = []
    with nd.checked_off():
        for lo in range(0, len(ids), chunk):
            sel = list(ids[lo : lo + chunk])
            a = Tensor.wrap(_as_f64(dataset.inputs[sel]))
            out.append(model.forward(a).data)
    return np.concatenate(out, axis=0)


def evaluate(model: NeuralOperator, dataset: Dataset, ids,
             sobolev: SobolevConfig = SobolevConfig(), timing_repeats: int = 3) -> EvalReport:
    """Accuracy metrics plus wall-clock inference time per scenario.

    Timing runs the whole split as one batch (the deployment shape for a
    surrogate) and reports the best of ``timing_repeats`` passes divided
    by the scenario count; the first pass is a warmup.
    """
    ids = tuple(ids)
    if not ids:
        raise ValueError("empty evaluation split")
    preds = predict(model, dataset, ids)
    targets = _as_f64(dataset.targets[list(ids)])
    diffs = preds - targets
    rel = np.sqrt((diffs**2).sum(axis=(1, 2, 3, 4)) / (targets**2).sum(axis=(1, 2, 3, 4)))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    r2 = 1.0 - float(np.sum(diffs**2)) / ss_tot
    test_loss = approximation_loss(model, dataset, ids, sobolev)
    abs_err = np.moveaxis(np.abs(diffs).mean(axis=(0, 1)), -1, 0)

    a_all = Tensor.wrap(_as_f64(dataset.inputs[list(ids)]))
    with nd.checked_off():
        model.forward(a_all)  # warmup
        times = []
        for _ in range(max(1, timing_repeats)):
            t0 = time.perf_counter()
            model.forward(a_all)
            times.append(time.perf_counter() - t0)
    per_scenario = min(times) / len(ids)

    return EvalReport(ids=ids, rel_l2=rel, r2=r2, test_loss=test_loss,
                      predictions=preds, abs_error_per_decade=abs_err,
                      neural_seconds_per_scenario=float(per_scenario))
