"""Losses, Adam, schedules, initialization and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from mfconv import ops
from mfconv.architectures import MfPrediction, Network, NetworkSpec, build_network
from mfconv.datagen import OneDDataset, PoiseuilleDataset, PoiseuilleSample
from mfconv.dropblock import scheduled_p
from mfconv.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/inf. ``best_state`` holds the last good checkpoint."""

    def __init__(self, message: str, best_state=None, history=None):
        super().__init__(message)
        self.best_state = best_state
        self.history = history or []


@dataclass
class TrainConfig:
    lr: float = 1e-2
    lr_step: int = 500
    lr_decay: float = 0.9
    batch_size: int = 16
    epochs: int = 2000
    init: str = "xavier_normal"  # uniform_fanprod | xavier_normal
    init_bound: str = "literal"  # uniform_fanprod bound: literal n*k0*k1 | inverse_sqrt
    loss_weights: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    l2: float = 0.0
    seed: int = 0
    bn_mode: str = "train"  # "eval" freezes batch norm to its running statistics during training

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not math.isclose(sum(self.loss_weights), 1.0, abs_tol=1e-9):
            raise ValueError(f"loss weights must sum to 1, got {self.loss_weights}")
        if self.init not in ("uniform_fanprod", "xavier_normal"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        if self.init_bound not in ("literal", "inverse_sqrt"):
            raise ValueError(f"unknown init bound {self.init_bound!r}")
        if self.bn_mode not in ("train", "eval"):
            raise ValueError(f"bn_mode must be 'train' or 'eval', got {self.bn_mode!r}")


# -- losses -------------------------------------------------------------

@dataclass
class LossResult:
    total: Tensor
    terms: list[float | None]  # per fidelity, None when no labels were present


def fidelity_loss(pred: Tensor, truth: np.ndarray, mask: np.ndarray) -> Tensor:
    """Squared error integrated over the masked region divided by that region's area.

    Each pixel contributes with its area ``1/m`` (``m`` pixels per image), so
    fidelities of different resolution are put on the same footing.
    """
    if pred.shape != truth.shape or truth.shape != mask.shape:
        raise ValueError(f"prediction {pred.shape}, truth {truth.shape} and mask {mask.shape} must match")
    pixel_area = 1.0 / int(np.prod(truth.shape[2:]))
    area = float(mask.sum()) * pixel_area
    if area <= 0:
        raise ValueError("fluid mask is empty")
    weight = mask * (pixel_area / area)
    diff = ops.sub(pred, np.where(mask > 0, truth, 0.0))
    return ops.sum(ops.mul(ops.square(diff), weight))


def mf_loss(pred: MfPrediction, truths: Sequence[np.ndarray | None], masks: Sequence[np.ndarray | None],
            weights: Sequence[float]) -> LossResult:
    """Weighted sum of per-fidelity losses; fidelities with zero weight or no labels are skipped."""
    outputs = pred.outputs
    if not len(outputs) == len(truths) == len(masks) == len(weights):
        raise ValueError("need one truth, mask and weight per output")
    total = None
    terms: list[float | None] = []
    for out, t, m, w in zip(outputs, truths, masks, weights):
        if t is None or w == 0:
            terms.append(None)
            continue
        term = fidelity_loss(out, t, m)
        terms.append(term.data.item())
        scaled = ops.mul(term, w)
        total = scaled if total is None else ops.add(total, scaled)
    if total is None:
        total = Tensor(np.zeros(()))
    return LossResult(total, terms)


# -- optimizer and schedules ----------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState, lr: float, epoch: int | None = None) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at epoch {epoch}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def step_lr(epoch: int, base_lr: float, step: int, decay: float = 0.9) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return base_lr * decay ** (epoch // step)


# -- initialization -------------------------------------------------------

def init_weights(net: Network, scheme: str, rng: np.random.Generator, bound: str = "literal") -> None:
    """Draw convolution kernels; zero biases; unit BN scale; mixing weight 0.5.

    ``uniform_fanprod`` samples U(-s, s) with s = n * prod(k) for ``literal``
    or s = 1/sqrt(n * prod(k)) for ``inverse_sqrt`` (n input channels, k kernel).
    ``xavier_normal`` samples N(0, 2 / (fan_in + fan_out)).
    """
    for name, p in net.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan = int(np.prod(p.shape[1:]))
            if scheme == "uniform_fanprod":
                s = float(fan) if bound == "literal" else 1.0 / math.sqrt(fan)
                p.data = rng.uniform(-s, s, size=p.shape)
            elif scheme == "xavier_normal":
                fan_out = p.shape[0] * int(np.prod(p.shape[2:]))
                p.data = rng.normal(0.0, math.sqrt(2.0 / (fan + fan_out)), size=p.shape)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
        elif leaf in ("bias", "beta"):
            p.data = np.zeros_like(p.data)
        elif leaf == "gamma":
            p.data = np.ones_like(p.data)
        elif leaf == "mix":
            p.data = np.full_like(p.data, 0.5)
        p.zero_grad()


def make_network(spec: NetworkSpec, cfg: TrainConfig) -> Network:
    net = build_network(spec)
    init_weights(net, cfg.init, np.random.default_rng([cfg.seed, 0]), cfg.init_bound)
    return net


# -- training data --------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray
    truths: list[np.ndarray | None]
    masks: list[np.ndarray | None]


class TrainingData:
    """Training samples with optional per-fidelity labels plus a validation batch.

    ``truths[f]`` is an array over all training samples (or None when fidelity
    ``f`` is absent); ``labeled[f]`` flags which samples carry that fidelity.
    """

    def __init__(self, inputs: np.ndarray, truths, masks, labeled, val: Batch, val_weights: Sequence[float]):
        self.inputs = inputs
        self.truths = truths
        self.masks = masks
        self.labeled = labeled
        self.val = val
        self.val_weights = list(val_weights)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx: np.ndarray) -> Batch:
        truths, masks = [], []
        for t, m, lab in zip(self.truths, self.masks, self.labeled):
            if t is None:
                truths.append(None)
                masks.append(None)
                continue
            sel = lab[idx]
            if not sel.any():
                truths.append(None)
                masks.append(None)
                continue
            mk = m[idx] * sel.reshape((-1,) + (1,) * (m.ndim - 1))
            truths.append(t[idx])
            masks.append(mk)
        return Batch(self.inputs[idx], truths, masks)

    def batches(self, rng: np.random.Generator, batch_size: int) -> Iterator[Batch]:
        order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


# -- training loop --------------------------------------------------------

HISTORY_FIELDS = ["epoch", "lr", "p_effective", "loss_total"]


@dataclass
class TrainedModel:
    net: Network
    history: list[dict]
    best_val_loss: float
    best_epoch: int
    fidelity_names: list[str]

    def write_history(self, path) -> None:
        fields = HISTORY_FIELDS + [f"loss_{n}" for n in self.fidelity_names] + ["val_loss"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in fields})


def evaluate_loss(net: Network, batch: Batch, weights, rng: np.random.Generator, p: float | None = None) -> float:
    """Validation-style loss: batch-norm running stats, DropBlocks at ``p`` (default: current)."""
    with no_grad():
        pred = net.forward(batch.inputs, mode="eval", rng=rng, p=p)
        return mf_loss(pred, batch.truths, batch.masks, weights).total.data.item()


def _l2_term(params, coeff: float):
    total = None
    for name, p in params:
        if name.endswith("weight"):
            term = ops.sum(ops.square(p))
            total = term if total is None else ops.add(total, term)
    return ops.mul(total, coeff)


def train(net: Network, data: TrainingData, cfg: TrainConfig, fidelity_names: Sequence[str] | None = None) -> TrainedModel:
    """Adam with a step LR schedule; keep the weights with the lowest validation loss.

    Validation runs every epoch with DropBlocks active, at the same drop
    probability used for that epoch's training.
    """
    n_out = len(cfg.loss_weights)
    names = list(fidelity_names or [f"f{i}" for i in range(n_out)])
    params = list(net.named_parameters())
    state = AdamState()
    history: list[dict] = []
    best_state = net.state_dict()
    best_val = math.inf
    best_epoch = -1
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    val_rng = np.random.default_rng([cfg.seed, 3])
    spec = net.spec.dropblock

    for epoch in range(cfg.epochs):
        lr = step_lr(epoch, cfg.lr, cfg.lr_step, cfg.lr_decay)
        p_eff = scheduled_p(spec, epoch)
        net.drop_p = p_eff
        sums = np.zeros(n_out)
        counts = np.zeros(n_out)
        total_sum = 0.0
        n_batches = 0
        for batch in data.batches(shuffle_rng, cfg.batch_size):
            pred = net.forward(batch.inputs, mode=cfg.bn_mode, rng=drop_rng)
            res = mf_loss(pred, batch.truths, batch.masks, cfg.loss_weights)
            loss = res.total
            if cfg.l2 > 0:
                loss = ops.add(loss, _l2_term(params, cfg.l2))
            value = loss.data.item()
            if not math.isfinite(value):
                net.load_state_dict(best_state)
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}", best_state, history)
            net.zero_grad()
            loss.backward()
            try:
                adam_step(params, state, lr, epoch)
            except FloatingPointError as exc:
                net.load_state_dict(best_state)
                raise TrainingDivergedError(str(exc), best_state, history) from exc
            total_sum += value
            n_batches += 1
            for i, t in enumerate(res.terms):
                if t is not None:
                    sums[i] += t
                    counts[i] += 1
        val = evaluate_loss(net, data.val, data.val_weights, val_rng)
        if not math.isfinite(val):
            net.load_state_dict(best_state)
            raise TrainingDivergedError(f"validation loss became {val} at epoch {epoch}", best_state, history)
        row = {"epoch": epoch, "lr": lr, "p_effective": p_eff, "loss_total": total_sum / max(n_batches, 1),
               "val_loss": val}
        for i, n in enumerate(names):
            row[f"loss_{n}"] = sums[i] / counts[i] if counts[i] else None
        history.append(row)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = net.state_dict()
        if epoch % 100 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d lr %.3g p %.3f loss %.4g val %.4g", epoch, lr, p_eff, row["loss_total"], val)

    net.load_state_dict(best_state)
    net.drop_p = spec.p
    return TrainedModel(net, history, best_val, best_epoch, names)


# -- dataset adapters -----------------------------------------------------

REGIMES = ("mf", "hf_small", "hf_full")


def oned_training_data(ds: OneDDataset, hf_only: bool = False) -> TrainingData:
    """One signal holding every training location; each fidelity is labeled where known.

    There is no held-out set in 1D, so validation reuses the training signal.
    With ``hf_only`` the signal holds just the HF locations.
    """
    if hf_only:
        xs, hf_t = ds.hf_x, ds.hf_y
        lf_t = np.full(xs.size, np.nan)
    else:
        xs, lf_t, hf_t = ds.union()
    inputs = xs.reshape(1, 1, -1)
    truths = [np.nan_to_num(t).reshape(1, 1, -1) for t in (lf_t, hf_t)]
    masks = [(~np.isnan(t)).astype(np.float64).reshape(1, 1, -1) for t in (lf_t, hf_t)]
    labeled = [np.ones(1, dtype=bool)] * 2
    val = Batch(inputs, truths, masks)
    return TrainingData(inputs, truths, masks, labeled, val, [0.0, 1.0])


def network_inputs(samples: Sequence[PoiseuilleSample], family: str) -> np.ndarray:
    if family == "dense_unet":
        return np.stack([s.inputs for s in samples])
    if family == "decoder_l2h":
        return np.array([[s.r, s.v_max] for s in samples])
    raise ValueError(f"family {family!r} does not consume Poiseuille samples")


def _fields(samples, level: int | None):
    if level is None:
        t = np.stack([s.pressure_hf for s in samples])
        m = np.stack([s.fluid_mask for s in samples])
    else:
        t = np.stack([s.lf_stack[level] for s in samples])
        m = np.stack([s.lf_masks[level] for s in samples])
    return t[:, None], m[:, None]


def poiseuille_training_data(ds: PoiseuilleDataset, family: str, regime: str = "mf") -> TrainingData:
    """Training/validation arrays for one of the three data regimes.

    ``mf``: every training sample carries LF labels, the HF subset also HF.
    ``hf_small``: only the HF subset, HF labels only.
    ``hf_full``: every training sample, HF labels only.
    Validation always scores the HF output on the validation split.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    train_ids = ds.hf_subset if regime == "hf_small" else ds.ids("train")
    samples = [ds.samples[i] for i in train_ids]
    hf_set = set(ds.hf_subset)
    truths, masks, labeled = [], [], []
    for level in range(3):
        if regime == "mf":
            t, m = _fields(samples, level)
            truths.append(t)
            masks.append(m)
            labeled.append(np.ones(len(samples), dtype=bool))
        else:
            truths.append(None)
            masks.append(None)
            labeled.append(None)
    t, m = _fields(samples, None)
    truths.append(t)
    masks.append(m)
    if regime == "mf":
        labeled.append(np.array([i in hf_set for i in train_ids]))
    else:
        labeled.append(np.ones(len(samples), dtype=bool))
    val_samples = [ds.samples[i] for i in ds.ids("val")]
    vt, vm = _fields(val_samples, None)
    val = Batch(network_inputs(val_samples, family), [None, None, None, vt], [None, None, None, vm])
    return TrainingData(network_inputs(samples, family), truths, masks, labeled, val, [0.0, 0.0, 0.0, 1.0])
