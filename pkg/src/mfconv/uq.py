"""Monte Carlo DropBlock ensembles, accuracy metrics and the pixel-cost ledger."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from mfconv.architectures import Network
from mfconv.tensor import load_array, no_grad, save_array


# -- ensembles ------------------------------------------------------------

def mc_ensemble(net: Network, inputs: np.ndarray, n: int, master_seed: int, p: float | None = None,
                output: int = -1, transform: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Stack of ``n`` eval-mode forwards with DropBlocks active.

    Replica ``i`` draws its masks from ``default_rng([master_seed, i])`` so
    any replica can be reproduced in isolation. ``output`` picks the network
    output (default HF); ``transform`` is applied to each replica before
    stacking, e.g. to keep only a centerline.
    """
    if n < 1:
        raise ValueError("need at least one replica")
    replicas = []
    with no_grad():
        for i in range(n):
            pred = net.forward(inputs, mode="eval", rng=np.random.default_rng([master_seed, i]), p=p)
            out = pred.outputs[output].data
            replicas.append(transform(out) if transform else out.copy())
    return np.stack(replicas)


@dataclass
class EnsembleStats:
    n_replicas: int
    mean: np.ndarray
    std: np.ndarray  # population std (ddof=0)
    p5: np.ndarray
    p95: np.ndarray
    median: np.ndarray


def ensemble_stats(stack: np.ndarray, with_std: bool = True) -> EnsembleStats:
    """Statistics over axis 0; percentiles interpolate linearly between order statistics."""
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[0]
    if n < 1:
        raise ValueError("empty replica stack")
    if with_std and n < 2:
        raise ValueError("standard deviation needs at least two replicas")
    mean = stack.mean(axis=0)
    std = np.sqrt(np.mean((stack - mean) ** 2, axis=0)) if with_std else np.full_like(mean, np.nan)
    p5, p50, p95 = np.percentile(stack, [5, 50, 95], axis=0)
    return EnsembleStats(n, mean, std, p5, p95, p50)


def save_stack(path, stack: np.ndarray) -> None:
    save_array(path, stack)


def load_stack(path) -> np.ndarray:
    return load_array(path)


# -- accuracy -------------------------------------------------------------

def r_squared(pred: np.ndarray, truth: np.ndarray, fluid_mask: np.ndarray) -> float:
    """Coefficient of determination over masked pixels of the whole set.

    The reference mean is taken over every masked pixel of every sample.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(fluid_mask) > 0
    if pred.shape != truth.shape or truth.shape != mask.shape:
        raise ValueError(f"shapes differ: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("fluid mask is empty")
    y = truth[mask]
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for a constant truth")
    return float(1.0 - np.sum((y - pred[mask]) ** 2) / ss_tot)


@dataclass
class CostLedger:
    """Training-set cost in pixels, per registered dataset."""

    pixels: dict[str, int] = field(default_factory=dict)
    reference: str | None = None

    def register(self, name: str, counts: Sequence[tuple[int, int]]) -> int:
        """``counts`` lists (n_images, side) pairs; the cost is sum(n * side**2)."""
        self.pixels[name] = sum(int(n) * int(side) ** 2 for n, side in counts)
        if self.reference is None:
            self.reference = name
        return self.pixels[name]

    def cost(self, name: str) -> int:
        if name not in self.pixels:
            raise KeyError(f"dataset {name!r} is not in the cost ledger")
        return self.pixels[name]

    def ratio(self, name: str) -> float:
        return self.cost(name) / self.cost(self.reference)


def default_ledger(n_train: int = 116, n_hf_small: int = 32, grid: int = 64, lf_sides=(32, 16, 8)) -> CostLedger:
    ledger = CostLedger()
    ledger.register(f"hf_{n_train}", [(n_train, grid)])
    ledger.register(f"hf_{n_hf_small}", [(n_hf_small, grid)])
    ledger.register(f"mf_{n_hf_small}_{n_train}", [(n_hf_small, grid)] + [(n_train, s) for s in lf_sides])
    return ledger


def normalized_accuracy(r2: float, ledger: CostLedger, dataset_id: str) -> float:
    return r2 / ledger.cost(dataset_id)


# -- centerline and slices ------------------------------------------------

def _fluid_rows(fluid_mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(np.asarray(fluid_mask).any(axis=1))
    if rows.size == 0:
        raise ValueError("fluid mask is empty")
    if np.any(np.diff(rows) != 1):
        raise ValueError("fluid rows do not form a contiguous band")
    return rows


def centerline_row(fluid_mask: np.ndarray) -> int:
    """Middle row of the fluid band; even-height bands take the lower-middle row."""
    rows = _fluid_rows(fluid_mask)
    return int(rows[rows.size // 2])


def extract_centerline(field_: np.ndarray, fluid_mask: np.ndarray) -> np.ndarray:
    return np.asarray(field_)[centerline_row(fluid_mask)].copy()


def extract_slices(field_: np.ndarray, fluid_mask: np.ndarray) -> list[np.ndarray]:
    """Every axial row crossing the fluid band, top to bottom."""
    return [np.asarray(field_)[r].copy() for r in _fluid_rows(fluid_mask)]


# -- per-location curves --------------------------------------------------

LOCATION_FIELDS = ["model", "location", "x", "truth", "mean", "std", "p5", "p95", "mse", "mse_replica"]


def centerline_stacks(net: Network, inputs: np.ndarray, masks: Sequence[np.ndarray], n: int,
                      master_seed: int, p: float | None = None) -> np.ndarray:
    """Replica stack of HF centerlines, shape (n, n_samples, width)."""
    rows = np.array([centerline_row(m) for m in masks])
    idx = np.arange(len(rows))
    return mc_ensemble(net, inputs, n, master_seed, p, transform=lambda out: out[idx, 0, rows])


def location_stats(models: Mapping[str, Network], inputs: np.ndarray, truths: Sequence[np.ndarray],
                   masks: Sequence[np.ndarray], n: int, master_seed: int = 0,
                   stacks: Mapping[str, np.ndarray] | None = None) -> list[dict]:
    """MSE and spread of centerline predictions at each axial location.

    ``mse`` compares each sample's ensemble mean with its truth; ``mse_replica``
    averages the error of individual replicas. ``std`` is the population
    standard deviation across replicas, averaged over samples. Precomputed
    replica stacks may be passed in ``stacks`` instead of running the models.
    """
    true_lines = np.stack([extract_centerline(t, m) for t, m in zip(truths, masks)])
    width = true_lines.shape[1]
    xs = (np.arange(width) + 0.5) / width
    rows = []
    for name, net in models.items():
        stack = stacks[name] if stacks and name in stacks else centerline_stacks(net, inputs, masks, n, master_seed)
        st = ensemble_stats(stack)
        mse = np.mean((st.mean - true_lines) ** 2, axis=0)
        mse_rep = np.mean((stack - true_lines) ** 2, axis=(0, 1))
        for j in range(width):
            rows.append({
                "model": name, "location": j, "x": xs[j], "truth": true_lines[:, j].mean(),
                "mean": st.mean[:, j].mean(), "std": st.std[:, j].mean(),
                "p5": st.p5[:, j].mean(), "p95": st.p95[:, j].mean(),
                "mse": mse[j], "mse_replica": mse_rep[j],
            })
    return rows


def write_csv(path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
