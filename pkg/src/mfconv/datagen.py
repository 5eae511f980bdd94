"""Analytic multifidelity datasets.

Two 1D function pairs (one continuous, one discontinuous) and a 2D
Hagen-Poiseuille pressure-field dataset with subsampled, noisy
low-fidelity levels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mfconv.tensor import load_array, save_array


class GeometryError(ValueError):
    """Raised when a radius leaves fewer than two fluid rows on the grid."""


# -- 1D function pairs --------------------------------------------------

def _forrester(x):
    return (6 * x - 2) ** 2 * np.sin(12 * x - 4)


def eval_example1(x):
    """Continuous pair: y_L = 0.5 f(x) + 10(x - 1/2) - 5, y_H = f(x)."""
    x = np.asarray(x, dtype=np.float64)
    y_h = _forrester(x)
    y_l = 0.5 * y_h + 10 * (x - 0.5) - 5
    return y_l, y_h


def eval_example2(x):
    """Discontinuous pair with jumps of +3 (LF) and +4 on top of 2*LF (HF) past x = 0.5."""
    x = np.asarray(x, dtype=np.float64)
    right = x > 0.5
    l = 0.5 * _forrester(x) + 10 * (x - 0.5) - 5
    y_l = np.where(right, 3 + l, l)
    h = 2 * y_l - 20 * x + 20
    y_h = np.where(right, 4 + h, h)
    return y_l, y_h


EXAMPLES = {1: eval_example1, 2: eval_example2}

# Training locations. Example 1: 11 LF points on a 0.1 grid and 4 HF points
# on that grid. Example 2: 38 equally spaced LF points and 5 cell-centred HF
# points that never coincide with an LF location.
DEFAULT_LOCATIONS = {
    1: (np.linspace(0.0, 1.0, 11), np.array([0.0, 0.4, 0.6, 1.0])),
    2: (np.linspace(0.0, 1.0, 38), (np.arange(5) + 0.5) / 5),
}


@dataclass
class OneDDataset:
    example: int
    lf_x: np.ndarray
    lf_y: np.ndarray  # rescaled to [0, 1]
    hf_x: np.ndarray
    hf_y: np.ndarray  # rescaled to [0, 1]
    lf_scale: tuple[float, float]
    hf_scale: tuple[float, float]
    test_x: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 101))

    @property
    def lf_points(self):
        return list(zip(self.lf_x, self.lf_y))

    @property
    def hf_points(self):
        return list(zip(self.hf_x, self.hf_y))

    def truth(self, x):
        """Rescaled (y_L, y_H) at arbitrary x."""
        y_l, y_h = EXAMPLES[self.example](x)
        return rescale(y_l, *self.lf_scale), rescale(y_h, *self.hf_scale)

    def union(self):
        """All training x with per-fidelity targets and label masks (NaN where unlabeled)."""
        xs = np.unique(np.concatenate([self.lf_x, self.hf_x]))
        lf_t = np.full(xs.size, np.nan)
        hf_t = np.full(xs.size, np.nan)
        lf_t[np.searchsorted(xs, self.lf_x)] = self.lf_y
        hf_t[np.searchsorted(xs, self.hf_x)] = self.hf_y
        return xs, lf_t, hf_t


def rescale(y, lo: float, hi: float):
    return (np.asarray(y) - lo) / (hi - lo)


def build_1d_dataset(example: int, lf_x=None, hf_x=None) -> OneDDataset:
    if example not in EXAMPLES:
        raise ValueError(f"example must be 1 or 2, got {example}")
    default_lf, default_hf = DEFAULT_LOCATIONS[example]
    lf_x = np.asarray(default_lf if lf_x is None else lf_x, dtype=np.float64)
    hf_x = np.asarray(default_hf if hf_x is None else hf_x, dtype=np.float64)
    for name, xs in (("LF", lf_x), ("HF", hf_x)):
        if np.unique(xs).size != xs.size:
            raise ValueError(f"duplicate x locations in the {name} training set")
        if xs.min() < 0 or xs.max() > 1:
            raise ValueError(f"{name} locations must lie in [0, 1]")
    fn = EXAMPLES[example]
    lf_raw, _ = fn(lf_x)
    _, hf_raw = fn(hf_x)
    lf_scale = (float(lf_raw.min()), float(lf_raw.max()))
    hf_scale = (float(hf_raw.min()), float(hf_raw.max()))
    return OneDDataset(
        example=example,
        lf_x=lf_x, lf_y=rescale(lf_raw, *lf_scale),
        hf_x=hf_x, hf_y=rescale(hf_raw, *hf_scale),
        lf_scale=lf_scale, hf_scale=hf_scale,
    )


# -- Hagen-Poiseuille fields ---------------------------------------------

@dataclass
class PoiseuilleConfig:
    grid: int = 64
    mu: float = 1.0
    length: float = 1.0
    r_range: tuple[float, float] = (0.4, 0.95)
    v_range: tuple[float, float] = (0.5, 2.0)
    concentration_noise: float = 0.1
    lf_noise_ratio: float = 0.05
    normalization: str = "global"  # global | per_sample
    lf_subsampling: str = "stride"  # stride | block_mean

    def pressure_drop(self, r, v_max):
        return 4.0 * self.mu * self.length * v_max / r ** 2

    def reference_drop(self) -> float:
        """Largest pressure drop over the parameter box, used by global normalization."""
        return self.pressure_drop(self.r_range[0], self.v_range[1])


@dataclass
class PoiseuilleSample:
    r: float
    v_max: float
    concentration: np.ndarray  # (G, G) noisy fluid mask
    velocity: np.ndarray  # (2, G, G): axial u_x, transverse u_y
    pressure_hf: np.ndarray  # (G, G) normalized, 0 outside fluid
    fluid_mask: np.ndarray  # (G, G) binary truth
    norm: tuple[float, float]  # raw = norm[0] + norm[1] * normalized
    lf_stack: list[np.ndarray] = field(default_factory=list)  # coarsest first
    lf_masks: list[np.ndarray] = field(default_factory=list)

    @property
    def inputs(self) -> np.ndarray:
        """Three-channel dense input: concentration, u_x, u_y."""
        return np.concatenate([self.concentration[None], self.velocity], axis=0)


def grid_coordinates(grid: int, length: float = 1.0):
    """Pixel-centre axial coordinates on [0, L] and transverse coordinates on [-1, 1]."""
    x = (np.arange(grid) + 0.5) / grid * length
    y = -1.0 + (np.arange(grid) + 0.5) * 2.0 / grid
    return x, y


def gen_poiseuille(r: float, v_max: float, rng: np.random.Generator | None = None,
                   cfg: PoiseuilleConfig | None = None) -> PoiseuilleSample:
    """Axial slice through a cylinder of radius ``r`` (fraction of the half-height)."""
    cfg = cfg or PoiseuilleConfig()
    if not 0 < r <= 1:
        raise ValueError(f"radius must lie in (0, 1], got {r}")
    if v_max <= 0 or cfg.mu <= 0:
        raise ValueError("v_max and mu must be positive")
    g = cfg.grid
    x, y = grid_coordinates(g, cfg.length)
    fluid_rows = np.abs(y) <= r
    if fluid_rows.sum() < 2:
        raise GeometryError(f"radius {r} places {fluid_rows.sum()} rows in the fluid on a {g}-pixel grid")
    mask = np.repeat(fluid_rows[:, None], g, axis=1).astype(np.float64)

    ux = np.where(fluid_rows, v_max * (1.0 - (y / r) ** 2), 0.0)[:, None] * np.ones((1, g))
    velocity = np.stack([ux, np.zeros((g, g))])

    dp = cfg.pressure_drop(r, v_max)
    if cfg.normalization == "global":
        # relative pressure, zero at mid-length, one shared scale for all samples
        rel = dp * (0.5 - x / cfg.length)
        scale = cfg.reference_drop()
        norm = (-0.5 * scale, scale)
        p_norm = 0.5 + rel / scale
    elif cfg.normalization == "per_sample":
        raw = dp * (1.0 - x / cfg.length)
        lo, hi = raw.min(), raw.max()
        norm = (lo, hi - lo)
        p_norm = (raw - lo) / (hi - lo)
    else:
        raise ValueError(f"unknown normalization {cfg.normalization!r}")
    pressure = mask * p_norm[None, :]

    if rng is None:
        noise = np.zeros((g, g))
    else:
        noise = rng.uniform(0.0, cfg.concentration_noise, size=(g, g))
    concentration = np.clip(mask + noise, 0.0, 1.0)
    return PoiseuilleSample(float(r), float(v_max), concentration, velocity, pressure, mask, (float(norm[0]), float(norm[1])))


def subsample(field_: np.ndarray, factor: int, method: str = "stride") -> np.ndarray:
    if method == "stride":
        return field_[::factor, ::factor].copy()
    if method == "block_mean":
        g = field_.shape[0] // factor
        return field_.reshape(g, factor, g, factor).mean(axis=(1, 3))
    raise ValueError(f"unknown subsampling {method!r}")


def derive_lf_stack(hf: np.ndarray, rng: np.random.Generator | None, noise_ratio: float = 0.05,
                    fluid_mask: np.ndarray | None = None, method: str = "stride"):
    """Return ``(levels, masks)`` at 8, 16 and 32 pixels (coarsest first)."""
    g = hf.shape[0]
    if hf.shape != (g, g) or g % 8:
        raise ValueError(f"HF field must be square with extent divisible by 8, got {hf.shape}")
    levels, masks = [], []
    for res in (g // 8, g // 4, g // 2):
        factor = g // res
        lf = subsample(hf, factor, method)
        if noise_ratio > 0 and rng is not None:
            span = lf.max() - lf.min()
            lf = lf + rng.uniform(0.0, noise_ratio * span, size=lf.shape)
        levels.append(lf)
        if fluid_mask is not None:
            masks.append((subsample(fluid_mask, factor, "stride") > 0.5).astype(np.float64))
    return levels, masks


def inject_bias(lf3: np.ndarray, ratio: float) -> np.ndarray:
    """Shift by ``ratio`` times the field's range."""
    return lf3 + ratio * (lf3.max() - lf3.min())


# -- splits ---------------------------------------------------------------

SPLITS = ("train", "val", "test")
# With 200 samples and 60/20/20 probabilities this seed yields 116/49/35.
REFERENCE_SPLIT_SEED = 57


def assign_splits(n_samples: int, probs=(0.6, 0.2, 0.2), seed: int = 0) -> list[str]:
    """Bin one uniform draw per sample by cumulative probability."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ValueError(f"split probabilities must be three nonnegative values summing to 1, got {probs}")
    u = np.random.default_rng(seed).random(n_samples)
    edges = np.cumsum(probs)
    idx = np.minimum(np.searchsorted(edges, u, side="right"), 2)
    return [SPLITS[i] for i in idx]


def subsample_hf(train_ids, k: int = 32, seed: int = 0) -> list[int]:
    train_ids = list(train_ids)
    if k > len(train_ids):
        raise ValueError(f"cannot draw {k} HF samples from {len(train_ids)} training samples")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(train_ids, size=k, replace=False))


# -- full dataset ---------------------------------------------------------

@dataclass
class PoiseuilleDataset:
    samples: list[PoiseuilleSample]
    splits: list[str]
    hf_subset: list[int]  # training indices carrying HF labels in the small-HF regime
    cfg: PoiseuilleConfig
    seed: int
    lf3_bias: float = 0.0

    def ids(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "config": asdict(self.cfg),
            "lf3_bias": self.lf3_bias,
            "hf_subset": self.hf_subset,
            "samples": [
                {"index": i, "r": s.r, "v_max": s.v_max, "split": self.splits[i],
                 "norm_offset": s.norm[0], "norm_scale": s.norm[1]}
                for i, s in enumerate(self.samples)
            ],
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        for i, s in enumerate(self.samples):
            d = directory / f"sample_{i:04d}"
            save_array(d / "concentration.f64", s.concentration)
            save_array(d / "velocity.f64", s.velocity)
            save_array(d / "pressure_hf.f64", s.pressure_hf)
            save_array(d / "fluid_mask.f64", s.fluid_mask)
            for lvl, lf in zip((8, 16, 32), s.lf_stack):
                save_array(d / f"pressure_lf{lvl}.f64", lf)

    @classmethod
    def load(cls, directory) -> "PoiseuilleDataset":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        cfg = _config_from_dict(m["config"])
        samples = []
        for rec in m["samples"]:
            d = directory / f"sample_{rec['index']:04d}"
            mask = load_array(d / "fluid_mask.f64")
            lf_stack = [load_array(d / f"pressure_lf{lvl}.f64") for lvl in (8, 16, 32)]
            lf_masks = [(subsample(mask, cfg.grid // lvl, "stride") > 0.5).astype(np.float64) for lvl in (8, 16, 32)]
            samples.append(PoiseuilleSample(
                rec["r"], rec["v_max"], load_array(d / "concentration.f64"), load_array(d / "velocity.f64"),
                load_array(d / "pressure_hf.f64"), mask, (rec["norm_offset"], rec["norm_scale"]),
                lf_stack, lf_masks,
            ))
        return cls(samples, [r["split"] for r in m["samples"]], m["hf_subset"], cfg, m["seed"], m["lf3_bias"])


def _config_from_dict(d: dict) -> PoiseuilleConfig:
    d = dict(d)
    d["r_range"] = tuple(d["r_range"])
    d["v_range"] = tuple(d["v_range"])
    return PoiseuilleConfig(**d)


def build_poiseuille_dataset(n_samples: int = 200, seed: int = 0, probs=(0.6, 0.2, 0.2), hf_subset_size: int = 32,
                             cfg: PoiseuilleConfig | None = None, lf3_bias: float = 0.0,
                             split_seed: int = REFERENCE_SPLIT_SEED) -> PoiseuilleDataset:
    """Generate samples with LF stacks, assign splits and draw the small HF subset.

    Parameters and noise of sample ``i`` come from the stream ``[seed, i]``;
    split tags come from ``split_seed`` alone.
    """
    cfg = cfg or PoiseuilleConfig()
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        r = rng.uniform(*cfg.r_range)
        v = rng.uniform(*cfg.v_range)
        s = gen_poiseuille(r, v, rng, cfg)
        s.lf_stack, s.lf_masks = derive_lf_stack(s.pressure_hf, rng, cfg.lf_noise_ratio, s.fluid_mask, cfg.lf_subsampling)
        samples.append(s)
    splits = assign_splits(n_samples, probs, split_seed)
    train = [i for i, t in enumerate(splits) if t == "train"]
    hf_subset = subsample_hf(train, min(hf_subset_size, len(train)), seed)
    if lf3_bias:
        for i in train:
            samples[i].lf_stack[2] = inject_bias(samples[i].lf_stack[2], lf3_bias)
    return PoiseuilleDataset(samples, splits, hf_subset, cfg, seed, lf3_bias)
