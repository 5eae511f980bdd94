"""Experiment configuration schema (YAML or JSON files)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mfconv.architectures import ELIGIBLE_SITES, NetworkSpec
from mfconv.datagen import REFERENCE_SPLIT_SEED, PoiseuilleConfig
from mfconv.dropblock import DropBlockSpec
from mfconv.training import TrainConfig

KINDS = ("oned_ex1", "oned_ex2", "dense", "l2h")
FAMILY_OF = {"oned_ex1": "oned_mf", "oned_ex2": "oned_mf", "dense": "dense_unet", "l2h": "decoder_l2h"}


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DropBlockSection(Strict):
    p: float = Field(0.1, ge=0.0, le=1.0)
    block_size: int | None = Field(None, ge=1)  # None: family default per site
    shared_across_channels: bool = False
    ramp_epochs: int | None = Field(None, ge=1)
    rescale: bool = True


class NetworkSection(Strict):
    skip_mode: Literal["add", "concat"] = "concat"
    coupling: Literal["implicit", "explicit"] = "implicit"
    base_filters: int | None = Field(None, ge=1)
    activation: Literal["tanh", "relu"] | None = None
    dropblock: DropBlockSection = Field(default_factory=DropBlockSection)
    drop_sites: list[int] | None = None
    block_sizes: list[int] | None = None
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)


class TrainSection(Strict):
    lr: float = Field(1e-2, gt=0.0)
    lr_step: int = Field(500, ge=1)
    lr_decay: float = Field(0.9, gt=0.0, le=1.0)
    batch_size: int = Field(16, ge=1)
    epochs: int | None = Field(None, ge=0)  # None: 20000 for 1D, 2000 otherwise
    init: Literal["uniform_fanprod", "xavier_normal"] | None = None
    init_bound: Literal["literal", "inverse_sqrt"] = "literal"
    loss_weights: list[float] | None = None
    l2: float = Field(0.0, ge=0.0)
    bn_mode: Literal["train", "eval"] = "train"

    @field_validator("loss_weights")
    @classmethod
    def _weights_sum_to_one(cls, v):
        if v is not None and abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {v}")
        return v


class PoiseuilleSection(Strict):
    grid: int = Field(64, ge=8)
    mu: float = Field(1.0, gt=0.0)
    length: float = Field(1.0, gt=0.0)
    r_range: tuple[float, float] = (0.4, 0.95)
    v_range: tuple[float, float] = (0.5, 2.0)
    concentration_noise: float = Field(0.1, ge=0.0)
    lf_noise_ratio: float = Field(0.05, ge=0.0)
    normalization: Literal["global", "per_sample"] = "global"
    lf_subsampling: Literal["stride", "block_mean"] = "stride"


class DatasetSection(Strict):
    seed: int = 0
    n_samples: int = Field(200, ge=3)
    split_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = REFERENCE_SPLIT_SEED
    hf_subset_size: int = Field(32, ge=1)
    lf3_bias: float = 0.0
    poiseuille: PoiseuilleSection = Field(default_factory=PoiseuilleSection)
    lf_x: list[float] | None = None  # 1D only
    hf_x: list[float] | None = None


class EvaluationSection(Strict):
    n_replicas: int = Field(1000, ge=2)
    master_seed: int = 0
    outputs: list[Literal["predictions", "centerline", "slices", "location_stats", "stacks"]] = Field(
        default_factory=lambda: ["predictions", "centerline", "location_stats"])


class ExperimentConfig(Strict):
    kind: Literal["oned_ex1", "oned_ex2", "dense", "l2h"]
    name: str | None = None
    seed: int = 0
    out: str | None = None
    regime: Literal["mf", "hf_small", "hf_full", "hf"] = "mf"
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    train: TrainSection = Field(default_factory=TrainSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    sweep: dict[str, list[Any]] | None = None

    @model_validator(mode="after")
    def _regime_matches_kind(self):
        oned = self.kind.startswith("oned")
        if oned and self.regime not in ("mf", "hf"):
            raise ValueError(f"1D experiments use regime 'mf' or 'hf', got {self.regime!r}")
        if not oned and self.regime == "hf":
            raise ValueError("2D experiments use regime 'mf', 'hf_small' or 'hf_full'")
        return self

    @property
    def family(self) -> str:
        return FAMILY_OF[self.kind]

    @property
    def is_oned(self) -> bool:
        return self.kind.startswith("oned")

    def network_spec(self) -> NetworkSpec:
        net = self.network.model_dump()
        b = net["dropblock"].pop("block_size")
        if b is not None and net["block_sizes"] is None:
            net["block_sizes"] = [b] * ELIGIBLE_SITES[self.family]
        net["dropblock"] = DropBlockSpec(**net["dropblock"])
        if self.is_oned and "coupling" not in self.network.model_fields_set:
            net["coupling"] = "explicit"
        return NetworkSpec(family=self.family, **net)

    def train_config(self) -> TrainConfig:
        t = self.train.model_dump()
        if t["epochs"] is None:
            t["epochs"] = 20_000 if self.is_oned else 2_000
        if t["init"] is None:
            t["init"] = "uniform_fanprod" if self.is_oned else "xavier_normal"
        if t["loss_weights"] is None:
            if self.is_oned:
                t["loss_weights"] = [0.0, 1.0] if self.regime == "hf" else [0.5, 0.5]
            else:
                t["loss_weights"] = [0.25] * 4 if self.regime == "mf" else [0.0, 0.0, 0.0, 1.0]
        return TrainConfig(seed=self.seed, **t)

    def poiseuille_config(self) -> PoiseuilleConfig:
        return PoiseuilleConfig(**self.dataset.poiseuille.model_dump())


def load_config_data(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a mapping at top level")
    return data


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.model_validate(load_config_data(path))


def set_dotted(data: dict, key: str, value) -> None:
    """Assign ``value`` at a dotted path such as ``train.lr``, creating sections."""
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"{key}: {part!r} is not a section")
    node[parts[-1]] = value
