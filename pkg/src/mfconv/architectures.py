"""Multifidelity convolutional networks.

Three families share one contract: ``forward`` returns an
:class:`MfPrediction` with low-fidelity outputs ordered coarsest to finest
and the high-fidelity output last.

* ``oned_mf``: expansion-then-compression network over 1D points with a
  linear and a nonlinear correlation head mixed by a learned weight.
* ``dense_unet``: 4-stage encoder/decoder mapping 3x64x64 fields to a
  64x64 pressure field, with LF heads at 8, 16 and 32 pixels.
* ``decoder_l2h``: decoder from two scalars to the same four outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mfconv import ops
from mfconv.dropblock import DropBlockSpec
from mfconv.nn import Conv, ConvBlock, ForwardContext, Module
from mfconv.tensor import DimensionError, Tensor, as_tensor, load_array, save_array

FAMILIES = ("oned_mf", "dense_unet", "decoder_l2h")

# Number of convolutions preceding the first LF output, i.e. eligible DropBlock sites.
ELIGIBLE_SITES = {"oned_mf": 8, "dense_unet": 10, "decoder_l2h": 6}
DEFAULT_BLOCK_SIZES = {"oned_mf": [1] * 8, "dense_unet": [3] * 10, "decoder_l2h": [1, 1, 1, 1, 3, 3]}


@dataclass
class NetworkSpec:
    family: str = "dense_unet"
    skip_mode: str = "concat"  # add | concat
    coupling: str = "implicit"  # implicit | explicit
    base_filters: int | None = None  # dense: 16; l2h: 4
    activation: str | None = None  # tanh for oned_mf, relu otherwise
    dropblock: DropBlockSpec = field(default_factory=DropBlockSpec)
    drop_sites: list[int] | None = None  # 1-based conv indices; None = all eligible
    block_sizes: list[int] | None = None  # per eligible site; None = family default
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.dropblock, dict):
            self.dropblock = DropBlockSpec(**self.dropblock)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.skip_mode not in ("add", "concat"):
            raise ValueError(f"skip_mode must be 'add' or 'concat', got {self.skip_mode!r}")
        if self.coupling not in ("implicit", "explicit"):
            raise ValueError(f"coupling must be 'implicit' or 'explicit', got {self.coupling!r}")
        if self.activation is None:
            self.activation = "tanh" if self.family == "oned_mf" else "relu"
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu', got {self.activation!r}")
        if self.base_filters is None:
            self.base_filters = {"oned_mf": 16, "dense_unet": 16, "decoder_l2h": 4}[self.family]
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        n = ELIGIBLE_SITES[self.family]
        if self.drop_sites is None:
            self.drop_sites = list(range(1, n + 1))
        bad = [s for s in self.drop_sites if not 1 <= s <= n]
        if bad:
            raise ValueError(f"drop sites {bad} outside the {n} convolutions preceding the first LF output")
        if self.block_sizes is None:
            if self.family == "decoder_l2h" or self.dropblock.block_size == 1:
                self.block_sizes = list(DEFAULT_BLOCK_SIZES[self.family])
            else:
                self.block_sizes = [self.dropblock.block_size] * n
        if len(self.block_sizes) != n:
            raise ValueError(f"block_sizes needs {n} entries, got {len(self.block_sizes)}")

    def site_spec(self, site: int) -> DropBlockSpec | None:
        if site not in self.drop_sites:
            return None
        return dataclasses.replace(self.dropblock, block_size=self.block_sizes[site - 1])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MfPrediction:
    lf_preds: list[Tensor]
    hf_pred: Tensor

    @property
    def outputs(self) -> list[Tensor]:
        return self.lf_preds + [self.hf_pred]


class Network(Module):
    """Shared forward plumbing; subclasses implement ``_forward``."""

    spec: NetworkSpec
    n_outputs: int

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.drop_p = spec.dropblock.p

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None, p: float | None = None) -> MfPrediction:
        """Run the network. DropBlocks are active in both modes unless ``p == 0``."""
        drop_p = self.drop_p if p is None else p
        ctx = ForwardContext(mode=mode, rng=rng, drop_p=drop_p)
        return self._forward(as_tensor(x), ctx)

    __call__ = forward

    def _block(self, site: int, cin: int, cout: int, k: int, dims: int, activation: str | None = None) -> ConvBlock:
        return ConvBlock(
            cin, cout, k, dims, activation or self.spec.activation,
            drop=self.spec.site_spec(site) if site > 0 else None,
            bn_momentum=self.spec.bn_momentum, bn_eps=self.spec.bn_eps,
        )

    def save_checkpoint(self, directory) -> None:
        """Write every parameter/buffer as a raw f64 tensor plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for name, arr in self.state_dict().items():
            save_array(directory / f"{name}.f64", arr)
            names.append({"name": name, "shape": list(arr.shape)})
        manifest = {"network_spec": self.spec.to_dict(), "tensors": names}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @staticmethod
    def load_checkpoint(directory) -> "Network":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        net = build_network(NetworkSpec(**manifest["network_spec"]))
        net.load_state_dict({t["name"]: load_array(directory / f"{t['name']}.f64") for t in manifest["tensors"]})
        return net


# -- 1D decoder-encoder -------------------------------------------------

class OneDMF(Network):
    """Pointwise network over a 1D coordinate signal.

    Each x value is processed independently as a length-1 feature map that
    is upsampled to 4 and pooled back to 1, so predictions do not depend on
    how densely the input signal is sampled.
    """

    n_outputs = 2

    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        # expansion: (16,16 | k=2), U, (8,8 | k=1), U
        self.expand = [
            self._block(1, 1, 16, 2, 1), self._block(2, 16, 16, 2, 1),
            self._block(3, 16, 8, 1, 1), self._block(4, 8, 8, 1, 1),
        ]
        # compression: (8,8 | k=1), M, (16,16 | k=2), M
        self.compress = [
            self._block(5, 8, 8, 1, 1), self._block(6, 8, 8, 1, 1),
            self._block(7, 8, 16, 2, 1), self._block(8, 16, 16, 2, 1),
        ]
        self.lf_out = Conv(16, 1, 1, dims=1)
        z_channels = 2 if spec.coupling == "explicit" else 17
        self.linear_head = Conv(z_channels, 1, 1, dims=1)
        self.nonlinear_hidden = self._block(0, z_channels, 8, 2, 1)
        self.nonlinear_out = Conv(8, 1, 1, dims=1)
        self.mix = Tensor(np.array([0.5]), requires_grad=True)

    def _forward(self, x: Tensor, ctx: ForwardContext) -> MfPrediction:
        if x.ndim != 3 or x.shape[1] != 1:
            raise DimensionError(f"oned_mf expects input (N, 1, L), got {x.shape}")
        n, _, length = x.shape
        pts = ops.reshape(x, (n * length, 1, 1))
        h = self.expand[0](pts, ctx)
        skip1 = self.expand[1](h, ctx)
        h = ops.upsample_nearest(skip1, 2)
        h = self.expand[2](h, ctx)
        skip2 = self.expand[3](h, ctx)
        h = ops.upsample_nearest(skip2, 2)
        h = self.compress[0](h, ctx)
        h = self.compress[1](h, ctx)
        h = ops.add_tensors(ops.maxpool(h, 2), skip2)
        h = self.compress[2](h, ctx)
        h = self.compress[3](h, ctx)
        feats = ops.add_tensors(ops.maxpool(h, 2), skip1)
        lf = self.lf_out(feats)
        z = ops.concat_channels(lf if self.spec.coupling == "explicit" else feats, pts)
        hf = self.heads(z, ctx)
        return MfPrediction(
            [ops.reshape(lf, (n, 1, length))],
            ops.reshape(hf, (n, 1, length)),
        )

    def linear(self, z: Tensor) -> Tensor:
        return self.linear_head(z)

    def nonlinear(self, z: Tensor, ctx: ForwardContext) -> Tensor:
        return self.nonlinear_out(self.nonlinear_hidden(z, ctx))

    def heads(self, z: Tensor, ctx: ForwardContext) -> Tensor:
        """HF = mix * linear(z) + (1 - mix) * nonlinear(z)."""
        lin = self.linear(z)
        nonlin = self.nonlinear(z, ctx)
        return ops.add(ops.mul(self.mix, lin), ops.mul(ops.sub(1.0, self.mix), nonlin))


# -- LF output head shared by the 2D families ---------------------------

class LFHead(Module):
    """CBR-C head producing one LF prediction channel."""

    def __init__(self, net: Network, cin: int, width: int):
        self.hidden = net._block(0, cin, width, 3, 2)
        self.out = Conv(width, 1, 3, dims=2)

    def __call__(self, h: Tensor, ctx: ForwardContext) -> Tensor:
        return self.out(self.hidden(h, ctx))


# -- dense U-Net-like encoder-decoder -----------------------------------

class DenseUNet(Network):
    n_outputs = 4

    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        f = spec.base_filters
        concat = spec.skip_mode == "concat"
        fb = 1 if spec.coupling == "explicit" else 0
        enc = [f, 2 * f, 4 * f, 8 * f]
        self.encoder = []
        cin, site = 3, 1
        for c in enc:
            self.encoder += [self._block(site, cin, c, 3, 2), self._block(site + 1, c, c, 3, 2)]
            cin, site = c, site + 2
        # decoder stage widths; stage i upsamples to 8 * 2**i
        dec = [4 * f, 2 * f, f, 2 * f]
        self.decoder = []
        self.projections = []
        self.lf_heads = []
        cin = enc[-1]
        for i, c in enumerate(dec):
            s1 = site if i == 0 else 0
            s2 = site + 1 if i == 0 else 0
            self.decoder += [self._block(s1, cin, c, 3, 2), self._block(s2, c, c, 3, 2)]
            skip_c = enc[3 - i]
            if concat:
                merged = c + skip_c
            else:
                self.projections.append(Conv(skip_c, c, 1, dims=2))
                merged = c
            if i < 3:
                self.lf_heads.append(LFHead(self, merged, f))
                cin = merged + fb
            else:
                cin = merged
        self.final_hidden = Conv(cin, f, 3, dims=2)
        self.final_out = Conv(f, 1, 3, dims=2)

    def _merge(self, i: int, h: Tensor, skip: Tensor) -> Tensor:
        if self.spec.skip_mode == "concat":
            return ops.concat_channels(h, skip)
        return ops.add_tensors(h, self.projections[i](skip))

    def _forward(self, x: Tensor, ctx: ForwardContext) -> MfPrediction:
        if x.ndim != 4 or x.shape[1:] != (3, 64, 64):
            raise DimensionError(f"dense_unet expects input (N, 3, 64, 64), got {x.shape}")
        h = x
        skips = []
        for stage in range(4):
            h = self.encoder[2 * stage](h, ctx)
            h = self.encoder[2 * stage + 1](h, ctx)
            skips.append(h)  # same masked tensor feeds the skip and the pool
            h = ops.maxpool(h, 2)
        lfs = []
        for i in range(4):
            h = self.decoder[2 * i](h, ctx)
            h = self.decoder[2 * i + 1](h, ctx)
            h = ops.upsample_nearest(h, 2)
            h = self._merge(i, h, skips[3 - i])
            if i < 3:
                lf = self.lf_heads[i](h, ctx)
                lfs.append(lf)
                if self.spec.coupling == "explicit":
                    h = ops.concat_channels(h, lf)
        h = ops.relu(self.final_hidden(h))
        return MfPrediction(lfs, self.final_out(h))


# -- low-to-high decoder ------------------------------------------------

class DecoderL2H(Network):
    n_outputs = 4

    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        k = spec.base_filters
        widths = [32 * k, 16 * k, 8 * k, 4 * k, 2 * k, k]
        fb = 1 if spec.coupling == "explicit" else 0
        self.stages = []
        self.lf_heads = []
        cin, site = 2, 1
        for i, c in enumerate(widths):
            s1, s2 = (site, site + 1) if i < 3 else (0, 0)
            self.stages += [self._block(s1, cin, c, 3, 2), self._block(s2, c, c, 3, 2)]
            site += 2
            cin = c
            if i >= 2 and i < 5:  # outputs at 8, 16, 32 after this stage's upsample
                self.lf_heads.append(LFHead(self, c, k))
                cin = c + fb
        self.final_hidden = self._block(0, cin, k, 3, 2)
        self.final_out = Conv(k, 1, 3, dims=2)

    def _forward(self, x: Tensor, ctx: ForwardContext) -> MfPrediction:
        if x.ndim != 2 or x.shape[1] != 2:
            raise DimensionError(f"decoder_l2h expects input (N, 2), got {x.shape}")
        h = ops.reshape(x, (x.shape[0], 2, 1, 1))
        lfs = []
        for i in range(6):
            h = self.stages[2 * i](h, ctx)
            h = self.stages[2 * i + 1](h, ctx)
            h = ops.upsample_nearest(h, 2)
            if 2 <= i < 5:
                lf = self.lf_heads[i - 2](h, ctx)
                lfs.append(lf)
                if self.spec.coupling == "explicit":
                    h = ops.concat_channels(h, lf)
        h = self.final_hidden(h, ctx)
        return MfPrediction(lfs, self.final_out(h))


def build_oned_mf(spec: NetworkSpec) -> OneDMF:
    if spec.family != "oned_mf":
        raise ValueError(f"build_oned_mf needs family 'oned_mf', got {spec.family!r}")
    return OneDMF(spec)


def build_dense_unet(spec: NetworkSpec) -> DenseUNet:
    if spec.family != "dense_unet":
        raise ValueError(f"build_dense_unet needs family 'dense_unet', got {spec.family!r}")
    return DenseUNet(spec)


def build_decoder_l2h(spec: NetworkSpec) -> DecoderL2H:
    if spec.family != "decoder_l2h":
        raise ValueError(f"build_decoder_l2h needs family 'decoder_l2h', got {spec.family!r}")
    return DecoderL2H(spec)


def build_network(spec: NetworkSpec) -> Network:
    return {"oned_mf": build_oned_mf, "dense_unet": build_dense_unet, "decoder_l2h": build_decoder_l2h}[spec.family](spec)
