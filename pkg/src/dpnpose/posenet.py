"""Multi-stage pose networks: VGG-style frontend, DPN stages, baseline stages.

Every stage maps the shared frontend features (plus, after stage 1, the
previous stage's heatmaps and PAFs) to a pair of maps at feature
resolution.  A DPN stage carries two branches through its blocks: a
fixed-width residual branch feeding the heatmap head and a densely growing
branch feeding the PAF head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import NetworkConfig
from .tensor import (ShapeError, Tensor, add, concat, conv2d, max_pool2x2,
                     parameter, relu, same_padding, split_channels)

# linear output heads start near zero so the initial loss is the target energy
HEAD_GAIN = 1e-2


@dataclass
class StageOutput:
    S: Tensor
    L: Tensor


@dataclass
class DpnBranches:
    kp: Tensor
    ap: Tensor


class Conv:
    """Zero-padded "same" convolution layer with bias."""

    def __init__(self, name: str, cin: int, cout: int, kernel: int,
                 rng: np.random.Generator, groups: int = 1, gain: float = 2.0):
        self.name = name
        self.cin, self.cout, self.kernel, self.groups = cin, cout, kernel, groups
        self.padding = same_padding(kernel)
        if cin % groups or cout % groups:
            raise ShapeError(f"{name}: channels {cin}->{cout} not divisible by groups {groups}")
        fan_in = cin // groups * kernel * kernel
        w = rng.standard_normal((cout, cin // groups, kernel, kernel), dtype=np.float32)
        w *= np.float32(np.sqrt(gain / fan_in))
        self.weight = parameter(w, f"{name}.weight")
        self.bias = parameter(np.zeros(cout), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {x.shape[1]}")
        return conv2d(x, self.weight, self.bias, padding=self.padding, groups=self.groups)

    def parameters(self) -> Iterator[Tensor]:
        yield self.weight
        yield self.bias

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size


class Frontend:
    """Conv/pool stack producing stride-s features; layer list like ``64,64,M,...``."""

    def __init__(self, layers, rng: np.random.Generator, in_channels: int = 3):
        self.layers: list[Conv | str] = []
        cin = in_channels
        for i, item in enumerate(layers):
            if item == "M":
                self.layers.append("M")
            else:
                self.layers.append(Conv(f"frontend.conv{i}", cin, item, 3, rng))
                cin = item
        self.out_channels = cin
        self.stride = 2 ** sum(1 for x in layers if x == "M")

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} not divisible by frontend stride {self.stride}")
        for layer in self.layers:
            x = max_pool2x2(x) if layer == "M" else relu(layer(x))
        return x

    def convs(self) -> list[Conv]:
        return [c for c in self.layers if c != "M"]


class DpnBlock:
    """Bottleneck on concat(kp, ap); output split into a residual update and new dense channels."""

    def __init__(self, name: str, r: int, ap_in: int, g: int, w: int, G: int,
                 rng: np.random.Generator):
        self.r, self.g, self.ap_in = r, g, ap_in
        self.reduce = Conv(f"{name}.reduce", r + ap_in, w, 1, rng)
        self.group = Conv(f"{name}.group", w, w, 3, rng, groups=G)
        self.expand = Conv(f"{name}.expand", w, r + g, 1, rng, gain=1.0)

    def __call__(self, br: DpnBranches) -> DpnBranches:
        if br.kp.shape[1] != self.r:
            raise ShapeError(f"{self.reduce.name}: kp has {br.kp.shape[1]} channels, expected {self.r}")
        if br.ap.shape[1] != self.ap_in:
            raise ShapeError(f"{self.reduce.name}: ap has {br.ap.shape[1]} channels, expected {self.ap_in}")
        x = concat([br.kp, br.ap])
        x = relu(self.reduce(x))
        x = relu(self.group(x))
        x = self.expand(x)
        res, dense = split_channels(x, self.r)
        return DpnBranches(kp=add(br.kp, res), ap=concat([br.ap, dense]))

    def convs(self) -> list[Conv]:
        return [self.reduce, self.group, self.expand]


class DpnStage:
    def __init__(self, cfg: NetworkConfig, t: int, rng: np.random.Generator):
        self.t = t
        self.in_channels = cfg.stage_in_channels(t)
        r, d0, g = cfg.residual_width, cfg.dense_width, cfg.growth
        p = f"stage{t}"
        self.r = r
        self.proj = Conv(f"{p}.proj", self.in_channels, r + d0, 1, rng, gain=1.0)
        self.blocks = [
            DpnBlock(f"{p}.block{b}", r, d0 + b * g, g, cfg.bottleneck_width,
                     cfg.cardinality, rng)
            for b in range(cfg.blocks_in_stage(t))
        ]
        ap_out = d0 + len(self.blocks) * g
        self.head_s = Conv(f"{p}.head_s", r, cfg.keypoints, 1, rng, gain=HEAD_GAIN)
        self.head_l = Conv(f"{p}.head_l", ap_out, cfg.pafs, 1, rng, gain=HEAD_GAIN)

    def branches(self, x: Tensor) -> list[DpnBranches]:
        """Initial split followed by the branches after every block."""
        kp, ap = split_channels(self.proj(x), self.r)
        out = [DpnBranches(kp, ap)]
        for block in self.blocks:
            out.append(block(out[-1]))
        return out

    def __call__(self, x: Tensor) -> StageOutput:
        final = self.branches(x)[-1]
        return StageOutput(S=self.head_s(final.kp), L=self.head_l(final.ap))

    def convs(self) -> list[Conv]:
        out = [self.proj]
        for b in self.blocks:
            out += b.convs()
        return out + [self.head_s, self.head_l]


class BaselineStage:
    """Openpose-style stage: two independent conv branches, one per output."""

    def __init__(self, cfg: NetworkConfig, t: int, rng: np.random.Generator):
        self.t = t
        self.in_channels = cfg.stage_in_channels(t)
        self.branch_s = self._branch(f"stage{t}.s", cfg, t, cfg.keypoints, rng)
        self.branch_l = self._branch(f"stage{t}.l", cfg, t, cfg.pafs, rng)

    def _branch(self, name, cfg, t, out_channels, rng) -> list[Conv]:
        width = cfg.baseline_width
        if t == 1:
            kernel, depth, mid = 3, 3, cfg.baseline_first_mid
        else:
            kernel, depth, mid = 7, 5, cfg.baseline_mid
        convs, cin = [], self.in_channels
        for i in range(depth):
            convs.append(Conv(f"{name}.conv{i}", cin, width, kernel, rng))
            cin = width
        convs.append(Conv(f"{name}.conv{depth}", width, mid, 1, rng))
        convs.append(Conv(f"{name}.conv{depth + 1}", mid, out_channels, 1, rng, gain=HEAD_GAIN))
        return convs

    @staticmethod
    def _run(convs: list[Conv], x: Tensor) -> Tensor:
        for conv in convs[:-1]:
            x = relu(conv(x))
        return convs[-1](x)

    def __call__(self, x: Tensor) -> StageOutput:
        return StageOutput(S=self._run(self.branch_s, x), L=self._run(self.branch_l, x))

    def convs(self) -> list[Conv]:
        return self.branch_s + self.branch_l


def stage_input(F: Tensor, prev: StageOutput | None, t: int) -> Tensor:
    if t == 1:
        if prev is not None:
            raise ValueError("stage 1 takes no previous output")
        return F
    if prev is None:
        raise ValueError(f"stage {t} needs the previous stage's output")
    return concat([F, prev.S, prev.L])


class PoseNetwork:
    """Frontend plus ``cfg.stages`` repeated stages of the configured architecture."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.frontend = Frontend(cfg.frontend, rng)
        stage_cls = DpnStage if cfg.arch == "dpn" else BaselineStage
        self.stages = [stage_cls(cfg, t, rng) for t in range(1, cfg.stages + 1)]

    @property
    def stride(self) -> int:
        return self.frontend.stride

    def convs(self) -> list[Conv]:
        out = self.frontend.convs()
        for st in self.stages:
            out += st.convs()
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for conv in self.convs():
            for p in conv.parameters():
                params[p.name] = p
        return params

    def frontend_parameter_names(self) -> list[str]:
        return [p.name for c in self.frontend.convs() for p in c.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def features(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"images must be N x 3 x H x W, got {x.shape}")
        return self.frontend(x)

    def forward_features(self, F: Tensor) -> list[StageOutput]:
        outputs: list[StageOutput] = []
        prev = None
        for stage in self.stages:
            out = stage(stage_input(F, prev, stage.t))
            outputs.append(out)
            prev = out
        return outputs

    def forward(self, images) -> list[StageOutput]:
        return self.forward_features(self.features(images))

    __call__ = forward


def build_frontend(cfg: NetworkConfig, seed: int | None = None) -> Frontend:
    return Frontend(cfg.frontend, np.random.default_rng(cfg.seed if seed is None else seed))
