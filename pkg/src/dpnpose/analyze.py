"""Closed-form parameter, size and multiply-accumulate accounting; forward timing.

Counting walks the layer layout implied by a :class:`NetworkConfig` without
building any tensors.  Sizes are decimal megabytes of float32 weights
(``params * 4 / 1e6``).
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import NetworkConfig


@dataclass(frozen=True)
class LayerRow:
    name: str
    kernel: int
    cin: int
    cout: int
    groups: int
    downsample: int  # input-to-layer resolution factor
    stage: int  # 0 for the frontend

    @property
    def params(self) -> int:
        return self.cout * (self.cin // self.groups) * self.kernel * self.kernel + self.cout

    def macs(self, height: int, width: int) -> int:
        pixels = (height // self.downsample) * (width // self.downsample)
        return pixels * self.cout * (self.cin // self.groups) * self.kernel * self.kernel


@dataclass
class CostReport:
    config: NetworkConfig
    rows: list[LayerRow]
    input_hw: tuple[int, int] | None = None
    stage_params: list[int] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def frontend_params(self) -> int:
        return sum(r.params for r in self.rows if r.stage == 0)

    @property
    def size_mb(self) -> float:
        return mb(self.total_params)

    @property
    def stage_increments_mb(self) -> list[float]:
        return [mb(p) for p in self.stage_params]

    @property
    def macs(self) -> int | None:
        if self.input_hw is None:
            return None
        return sum(r.macs(*self.input_hw) for r in self.rows)

    def table(self) -> str:
        lines = [f"{'layer':<28}{'k':>3}{'in':>6}{'out':>6}{'G':>4}{'params':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<28}{r.kernel:>3}{r.cin:>6}{r.cout:>6}{r.groups:>4}{r.params:>12,}")
        lines.append(f"{'total':<47}{self.total_params:>12,}  ({self.size_mb:.2f} MB)")
        return "\n".join(lines)


def mb(params: int) -> float:
    return params * 4 / 1e6


def _frontend_rows(cfg: NetworkConfig) -> list[LayerRow]:
    rows, cin, down = [], 3, 1
    for i, item in enumerate(cfg.frontend):
        if item == "M":
            down *= 2
            continue
        rows.append(LayerRow(f"frontend.conv{i}", 3, cin, item, 1, down, 0))
        cin = item
    return rows


def _dpn_stage_rows(cfg: NetworkConfig, t: int, s: int) -> list[LayerRow]:
    r, d0, g = cfg.residual_width, cfg.dense_width, cfg.growth
    w, G = cfg.bottleneck_width, cfg.cardinality
    p = f"stage{t}"
    rows = [LayerRow(f"{p}.proj", 1, cfg.stage_in_channels(t), r + d0, 1, s, t)]
    ap = d0
    for b in range(cfg.blocks_in_stage(t)):
        rows += [
            LayerRow(f"{p}.block{b}.reduce", 1, r + ap, w, 1, s, t),
            LayerRow(f"{p}.block{b}.group", 3, w, w, G, s, t),
            LayerRow(f"{p}.block{b}.expand", 1, w, r + g, 1, s, t),
        ]
        ap += g
    rows += [LayerRow(f"{p}.head_s", 1, r, cfg.keypoints, 1, s, t),
             LayerRow(f"{p}.head_l", 1, ap, cfg.pafs, 1, s, t)]
    return rows


def _baseline_stage_rows(cfg: NetworkConfig, t: int, s: int) -> list[LayerRow]:
    rows = []
    for tag, out in (("s", cfg.keypoints), ("l", cfg.pafs)):
        if t == 1:
            kernel, depth, mid = 3, 3, cfg.baseline_first_mid
        else:
            kernel, depth, mid = 7, 5, cfg.baseline_mid
        cin = cfg.stage_in_channels(t)
        for i in range(depth):
            rows.append(LayerRow(f"stage{t}.{tag}.conv{i}", kernel, cin, cfg.baseline_width, 1, s, t))
            cin = cfg.baseline_width
        rows.append(LayerRow(f"stage{t}.{tag}.conv{depth}", 1, cin, mid, 1, s, t))
        rows.append(LayerRow(f"stage{t}.{tag}.conv{depth + 1}", 1, mid, out, 1, s, t))
    return rows


def count_params(cfg: NetworkConfig, input_hw: tuple[int, int] | None = None) -> CostReport:
    rows = _frontend_rows(cfg)
    stage_rows = _dpn_stage_rows if cfg.arch == "dpn" else _baseline_stage_rows
    stage_params = []
    for t in range(1, cfg.stages + 1):
        sr = stage_rows(cfg, t, cfg.stride)
        stage_params.append(sum(r.params for r in sr))
        rows += sr
    return CostReport(cfg, rows, input_hw, stage_params)


def count_flops(cfg: NetworkConfig, height: int, width: int) -> int:
    """Multiply-accumulates of one forward pass at ``height x width`` input."""
    if height % cfg.stride or width % cfg.stride:
        raise ValueError(f"input {height}x{width} not divisible by stride {cfg.stride}")
    return count_params(cfg, (height, width)).macs


# ---------------------------------------------------------------------------
# tables


def arch_label(arch: str) -> str:
    return {"baseline": "openpose-style", "dpn": "dpn"}[arch]


@dataclass
class Table:
    header: list[str]
    rows: list[list[str]]

    def text(self) -> str:
        cols = [self.header] + self.rows
        widths = [max(len(r[i]) for r in cols) for i in range(len(self.header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                  for i, (c, w) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(self.header))
        return "\n".join([rule, fmt(self.header), rule] + [fmt(r) for r in self.rows] + [rule])

    def tsv(self) -> str:
        return "\n".join("\t".join(r) for r in [self.header] + self.rows) + "\n"


def size_table(archs: Sequence[str], stages: Sequence[int],
               base: NetworkConfig | None = None) -> Table:
    """Model size in MB, one row per architecture, one column per stage count."""
    base = base or NetworkConfig()
    if any(t < 1 for t in stages):
        raise ValueError("stage counts must be >= 1")
    rows = []
    for arch in archs:
        sizes = [count_params(base.replace(arch=arch, stages=t)).size_mb for t in stages]
        rows.append([arch_label(arch)] + [f"{v:.1f}" for v in sizes])
    return Table(["Method"] + [f"{t} stages" for t in stages], rows)


@dataclass
class BenchResult:
    label: str
    samples_ms: list[float]
    macs: int

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def std_ms(self) -> float:
        return statistics.stdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0


def bench_forward(network, height: int, width: int, warmup: int = 1, reps: int = 5,
                  label: str | None = None) -> BenchResult:
    """Wall-clock forward time of a single frame; report-only."""
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    x = np.random.default_rng(0).random((1, 3, height, width), dtype=np.float32)
    for _ in range(warmup):
        network.forward(x)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        network.forward(x)
        samples.append((time.perf_counter() - t0) * 1e3)
    cfg = network.cfg
    label = label or f"{arch_label(cfg.arch)}@{cfg.stages}stages"
    return BenchResult(label, samples, count_flops(cfg, height, width))


def timing_table(results: Sequence[BenchResult]) -> Table:
    rows = [[r.label, f"{r.mean_ms:.1f}", f"{r.std_ms:.1f}", f"{r.macs / 1e9:.3f}"] for r in results]
    return Table(["Method", "forward time (ms)", "std (ms)", "GMACs"], rows)
