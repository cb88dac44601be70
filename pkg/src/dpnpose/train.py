"""Per-stage L2 losses with intermediate supervision, training loop, checkpoints."""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import NetworkConfig, RunConfig, network_from_text, network_to_text
from .optim import SGD
from .posenet import PoseNetwork, StageOutput
from .synth import SynthParams, generate_scene, make_split
from .targets import SceneAnnotation, TargetMaps, render_targets, stack_targets
from .tensor import ShapeError, Tensor, add_scalars, backward, sse_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses


def stage_losses(out: StageOutput, tgt: TargetMaps) -> tuple[Tensor, Tensor]:
    """Sum-of-squares heatmap loss and PAF loss for one stage."""
    if out.S.shape != tgt.S_star.shape:
        raise ShapeError(f"heatmap shape {out.S.shape} != target {tgt.S_star.shape}")
    if out.L.shape != tgt.L_star.shape:
        raise ShapeError(f"PAF shape {out.L.shape} != target {tgt.L_star.shape}")
    return sse_loss(out.S, tgt.S_star), sse_loss(out.L, tgt.L_star)


def total_loss(outputs: Sequence[StageOutput], tgt: TargetMaps) -> Tensor:
    if not outputs:
        raise ValueError("total_loss needs at least one stage output")
    terms = []
    for out in outputs:
        terms.extend(stage_losses(out, tgt))
    return add_scalars(terms)


# ---------------------------------------------------------------------------
# data


class SceneCache:
    """Generated scenes and rendered targets, memoised by index."""

    def __init__(self, synth: SynthParams, stride: int, sigma: float, halfwidth: float):
        self.synth, self.stride, self.sigma, self.halfwidth = synth, stride, sigma, halfwidth
        self._items: dict[int, tuple[np.ndarray, SceneAnnotation, TargetMaps]] = {}

    def get(self, index: int) -> tuple[np.ndarray, SceneAnnotation, TargetMaps]:
        if index not in self._items:
            img, ann = generate_scene(self.synth, index)
            self._items[index] = (img, ann, render_targets(ann, self.stride, self.sigma, self.halfwidth))
        return self._items[index]

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, TargetMaps]:
        items = [self.get(i) for i in indices]
        return np.stack([it[0] for it in items]), stack_targets([it[2] for it in items])


def check_compatible(net: NetworkConfig, synth: SynthParams) -> None:
    n_kp = synth.skeleton.num_keypoints
    if net.keypoints != n_kp + 1:
        raise ValueError(f"net.keypoints={net.keypoints} but the skeleton has {n_kp} "
                         f"keypoints plus background ({n_kp + 1})")
    if net.pafs != 2 * len(synth.limbs):
        raise ValueError(f"net.pafs={net.pafs} but the skeleton has {len(synth.limbs)} limbs "
                         f"({2 * len(synth.limbs)} channels)")


# ---------------------------------------------------------------------------
# loop


@dataclass
class LogRow:
    step: int
    total: float
    f_S: list[float]
    f_L: list[float]

    def tsv(self) -> str:
        vals = [f"{self.total:.6g}"] + [f"{v:.6g}" for v in self.f_S] + [f"{v:.6g}" for v in self.f_L]
        return "\t".join([str(self.step)] + vals)


def log_header(stages: int) -> str:
    cols = ["step", "total"] + [f"f_S{t}" for t in range(1, stages + 1)] + \
        [f"f_L{t}" for t in range(1, stages + 1)]
    return "\t".join(cols)


@dataclass
class TrainResult:
    network: PoseNetwork
    optimizer: SGD
    log: list[LogRow]
    step: int

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.network, self.optimizer, self.step)


def train_loop(cfg: RunConfig, checkpoint_path: str | Path | None = None,
               log_path: str | Path | None = None,
               network: PoseNetwork | None = None) -> TrainResult:
    """Train on the synthetic training split; deterministic given the configs.

    Row 0 of the log is the loss of the first batch before any update; later
    rows average the per-step losses since the previous row.
    """
    tp = cfg.train
    check_compatible(cfg.net, cfg.synth)
    net = network if network is not None else PoseNetwork(cfg.net)
    params = net.named_parameters()
    frozen = set(net.frontend_parameter_names()) if tp.freeze_frontend else set()
    for name, p in params.items():
        p.requires_grad = name not in frozen
    opt = SGD(params, lr=tp.lr, momentum=tp.momentum, frozen=frozen)
    train_idx, _ = make_split(cfg.synth, tp.n_train, tp.n_eval)
    data = SceneCache(cfg.synth, net.stride, cfg.target.sigma, cfg.target.halfwidth(net.stride))
    feature_cache: dict[int, np.ndarray] = {}

    def features(indices, images):
        if not tp.freeze_frontend:
            return net.features(images)
        for i, idx in enumerate(indices):
            if idx not in feature_cache:
                feature_cache[idx] = net.features(images[i:i + 1]).data[0]
        return Tensor(np.stack([feature_cache[idx] for idx in indices]))

    rows: list[LogRow] = []
    window: list[tuple[float, list[float], list[float]]] = []
    T = len(net.stages)
    log_file = open(log_path, "w") if log_path else None
    try:
        if log_file:
            log_file.write(log_header(T) + "\n")
        for step in range(1, tp.steps + 1):
            start = (step - 1) * tp.batch
            indices = [train_idx[(start + i) % len(train_idx)] for i in range(tp.batch)]
            images, tgt = data.batch(indices)
            outputs = net.forward_features(features(indices, images))
            per_stage = [stage_losses(o, tgt) for o in outputs]
            loss = add_scalars([x for pair in per_stage for x in pair])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}")
            backward(loss)
            opt.step()
            window.append((value, [float(s.data) for s, _ in per_stage],
                           [float(l.data) for _, l in per_stage]))
            if step == 1 or step % tp.log_interval == 0 or step == tp.steps:
                row = LogRow(
                    step=0 if step == 1 else step,
                    total=float(np.mean([w[0] for w in window])),
                    f_S=list(np.mean([w[1] for w in window], axis=0)),
                    f_L=list(np.mean([w[2] for w in window], axis=0)),
                )
                window.clear()
                rows.append(row)
                log.info("step %d loss %.4f", row.step, row.total)
                if log_file:
                    log_file.write(row.tsv() + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()
    result = TrainResult(net, opt, rows, tp.steps)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, result.checkpoint())
    return result


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   8s  magic "DPNPOSE\0"
#   u32 version
#   u32 n, n bytes UTF-8 echo of the network config plus optim.* keys
#   u64 step
#   u32 tensor count, then per tensor:
#       u32 n, n bytes UTF-8 name; u32 rank; rank x u32 dims; float32 data
#   u32 CRC-32 of every preceding byte

MAGIC = b"DPNPOSE\x00"
VERSION = 1
MOMENTUM_PREFIX = "momentum/"


@dataclass
class Checkpoint:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.0
    momentum: float = 0.0
    frozen: tuple[str, ...] = ()
    version: int = VERSION
    momenta: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def capture(cls, net: PoseNetwork, opt: SGD | None = None, step: int = 0) -> Checkpoint:
        tensors = {name: p.data.copy() for name, p in net.named_parameters().items()}
        if opt is None:
            return cls(net.cfg, tensors, step)
        return cls(net.cfg, tensors, step, opt.lr, opt.momentum, tuple(sorted(opt.frozen)),
                   momenta={n: v.copy() for n, v in opt.velocity.items()})

    def echo(self) -> str:
        return (network_to_text(self.config)
                + f"optim.lr={self.lr!r}\noptim.momentum={self.momentum!r}\n"
                + f"optim.frozen={','.join(self.frozen)}\n")

    def restore(self, net: PoseNetwork, opt: SGD | None = None) -> None:
        params = net.named_parameters()
        _validate_shapes(self.tensors, {n: p.shape for n, p in params.items()})
        for name, arr in self.tensors.items():
            params[name].data = arr.copy()
        if opt is not None:
            for name, v in self.momenta.items():
                if name in opt.velocity:
                    opt.velocity[name] = v.copy()

    def build(self) -> PoseNetwork:
        net = PoseNetwork(self.config)
        self.restore(net)
        return net


def _validate_shapes(tensors: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                  f"network expects {tuple(shape)}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint tensor {extra[0]!r} not in network")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    echo = ckpt.echo().encode("utf-8")
    records = list(ckpt.tensors.items()) + [
        (MOMENTUM_PREFIX + n, v) for n, v in ckpt.momenta.items()]
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(echo)), echo,
             struct.pack("<Q", ckpt.step), struct.pack("<I", len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path: str | Path, network: PoseNetwork | None = None) -> Checkpoint:
    """Parse and validate a checkpoint; shapes are checked against ``network``
    if given, otherwise against a network built from the echoed config."""
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not a dpnpose checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    r.buf = raw[:-4]  # trailing checksum, verified once the structure parses
    try:
        echo = r.take(r.u32("config length"), "config echo").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config echo is not valid UTF-8") from None
    net_lines, optim = [], {}
    for line in echo.splitlines():
        if line.startswith("optim."):
            key, _, value = line.partition("=")
            optim[key] = value
        else:
            net_lines.append(line)
    try:
        cfg = network_from_text("\n".join(net_lines))
        lr = float(optim.get("optim.lr", "0"))
        mom = float(optim.get("optim.momentum", "0"))
    except ValueError as exc:
        raise CheckpointError(f"bad config echo: {exc}") from None
    frozen = tuple(n for n in optim.get("optim.frozen", "").split(",") if n)
    step = r.u64("step")
    count = r.u32("tensor count")
    tensors, momenta = {}, {}
    for i in range(count):
        try:
            name = r.take(r.u32(f"name length of tensor {i}"), f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"name of tensor {i} is not valid UTF-8") from None
        rank = r.u32(f"rank of {name!r}")
        if rank > 8:
            raise CheckpointError(f"tensor {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        arr = arr.astype(np.float32)
        if name.startswith(MOMENTUM_PREFIX):
            momenta[name[len(MOMENTUM_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last tensor")
    if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(r.buf):
        raise CheckpointError("checksum mismatch: checkpoint contents are corrupted")
    if network is not None:
        expected = {n: p.shape for n, p in network.named_parameters().items()}
    else:
        expected = {n: p.shape for n, p in PoseNetwork(cfg).named_parameters().items()}
    _validate_shapes(tensors, expected)
    for name, v in momenta.items():
        if name not in expected or v.shape != tuple(expected[name]):
            raise CheckpointError(f"momentum buffer {name!r} does not match the network")
    return Checkpoint(cfg, tensors, step, lr, mom, frozen, version, momenta)
