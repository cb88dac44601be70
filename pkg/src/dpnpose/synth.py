"""Deterministic multi-person stick-figure scenes.

Randomness comes from SplitMix64 (Steele, Lea & Flood 2014), implemented on
integers so the stream is identical on every platform:

    GAMMA = 0x9E3779B97F4A7C15
    mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
             return z ^ (z >> 31)                       (all mod 2**64)
    next():  state += GAMMA; return mix(state)

Scene ``index`` under ``seed`` starts from ``state = mix(mix(seed) ^ index)``.
Uniform floats are ``(next() >> 11) * 2**-53``; bounded integers in
``[0, n)`` are ``(next() * n) >> 64``.  Background noise draws one value
per pixel and channel, in C order, after all geometry draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .targets import SceneAnnotation

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, state: int):
        self.state = state & MASK64

    @classmethod
    def for_scene(cls, seed: int, index: int) -> SplitMix64:
        return cls(mix64(mix64(seed) ^ (index & MASK64)))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` draws in stream order, vectorised; advances the state by ``n``."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix64_array(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return (out >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


@dataclass(frozen=True)
class Skeleton:
    names: tuple[str, ...]
    template: tuple[tuple[float, float], ...]  # offsets from centre, in person heights
    limbs: tuple[tuple[int, int], ...]
    colors: tuple[tuple[float, float, float], ...]

    @property
    def num_keypoints(self) -> int:
        return len(self.names)

    @property
    def extent(self) -> float:
        return max(math.hypot(x, y) for x, y in self.template)


STICK5 = Skeleton(
    names=("head", "left_hand", "right_hand", "left_foot", "right_foot"),
    template=((0.0, -0.45), (-0.35, -0.05), (0.35, -0.05), (-0.2, 0.45), (0.2, 0.45)),
    limbs=((0, 1), (0, 2), (0, 3), (0, 4)),
    colors=((1.0, 0.3, 0.3), (0.3, 1.0, 0.3), (0.3, 0.3, 1.0), (1.0, 1.0, 0.3), (0.3, 1.0, 1.0)),
)


@dataclass(frozen=True)
class SynthParams:
    height: int = 96
    width: int = 96
    min_persons: int = 1
    max_persons: int = 2
    scale_min: float = 0.3  # person height as a fraction of min(H, W)
    scale_max: float = 0.42
    rotation: float = 15.0  # degrees, symmetric range
    jitter: float = 0.06  # per-keypoint offset, in person heights
    spacing: float = 1.0  # min centre distance in units of the taller person
    noise: float = 0.15
    seed: int = 0
    limbs: tuple = STICK5.limbs

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size {self.height}x{self.width} not divisible by 8")
        if not 1 <= self.min_persons <= self.max_persons:
            raise ValueError("need 1 <= min_persons <= max_persons")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        for a, b in self.limbs:
            if not (0 <= a < STICK5.num_keypoints and 0 <= b < STICK5.num_keypoints) or a == b:
                raise ValueError(f"limb {a}-{b} invalid for the {STICK5.num_keypoints}-keypoint skeleton")

    @property
    def skeleton(self) -> Skeleton:
        return Skeleton(STICK5.names, STICK5.template, tuple(self.limbs), STICK5.colors)

    @property
    def min_center_distance(self) -> float:
        return 0.25 * min(self.height, self.width)


def _place_persons(params: SynthParams, rng: SplitMix64) -> list[tuple[float, float, float, float]]:
    """(cx, cy, person height, rotation radians) for each placed person."""
    size = min(params.height, params.width)
    k = params.min_persons + rng.randint(params.max_persons - params.min_persons + 1)
    extent = params.skeleton.extent + params.jitter * math.sqrt(2)
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(k):
        for _attempt in range(64):
            h = size * rng.uniform(params.scale_min, params.scale_max)
            theta = math.radians(rng.uniform(-params.rotation, params.rotation))
            margin = extent * h + 2.0
            cx = rng.uniform(margin, params.width - 1 - margin)
            cy = rng.uniform(margin, params.height - 1 - margin)
            ok = all(
                math.hypot(cx - px, cy - py)
                >= max(params.min_center_distance, params.spacing * max(h, ph))
                for px, py, ph, _ in placed
            )
            if ok:
                placed.append((cx, cy, h, theta))
                break
        else:
            break
    return placed


def _segment_coverage(gx, gy, a, b, radius):
    d = b - a
    l2 = float(d @ d)
    rx, ry = gx - a[0], gy - a[1]
    t = np.clip((rx * d[0] + ry * d[1]) / l2, 0.0, 1.0) if l2 > 0 else np.zeros_like(gx)
    dist = np.hypot(rx - t * d[0], ry - t * d[1])
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def generate_scene(params: SynthParams, index: int) -> tuple[np.ndarray, SceneAnnotation]:
    """Image ``(3, H, W)`` float32 in [0, 1] and its annotation; pure in (seed, index)."""
    if index < 0:
        raise ValueError(f"scene index must be non-negative, got {index}")
    rng = SplitMix64.for_scene(params.seed, index)
    sk = params.skeleton
    H, W = params.height, params.width
    persons, looks = [], []
    for cx, cy, h, theta in _place_persons(params, rng):
        c, s = math.cos(theta), math.sin(theta)
        kps = np.zeros((sk.num_keypoints, 3))
        for k, (tx, ty) in enumerate(sk.template):
            ox = tx + rng.uniform(-params.jitter, params.jitter)
            oy = ty + rng.uniform(-params.jitter, params.jitter)
            kps[k] = (cx + h * (c * ox - s * oy), cy + h * (s * ox + c * oy), 1.0)
        persons.append(kps)
        looks.append((h, rng.uniform(0.6, 1.0)))

    noise = rng.uniform_array(3 * H * W).reshape(3, H, W)
    img = (0.1 + params.noise * noise).astype(np.float64)
    gy, gx = np.mgrid[0:H, 0:W].astype(np.float64)
    for kps, (h, intensity) in zip(persons, looks):
        limb_r = max(1.0, 0.03 * h)
        for a, b in sk.limbs:
            cov = _segment_coverage(gx, gy, kps[a, :2], kps[b, :2], limb_r)
            img = img * (1 - cov) + 0.8 * intensity * cov
        dot_r = max(1.5, 0.07 * h)
        for k in range(sk.num_keypoints):
            cov = _segment_coverage(gx, gy, kps[k, :2], kps[k, :2], dot_r)
            color = np.asarray(sk.colors[k % len(sk.colors)])[:, None, None] * intensity
            img = img * (1 - cov) + color * cov
    ann = SceneAnnotation(persons, tuple(sk.limbs), H, W, num_keypoints=sk.num_keypoints)
    return np.clip(img, 0.0, 1.0).astype(np.float32), ann


def make_split(params: SynthParams, n_train: int, n_eval: int) -> tuple[range, range]:
    """Disjoint index ranges: training first, evaluation after."""
    if n_train <= 0 or n_eval <= 0:
        raise ValueError("n_train and n_eval must be positive")
    return range(0, n_train), range(n_train, n_train + n_eval)


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Write a (3,H,W) image as binary PPM or an (H,W) map as binary PGM."""
    arr = np.asarray(image)
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        h, w = arr.shape[1:]
        header, body = f"P6\n{w} {h}\n255\n", q.transpose(1, 2, 0).tobytes()
    elif arr.ndim == 2:
        h, w = arr.shape
        header, body = f"P5\n{w} {h}\n255\n", q.tobytes()
    else:
        raise ValueError(f"cannot write array of rank {arr.ndim} as PNM")
    Path(path).write_bytes(header.encode("ascii") + body)


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6/P5 file into a (3,H,W) float32 image in [0,1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P6/P5 supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    img = data.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float32) / 255.0
    return np.repeat(img, 3, axis=0) if channels == 1 else img
