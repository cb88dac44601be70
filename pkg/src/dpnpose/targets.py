"""Ground-truth keypoint heatmaps and part-affinity fields.

Output pixel ``(i, j)`` corresponds to image point ``(x, y) = (j*s, i*s)``
for output stride ``s`` (no half-pixel offset); decoding inverts this map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class SceneAnnotation:
    """Keypoints of every person in one image plus the limb topology.

    ``persons[i]`` is a ``(K, 3)`` array of ``(x, y, visible)`` rows.
    """

    persons: list[np.ndarray]
    limbs: tuple[tuple[int, int], ...]
    height: int
    width: int
    num_keypoints: int = field(default=0)

    def __post_init__(self):
        self.persons = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in self.persons]
        if not self.num_keypoints:
            self.num_keypoints = self.persons[0].shape[0] if self.persons else (
                max((max(a, b) for a, b in self.limbs), default=-1) + 1)
        for i, p in enumerate(self.persons):
            if p.shape[0] != self.num_keypoints:
                raise ValueError(f"person {i} has {p.shape[0]} keypoints, expected {self.num_keypoints}")
        for a, b in self.limbs:
            if not (0 <= a < self.num_keypoints and 0 <= b < self.num_keypoints) or a == b:
                raise ValueError(f"limb ({a}, {b}) invalid for {self.num_keypoints} keypoints")

    @property
    def num_limbs(self) -> int:
        return len(self.limbs)

    def visible(self, person: int) -> np.ndarray:
        return self.persons[person][:, 2] > 0

    def to_text(self) -> str:
        lines = [f"# size {self.height} {self.width}"]
        for p in self.persons:
            lines.append(" ".join(f"{x:.6g} {y:.6g} {int(v)}" for x, y, v in p))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, limbs, height: int | None = None,
                  width: int | None = None) -> SceneAnnotation:
        persons = []
        for raw in text.splitlines():
            line = raw.strip()
            if line.startswith("# size"):
                _, _, h, w = line.split()
                height = height or int(h)
                width = width or int(w)
                continue
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) % 3:
                raise ValueError(f"annotation line has {len(vals)} values, not a multiple of 3")
            persons.append(np.array(vals).reshape(-1, 3))
        if height is None or width is None:
            raise ValueError("annotation text lacks image size")
        return cls(persons, tuple(limbs), height, width)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


@dataclass
class TargetMaps:
    S_star: np.ndarray  # (J, H/s, W/s), last channel is background
    L_star: np.ndarray  # (C, H/s, W/s)


def output_grid(height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-space x and y of every output pixel, each shaped (H/s, W/s)."""
    ys = np.arange(height // stride, dtype=np.float64) * stride
    xs = np.arange(width // stride, dtype=np.float64) * stride
    return np.meshgrid(xs, ys)


def render_heatmaps(ann: SceneAnnotation, stride: int, sigma: float = 7.0) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gx, gy = output_grid(ann.height, ann.width, stride)
    K = ann.num_keypoints
    maps = np.zeros((K + 1,) + gx.shape, dtype=np.float64)
    for person in ann.persons:
        for k, (x, y, v) in enumerate(person):
            if v <= 0:
                continue
            g = np.exp(-((gx - x) ** 2 + (gy - y) ** 2) / (2.0 * sigma ** 2))
            np.maximum(maps[k], g, out=maps[k])
    maps[K] = np.clip(1.0 - maps[:K].max(axis=0, initial=0.0), 0.0, 1.0)
    return maps.astype(np.float32)


def limb_mask(gx: np.ndarray, gy: np.ndarray, a: np.ndarray, b: np.ndarray,
              halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixels inside the rectangle spanned by segment a->b, and its unit direction."""
    d = b - a
    length = float(np.hypot(d[0], d[1]))
    if length == 0.0:
        return np.zeros(gx.shape, dtype=bool), np.zeros(2)
    u = d / length
    rx, ry = gx - a[0], gy - a[1]
    along = rx * u[0] + ry * u[1]
    across = np.abs(rx * u[1] - ry * u[0])
    return (along >= 0) & (along <= length) & (across <= halfwidth), u


def render_pafs(ann: SceneAnnotation, stride: int, halfwidth: float | None = None) -> np.ndarray:
    hw = float(stride) if halfwidth is None else float(halfwidth)
    if hw <= 0:
        raise ValueError(f"limb half-width must be positive, got {hw}")
    gx, gy = output_grid(ann.height, ann.width, stride)
    out = np.zeros((2 * ann.num_limbs,) + gx.shape, dtype=np.float64)
    for c, (ia, ib) in enumerate(ann.limbs):
        acc = np.zeros((2,) + gx.shape)
        count = np.zeros(gx.shape)
        for person in ann.persons:
            if person[ia, 2] <= 0 or person[ib, 2] <= 0:
                continue
            mask, u = limb_mask(gx, gy, person[ia, :2], person[ib, :2], hw)
            if not mask.any():
                continue
            acc[0][mask] += u[0]
            acc[1][mask] += u[1]
            count += mask
        covered = count > 0
        out[2 * c][covered] = acc[0][covered] / count[covered]
        out[2 * c + 1][covered] = acc[1][covered] / count[covered]
    return out.astype(np.float32)


def render_targets(ann: SceneAnnotation, stride: int, sigma: float = 7.0,
                   halfwidth: float | None = None) -> TargetMaps:
    return TargetMaps(render_heatmaps(ann, stride, sigma), render_pafs(ann, stride, halfwidth))


def stack_targets(maps: Sequence[TargetMaps]) -> TargetMaps:
    return TargetMaps(np.stack([m.S_star for m in maps]), np.stack([m.L_star for m in maps]))
