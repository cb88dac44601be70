"""Bottom-up decoding: heatmap peaks, PAF line scores, greedy assembly, PCK."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .posenet import PoseNetwork
from .targets import SceneAnnotation
from .tensor import Tensor, bilinear_resize, bilinear_sample


@dataclass(frozen=True)
class KeypointCandidate:
    type: int
    x: float
    y: float
    score: float
    id: int = -1


@dataclass
class DecodedPose:
    keypoints: dict[int, KeypointCandidate] = field(default_factory=dict)
    score: float = 0.0

    def location(self, k: int) -> tuple[float, float] | None:
        c = self.keypoints.get(k)
        return None if c is None else (c.x, c.y)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# neighbours before a pixel in row-major scan order must be strictly lower,
# later ones at most equal: a plateau yields its first pixel only
_EARLIER = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
_LATER = ((0, 1), (1, -1), (1, 0), (1, 1))


def peak_mask(hm: np.ndarray, threshold: float) -> np.ndarray:
    h, w = hm.shape
    p = np.full((h + 2, w + 2), -np.inf)
    p[1:-1, 1:-1] = hm
    mask = hm >= threshold
    for dy, dx in _EARLIER:
        mask &= hm > p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    for dy, dx in _LATER:
        mask &= hm >= p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return mask


def find_peaks(S, threshold: float = 0.3, stride: int = 8,
               background: bool = True) -> list[KeypointCandidate]:
    """Local 3x3 maxima per keypoint channel; the last channel is skipped
    when it is the background map."""
    if not 0 < threshold < 1:
        raise ValueError(f"peak threshold must lie in (0, 1), got {threshold}")
    maps = _arr(S)
    if maps.ndim == 4:
        maps = maps[0]
    n = maps.shape[0] - 1 if background else maps.shape[0]
    out: list[KeypointCandidate] = []
    for j in range(n):
        ys, xs = np.nonzero(peak_mask(maps[j], threshold))
        for y, x in zip(ys, xs):
            out.append(KeypointCandidate(j, float(x * stride), float(y * stride),
                                         float(maps[j, y, x]), len(out)))
    return out


def score_connection(L, limb: int, a: KeypointCandidate, b: KeypointCandidate,
                     n_samples: int = 10, stride: int = 8) -> float:
    """Mean projection of the limb's field onto unit(b - a) along the segment."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    field_ = _arr(L)
    if field_.ndim == 4:
        field_ = field_[0]
    dx, dy = b.x - a.x, b.y - a.y
    norm = float(np.hypot(dx, dy))
    if norm == 0.0:
        return 0.0
    ux, uy = dx / norm, dy / norm
    t = np.linspace(0.0, 1.0, n_samples)
    h, w = field_.shape[1:]
    col = np.clip(np.rint((a.x + t * dx) / stride).astype(int), 0, w - 1)
    row = np.clip(np.rint((a.y + t * dy) / stride).astype(int), 0, h - 1)
    vx = field_[2 * limb, row, col]
    vy = field_[2 * limb + 1, row, col]
    return float(np.mean(vx * ux + vy * uy))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> int:
        ri, rj = self.find(i), self.find(j)
        root, child = min(ri, rj), max(ri, rj)
        self.parent[child] = root
        return root


def assemble(candidates: Sequence[KeypointCandidate], L, limbs: Sequence[tuple[int, int]],
             threshold: float = 0.3, n_samples: int = 10, stride: int = 8,
             min_keypoints: int = 2) -> list[DecodedPose]:
    """Greedy limb-by-limb assembly of candidates into poses.

    For each limb all cross pairs are scored and accepted best-first while
    both endpoints are unused for that limb.  Accepted pairs merge their
    persons unless the merge would give one person two keypoints of a type.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"connection threshold must lie in (0, 1), got {threshold}")
    cands = list(candidates)
    if not cands:
        return []
    uf = _UnionFind(len(cands))
    types: dict[int, dict[int, int]] = {i: {c.type: i} for i, c in enumerate(cands)}
    conn_score = [0.0] * len(cands)
    by_type: dict[int, list[int]] = {}
    for i, c in enumerate(cands):
        by_type.setdefault(c.type, []).append(i)

    for limb, (ta, tb) in enumerate(limbs):
        pairs = []
        for ia in by_type.get(ta, []):
            for ib in by_type.get(tb, []):
                s = score_connection(L, limb, cands[ia], cands[ib], n_samples, stride)
                if s >= threshold:
                    pairs.append((-s, ia, ib))
        pairs.sort()
        used_a, used_b = set(), set()
        for neg, ia, ib in pairs:
            if ia in used_a or ib in used_b:
                continue
            ra, rb = uf.find(ia), uf.find(ib)
            if ra != rb:
                if types[ra].keys() & types[rb].keys():
                    continue
                root = uf.union(ra, rb)
                other = rb if root == ra else ra
                types[root] = {**types[ra], **types[rb]}
                conn_score[root] += conn_score[other]
                del types[other]
            used_a.add(ia)
            used_b.add(ib)
            conn_score[uf.find(ia)] += -neg

    poses = []
    for root in sorted(types):
        members = types[root]
        if len(members) < min_keypoints:
            continue
        kps = {t: cands[i] for t, i in sorted(members.items())}
        score = sum(c.score for c in kps.values()) + conn_score[root]
        poses.append(DecodedPose(kps, score))
    return poses


def decode(S, L, limbs, stride: int = 8, peak_threshold: float = 0.3,
           connection_threshold: float = 0.3, n_samples: int = 10,
           min_keypoints: int = 2) -> list[DecodedPose]:
    cands = find_peaks(S, peak_threshold, stride)
    return assemble(cands, L, limbs, connection_threshold, n_samples, stride, min_keypoints)


def multi_scale_infer(network: PoseNetwork, image, scales: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Final-stage maps averaged over scales, at the base output resolution.

    Each scaled image is zero-padded on the bottom/right to a multiple of the
    stride; base output pixel ``q`` is read from scaled output coordinate
    ``q * scaled_size / base_size``, so padding never contributes.
    """
    if not scales:
        raise ValueError("multi_scale_infer needs at least one scale")
    img = _arr(image)
    if img.ndim == 4:
        img = img[0]
    s = network.stride
    H, W = img.shape[1:]
    out_h, out_w = -(-H // s), -(-W // s)
    acc_s = acc_l = None
    for sc in scales:
        if sc <= 0:
            raise ValueError(f"scales must be positive, got {sc}")
        sh, sw = max(1, int(round(H * sc))), max(1, int(round(W * sc)))
        scaled = img if (sh, sw) == (H, W) else bilinear_resize(img, sh, sw)
        ph, pw = -(-sh // s) * s, -(-sw // s) * s
        if (ph, pw) != (sh, sw):
            scaled = np.pad(scaled, ((0, 0), (0, ph - sh), (0, pw - sw)))
        final = network.forward(scaled[None].astype(np.float32))[-1]
        S = bilinear_sample(final.S.data[0], out_h, out_w, sh / H, sw / W)
        L = bilinear_sample(final.L.data[0], out_h, out_w, sh / H, sw / W)
        acc_s = S if acc_s is None else acc_s + S
        acc_l = L if acc_l is None else acc_l + L
    return acc_s / len(scales), acc_l / len(scales)


# ---------------------------------------------------------------------------
# PCK


def person_diagonal(kps: np.ndarray) -> float:
    vis = kps[kps[:, 2] > 0, :2]
    if len(vis) == 0:
        return 0.0
    span = vis.max(axis=0) - vis.min(axis=0)
    return float(np.hypot(span[0], span[1]))


def match_poses(poses: Sequence[DecodedPose], ann: SceneAnnotation) -> list[tuple[int, int]]:
    """Greedy (pose, person) matching by mean distance over shared visible keypoints."""
    costs = []
    for pi, pose in enumerate(poses):
        for gi, gt in enumerate(ann.persons):
            d = [np.hypot(c.x - gt[k, 0], c.y - gt[k, 1])
                 for k, c in pose.keypoints.items() if k < len(gt) and gt[k, 2] > 0]
            if d:
                costs.append((float(np.mean(d)), pi, gi))
    costs.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, pi, gi in costs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        pairs.append((pi, gi))
    return pairs


def pck_counts(poses: Sequence[DecodedPose], ann: SceneAnnotation, alpha: float = 0.2) -> tuple[int, int]:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    total = int(sum((p[:, 2] > 0).sum() for p in ann.persons))
    correct = 0
    for pi, gi in match_poses(poses, ann):
        gt = ann.persons[gi]
        tol = alpha * person_diagonal(gt)
        for k, c in poses[pi].keypoints.items():
            if k < len(gt) and gt[k, 2] > 0 and np.hypot(c.x - gt[k, 0], c.y - gt[k, 1]) <= tol:
                correct += 1
    return correct, total


def pck(poses: Sequence[DecodedPose], ann: SceneAnnotation, alpha: float = 0.2) -> float:
    """Fraction of visible ground-truth keypoints within alpha x person diagonal."""
    correct, total = pck_counts(poses, ann, alpha)
    return correct / total if total else 0.0


def evaluate(network: PoseNetwork, synth, indices: Sequence[int], alpha: float = 0.2,
             scales: Sequence[float] = (1.0,), **decode_kw) -> float:
    """Pooled PCK over generated scenes ``indices``."""
    from .synth import generate_scene

    correct = total = 0
    for idx in indices:
        img, ann = generate_scene(synth, idx)
        S, L = multi_scale_infer(network, img, scales)
        poses = decode(S, L, ann.limbs, stride=network.stride, **decode_kw)
        c, t = pck_counts(poses, ann, alpha)
        correct += c
        total += t
    return correct / total if total else 0.0
