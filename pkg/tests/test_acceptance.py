"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; a summary line per criterion
is printed at the end of the session.
"""

import itertools
import re
import time

import numpy as np
import pytest

from dpnpose.analyze import count_params
from dpnpose.cli import main
from dpnpose.config import NetworkConfig, RunConfig
from dpnpose.decode import decode, evaluate, match_poses
from dpnpose.gradcheck import run_suite
from dpnpose.posenet import DpnStage, PoseNetwork, StageOutput
from dpnpose.synth import SynthParams, generate_scene, make_split
from dpnpose.targets import TargetMaps, render_targets
from dpnpose.tensor import Tensor
from dpnpose.train import (Checkpoint, CheckpointError, load_checkpoint, save_checkpoint,
                           stage_losses, train_loop)


@pytest.fixture
def criterion(record_property):
    def mark(n, title):
        record_property("criterion", n)
        record_property("title", title)
        return lambda detail: record_property("detail", detail)
    return mark


def _size_rows(out: str) -> dict[str, list[float]]:
    rows = {}
    for line in out.splitlines():
        m = re.match(r"^(openpose-style|dpn)\s+([\d.\s]+)$", line)
        if m:
            rows[m.group(1)] = [float(v) for v in m.group(2).split()]
    return rows


def test_c01_baseline_size_table(criterion, capsys):
    detail = criterion(1, "baseline model sizes 103.8/139.0/174.1/209.3 MB within 3%")
    t0 = time.perf_counter()
    assert main(["bench", "--arch", "baseline", "--stages", "3,4,5,6", "--no-timing"]) == 0
    elapsed = time.perf_counter() - t0
    got = _size_rows(capsys.readouterr().out)["openpose-style"]
    want = [103.8, 139.0, 174.1, 209.3]
    errs = [abs(g - w) / w for g, w in zip(got, want)]
    detail(f"got {got}, worst {max(errs):.2%}, {elapsed * 1e3:.0f} ms")
    assert len(got) == 4 and max(errs) <= 0.03
    assert elapsed < 1.0


def test_c02_dpn_size_table(criterion, capsys):
    detail = criterion(2, "DPN sizes 43.7/50.1/56.4/62.7 MB within 10%, ratio and increment laws")
    t0 = time.perf_counter()
    assert main(["bench", "--arch", "both", "--stages", "3,4,5,6", "--no-timing"]) == 0
    elapsed = time.perf_counter() - t0
    rows = _size_rows(capsys.readouterr().out)
    got = rows["dpn"]
    want = [43.7, 50.1, 56.4, 62.7]
    errs = [abs(g - w) / w for g, w in zip(got, want)]
    dpn = [count_params(NetworkConfig(arch="dpn", stages=t)).size_mb for t in (3, 4)]
    base = [count_params(NetworkConfig(arch="baseline", stages=t)).size_mb for t in (3, 4)]
    ratio = dpn[0] / base[0]
    inc_ratio = (dpn[1] - dpn[0]) / (base[1] - base[0])
    detail(f"got {got}, worst {max(errs):.2%}, ratio {ratio:.3f}, increment ratio {inc_ratio:.3f}")
    assert max(errs) <= 0.10
    assert 0.35 <= ratio <= 0.55
    assert inc_ratio < 0.25
    assert elapsed < 1.0


def test_c03_gradient_suite(criterion):
    detail = criterion(3, "finite-difference gradient suite, max relative error < 1e-4")
    t0 = time.perf_counter()
    results = run_suite(seed=0, eps=1e-3)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=results.get)
    detail(f"{len(results)} cases, worst {worst} {results[worst]:.2e}, {elapsed:.1f} s")
    assert {"conv2d_3x3", "conv2d_grouped", "relu", "elementwise_add", "channel_concat",
            "max_pool_2x2", "sse_loss", "dpn_block", "tiny_dpn_2stage"} <= results.keys()
    assert results[worst] < 1e-4
    assert elapsed < 120


def test_c04_channel_accumulation(criterion):
    detail = criterion(4, "channel accumulation law over 20 random configs")
    rng = np.random.default_rng(2024)
    violations = checked = 0
    for _ in range(20):
        G = int(rng.integers(1, 5))
        cfg = NetworkConfig(
            keypoints=int(rng.integers(2, 8)), pafs=2 * int(rng.integers(1, 5)),
            frontend=(int(rng.integers(4, 16)), "M"),
            residual_width=int(rng.integers(1, 24)), dense_width=int(rng.integers(1, 24)),
            growth=int(rng.integers(1, 12)), bottleneck_width=G * int(rng.integers(1, 6)),
            cardinality=G, blocks_first=int(rng.integers(0, 5)), blocks=int(rng.integers(0, 5)),
            stages=2)
        for t in (1, 2):
            stage = DpnStage(cfg, t, rng)
            x = Tensor(rng.random((1, cfg.stage_in_channels(t), 3, 2), dtype=np.float32))
            for b, br in enumerate(stage.branches(x)):
                checked += 1
                if br.kp.shape[1] != cfg.residual_width or br.ap.shape[1] != cfg.dense_width + b * cfg.growth:
                    violations += 1
    detail(f"{checked} block outputs, {violations} violations")
    assert violations == 0


def test_c05_loss_semantics(criterion):
    detail = criterion(5, "stage losses equal brute-force double sums; zero iff equal")
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        J, C = int(rng.integers(1, 5)), 2 * int(rng.integers(1, 3))
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        S, L = rng.standard_normal((J, h, w)), rng.standard_normal((C, h, w))
        tS, tL = rng.random((J, h, w)), rng.uniform(-1, 1, (C, h, w))
        out = StageOutput(Tensor(S[None].astype(np.float32)), Tensor(L[None].astype(np.float32)))
        tgt = TargetMaps(tS[None].astype(np.float32), tL[None].astype(np.float32))
        fs, fl = stage_losses(out, tgt)
        ref_s = ref_l = 0.0
        for j in range(J):
            for p in itertools.product(range(h), range(w)):
                ref_s += (float(out.S.data[0, j][p]) - float(tgt.S_star[0, j][p])) ** 2
        for c in range(C):
            for p in itertools.product(range(h), range(w)):
                ref_l += (float(out.L.data[0, c][p]) - float(tgt.L_star[0, c][p])) ** 2
        worst = max(worst, abs(fs.item() - ref_s) / ref_s, abs(fl.item() - ref_l) / ref_l)

        same = StageOutput(Tensor(tgt.S_star.copy()), Tensor(tgt.L_star.copy()))
        zs, zl = stage_losses(same, tgt)
        assert zs.item() == 0.0 and zl.item() == 0.0
        nudged = tgt.S_star.copy()
        nudged[(0,) + tuple(int(rng.integers(0, d)) for d in nudged.shape[1:])] += 1e-2
        ns, _ = stage_losses(StageOutput(Tensor(nudged), Tensor(tgt.L_star)), tgt)
        assert ns.item() > 0.0
    detail(f"worst relative error {worst:.2e}")
    assert worst < 1e-6


def test_c06_frozen_frontend(criterion):
    detail = criterion(6, "100 frozen-frontend steps leave frontend bitwise unchanged")
    cfg = RunConfig.profile_defaults("tiny", **{"train.steps": "100"})
    net = PoseNetwork(cfg.net)
    before = {n: p.data.copy() for n, p in net.named_parameters().items()}
    train_loop(cfg, network=net)
    after = net.named_parameters()
    front = net.frontend_parameter_names()
    unchanged = sum(after[n].data.tobytes() == before[n].tobytes() for n in front)
    changed = sum(after[n].data.tobytes() != before[n].tobytes() for n in after if n not in front)
    detail(f"{unchanged}/{len(front)} frontend tensors unchanged, {changed} others changed")
    assert unchanged == len(front)
    assert changed >= 1


def _min_separation(ann, stride):
    best = np.inf
    for a, b in itertools.combinations(ann.persons, 2):
        va, vb = a[a[:, 2] > 0, :2], b[b[:, 2] > 0, :2]
        d = np.hypot(va[:, None, 0] - vb[None, :, 0], va[:, None, 1] - vb[None, :, 1])
        best = min(best, d.min())
    return best / stride


def test_c07_decode_oracle(criterion):
    detail = criterion(7, "render->decode recovers >= 99% of keypoints with correct grouping")
    params = SynthParams(height=256, width=256, max_persons=3, seed=0)
    stride = 8
    used = scanned = recovered = total = grouped = 0
    while used < 100:
        _, ann = generate_scene(params, scanned)
        scanned += 1
        if _min_separation(ann, stride) < 8:
            continue
        used += 1
        t = render_targets(ann, stride)
        poses = decode(t.S_star, t.L_star, ann.limbs, stride=stride)
        total += int(sum((p[:, 2] > 0).sum() for p in ann.persons))
        pairs = match_poses(poses, ann)
        ok_scene = len(poses) == len(ann.persons) and len(pairs) == len(ann.persons)
        for pi, gi in pairs:
            gt = ann.persons[gi]
            for k, c in poses[pi].keypoints.items():
                if gt[k, 2] > 0 and np.hypot(c.x - gt[k, 0], c.y - gt[k, 1]) <= stride:
                    recovered += 1
                else:
                    ok_scene = False
            if len(poses[pi].keypoints) != int((gt[:, 2] > 0).sum()):
                ok_scene = False
        grouped += ok_scene
    frac = recovered / total
    detail(f"{recovered}/{total} keypoints ({frac:.2%}), {grouped}/100 scenes grouped correctly, "
           f"{scanned} scenes scanned")
    assert frac >= 0.99
    assert grouped >= 99


@pytest.mark.slow
def test_c08_training_pck(criterion):
    detail = criterion(8, "tiny 2-stage DPN, 2000 steps, PCK@0.2 >= 0.8 on 50 held-out scenes")
    cfg = RunConfig.profile_defaults("tiny", **{"train.steps": "2000", "train.seed": "0",
                                                "net.seed": "0", "synth.seed": "0"})
    assert cfg.net.stages == 2 and cfg.train.freeze_frontend
    t0 = time.perf_counter()
    res = train_loop(cfg)
    train_s = time.perf_counter() - t0
    _, eval_idx = make_split(cfg.synth, cfg.train.n_train, 50)
    score = evaluate(res.network, cfg.synth, eval_idx, alpha=0.2)
    elapsed = time.perf_counter() - t0
    detail(f"PCK {score:.3f}, loss {res.log[0].total:.0f} -> {res.log[-1].total:.0f}, "
           f"train {train_s:.0f} s, total {elapsed:.0f} s")
    assert score >= 0.8
    assert elapsed <= 30 * 60


def test_c09_timing_table(criterion, capsys):
    detail = criterion(9, "bench emits two-row timing table with a MAC column")
    assert main(["bench", "--arch", "both", "--stages", "3", "--input", "64x64", "--reps", "3"]) == 0
    out = capsys.readouterr().out
    block = out.split("Forward time", 1)[1].splitlines()
    header = next(line for line in block if line.startswith("Method"))
    rows = [line for line in block if line.startswith(("openpose-style@", "dpn@"))]
    detail("; ".join(" ".join(r.split()) for r in rows))
    assert "forward time (ms)" in header and "GMACs" in header
    assert len(rows) == 2
    assert rows[0].startswith("openpose-style@") and rows[1].startswith("dpn@")
    for r in rows:
        assert float(r.split()[-1]) > 0


def test_c10_checkpoint_round_trip(criterion, tmp_path):
    detail = criterion(10, "checkpoint round trip on 10 networks; corrupt files rejected")
    rng = np.random.default_rng(10)
    tiny = RunConfig.profile_defaults("tiny").net
    rejected = flips = flip_loaded = 0
    for i in range(10):
        cfg = tiny.replace(seed=int(rng.integers(0, 2**31)), stages=int(rng.integers(1, 4)),
                           arch=str(rng.choice(["dpn", "baseline"])))
        net = PoseNetwork(cfg)
        path = tmp_path / f"n{i}.ckpt"
        save_checkpoint(path, Checkpoint.capture(net, step=i))
        ck = load_checkpoint(path)
        for name, p in net.named_parameters().items():
            assert ck.tensors[name].tobytes() == p.data.tobytes(), name
        assert ck.step == i and ck.config == cfg

        raw = path.read_bytes()
        structural = [raw[:0], raw[:7], raw[:11], raw[:len(raw) // 3], raw[:-1],
                      b"XXXXXXXX" + raw[8:], raw + b"\x00", raw[:8] + b"\x02\x00\x00\x00" + raw[12:]]
        for blob in structural:
            path.write_bytes(blob)
            with pytest.raises(CheckpointError):
                load_checkpoint(path)
            rejected += 1
        for _ in range(10):
            blob = bytearray(raw)
            pos = int(rng.integers(0, len(blob)))
            blob[pos] ^= int(rng.integers(1, 256))
            path.write_bytes(bytes(blob))
            flips += 1
            try:
                load_checkpoint(path)
                flip_loaded += 1
            except CheckpointError:
                pass
    detail(f"10 networks bitwise equal, {rejected} structural corruptions rejected, "
           f"{flips - flip_loaded}/{flips} random byte flips rejected")
    assert flip_loaded == 0
