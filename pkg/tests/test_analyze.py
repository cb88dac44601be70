import numpy as np
import pytest

from dpnpose.analyze import (BenchResult, bench_forward, count_flops, count_params, mb,
                             size_table, timing_table)
from dpnpose.config import NetworkConfig, RunConfig
from dpnpose.posenet import PoseNetwork


def test_single_conv_count():
    from dpnpose.analyze import LayerRow
    row = LayerRow("c", 3, 128, 128, 1, 1, 0)
    assert row.params == 147_584
    assert LayerRow("c", 1, 128, 128, 1, 1, 0).macs(8, 8) == 1_048_576


def test_totals_equal_row_sums():
    rep = count_params(NetworkConfig())
    assert rep.total_params == sum(r.params for r in rep.rows)
    assert rep.size_mb == pytest.approx(rep.total_params * 4 / 1e6)
    assert rep.frontend_params == 7_340_480
    assert mb(1_000_000) == 4.0


def test_baseline_table4():
    sizes = [count_params(NetworkConfig(arch="baseline", stages=t)).size_mb for t in (3, 4, 5, 6)]
    for got, want in zip(sizes, (103.8, 139.0, 174.1, 209.3)):
        assert abs(got - want) / want < 0.03
    inc = np.diff(sizes)
    assert np.allclose(inc, inc[0]) and 35.1 <= inc[0] <= 35.2


@pytest.mark.parametrize("arch", ["dpn", "baseline"])
def test_linear_stage_law(arch):
    sizes = [count_params(NetworkConfig(arch=arch, stages=t)).total_params for t in range(2, 8)]
    assert len(set(np.diff(sizes)[1:])) == 1


def test_flops_scaling_and_dpn_cheaper():
    cfg = NetworkConfig(stages=3)
    base = cfg.replace(arch="baseline")
    assert count_flops(cfg, 128, 128) == 4 * count_flops(cfg, 64, 64)
    assert count_flops(cfg, 64, 64) < count_flops(base, 64, 64)
    with pytest.raises(ValueError):
        count_flops(cfg, 60, 64)


def test_count_matches_constructed_default_network():
    cfg = NetworkConfig(stages=3)
    assert PoseNetwork(cfg).num_parameters() == count_params(cfg).total_params


def test_size_table_layout():
    tab = size_table(["baseline", "dpn"], [3, 4], NetworkConfig())
    assert tab.header == ["Method", "3 stages", "4 stages"]
    assert [r[0] for r in tab.rows] == ["openpose-style", "dpn"]
    assert tab.tsv().splitlines()[1].split("\t") == ["openpose-style", "103.8", "139.0"]
    with pytest.raises(ValueError):
        size_table(["dpn"], [0])


def test_bench_harness():
    net = PoseNetwork(RunConfig.profile_defaults("tiny").net)
    res = bench_forward(net, 32, 32, warmup=1, reps=5)
    assert len(res.samples_ms) == 5 and res.mean_ms > 0 and res.std_ms >= 0
    big = bench_forward(net, 64, 64, warmup=0, reps=3)
    assert big.macs >= res.macs
    with pytest.raises(ValueError):
        bench_forward(net, 32, 32, reps=2)
    tab = timing_table([res, big])
    assert len(tab.rows) == 2 and tab.header[-1] == "GMACs"


def test_bench_result_stats():
    r = BenchResult("x", [1.0, 2.0, 3.0], 10)
    assert r.mean_ms == 2.0 and r.std_ms == pytest.approx(1.0)
