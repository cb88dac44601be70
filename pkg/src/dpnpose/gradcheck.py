"""Central finite-difference gradient checking in float64.

The loss is re-evaluated with each checked coordinate nudged by +/- eps.  A
ReLU or max-pool whose branch flips inside that stencil makes the loss
non-differentiable there, so when the branch signature at either nudge
differs from the unperturbed one the step is shrunk by 10x (down to
``min_eps``) until the stencil is smooth.  Between kinks every graph built
from this package's ops is affine in any single parameter, so the loss is
quadratic and the central difference is exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor, backward, kink_signature


@dataclass
class CoordinateCheck:
    index: tuple[int, ...]
    analytic: float
    numeric: float
    eps: float
    rel_error: float


@dataclass
class ParamCheck:
    name: str
    checks: list[CoordinateCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-3, frozen: Iterable[Tensor] = (),
                    max_coords: int | None = None, seed: int = 0,
                    min_eps: float = 1e-7) -> list[ParamCheck]:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``params`` are promoted to float64 for the duration of the check and
    restored bitwise afterwards.  Parameters listed in ``frozen`` are not
    checked.  With ``max_coords`` set, each tensor is checked on a seeded
    random subset of at most that many coordinates.
    """
    if not 0 < eps <= 0.1:
        raise ValueError(f"eps must lie in (0, 0.1], got {eps}")
    frozen_ids = {id(p) for p in frozen}
    originals = [p.data for p in params]
    grads_before = [p.grad for p in params]
    rng = np.random.default_rng(seed)
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = loss_fn()
        if loss.data.ndim != 0:
            raise ValueError(f"gradient check needs a scalar loss, got shape {loss.shape}")
        base_sig = kink_signature(loss)
        backward(loss)
        analytic = [None if p.grad is None else p.grad.copy() for p in params]

        def evaluate() -> tuple[float, bytes]:
            out = loss_fn()
            return float(out.data), kink_signature(out)

        reports = []
        for i, p in enumerate(params):
            if id(p) in frozen_ids:
                continue
            rep = ParamCheck(p.name or f"param{i}")
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            g = analytic[i]
            for k in coords:
                orig = flat[k]
                e = eps
                while True:
                    flat[k] = orig + e
                    lp, sp = evaluate()
                    flat[k] = orig - e
                    lm, sm = evaluate()
                    flat[k] = orig
                    if (sp == base_sig and sm == base_sig) or e / 10 < min_eps:
                        break
                    e /= 10
                numeric = (lp - lm) / (2 * e)
                a = 0.0 if g is None else float(g.reshape(-1)[k])
                rep.checks.append(CoordinateCheck(
                    tuple(int(v) for v in np.unravel_index(k, p.shape)),
                    a, numeric, e, relative_error(a, numeric)))
            reports.append(rep)
        return reports
    finally:
        for p, data, grad in zip(params, originals, grads_before):
            p.data = data
            p.grad = grad


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-3, frozen: Iterable[Tensor] = (),
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error over all checked coordinates of all non-frozen params."""
    reports = check_gradients(loss_fn, params, eps=eps, frozen=frozen,
                              max_coords=max_coords, seed=seed)
    return max((r.max_rel_error for r in reports), default=0.0)


# ---------------------------------------------------------------------------
# the suite run by ``dpnpose gradcheck``


def _rand_param(rng, shape, name, scale=1.0):
    from .tensor import parameter
    return parameter(rng.standard_normal(shape) * scale, name)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Loss closures exercising each differentiable primitive on small random shapes."""
    from . import tensor as T

    rng = np.random.default_rng(seed)
    cases = {}

    def target(shape):
        return rng.standard_normal(shape).astype(np.float32)

    for label, (cin, cout, k, stride, pad, groups) in {
        "conv2d_3x3": (4, 6, 3, 1, 1, 1),
        "conv2d_grouped": (8, 4, 3, 1, 1, 4),
        "conv2d_1x1": (6, 5, 1, 1, 0, 1),
        "conv2d_strided": (3, 4, 3, 2, 0, 1),
    }.items():
        x = _rand_param(rng, (2, cin, 6, 6), f"{label}.x")
        w = _rand_param(rng, (cout, cin // groups, k, k), f"{label}.w", 0.5)
        b = _rand_param(rng, (cout,), f"{label}.b")
        out_shape = T.conv2d(x, w, b, stride, pad, groups).shape
        tgt = target(out_shape)
        cases[label] = (lambda x=x, w=w, b=b, s=stride, p=pad, g=groups, tgt=tgt:
                        T.sse_loss(T.conv2d(x, w, b, s, p, g), tgt), [x, w, b])

    x = _rand_param(rng, (2, 8, 6, 6), "relu.x")
    tgt = target(x.shape)
    cases["relu"] = (lambda x=x, tgt=tgt: T.sse_loss(T.relu(x), tgt), [x])

    a = _rand_param(rng, (2, 3, 6, 6), "add.a")
    b = _rand_param(rng, (2, 3, 6, 6), "add.b")
    tgt = target(a.shape)
    cases["elementwise_add"] = (lambda a=a, b=b, tgt=tgt: T.sse_loss(T.add(a, b), tgt), [a, b])

    a = _rand_param(rng, (2, 3, 5, 5), "concat.a")
    b = _rand_param(rng, (2, 5, 5, 5), "concat.b")
    tgt = target((2, 8, 5, 5))
    cases["channel_concat"] = (lambda a=a, b=b, tgt=tgt: T.sse_loss(T.concat([a, b]), tgt), [a, b])

    x = _rand_param(rng, (2, 7, 4, 4), "slice.x")
    t1, t2 = target((2, 3, 4, 4)), target((2, 4, 4, 4))

    def split_loss(x=x, t1=t1, t2=t2):
        p, q = T.split_channels(x, 3)
        return T.add_scalars([T.sse_loss(p, t1), T.sse_loss(q, t2)])
    cases["channel_split"] = (split_loss, [x])

    x = _rand_param(rng, (2, 4, 6, 6), "pool.x")
    tgt = target((2, 4, 3, 3))
    cases["max_pool_2x2"] = (lambda x=x, tgt=tgt: T.sse_loss(T.max_pool2x2(x), tgt), [x])

    x = _rand_param(rng, (2, 3, 4, 4), "sse.x")
    tgt = target(x.shape)
    cases["sse_loss"] = (lambda x=x, tgt=tgt: T.sse_loss(x, tgt), [x])

    x = _rand_param(rng, (2, 3, 4, 4), "sum.x")
    cases["sum"] = (lambda x=x: T.tsum(x), [x])
    return cases


def network_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor], list[Tensor]]]:
    """(loss closure, params, frozen params) for a DPN block and a 2-stage tiny DPN."""
    from .config import RunConfig
    from .posenet import DpnBlock, DpnBranches, PoseNetwork
    from .tensor import Tensor, add_scalars, sse_loss

    rng = np.random.default_rng(seed)
    cases = {}

    block = DpnBlock("block", 4, 2, 2, 8, 2, rng)
    kp = _rand_param(rng, (2, 4, 5, 5), "block.kp_in")
    ap = _rand_param(rng, (2, 2, 5, 5), "block.ap_in")
    t_kp, t_ap = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((2, 4, 5, 5))

    def block_loss():
        out = block(DpnBranches(kp, ap))
        return add_scalars([sse_loss(out.kp, t_kp), sse_loss(out.ap, t_ap)])
    block_params = [p for c in block.convs() for p in c.parameters()] + [kp, ap]
    cases["dpn_block"] = (block_loss, block_params, [])

    net_cfg = RunConfig.profile_defaults("tiny").net.replace(stages=2, seed=seed)
    net = PoseNetwork(net_cfg)
    images = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
    shape = net.forward(images)[0]
    t_s = rng.random(shape.S.shape)
    t_l = rng.uniform(-1, 1, shape.L.shape)

    def net_loss():
        outs = net.forward(images)
        return add_scalars([x for o in outs for x in (sse_loss(o.S, t_s), sse_loss(o.L, t_l))])
    params = list(net.named_parameters().values())
    front = set(net.frontend_parameter_names())
    frozen = [p for p in params if p.name in front]
    cases["tiny_dpn_2stage"] = (net_loss, params, frozen)
    # unfrozen frontend: exercises the fan-out of shared features into both stages
    cases["tiny_dpn_2stage_frontend"] = (net_loss, params,
                                         [p for p in params if p.name not in front])
    return cases


def run_suite(seed: int = 0, eps: float = 1e-3, max_coords: int = 12) -> dict[str, float]:
    """Worst relative error per primitive / network case."""
    results = {}
    for name, (fn, params) in primitive_cases(seed).items():
        results[name] = finite_diff_check(fn, params, eps=eps)
    for name, (fn, params, frozen) in network_cases(seed).items():
        results[name] = finite_diff_check(fn, params, eps=eps, frozen=frozen,
                                          max_coords=max_coords, seed=seed)
    return results
