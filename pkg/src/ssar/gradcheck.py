"""Central finite-difference gradient checking.

The loss used for checking is a fixed random projection of the function's
output, ``sum(r * f(x))``, so that every output element contributes and no
gradient is trivially zero by symmetry (e.g. ``sum(instance_norm(x))``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, mul, precision, reduce


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(1e-8, |n_i|)."""
    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numerical_grad(loss_fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``arr`` (modified in place, then restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    name: str = "op",
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    backward_hook: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    Every input with ``requires_grad`` is checked.  Inputs must be float64.
    ``backward_hook`` may rewrite the analytic gradients before comparison
    (used to inject faults when testing the checker itself).
    """
    with precision(np.float64):
        for t in inputs:
            if t.dtype != np.float64:
                raise TypeError("gradient checks require float64 inputs")
        probe = fn(*inputs)
        rng = np.random.default_rng(seed)
        proj = rng.uniform(0.5, 1.5, size=probe.shape) * rng.choice([-1.0, 1.0], size=probe.shape)
        proj_t = Tensor(proj, dtype=np.float64)

        def loss_tensor() -> Tensor:
            return reduce("sum", mul(fn(*inputs), proj_t))

        def loss_value() -> float:
            return float(np.sum(fn(*inputs).data * proj))

        targets = [t for t in inputs if t.requires_grad]
        for t in targets:
            t.grad = None
        loss_tensor().backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]
        if backward_hook is not None:
            analytic = backward_hook(analytic)
        rel, ab, n = 0.0, 0.0, 0
        for t, ga in zip(targets, analytic):
            gn = numerical_grad(loss_value, t.data, h)
            rel = max(rel, relative_error(ga, gn))
            ab = max(ab, float(np.max(np.abs(ga - gn))) if ga.size else 0.0)
            n += ga.size
            t.grad = None
    return GradCheckResult(name, rel, ab, n, tol)


# suites -------------------------------------------------------------------------------


@dataclass
class GradCase:
    name: str
    scope: str
    fn: Callable[..., Tensor]
    inputs: list[Tensor]


def _rand(rng: np.random.Generator, shape, grad: bool = True, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad, dtype=np.float64)


def build_cases(scope: str, instances: int = 5, seed: int = 0) -> list[GradCase]:
    """Random float64 gradient-check cases for ``op``, ``layer`` or ``model`` scope."""
    from . import autodiff as ad
    from .layers import BasicBlock, LstmParams, LstmState, bilstm, instance_norm, linear, lstm_step, seq_avg_pool
    from .models import ResNetConfig, SliceSeqAgeNet, Volumetric3DNet
    from .training import mae_loss

    if scope not in ("op", "layer", "model"):
        raise ValueError(f"unknown scope {scope!r}")
    cases: list[GradCase] = []
    with precision(np.float64):
        for k in range(instances):
            rng = np.random.default_rng([seed, k])
            r = lambda *s, **kw: _rand(rng, s, **kw)  # noqa: E731
            if scope == "op":
                a, b = r(3, 4), r(3, 4)
                cases += [
                    GradCase("add", scope, ad.add, [a, b]),
                    GradCase("sub", scope, ad.sub, [r(3, 4), r(3, 4)]),
                    GradCase("mul", scope, ad.mul, [r(3, 4), r(3, 4)]),
                    GradCase("sigmoid", scope, ad.sigmoid, [r(3, 4)]),
                    GradCase("tanh", scope, ad.tanh, [r(3, 4)]),
                    GradCase("relu", scope, ad.relu, [r(3, 4)]),
                    GradCase("abs", scope, ad.absolute, [r(3, 4)]),
                    GradCase("bias_add", scope, ad.bias_add, [r(3, 4), r(4)]),
                    GradCase("matmul", scope, ad.matmul, [r(3, 4), r(4, 2)]),
                    GradCase("matvec", scope, ad.matmul, [r(3, 4), r(4)]),
                    GradCase("reduce_sum", scope, lambda x: ad.reduce("sum", x, (0, 2)), [r(2, 3, 4)]),
                    GradCase("reduce_mean", scope, lambda x: ad.reduce("mean", x, 1), [r(2, 3, 4)]),
                    GradCase("reduce_max", scope, lambda x: ad.reduce("max", x, (1, 2)), [r(2, 3, 4)]),
                    GradCase("expand", scope, lambda x: ad.expand(x, (3, 4)), [r(3, 1)]),
                    GradCase("concat", scope, lambda x, y: ad.concat([x, y], 1), [r(2, 3), r(2, 2)]),
                    GradCase("getitem", scope, lambda x: ad.getitem(x, (slice(0, 2), 1)), [r(3, 4)]),
                    GradCase("max_pool", scope, lambda x: ad.max_pool(x, 3, 2, 1), [r(1, 2, 6, 6)]),
                ]
                stride, pad = [(1, 0), (1, 1), (2, 0), (2, 1), (1, 1)][k % 5]
                cases.append(
                    GradCase(
                        f"conv2d[s{stride}p{pad}]",
                        scope,
                        lambda x, w, s=stride, p=pad: ad.conv2d(x, w, s, p),
                        [r(2, 6, 7), r(3, 2, 3, 3)],
                    )
                )
                cases.append(
                    GradCase(
                        f"conv3d[s{stride}p{pad}]",
                        scope,
                        lambda x, w, s=stride, p=pad: ad.conv3d(x, w, s, p),
                        [r(2, 4, 5, 4), r(2, 2, 3, 3, 3)],
                    )
                )
            elif scope == "layer":
                cases.append(GradCase("instance_norm", scope, instance_norm, [r(3, 4, 5)]))
                cases.append(GradCase("seq_avg_pool", scope, lambda f: seq_avg_pool(f, 3), [r(7, 4)]))
                p = LstmParams.init(4, 3, rng)
                p_in, h0, c0 = r(4), r(3, scale=0.5), r(3)
                lp = [t for _, t in p.named_parameters()]

                def step(x, h, c, *ws):
                    return lstm_step(x, LstmState(h, c), LstmParams(*ws)).h

                cases.append(GradCase("lstm_step", scope, step, [p_in, h0, c0] + lp))
                pf, pb = LstmParams.init(4, 3, rng), LstmParams.init(4, 3, rng)
                fw = [t for _, t in pf.named_parameters()]
                bw = [t for _, t in pb.named_parameters()]

                def bi(seq, *ws):
                    return bilstm(seq, LstmParams(*ws[:12]), LstmParams(*ws[12:]))

                cases.append(GradCase("bilstm", scope, bi, [r(3, 4)] + fw + bw))
                stride = 1 if k % 2 else 2
                blk = BasicBlock(2, 2 if stride == 1 else 3, stride, rng)
                bp = [t for _, t in blk.named_parameters()]
                # block parameters are closed over; listing them as inputs makes the checker perturb them
                cases.append(GradCase(f"basic_block[s{stride}]", scope, lambda x, *ws, b=blk: b(x), [r(1, 2, 6, 6)] + bp))
                blk3 = BasicBlock(2, 2, 1, rng, nd=3)
                bp3 = [t for _, t in blk3.named_parameters()]
                cases.append(GradCase("basic_block3d", scope, lambda x, *ws, b=blk3: b(x), [r(1, 2, 4, 4, 3)] + bp3))
                cases.append(GradCase("linear", scope, linear, [r(5), r(2, 5), r(2)]))
                target = rng.standard_normal(4)
                cases.append(GradCase("mae_loss", scope, lambda pr, t=target: mae_loss(pr, t), [r(4)]))
            else:
                if k >= 2:
                    continue
                bb = ResNetConfig(widths=(2, 3), blocks=(1, 1), stem_kernel=3, stem_stride=1, maxpool=k == 1)
                net = SliceSeqAgeNet(6, 3, 2, bb, seed=int(rng.integers(1 << 30)))
                x = _rand(rng, (6, 1, 6, 6), grad=False)
                cases.append(GradCase(f"sliceseq_mini[{k}]", scope, lambda *ws, n=net, x=x: n(x), net.parameters()))
                bb3 = ResNetConfig(widths=(2, 3), blocks=(1, 1), stem_kernel=3, stem_stride=1, maxpool=k == 1, nd=3)
                net3 = Volumetric3DNet(bb3, seed=int(rng.integers(1 << 30)))
                v = _rand(rng, (1, 4, 5, 5), grad=False)
                cases.append(GradCase(f"vol3d_mini[{k}]", scope, lambda *ws, n=net3, v=v: n(v), net3.parameters()))
    return cases


def run_suite(scope: str, instances: int = 5, seed: int = 0, inject_fault: str | None = None) -> list[GradCheckResult]:
    """Check every case in ``scope``; ``inject_fault`` perturbs the named case's analytic gradient."""

    def corrupt(grads):
        grads = [g.copy() for g in grads]
        flat = grads[0].reshape(-1)
        flat[0] += 1e-2 * max(1.0, abs(flat[0]))
        return grads

    results = []
    for i, case in enumerate(build_cases(scope, instances, seed)):
        hook = corrupt if inject_fault and case.name.startswith(inject_fault) else None
        results.append(check_gradients(case.fn, case.inputs, case.name, seed=i, backward_hook=hook))
    return results


def summarize(results: Sequence[GradCheckResult]) -> list[tuple[str, int, float, bool]]:
    """Per-name aggregate ``(name, instances, worst relative error, passed)``."""
    agg: dict[str, list[GradCheckResult]] = {}
    for r in results:
        agg.setdefault(r.name.split("[")[0], []).append(r)
    return [(n, len(rs), max(r.max_rel_error for r in rs), all(r.passed for r in rs)) for n, rs in agg.items()]
