"""Self-check suites: finite-difference gradients, loop oracles, shape fidelity.

Each suite returns a list of CheckResult rows so that both the CLI and the
test suite can run the identical checks; the CLI prints one line per row and
reports the worst relative error seen.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import blocks, reference
from .net import ModelConfig, OmegaNet, bce_loss
from .tensor import (
    Tensor,
    no_grad,
    adaptive_avg_pool_to_k,
    conv2d,
    matmul,
    maxpool2d,
    softmax_rows,
    sum_all,
    transpose_last2,
    transposed_conv2d,
)
from .train import compute_metrics

GRAD_TOL_BLOCK = 1e-4
GRAD_TOL_END_TO_END = 1e-3
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self):
        return self.worst <= self.tol


def _rand(rng, shape, requires_grad=False):
    return Tensor(rng.normal(size=shape), dtype=np.float64, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

def _grad_check(name, loss_fn, named_params, tol) -> CheckResult:
    errors = reference.check_gradients(loss_fn, named_params)
    return CheckResult(name, max(errors.values()), tol)


def grad_suite(include_end_to_end: bool = True):
    """Finite-difference checks per block, then the tiny end-to-end network."""
    rng = np.random.default_rng(42)
    results = []

    x = _rand(rng, (2, 3, 5, 5), requires_grad=True)
    w = _rand(rng, (4, 3, 3, 3), requires_grad=True)
    b = _rand(rng, (4,), requires_grad=True)
    results.append(_grad_check(
        "conv2d", lambda: sum_all(conv2d(x, w, b, stride=1, padding=1)),
        [("x", x), ("w", w), ("b", b)], GRAD_TOL_BLOCK))

    xt = _rand(rng, (2, 3, 4, 4), requires_grad=True)
    wt = _rand(rng, (3, 2, 2, 2), requires_grad=True)
    bt = _rand(rng, (2,), requires_grad=True)
    results.append(_grad_check(
        "transposed_conv2d", lambda: sum_all(transposed_conv2d(xt, wt, bt, stride=2)),
        [("x", xt), ("w", wt), ("b", bt)], GRAD_TOL_BLOCK))

    xp = _rand(rng, (1, 2, 4, 4), requires_grad=True)
    results.append(_grad_check(
        "maxpool2d", lambda: sum_all(maxpool2d(xp)), [("x", xp)], GRAD_TOL_BLOCK))

    xa = _rand(rng, (1, 2, 3, 4), requires_grad=True)
    results.append(_grad_check(
        "adaptive_avg_pool", lambda: sum_all(adaptive_avg_pool_to_k(xa, 5)),
        [("x", xa)], GRAD_TOL_BLOCK))

    xs = _rand(rng, (4, 6), requires_grad=True)
    # quadratic weighting makes the softmax gradient generic
    sw = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    results.append(_grad_check(
        "softmax_rows",
        lambda: sum_all(matmul(softmax_rows(xs), transpose_last2(sw))),
        [("x", xs)], GRAD_TOL_BLOCK))

    md = _rand(rng, (1, 3, 4, 4), requires_grad=True)
    pd = blocks.init_dspa(np.random.default_rng(3), 3, k=2, dtype=np.float64)
    results.append(_grad_check(
        "dspa", lambda: sum_all(blocks.dspa(md, pd)),
        [("m", md)] + list(pd.named_parameters("p")), GRAD_TOL_BLOCK))

    mc = _rand(rng, (1, 3, 3, 3), requires_grad=True)
    results.append(_grad_check(
        "channel_attention", lambda: sum_all(blocks.channel_attention(mc)),
        [("m", mc)], GRAD_TOL_BLOCK))

    mm = _rand(rng, (1, 3, 4, 4), requires_grad=True)
    pm = blocks.init_msc(np.random.default_rng(4), 3, dtype=np.float64)
    results.append(_grad_check(
        "cascade_msc", lambda: sum_all(blocks.cascade_msc(mm, pm)),
        [("m", mm)] + list(pm.named_parameters("p")), GRAD_TOL_BLOCK))

    zl = _rand(rng, (2, 2, 3, 3), requires_grad=True)
    yb = Tensor((rng.uniform(size=(2, 2, 3, 3)) > 0.5).astype(np.float64))
    results.append(_grad_check(
        "bce", lambda: bce_loss(zl, yb), [("logits", zl)], GRAD_TOL_BLOCK))

    if include_end_to_end:
        results.append(end_to_end_grad_check())
    return results


def tiny_config() -> ModelConfig:
    """The smallest full network used for end-to-end gradient verification."""
    return ModelConfig(depth=3, encoder_channels=[4, 8, 16], out_channels=2,
                       k=4, lambda_s=10.0, lambda_a=1.0, input_size=16)


def end_to_end_grad_check() -> CheckResult:
    # h must sit well below the distance to the nearest relu/maxpool kink of
    # the deep composition; 1e-3 (fine for the shallow per-block checks) picks
    # up kink crossings here, while 1e-6 is clean and still far above the
    # float64 difference-quotient noise floor.
    rng = np.random.default_rng(7)
    net = OmegaNet(tiny_config(), seed=7, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 1, 16, 16)), dtype=np.float64)
    mask = Tensor((rng.uniform(size=(1, 2, 16, 16)) > 0.6).astype(np.float64))
    errors = reference.check_gradients(
        lambda: net.loss(net.forward(x), mask), net.named_parameters(), h=1e-6)
    return CheckResult("end_to_end", max(errors.values()), GRAD_TOL_END_TO_END)


# ---------------------------------------------------------------------------
# Oracle suite
# ---------------------------------------------------------------------------

def oracle_suite(instances: int = 100):
    """Fast paths versus scalar-loop oracles on random small cases."""
    rng = np.random.default_rng(2024)
    results = []

    worst = 0.0
    for _ in range(instances):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        k = int(rng.choice([1, 3]))
        s, p, dl = int(rng.integers(1, 3)), int(rng.integers(0, 3)), int(rng.integers(1, 3))
        h = int(rng.integers(max(1, dl * (k - 1) + 1 - 2 * p), 10))
        w = int(rng.integers(max(1, dl * (k - 1) + 1 - 2 * p), 10))
        x = rng.normal(size=(n, ci, h, w))
        wt = rng.normal(size=(co, ci, k, k))
        b = rng.normal(size=(co,))
        got = conv2d(Tensor(x), Tensor(wt), Tensor(b), s, p, dl).data
        ref = reference.conv2d_naive(x, wt, b, s, p, dl)
        worst = max(worst, reference.relative_error(got, ref))
    results.append(CheckResult("conv2d", worst, ORACLE_TOL))

    worst = 0.0
    for _ in range(instances):
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                             2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))))
        got = maxpool2d(Tensor(x)).data
        worst = max(worst, reference.relative_error(got, reference.maxpool2d_naive(x)))
    results.append(CheckResult("maxpool2d", worst, ORACLE_TOL))

    worst = 0.0
    for _ in range(instances):
        x = rng.uniform(-6, 6, size=(int(rng.integers(1, 8)), int(rng.integers(1, 9))))
        got = softmax_rows(Tensor(x)).data
        worst = max(worst, np.abs(got - reference.softmax_naive(x)).max())
        worst = max(worst, np.abs(got.sum(-1) - 1.0).max())
    results.append(CheckResult("softmax_rows", worst, 1e-12))

    worst = 0.0
    for _ in range(instances):
        x = rng.normal(size=(1, int(rng.integers(1, 4)), int(rng.integers(2, 5)),
                             int(rng.integers(2, 5))))
        kk = int(rng.integers(1, min(5, x.shape[2] * x.shape[3]) + 1))
        got = adaptive_avg_pool_to_k(Tensor(x), kk).data
        worst = max(worst, reference.relative_error(got, reference.adaptive_pool_naive(x, kk)))
    results.append(CheckResult("adaptive_avg_pool", worst, ORACLE_TOL))

    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 4))
        h = w = int(rng.integers(2, 5))
        kk = int(rng.integers(1, 5))
        m = Tensor(rng.normal(size=(1, c, h, w)), dtype=np.float64)
        p = blocks.init_dspa(rng, c, k=kk, dtype=np.float64)
        got = blocks.dspa(m, p).data.reshape(c, h * w)
        t = np.maximum(reference.conv2d_naive(
            m.data, p.dilated.weight.data, p.dilated.bias.data, 1, 2, 2), 0)
        d = reference.adaptive_pool_naive(t, kk)[0]
        ref, _ = reference.spatial_attention_naive(m.data.reshape(c, h * w), d)
        worst = max(worst, reference.relative_error(got, ref))
    results.append(CheckResult("dspa", worst, ORACLE_TOL))

    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(1, 5))
        h = w = int(rng.integers(2, 4))
        m = Tensor(rng.normal(size=(1, c, h, w)), dtype=np.float64)
        got = blocks.channel_attention(m).data.reshape(c, h * w)
        ref, _ = reference.channel_attention_naive(m.data.reshape(c, h * w))
        worst = max(worst, reference.relative_error(got, ref))
    results.append(CheckResult("channel_attention", worst, ORACLE_TOL))

    worst = 0.0
    for _ in range(instances):
        shape = (int(rng.integers(1, 3)), 2, int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        prob = rng.uniform(size=shape)
        mask = (rng.uniform(size=shape) > rng.uniform(0.2, 0.8)).astype(np.float64)
        report = compute_metrics(prob, mask)
        naive = reference.metrics_naive(prob, mask)
        for c, (got_c, ref_c) in enumerate(zip(report.channels, naive)):
            for key in ("tp", "fp", "fn", "tn"):
                if getattr(got_c, key) != ref_c[key]:
                    worst = max(worst, 1.0)
        # metric values recomputed from naive counts must agree exactly
        for got_c, ref_c in zip(report.channels, naive):
            t = ref_c["tp"] + ref_c["fn"]
            p = ref_c["tp"] + ref_c["fp"]
            dsc = 1.0 if (t == 0 and p == 0) else 2.0 * ref_c["tp"] / (t + p)
            worst = max(worst, abs(got_c.dsc - dsc))
    results.append(CheckResult("metrics", worst, 0.0))

    return results


# ---------------------------------------------------------------------------
# Shape suite
# ---------------------------------------------------------------------------

def shape_suite():
    """Forward-pass shape contracts for {depth 3, 5} x {32, 64} inputs."""
    results = []
    for depth in (3, 5):
        for size in (32, 64):
            channels = [4 * 2 ** i for i in range(depth)]
            cfg = ModelConfig(depth=depth, encoder_channels=channels,
                              out_channels=2, k=10, input_size=size)
            net = OmegaNet(cfg, seed=0)
            x = Tensor(np.zeros((1, 1, size, size), dtype=np.float32))
            with no_grad():
                encs = net.encode(x)
                out = net.forward(x)
            bottleneck_ok = encs[-1].shape == (
                1, channels[-1], size // 2 ** (depth - 1), size // 2 ** (depth - 1))
            heads_ok = (out.main_logits.shape == (1, 2, size, size)
                        and out.aux_logits.shape == (1, 2, size, size))
            results.append(CheckResult(
                f"shapes_d{depth}_s{size}", 0.0 if (bottleneck_ok and heads_ok) else 1.0, 0.0))
    return results


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def run_suite(name: str, stream_print=print) -> bool:
    suites = {
        "grad": grad_suite,
        "oracle": oracle_suite,
        "shape": shape_suite,
    }
    names = list(suites) if name == "all" else [name]
    ok = True
    for suite_name in names:
        start = time.time()
        results = suites[suite_name]()
        elapsed = time.time() - start
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            stream_print(
                f"[{status}] {suite_name}/{r.name}: worst {r.worst:.3e} (tol {r.tol:.0e})"
            )
            ok = ok and r.passed
        stream_print(f"{suite_name} suite finished in {elapsed:.1f}s")
    return ok
