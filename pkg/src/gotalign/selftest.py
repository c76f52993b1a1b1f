"""Fast invariant suites runnable from the command line.

Each suite re-checks a core contract on freshly drawn random instances:
gradient correctness of the tape primitives, transport feasibility and
exactness, structure-matching invariances, twin-loss identities, gate
behavior, and schedule endpoints. Returns per-suite pass/fail for the
CLI to print; intended as a quick health check, not a pytest
replacement.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import barlow, graph, model, optim, ot
from . import numerics as nm
from .numerics import Tape, fd_gradient, rel_error


def _suite_tape_gradients() -> None:
    rng = np.random.default_rng(0)
    cases = {
        "matmul": lambda t, vs: nm.matmul(vs[0], vs[1]),
        "row_softmax": lambda t, vs: nm.row_softmax(vs[0]),
        "batch_standardize": lambda t, vs: nm.batch_standardize(vs[0]),
        "relu": lambda t, vs: nm.relu(vs[0]),
        "cross_entropy": lambda t, vs: nm.cross_entropy_rows(vs[0], [1, 0, 2]),
    }
    arrays = {
        "matmul": [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
        "row_softmax": [rng.standard_normal((3, 4))],
        "batch_standardize": [rng.standard_normal((5, 3))],
        "relu": [rng.standard_normal((3, 4)) + 0.1],
        "cross_entropy": [rng.standard_normal((3, 5))],
    }
    for name, build in cases.items():
        # Weighted-sum scalarization with a fixed weight matrix; a plain
        # sum would zero out row_softmax's gradient entirely.
        probe_tape = Tape()
        probe = build(probe_tape, [probe_tape.var(a) for a in arrays[name]])
        weight = np.cos(np.arange(probe.value.size)).reshape(probe.value.shape) + 1.5

        def scalar(arrs, build=build, weight=weight):
            t = Tape()
            vs = [t.var(a) for a in arrs]
            out = build(t, vs)
            return nm.reduce_sum(nm.mul(out, t.constant(weight)), "all").item()

        t = Tape()
        vs = [t.var(a) for a in arrays[name]]
        out = nm.reduce_sum(nm.mul(build(t, vs), t.constant(weight)), "all")
        t.backward(out)
        analytic = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in vs]
        numeric = fd_gradient(scalar, arrays[name])
        for ga, gn in zip(analytic, numeric):
            err = rel_error(ga, gn)
            if err >= 1e-6:
                raise AssertionError(f"{name}: gradient mismatch {err:.2e}")


def _suite_transport_feasibility() -> None:
    rng = np.random.default_rng(1)
    cfg = ot.OtSolverConfig(max_iter=20000)
    for _ in range(100):
        n, m = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        cost = rng.uniform(0, 2, (n, m))
        u = rng.uniform(0.1, 1, n); u /= u.sum()
        v = rng.uniform(0.1, 1, m); v /= v.sum()
        plan, wd = ot.solve_wd(cost, u, v, cfg)
        if plan.marginal_violation() >= 1e-6:
            raise AssertionError(f"marginal violation {plan.marginal_violation():.2e}")
        if wd < 0:
            raise AssertionError("negative transport objective")


def _suite_transport_exactness() -> None:
    rng = np.random.default_rng(2)
    cfg = ot.OtSolverConfig(wd_solver="ipot", epsilon=1.0, max_iter=3000, tol=1e-10)
    for _ in range(25):
        n = int(rng.integers(2, 7))
        cost = rng.uniform(0, 2, (n, n))
        u = ot.uniform_marginals(n)
        _, wd = ot.solve_wd(cost, u, u, cfg)
        best = min(
            sum(cost[i, p[i]] for i in range(n)) / n
            for p in itertools.permutations(range(n))
        )
        if abs(wd - best) >= 1e-3:
            raise AssertionError(f"gap to enumeration oracle {abs(wd - best):.2e}")


def _suite_structure_matching() -> None:
    rng = np.random.default_rng(3)
    for k in range(10):
        n = int(rng.integers(3, 9))
        sx = ot.intra_similarity(rng.standard_normal((n, 5)))
        u = ot.uniform_marginals(n)
        _, gwd = ot.solve_gwd(sx, sx, u, u, ot.with_seed(ot.OtSolverConfig(), k))
        if gwd > 1e-3:
            raise AssertionError(f"self-distance {gwd:.2e}")
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        f = rng.standard_normal((n, 5))
        s1 = ot.intra_similarity(f)
        s2 = ot.intra_similarity(f @ q)
        if np.abs(s1 - s2).max() > 1e-10:
            raise AssertionError("similarity not orthogonal-invariant")


def _suite_twin_losses() -> None:
    rng = np.random.default_rng(4)
    cfg = barlow.BtConfig()
    tape = Tape()
    c = barlow.bt_loss(tape.var(np.eye(5)), cfg)
    if c.item() != 0.0:
        raise AssertionError("identity correlation should cost zero")
    z = rng.standard_normal((8, 4))
    tape = Tape()
    corr = barlow.cross_correlation(tape.var(z), tape.var(z))
    if not np.array_equal(np.diag(corr.value), np.ones(4)):
        raise AssertionError("self-correlation diagonal must be exactly 1")
    arrays = [rng.standard_normal((6, 4)) for _ in range(4)]
    tape = Tape()
    batches = [
        barlow.EmbeddingBatch(tape.var(a), v)
        for a, v in zip(arrays, ("I", "I2", "T", "T2"))
    ]
    total = barlow.multimodal_bt(*batches, cfg).item()
    parts = 0.0
    for a, b in ((0, 1), (2, 3), (0, 3), (1, 2)):
        t2 = Tape()
        parts += barlow.pair_loss(t2.var(arrays[a]), t2.var(arrays[b]), cfg).item()
    if abs(total - parts) > 1e-12:
        raise AssertionError("four-pair sum mismatch")


def _suite_gate_behavior() -> None:
    cfg = model.ModelConfig(
        d_model=8, n_layers=2, n_fused=1, n_heads=2, vocab_size=20,
        max_text_len=6, n_patches=4, patch_dim=5, proj_dims=(8, 8, 6),
    )
    params = model.init_params(cfg, seed=0)
    rng = np.random.default_rng(5)
    for _ in range(10):
        patches = rng.standard_normal((4, 5))
        ids = rng.integers(1, 20, size=4)
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        dual = model.forward_dual(tape, pvars, patches, np.arange(4), ids, cfg)
        fused = model.forward_fusion(tape, pvars, patches, np.arange(4), ids, cfg)
        gap = max(
            np.abs(dual.local_image.value - fused.local_image.value).max(),
            np.abs(dual.local_text.value - fused.local_text.value).max(),
        )
        if gap > 1e-12:
            raise AssertionError(f"gate-closed gap {gap:.2e}")


def _suite_schedule() -> None:
    cfg = optim.OptimConfig(warmup_epochs=2, total_epochs=10)
    spe = 7
    if optim.lr_at(0, spe, cfg, "weights") != 0.0:
        raise AssertionError("schedule must start at zero")
    base = cfg.effective_base("weights")
    if optim.lr_at(2 * spe, spe, cfg, "weights") != base:
        raise AssertionError("schedule must hit base at warmup end")
    final = optim.lr_at(10 * spe, spe, cfg, "weights")
    if abs(final - base * cfg.end_lr_factor) > 1e-12:
        raise AssertionError("schedule must end at base * end factor")


SUITES = {
    "tape-gradients": _suite_tape_gradients,
    "transport-feasibility": _suite_transport_feasibility,
    "transport-exactness": _suite_transport_exactness,
    "structure-matching": _suite_structure_matching,
    "twin-losses": _suite_twin_losses,
    "gate-behavior": _suite_gate_behavior,
    "schedule": _suite_schedule,
}


def run_all(report=print) -> bool:
    ok = True
    for name, suite in SUITES.items():
        try:
            suite()
        except AssertionError as exc:
            report(f"FAIL {name}: {exc}")
            ok = False
        else:
            report(f"PASS {name}")
    return ok
