"""Built-in invariant suite printed as a pass/fail table by ``pdfnet selftest``."""

from __future__ import annotations

import itertools
import time
from typing import Callable

import numpy as np
import torch

from . import fse, gradcheck, losses, metrics, reference
from .data import partition_patches, reassemble_patches


def check_gradients(seeds: int) -> tuple[bool, str]:
    worst = gradcheck.run(seeds)
    peak = max(worst.values())
    return peak <= 1e-5, f"max rel err {peak:.2e} over {seeds} seeds"


def check_lv_example() -> tuple[bool, str]:
    t = lambda v: torch.tensor(v, dtype=torch.float64).view(1, 1, 1, 2)  # noqa: E731
    val = float(losses.depth_stability_loss(t([0.8, 0.3]), t([1.0, 0.0]), t([0.5, 0.9])))
    return abs(val - 0.0248824) <= 1e-6, f"l_v = {val:.7f}"


def check_zero_loss(n: int = 50) -> tuple[bool, str]:
    g = torch.Generator().manual_seed(0)
    worst_prior, worst_stage = 0.0, 0.0
    for _ in range(n):
        m = (torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64) > 0.5).double()
        d = torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64)
        l_inte, _ = losses.integrity_prior_loss(m, m, d)
        parts = [losses.depth_stability_loss(m, m, d), losses.depth_continuity_loss(m, m, d), l_inte]
        worst_prior = max(worst_prior, max(abs(float(x)) for x in parts))
        logits = (m * 2 - 1) * 40
        worst_stage = max(worst_stage, float(losses.stage_loss(logits, m, d).total))
    return worst_prior == 0.0 and worst_stage < 1e-5, f"prior {worst_prior:g}, stage {worst_stage:.1e}"


def check_fse_invariants(n: int = 1000) -> tuple[bool, str]:
    rng = torch.Generator().manual_seed(1)
    for _ in range(n):
        p = torch.rand(1, 1, 16, 16, generator=rng, dtype=torch.float64)
        pooled = torch.rand(1, 1, 16, 16, generator=rng, dtype=torch.float64)
        b = fse.boundary_map(p, pooled)
        s = fse.integrity_map(p, b)
        if (b * s).abs().max() != 0 or ((s + b) < p).any():
            return False, "separation invariant violated"
    for g in (2, 4, 8):
        for _ in range(n // 10):
            b = (torch.rand(2, 1, 32, 32, generator=rng) > 0.97).double()
            if not np.array_equal(fse.patch_boundary_scores(b, g).numpy(), reference.patch_scores(b.numpy(), g)):
                return False, f"patch scores differ for g={g}"
    return True, f"{n} separation pairs, patch scores for g in 2,4,8"


def check_patch_round_trip(trials: int = 100) -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(2)
    for g in (1, 2, 4, 8, 16):
        for _ in range(trials):
            x = torch.randn(2, 3, 32, 48, generator=gen)
            if not torch.equal(reassemble_patches(partition_patches(x, g)), x):
                return False, f"round trip failed for g={g}"
    return True, f"{trials} trials x 5 grids"


def check_metric_oracles(pairs: int = 2000) -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    masks = [np.array(bits, dtype=bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]
    for _ in range(pairs):
        m = masks[rng.integers(512)]
        b = masks[rng.integers(512)]
        if metrics.mae(b.astype(float), m) != reference.mae(b.astype(float), m):
            return False, "MAE mismatch"
        if metrics.binary_f_measure(b, m) != reference.f_beta_binary(b, m):
            return False, "F-beta mismatch"
    for _ in range(20):
        m = rng.random((16, 16)) > rng.uniform(0.2, 0.8)
        p = rng.random((16, 16))
        if abs(metrics.e_measure(p, m) - reference.e_measure(p, m)) > 1e-9:
            return False, "E-measure mismatch"
        if abs(metrics.f_max(p, m) - reference.f_max(p, m)) > 1e-12:
            return False, "max-F mismatch"
    return True, f"{pairs} binary 3x3 pairs, 20 random 16x16"


def check_residual_identity() -> tuple[bool, str]:
    torch.manual_seed(4)
    block = fse.FSE(16, 4, zero_init=True)
    f_v, f_d, f_p = (torch.randn(1, 16, 32, 32) for _ in range(3))
    prev = torch.rand(1, 1, 16, 16)
    with torch.no_grad():
        out = block(f_v, f_d, f_p, prev, 4)
    diff = max(float((a - b).abs().max()) for a, b in ((out.visual, f_v), (out.depth, f_d), (out.patch, f_p)))
    return diff == 0.0, f"max abs diff {diff:g}"


def checks(seeds: int) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    return [
        ("gradient fidelity", lambda: check_gradients(seeds)),
        ("l_v worked example", check_lv_example),
        ("perfect-prediction zero loss", check_zero_loss),
        ("FSE structural invariants", check_fse_invariants),
        ("patch round trip", check_patch_round_trip),
        ("metric oracles", check_metric_oracles),
        ("residual-identity init", check_residual_identity),
    ]


def run_all(seeds: int = 100) -> bool:
    ok_all = True
    print(f"{'check':<32} {'result':<6} {'seconds':>8}  detail")
    for name, fn in checks(seeds):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        print(f"{name:<32} {'PASS' if ok else 'FAIL':<6} {time.perf_counter() - t0:>8.2f}  {detail}")
    print("all checks passed" if ok_all else "some checks FAILED")
    return ok_all
