"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a one-line measurement; the terminal summary prints one
PASS/FAIL line per criterion. Criteria 8 and 10 train models and dominate the
runtime of the suite.
"""

import itertools
import json
import time

import numpy as np
import py_sod_metrics as sod
import pytest
import torch

from pdfnet import cli, fse, gradcheck, losses, metrics, reference
from pdfnet.config import RunConfig
from pdfnet.data import make_synthetic_dataset, partition_patches, reassemble_patches
from pdfnet.train import predict_dataset, read_log, train

SMALL_NET = dict(resolution=(256, 256), patch_grid=8, backbone_channels=(16, 32, 64, 128), decoder_channels=32,
                 token_limit=16)
TINY_NET = dict(SMALL_NET, backbone_channels=(8, 16, 32, 64), decoder_channels=16)


def verdict(record_property, ok: bool, detail: str) -> None:
    record_property("detail", detail)
    print(f"{'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --------------------------------------------------------------------------- 1


def test_criterion_01_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    worst = gradcheck.run(100)
    elapsed = time.perf_counter() - t0
    peak_name = max(worst, key=worst.get)
    required = {"l_v", "l_g", "l_inte", "wbce", "wiou", "ssim", "silog", "total"}
    ok = required <= set(worst) and worst[peak_name] <= 1e-5 and elapsed < 60
    verdict(record_property, ok,
            f"max rel err {worst[peak_name]:.2e} ({peak_name}) over 100 instances, {elapsed:.1f}s (<= 1e-5, < 60s)")


# --------------------------------------------------------------------------- 2


def test_criterion_02_perfect_prediction_zero_loss(record_property):
    g = torch.Generator().manual_seed(20)
    worst_prior, worst_stage, worst_silog = 0.0, 0.0, 0.0
    for _ in range(50):
        m = (torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64) > 0.5).double()
        d = 0.05 + 0.9 * torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64)
        l_inte, _ = losses.integrity_prior_loss(m, m, d)
        l_v, l_g = losses.depth_stability_loss(m, m, d), losses.depth_continuity_loss(m, m, d)
        worst_prior = max(worst_prior, *(abs(float(x)) for x in (l_v, l_g, l_inte)))
        hard_logits = (2 * m - 1) * 40
        worst_stage = max(worst_stage, float(losses.stage_loss(hard_logits, m, d).total))
        worst_silog = max(worst_silog, abs(float(losses.silog_loss(d, d))))
    ok = worst_prior == 0.0 and worst_stage < 1e-5 and worst_silog == 0.0
    verdict(record_property, ok,
            f"l_v/l_g/l_inte max {worst_prior:g} (== 0), stage loss max {worst_stage:.1e} (< 1e-5), "
            f"SILog {worst_silog:g} on 50 masks")


# --------------------------------------------------------------------------- 3


def test_criterion_03_hand_computed_lv(record_property):
    t = lambda v: torch.tensor(v, dtype=torch.float64).view(1, 1, 1, 2)  # noqa: E731
    value = float(losses.depth_stability_loss(t([0.8, 0.3]), t([1.0, 0.0]), t([0.5, 0.9])))
    oracle = reference.depth_stability([0.8, 0.3], [1.0, 0.0], [0.5, 0.9])
    ok = abs(value - 0.0248824) <= 1e-6 and abs(oracle - 0.0248824) <= 1e-6
    verdict(record_property, ok, f"l_v = {value:.7f}, scalar oracle {oracle:.7f} (target 0.0248824 +- 1e-6)")


# --------------------------------------------------------------------------- 4


def test_criterion_04_fse_invariants(record_property):
    g = torch.Generator().manual_seed(40)
    violations = 0
    for i in range(1000):
        shape = (1, 1, 16, 16)
        p = torch.rand(shape, generator=g, dtype=torch.float64)
        # half the pairs use the real pooled prediction, half an arbitrary map
        pooled = fse.pool_prediction(p) if i % 2 else torch.rand(shape, generator=g, dtype=torch.float64)
        b = fse.boundary_map(p, pooled)
        s = fse.integrity_map(p, b)
        violations += int((b * s).abs().max() != 0) + int(((s + b) < p).any())
    mismatches = 0
    for grid in (2, 4, 8):
        for _ in range(1000):
            density = float(torch.rand((), generator=g))
            boundary = (torch.rand(1, 1, 32, 32, generator=g) < density * 0.1).double()
            got = fse.patch_boundary_scores(boundary, grid).numpy()
            mismatches += int(not np.array_equal(got.reshape(-1), reference.patch_scores(boundary.numpy(), grid).reshape(-1)))
    ok = violations == 0 and mismatches == 0
    verdict(record_property, ok,
            f"{violations} separation violations in 1000 pairs, {mismatches} patch-score mismatches in 3x1000 maps")


# --------------------------------------------------------------------------- 5


def test_criterion_05_patch_round_trip(record_property):
    gen = torch.Generator().manual_seed(50)
    failures = 0
    for grid in (1, 2, 4, 8, 16):
        for _ in range(100):
            x = torch.randn(2, 3, 64, 32, generator=gen, dtype=torch.float64)
            failures += int(not torch.equal(reassemble_patches(partition_patches(x, grid)), x))
    verdict(record_property, failures == 0, f"{failures} inexact round trips in 5 grids x 100 trials")


# --------------------------------------------------------------------------- 6


def _toolkit_scores(p, m):
    em = sod.Emeasure()
    em.gt_fg_numel, em.gt_size = int(m.sum()), m.size
    return (sod.Smeasure().cal_sm(p, m), float(em.cal_em_with_cumsumhistogram(p, m).mean()),
            sod.WeightedFmeasure().cal_wfm(p, m))


def test_criterion_06_metric_oracles(record_property):
    t0 = time.perf_counter()
    grids = [np.array(bits, dtype=bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]
    rng = np.random.default_rng(60)
    sampled = [grids[i] for i in rng.choice(512, 32, replace=False)]
    pairs = exact = 0
    for m in grids:
        for b in sampled:
            pairs += 1
            exact += int(metrics.mae(b.astype(float), m) == reference.mae(b.astype(float), m)
                         and metrics.binary_f_measure(b, m) == reference.f_beta_binary(b, m))
    worst = 0.0
    for _ in range(100):
        m = rng.random((16, 16)) > rng.uniform(0.2, 0.8)
        p = rng.random((16, 16)) ** rng.uniform(0.3, 3)
        s_ref, e_ref, w_ref = _toolkit_scores(p, m)
        worst = max(worst, abs(metrics.s_measure(p, m) - s_ref), abs(metrics.e_measure(p, m) - e_ref),
                    abs(metrics.weighted_f_measure(p, m) - w_ref),
                    abs(metrics.e_measure(p, m) - reference.e_measure(p, m)))
    elapsed = time.perf_counter() - t0
    ok = pairs >= 10_000 and exact == pairs and worst <= 1e-9 and elapsed < 300
    verdict(record_property, ok,
            f"{exact}/{pairs} exact 3x3 pairs, S/E/weighted-F max diff {worst:.1e} on 100 instances, {elapsed:.1f}s")


# --------------------------------------------------------------------------- 7


def test_criterion_07_residual_identity(record_property):
    torch.manual_seed(70)
    worst = 0.0
    for dim, g in ((16, 4), (32, 8), (24, 2)):
        f_v, f_d, f_p = (torch.randn(2, dim, 32, 32) for _ in range(3))
        prev = torch.rand(2, 1, 16, 16)
        with torch.no_grad():
            out = fse.FSE(dim, 4, zero_init=True)(f_v, f_d, f_p, prev, g)
        worst = max(worst, *(float((a - b).abs().max())
                             for a, b in ((out.visual, f_v), (out.depth, f_d), (out.patch, f_p))))
    verdict(record_property, worst == 0.0, f"max abs diff {worst:g} over 3 widths")


# --------------------------------------------------------------------------- 8


def test_criterion_08_overfit_smoke(record_property, tmp_path):
    root = make_synthetic_dataset(tmp_path / "data", 1, (256, 256), seed=80)
    cfg = RunConfig(**SMALL_NET, data_root=str(root), out_dir=str(tmp_path / "run"), learning_rate=1e-3,
                    epochs=200, max_steps=200, augment=False, log_every=10)
    t0 = time.perf_counter()
    trainer = train(cfg)
    elapsed = time.perf_counter() - t0
    (sid, pred, mask, _), = predict_dataset(trainer.model, trainer.dataset)
    score = metrics.f_max(pred, mask > 0.5)
    ok = trainer.state.step == 200 and score >= 0.95 and elapsed < 600
    verdict(record_property, ok, f"training F-max {score:.4f} after 200 steps (>= 0.95), {elapsed:.0f}s (< 600s)")


# --------------------------------------------------------------------------- 9


def test_criterion_09_depth_variance_statistic(record_property, tmp_path, capsys):
    root = tmp_path / "data"
    assert cli.main(["make-synthetic", str(root), "-n", "50", "--fg-depth-sigma", "0.02",
                     "--bg-mode", "gradient", "--seed", "90"]) == 0
    capsys.readouterr()
    assert cli.main(["analyze-prior", str(root), "--output", str(tmp_path / "prior")]) == 0
    summary = json.loads((tmp_path / "prior" / "depth_variance.json").read_text())
    frac = summary["fraction_fg_lower"]
    ok = summary["samples"] == 50 and frac >= 0.95
    verdict(record_property, ok,
            f"var_fg < var_bg on {frac:.0%} of 50 samples (>= 95%); mean var_fg {summary['mean_var_fg']:.2e}, "
            f"mean var_bg {summary['mean_var_bg']:.2e}")


# --------------------------------------------------------------------------- 10


@pytest.mark.slow
def test_criterion_10_integrity_prior_ablation_direction(record_property, tmp_path):
    train_root = make_synthetic_dataset(tmp_path / "train", 50, (256, 256), seed=100)
    val_root = make_synthetic_dataset(tmp_path / "val", 10, (256, 256), seed=101)
    rows = []
    for seed in range(5):
        maes = {}
        for use_inte in (True, False):
            cfg = RunConfig(**TINY_NET, data_root=str(train_root), val_root=str(val_root),
                            out_dir=str(tmp_path / f"s{seed}_{int(use_inte)}"), learning_rate=1e-3, epochs=2,
                            augment=False, seed=seed, use_inte=use_inte, log_every=25)
            train(cfg)
            log = read_log(tmp_path / f"s{seed}_{int(use_inte)}" / "train_log.jsonl")
            maes[use_inte] = [r["val_mae"] for r in log if "val_mae" in r][-1]
        rows.append((seed, maes[True], maes[False]))
    wins = sum(on <= off for _, on, off in rows)
    table = ", ".join(f"s{s}: {on:.4f} vs {off:.4f}" for s, on, off in rows)
    verdict(record_property, wins >= 3, f"l_inte on <= off in {wins}/5 seeds (>= 3); val MAE on vs off: {table}")


# --------------------------------------------------------------------------- 11


def test_criterion_11_determinism(record_property, tmp_path, tiny_root):
    paths = []
    for name in ("a", "b"):
        cfg = RunConfig(**TINY_NET, data_root=str(tiny_root), out_dir=str(tmp_path / name), learning_rate=1e-3,
                        epochs=10, max_steps=10, checkpoint_every=10, deterministic=True, seed=110)
        train(cfg)
        paths.append(tmp_path / name / "step_000010.pt")
    a, b = (p.read_bytes() for p in paths)
    verdict(record_property, a == b, f"step-10 checkpoints {'bit-identical' if a == b else 'differ'} ({len(a)} bytes)")
