"""Acceptance criteria 1-9, each at its stated tolerance.

Criteria 5-8 need trained desk-scale runs. They live in ``acceptance_runs/``
(override with SS2R_ACCEPT_DIR). An existing run directory is reused when its
config.json matches the expected config; finished phases are skipped and the
evaluation is recomputed. Set SS2R_FRESH=1 to delete and retrain from scratch
(about 2.5 h on one core for both runs).
"""

import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from ss2r import pipeline as pl
from ss2r.checks import TOLERANCE, all_checks
from ss2r.diffusion import ddim_sample, ddpm_step, forward_diffuse, make_schedule
from ss2r.geometry.metrics import cloud_metrics, normalize_pair

from test_geometry import brute_chamfer, brute_fscore, brute_iou, sphere_fusion_case

pytestmark = pytest.mark.acceptance

RUNS = Path(os.environ.get("SS2R_ACCEPT_DIR", Path(__file__).resolve().parents[1] / "acceptance_runs"))


def zero_noise_config() -> pl.RunConfig:
    d = pl.desk_config().to_dict()
    d["data"]["oracle"] = {k: 0 for k in d["data"]["oracle"]}
    d["stages"] = 1
    return pl.RunConfig.from_dict(d)


def _trained_run(name: str, cfg: pl.RunConfig) -> dict:
    root = RUNS / name
    if os.environ.get("SS2R_FRESH") == "1" and root.exists():
        shutil.rmtree(root)
    if (root / "config.json").exists():
        stored = json.loads((root / "config.json").read_text())
        assert stored == cfg.to_dict(), f"{root} was produced by a different config; delete it or set SS2R_FRESH=1"
    return pl.run_pipeline(cfg, pl.RunDir(root))


@pytest.fixture(scope="module")
def desk():
    return _trained_run("desk", pl.desk_config())


@pytest.fixture(scope="module")
def desk_zero():
    return _trained_run("desk_zero_noise", zero_noise_config())


def test_c1_gradient_oracle(report_criterion):
    t0 = time.perf_counter()
    errs = all_checks(0)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(e < TOLERANCE for e in errs.values()) and elapsed < 120
    report_criterion(1, ok, f"{len(errs)} checks, worst {worst}={errs[worst]:.2e} (< 1e-4), runtime {elapsed:.1f}s (< 120s)")


def test_c2_diffusion_closed_form(report_criterion):
    s = make_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    n = 100_000
    worst = 0.0
    for t in (0, 10, 100, 500, 999):
        for x0 in (0.0, 0.8):
            x = forward_diffuse(np.full(n, x0), t, rng.standard_normal(n), s)
            mean, var = np.sqrt(s.alpha_bar[t]) * x0, 1.0 - s.alpha_bar[t]
            z_mean = abs(x.mean() - mean) / np.sqrt(var / n)
            z_var = abs(x.var(ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
            worst = max(worst, z_mean, z_var)
    x0 = rng.uniform(-1, 1, (4, 1, 8, 8))
    eps = rng.standard_normal(x0.shape)
    inv_err = np.abs(ddpm_step(forward_diffuse(x0, 0, eps, s), 0, eps, s) - x0).max() / np.abs(x0).max()
    x_T = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)

    def eps_fn(x, t):
        return np.tanh(0.5 * x + 1e-3 * t).astype(np.float32)

    bitwise = ddim_sample(eps_fn, x_T, s, 50).tobytes() == ddim_sample(eps_fn, x_T.copy(), s, 50).tobytes()
    ok = worst < 3 and inv_err < 1e-5 and bitwise
    report_criterion(2, ok, f"worst MC deviation {worst:.2f} SE (< 3), ddpm inversion rel err {inv_err:.1e} "
                            f"(< 1e-5), DDIM eta=0 bitwise deterministic={bitwise}")


def test_c3_metric_oracles(report_criterion):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        a = rng.normal(size=(int(rng.integers(1, 101)), 3))
        b = rng.normal(size=(int(rng.integers(2, 101)), 3))
        k = len(a) // 2
        a[:k] = b[rng.integers(0, len(b), k)] + rng.normal(0, 0.004, (k, 3))
        na, nb = normalize_pair(a, b)
        m = cloud_metrics(a, b)
        mismatches += (m["chamfer_l2_x1000"] != brute_chamfer(na, nb)) + (m["f_score"] != brute_fscore(na, nb)) \
            + (m["voxel_iou"] != brute_iou(na, nb))
    report_criterion(3, mismatches == 0, f"{mismatches} exact-equality mismatches over 100 trials x 3 metrics")


def test_c4_fusion_oracle(report_criterion):
    t0 = time.perf_counter()
    cd, bound = sphere_fusion_case()
    elapsed = time.perf_counter() - t0
    report_criterion(4, cd < bound and elapsed < 60,
                     f"sphere Chamfer x1000 {cd:.4f} < half-voxel bound {bound:.4f}, runtime {elapsed:.1f}s (< 60s)")


def test_c5_stage1_fidelity(desk, report_criterion):
    parts, ok = [], True
    for p in desk["profile"]:
        var_ok = p["var_rel_err"] <= 0.25
        mean_ok = abs(p["model_mean"] - p["oracle_mean"]) <= 3 * p["mean_se"]
        ok &= var_ok and mean_ok
        analytic_err = abs(p["model_var"] - p["analytic_var"]) / p["analytic_var"]
        parts.append(f"[{p['z_lo']:.2f},{p['z_hi']:.2f})m var err {p['var_rel_err']:.1%} "
                     f"(vs a+bz^2 alone {analytic_err:.1%}), mean dev "
                     f"{abs(p['model_mean'] - p['oracle_mean']) / p['mean_se']:.1f} SE")
    report_criterion(5, ok, "; ".join(parts))


def test_c6_end_to_end_improvement(desk, report_criterion):
    m = desk["metrics"]
    s, d1, d2, r2 = (m[k]["chamfer_l2_x1000"] for k in ("S", "D1", "D2", "R2"))
    a = d2 <= 0.7 * s
    b = d2 < d1
    report_criterion(6, a and b, f"(a) D2 {d2:.4f} vs S {s:.4f}: {1 - d2 / s:+.1%} reduction (need >= 30%) "
                                 f"{'ok' if a else 'FAIL'}; (b) D2 {d2:.4f} < D1 {d1:.4f} {'ok' if b else 'FAIL'}; "
                                 f"reference: independent second oracle draw R2 {r2:.4f}")


def test_c7_discriminator_drop(desk, report_criterion):
    acc = desk["disc_frozen"]
    a1, a2 = acc["D1"]["generated_accuracy"], acc["D2"]["generated_accuracy"]
    ctrl = desk["disc_shuffled_control_accuracy"]
    drop_ok = a1 - a2 >= 0.15
    ctrl_ok = abs(ctrl - 0.5) <= 0.05
    report_criterion(7, drop_ok and ctrl_ok,
                     f"frozen Stage-I discriminator flags {a1:.1%} of Stage-I patches and {a2:.1%} of Stage-II "
                     f"patches: drop {100 * (a1 - a2):.1f} pp (need >= 15); shuffled-label control {ctrl:.1%} "
                     f"(need 50% +- 5); retrained on Stage-II patches {desk.get('disc_retrained_accuracy')}")


def test_c8_degenerate_oracle(desk_zero, report_criterion):
    rms = desk_zero["stage1_residual_rms"]
    f = desk_zero["metrics"]["D1"]["f_score"]
    report_criterion(8, rms < 0.005 and f > 95, f"Stage-I residual RMS {rms * 1000:.2f} mm (< 5 mm), "
                                                 f"F-score D1 vs R {f:.2f} (> 95)")


def test_c9_reproducibility(tmp_path, report_criterion):
    roots = [tmp_path / "a", tmp_path / "b"]
    for r in roots:
        pl.run_pipeline(pl.smoke_config(seed=5), pl.RunDir(r))

    def artifacts(root):
        files = sorted(root.glob("metrics/*.csv")) + sorted(root.glob("checkpoints/*.ckpt"))
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in files}

    a, b = (artifacts(r) for r in roots)
    differing = [k for k in a if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differing and len(a) > 0
    report_criterion(9, ok, f"{len(a)} metrics CSVs and checkpoints compared byte-for-byte, "
                            f"{len(differing)} differ")
