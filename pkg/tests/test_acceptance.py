"""Acceptance checks; each test reports one PASS/FAIL line and then asserts it."""
import math
import os
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from collabmi import tensor as T
from collabmi.bench import comm_volume, compute_ap
from collabmi.errors import ContractError
from collabmi.experiments import SuiteConfig, mean_ap, run_suite, seed_ap
from collabmi.geometry import SE2
from collabmi.gradsuite import run_gradient_suite
from collabmi.mvmi import SceneViews, estimate_js_mi, estimate_local_mi, local_mi_per_voxel, sample_pairs
from collabmi.network import FeatureMap, NetworkConfig, fuse, init_params, nms
from collabmi.probe import fit_global_discriminator
from collabmi.scene import GridConfig, SensorConfig, cast_rays, voxelize
from collabmi.train import LossConfig, total_loss

from oracles import ap_oracle, brute_nms, brute_voxelize, random_instance, random_small_scene, raycast_agrees

LN4 = 2 * math.log(2)


def test_criterion_1_bandwidth(criterion):
    start = time.perf_counter()
    full, r32, none = comm_volume(), comm_volume(ratio=1 / 32), comm_volume(senders=0)
    elapsed = time.perf_counter() - start
    # the reference table prints decimal kilobytes to three significant figures
    sig3 = lambda x: float(f"{x:.3g}")
    ok = (full == 1024 * 1024 and r32 == 32 * 1024 and none == 0
          and sig3(full / 1000) == 1.05e3 and sig3(r32 / 1000) == 32.8 and elapsed < 1.0)
    criterion(1, ok, f"full={full // 1024} KB, 1/32={r32 // 1024} KB, none={none} B, {elapsed * 1e3:.2f} ms")
    assert ok


def test_criterion_2_gradient_suite(criterion):
    start = time.perf_counter()
    results = run_gradient_suite(range(10))
    elapsed = time.perf_counter() - start
    failed = sorted({r.name for r in results if not r.passed})
    names = {r.name for r in results}
    ok = not failed and elapsed < 120 and {"encode_warp_fuse_decode", "score_global", "score_local"} <= names
    worst = max(r.error for r in results)
    criterion(2, ok, f"{len(names)} checks x 10 seeds, worst rel err {worst:.2e}, failed={failed}, {elapsed:.1f} s")
    assert ok


def test_criterion_3_js_estimator(criterion):
    start = time.perf_counter()
    zero = estimate_js_mi(np.zeros(100), np.zeros(100)).item()
    indep = [fit_global_discriminator(s, dependent=False) for s in range(3)]
    dep = [fit_global_discriminator(s, dependent=True) for s in range(3)]
    elapsed = time.perf_counter() - start
    ok = (abs(zero + LN4) <= 1e-12
          and all(abs(v + LN4) <= 0.1 for v in indep)
          and all(d - i >= 0.3 for d, i in zip(dep, indep))
          and elapsed < 300)
    gaps = ", ".join(f"{d - i:.3f}" for d, i in zip(dep, indep))
    offs = ", ".join(f"{v + LN4:+.3f}" for v in indep)
    criterion(3, ok, f"independent offset from -2ln2 [{offs}], dependent gain [{gaps}] nats, {elapsed:.0f} s")
    assert ok


def test_criterion_4_identities(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    params = init_params(NetworkConfig(), GridConfig(size=8), rng, with_discriminators=False)
    worst = {"fusion": 0.0, "simplex": 0.0, "loss": 0.0, "local": 0.0}
    for _ in range(1000):
        h, w = rng.integers(1, 7, size=2)
        ego = FeatureMap(T.tensor(rng.standard_normal((h, w, 32)) * 3), 0, "individual", 0)
        out = fuse(ego, [FeatureMap(ego.data, 0, "aligned", 0)], params)
        worst["fusion"] = max(worst["fusion"], float(np.abs(out.data.data - ego.data.data).max()))

        n = int(rng.integers(1, 6))
        views = [FeatureMap(T.tensor(rng.standard_normal((h, w, 32)) * 3), 0, "aligned", j) for j in range(n)]
        _, maps = fuse(ego, views, params, return_weights=True)
        wts = np.stack([m.data.data for m in maps])
        dev = max(float(np.abs(wts.sum(axis=0) - 1).max()), float(max(0.0, -wts.min())))
        worst["simplex"] = max(worst["simplex"], dev)

        c, r, g, l_ = rng.uniform(0, 5, size=4)
        cfg = LossConfig(alpha=rng.uniform(), lam=rng.uniform(0.01, 1), beta_g=rng.uniform(), beta_l=rng.uniform())
        total, parts = total_loss(c, r, g, l_, cfg)
        expect_mi = cfg.lam * (cfg.beta_g * g + cfg.beta_l * l_)
        expect_total = (1 - cfg.alpha) * (c + r) + cfg.alpha * expect_mi
        worst["loss"] = max(worst["loss"], abs(parts.l_mi - expect_mi), abs(parts.total - expect_total), abs(total - expect_total))

        k, mh, mw = rng.integers(1, 5, size=3)
        p, q = rng.standard_normal((k, mh, mw)) * 3, rng.standard_normal((k, mh, mw)) * 3
        worst["local"] = max(worst["local"], abs(estimate_local_mi(T.tensor(p), T.tensor(q)).item() - local_mi_per_voxel(p, q)))
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-12 for v in worst.values()) and elapsed < 60
    criterion(4, ok, "max deviations " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" over 1000 trials each, {elapsed:.1f} s")
    assert ok


def test_criterion_5_pairs(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(5)

    def views(scene_id, n):
        return SceneViews(scene_id, tuple(tuple(rng.standard_normal((2, 2, 4)) for _ in range(n)) for _ in range(n)),
                          tuple(rng.standard_normal((2, 2, 4)) for _ in range(n)))

    counts_ok = determinism_ok = True
    for n in range(1, 5):
        for b in range(1, 5):
            batch = [views(i, n) for i in range(b)]
            negs = [views(100 + i, n) for i in range(b + 2)]
            pb = sample_pairs(batch, negs, 0, seed=n * b)
            counts_ok &= len(pb.positives) == n * b and len(pb.negatives) == n * b
            again = sample_pairs(batch, negs, 0, seed=n * b)
            determinism_ok &= again.negative_scene_ids == pb.negative_scene_ids and all(
                x[0] is y[0] and x[1] is y[1] for x, y in zip(again.negatives, pb.negatives))
    batch = [views(i, 2) for i in range(3)]
    try:
        sample_pairs(batch, [views(1, 2), views(7, 2), views(8, 2)], 0)
        overlap_ok = False
    except ContractError:
        overlap_ok = True
    elapsed = time.perf_counter() - start
    ok = counts_ok and determinism_ok and overlap_ok and elapsed < 10
    criterion(5, ok, f"counts={counts_ok}, deterministic={determinism_ok}, overlap rejected={overlap_ok}, {elapsed:.2f} s")
    assert ok


def test_criterion_6_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    agree = {"nms": 0, "ap": 0, "voxelize": 0, "raycast": 0}
    for _ in range(100):
        n = int(rng.integers(1, 11))
        xy = rng.uniform(0, 5, (n, 2))
        boxes = np.hstack([xy, xy + rng.uniform(0.5, 2.5, (n, 2))])
        scores = np.round(rng.uniform(size=n), 1)
        thr = float(rng.choice([0.1, 0.3, 0.5]))
        agree["nms"] += sorted(nms(boxes, scores, thr).tolist()) == sorted(brute_nms(boxes, scores, thr))

        dets, gts = random_instance(rng)
        agree["ap"] += all(abs(compute_ap(dets, gts, t) - ap_oracle(dets, gts, t)) <= 1e-12 for t in (0.5, 0.7))

        grid = GridConfig()
        pts = np.column_stack([rng.uniform(-12, 12, 300), rng.uniform(-12, 12, 300), rng.uniform(-0.2, 2.2, 300)])
        pose = SE2(*rng.uniform(-2, 2, 2), rng.uniform(-math.pi, math.pi))
        agree["voxelize"] += bool(np.array_equal(voxelize(pts, pose, grid).occupancy, brute_voxelize(pts, pose, grid)))

        scene = random_small_scene(rng)
        agree["raycast"] += raycast_agrees(scene, scene.agents[0], SensorConfig(n_rays=24, max_range=12.0), cast_rays)
    elapsed = time.perf_counter() - start
    ok = all(v == 100 for v in agree.values()) and elapsed < 120
    criterion(6, ok, ", ".join(f"{k} {v}/100" for k, v in agree.items()) + f", {elapsed:.1f} s")
    assert ok


# -- end-to-end suite ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def suite():
    return run_suite(SuiteConfig())


@pytest.mark.slow
def test_criterion_7_end_to_end_trend(suite, criterion):
    rows, seconds = suite["rows"], suite["seconds"]
    seeds = SuiteConfig().seeds
    early, cmimc, none_, alpha0 = (mean_ap(rows, m) for m in ("early", "intermediate", "none", "intermediate-alpha0"))
    wins = sum(seed_ap(rows, "intermediate", s) > seed_ap(rows, "none", s) for s in seeds)
    order_ok = early >= cmimc >= none_ and wins == len(seeds) and cmimc >= alpha0
    time_ok = seconds <= 1800
    ok = order_ok and time_ok
    criterion(7, ok, f"AP50 early={early:.4f} cmimc={cmimc:.4f} none={none_:.4f} alpha0={alpha0:.4f} "
                     f"late={mean_ap(rows, 'late'):.4f}, cmimc>none in {wins}/{len(seeds)} seeds, "
                     f"{seconds / 60:.1f} min with {suite['workers']} worker(s)")
    assert order_ok, "AP ordering"
    assert time_ok, f"suite took {seconds:.0f} s"


@pytest.mark.slow
def test_criterion_8_noise_trend(suite, criterion):
    rows = suite["rows"]
    stds = SuiteConfig().noise_stds
    aps = [mean_ap(rows, "intermediate", s) for s in stds]
    ok = all(a >= b for a, b in zip(aps, aps[1:]))
    criterion(8, ok, "mean AP50 by pose noise " + ", ".join(f"{s} m: {a:.4f}" for s, a in zip(stds, aps)))
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, criterion):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    env.pop("COLLABMI_OUTPUT", None)
    args = ["data.n_train=16", "data.n_test=8", "train.epochs=2", "seeds=[0]"]
    out = tmp_path / "run"

    def run_once():
        # same config, output_dir included; start from an empty directory each time
        shutil.rmtree(out, ignore_errors=True)
        for cmd in ("train", "eval"):
            subprocess.run([sys.executable, "-m", "collabmi", cmd, f"output_dir={out}", *args],
                           env=env, check=True, capture_output=True)
        return {p.name: p.read_bytes() for p in sorted((out / "metrics").iterdir())}

    a, b = run_once(), run_once()
    ok = bool(a) and a == b
    criterion(9, ok, f"{len(a)} metrics files compared, identical={a == b}")
    assert ok
