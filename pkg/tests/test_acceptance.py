"""Acceptance criteria, one test and one PASS/FAIL line per criterion.

Tolerances are pinned to the project targets; nothing here is tuned to
whatever the code happens to produce.
"""

import math
import time

import numpy as np
import pytest

from aerostate import sim
from aerostate.estcore import (
    EulerAttitude, GaussianVec, Quaternion, merwe_weights, quat_from_euler, quat_rotate,
    sigma_points, systematic_resample,
)
from aerostate.fastslam import (
    LandmarkSet, SlamConfig, SlamParticle, get_perceptual_range, init_slam, map_update, slam_step,
)
from aerostate.features import random_descriptors
from aerostate.harness import RunConfig, execute
from aerostate.mcl import (
    FeatureFrame, MclConfig, MotionDelta, init_particles, mcl_step, perceptual_range,
)
from aerostate.ukf import Measurement7, UkfConfig, ukf_predict, ukf_update

from acceptance_log import record
from conftest import random_psd
from kf_oracle import run_pair

CASES = 10_000


# 1. linear-oracle equivalence

def test_criterion_1_linear_oracle():
    t0 = time.perf_counter()
    wm, wc = run_pair(500, np.random.default_rng(2024), UkfConfig.default2())
    elapsed = time.perf_counter() - t0
    ok = wm <= 1e-6 and wc <= 1e-6 and elapsed < 1.0
    record(1, "UKF vs linear KF, 500 steps", ok,
           f"mean rel err {wm:.2e}, cov rel err {wc:.2e} (<= 1e-6); {elapsed:.3f} s (< 1 s)")
    assert ok


# 2. UKF noise reduction and lag

def test_criterion_2_ukf_noise_reduction():
    hover = execute(RunConfig("ukf2", trajectory="hover", duration=60.0)).report.metrics
    step = execute(RunConfig("ukf2", trajectory="step", duration=60.0)).report.metrics
    ratio = hover["ukf_to_ir_rms_ratio"]
    lag_ok = step["ukf_lag_samples"] <= step["ema_lag_samples"]
    ok = ratio <= 0.5 and lag_ok
    record(2, "UKF altitude vs raw IR", ok,
           f"hover RMS ukf {hover['ukf_rms']:.4f} / ir {hover['ir_rms']:.4f} = {ratio:.3f} (<= 0.5); "
           f"step lag ukf {step['ukf_lag_samples']} vs ema {step['ema_lag_samples']} samples (ukf <= ema)")
    assert ok


# 3. MCL accuracy over five seeds

def test_criterion_3_mcl_accuracy():
    parts, ok = [], True
    for seed in range(5):
        t0 = time.perf_counter()
        rep = execute(RunConfig("mcl", seed=seed, world_seed=seed, duration=61.0, particles=40)).report
        elapsed = time.perf_counter() - t0
        st = rep.stats["MCL"]
        span = rep.metrics["duration_s"]
        good = st.mean <= 0.15 and st.max <= 0.35 and span >= 60.0 and elapsed < 30.0
        ok &= good
        parts.append(f"seed {seed}: mean {st.mean:.3f} max {st.max:.3f} over {span:.1f} s in {elapsed:.1f} s")
    record(3, "MCL L1 error, 5 seeds", ok,
           "; ".join(parts) + " (mean <= 0.15 m, max <= 0.35 m, >= 60 s, < 30 s/seed)")
    assert ok


# 4. SLAM then MCL over the exported map

def test_criterion_4_mcl_over_slam_map():
    lo, hi = 5108 / 3, 5108 * 3
    rep = execute(RunConfig("mcl-over-slam-map", seed=0)).report
    st = rep.stats["MCL over SLAM map"]
    n = rep.metrics["landmarks"]
    ok = st.mean <= 0.15 and lo <= n <= hi
    record(4, "MCL over offline SLAM map", ok,
           f"mean {st.mean:.3f} m (<= 0.15), max {st.max:.3f}; landmarks {n} in [{lo:.0f}, {hi:.0f}]; "
           f"SLAM trajectory mean {rep.stats['SLAM trajectory'].mean:.3f} m")
    assert ok


# 5. throughput of one keyframe step

def test_criterion_5_mcl_step_throughput(monkeypatch):
    monkeypatch.setenv("AEROSTATE_THREADS", "0")
    world = sim.generate_world(seed=0)
    fmap = world.feature_map()
    log = sim.simulate_flight(world, sim.square_trajectory(world.bounds), sim.SensorSpec(), 12.0, seed=0)
    frames = [fr for fr in log.frames if len(fr.frame) == 180][:20]
    rng = np.random.default_rng(0)
    cfg = MclConfig()
    times = []
    for fr in frames:
        ps = init_particles(_truth_at(log, fr.t), 40, (0.02, 0.02, 0.02), rng)
        ps.steps_since_update = cfg.keyframe.max_motion_steps - 1
        t0 = time.perf_counter()
        res = mcl_step(ps, fr.delta, fr.frame, fmap, cfg, rng)
        times.append(time.perf_counter() - t0)
        assert res.updated
    worst = max(times) * 1e3
    ok = len(frames) == 20 and worst <= 200.0
    record(5, "one mcl_step, 40 particles, 180 features", ok,
           f"map {len(fmap)} features; worst of {len(frames)} keyframe steps {worst:.1f} ms, "
           f"median {np.median(times) * 1e3:.1f} ms (<= 200 ms, single thread)")
    assert ok


def _truth_at(log, t):
    return min(log.truth, key=lambda r: abs(r.t - t)).pose


# 6. Algorithm 1 examples

MEAS = np.eye(2) * 0.003 ** 2


def _frame(offsets, desc, height=1.0):
    return FeatureFrame(0.0, height, np.asarray(offsets, float).reshape(-1, 2), desc)


def test_criterion_6_algorithm_1_examples():
    cfg = SlamConfig()
    rng = np.random.default_rng(6)
    checks = {}

    desc = random_descriptors(3, rng)
    ps = [SlamParticle((0.5, 0.5, 0.0)), SlamParticle((0.7, 0.4, 1.0))]
    out = map_update(ps, _frame([[0.01, 0.0], [0.0, 0.02], [-0.03, 0.01]], desc), cfg)
    checks["all-new"] = all(len(p.landmarks) == 3 and p.log_weight == 3 * math.log(0.3) for p in out)

    one = random_descriptors(1, rng)
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, LandmarkSet([[0.5, 0.5]], [MEAS], one, [0]))
    counters = []
    for _ in range(8):
        p = map_update([p], _frame([[0.0, 0.0]], one), cfg)[0]
        counters.append(p.landmarks.counters.tolist())
    checks["matched growth"] = counters == [[k] for k in range(1, 9)]

    lm_desc, obs_desc = random_descriptors(2, rng)[:1], random_descriptors(1, rng)
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, LandmarkSet([[0.52, 0.5]], [MEAS], lm_desc, [0]))
    out = map_update([p], _frame([[0.0, 0.05]], obs_desc), cfg)[0]
    checks["unmatched removal"] = (len(out.landmarks) == 1
                                   and np.array_equal(out.landmarks.descriptors, obs_desc)
                                   and [0.52, 0.5] not in out.landmarks.means.tolist())

    ok = all(checks.values())
    record(6, "Algorithm 1 map_update examples", ok,
           ", ".join(f"{k}: {'ok' if v else 'mismatch'}" for k, v in checks.items()))
    assert ok


# 7. determinism across runs and thread counts

SHORT = {"ukf2": 20.0, "ukf7": 20.0, "mcl": 20.0, "slam-offline": 8.0, "mcl-over-slam-map": 8.0}


def test_criterion_7_determinism(monkeypatch, tmp_path):
    from aerostate.harness import run_pipeline

    verdicts = []
    for mode, duration in SHORT.items():
        texts = []
        for k, threads in enumerate(("0", "0", "4")):
            monkeypatch.setenv("AEROSTATE_THREADS", threads)
            path = tmp_path / f"{mode}_{k}" / "report.json"
            run_pipeline(RunConfig(mode, seed=11, duration=duration), path, figures=False)
            texts.append(path.read_bytes())
        verdicts.append((mode, texts[0] == texts[1] == texts[2]))
    ok = all(v for _, v in verdicts)
    record(7, "byte-identical reports, 2 runs and AEROSTATE_THREADS in {0, 4}", ok,
           ", ".join(f"{m}: {'identical' if v else 'DIFFERS'}" for m, v in verdicts))
    assert ok


# 8. invariant suites, 10^4 randomized cases each

def _quaternion_norms(rng):
    worst = 0.0
    e = rng.uniform([-1.5, -1.5, -math.pi], [1.5, 1.5, math.pi], size=(CASES, 3))
    q = Quaternion()
    for k in range(CASES):
        qe = quat_from_euler(EulerAttitude(*e[k]))
        q = q * qe
        v = rng.normal(size=3)
        rv = quat_rotate(q, v)
        worst = max(worst, abs(qe.norm - 1.0), abs(q.norm - 1.0),
                    abs(np.linalg.norm(rv) - np.linalg.norm(v)) / max(np.linalg.norm(v), 1e-12))
    return worst <= 1e-12, f"worst norm defect {worst:.1e}"


def _sigma_weights(rng):
    worst = 0.0
    for _ in range(CASES):
        n = int(rng.integers(1, 8))
        alpha, beta = rng.uniform(1e-2, 1.0), rng.uniform(0.0, 3.0)
        kappa = rng.uniform(0.0, 3.0)
        lam, wm, wc = merwe_weights(n, alpha, beta, kappa)
        scale = np.abs(wm).max()
        worst = max(worst, abs(wm.sum() - 1.0) / scale,
                    abs(wc.sum() - (2.0 - alpha ** 2 + beta)) / scale)
        g = GaussianVec(rng.normal(size=n), random_psd(rng, n, 0.5))
        sp = sigma_points(g, alpha, beta, kappa)
        worst = max(worst, np.abs(sp.mean_weights @ sp.points - g.mean).max() / (1 + np.abs(g.mean).max()))
    return worst <= 1e-9, f"worst relative weight-sum defect {worst:.1e}"


def _covariance_psd(rng):
    c2, c7 = UkfConfig.default2(), UkfConfig.default7()
    worst = np.inf
    g2 = g7 = None
    for k in range(CASES // 2):
        if k % 100 == 0:
            g2 = GaussianVec([rng.uniform(0.2, 1.0), rng.normal(0, 0.2)], random_psd(rng, 2, 0.1))
            g7 = GaussianVec(np.r_[rng.uniform(0, 1.6, 2), 0.5, rng.normal(0, 0.2, 3), rng.uniform(-3, 3)],
                             random_psd(rng, 7, 0.05))
        g2 = ukf_predict(g2, [rng.normal(0, 0.5)], rng.uniform(0.005, 0.05), c2)
        g2 = ukf_update(g2, [g2.mean[0] + rng.normal(0, 0.02)], c2)
        att = EulerAttitude(*rng.normal(0, 0.05, 2), 0.0)
        g7 = ukf_predict(g7, rng.normal(0, 0.3, 3), rng.uniform(0.005, 0.05), c7, att)
        z = [None] * 6
        for i in rng.choice(6, size=rng.integers(0, 7), replace=False):
            z[i] = g7.mean[[2, 0, 1, 3, 4, 6][i]] + rng.normal(0, 0.05)
        g7 = ukf_update(g7, Measurement7(*z), c7, att)
        for g in (g2, g7):
            if not np.array_equal(g.cov, g.cov.T):
                return False, "asymmetric covariance"
            worst = min(worst, np.linalg.eigvalsh(g.cov).min() / max(np.trace(g.cov), 1e-300))
    return worst >= -1e-12, f"smallest relative eigenvalue {worst:.1e}"


def _particle_counts(rng):
    for _ in range(CASES):
        n_in, n_out = int(rng.integers(1, 200)), int(rng.integers(1, 200))
        lw = rng.normal(0, rng.uniform(0.1, 50.0), n_in)
        lw[rng.random(n_in) < 0.2] = -np.inf
        lw[rng.integers(n_in)] = 0.0
        idx = systematic_resample(lw, n_out, rng)
        if len(idx) != n_out or idx.min() < 0 or idx.max() >= n_in or np.any(np.isneginf(lw[idx])):
            return False, "resampler changed the particle count or drew a zero-weight particle"
    world = sim.generate_world(density=300, seed=8)
    fmap = world.feature_map()
    cfg = MclConfig()
    for k in range(CASES // 10):
        n = int(rng.integers(1, 30))
        pose = (*rng.uniform(0.3, 1.3, 2), rng.uniform(-3, 3))
        ps = init_particles(pose, n, (0.05, 0.05, 0.1), rng)
        ps.steps_since_update = int(rng.integers(0, 6))
        idx = sim.visible_features(world, pose[:2], 0.5, sim.DEFAULT_FOV)
        c, s = math.cos(pose[2]), math.sin(pose[2])
        rel = fmap.positions[idx] - np.array(pose[:2])
        offs = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]])
        frame = FeatureFrame(0.0, 0.5, offs, fmap.descriptors[idx])
        res = mcl_step(ps, MotionDelta(*rng.normal(0, 0.01, 3)), frame, fmap, cfg, rng)
        if len(res.particles) != n or len(res.particles.log_weights) != n:
            return False, "mcl_step changed the particle count"
    return True, f"{CASES} resamples and {CASES // 10} mcl steps conserve counts"


def _visibility_symmetry(rng):
    world = sim.generate_world(density=400, seed=9)
    fmap = world.feature_map()
    fov = sim.DEFAULT_FOV
    for _ in range(CASES):
        xy = rng.uniform(0.0, world.bounds)
        h = rng.uniform(0.1, 1.2)
        r = get_perceptual_range(h, fov)
        if r != perceptual_range(h, fov):
            return False, "mcl and fastslam perceptual ranges disagree"
        seen = np.zeros(len(fmap), bool)
        seen[sim.visible_features(world, xy, h, fov)] = True
        # a landmark is in range of the pose iff the pose is in range of the landmark
        inside = np.sum((fmap.positions - xy) ** 2, axis=1) <= r * r
        if not np.array_equal(seen, inside):
            return False, "visibility differs from the perceptual-range disc"
    return True, f"{CASES} poses agree"


def _landmark_ownership(rng):
    cfg = SlamConfig()
    pairs = 0
    state = init_slam((0.8, 0.8, 0.0), 15)
    for step in range(CASES // 100):
        state.steps_since_update = cfg.keyframe.max_motion_steps
        k = int(rng.integers(1, 12))
        frame = _frame(rng.uniform(-0.1, 0.1, (k, 2)), random_descriptors(k, rng), height=0.5)
        before = [p.landmarks.copy() for p in state.particles]
        new = slam_step(state, MotionDelta(*rng.normal(0, 0.005, 3)), frame, cfg, rng).state
        for p, b in zip(state.particles, before):
            if not (np.array_equal(p.landmarks.means, b.means)
                    and np.array_equal(p.landmarks.counters, b.counters)):
                return False, "slam_step mutated its input particles"
        lms = [p.landmarks for p in new.particles]
        for i in range(len(lms)):
            for j in range(i + 1, len(lms)):
                pairs += 1
                for name in ("means", "covs", "descriptors", "counters"):
                    if np.shares_memory(getattr(lms[i], name), getattr(lms[j], name)):
                        return False, f"particles {i} and {j} share {name}"
        state = new
    return pairs >= CASES, f"{pairs} particle pairs own disjoint landmark storage"


INVARIANTS = {
    "quaternion norms": _quaternion_norms,
    "sigma-weight sums": _sigma_weights,
    "covariance PSD": _covariance_psd,
    "particle-count conservation": _particle_counts,
    "visibility symmetry": _visibility_symmetry,
    "landmark ownership": _landmark_ownership,
}


@pytest.mark.parametrize("name", list(INVARIANTS))
def test_criterion_8_invariants(name):
    ok, detail = INVARIANTS[name](np.random.default_rng(8))
    record(8, f"invariant suite: {name}", ok, detail)
    assert ok
