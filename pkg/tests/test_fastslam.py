import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerostate import sim
from aerostate.estcore import InvalidArgumentError
from aerostate.fastslam import (
    LandmarkEKF,
    LandmarkSet,
    SlamConfig,
    SlamParticle,
    best_2_matches,
    export_map,
    get_perceptual_range,
    init_landmark_ekf,
    init_slam,
    map_update,
    offline_slam,
    slam_step,
    update_landmark_ekf,
    write_pose_trace,
)
from aerostate.features import random_descriptors
from aerostate.mcl import FeatureFrame, MclConfig, MotionDelta, MotionNoise, init_particles, mcl_step

from helpers import hamming_reference

SIG2 = 0.003 ** 2
MEAS = np.eye(2) * SIG2


def frame_of(offsets, desc, height=1.0):
    return FeatureFrame(0.0, height, np.asarray(offsets, float).reshape(-1, 2),
                        np.asarray(desc, np.uint64).reshape(-1, 4))


# -- perceptual range

def test_perceptual_range_examples():
    assert get_perceptual_range(1.0, (math.radians(90), math.radians(100))) == pytest.approx(1.0)
    r = get_perceptual_range(0.55, (math.radians(60), math.radians(45)))
    assert r == pytest.approx(0.55 * math.tan(math.radians(22.5)))
    assert r == pytest.approx(0.2278, abs=1e-4)
    assert get_perceptual_range(1.1, (1.0, 0.8)) == pytest.approx(2 * get_perceptual_range(0.55, (1.0, 0.8)))
    with pytest.raises(InvalidArgumentError):
        get_perceptual_range(0.0)


# -- matching

def test_best_2_matches_example():
    # popcounts 5, 3, 9 against an all-zero query
    cands = np.array([[0b11111, 0, 0, 0], [0b111, 0, 0, 0], [0x1FF, 0, 0, 0]], dtype=np.uint64)
    m = best_2_matches(np.zeros(4, np.uint64), cands)
    assert (m.idx1, m.dist1, m.idx2, m.dist2) == (1, 3, 0, 5)
    assert best_2_matches(np.zeros(4, np.uint64), cands[:1]) is None


def test_best_2_matches_exhaustive(rng):
    lms = random_descriptors(1000, rng)
    for q in random_descriptors(5, rng):
        d = hamming_reference(q[None], lms)[0]
        order = sorted(range(1000), key=lambda j: (d[j], j))
        m = best_2_matches(q, lms)
        assert (m.idx1, m.dist1, m.idx2, m.dist2) == (order[0], d[order[0]], order[1], d[order[1]])


# -- landmark EKF

def test_init_landmark_examples():
    d = np.zeros(4, np.uint64)
    lm = init_landmark_ekf((0, 0, 0), (0.1, 0.2), d, MEAS)
    assert np.allclose(lm.mean, (0.1, 0.2)) and lm.counter == 0
    lm = init_landmark_ekf((1, 1, math.pi / 2), (0.1, 0), d, MEAS)
    assert np.allclose(lm.mean, (1, 1.1))
    for th in (0.0, 0.7, -2.5):
        assert np.allclose(init_landmark_ekf((0, 0, th), (1, 0), d, MEAS).cov, MEAS, atol=1e-18)


def test_update_zero_innovation():
    lm = LandmarkEKF(np.array([1.0, 0.5]), np.eye(2) * 1e-4, np.zeros(4, np.uint64))
    pose = (0.5, 0.5, 0.3)
    c, s = math.cos(0.3), math.sin(0.3)
    off = np.array([[c, s], [-s, c]]) @ (lm.mean - [0.5, 0.5])
    out = update_landmark_ekf(pose, off, lm, MEAS)
    assert np.allclose(out.mean, lm.mean, atol=1e-15)
    assert np.trace(out.cov) < np.trace(lm.cov)


def test_update_uninformative_prior():
    lm = LandmarkEKF(np.array([0.0, 0.0]), np.eye(2) * 1e9, np.zeros(4, np.uint64))
    pose = (1.0, 2.0, 0.9)
    out = update_landmark_ekf(pose, (0.2, -0.1), lm, MEAS)
    target = init_landmark_ekf(pose, (0.2, -0.1), lm.descriptor, MEAS).mean
    assert np.allclose(out.mean, target, atol=1e-3)


def test_update_matches_kf_oracle(rng):
    for _ in range(50):
        pose = rng.normal(size=3)
        A = rng.normal(size=(2, 2)) * 0.01
        lm = LandmarkEKF(rng.normal(size=2), A @ A.T + 1e-6 * np.eye(2), np.zeros(4, np.uint64))
        z = rng.normal(size=2)
        c, s = math.cos(pose[2]), math.sin(pose[2])
        H = np.array([[c, s], [-s, c]])
        S = H @ lm.cov @ H.T + MEAS
        K = lm.cov @ H.T @ np.linalg.inv(S)
        mean = lm.mean + K @ (z - H @ (lm.mean - pose[:2]))
        cov = (np.eye(2) - K @ H) @ lm.cov
        out = update_landmark_ekf(pose, z, lm, MEAS)
        assert np.allclose(out.mean, mean, atol=1e-9)
        assert np.allclose(out.cov, cov, atol=1e-9)


def test_trace_non_increasing(rng):
    lm = init_landmark_ekf((0, 0, 0), (0.1, 0.1), np.zeros(4, np.uint64), MEAS)
    for _ in range(200):
        prev = np.trace(lm.cov)
        lm = update_landmark_ekf(rng.normal(size=3) * 0.01, rng.normal(size=2) * 0.1, lm, MEAS)
        assert np.trace(lm.cov) <= prev + 1e-18
        assert np.linalg.eigvalsh(lm.cov).min() >= 0


# -- Algorithm 1 examples

def test_map_update_all_new(rng):
    cfg = SlamConfig()
    desc = random_descriptors(3, rng)
    ps = [SlamParticle((0.5, 0.5, 0.0)), SlamParticle((0.6, 0.4, 1.0))]
    out = map_update(ps, frame_of([[0.01, 0], [0, 0.02], [-0.03, 0.01]], desc), cfg)
    for p in out:
        assert len(p.landmarks) == 3
        assert p.log_weight == 3 * math.log(cfg.new_landmark_threshold)
        assert np.array_equal(p.landmarks.descriptors, desc)
    assert all(len(p.landmarks) == 0 and p.log_weight == 0.0 for p in ps)


def test_map_update_matched_counter_grows(rng):
    cfg = SlamConfig()
    desc = random_descriptors(2, rng)
    lms = LandmarkSet([[0.5, 0.5], [0.6, 0.5]], [MEAS, MEAS], desc, [0, 0])
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, lms)
    frame = frame_of([[0.0, 0.0], [0.1, 0.0]], desc)
    history = []
    for _ in range(6):
        p = map_update([p], frame, cfg)[0]
        history.append(p.landmarks.counters.tolist())
        assert len(p.landmarks) == 2
    assert history == [[k, k] for k in range(1, 7)]
    # exact descriptors: distance 0 against a runner-up near 128 bits
    assert p.log_weight > 0


def test_map_update_single_landmark_matched(rng):
    cfg = SlamConfig()
    desc = random_descriptors(1, rng)
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, LandmarkSet([[0.5, 0.5]], [MEAS], desc, [0]))
    frame = frame_of([[0.0, 0.0]], desc)
    for k in range(1, 6):
        p = map_update([p], frame, cfg)[0]
        assert p.landmarks.counters.tolist() == [k]
    assert p.log_weight == 5 * cfg.importance_scale * cfg.lone_reference_dist


def test_map_update_single_landmark_rejects_unrelated(rng):
    cfg = SlamConfig()
    desc = random_descriptors(2, rng)
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, LandmarkSet([[0.5, 0.5]], [MEAS], desc[:1], [0]))
    out = map_update([p], frame_of([[0.0, 0.0]], desc[1:]), cfg)[0]
    assert out.landmarks.counters.tolist() == [1]
    assert np.array_equal(out.landmarks.descriptors, desc[1:])


def test_map_update_unmatched_removed(rng):
    cfg = SlamConfig()
    desc = random_descriptors(3, rng)
    lms = LandmarkSet([[0.5, 0.5], [0.55, 0.5], [3.0, 3.0]], [MEAS] * 3, desc, [0, 0, 0])
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, lms)
    obs = random_descriptors(1, np.random.default_rng(99))
    out = map_update([p], frame_of([[0.0, 0.01]], obs), cfg)[0]
    # both in-range landmarks drop to -1 and go; the far one is untouched
    far = out.landmarks.means.tolist()
    assert [3.0, 3.0] in far
    assert [0.5, 0.5] not in far and [0.55, 0.5] not in far
    assert len(out.landmarks) == 2  # the far landmark plus the new one
    assert out.landmarks.counters[0] == 0
    assert out.landmarks.counters[1] == 1


def test_map_update_counter_trace(rng):
    cfg = SlamConfig()
    desc = random_descriptors(2, rng)
    lms = LandmarkSet([[0.5, 0.5], [0.6, 0.5]], [MEAS, MEAS], desc, [2, 0])
    p = SlamParticle((0.5, 0.5, 0.0), 0.0, lms)
    seen = frame_of([[0.1, 0.0]], desc[1:])
    p = map_update([p], seen, cfg)[0]
    assert p.landmarks.counters.tolist() == [1, 1]
    p = map_update([p], seen, cfg)[0]
    assert p.landmarks.counters.tolist() == [0, 2]
    p = map_update([p], seen, cfg)[0]
    assert p.landmarks.counters.tolist() == [3]


def test_out_of_range_untouched(rng):
    cfg = SlamConfig()
    n = 60
    means = rng.uniform(0, 2, size=(n, 2))
    desc = random_descriptors(n, rng)
    lms = LandmarkSet(means, [MEAS] * n, desc, rng.integers(0, 3, n))
    p = SlamParticle((1.0, 1.0, 0.2), 0.0, lms)
    r = get_perceptual_range(0.5, cfg.camera_fov)
    far = np.hypot(*(means - [1, 1]).T) > r
    obs = np.concatenate([desc[~far][:5], random_descriptors(15, rng)])
    offs = rng.uniform(-0.15, 0.15, size=(len(obs), 2))
    out = map_update([p], frame_of(offs, obs, height=0.5), cfg)[0]
    for i in np.flatnonzero(far):
        j = np.flatnonzero(np.all(out.landmarks.means == means[i], axis=1))
        assert len(j) == 1
        assert out.landmarks.counters[j[0]] == lms.counters[i]
        assert np.array_equal(out.landmarks.covs[j[0]], lms.covs[i])
    old = {tuple(m) for m in means}
    new = np.array([m for m in out.landmarks.means if tuple(m) not in old])
    assert len(new) and np.all(np.hypot(*(new - [1, 1]).T) <= r + 1e-12)


def test_out_of_range_observation_ignored(rng):
    cfg = SlamConfig()
    r = get_perceptual_range(0.5, cfg.camera_fov)
    frame = frame_of([[0.0, 0.0], [r * 1.01, 0.0]], random_descriptors(2, rng), height=0.5)
    out = map_update([SlamParticle((1, 1, 0))], frame, cfg)[0]
    assert len(out.landmarks) == 1


def test_map_update_permutation_invariant(rng):
    cfg = SlamConfig()
    world = rng.uniform(0, 1, size=(80, 2))
    desc = random_descriptors(80, rng)
    ps = []
    for k in range(6):
        sel = rng.choice(80, size=30, replace=False)
        ps.append(SlamParticle(rng.uniform(0.4, 0.6, 3), float(k), LandmarkSet(
            world[sel] + rng.normal(0, 0.002, (30, 2)), [MEAS] * 30, desc[sel], rng.integers(0, 4, 30))))
    frame = frame_of(rng.uniform(-0.2, 0.2, (25, 2)), desc[:25], height=0.5)
    a = map_update(ps, frame, cfg)
    perm = rng.permutation(6)
    b = map_update([ps[i] for i in perm], frame, cfg)
    for j, i in enumerate(perm):
        assert a[i].log_weight == b[j].log_weight
        for name in ("means", "covs", "descriptors", "counters"):
            assert np.array_equal(getattr(a[i].landmarks, name), getattr(b[j].landmarks, name))


def test_true_path_converges(rng):
    cfg = SlamConfig(landmark_meas_cov=((0.01 ** 2, 0), (0, 0.01 ** 2)))
    truth = rng.uniform(0.3, 0.7, size=(12, 2))
    desc = random_descriptors(12, rng)
    p = SlamParticle((0.5, 0.5, 0.0))
    for k in range(60):
        pose = np.array([0.5 + 0.02 * math.sin(k), 0.5 + 0.02 * math.cos(k), 0.1 * k])
        c, s = math.cos(pose[2]), math.sin(pose[2])
        offs = (truth - pose[:2]) @ np.array([[c, -s], [s, c]]) + rng.normal(0, 0.01, (12, 2))
        p = SlamParticle(pose, 0.0, p.landmarks)
        p = map_update([p], frame_of(offs, desc, height=2.0), cfg)[0]
    assert len(p.landmarks) == 12
    for i in range(12):
        sd = np.sqrt(np.diag(p.landmarks.covs[i]))
        assert np.all(np.abs(p.landmarks.means[i] - truth[i]) <= 3 * sd)


# -- slam_step

def test_slam_step_no_frames_matches_mcl():
    noise = MotionNoise(0.002, 0.003, 0.004)
    scfg = SlamConfig(motion_noise=noise)
    mcfg = MclConfig(motion_noise=noise)
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    state = init_slam((0.5, 0.5, 0.1), 12)
    ps = init_particles((0.5, 0.5, 0.1), 12)
    for k in range(40):
        d = MotionDelta(0.01, 0.002 * k, 0.01)
        state = slam_step(state, d, None, scfg, r1).state
        ps = mcl_step(ps, d, None, None, mcfg, r2).particles
    assert np.array_equal(state.poses(), ps.poses)


def test_resampled_particles_own_their_maps(rng):
    cfg = SlamConfig()
    state = init_slam((0.5, 0.5, 0.0), 5)
    state.steps_since_update = 10
    frame = frame_of([[0.0, 0.0], [0.01, 0.0]], random_descriptors(2, rng), height=0.5)
    out = slam_step(state, MotionDelta(0, 0, 0), frame, cfg, rng).state
    assert len(out.particles) == 5
    a, b = out.particles[0].landmarks, out.particles[1].landmarks
    for name in ("means", "covs", "descriptors", "counters"):
        assert not np.shares_memory(getattr(a, name), getattr(b, name))
    before = b.means.copy()
    a.means += 1.0
    a.counters[:] = 99
    assert np.array_equal(b.means, before)


# -- offline SLAM

@pytest.fixture(scope="module")
def small_world():
    return sim.generate_world(density=1500.0, seed=3)


def test_offline_slam_stationary(small_world):
    traj = sim.hover_trajectory(small_world.bounds, attitude_amplitude=0.0)
    sensors = sim.SensorSpec(cam_rate=10.0, features_per_frame=60, delta_noise=(0, 0, 0),
                             offset_noise=0.003)
    log = sim.simulate_flight(small_world, traj, sensors, 4.0, seed=1)
    res = offline_slam(log, SlamConfig(motion_noise=MotionNoise(0, 0, 0)), np.random.default_rng(0), 8)
    fmap = res.feature_map
    assert len(fmap) > 0
    truth_pos = small_world.positions
    for pos, d in zip(fmap.positions, fmap.descriptors):
        dist = np.hypot(*(truth_pos - pos).T)
        assert dist.min() <= 3 * 0.003 * math.sqrt(2)


def test_offline_slam_landmarks_track_visited(small_world):
    traj = sim.square_trajectory(small_world.bounds)
    sensors = sim.SensorSpec(cam_rate=10.0, features_per_frame=200)
    log = sim.simulate_flight(small_world, traj, sensors, 20.0, seed=4)
    visited = set()
    tp = {r.t: r for r in log.truth}
    for fr in log.frames:
        tr = tp[fr.t]
        visited.update(sim.visible_features(small_world, tr.pose[:2], tr.height, sensors.cam_fov,
                                            sensors.features_per_frame).tolist())
    res = offline_slam(log, SlamConfig(), np.random.default_rng(1), 40)
    assert 0.5 * len(visited) <= len(res.feature_map) <= 1.5 * len(visited)


def test_offline_slam_deterministic_and_trace(small_world, tmp_path):
    traj = sim.square_trajectory(small_world.bounds)
    log = sim.simulate_flight(small_world, traj, sim.SensorSpec(cam_rate=10.0), 4.0, seed=2)
    a = offline_slam(log, SlamConfig(), np.random.default_rng(7), 10)
    b = offline_slam(log, SlamConfig(), np.random.default_rng(7), 10)
    assert np.array_equal(a.feature_map.positions, b.feature_map.positions)
    assert np.array_equal(a.feature_map.descriptors, b.feature_map.descriptors)
    assert a.trace == b.trace
    write_pose_trace(a.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "timestamp,x,y,theta,n_landmarks,log_weight"
    assert len(lines) == len(a.trace) + 1


def test_offline_slam_empty_log():
    with pytest.raises(InvalidArgumentError):
        offline_slam(sim.FlightLog([]), SlamConfig())


def test_export_map_schema(rng):
    p = SlamParticle((0, 0, 0), 0.0, LandmarkSet([[0.1, 0.2], [0.3, 0.4]], [MEAS, MEAS],
                                                 random_descriptors(2, rng), [1, 1]))
    fmap = export_map(p, bounds=(1.0, 1.0))
    data = fmap.to_json()
    assert data["bounds"] == [1.0, 1.0]
    assert set(data["features"][0]) == {"id", "x", "y", "descriptor"}


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        SlamConfig(new_landmark_threshold=1.0)
    with pytest.raises(InvalidArgumentError):
        SlamConfig(importance_scale=0.0)
