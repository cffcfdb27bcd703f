"""Reference-gait correctness: the periodic spline against an independent
oracle, clip geometry invariants, and phase bookkeeping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from fallsafe import dynamics as dyn
from fallsafe import gait
from fallsafe.errors import ConfigError


def _scipy_periodic(phases, values):
    x = np.append(phases, phases[0] + 1.0)
    y = np.vstack([values, values[:1]])
    return CubicSpline(x, y, bc_type="periodic")


@given(seed=st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_spline_matches_scipy_periodic_cubic(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    phases = np.sort(rng.uniform(0, 0.999, n))
    phases[0] = 0.0
    if np.any(np.diff(phases) < 1e-3):
        phases = np.arange(n) / n
    values = rng.normal(size=(n, 2))
    mine = gait.PeriodicCubicSpline(phases, values)
    ref = _scipy_periodic(phases, values)
    for phi in rng.uniform(0, 1, 25):
        assert np.allclose(mine(phi), ref(phi % 1.0 + phases[0] * 0), atol=1e-9)
        assert np.allclose(mine.derivative(phi), ref(phi, 1), atol=1e-8)


def test_spline_interpolates_knots_and_wraps():
    phases = np.array([0.0, 0.2, 0.5, 0.8])
    values = np.array([1.0, -2.0, 0.5, 3.0])
    sp = gait.PeriodicCubicSpline(phases, values)
    for p, v in zip(phases, values):
        assert abs(sp(p)[0] - v) < 1e-12
    # C1 continuity across the period boundary
    assert abs(sp(1.0 - 1e-9)[0] - sp(0.0)[0]) < 1e-6
    assert abs(sp.derivative(1.0 - 1e-9)[0] - sp.derivative(0.0)[0]) < 1e-4
    assert np.allclose(sp(0.3), sp(1.3))


def test_spline_validation():
    with pytest.raises(ConfigError):
        gait.PeriodicCubicSpline(np.array([0.0]), np.array([1.0]))
    with pytest.raises(ConfigError):
        gait.PeriodicCubicSpline(np.array([0.0, 0.5, 0.4]), np.zeros(3))


def test_clip_right_leg_is_left_shifted_half_cycle(clip):
    for phi in np.linspace(0, 1, 17, endpoint=False):
        f = clip.sample(phi)
        g = clip.sample((phi + 0.5) % 1.0)
        assert np.allclose(f.joints[3:6], g.joints[0:3], atol=1e-9)


def test_clip_advances_one_stride_per_cycle(clip):
    f0 = clip.sample(0.25, cycles=0)
    f1 = clip.sample(0.25, cycles=1)
    assert abs((f1.base[0] - f0.base[0]) - clip.stride) < 1e-12
    assert abs((f1.com[0] - f0.com[0]) - clip.stride) < 1e-12
    assert abs(f1.base[1] - f0.base[1]) < 1e-12
    assert clip.speed == pytest.approx(clip.stride / clip.cycle_s)


def test_clip_reference_pose_touches_ground(biped, clip):
    # at each keyframe phase the lowest contact point sits on the ground
    for phi in clip.phases:
        q, qd = clip.reference_state(float(phi))
        pts, _, _ = dyn.contact_forces(biped, dyn.SimState(q=q, qd=qd))
        assert abs(pts[:, 1].min()) < 1e-9
        assert q[1] > 0.7  # pelvis upright


def test_clip_feet_targets_never_below_ground(clip):
    for phi in np.linspace(0, 1, 101):
        f = clip.sample(phi)
        assert np.all(f.feet[:, 1] >= 0.0)


def test_in_left_swing_window(clip):
    lo, hi = clip.left_swing
    assert clip.in_left_swing((lo + hi) / 2)
    assert not clip.in_left_swing(lo - 0.01)
    assert not clip.in_left_swing(hi + 0.01 - 1.0 if hi >= 1.0 else hi)


def test_advance_wraps_and_validates():
    assert gait.advance(0.9, 0.3, 1.0) == pytest.approx(0.2)
    assert gait.advance(0.5, 0.0, 2.0) == 0.5
    with pytest.raises(ConfigError):
        gait.advance(0.5, -0.1, 1.0)
    with pytest.raises(ConfigError):
        gait.advance(0.5, 0.1, 0.0)


def test_sample_dict_api(clip):
    d = gait.sample(clip, 0.3)
    assert set(d) == {"q_ref", "com_ref", "ee_ref"}
    assert d["q_ref"].shape == (6,)
    assert d["ee_ref"].shape == (2, 2)


def test_load_clip_roundtrip_and_fail_closed(tmp_path, biped):
    doc = ["cycle_s: 1.0", "keyframes:"]
    for phase, hip in ((0.0, 10.0), (0.5, -10.0)):
        doc.append(f"  - phase: {phase}")
        doc.append("    joints_deg: {hip_l: %g, knee_l: -5, ankle_l: 0,"
                   " hip_r: %g, knee_r: -5, ankle_r: 0}" % (hip, -hip))
    p = tmp_path / "clip.yaml"
    p.write_text("\n".join(doc) + "\n")
    clip = gait.load_clip(p, biped)
    assert clip.cycle_s == 1.0
    assert np.isclose(clip.sample(0.0).joints[0], np.deg2rad(10.0))

    p2 = tmp_path / "bad.yaml"
    p2.write_text(p.read_text() + "extra_key: 1\n")
    with pytest.raises(ConfigError):
        gait.load_clip(p2, biped)


def test_reference_state_velocity_is_spline_derivative(clip):
    # finite-difference of sampled joints matches joint_vel
    h = 1e-6
    phi = 0.37
    f0 = clip.sample(phi - h)
    f1 = clip.sample(phi + h)
    fd = (f1.joints - f0.joints) / (2 * h) / clip.cycle_s
    assert np.allclose(clip.sample(phi).joint_vel, fd, atol=1e-4)
