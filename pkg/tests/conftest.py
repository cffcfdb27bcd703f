"""Shared fixtures: models, clips, and shipped training artifacts."""

import math
import os

import numpy as np
import pytest

from fallsafe import dynamics as dyn
from fallsafe import gait

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ARTIFACTS = os.path.join(REPO, "artifacts")
CONFIG = os.path.join(REPO, "configs", "default.yaml")

WALKER_POLICY = os.path.join(ARTIFACTS, "walker", "walker_policy.bin")
RECOVERY_POLICY = os.path.join(ARTIFACTS, "recovery", "recovery_policy.bin")
PREDICTOR_BIN = os.path.join(ARTIFACTS, "predictor", "predictor.bin")
PREDICTOR_CV = os.path.join(ARTIFACTS, "predictor", "predictor_cv.csv")
FALLDATA = os.path.join(ARTIFACTS, "falldata", "falldata.csv")


@pytest.fixture(scope="session")
def biped():
    return dyn.default_biped()


@pytest.fixture(scope="session")
def clip(biped):
    return gait.default_clip(biped)


def make_pin_chain(n_links=2, torque_limit=0.0):
    """Frictionless pinned chain of uniform rods (no contact points)."""
    length = 0.5
    links = []
    joints = []
    for i in range(n_links):
        m = 1.0 + 0.5 * i
        links.append(dyn.LinkSpec(
            f"rod{i}", m, m * length**2 / 12.0, (0.0, -length / 2.0), length))
        if i == 0:
            joints.append(dyn.JointSpec(
                "root", "world", "rod0", "pin", (0.0, 1.5),
                torque_limit=torque_limit))
        else:
            joints.append(dyn.JointSpec(
                f"j{i}", f"rod{i-1}", f"rod{i}", "revolute", (0.0, -length),
                torque_limit=torque_limit))
    contact = dyn.ContactParams(stiffness=1e4, damping=10.0, friction=0.5)
    return dyn.ArticulatedModel(links, joints, contact, [])


def make_free_body():
    """Single floating rigid body, no gravity, no contact."""
    links = [dyn.LinkSpec("torso", 4.0, 0.3, (0.0, 0.1), 0.5)]
    joints = [dyn.JointSpec("base", "world", "torso", "floating")]
    contact = dyn.ContactParams(stiffness=1e4, damping=10.0, friction=0.5)
    return dyn.ArticulatedModel(links, joints, contact, [], gravity=(0.0, 0.0))


def walker_stack(need_recovery=False):
    """ControllerStack from the shipped artifacts (skips if absent)."""
    from fallsafe import cli, evalharness as evalh
    from fallsafe import predictor as pred

    for p in (WALKER_POLICY,) + ((RECOVERY_POLICY, PREDICTOR_BIN) if need_recovery else ()):
        if not os.path.exists(p):
            pytest.skip(f"shipped artifact {os.path.relpath(p, REPO)} not present")
    cfg = cli.load_config(CONFIG)
    walking = cli._load_walker(cfg, WALKER_POLICY)
    if not need_recovery:
        return evalh.ControllerStack(walking, human_cfg=cfg.human_env)
    svm = pred.load_model(PREDICTOR_BIN)
    recovery = cli._load_recovery(cfg, RECOVERY_POLICY)
    return evalh.ControllerStack(walking, svm, recovery, cfg.recovery_env,
                                 cfg.human_env)
