"""Bundled pendulum controller and Lyapunov function (see ``notebooks/build_pendulum_weights.py``)."""

from __future__ import annotations

from importlib import resources

from .box import IntervalBox
from .certificates import LyapunovFn, load_json
from .nnet.mlp import load_weights
from .systems import make_pendulum


def data_path(name: str):
    return resources.files("contractify") / "data" / name


def load_pendulum(controller=None, lyapunov=None, params=None):
    """``(system, V)`` from weight files; defaults to the bundled pair."""
    controller = controller or data_path("pendulum_controller.json")
    lyapunov = lyapunov or data_path("pendulum_lyapunov.json")
    obj = load_json(lyapunov)
    box = IntervalBox.from_json(obj["box"])
    sys = make_pendulum(params, load_weights(controller), box)
    return sys, LyapunovFn.from_json(obj)
