"""Nominal plans for the shipped scenarios.

Plans are inputs to the tube pipeline, not the output of a planner. The PVTOL
plan is produced by flying a minimum-jerk position profile with a simple
geometric tracking law and recording the rotor thrusts. The recorded thrusts
become a held input signal, so replaying them with the RK4 integrator gives
back the same state trajectory.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .simulate import TrajectoryGrid, integrate_deterministic, time_grid
from .systems import InputSignal, SystemModel

# gains of the tracking law used to generate the plan (not the TVLQR feedback)
_KP, _KV = 6.0, 5.0
_K_PHI, _K_OMEGA = 100.0, 20.0


def min_jerk(p0, p1, s):
    """Position, velocity and acceleration of the quintic blend at phase ``s``.

    Derivatives are with respect to ``s``; divide by ``T`` and ``T**2`` for time.
    """
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    d = p1 - p0
    pos = p0 + d * (10 * s**3 - 15 * s**4 + 6 * s**5)
    vel = d * (30 * s**2 - 60 * s**3 + 30 * s**4)
    acc = d * (60 * s - 180 * s**2 + 120 * s**3)
    return pos, vel, acc


def pvtol_min_jerk_plan(model: SystemModel, start, goal, T: float, dt: float,
                        params: dict) -> tuple[SystemModel, TrajectoryGrid]:
    """Fly a rest-to-rest minimum-jerk move in the ``(p_x, p_z)`` plane.

    ``params`` holds the physical constants ``m``, ``J``, ``l`` and ``g`` that
    built ``model``. Returns the model wired with the recorded thrust signal
    and the RK4 trajectory it produces from the hover state at ``start``.
    """
    m, J, l, g = (float(params[k]) for k in ("m", "J", "l", "g"))
    start = np.asarray(start, dtype=float).reshape(2)
    goal = np.asarray(goal, dtype=float).reshape(2)
    times = time_grid(T, dt)
    x = np.zeros(6)
    x[:2] = start
    thrusts = np.empty((len(times), 2))
    for k, t in enumerate(times[:-1]):
        p_ref, v_ref, a_ref = min_jerk(start, goal, min(max(t / T, 0.0), 1.0))
        v_ref, a_ref = v_ref / T, a_ref / T**2
        phi, omega = x[2], x[5]
        c, s = np.cos(phi), np.sin(phi)
        v_world = np.array([x[3] * c - x[4] * s, x[3] * s + x[4] * c])
        a_des = a_ref + _KP * (p_ref - x[:2]) + _KV * (v_ref - v_world) + np.array([0.0, g])
        phi_des = np.arctan2(-a_des[0], a_des[1])
        force = m * (a_des @ np.array([-s, c]))
        torque = J * (_K_PHI * (phi_des - phi) - _K_OMEGA * omega)
        u = np.array([(force + torque / l) / 2, (force - torque / l) / 2])
        thrusts[k] = u

        def f(z, u=u, t=t):
            return model.drift(z, u, t)

        k1 = f(x)
        k2 = f(x + dt / 2 * k1)
        k3 = f(x + dt / 2 * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    thrusts[-1] = thrusts[-2]
    wired = replace(model, input=InputSignal(times, thrusts, "hold"))
    x0 = np.zeros(6)
    x0[:2] = start
    return wired, integrate_deterministic(wired, x0, T, dt)
