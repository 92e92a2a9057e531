"""Control-affine vehicle models ``x_dot = f(x) + g(x) u`` and an RK4 stepper.

States and inputs are flat numpy arrays; the index layout of each model is
given in its class docstring. Besides ``f`` and ``g`` every model exposes the
kinematics of its *body center* (the point the collision cone is built from):
position, velocity, and acceleration split as ``a0(x) + B(x) u``. The barrier
module forms Lie derivatives from those three pieces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from ._kernels import quadrotor_body
from .errors import NonFiniteState, SingularAttitude


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.remainder(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w) if np.ndim(w) else (np.pi if w == -np.pi else float(w))


@dataclass(frozen=True)
class UnicycleParams:
    l: float = 0.2

    def __post_init__(self):
        if not (np.isfinite(self.l) and self.l >= 0.0):
            raise ValueError("l must be finite and non-negative")


class Unicycle:
    """Acceleration-controlled unicycle.

    state ``[x_p, y_p, theta, v, omega]``, input ``[a, alpha]``. The body
    center sits ``l`` ahead of the drive axis along the heading.
    """

    name = "unicycle"
    state_dim = 5
    input_dim = 2
    space_dim = 2

    def __init__(self, params=None):
        self.params = params or UnicycleParams()

    def f(self, x):
        _, _, th, v, om = x
        return np.array([v * np.cos(th), v * np.sin(th), om, 0.0, 0.0])

    def g(self, x):
        G = np.zeros((5, 2))
        G[3, 0] = 1.0
        G[4, 1] = 1.0
        return G

    def dynamics(self, x, u):
        _, _, th, v, om = x
        a, al = u
        return np.array([v * np.cos(th), v * np.sin(th), om, a, al])

    def normalize(self, x):
        x = np.array(x, dtype=float)
        x[2] = wrap_angle(x[2])
        return x

    def position(self, x):
        return np.asarray(x[:2], dtype=float)

    def velocity(self, x):
        return np.array([x[3] * np.cos(x[2]), x[3] * np.sin(x[2])])

    def body_center(self, x):
        l = self.params.l
        return np.array([x[0] + l * np.cos(x[2]), x[1] + l * np.sin(x[2])])

    def body_velocity(self, x):
        l = self.params.l
        _, _, th, v, om = x
        c, s = np.cos(th), np.sin(th)
        return np.array([v * c - l * s * om, v * s + l * c * om])

    def body_kinematics(self, x):
        """``(center, velocity, a0, B)`` of the body center in one pass."""
        l = self.params.l
        xp, yp, th, v, om = x
        c, s = math.cos(th), math.sin(th)
        center = np.array([xp + l * c, yp + l * s])
        vel = np.array([v * c - l * s * om, v * s + l * c * om])
        a0 = np.array([-v * s * om - l * c * om * om, v * c * om - l * s * om * om])
        B = np.array([[c, -l * s], [s, l * c]])
        return center, vel, a0, B

    def body_acceleration(self, x):
        """``(a0, B)`` with body-center acceleration ``a0 + B @ u``."""
        l = self.params.l
        _, _, th, v, om = x
        c, s = np.cos(th), np.sin(th)
        a0 = np.array([-v * s * om - l * c * om * om, v * c * om - l * s * om * om])
        B = np.array([[c, -l * s], [s, l * c]])
        return a0, B


class PointMass:
    """Planar double integrator: state ``[x_p, y_p, v_x, v_y]``, input ``[a_x, a_y]``."""

    name = "pointmass"
    state_dim = 4
    input_dim = 2
    space_dim = 2

    def __init__(self, params=None):
        self.params = params

    def f(self, x):
        return np.array([x[2], x[3], 0.0, 0.0])

    def g(self, x):
        return np.vstack([np.zeros((2, 2)), np.eye(2)])

    def dynamics(self, x, u):
        return np.array([x[2], x[3], u[0], u[1]])

    def normalize(self, x):
        return np.array(x, dtype=float)

    def position(self, x):
        return np.asarray(x[:2], dtype=float)

    def velocity(self, x):
        return np.asarray(x[2:4], dtype=float)

    body_center = position
    body_velocity = velocity

    def body_acceleration(self, x):
        return np.zeros(2), np.eye(2)

    def body_kinematics(self, x):
        return np.array(x[:2], dtype=float), np.array(x[2:4], dtype=float), np.zeros(2), np.eye(2)


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 1.0
    inertia: tuple = (0.01, 0.01, 0.02)
    arm_length: float = 0.2
    c_tau: float = 0.01
    l: float = 0.1
    gravity: float = 9.81
    pitch_margin: float = 1e-3
    _I: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        I = np.asarray(self.inertia, dtype=float)
        if I.shape == (3, 3):
            if np.any(I != np.diag(np.diag(I))):
                raise ValueError("inertia must be diagonal")
            I = np.diag(I)
        if I.shape != (3,) or np.any(I <= 0):
            raise ValueError("inertia must have three positive diagonal entries")
        if self.mass <= 0 or self.arm_length <= 0 or self.c_tau <= 0:
            raise ValueError("mass, arm_length and c_tau must be positive")
        object.__setattr__(self, "inertia", tuple(float(v) for v in I))
        object.__setattr__(self, "_I", I)

    @property
    def I(self):
        return self._I


def rotation_zyx(phi, theta, psi):
    """Body-to-inertial rotation ``Rz(psi) @ Ry(theta) @ Rx(phi)``."""
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array([
        [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
        [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
        [-st, ct * sf, ct * cf],
    ])


def euler_rate_matrix(phi, theta):
    """``W`` with body rates ``omega = W @ [phi_dot, theta_dot, psi_dot]`` (ZYX)."""
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, -st], [0.0, cf, sf * ct], [0.0, -sf, cf * ct]])


def euler_rate_matrix_inv(phi, theta, margin=1e-3):
    if abs(np.cos(theta)) < np.sin(margin):
        raise SingularAttitude(f"pitch {theta:.6f} rad is within {margin} of +-pi/2")
    cf, sf = np.cos(phi), np.sin(phi)
    ct, tt = np.cos(theta), np.tan(theta)
    return np.array([[1.0, sf * tt, cf * tt], [0.0, cf, -sf], [0.0, sf / ct, cf / ct]])


# (omega x (l e3)) = l * S @ omega
_S = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


class Quadrotor:
    """Quadrotor with thrust inputs.

    state ``[x, y, z, vx, vy, vz, roll, pitch, yaw, w1, w2, w3]`` (body rates),
    input ``[f1, f2, f3, f4]``. Torques are ``L * M @ f`` with the mixing
    ``M = [[1, 0, -1, 0], [0, 1, 0, -1], [c, -c, c, -c]]``. The body center is
    ``l`` along the body z axis from the base point ``(x, y, z)``.
    """

    name = "quadrotor"
    state_dim = 12
    input_dim = 4
    space_dim = 3

    def __init__(self, params=None):
        self.params = params or QuadrotorParams()
        p = self.params
        c = p.c_tau
        self.mixing = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0], [c, -c, c, -c]])
        self.torque_map = (p.arm_length * self.mixing) / p.I[:, None]  # I^-1 L M

    def _check_pitch(self, x):
        if abs(np.cos(x[7])) < np.sin(self.params.pitch_margin):
            raise SingularAttitude(f"pitch {x[7]:.6f} rad too close to +-pi/2")

    def angular_drift(self, x):
        I = self.params.I
        w = x[9:12]
        return -np.cross(w, I * w) / I

    def f(self, x):
        self._check_pitch(x)
        p = self.params
        out = np.empty(12)
        out[0:3] = x[3:6]
        out[3:6] = (0.0, 0.0, -p.gravity)
        out[6:9] = euler_rate_matrix_inv(x[6], x[7], p.pitch_margin) @ x[9:12]
        out[9:12] = self.angular_drift(x)
        return out

    def g(self, x):
        p = self.params
        R = rotation_zyx(*x[6:9])
        G = np.zeros((12, 4))
        G[3:6, :] = np.outer(R[:, 2] / p.mass, np.ones(4))
        G[9:12, :] = self.torque_map
        return G

    def dynamics(self, x, u):
        return self.f(x) + self.g(x) @ np.asarray(u, dtype=float)

    def normalize(self, x):
        return np.array(x, dtype=float)

    def position(self, x):
        return np.asarray(x[0:3], dtype=float)

    def velocity(self, x):
        return np.asarray(x[3:6], dtype=float)

    def body_center(self, x):
        R = rotation_zyx(*x[6:9])
        return x[0:3] + self.params.l * R[:, 2]

    def body_velocity(self, x):
        R = rotation_zyx(*x[6:9])
        return x[3:6] + self.params.l * (R @ (_S @ x[9:12]))

    def body_acceleration(self, x):
        """``(a0, B)`` with body-center acceleration ``a0 + B @ u``."""
        p = self.params
        R = rotation_zyx(*x[6:9])
        w = x[9:12]
        le3 = np.array([0.0, 0.0, p.l])
        wdot0 = self.angular_drift(x)
        a0 = np.array([0.0, 0.0, -p.gravity]) + R @ (np.cross(w, np.cross(w, le3)) + p.l * (_S @ wdot0))
        B = np.outer(R[:, 2] / p.mass, np.ones(4)) + p.l * (R @ (_S @ self.torque_map))
        return a0, B

    def body_kinematics(self, x):
        """``(center, velocity, a0, B)`` of the body center (compiled)."""
        p = self.params
        return quadrotor_body(np.asarray(x, dtype=float), p.l, p.I, self.torque_map, p.mass, p.gravity)

    def hover_thrust(self):
        return np.full(4, self.params.mass * self.params.gravity / 4.0)


MODELS = {"unicycle": Unicycle, "pointmass": PointMass, "quadrotor": Quadrotor}


def drift_f(model, x):
    return model.f(np.asarray(x, dtype=float))


def input_matrix_g(model, x):
    return model.g(np.asarray(x, dtype=float))


def step_rk4(model, x, u, dt):
    """One classical RK4 step of ``x_dot = f(x) + g(x) u`` with ``u`` held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    # overflow surfaces as NonFiniteState below
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = model.dynamics(x, u)
        k2 = model.dynamics(x + 0.5 * dt * k1, u)
        k3 = model.dynamics(x + 0.5 * dt * k2, u)
        k4 = model.dynamics(x + dt * k3, u)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("integration produced a non-finite state")
    return model.normalize(out)
