"""Rotational dynamics of a quad-X airframe pinned at its center of mass.

Body rates are carried in deg/s (the unit every controller in this package
sees); rotor speeds in rad/s. The integrator is explicit Euler at a fixed
step, matching a 1 kHz simulator loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

N_ROTORS = 4

# Rotor order: rear-right, front-right, rear-left, front-left.
# Columns: roll, pitch, yaw. Each column sums to zero.
QUAD_X_SIGNS = np.array(
    [
        [-1.0, +1.0, -1.0],
        [-1.0, -1.0, +1.0],
        [+1.0, +1.0, +1.0],
        [+1.0, -1.0, -1.0],
    ]
)

_DEG = math.pi / 180.0


def rpm_to_rad_s(rpm: float) -> float:
    return rpm * 2.0 * math.pi / 60.0


class DynamicsDiverged(RuntimeError):
    """Raised when a body rate leaves the configured hard bound."""


@dataclass(frozen=True)
class AirframeModel:
    """Physical constants of the simulated airframe.

    ``k_thrust`` is chosen so that hover (0.432 kg) sits at a 50% command;
    all values other than ``omega_max`` and the rotor loop gains are
    placeholders and can be overridden from the config file.
    """

    inertia_diag: tuple[float, float, float] = (0.007, 0.007, 0.012)
    arm_length: float = 0.11
    k_thrust: float = 3.46e-7
    k_drag: float = 5.5e-9
    omega_max: float = rpm_to_rad_s(33422.0)
    rotor_kp: float = 0.01
    rotor_ki: float = 1.0
    rotor_inertia: float = 2.0e-4
    dt: float = 0.001
    rate_limit: float = 10000.0
    arm_geometry: tuple[tuple[float, float, float], ...] = field(
        default_factory=lambda: tuple(map(tuple, QUAD_X_SIGNS.tolist()))
    )

    def __post_init__(self):
        if len(self.inertia_diag) != 3 or min(self.inertia_diag) <= 0:
            raise ValueError("inertia_diag must hold three positive moments")
        if self.omega_max <= 0:
            raise ValueError("omega_max must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.rotor_inertia <= 0:
            raise ValueError("rotor_inertia must be positive")
        if np.shape(self.arm_geometry) != (N_ROTORS, 3):
            raise ValueError(f"arm_geometry must be {N_ROTORS}x3")

    @property
    def signs(self) -> np.ndarray:
        return np.asarray(self.arm_geometry, dtype=float)

    @property
    def inertia(self) -> np.ndarray:
        return np.asarray(self.inertia_diag, dtype=float)

    def to_dict(self) -> dict:
        return {
            "inertia_diag": list(self.inertia_diag),
            "arm_length": self.arm_length,
            "k_thrust": self.k_thrust,
            "k_drag": self.k_drag,
            "omega_max": self.omega_max,
            "rotor_kp": self.rotor_kp,
            "rotor_ki": self.rotor_ki,
            "rotor_inertia": self.rotor_inertia,
            "dt": self.dt,
            "rate_limit": self.rate_limit,
            "arm_geometry": [list(r) for r in self.arm_geometry],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AirframeModel":
        d = dict(d)
        if "inertia_diag" in d:
            d["inertia_diag"] = tuple(float(v) for v in d["inertia_diag"])
        if "arm_geometry" in d:
            d["arm_geometry"] = tuple(tuple(float(v) for v in r) for r in d["arm_geometry"])
        return cls(**d)


@dataclass(frozen=True)
class BodyState:
    omega_body: np.ndarray  # deg/s, roll/pitch/yaw
    rotor_speed: np.ndarray  # rad/s
    rotor_pid_integral: np.ndarray  # rad, integral of rotor speed error
    t: float = 0.0

    @classmethod
    def at_rest(cls, omega_body=None) -> "BodyState":
        w = np.zeros(3) if omega_body is None else np.asarray(omega_body, dtype=float).copy()
        return cls(w, np.zeros(N_ROTORS), np.zeros(N_ROTORS), 0.0)


def rotor_step(state: BodyState, u, model: AirframeModel) -> BodyState:
    """Advance every rotor one step toward ``u * omega_max`` under its PI loop.

    The loop output is a torque on the rotor inertia. Integration is frozen
    while a rotor sits on a speed limit and the error pushes further out.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (N_ROTORS,):
        raise ValueError(f"expected {N_ROTORS} actuator commands, got shape {u.shape}")
    bad = np.flatnonzero(~np.isfinite(u))
    if bad.size:
        raise ValueError(f"non-finite command for rotor {int(bad[0])}: {u[bad[0]]}")
    dt = model.dt
    target = np.clip(u, 0.0, 1.0) * model.omega_max
    err = target - state.rotor_speed
    integral = state.rotor_pid_integral + err * dt
    accel = (model.rotor_kp * err + model.rotor_ki * integral) / model.rotor_inertia
    speed = state.rotor_speed + accel * dt
    high = speed > model.omega_max
    low = speed < 0.0
    hold = (high & (err > 0)) | (low & (err < 0))
    integral = np.where(hold, state.rotor_pid_integral, integral)
    speed = np.clip(speed, 0.0, model.omega_max)
    return BodyState(state.omega_body, speed, integral, state.t)


def body_torque(state: BodyState, model: AirframeModel) -> np.ndarray:
    """Body torque in N*m from the current rotor speeds."""
    w2 = np.square(state.rotor_speed)
    s = model.signs
    return np.array(
        [
            model.k_thrust * model.arm_length * (s[:, 0] @ w2),
            model.k_thrust * model.arm_length * (s[:, 1] @ w2),
            model.k_drag * (s[:, 2] @ w2),
        ]
    )


def step(state: BodyState, u, model: AirframeModel) -> BodyState:
    """One fixed-step update: rotors first, then the rigid-body rates."""
    nxt = rotor_step(state, u, model)
    tau = body_torque(nxt, model)
    inertia = model.inertia
    w = nxt.omega_body * _DEG
    w_dot = (tau - np.cross(w, inertia * w)) / inertia
    omega = nxt.omega_body + (model.dt / _DEG) * w_dot
    if not np.all(np.isfinite(omega)) or np.max(np.abs(omega)) > model.rate_limit:
        raise DynamicsDiverged(
            f"dynamics blew up at t={nxt.t + model.dt:.4f}s: omega_body={omega.tolist()}"
        )
    return replace(nxt, omega_body=omega, t=state.t + model.dt)


def hover_command(model: AirframeModel, mass: float = 0.432, g: float = 9.81) -> float:
    """Command at which four rotors together lift ``mass``."""
    w = math.sqrt(mass * g / (N_ROTORS * model.k_thrust))
    return w / model.omega_max
