"""Flight-path plumbing: throttle mixing, rate PID, motor mixing, ZN tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import QUAD_X_SIGNS, AirframeModel, BodyState, DynamicsDiverged, step

log = logging.getLogger(__name__)

AXES = ("roll", "pitch", "yaw")


@dataclass(frozen=True)
class MixResult:
    t_hat: float | np.ndarray
    u: np.ndarray


def mix_throttle(y, throttle) -> MixResult:
    """Add collective throttle into the network outputs.

    The throttle is scaled by the headroom left above the largest output,
    so attitude tracking keeps priority; a saturated output gets none.
    ``y`` may be a batch of shape (n, 4) with ``throttle`` of shape (n,).
    """
    y = np.asarray(y, dtype=float)
    thr = np.asarray(throttle, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(y >= 0.0) and np.all(y <= 1.0)):
        raise ValueError(f"network outputs must lie in [0, 1], got {_short(y)}")
    if not (np.all(thr >= 0.0) and np.all(thr <= 1.0)):
        raise ValueError(f"throttle must lie in [0, 1], got {_short(thr)}")
    peak = y.max(axis=-1)
    t_hat = np.where(peak >= 1.0, 0.0, thr * (1.0 - peak))
    u = t_hat[..., None] + y
    if y.ndim == 1:
        return MixResult(float(t_hat), u)
    return MixResult(t_hat, u)


def _short(a: np.ndarray):
    return a.tolist() if a.size <= 8 else f"array of shape {a.shape}"


@dataclass(frozen=True)
class PidGains:
    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if np.any(self.ki < 0) or np.any(self.kd < 0):
            raise ValueError("ki and kd must be non-negative")

    @classmethod
    def from_axes(cls, roll, pitch, yaw) -> "PidGains":
        k = np.array([roll, pitch, yaw], dtype=float)
        return cls(k[:, 0], k[:, 1], k[:, 2])

    def axis(self, i: int) -> tuple[float, float, float]:
        return float(self.kp[i]), float(self.ki[i]), float(self.kd[i])

    def to_dict(self) -> dict:
        return {a: list(self.axis(i)) for i, a in enumerate(AXES)}

    @classmethod
    def from_dict(cls, d: dict) -> "PidGains":
        return cls.from_axes(*(d[a] for a in AXES))


# Gains hand-adjusted after a Ziegler-Nichols tune of the original airframe.
MANUAL_TUNE_GAINS = PidGains.from_axes(
    [0.032029, 0.0, 0.000396],
    [0.032029, 0.0, 0.000396],
    [0.032029, 0.0, 0.0],
)


@dataclass
class PidState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_measurement: np.ndarray | None = None


def pid_step(gains: PidGains, e, state: PidState, measurement, dt: float,
             i_limit: float = 0.3):
    """One rate-PID update, derivative taken on the measurement.

    ``i_limit`` bounds the integral term's contribution per axis (same units
    as the output). Returns ``(outputs, new_state)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.asarray(e, dtype=float)
    meas = np.asarray(measurement, dtype=float)
    integral = state.integral + e * dt
    bound = np.divide(i_limit, gains.ki, out=np.full(3, np.inf), where=gains.ki > 0)
    integral = np.clip(integral, -bound, bound)
    if state.prev_measurement is None:
        deriv = np.zeros(3)
    else:
        deriv = -(meas - state.prev_measurement) / dt
    out = gains.kp * e + gains.ki * integral + gains.kd * deriv
    return out, PidState(integral, meas.copy())


def pid_mix(outputs, throttle: float, signs=QUAD_X_SIGNS) -> np.ndarray:
    """Quad-X motor mix of per-axis outputs, clamped to [0, 1]."""
    signs = np.asarray(signs, dtype=float)
    return np.clip(throttle + signs @ np.asarray(outputs, dtype=float), 0.0, 1.0)


def zn_classic(k_u: float, t_u: float) -> tuple[float, float, float]:
    """Classic Ziegler-Nichols table for a parallel PID."""
    kp = 0.6 * k_u
    return kp, kp / (0.5 * t_u), kp * 0.125 * t_u


class NoOscillationFound(RuntimeError):
    pass


@dataclass(frozen=True)
class ZnResult:
    axis: int
    k_u: float
    t_u: float
    gains: tuple[float, float, float]
    ratio_at_k_u: float


def _p_only_response(model: AirframeModel, axis: int, kp: float, amplitude: float,
                     throttle: float, duration: float) -> np.ndarray:
    n = int(round(duration / model.dt))
    state = BodyState.at_rest()
    signs = model.signs
    sp = np.zeros(3)
    sp[axis] = amplitude
    trace = np.empty(n)
    gains = np.zeros(3)
    gains[axis] = kp
    for k in range(n):
        u = pid_mix(gains * (sp - state.omega_body), throttle, signs)
        try:
            state = step(state, u, model)
        except DynamicsDiverged:
            trace[k:] = np.nan
            break
        trace[k] = state.omega_body[axis]
    return trace - amplitude


def oscillation_stats(x: np.ndarray, dt: float, periods: int = 4):
    """Per-period amplitude ratio and mean period of a ringing signal.

    Uses successive positive peaks after the first one; returns ``(ratio,
    period)`` or ``(0.0, nan)`` when fewer than ``periods + 1`` peaks exist.
    """
    if not np.all(np.isfinite(x)):
        return np.inf, np.nan
    mid = x[1:-1]
    peaks = np.flatnonzero((mid > x[:-2]) & (mid >= x[2:]) & (mid > 0)) + 1
    # skip the first rise, it is shaped by the step itself
    peaks = peaks[1:]
    if peaks.size < periods + 1:
        return 0.0, np.nan
    p = peaks[: periods + 1]
    amp = x[p]
    if amp[0] <= 1e-9:
        return 0.0, np.nan
    ratio = float((amp[-1] / amp[0]) ** (1.0 / periods))
    period = float(np.mean(np.diff(p)) * dt)
    return ratio, period


def zn_tune(model: AirframeModel, axis: int, *, kp_min: float = 1e-4, kp_max: float = 1.0,
            steps_per_octave: int = 4, amplitude: float = 10.0, throttle: float = 0.5,
            duration: float = 1.5, periods: int = 4) -> ZnResult:
    """Find the ultimate gain of one axis under P-only control and apply ZN.

    The gain is swept geometrically until the ringing stops decaying, then the
    crossing of an amplitude ratio of one is located by log-linear
    interpolation between the bracketing gains and refined by bisection.
    """
    def ratio_at(kp):
        x = _p_only_response(model, axis, kp, amplitude, throttle, duration)
        return oscillation_stats(x, model.dt, periods)

    factor = 2.0 ** (1.0 / steps_per_octave)
    kp, prev = kp_min, None
    bracket = None
    while kp <= kp_max:
        r, _ = ratio_at(kp)
        if r >= 0.95 and prev is not None:
            bracket = (prev, kp)
            break
        prev = kp
        kp *= factor
    if bracket is None:
        raise NoOscillationFound(
            f"axis {AXES[axis]}: no sustained oscillation for kp in [{kp_min}, {kp_max}]"
        )
    lo, hi = bracket
    for _ in range(40):
        mid = float(np.sqrt(lo * hi))
        r, _ = ratio_at(mid)
        if r < 1.0:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-4:
            break
    k_u = float(np.sqrt(lo * hi))
    r, t_u = ratio_at(k_u)
    if not 0.95 <= r <= 1.05 or not np.isfinite(t_u):
        raise NoOscillationFound(
            f"axis {AXES[axis]}: oscillation at kp={k_u:.6g} not sustained (ratio {r:.3f})"
        )
    log.info("axis %s: K_u=%.6g T_u=%.4fs", AXES[axis], k_u, t_u)
    return ZnResult(axis, k_u, t_u, zn_classic(k_u, t_u), r)


def zn_tune_all(model: AirframeModel, **kw) -> tuple[PidGains, list[ZnResult]]:
    results = [zn_tune(model, a, **kw) for a in range(3)]
    return PidGains.from_axes(*(r.gains for r in results)), results
