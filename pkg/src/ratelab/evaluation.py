"""Flight-log replay, tracking-error metrics, controller comparison, timing."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .control import PidGains, PidState, mix_throttle, pid_mix, pid_step
from .dynamics import QUAD_X_SIGNS, AirframeModel, BodyState, DynamicsDiverged, step
from .env import TaskScript, inject_gyro_noise
from .policy import PolicyParams, act_deterministic

METRICS = ("mae", "mse", "iae", "ise", "itae", "itse")
AXES = ("roll", "pitch", "yaw")
LOG_HEADER = ("t", "sp_r", "sp_p", "sp_y", "gy_r", "gy_p", "gy_y",
              "y0", "y1", "y2", "y3", "u0", "u1", "u2", "u3", "thr")


@dataclass(frozen=True)
class MetricsReport:
    per_axis: dict[str, dict[str, float]]
    average: dict[str, float]
    n: int

    def to_dict(self) -> dict:
        return {"n": self.n, "per_axis": self.per_axis, "average": self.average}

    def check_identities(self) -> bool:
        """IAE = n*MAE and ISE = n*MSE on every axis (uniform sampling)."""
        for m in self.per_axis.values():
            if not math.isclose(m["iae"], self.n * m["mae"], rel_tol=1e-12, abs_tol=1e-12):
                return False
            if not math.isclose(m["ise"], self.n * m["mse"], rel_tol=1e-12, abs_tol=1e-12):
                return False
        return True


def axis_metrics(e, t) -> dict[str, float]:
    e = np.asarray(e, dtype=float)
    t = np.asarray(t, dtype=float)
    if e.size == 0:
        raise ValueError("metrics need at least one sample")
    a = np.abs(e)
    s = e * e
    iae = float(a.sum())
    ise = float(s.sum())
    return {
        "mae": iae / e.size,
        "mse": ise / e.size,
        "iae": iae,
        "ise": ise,
        "itae": float(t @ a),
        "itse": float(t @ s),
    }


def compute_metrics(errors, timestamps) -> MetricsReport:
    """Six tracking metrics per axis; ``errors`` is (n, 3), time in seconds from log start.

    MAE and MSE are averaged, the integral forms are plain sums over samples
    (no dt factor), optionally weighted by time.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.ndim == 1:
        errors = errors[:, None]
    t = np.asarray(timestamps, dtype=float)
    if errors.shape[0] == 0:
        raise ValueError("metrics need at least one sample")
    t = t - t[0]
    names = AXES[: errors.shape[1]]
    per_axis = {a: axis_metrics(errors[:, i], t) for i, a in enumerate(names)}
    average = {m: float(np.mean([per_axis[a][m] for a in names])) for m in METRICS}
    return MetricsReport(per_axis, average, int(errors.shape[0]))


# ---------------------------------------------------------------- controllers


@dataclass
class NeuralController:
    """Deterministic network evaluation followed by throttle mixing."""

    params: PolicyParams
    label: str = "nn"
    kind = "nn"

    def reset(self):
        self._prev_error = np.zeros(3)

    def __call__(self, setpoint, measured, throttle, dt):
        e = setpoint - measured
        obs = np.concatenate([e, e - self._prev_error])
        self._prev_error = e
        y = act_deterministic(self.params, obs)
        return y, mix_throttle(y, throttle).u


@dataclass
class PidController:
    gains: PidGains
    i_limit: float = 0.3
    signs: np.ndarray | None = None
    label: str = "pid"
    kind = "pid"

    def reset(self):
        self._state = PidState()

    def __call__(self, setpoint, measured, throttle, dt):
        out, self._state = pid_step(self.gains, setpoint - measured, self._state, measured, dt,
                                    self.i_limit)
        signs = self.signs if self.signs is not None else QUAD_X_SIGNS
        return signs @ out, pid_mix(out, throttle, signs)


def as_controller(c):
    if isinstance(c, (NeuralController, PidController)):
        return c
    if isinstance(c, PolicyParams):
        return NeuralController(c)
    if isinstance(c, PidGains):
        return PidController(c)
    raise TypeError(f"cannot use {type(c).__name__} as a controller")


# ---------------------------------------------------------------- flight logs


@dataclass
class FlightLog:
    t: np.ndarray
    setpoint: np.ndarray
    gyro: np.ndarray
    y: np.ndarray
    u: np.ndarray
    throttle: np.ndarray
    status: str = "ok"

    def __len__(self):
        return len(self.t)

    @property
    def errors(self) -> np.ndarray:
        return self.setpoint - self.gyro

    def rows(self) -> np.ndarray:
        return np.column_stack([self.t, self.setpoint, self.gyro, self.y, self.u, self.throttle])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "FlightLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != LOG_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        if data.size == 0:
            data = np.zeros((0, len(LOG_HEADER)))
        return cls(data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7:11], data[:, 11:15],
                   data[:, 15])


@dataclass
class SetpointLog:
    """A setpoint stream to be replayed: times, rates (deg/s) and throttle."""

    t: np.ndarray
    setpoint: np.ndarray
    throttle: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.setpoint = np.asarray(self.setpoint, dtype=float).reshape(-1, 3)
        self.throttle = np.broadcast_to(np.asarray(self.throttle, dtype=float),
                                        self.t.shape).copy()
        if len(self.setpoint) != len(self.t):
            raise ValueError("setpoint and time arrays differ in length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("log timestamps must be strictly increasing")

    @classmethod
    def from_task(cls, task: TaskScript, dt: float, throttle: float = 0.0) -> "SetpointLog":
        sp = task.setpoints(dt)
        return cls(np.arange(len(sp)) * dt, sp, throttle)

    @classmethod
    def from_flight_log(cls, log: FlightLog) -> "SetpointLog":
        return cls(log.t, log.setpoint, log.throttle)


def replay(setpoints: SetpointLog, controller, airframe: AirframeModel | None = None,
           noise_sigma: float = 0.0, seed: int = 0):
    """Drive a fresh simulation with the logged setpoints.

    Step k reads the gyro at time t_k, computes outputs for setpoint k and
    applies them for one physics step. Metrics use e = setpoint - gyro.
    """
    airframe = airframe or AirframeModel()
    ctrl = as_controller(controller)
    ctrl.reset()
    rng = np.random.default_rng(seed)
    n = len(setpoints.t)
    state = BodyState.at_rest()
    gyro = np.empty((n, 3))
    ys = np.empty((n, 4))
    us = np.empty((n, 4))
    status = "ok"
    for k in range(n):
        measured = inject_gyro_noise(state.omega_body, noise_sigma, rng)
        y, u = ctrl(setpoints.setpoint[k], measured, float(setpoints.throttle[k]), airframe.dt)
        if np.shape(u) != (4,):
            raise ValueError(f"controller produced {np.shape(u)} outputs for a 4-rotor airframe")
        gyro[k] = measured
        ys[k] = y
        us[k] = u
        try:
            state = step(state, u, airframe)
        except DynamicsDiverged:
            status = "diverged"
            gyro, ys, us = gyro[: k + 1], ys[: k + 1], us[: k + 1]
            n = k + 1
            break
    flog = FlightLog(setpoints.t[:n].copy(), setpoints.setpoint[:n].copy(), gyro, ys, us,
                     setpoints.throttle[:n].copy(), status)
    return flog, compute_metrics(flog.errors, flog.t)


@dataclass
class Comparison:
    labels: tuple[str, str]
    reports: tuple[MetricsReport, MetricsReport]
    logs: tuple[FlightLog, FlightLog]

    def trace_rows(self):
        a, b = self.logs
        header = ["t", "sp_r", "sp_p", "sp_y"]
        for lab in self.labels:
            header += [f"{lab}_gy_r", f"{lab}_gy_p", f"{lab}_gy_y"]
            header += [f"{lab}_u{i}" for i in range(4)]
        n = min(len(a), len(b))
        body = np.column_stack([a.t[:n], a.setpoint[:n], a.gyro[:n], a.u[:n], b.gyro[:n],
                                b.u[:n]])
        return header, body

    def write_trace_csv(self, path):
        header, body = self.trace_rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in body:
                w.writerow([repr(float(v)) for v in row])


def compare(first, second, setpoints: SetpointLog, airframe: AirframeModel | None = None) -> Comparison:
    """Replay one network and one PID controller on the same stream, noise off.

    The two controllers must be of different kinds; order only decides labels.
    """
    a, b = as_controller(first), as_controller(second)
    if a.kind == b.kind:
        raise TypeError(f"compare needs one network and one PID controller, got two {a.kind}")
    la, ra = replay(setpoints, a, airframe)
    lb, rb = replay(setpoints, b, airframe)
    return Comparison((a.label, b.label), (ra, rb), (la, lb))


# ------------------------------------------------------------ scripted logs


def _ramp(t, t0, t1, peak):
    """Trapezoid: ramp up over 15% of the window, hold, ramp down."""
    out = np.zeros_like(t)
    w = t1 - t0
    r = 0.15 * w
    m = (t >= t0) & (t < t1)
    tt = t[m] - t0
    out[m] = peak * np.minimum(1.0, np.minimum(tt / r, (w - tt) / r))
    return out


def aerobatic_script(dt: float = 0.001, throttle: float = 0.3) -> SetpointLog:
    """Scripted 8 s sequence: roll, flip, Split-S, yaw spin and stick snaps.

    Built from trapezoidal stick inputs; rates chosen so each maneuver turns
    the airframe through about one or half a revolution.
    """
    t = np.arange(0.0, 8.0, dt)
    sp = np.zeros((len(t), 3))
    # roll: 360 deg at ~400 deg/s
    sp[:, 0] += _ramp(t, 0.5, 1.55, 400.0)
    # flip: 360 deg on pitch
    sp[:, 1] += _ramp(t, 2.0, 3.05, 400.0)
    # Split-S: half roll then half loop
    sp[:, 0] += _ramp(t, 3.5, 4.05, -380.0)
    sp[:, 1] += _ramp(t, 4.1, 4.75, -320.0)
    # yaw spin
    sp[:, 2] += _ramp(t, 5.2, 6.2, 250.0)
    # stick snaps on all axes
    sp[:, 0] += _ramp(t, 6.6, 6.9, 200.0) - _ramp(t, 7.1, 7.4, 200.0)
    sp[:, 1] += _ramp(t, 6.7, 7.0, -150.0)
    sp[:, 2] += _ramp(t, 6.8, 7.3, -100.0)
    return SetpointLog(t, sp, throttle)


# ------------------------------------------------------------------- timing


@dataclass(frozen=True)
class TimingReport:
    wcet: float  # microseconds
    bcet: float
    mean: float
    n_samples: int
    timer_resolution: float
    low_confidence: bool = False
    label: str = ""

    @property
    def variability_window(self) -> float:
        return (self.wcet - self.bcet) / self.wcet if self.wcet > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "wcet_us": self.wcet,
            "bcet_us": self.bcet,
            "mean_us": self.mean,
            "variability_window": self.variability_window,
            "n_samples": self.n_samples,
            "timer_resolution_us": self.timer_resolution,
            "low_confidence": self.low_confidence,
        }


def bench_inference(fn, n: int = 5000, input_dim: int = 6, warmup: int = 200, seed: int = 0,
                    input_range: float = 500.0, label: str = "") -> TimingReport:
    """Time ``fn(x)`` per call over ``n`` random inputs after a warm-up phase."""
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(-input_range, input_range, size=(n + warmup, input_dim))
    clock = time.perf_counter_ns
    for x in inputs[:warmup]:
        fn(x)
    samples = np.empty(n)
    for i, x in enumerate(inputs[warmup:]):
        t0 = clock()
        fn(x)
        samples[i] = clock() - t0
    resolution_us = time.get_clock_info("perf_counter").resolution * 1e6
    samples_us = samples / 1000.0
    bcet = float(samples_us.min())
    return TimingReport(
        wcet=float(samples_us.max()),
        bcet=bcet,
        mean=float(samples_us.mean()),
        n_samples=n,
        timer_resolution=resolution_us,
        low_confidence=resolution_us > 0.1 * bcet,
        label=label,
    )


def pid_callable(gains: PidGains, dt: float = 0.001):
    """Single-step PID evaluation with motor mixing, for timing."""
    state = [PidState()]

    def fn(x):
        out, state[0] = pid_step(gains, x[:3], state[0], x[3:6], dt)
        return pid_mix(out, 0.5)

    return fn
