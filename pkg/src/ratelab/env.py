"""Angular-rate tracking environment: task scripts, observations, rewards."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import AirframeModel, BodyState, DynamicsDiverged, step

IDLE = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class EnvConfig:
    alpha: float = 300.0
    beta: float = 0.5
    delta_y_max: float = 100.0**2
    # outputs are compared on a 0..1000 scale so delta_y_max can bind
    output_scale: float = 1000.0
    error_band: float = 25.0
    setpoint_bound: float = 400.0
    command_duration_range: tuple[float, float] = (0.1, 1.0)
    idle_duration_range: tuple[float, float] = (0.2, 1.0)
    episode_time: float = 2.0
    gyro_noise_sigma: float = 5.0
    observation_mode: str = "error_delta"
    task_mode: str = "continuous"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.delta_y_max <= 0 or self.error_band <= 0:
            raise ValueError("delta_y_max and error_band must be positive")
        if self.episode_time <= 0:
            raise ValueError("episode_time must be positive")
        if self.gyro_noise_sigma < 0:
            raise ValueError("gyro_noise_sigma must be non-negative")
        if self.observation_mode not in ("error_delta", "error_motor"):
            raise ValueError(f"unknown observation_mode {self.observation_mode!r}")
        if self.task_mode not in ("continuous", "episodic"):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        for name in ("command_duration_range", "idle_duration_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")

    @property
    def obs_dim(self) -> int:
        return 6 if self.observation_mode == "error_delta" else 7

    def to_dict(self) -> dict:
        d = asdict(self)
        d["command_duration_range"] = list(self.command_duration_range)
        d["idle_duration_range"] = list(self.idle_duration_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        for name in ("command_duration_range", "idle_duration_range"):
            if name in d:
                d[name] = tuple(float(v) for v in d[name])
        return cls(**d)


@dataclass(frozen=True)
class TaskScript:
    segments: tuple[tuple[tuple[float, float, float], float], ...]
    seed: int | None = None

    @property
    def total_time(self) -> float:
        return float(sum(d for _, d in self.segments))

    def setpoints(self, dt: float) -> np.ndarray:
        """Per-step setpoint array; step k holds the target for time k*dt."""
        n = int(round(self.total_time / dt))
        ends = np.cumsum([d for _, d in self.segments])
        t = np.arange(n) * dt
        # small offset keeps boundary steps on the segment that starts there
        idx = np.searchsorted(ends, t + 1e-9 * dt, side="right")
        idx = np.minimum(idx, len(self.segments) - 1)
        sp = np.array([s for s, _ in self.segments], dtype=float)
        return sp[idx]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "segments": [{"setpoint": list(s), "duration": d} for s, d in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskScript":
        segs = tuple((tuple(float(v) for v in s["setpoint"]), float(s["duration"]))
                     for s in d["segments"])
        return cls(segs, d.get("seed"))


def sample_task(seed: int, config: EnvConfig) -> TaskScript:
    """Random command / idle alternation filling ``episode_time``."""
    rng = np.random.default_rng(seed)
    bound = config.setpoint_bound
    total = config.episode_time
    if config.task_mode == "episodic":
        sp = tuple(float(v) for v in rng.uniform(-bound, bound, 3))
        return TaskScript(((sp, total),), seed)
    segments = []
    elapsed = 0.0
    command = True
    while total - elapsed > 1e-12:
        if command:
            sp = tuple(float(v) for v in rng.uniform(-bound, bound, 3))
            dur = float(rng.uniform(*config.command_duration_range))
        else:
            sp = IDLE
            dur = float(rng.uniform(*config.idle_duration_range))
        dur = min(dur, total - elapsed)
        segments.append((sp, dur))
        elapsed += dur
        command = not command
    return TaskScript(tuple(segments), seed)


@dataclass(frozen=True)
class Observation:
    e: np.ndarray
    delta_e: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.e, self.delta_e])


def observe(prev_error, omega_star, omega_measured) -> Observation:
    e = np.asarray(omega_star, dtype=float) - np.asarray(omega_measured, dtype=float)
    return Observation(e, e - np.asarray(prev_error, dtype=float))


def inject_gyro_noise(omega_true, sigma: float, rng: np.random.Generator) -> np.ndarray:
    omega_true = np.asarray(omega_true, dtype=float)
    if sigma == 0:
        return omega_true.copy()
    return omega_true + rng.normal(0.0, sigma, size=omega_true.shape)


@dataclass(frozen=True)
class RewardBreakdown:
    r_e: float
    r_y: float
    r_delta: float

    @property
    def total(self) -> float:
        return self.r_e + self.r_y + self.r_delta


def reward_e(e) -> float:
    e = np.asarray(e, dtype=float)
    return -float(e @ e)


def reward_y(y, alpha: float) -> float:
    return alpha * (1.0 - float(np.mean(y)))


def reward_delta(y, y_prev, e, config: EnvConfig) -> float:
    """Smoothness reward, only paid while every axis is inside the error band."""
    if np.any(np.abs(np.asarray(e, dtype=float)) >= config.error_band):
        return 0.0
    dy = (np.asarray(y, dtype=float) - np.asarray(y_prev, dtype=float)) * config.output_scale
    return config.beta * float(np.sum(np.maximum(0.0, config.delta_y_max - dy * dy)))


def compute_reward(e, y, y_prev, config: EnvConfig) -> RewardBreakdown:
    return RewardBreakdown(reward_e(e), reward_y(y, config.alpha),
                           reward_delta(y, y_prev, e, config))


class EpisodeFinished(RuntimeError):
    pass


@dataclass
class RateEnv:
    """Rotation-only rate tracking task driven by per-rotor outputs in [0, 1].

    Actions go straight to the rotors; no collective throttle is mixed in.
    Rewards are computed on the true (noise-free) error.
    """

    config: EnvConfig = field(default_factory=EnvConfig)
    airframe: AirframeModel = field(default_factory=AirframeModel)

    def __post_init__(self):
        self.status = "unset"
        self.task: TaskScript | None = None

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def reset(self, seed: int | None = None, task: TaskScript | None = None,
              noise_seed: int | None = None, state: BodyState | None = None) -> np.ndarray:
        if task is None:
            if seed is None:
                raise ValueError("reset needs a seed or a task script")
            task = sample_task(seed, self.config)
        self.task = task
        self._setpoints = task.setpoints(self.airframe.dt)
        self._n = len(self._setpoints)
        if noise_seed is None:
            noise_seed = 0 if seed is None else seed
        self._rng = np.random.default_rng([noise_seed, 0x6E6F6973])
        self.state = BodyState.at_rest() if state is None else state
        self.k = 0
        self.y_prev = np.zeros(4)
        self.status = "running"
        # (observation, reward) under the previous setpoint when the last
        # step crossed into a new task segment, else None
        self.segment_end = None
        measured = inject_gyro_noise(self.state.omega_body, self.config.gyro_noise_sigma, self._rng)
        ob = observe(np.zeros(3), self._setpoints[0], measured)
        self.prev_error = ob.e
        self.measured = measured
        return self._vector(ob)

    def _vector(self, ob: Observation) -> np.ndarray:
        if self.config.observation_mode == "error_delta":
            return ob.vector
        return np.concatenate([ob.e, self.state.rotor_speed / self.airframe.omega_max])

    @property
    def setpoint(self) -> np.ndarray:
        return self._setpoints[min(self.k, self._n - 1)]

    def step(self, y):
        """Apply outputs ``y`` for one physics step.

        Returns ``(observation, RewardBreakdown, done)``; ``self.status`` is
        ``"time_limit"`` or ``"diverged"`` once done.
        """
        if self.status != "running":
            raise EpisodeFinished(f"episode already finished ({self.status}); call reset()")
        y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
        try:
            self.state = step(self.state, y, self.airframe)
        except DynamicsDiverged:
            # Charge the worst per-step error for every step left in the
            # episode; a one-off penalty would make crashing early cheaper
            # than flying on with large errors, since all r_e are negative.
            self.status = "diverged"
            self.segment_end = None
            bound = self.airframe.rate_limit
            remaining = self._n - self.k
            rew = RewardBreakdown(-3.0 * bound * bound * remaining, 0.0, 0.0)
            return self._vector(observe(self.prev_error, self.setpoint, self.measured)), rew, True
        old_target = self._setpoints[self.k]
        self.k += 1
        target = self._setpoints[min(self.k, self._n - 1)]
        measured = inject_gyro_noise(self.state.omega_body, self.config.gyro_noise_sigma, self._rng)
        ob = observe(self.prev_error, target, measured)
        rew = compute_reward(target - self.state.omega_body, y, self.y_prev, self.config)
        if self.k < self._n and np.any(target != old_target):
            # what this step would have looked like had the setpoint held
            self.segment_end = (
                self._vector(observe(self.prev_error, old_target, measured)),
                compute_reward(old_target - self.state.omega_body, y, self.y_prev, self.config),
            )
        else:
            self.segment_end = None
        self.prev_error = ob.e
        self.measured = measured
        self.y_prev = y
        done = self.k >= self._n
        if done:
            self.status = "time_limit"
        return self._vector(ob), rew, done
