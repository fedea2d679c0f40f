"""PPO with a clipped surrogate and GAE, plus the multi-seed training protocol."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import AirframeModel
from .env import EnvConfig, RateEnv
from .policy import (
    PolicyParams,
    ValueParams,
    checkpoint_dict,
    init_policy,
    gaussian_log_prob,
    init_value,
    mlp_backward,
    mlp_forward,
    sample_action,
    value,
    value_loss_grad,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    # decisions per rollout; each decision spans action_repeat simulator steps
    horizon: int = 256
    stepsize: float = 1e-3
    epochs: int = 10
    minibatch_size: int = 64
    gamma: float = 0.97
    lam: float = 0.9
    clip_epsilon: float = 0.2
    anneal: bool = True
    total_steps: int = 200_000
    n_seeds: int = 3
    entropy_coef: float = 0.0
    # quadratic penalty on action means outside the [0, 1] actuator range
    bound_coef: float = 0.0
    # stop advantage recursion at setpoint changes and bootstrap from the
    # value under the old setpoint (the change itself is not the agent's doing)
    segment_bootstrap: bool = True
    # the policy picks an action every action_repeat simulator steps
    action_repeat: int = 20
    # learner-side reward scale; reported episode rewards are unscaled
    reward_scale: float = 1e-5
    log_std_init: float = 0.0
    hidden: tuple[int, ...] = (32, 32)
    final_window: int = 10

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if not 0 < self.minibatch_size <= self.horizon:
            raise ValueError("minibatch_size must lie in (0, horizon]")
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(v) for v in d["hidden"])
        return cls(**d)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: float = 0.0
    truncated: np.ndarray | None = None
    bootstrap: np.ndarray | None = None
    env_steps: int = 0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0,
                truncated=None, bootstrap=None):
    """Advantages and returns; ``dones[t]`` marks that step t ended its episode.

    ``last_value`` bootstraps a rollout cut off mid-episode. Where
    ``truncated[t]`` is set, the recursion stops after step t and
    ``bootstrap[t]`` stands in for the value of the next state.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    n = len(rewards)
    cut = np.zeros(n) if truncated is None else np.asarray(truncated, dtype=float)
    boot = np.zeros(n) if bootstrap is None else np.asarray(bootstrap, dtype=float)
    adv = np.empty(n)
    next_v = last_value
    running = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        if cut[t]:
            delta = rewards[t] + gamma * boot[t] * live - values[t]
            running = delta
        else:
            delta = rewards[t] + gamma * next_v * live - values[t]
            running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 0 else 1.0)


class Adam:
    """Adaptive moment estimation over a list of arrays, updated in place."""

    def __init__(self, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, arrays, grads, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def surrogate_loss_grad(params: PolicyParams, obs, raw, logp_old, adv, clip_epsilon: float,
                        entropy_coef: float = 0.0, bound_coef: float = 0.0):
    """Clipped-surrogate loss ``-mean(min(r*A, clip(r)*A))`` and its gradient.

    With ``bound_coef`` > 0 the loss also carries
    ``bound_coef * mean(sum(relu(mu - 1)^2 + relu(-mu)^2))``. Actions are
    clipped to [0, 1] before they reach the rotors, so a mean that wanders
    outside that range gets no signal from the reward; this term pulls it
    back.
    """
    n = len(adv)
    mean, acts = mlp_forward(params.layers, params.obs_scale, obs)
    diff = np.asarray(raw) - mean
    inv_var = np.exp(-2.0 * params.log_std)
    logp = gaussian_log_prob(mean, params.log_std, raw)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    t1 = ratio * adv
    t2 = clipped * adv
    loss = -float(np.mean(np.minimum(t1, t2)))
    # the min picks the unclipped branch, or both branches coincide
    active = (t1 <= t2) | ((ratio >= 1.0 - clip_epsilon) & (ratio <= 1.0 + clip_epsilon))
    w = (-(ratio * adv * active) / n)[:, None]
    g_mean = w * diff * inv_var
    if bound_coef:
        over = np.maximum(mean - 1.0, 0.0)
        under = np.maximum(-mean, 0.0)
        loss += bound_coef * float(np.sum(over * over + under * under)) / n
        g_mean = g_mean + (2.0 * bound_coef / n) * (over - under)
    grads = mlp_backward(params.layers, acts, g_mean)
    grads.append(np.sum(w * (diff * diff * inv_var - 1.0), axis=0))
    if entropy_coef:
        ent = float(np.sum(params.log_std) + 0.5 * len(params.log_std) * (1.0 + math.log(2 * math.pi)))
        loss -= entropy_coef * ent
        grads[-1] = grads[-1] - entropy_coef
    info = {
        "approx_kl": float(np.mean(logp_old - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_epsilon)),
    }
    return loss, grads, info


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class Learner:
    params: PolicyParams
    vparams: ValueParams
    adam: Adam = None
    vadam: Adam = None

    def __post_init__(self):
        if self.adam is None:
            self.adam = Adam(self.params.arrays())
        if self.vadam is None:
            self.vadam = Adam(self.vparams.arrays())


def ppo_update(learner: Learner, batch: RolloutBatch, config: PpoConfig,
               rng: np.random.Generator, progress: float = 0.0) -> dict:
    """Run the configured epochs of minibatch updates on ``learner`` in place.

    ``progress`` in [0, 1] drives the linear annealing of step size and clip.
    """
    frac = max(0.0, 1.0 - progress) if config.anneal else 1.0
    lr = config.stepsize * frac
    eps = config.clip_epsilon * frac
    adv = normalize(batch.advantages)
    n = len(batch)
    stats = {"policy_loss": [], "value_loss": [], "approx_kl": [], "clip_frac": []}
    mb_index = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            loss, grads, info = surrogate_loss_grad(
                learner.params, batch.obs[idx], batch.raw_actions[idx],
                batch.log_probs[idx], adv[idx], max(eps, 1e-12), config.entropy_coef,
                config.bound_coef)
            vloss, vgrads = value_loss_grad(learner.vparams, batch.obs[idx], batch.returns[idx])
            if not (math.isfinite(loss) and math.isfinite(vloss)):
                raise NonFiniteLoss(f"non-finite loss in minibatch {mb_index}: "
                                    f"policy={loss} value={vloss}")
            learner.adam.step(learner.params.arrays(), grads, lr)
            learner.vadam.step(learner.vparams.arrays(), vgrads, lr)
            stats["policy_loss"].append(loss)
            stats["value_loss"].append(vloss)
            stats["approx_kl"].append(info["approx_kl"])
            stats["clip_frac"].append(info["clip_frac"])
            mb_index += 1
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out.update(stepsize=lr, clip_epsilon=eps, minibatches=mb_index)
    return out


@dataclass
class EpisodeRecord:
    episode: int
    cumulative_reward: float
    steps: int
    status: str


@dataclass
class TrainResult:
    seed: int
    params: PolicyParams
    vparams: ValueParams
    curve: list[EpisodeRecord]
    total_steps: int
    diagnostics: list[dict] = field(default_factory=list)

    def final_window_mean(self, window: int = 10) -> float:
        rewards = [r.cumulative_reward for r in self.curve]
        if not rewards:
            return -math.inf
        return float(np.mean(rewards[-window:]))

    def checkpoint(self, env_config: EnvConfig | None = None, metadata: dict | None = None) -> dict:
        meta = {"seed": self.seed, "training_steps": self.total_steps}
        if env_config is not None:
            meta["reward_config_hash"] = reward_config_hash(env_config)
        meta.update(metadata or {})
        return checkpoint_dict(self.params, self.vparams, meta)


def reward_config_hash(cfg: EnvConfig) -> str:
    keys = ("alpha", "beta", "delta_y_max", "output_scale", "error_band")
    blob = json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _collect(env: RateEnv, learner: Learner, config: PpoConfig, obs, rng, task_rng,
             episode_state: dict, curve: list[EpisodeRecord]):
    T = config.horizon
    obs_buf = np.empty((T, env.obs_dim))
    raw_buf = np.empty((T, learner.params.act_dim))
    lp_buf = np.empty(T)
    rew_buf = np.empty(T)
    done_buf = np.zeros(T)
    cut_buf = np.zeros(T)
    cut_obs = np.zeros((T, env.obs_dim))
    params = learner.params
    env_steps = 0
    for t in range(T):
        raw, clipped, lp = sample_action(params, obs, rng)
        obs_buf[t] = obs
        raw_buf[t] = raw
        lp_buf[t] = lp
        # one decision holds its action for up to action_repeat steps; it ends
        # early at the end of an episode or of a setpoint segment
        acc = 0.0
        for _ in range(config.action_repeat):
            obs, rew, done = env.step(clipped)
            env_steps += 1
            total = rew.total
            episode_state["reward"] += total
            episode_state["steps"] += 1
            if config.segment_bootstrap and env.segment_end is not None:
                cut_buf[t] = 1.0
                cut_obs[t] = env.segment_end[0]
                acc += env.segment_end[1].total
                break
            acc += total
            if done:
                break
        rew_buf[t] = acc * config.reward_scale
        if done:
            done_buf[t] = 1.0
            rec = EpisodeRecord(len(curve), episode_state["reward"], episode_state["steps"],
                                env.status)
            if env.status == "diverged":
                log.warning("episode %d diverged after %d steps; restarting", rec.episode,
                            rec.steps)
            curve.append(rec)
            episode_state.update(reward=0.0, steps=0)
            obs = env.reset(seed=int(task_rng.integers(2**31)))
    values = value(learner.vparams, obs_buf)
    last_value = float(value(learner.vparams, obs)) if not done_buf[-1] else 0.0
    boot = np.zeros(T)
    if cut_buf.any():
        idx = np.flatnonzero(cut_buf)
        boot[idx] = value(learner.vparams, cut_obs[idx])
    batch = RolloutBatch(obs_buf, raw_buf, lp_buf, rew_buf, values, done_buf, last_value,
                         cut_buf, boot, env_steps=env_steps)
    return batch, obs


def train(seed: int, env_config: EnvConfig | None = None, ppo_config: PpoConfig | None = None,
          airframe: AirframeModel | None = None, progress_cb=None) -> TrainResult:
    """Train one policy from ``seed``; single-threaded and bit-reproducible."""
    env_config = env_config or EnvConfig()
    ppo_config = ppo_config or PpoConfig()
    airframe = airframe or AirframeModel()
    ss = np.random.SeedSequence(seed)
    init_ss, act_ss, task_ss, mb_ss = ss.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    params = init_policy(init_rng, env_config.obs_dim, 4, ppo_config.hidden,
                         log_std=ppo_config.log_std_init)
    vparams = init_value(init_rng, env_config.obs_dim, ppo_config.hidden, params.obs_scale)
    learner = Learner(params, vparams)
    act_rng = np.random.default_rng(act_ss)
    task_rng = np.random.default_rng(task_ss)
    mb_rng = np.random.default_rng(mb_ss)

    env = RateEnv(env_config, airframe)
    obs = env.reset(seed=int(task_rng.integers(2**31)))
    curve: list[EpisodeRecord] = []
    diagnostics = []
    episode_state = {"reward": 0.0, "steps": 0}
    steps = 0
    while steps < ppo_config.total_steps:
        batch, obs = _collect(env, learner, ppo_config, obs, act_rng, task_rng,
                              episode_state, curve)
        steps += batch.env_steps
        batch.advantages, batch.returns = compute_gae(
            batch.rewards, batch.values, batch.dones, ppo_config.gamma, ppo_config.lam,
            batch.last_value, batch.truncated, batch.bootstrap)
        progress = (steps - batch.env_steps) / ppo_config.total_steps
        diag = ppo_update(learner, batch, ppo_config, mb_rng, progress)
        diag["steps"] = steps
        diag["episodes"] = len(curve)
        diagnostics.append(diag)
        if progress_cb is not None:
            progress_cb(diag, curve)
        log.debug("seed %d steps %d: %s", seed, steps, diag)
    return TrainResult(seed, learner.params, learner.vparams, curve, steps, diagnostics)


def select_best(runs: list[TrainResult], window: int = 10) -> TrainResult:
    """Run with the highest mean episode reward over its final window.

    Ties go to the lowest seed, so the choice does not depend on input order.
    """
    if not runs:
        raise ValueError("select_best needs at least one run")
    return max(runs, key=lambda r: (r.final_window_mean(window), -r.seed))


def learning_progress(curve: list[EpisodeRecord], fraction: float = 0.1) -> dict:
    """Relative improvement of the final window over the initial window."""
    rewards = np.array([r.cumulative_reward for r in curve])
    k = max(1, int(round(fraction * len(rewards))))
    first = float(rewards[:k].mean())
    last = float(rewards[-k:].mean())
    return {"initial": first, "final": last,
            "improvement": (last - first) / abs(first) if first else math.inf,
            "window": k}


def write_curve_csv(path, curve: list[EpisodeRecord]):
    with open(path, "w") as fh:
        fh.write("episode,cumulative_reward,steps\n")
        for r in curve:
            fh.write(f"{r.episode},{r.cumulative_reward!r},{r.steps}\n")
