"""Per-instance feature acquisition as an MDP, solved with Double DQN.

Each episode classifies one sample: the agent either queries a not-yet-seen
feature (uniform cost -lambda, default 0.01) or commits to a class
(reward 0 when right, -1 when wrong, and the episode ends). The observation
is concat(x * mask, mask) of width 2n over standardized features, so an
unqueried feature reads as the training mean while the mask bit
disambiguates true zeros. Re-querying is illegal, which bounds every
episode by n + 1 steps.

Training follows the standard recipe: epsilon-greedy rollouts over uniformly
drawn training rows, a uniform replay ring, Double-Q targets (online argmax,
target value), squared TD error minimized with RMSProp under a global
gradient-norm clip, and a soft target update after every optimization step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn

FEATURE_COST = 0.01  # lambda: uniform per-feature query cost

AGENT_FORMAT = "rehabkit-agent-v1"

# Published per-(exercise, component) network layouts, reused by the agent:
# (hidden widths, supervised learning rate).
PM_ARCHITECTURES = {
    ("E1", "rom"): ((32, 32, 32), 0.1),
    ("E1", "smoothness"): ((16,), 0.0001),
    ("E1", "compensation"): ((256, 256), 0.1),
    ("E2", "rom"): ((256,), 0.1),
    ("E2", "smoothness"): ((64, 64), 0.001),
    ("E2", "compensation"): ((128, 128), 0.1),
    ("E3", "rom"): ((256,), 0.1),
    ("E3", "smoothness"): ((64, 64), 0.001),
    ("E3", "compensation"): ((128, 128), 0.1),
}


@dataclass(frozen=True)
class AgentConfig:
    n_features: int
    hidden: tuple[int, ...] = (64, 64)
    feature_cost: float = FEATURE_COST
    soft_update: float = 0.1  # rho
    discount: float = 1.0  # gamma; episodes are short
    epsilon_start: float = 0.5
    epsilon_end: float = 0.05
    epsilon_step: float = 2e-3  # linear decrement per episode
    replay_capacity: int = 10_000
    batch_size: int = 64
    warmup: int = 500  # transitions stored before updates begin
    rms_lr: float = 0.001
    # anneal the step size once exploration has settled; resolves the small
    # query-vs-classify value margins that plain RMSProp noise washes out
    lr_decay_at: Optional[float] = 0.6  # fraction of episodes; None disables
    lr_decay_factor: float = 0.1
    clip_norm: float = 1.0
    episodes: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if not 0.0 < self.soft_update <= 1.0:
            raise ValueError("soft-update factor must be in (0, 1]")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay capacity must be >= batch size")

    @property
    def n_actions(self) -> int:
        return self.n_features + 2

    @property
    def obs_width(self) -> int:
        return 2 * self.n_features

    def mlp_spec(self) -> nn.MlpSpec:
        return nn.MlpSpec(
            input_width=self.obs_width,
            hidden=self.hidden,
            output_width=self.n_actions,
            head="identity",
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "hidden": list(self.hidden),
            "feature_cost": self.feature_cost,
            "soft_update": self.soft_update,
            "discount": self.discount,
            "epsilon_start": self.epsilon_start,
            "epsilon_end": self.epsilon_end,
            "epsilon_step": self.epsilon_step,
            "replay_capacity": self.replay_capacity,
            "batch_size": self.batch_size,
            "warmup": self.warmup,
            "rms_lr": self.rms_lr,
            "lr_decay_at": self.lr_decay_at,
            "lr_decay_factor": self.lr_decay_factor,
            "clip_norm": self.clip_norm,
            "episodes": self.episodes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentConfig":
        doc = dict(doc)
        doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)


# ---------------------------------------------------------------------------
# environment


@dataclass
class EnvState:
    x: np.ndarray  # (n,) standardized feature values
    y: int  # true binary label
    mask: np.ndarray  # (n,) 1.0 where queried
    acquired: list[int]  # query order
    terminal: bool = False

    @property
    def n(self) -> int:
        return self.x.shape[0]


def env_reset(x: np.ndarray, y: int, n_features: Optional[int] = None) -> EnvState:
    x = np.asarray(x, dtype=float)
    if n_features is not None and x.shape[0] != n_features:
        raise ValueError(f"sample length {x.shape[0]} != environment width {n_features}")
    return EnvState(x=x, y=int(y), mask=np.zeros(x.shape[0]), acquired=[])


def observation(state: EnvState) -> np.ndarray:
    return np.concatenate([state.x * state.mask, state.mask])


def legal_actions(mask: np.ndarray) -> np.ndarray:
    """(n+2,) legality: queries for unseen features plus both classify actions."""
    return np.concatenate([mask < 0.5, [True, True]])


def classify_action(label: int, n_features: int) -> int:
    return n_features + int(label)


def env_step(
    state: EnvState, action: int, feature_cost: float = FEATURE_COST
) -> tuple[EnvState, float, bool]:
    """Apply one action; rewards follow the uniform-cost ledger."""
    if state.terminal:
        raise ValueError("episode already terminated")
    n = state.n
    if not 0 <= action < n + 2:
        raise ValueError(f"action {action} out of range for {n} features")
    if action < n:
        if state.mask[action] >= 0.5:
            raise ValueError(f"feature {action} already queried")
        mask = state.mask.copy()
        mask[action] = 1.0
        next_state = EnvState(
            x=state.x, y=state.y, mask=mask, acquired=[*state.acquired, action]
        )
        return next_state, -feature_cost, False
    predicted = action - n
    reward = 0.0 if predicted == state.y else -1.0
    next_state = EnvState(
        x=state.x, y=state.y, mask=state.mask.copy(), acquired=list(state.acquired),
        terminal=True,
    )
    return next_state, reward, True


# ---------------------------------------------------------------------------
# replay


class ReplayRing:
    """Fixed-capacity transition store with uniform sampling."""

    def __init__(self, capacity: int, obs_width: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_width))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_width))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward, next_obs, done) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return (
            self.obs[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_obs[idx],
            self.done[idx],
        )


# ---------------------------------------------------------------------------
# policy and targets


def act(
    params: nn.MlpParams,
    obs: np.ndarray,
    epsilon: float,
    legal: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> int:
    """Epsilon-greedy over legal actions; greedy ties go to the lowest index."""
    if epsilon > 0.0:
        if rng is None:
            raise ValueError("exploration requires an RNG")
        if rng.random() < epsilon:
            return int(rng.choice(np.flatnonzero(legal)))
    q = nn.forward(params, obs)
    q = np.where(legal, q, -np.inf)
    return int(np.argmax(q))


def _legal_from_obs(next_obs: np.ndarray) -> np.ndarray:
    """(B, n+2) legality derived from the mask half of stored observations."""
    n = next_obs.shape[1] // 2
    mask = next_obs[:, n:]
    classify = np.ones((next_obs.shape[0], 2), dtype=bool)
    return np.concatenate([mask < 0.5, classify], axis=1)


def double_q_targets(
    batch: tuple,
    online: nn.MlpParams,
    target: nn.MlpParams,
    gamma: float,
) -> np.ndarray:
    """Double-Q targets: online net picks the action, target net prices it."""
    _, _, rewards, next_obs, done = batch
    if rewards.shape[0] == 0:
        raise ValueError("empty batch")
    targets = rewards.astype(float).copy()
    live = ~done
    if np.any(live):
        legal = _legal_from_obs(next_obs[live])
        q_online = nn.forward(online, next_obs[live])
        a_star = np.argmax(np.where(legal, q_online, -np.inf), axis=1)
        q_target = nn.forward(target, next_obs[live])
        targets[live] += gamma * q_target[np.arange(a_star.shape[0]), a_star]
    return targets


def soft_update(target: nn.MlpParams, online: nn.MlpParams, rho: float) -> nn.MlpParams:
    """theta' <- rho * theta + (1 - rho) * theta', elementwise, in place."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0, 1]")
    for t_arr, o_arr in zip(target.weights, online.weights):
        if t_arr.shape != o_arr.shape:
            raise ValueError("parameter shape mismatch")
        t_arr *= 1.0 - rho
        t_arr += rho * o_arr
    for t_arr, o_arr in zip(target.biases, online.biases):
        if t_arr.shape != o_arr.shape:
            raise ValueError("parameter shape mismatch")
        t_arr *= 1.0 - rho
        t_arr += rho * o_arr
    return target


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingCurve:
    """Per-episode returns and query counts plus windowed averages."""

    returns: list[float] = field(default_factory=list)
    queried: list[int] = field(default_factory=list)
    window: int = 100

    def record(self, episode_return: float, n_queried: int) -> None:
        self.returns.append(episode_return)
        self.queried.append(n_queried)

    def moving_averages(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(self.returns)
        q = np.asarray(self.queried, dtype=float)
        out_r = np.empty_like(r)
        out_q = np.empty_like(q)
        for i in range(r.shape[0]):
            lo = max(0, i - self.window + 1)
            out_r[i] = r[lo : i + 1].mean()
            out_q[i] = q[lo : i + 1].mean()
        return out_r, out_q

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        avg_r, avg_q = self.moving_averages()
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "avg_return", "avg_features"])
            for i in range(len(self.returns)):
                writer.writerow([i, f"{avg_r[i]:.6f}", f"{avg_q[i]:.6f}"])


@dataclass
class AcquisitionEpisode:
    """One greedy or exploratory rollout on a single sample."""

    sample_id: str
    queried: list[int]
    predicted: int
    rewards: list[float]
    episode_return: float
    greedy: bool

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "queried": self.queried,
            "predicted": self.predicted,
            "rewards": self.rewards,
            "return": self.episode_return,
            "greedy": self.greedy,
        }


class AgentDivergedError(RuntimeError):
    pass


def _run_episode(
    params: nn.MlpParams,
    x: np.ndarray,
    y: int,
    epsilon: float,
    config: AgentConfig,
    rng: Optional[np.random.Generator],
    replay: Optional[ReplayRing] = None,
    learner=None,
) -> AcquisitionEpisode:
    state = env_reset(x, y, config.n_features)
    rewards = []
    predicted = -1
    done = False
    while not done:
        obs = observation(state)
        action = act(params, obs, epsilon, legal_actions(state.mask), rng)
        state, reward, done = env_step(state, action, config.feature_cost)
        rewards.append(reward)
        if replay is not None:
            replay.push(obs, action, reward, observation(state), done)
            if learner is not None and len(replay) >= config.warmup:
                learner()
        if done:
            predicted = action - config.n_features
    return AcquisitionEpisode(
        sample_id="",
        queried=list(state.acquired),
        predicted=predicted,
        rewards=rewards,
        episode_return=float(sum(rewards)),
        greedy=epsilon == 0.0,
    )


def train_agent(
    x: np.ndarray, y: np.ndarray, config: AgentConfig
) -> tuple[nn.MlpParams, TrainingCurve]:
    """Train on standardized rows; returns online parameters and the curve."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    if x.ndim != 2 or x.shape[1] != config.n_features:
        raise ValueError("dataset width mismatches the configured feature count")
    rng = np.random.default_rng(config.seed)
    online = nn.init_params(config.mlp_spec())
    target = online.copy()
    rms = nn.RmsPropState(lr=config.rms_lr, clip_norm=config.clip_norm)
    replay = ReplayRing(config.replay_capacity, config.obs_width)
    curve = TrainingCurve()

    def learner():
        batch = replay.sample(config.batch_size, rng)
        targets = double_q_targets(batch, online, target, config.discount)
        obs_b, actions_b = batch[0], batch[1]
        q, cache = nn.forward_cached(online, obs_b)
        chosen = q[np.arange(q.shape[0]), actions_b]
        td = chosen - targets
        loss = float(np.mean(td * td))
        if not np.isfinite(loss):
            raise AgentDivergedError(
                f"non-finite TD loss after {rms.t} updates (|td| max "
                f"{np.max(np.abs(td[np.isfinite(td)])) if np.any(np.isfinite(td)) else 'nan'})"
            )
        d_out = np.zeros_like(q)
        d_out[np.arange(q.shape[0]), actions_b] = 2.0 * td / q.shape[0]
        grads = nn.backward(online, cache, d_out)
        nn.rms_step(rms, online, grads)
        soft_update(target, online, config.soft_update)

    decay_episode = (
        int(config.episodes * config.lr_decay_at) if config.lr_decay_at is not None else None
    )
    for episode in range(config.episodes):
        if decay_episode is not None and episode == decay_episode:
            rms.lr = config.rms_lr * config.lr_decay_factor
        epsilon = max(config.epsilon_end, config.epsilon_start - config.epsilon_step * episode)
        row = int(rng.integers(0, x.shape[0]))
        ep = _run_episode(
            online, x[row], int(y[row]), epsilon, config, rng, replay=replay, learner=learner
        )
        curve.record(ep.episode_return, len(ep.queried))
    return online, curve


def assess(
    params: nn.MlpParams,
    x: np.ndarray,
    config: AgentConfig,
    sample_id: str = "",
    y: Optional[int] = None,
) -> AcquisitionEpisode:
    """Greedy rollout. When the true label is unknown the reported rewards
    assume the prediction is correct (query costs only)."""
    truth = int(y) if y is not None else 0
    ep = _run_episode(params, x, truth, 0.0, config, rng=None)
    if y is None:
        # without ground truth, terminal reward is not observable
        ep.rewards[-1] = 0.0
        ep.episode_return = float(sum(ep.rewards))
    ep.sample_id = sample_id
    return ep


# ---------------------------------------------------------------------------
# persistence


def save_agent(path, online: nn.MlpParams, config: AgentConfig, metadata: Optional[dict] = None):
    doc = {
        "format": AGENT_FORMAT,
        "config": config.to_dict(),
        "online": nn.params_to_dict(online),
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_agent(path) -> tuple[nn.MlpParams, AgentConfig, dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != AGENT_FORMAT:
        raise ValueError(f"unexpected agent format {doc.get('format')!r}")
    return (
        nn.params_from_dict(doc["online"]),
        AgentConfig.from_dict(doc["config"]),
        doc.get("metadata", {}),
    )
