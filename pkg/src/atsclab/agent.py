"""Q-learning agents: tabular update, numpy DQN with replay and target network."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_ACTIONS = 7
STATE_DIM = 2
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MdpStep:
    state: tuple[float, ...]
    action: int
    reward: float
    next_state: tuple[float, ...]


def reward(state: Sequence[float]) -> float:
    """Negative sum of per-phase stopped-vehicle averages."""
    return -math.fsum(state)


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    total, scale = 0.0, 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


def q_update(table: np.ndarray, s: int, a: int, r: float, s_next: int,
             alpha: float, gamma: float) -> np.ndarray:
    """In-place tabular Q-learning update of entry (s, a)."""
    target = r + gamma * table[s_next].max()
    table[s, a] += alpha * (target - table[s, a])
    return table


# -- network ---------------------------------------------------------------
def init_params(sizes: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """He-uniform weights, zero biases; returned as [W1, b1, W2, b2, ...]."""
    params = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def forward(params: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Q-values for a batch of states plus the activations needed by ``backward``."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    acts = [h]
    n_layers = len(params) // 2
    for k in range(n_layers):
        z = h @ params[2 * k] + params[2 * k + 1]
        h = np.maximum(z, 0.0) if k < n_layers - 1 else z
        acts.append(h)
    return h, acts


def q_values(params: Sequence[np.ndarray], x) -> np.ndarray:
    return forward(params, x)[0]


def backward(params: Sequence[np.ndarray], acts: list[np.ndarray],
             grad_out: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = [np.empty(0)] * len(params)
    g = grad_out
    n_layers = len(params) // 2
    for k in reversed(range(n_layers)):
        h_in = acts[k]
        grads[2 * k] = h_in.T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0:
            g = (g @ params[2 * k].T) * (acts[k] > 0)
    return grads


def dqn_loss_and_gradient(batch: dict[str, np.ndarray] | Sequence[MdpStep],
                          params: Sequence[np.ndarray], target_params: Sequence[np.ndarray],
                          gamma: float = 0.95) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD error against the frozen target network.

    The bootstrap term is a constant: gradients flow only through Q(s, a; params).
    """
    if len(params) != len(target_params) or any(
            p.shape != t.shape for p, t in zip(params, target_params)):
        raise ValueError("behaviour and target networks differ in shape")
    b = batch if isinstance(batch, dict) else stack_batch(batch)
    s, a, r, s2 = b["s"], b["a"], b["r"], b["s2"]
    n = len(a)
    if n == 0:
        raise ValueError("empty batch")
    if s.shape[1] != params[0].shape[0] or s2.shape[1] != params[0].shape[0]:
        raise ValueError(f"state dimension {s.shape[1]} does not match network input {params[0].shape[0]}")
    q, acts = forward(params, s)
    target = r + gamma * q_values(target_params, s2).max(axis=1)
    resid = target - q[np.arange(n), a]
    loss = float(np.mean(resid ** 2))
    g_out = np.zeros_like(q)
    g_out[np.arange(n), a] = -2.0 * resid / n
    return loss, backward(params, acts, g_out)


def stack_batch(steps: Sequence[MdpStep]) -> dict[str, np.ndarray]:
    return {
        "s": np.array([st.state for st in steps], dtype=float),
        "a": np.array([st.action for st in steps], dtype=np.int64),
        "r": np.array([st.reward for st in steps], dtype=float),
        "s2": np.array([st.next_state for st in steps], dtype=float),
    }


def select_action(params: Sequence[np.ndarray], state, epsilon: float,
                  rng: np.random.Generator, n_actions: int = N_ACTIONS) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(n_actions))
    return int(np.argmax(q_values(params, state)[0]))


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReplayBuffer:
    def __init__(self, capacity: int, state_dim: int = STATE_DIM):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, step: MdpStep) -> None:
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i] = step.state, step.action, step.reward, step.next_state
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.integers(0, self.size, size=batch_size)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s2": self.s2[idx]}


@dataclass
class DQNConfig:
    hidden: tuple[int, ...] = (32, 32)
    gamma: float = 0.95
    lr: float = 1e-3
    buffer_capacity: int = 10_000
    batch_size: int = 32
    warmup: int = 100
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_frac: float = 0.6
    updates_per_step: int = 1
    reward_scale: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "DQNConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def epsilon(self, cycle: int, total_cycles: int) -> float:
        horizon = max(1.0, self.eps_anneal_frac * total_cycles)
        frac = min(1.0, cycle / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class DQNAgent:
    """One independent learner per intersection."""

    def __init__(self, config: DQNConfig | None = None, seed: int = 0,
                 state_dim: int = STATE_DIM, n_actions: int = N_ACTIONS):
        self.config = config or DQNConfig()
        self.sizes = (state_dim, *self.config.hidden, n_actions)
        self.rng = np.random.default_rng(seed)
        self.params = init_params(self.sizes, self.rng)
        self.target = [p.copy() for p in self.params]
        self.opt = Adam(self.params, lr=self.config.lr)
        self.buffer = ReplayBuffer(self.config.buffer_capacity, state_dim)
        self.steps = 0
        self.updates = 0
        self.last_loss: float | None = None

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    def act(self, state, epsilon: float = 0.0) -> int:
        return select_action(self.params, state, epsilon, self.rng, self.n_actions)

    def q(self, state) -> np.ndarray:
        return q_values(self.params, state)[0]

    def train_step(self, step: MdpStep) -> float | None:
        cfg = self.config
        if cfg.reward_scale != 1.0:
            step = MdpStep(step.state, step.action, step.reward * cfg.reward_scale, step.next_state)
        self.buffer.push(step)
        self.steps += 1
        loss = None
        if len(self.buffer) >= cfg.warmup:
            for _ in range(cfg.updates_per_step):
                batch = self.buffer.sample(cfg.batch_size, self.rng)
                loss, grads = dqn_loss_and_gradient(batch, self.params, self.target, cfg.gamma)
                self.opt.step(self.params, grads)
                self.updates += 1
            self.last_loss = loss
        if self.steps % cfg.target_sync == 0:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        self.target = [p.copy() for p in self.params]

    # -- persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "params": [p.tolist() for p in self.params],
            "config": self.config.to_dict(),
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> "DQNAgent":
        sizes = tuple(d["sizes"])
        cfg = DQNConfig.from_dict(d.get("config", {}))
        agent = cls(cfg, seed=seed, state_dim=sizes[0], n_actions=sizes[-1])
        if agent.sizes != sizes:
            raise ValueError(f"checkpoint architecture {sizes} does not match config hidden {cfg.hidden}")
        agent.params = [np.asarray(p, dtype=float).reshape(q.shape)
                        for p, q in zip(d["params"], agent.params)]
        agent.target = [p.copy() for p in agent.params]
        agent.steps = int(d.get("steps", 0))
        return agent


class CheckpointError(FileNotFoundError):
    pass


def save_checkpoint(path: str | Path, agents: dict[str, DQNAgent], metadata: dict) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": "dqn",
        "metadata": metadata,
        "agents": {node: agents[node].to_dict() for node in sorted(agents)},
    }
    # repr round-trips float64 exactly, so reloads are bit-identical
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, DQNAgent], dict]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint {str(p)!r} not found")
    doc = json.loads(p.read_text())
    if doc.get("version") != CHECKPOINT_VERSION or doc.get("kind") != "dqn":
        raise ValueError(f"unsupported checkpoint format in {str(p)!r}")
    agents = {node: DQNAgent.from_dict(d) for node, d in doc["agents"].items()}
    return agents, doc.get("metadata", {})
