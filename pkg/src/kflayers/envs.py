"""Best Arm Identification: decide the sign of a noisy arm's mean.

Each episode draws latent ``mu ~ U(mu_range)`` and ``sigma ~ U(sigma_range)``.
The agent sees one draw from ``N(mu, sigma)`` at reset and may REQUEST more
draws (cost ``rho`` each) or DECIDE_ABOVE / DECIDE_BELOW, which ends the
episode with ``win_reward`` or ``lose_reward``.  Hitting ``max_steps`` requests
ends the episode with ``lose_reward``.  ``mu == 0`` counts as not above.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .kalman import bayes_oracle_iid

REQUEST, DECIDE_ABOVE, DECIDE_BELOW = 0, 1, 2
N_ACTIONS = 3
VAR_FLOOR = 1e-3


@dataclass
class BestArmConfig:
    rho: float = 0.0
    win_reward: float = 10.0
    lose_reward: float = -10.0
    max_steps: int = 1000
    mu_range: tuple[float, float] = (-0.5, 0.5)
    sigma_range: tuple[float, float] = (0.0, 2.0)
    ood_sigma_range: tuple[float, float] = (2.0, 3.0)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")
        if self.sigma_range[0] < 0 or self.ood_sigma_range[0] < 0:
            raise ContractError("sigma ranges must be non-negative")
        if self.rho < 0:
            raise ContractError("cost rho must be non-negative")

    def sigma_range_for(self, split: str) -> tuple[float, float]:
        if split == "train":
            return self.sigma_range
        if split == "ood":
            return self.ood_sigma_range
        raise ContractError(f"unknown split {split!r}")

    def return_bounds(self) -> tuple[float, float]:
        return self.lose_reward - self.max_steps * self.rho, self.win_reward


@dataclass
class EpisodeState:
    mu_b: float
    sigma_b: float
    rng: np.random.Generator
    t: int = 0
    observations: list[float] = field(default_factory=list)
    done: bool = False
    won: bool = False


def obs_dim(obs_mode: str) -> int:
    return {"raw": 1, "oracle": 2}[obs_mode]


def oracle_observation(observations) -> tuple[float, float]:
    """Posterior mean and std of ``mu`` under prior N(0, 1) with a plug-in noise variance.

    The noise variance is the unbiased sample variance of the draws so far,
    floored at 1e-3 (a single draw uses the floor).
    """
    obs = np.asarray(observations, dtype=np.float64)
    if obs.size == 0:
        raise ContractError("oracle observation needs at least one draw")
    noise_var = max(float(obs.var(ddof=1)), VAR_FLOOR) if obs.size > 1 else VAR_FLOOR
    mean, var = bayes_oracle_iid(obs, 0.0, 1.0, noise_var)
    return mean, float(np.sqrt(var))


def _emit(state: EpisodeState, obs_mode: str) -> np.ndarray:
    draw = state.rng.normal(state.mu_b, state.sigma_b) if state.sigma_b > 0 else state.mu_b
    state.observations.append(float(draw))
    if obs_mode == "oracle":
        return np.array(oracle_observation(state.observations))
    return np.array([draw])


def reset(config: BestArmConfig, rng: np.random.Generator, split: str = "train",
          obs_mode: str = "raw", latents: tuple[float, float] | None = None):
    """Start an episode; returns ``(obs, state)``.  ``latents`` forces ``(mu, sigma)``."""
    if latents is None:
        mu = float(rng.uniform(*config.mu_range))
        sigma = float(rng.uniform(*config.sigma_range_for(split)))
    else:
        mu, sigma = (float(v) for v in latents)
    state = EpisodeState(mu, sigma, rng)
    return _emit(state, obs_mode), state


def step(config: BestArmConfig, state: EpisodeState, action: int, obs_mode: str = "raw"):
    """Apply ``action``; returns ``(obs, reward, done)``."""
    if state.done:
        raise ContractError("step() called on a finished episode")
    if action == REQUEST:
        state.t += 1
        obs = _emit(state, obs_mode)
        reward = -config.rho
        if state.t >= config.max_steps:
            state.done = True
            reward += config.lose_reward
        return obs, reward, state.done
    if action not in (DECIDE_ABOVE, DECIDE_BELOW):
        raise ContractError(f"invalid action {action!r}")
    state.t += 1
    state.done = True
    above = state.mu_b > 0
    state.won = above == (action == DECIDE_ABOVE)
    reward = config.win_reward if state.won else config.lose_reward
    return np.zeros(obs_dim(obs_mode)), reward, True


class BestArmEnv:
    """Stateful wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: BestArmConfig | None = None, obs_mode: str = "raw",
                 split: str = "train", seed=None):
        self.config = config or BestArmConfig()
        self.obs_mode = obs_mode
        self.split = split
        self.rng = np.random.default_rng(seed)
        self.state: EpisodeState | None = None

    def reset(self, latents=None) -> np.ndarray:
        obs, self.state = reset(self.config, self.rng, self.split, self.obs_mode, latents)
        return obs

    def step(self, action: int):
        return step(self.config, self.state, int(action), self.obs_mode)


class BestArmVecEnv:
    """Many independent episodes advanced in lock-step (used for evaluation)."""

    def __init__(self, config: BestArmConfig, mu: np.ndarray, sigma: np.ndarray,
                 rng: np.random.Generator, obs_mode: str = "raw"):
        self.config = config
        self.obs_mode = obs_mode
        self.rng = rng
        self.mu = np.asarray(mu, np.float64)
        self.sigma = np.asarray(sigma, np.float64)
        n = self.mu.shape[0]
        self.t = np.zeros(n, np.int64)
        self.done = np.zeros(n, bool)
        self.won = np.zeros(n, bool)
        self.ret = np.zeros(n)
        self.count = np.zeros(n)
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def _draw(self, idx: np.ndarray) -> np.ndarray:
        x = self.mu[idx] + self.sigma[idx] * self.rng.standard_normal(idx.size)
        # Welford running moments for the oracle observation
        self.count[idx] += 1
        delta = x - self.mean[idx]
        self.mean[idx] += delta / self.count[idx]
        self.m2[idx] += delta * (x - self.mean[idx])
        return x

    def _obs(self, idx: np.ndarray, draws: np.ndarray) -> np.ndarray:
        if self.obs_mode == "raw":
            return draws[:, None]
        n = self.count[idx]
        var = np.where(n > 1, self.m2[idx] / np.maximum(n - 1, 1), VAR_FLOOR)
        var = np.maximum(var, VAR_FLOOR)
        prec = 1.0 + n / var
        post_var = 1.0 / prec
        post_mean = post_var * (n * self.mean[idx] / var)
        return np.stack([post_mean, np.sqrt(post_var)], axis=1)

    def reset(self) -> np.ndarray:
        idx = np.arange(self.n)
        return self._obs(idx, self._draw(idx))

    def step(self, idx: np.ndarray, actions: np.ndarray):
        """Advance episodes ``idx`` (all must be running); returns ``(obs, reward, done)``."""
        if np.any(self.done[idx]):
            raise ContractError("step on a finished episode")
        cfg = self.config
        actions = np.asarray(actions)
        self.t[idx] += 1
        req = actions == REQUEST
        reward = np.where(req, -cfg.rho, 0.0)
        obs = np.zeros((idx.size, obs_dim(self.obs_mode)))
        if req.any():
            ridx = idx[req]
            obs[req] = self._obs(ridx, self._draw(ridx))
        timeout = req & (self.t[idx] >= cfg.max_steps)
        reward = np.where(timeout, reward + cfg.lose_reward, reward)
        decide = ~req
        won = decide & ((self.mu[idx] > 0) == (actions == DECIDE_ABOVE))
        reward = np.where(decide, np.where(won, cfg.win_reward, cfg.lose_reward), reward)
        done = decide | timeout
        self.won[idx] = won
        self.done[idx] = done
        self.ret[idx] += reward
        return obs, reward, done


def rollout_batch(policy, config: BestArmConfig, mu, sigma, rng: np.random.Generator,
                  obs_mode: str = "raw", greedy: bool = True):
    """Run one episode per ``(mu, sigma)`` pair with ``policy``.

    ``policy`` provides ``begin(n)``, ``act(state, obs, prev_action, greedy, rng)``
    and ``keep(state, rows)``.  Returns a dict of per-episode arrays.
    """
    env = BestArmVecEnv(config, mu, sigma, rng, obs_mode)
    obs = env.reset()
    active = np.arange(env.n)
    prev = np.full(env.n, -1)
    state = policy.begin(env.n)
    while active.size:
        act = policy.act(state, obs, prev[active], greedy, rng)
        obs, _, done = env.step(active, act)
        prev[active] = act
        if done.any():
            keep = ~done
            state = policy.keep(state, keep)
            obs = obs[keep]
            active = active[keep]
    return {"won": env.won.copy(), "length": env.t.copy(), "return": env.ret.copy(),
            "mu": env.mu, "sigma": env.sigma}


def default_grid(n: int = 25, config: BestArmConfig | None = None):
    """Grid over ``mu`` (training range) and ``sigma`` spanning training and OOD ranges."""
    config = config or BestArmConfig()
    mus = np.linspace(*config.mu_range, n)
    sigmas = np.linspace(config.sigma_range[0], config.ood_sigma_range[1], n)
    return mus, sigmas


def grid_evaluate(agents, mus, sigmas, n_episodes: int = 100, config: BestArmConfig | None = None,
                  seed: int = 0, obs_mode: str | None = None, chunk_cells: int = 25):
    """Force episode latents to every ``(mu, sigma)`` cell and roll each agent.

    ``agents`` maps an agent id (its training seed) to a policy or a checkpoint
    path.  Returns rows ``(mu_b, sigma_b, agent_seed, win_rate, mean_length,
    n_episodes)``.
    """
    from .agent import load_agent

    config = config or BestArmConfig()
    cells = [(float(m), float(s)) for m in mus for s in sigmas]
    rows = []
    for agent_id, agent in agents.items():
        if not hasattr(agent, "act"):
            agent = load_agent(agent)
        mode = obs_mode or agent.obs_mode
        rng = np.random.default_rng([seed, int(agent_id)])
        for start in range(0, len(cells), chunk_cells):
            block = cells[start:start + chunk_cells]
            mu = np.repeat([c[0] for c in block], n_episodes)
            sg = np.repeat([c[1] for c in block], n_episodes)
            res = rollout_batch(agent, config, mu, sg, rng, mode, greedy=True)
            won = res["won"].reshape(len(block), n_episodes)
            length = res["length"].reshape(len(block), n_episodes)
            for (m, s), wv, lv in zip(block, won, length):
                rows.append({"mu_b": m, "sigma_b": s, "agent_seed": agent_id,
                             "win_rate": float(wv.mean()), "mean_length": float(lv.mean()),
                             "n_episodes": n_episodes})
    return rows
