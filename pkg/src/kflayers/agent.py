"""Recurrent actor-critic trained with discrete soft actor-critic.

Both the actor and the critic are ``embedder -> history encoder -> MLP head``
stacks with their own weights.  The head also receives the current
observation and the one-hot previous action (skip connections).  Agents
without a history encoder (oracle, memoryless) use the same code with the
embedder and encoder removed.

Batches are windows of episodes, right-padded.  Entry ``t`` of a window holds
``obs_t``, the previous action ``a_{t-1}`` and the transition
``(a_t, r_t, done_t)``; the final live entry only supplies the next
observation for the bootstrap target.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import envs
from .autodiff import Tensor
from .config import ExperimentConfig
from .errors import CheckpointError, ContractError, NumericError
from .layers import HistoryEncoder, load_checkpoint, save_checkpoint
from .scan import check_right_padding

METRIC_COLUMNS = ("env_step", "eval_return_mean", "eval_return_stderr", "eval_len_mean",
                  "win_rate", "split")


def onehot(actions: np.ndarray, n: int = envs.N_ACTIONS, dtype=np.float64) -> np.ndarray:
    """One-hot rows; negative indices (no previous action) map to all zeros."""
    actions = np.asarray(actions)
    out = np.zeros(actions.shape + (n,), dtype)
    valid = actions >= 0
    out[valid, actions[valid]] = 1
    return out


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, dtype, name: str):
        self.params = {f"{name}.w": ad.parameter(_uniform(rng, n_in, (n_in, n_out), dtype)),
                       f"{name}.b": ad.parameter(_uniform(rng, n_in, (n_out,), dtype))}
        self._w, self._b = self.params.values()

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self._w + self._b

    def np(self, x: np.ndarray) -> np.ndarray:
        return x @ self._w.data + self._b.data


class MLP:
    """ReLU network; hidden sizes given, linear output."""

    def __init__(self, n_in: int, hidden, n_out: int, rng, dtype, name: str):
        sizes = [n_in, *hidden, n_out]
        self.layers = [Linear(i, o, rng, dtype, f"{name}.{k}")
                       for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:]))]

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.params)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)

    def np(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers[:-1]:
            x = np.maximum(layer.np(x), 0)
        return self.layers[-1].np(x)


class Embedder(Linear):
    """Linear map of ``[obs_t, onehot(a_{t-1})]`` to the embedding size."""

    def __init__(self, obs_dim: int, embed_size: int, rng, dtype, name: str = "embed"):
        super().__init__(obs_dim + envs.N_ACTIONS, embed_size, rng, dtype, name)


def embed_history(embedder: Embedder, obs_seq, prev_actions) -> Tensor:
    x = np.concatenate([obs_seq, onehot(prev_actions, dtype=obs_seq.dtype)], axis=-1)
    return embedder(Tensor(x))


class RACNetwork:
    """Embedder, optional history encoder and ``n_heads`` MLP heads."""

    def __init__(self, cfg: ExperimentConfig, hidden, n_heads: int, rng, name: str):
        dt = np.dtype(cfg.dtype)
        self.dtype = dt
        self.obs_dim = envs.obs_dim(cfg.obs_mode)
        self.context_len = cfg.sac.context_len
        skip = self.obs_dim + envs.N_ACTIONS
        if cfg.uses_encoder:
            enc_cfg = cfg.encoder_config()
            self.embedder = Embedder(self.obs_dim, enc_cfg.embed_size, rng, dt, f"{name}.embed")
            self.encoder = HistoryEncoder(enc_cfg, rng, dt)
            n_in = enc_cfg.embed_size + skip
        else:
            self.embedder = self.encoder = None
            n_in = skip
        self.heads = [MLP(n_in, hidden, envs.N_ACTIONS, rng, dt, f"{name}.head{i}")
                      for i in range(n_heads)]
        self.name = name

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        if self.encoder is not None:
            out.update(self.embedder.params)
            out.update({f"{self.name}.enc.{k}": v for k, v in self.encoder.parameters().items()})
        for head in self.heads:
            out.update(head.params)
        return out

    def features(self, obs: np.ndarray, prev: np.ndarray, mask: np.ndarray) -> Tensor:
        obs = np.asarray(obs, self.dtype)
        skip = Tensor(np.concatenate([obs, onehot(prev, dtype=self.dtype)], axis=-1))
        if self.encoder is None:
            return skip
        z = self.encoder.forward(embed_history(self.embedder, obs, prev), mask)
        return ad.concat([z, skip], axis=-1)

    def forward(self, obs, prev, mask, live_only: bool = False) -> list[Tensor]:
        """Per-head outputs ``(B, K, |A|)`` for a padded window batch.

        With ``live_only`` the heads only see unpadded entries and return
        ``(n_live, |A|)`` rows in row-major order.
        """
        f = self.features(obs, prev, mask)
        if live_only:
            f = f[np.nonzero(~np.asarray(mask, bool))]
        return [head(f) for head in self.heads]


def critic_forward(critic: RACNetwork, obs, prev, mask, live_only: bool = False) -> list[Tensor]:
    return critic.forward(obs, prev, mask, live_only)


def actor_forward(actor: RACNetwork, obs, prev, mask, live_only: bool = False) -> Tensor:
    """Log-probabilities over actions."""
    return ad.log_softmax(actor.forward(obs, prev, mask, live_only)[0], axis=-1)


# -- acting ------------------------------------------------------------------------------

@dataclass
class _ActState:
    enc: list | None
    obs: np.ndarray   # (n, w, obs_dim): most recent observations, at most context_len
    prev: np.ndarray  # (n, w)
    steps: int = 0


class ActorPolicy:
    """Acting interface over a trained actor (``begin`` / ``act`` / ``keep``).

    The encoder state is advanced incrementally while the history fits the
    context window; afterwards the last ``context_len`` steps are re-encoded
    from the initial belief, exactly as windows are formed during training.
    """

    def __init__(self, actor: RACNetwork, obs_mode: str):
        self.actor = actor
        self.obs_mode = obs_mode

    def begin(self, n: int) -> _ActState:
        enc = self.actor.encoder.init_state(n) if self.actor.encoder is not None else None
        od = self.actor.obs_dim
        return _ActState(enc, np.zeros((n, 0, od), self.actor.dtype), np.zeros((n, 0), np.int64))

    def keep(self, state: _ActState, rows) -> _ActState:
        enc = None
        if state.enc is not None:
            enc = [{k: v[rows] for k, v in layer.items()} for layer in state.enc]
        return _ActState(enc, state.obs[rows], state.prev[rows], state.steps)

    def logits(self, state: _ActState, obs: np.ndarray, prev: np.ndarray) -> np.ndarray:
        net = self.actor
        obs = np.asarray(obs, net.dtype)
        ctx = net.context_len
        state.obs = np.concatenate([state.obs, obs[:, None]], axis=1)[:, -ctx:]
        state.prev = np.concatenate([state.prev, np.asarray(prev)[:, None]], axis=1)[:, -ctx:]
        state.steps += 1
        skip = np.concatenate([obs, onehot(prev, dtype=net.dtype)], axis=-1)
        if net.encoder is None:
            feats = skip
        elif state.steps <= ctx:
            h = net.embedder.np(skip)
            feats = np.concatenate([net.encoder.step(state.enc, h), skip], axis=-1)
        else:
            with ad.no_grad():
                f = net.features(state.obs, state.prev, np.zeros(state.prev.shape, bool))
            feats = f.data[:, -1]
        return net.heads[0].np(feats)

    def act(self, state: _ActState, obs, prev, greedy: bool, rng) -> np.ndarray:
        logits = self.logits(state, obs, prev)
        if greedy:
            return logits.argmax(axis=-1)
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(p.shape[0])
        return np.minimum((p.cumsum(axis=-1) < u[:, None]).sum(axis=-1), envs.N_ACTIONS - 1)


# -- replay --------------------------------------------------------------------------------

@dataclass
class PaddedBatch:
    observations: np.ndarray  # (B, K, obs_dim)
    prev_actions: np.ndarray  # (B, K), -1 = none
    actions: np.ndarray       # (B, K)
    rewards: np.ndarray       # (B, K)
    dones: np.ndarray         # (B, K)
    mask: np.ndarray          # (B, K), True = padding

    def __post_init__(self):
        check_right_padding(self.mask, axis=1)
        if np.any(self.mask[:, 0]):
            raise ContractError("every row needs at least one live step")

    @property
    def transition_mask(self) -> np.ndarray:
        """(B, K-1): entries whose successor is also live carry a loss term."""
        return ~self.mask[:, :-1] & ~self.mask[:, 1:]

    def pad_to(self, length: int) -> "PaddedBatch":
        extra = length - self.mask.shape[1]
        if extra < 0:
            raise ContractError("cannot shrink a batch")

        def pad(x, value=0):
            width = [(0, 0), (0, extra)] + [(0, 0)] * (x.ndim - 2)
            return np.pad(x, width, constant_values=value)

        return PaddedBatch(pad(self.observations), pad(self.prev_actions, -1), pad(self.actions),
                           pad(self.rewards), pad(self.dones), pad(self.mask, True))


@dataclass
class Episode:
    """``obs`` has one more row than the transition arrays (the final next-observation)."""

    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Unbounded store of finished (and the running) episodes."""

    def __init__(self):
        self.episodes: list[dict[str, np.ndarray]] = []
        self.n_transitions = 0

    def add_episode(self, ep: Episode) -> None:
        if len(ep) == 0:
            return
        self.episodes.append({
            "obs": np.asarray(ep.obs), "actions": np.asarray(ep.actions, np.int64),
            "rewards": np.asarray(ep.rewards), "dones": np.asarray(ep.dones, bool)})
        self.n_transitions += len(ep)

    def __len__(self) -> int:
        return len(self.episodes)


def replay_sample(buffer: ReplayBuffer, batch_size: int, context_len: int,
                  rng: np.random.Generator, dtype=np.float64) -> PaddedBatch:
    """Uniform episodes, each cut to a window ending at a uniform transition.

    A window holds at most ``context_len`` observations: the transitions
    ``s .. e`` plus the observation after ``e``.
    """
    if len(buffer) == 0:
        raise ContractError("replay buffer is empty")
    picks = rng.integers(len(buffer), size=batch_size)
    windows = []
    for i in picks:
        ep = buffer.episodes[i]
        n = ep["actions"].shape[0]
        end = int(rng.integers(n))              # last transition in the window
        start = max(0, end + 2 - context_len)
        windows.append((ep, start, end))
    K = max(e - s + 2 for _, s, e in windows)
    od = windows[0][0]["obs"].shape[-1]
    obs = np.zeros((batch_size, K, od), dtype)
    prev = np.full((batch_size, K), -1, np.int64)
    act = np.zeros((batch_size, K), np.int64)
    rew = np.zeros((batch_size, K), dtype)
    done = np.zeros((batch_size, K), bool)
    mask = np.ones((batch_size, K), bool)
    for row, (ep, s, e) in enumerate(windows):
        L = e - s + 1
        obs[row, :L + 1] = ep["obs"][s:e + 2]
        act[row, :L] = ep["actions"][s:e + 1]
        prev[row, 1:L + 1] = ep["actions"][s:e + 1]
        prev[row, 0] = ep["actions"][s - 1] if s > 0 else -1
        rew[row, :L] = ep["rewards"][s:e + 1]
        done[row, :L] = ep["dones"][s:e + 1]
        mask[row, :L + 1] = False
    return PaddedBatch(obs, prev, act, rew, done, mask)


# -- SAC -----------------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array(self.t)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        for k in self.params:
            self.m[k] = arrays[f"{prefix}.m.{k}"].copy()
            self.v[k] = arrays[f"{prefix}.v.{k}"].copy()


class SACState:
    """Actor, twin-head critic, its Polyak target, optimizers and the update counter."""

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        s = cfg.sac
        if s.alpha < 0:
            raise ContractError("entropy temperature must be non-negative")
        self.cfg = cfg
        self.actor = RACNetwork(cfg, s.actor_hidden, 1, rng, "actor")
        self.critic = RACNetwork(cfg, s.critic_hidden, 2, rng, "critic")
        self.target = RACNetwork(cfg, s.critic_hidden, 2, rng, "critic")
        self.sync_target(1.0)
        betas = (s.adam_beta1, s.adam_beta2)
        self.actor_opt = Adam(self.actor.params, s.lr, betas, s.adam_eps)
        self.critic_opt = Adam(self.critic.params, s.lr, betas, s.adam_eps)
        self.alpha = s.alpha
        self.updates = 0

    def sync_target(self, tau: float) -> None:
        tp = self.target.params
        for k, p in self.critic.params.items():
            if tau >= 1.0:
                tp[k].data[...] = p.data
            else:
                tp[k].data *= 1 - tau
                tp[k].data += tau * p.data

    def policy(self) -> ActorPolicy:
        return ActorPolicy(self.actor, self.cfg.obs_mode)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for net, tag in ((self.actor, "actor"), (self.critic, "critic"), (self.target, "target")):
            out.update({f"{tag}/{k}": p.data for k, p in net.params.items()})
        out.update(self.actor_opt.state_arrays("opt.actor"))
        out.update(self.critic_opt.state_arrays("opt.critic"))
        out["updates"] = np.array(self.updates)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for net, tag in ((self.actor, "actor"), (self.critic, "critic"), (self.target, "target")):
            for k, p in net.params.items():
                key = f"{tag}/{k}"
                if key not in arrays or arrays[key].shape != p.data.shape:
                    raise CheckpointError(f"checkpoint does not match the network: {key}")
                p.data[...] = arrays[key]
        if "opt.actor.t" in arrays:
            self.actor_opt.load_state_arrays("opt.actor", arrays)
            self.critic_opt.load_state_arrays("opt.critic", arrays)
            self.updates = int(arrays["updates"])


def sac_losses(batch: PaddedBatch, state: SACState, gamma: float, alpha: float):
    """Critic and actor losses (tensors) for one padded batch.

    Heads run on the live entries only, flattened row-major, so the successor
    of live entry ``j`` with a loss term is entry ``j + 1``.
    """
    dt = state.actor.dtype
    live = ~batch.mask
    has_next = np.concatenate([live[:, 1:], np.zeros_like(live[:, :1])], axis=1)[live]
    valid = has_next.astype(dt)
    n_valid = max(float(valid.sum()), 1.0)
    obs, prev, mask = batch.observations, batch.prev_actions, batch.mask

    logp = actor_forward(state.actor, obs, prev, mask, live_only=True)
    with ad.no_grad():
        tq1, tq2 = critic_forward(state.target, obs, prev, mask, live_only=True)
    lp = logp.data
    pi = np.exp(lp)
    v = (pi * (np.minimum(tq1.data, tq2.data) - alpha * lp)).sum(axis=-1)
    v_next = np.append(v[1:], 0) * valid
    y = (batch.rewards[live] + gamma * (1 - batch.dones[live]) * v_next).astype(dt)

    q1, q2 = critic_forward(state.critic, obs, prev, mask, live_only=True)
    sel = onehot(batch.actions[live], dtype=dt)
    critic_loss = 0
    for q in (q1, q2):
        qa = (q * sel).sum(axis=-1)
        critic_loss = critic_loss + (ad.square(qa - y) * valid).sum() / n_valid

    min_q = np.minimum(q1.data, q2.data)
    per_step = (ad.exp(logp) * (logp * alpha - min_q)).sum(axis=-1)
    actor_loss = (per_step * valid).sum() / n_valid
    return critic_loss, actor_loss, pi


def sac_discrete_update(batch: PaddedBatch, state: SACState) -> dict[str, float]:
    """One gradient step on critic and actor, then a Polyak target update."""
    s = state.cfg.sac
    critic_loss, actor_loss, pi = sac_losses(batch, state, s.gamma, state.alpha)
    losses = {"critic": float(critic_loss.data), "actor": float(actor_loss.data)}
    if not all(math.isfinite(v) for v in losses.values()):
        raise NumericError(f"non-finite loss at update {state.updates}: {losses}")
    if not np.allclose(pi.sum(axis=-1), 1.0, atol=1e-3):
        raise NumericError("policy probabilities do not sum to one")
    state.critic_opt.zero_grad()
    ad.backward(critic_loss)
    state.critic_opt.step()
    state.actor_opt.zero_grad()
    ad.backward(actor_loss)
    state.actor_opt.step()
    state.sync_target(s.tau)
    state.updates += 1
    return losses


# -- evaluation & training -----------------------------------------------------------------

def evaluate(policy, env_cfg: envs.BestArmConfig, split: str, n_episodes: int,
             rng: np.random.Generator) -> dict[str, float]:
    mu = rng.uniform(*env_cfg.mu_range, size=n_episodes)
    sigma = rng.uniform(*env_cfg.sigma_range_for(split), size=n_episodes)
    res = envs.rollout_batch(policy, env_cfg, mu, sigma, rng, policy.obs_mode, greedy=True)
    ret = res["return"] / env_cfg.win_reward
    return {"eval_return_mean": float(ret.mean()),
            "eval_return_stderr": float(ret.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0,
            "eval_len_mean": float(res["length"].mean()),
            "win_rate": float(res["won"].mean())}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


class MetricLog:
    """Append-only CSV; the first line records the code version and config hash."""

    def __init__(self, path: Path, cfg: ExperimentConfig):
        self.path = path
        with open(path, "w", newline="") as fh:
            fh.write(f"# kflayers {__version__} config_sha256={cfg.sha256()}\n")
            csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, env_step: int, split: str, stats: dict) -> None:
        row = [env_step, stats["eval_return_mean"], stats["eval_return_stderr"],
               stats["eval_len_mean"], stats["win_rate"], split]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(v) for v in row])


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class TrainResult:
    run_dir: Path
    state: SACState
    final: dict
    updates: int
    seconds: float


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "env", "act", "replay", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def train(cfg: ExperimentConfig, seed: int, run_dir, log=None) -> TrainResult:
    """Run one seed: act with the stochastic policy, update at the UTD ratio, evaluate periodically.

    Writes ``metrics.csv``, ``checkpoint.npz`` and ``run.json`` into ``run_dir``.
    A non-finite loss saves ``nan_dump.npz`` and re-raises :class:`NumericError`.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    rngs = seed_streams(seed)
    state = SACState(cfg, rngs["init"])
    policy = state.policy()
    env_cfg, s = cfg.env, cfg.sac
    dt = np.dtype(cfg.dtype)
    metrics = MetricLog(run_dir / "metrics.csv", cfg)
    (run_dir / "run.json").write_text(json.dumps(
        {"version": __version__, "seed": seed, "config": cfg.to_dict(),
         "config_sha256": cfg.sha256()}, indent=2, sort_keys=True, default=list))

    buffer = ReplayBuffer()
    t0 = time.perf_counter()
    credit = 0.0
    final: dict = {}

    def new_episode():
        obs, st = envs.reset(env_cfg, rngs["env"], "train", cfg.obs_mode)
        return obs, st, Episode(obs=[obs.astype(dt)]), policy.begin(1), -1

    obs, est, ep, act_state, prev = new_episode()
    for step in range(1, cfg.run.total_steps + 1):
        a = int(policy.act(act_state, obs[None], np.array([prev]), False, rngs["act"])[0])
        obs, reward, done = envs.step(env_cfg, est, a, cfg.obs_mode)
        ep.actions.append(a)
        ep.rewards.append(reward)
        ep.dones.append(done)
        ep.obs.append(obs.astype(dt))
        prev = a
        if done:
            buffer.add_episode(ep)
            obs, est, ep, act_state, prev = new_episode()

        if step > s.learning_starts and len(buffer):
            credit += s.utd
            while credit >= 1.0:
                credit -= 1.0
                batch = replay_sample(buffer, s.batch_size, s.context_len, rngs["replay"], dt)
                try:
                    sac_discrete_update(batch, state)
                except NumericError:
                    save_checkpoint(run_dir / "nan_dump.npz",
                                    {**state.state_arrays(), **_batch_arrays(batch)},
                                    {"seed": seed, "env_step": step, "reason": "non-finite loss"})
                    raise

        if step % cfg.run.eval_every == 0 or step == cfg.run.total_steps:
            for split, tag in (("train", "train_dist"), ("ood", "ood")):
                stats = evaluate(policy, env_cfg, split, cfg.run.eval_episodes, rngs["eval"])
                metrics.append(step, tag, stats)
                final[tag] = stats
            if log is not None:
                log(f"seed {seed} step {step}: win {final['train_dist']['win_rate']:.3f} "
                    f"return {final['train_dist']['eval_return_mean']:.3f} "
                    f"ood {final['ood']['eval_return_mean']:.3f} "
                    f"len {final['train_dist']['eval_len_mean']:.1f}")

    save_agent(run_dir / "checkpoint.npz", state, seed)
    if cfg.uses_encoder and cfg.encoder.latent_size == 2:
        export_latent_rollouts(state, cfg, run_dir / "latent_rollouts.csv", rngs["eval"])
    return TrainResult(run_dir, state, final, state.updates, time.perf_counter() - t0)


def _batch_arrays(batch: PaddedBatch) -> dict[str, np.ndarray]:
    return {f"batch/{k}": getattr(batch, k) for k in
            ("observations", "prev_actions", "actions", "rewards", "dones", "mask")}


# -- persistence ---------------------------------------------------------------------------

def save_agent(path, state: SACState, seed: int) -> Path:
    meta = {"config": state.cfg.to_dict(), "seed": seed, "version": __version__}
    return save_checkpoint(path, state.state_arrays(), meta)


def config_from_dict(d: dict) -> ExperimentConfig:
    from .config import apply_overrides

    pairs = {}
    for section, values in d.items():
        for key, value in values.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            pairs[f"{section}.{key}"] = str(value)
    return apply_overrides(ExperimentConfig(), pairs)


def load_agent(path) -> ActorPolicy:
    """Rebuild the acting policy stored in a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: no embedded config")
    cfg = config_from_dict(meta["config"])
    state = SACState(cfg, np.random.default_rng(0))
    state.load_state_arrays(arrays)
    policy = state.policy()
    policy.seed = meta.get("seed")
    policy.env_config = cfg.env
    return policy


def export_latent_rollouts(state: SACState, cfg: ExperimentConfig, path, rng,
                           n_episodes: int = 20) -> Path:
    """Per-step first-layer posterior of the actor encoder for a few greedy episodes."""
    policy = state.policy()
    rows = []
    for ep in range(n_episodes):
        obs, est = envs.reset(cfg.env, rng, "train", cfg.obs_mode)
        st = policy.begin(1)
        prev = -1
        while True:
            a = int(policy.act(st, obs[None], np.array([prev]), True, rng)[0])
            x, p = st.enc[0]["x"][0], st.enc[0]["p"][0]
            rows.append([ep, est.t, est.mu_b, est.sigma_b, float(obs[0]), a,
                         *map(float, x[:2]), *map(float, p[:2])])
            obs, _, done = envs.step(cfg.env, est, a, cfg.obs_mode)
            prev = a
            if done:
                break
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t", "mu_b", "sigma_b", "obs", "action", "x0", "x1", "p0", "p1"])
        w.writerows(rows)
    return Path(path)
