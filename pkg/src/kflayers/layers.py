"""History-encoder layers built on the diagonal Kalman filter.

A layer projects an embedded history ``h`` (batch, time, E) into latent input
``u``, observation ``w`` and observation-noise ``r`` signals of size N, filters
them from a standard-normal initial belief, and projects the posterior mean
back to E.  Three variants share the code path:

* ``vssm``: predict only (no ``w``/``r`` channels),
* ``vssm-kf``: predict + update,
* ``vssm-kf-u``: predict + update without the ``u`` channel.

The continuous diagonal system is discretised with zero-order hold and a
learnable step size ``softplus(delta_raw)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import CheckpointError, ContractError
from .kalman import DiagonalDynamics
from .scan import check_right_padding

VARIANTS = ("vssm", "vssm-kf", "vssm-kf-u")
NOISE_FLOOR = 1e-4
CHECKPOINT_FORMAT_VERSION = 1


def hippo_diag_init(n: int, kind: str = "legs") -> np.ndarray:
    """Real diagonal HiPPO initialisation for the continuous-time transition.

    ``legs``: the diagonal of the HiPPO-LegS matrix, ``-(k+1)`` for ``k = 0..n-1``.
    ``legs-normal``: real part of the eigenvalues of the normal part of HiPPO-LegS,
    ``-1/2`` on every channel.
    """
    if n < 1:
        raise ContractError("latent size must be >= 1")
    if kind == "legs":
        return -(np.arange(n, dtype=np.float64) + 1.0)
    if kind == "legs-normal":
        return np.full(n, -0.5)
    raise ContractError(f"unknown HiPPO variant {kind!r}")


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class LayerVariant:
    kind: str = "vssm-kf"
    time_varying_process_noise: bool = False
    covariance_output_feature: bool = False

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ContractError(f"unknown layer variant {self.kind!r}; expected one of {VARIANTS}")

    @property
    def update(self) -> bool:
        return self.kind != "vssm"

    @property
    def uses_input(self) -> bool:
        return self.kind != "vssm-kf-u"


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def discretize_zoh(a_cont, b_cont, delta_raw, q_raw):
    """Zero-order hold on tensors: ``a = exp(d a~)``, ``b = (a - 1) / a~ * b~``.

    ``d = softplus(delta_raw)``.  Channels with ``|a~| < 1e-8`` use the series
    ``b = d b~ (1 + d a~ / 2)``, which keeps the gradient in ``a~``.  The process noise is ``softplus(q_raw)`` and is not discretised.
    """
    a_cont, b_cont, delta_raw, q_raw = (ad._lift(v) for v in (a_cont, b_cont, delta_raw, q_raw))
    delta = ad.softplus(delta_raw)
    small = np.abs(a_cont.data) < 1e-8
    safe = ad.where(small, np.ones_like(a_cont.data), a_cont)
    a = ad.exp(delta * a_cont)
    ratio = ad.expm1(delta * safe) / safe
    series = delta * b_cont * (1.0 + delta * a_cont * 0.5)
    b = ad.where(small, series, ratio * b_cont)
    return a, b, ad.softplus(q_raw)


def discretize_zoh_np(a_cont, b_cont, delta_raw, q_raw) -> DiagonalDynamics:
    with ad.no_grad():
        a, b, q = discretize_zoh(np.asarray(a_cont, dtype=np.float64),
                                 np.asarray(b_cont, dtype=np.float64),
                                 np.asarray(delta_raw, dtype=np.float64),
                                 np.asarray(q_raw, dtype=np.float64))
    return DiagonalDynamics(a.data, b.data, q.data)


def kf_scan(a: Tensor, b: Tensor, q: Tensor, u: Tensor, w: Tensor, r: Tensor, mask: np.ndarray,
            update: bool = True, parallel: bool = True, backend: str | None = None,
            time_major: bool = False):
    """Differentiable masked filter over ``(B, K, N)`` inputs from N(0, I).

    ``mask`` is ``(B, K)``.  With ``time_major`` the inputs and outputs are
    ``(K, B, N)`` instead, which avoids transposes.  Forward uses the tree
    scan when ``parallel``; backward always sweeps the step-by-step
    recurrence.  Returns posterior means and variances as tensors.
    """
    if time_major:
        K, B, N = u.shape
    else:
        B, K, N = u.shape
    C = B * N
    dt = u.dtype

    def to_kc(x):
        if time_major:
            return np.ascontiguousarray(np.broadcast_to(x, (K, B, N)), dtype=dt).reshape(K, C)
        x = np.broadcast_to(x, (B, K, N))
        return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(K, C), dtype=dt)

    def from_kc(x):
        x = x.reshape(K, B, N)
        return x if time_major else x.transpose(1, 0, 2)

    a_c = np.tile(a.data.astype(dt), B)
    b_c = np.tile(b.data.astype(dt), B)
    q_time = q.ndim == 3
    q_kc = to_kc(q.data)
    u_kc = to_kc(u.data)
    w_kc = to_kc(w.data) if update else u_kc
    r_kc = to_kc(r.data) if update else u_kc
    m_kc = np.ascontiguousarray(np.repeat(np.asarray(mask, bool).T, N, axis=1))
    x0 = np.zeros(C, dt)
    p0 = np.ones(C, dt)
    X, P = kernels.kf_forward(a_c, b_c, q_kc, u_kc, w_kc, r_kc, m_kc, x0, p0,
                              update=update, parallel=parallel, backend=backend)
    packed = np.stack([from_kc(X), from_kc(P)])

    def bw(g):
        ga, gb, gq, gu, gw, gr = kernels.kf_backward(
            a_c, b_c, q_kc, u_kc, w_kc, r_kc, m_kc, X, P, to_kc(g[0]), to_kc(g[1]),
            x0, p0, update=update, backend=backend)
        ga = ga.reshape(B, N).sum(axis=0)
        gb = gb.reshape(B, N).sum(axis=0)
        gq = from_kc(gq)
        if not q_time:
            gq = gq.sum(axis=(0, 1)).reshape(q.shape)
        grads = [ga, gb, gq, from_kc(gu)]
        grads += [from_kc(gw), from_kc(gr)] if update else [None, None]
        return tuple(grads)

    parents = (a, b, q, u, w, r)
    out = ad.custom_op(packed, parents, bw)
    return out[0], out[1]


class KFLayer:
    """One filtering layer.  Parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, embed_size: int, latent_size: int, variant: LayerVariant | str = "vssm-kf",
                 rng: np.random.Generator | None = None, dtype=np.float64,
                 a_init: str = "legs", delta_init: float = -7.0, parallel: bool = True):
        self.E = embed_size
        self.N = latent_size
        self.variant = LayerVariant(variant) if isinstance(variant, str) else variant
        self.parallel = parallel
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(0) if rng is None else rng
        v = self.variant
        n_in = self.N * self.n_channels
        n_out = self.N * (2 if v.covariance_output_feature else 1)
        self.params: dict[str, Tensor] = {
            "a_cont": ad.parameter(hippo_diag_init(self.N, a_init), "a_cont", dtype),
            "b_cont": ad.parameter(np.ones(self.N), "b_cont", dtype),
            "delta_raw": ad.parameter(np.array(delta_init), "delta_raw", dtype),
            "q_raw": ad.parameter(np.full(self.N, softplus_inverse(1.0)), "q_raw", dtype),
            "w_in": ad.parameter(_uniform(rng, self.E, (self.E, n_in), dtype), "w_in"),
            "b_in": ad.parameter(_uniform(rng, self.E, (n_in,), dtype), "b_in"),
            "w_out": ad.parameter(_uniform(rng, n_out, (n_out, self.E), dtype), "w_out"),
            "b_out": ad.parameter(_uniform(rng, n_out, (self.E,), dtype), "b_out"),
        }

    @property
    def channels(self) -> list[str]:
        v = self.variant
        names = []
        if v.uses_input:
            names.append("u")
        if v.update:
            names += ["w", "r"]
        if v.time_varying_process_noise:
            names.append("q")
        return names

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def dynamics(self):
        p = self.params
        return discretize_zoh(p["a_cont"], p["b_cont"], p["delta_raw"], p["q_raw"])

    def _project(self, h):
        """Per-channel input projections; works on tensors and plain arrays."""
        p = self.params
        tensor = isinstance(h, Tensor)
        parts = {}
        for i, name in enumerate(self.channels):
            cols = slice(i * self.N, (i + 1) * self.N)
            if tensor:
                parts[name] = h @ p["w_in"][:, cols] + p["b_in"][cols]
            else:
                parts[name] = h @ p["w_in"].data[:, cols] + p["b_in"].data[cols]
        return parts

    def forward(self, h: Tensor, mask=None):
        """Map ``h`` (B, K, E) to ``z`` (B, K, E); returns ``(z, diagnostics)``."""
        h = ad._lift(h)
        if h.ndim != 3 or h.shape[-1] != self.E:
            raise ContractError(f"expected (B, K, {self.E}) input, got {h.shape}")
        B, K, _ = h.shape
        if K < 1:
            raise ContractError("sequence must have at least one step")
        mask = np.zeros((B, K), bool) if mask is None else np.asarray(mask, bool)
        check_right_padding(mask, axis=1)
        p = self.params
        a, b, q = self.dynamics()
        # the filter runs time-major: (K, B, N)
        parts = self._project(ad.swapaxes(h, 0, 1))
        zeros = Tensor(np.zeros((K, B, self.N), dtype=h.dtype))
        u = parts.get("u", zeros)
        if self.variant.update:
            w = parts["w"]
            r = ad.softplus(parts["r"]) + NOISE_FLOOR
        else:
            w = r = zeros
        if self.variant.time_varying_process_noise:
            q = ad.softplus(parts["q"])
        x, var = kf_scan(a, b, q, u, w, r, mask, update=self.variant.update,
                         parallel=self.parallel, time_major=True)
        feats = ad.concat([x, var], axis=-1) if self.variant.covariance_output_feature else x
        z = ad.swapaxes(feats @ p["w_out"] + p["b_out"], 0, 1)
        diag = {"mean": np.swapaxes(x.data, 0, 1), "var": np.swapaxes(var.data, 0, 1), "a": a.data}
        if self.variant.update:
            diag["r"] = np.swapaxes(r.data, 0, 1)
        return z, diag

    # -- incremental (acting-time) interface -----------------------------------------
    def init_state(self, batch: int) -> dict:
        return {"x": np.zeros((batch, self.N), self.dtype), "p": np.ones((batch, self.N), self.dtype)}

    def step(self, state: dict, h_t: np.ndarray) -> np.ndarray:
        """Advance one step for every row of ``h_t`` (B, E); updates ``state`` in place."""
        p = {k: v.data for k, v in self.params.items()}
        with ad.no_grad():
            a, b, q = (t.data for t in self.dynamics())
        parts = self._project(h_t)
        u = parts.get("u", 0.0)
        if self.variant.time_varying_process_noise:
            q = ad.softplus_np(parts["q"])
        pm = a * a * state["p"] + q
        xm = a * state["x"] + b * u
        if self.variant.update:
            r = ad.softplus_np(parts["r"]) + NOISE_FLOOR
            s = pm + r
            k = pm / s
            state["x"] = xm + k * (parts["w"] - xm)
            state["p"] = pm * r / s
        else:
            state["x"], state["p"] = xm, pm
        feats = state["x"]
        if self.variant.covariance_output_feature:
            feats = np.concatenate([state["x"], state["p"]], axis=-1)
        return feats @ p["w_out"] + p["b_out"]


class RMSNorm:
    def __init__(self, size: int, eps: float = 1e-8, dtype=np.float64):
        self.eps = eps
        self.params = {"gain": ad.parameter(np.ones(size), "gain", dtype)}

    def parameters(self):
        return self.params

    def forward(self, x: Tensor) -> Tensor:
        ms = ad.square(x).mean(axis=-1, keepdims=True)
        return x / ad.sqrt(ms + self.eps) * self.params["gain"]

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return x / np.sqrt(ms + self.eps) * self.params["gain"].data


@dataclass
class EncoderConfig:
    embed_size: int = 16
    latent_size: int = 128
    variant: str = "vssm-kf"
    num_layers: int = 1
    rms_norm: bool = False
    time_varying_process_noise: bool = False
    covariance_output_feature: bool = False
    a_init: str = "legs"
    delta_init: float = -7.0
    parallel_scan: bool = False


class HistoryEncoder:
    """A stack of filter layers, optionally followed by RMSNorm."""

    def __init__(self, cfg: EncoderConfig, rng=None, dtype=np.float64):
        self.cfg = cfg
        rng = np.random.default_rng(0) if rng is None else rng
        variant = LayerVariant(cfg.variant, cfg.time_varying_process_noise, cfg.covariance_output_feature)
        self.layers = [KFLayer(cfg.embed_size, cfg.latent_size, variant, rng, dtype,
                               cfg.a_init, cfg.delta_init, cfg.parallel_scan)
                       for _ in range(cfg.num_layers)]
        self.norm = RMSNorm(cfg.embed_size, dtype=dtype) if cfg.rms_norm else None

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.parameters().items()})
        if self.norm is not None:
            out.update({f"norm.{k}": v for k, v in self.norm.parameters().items()})
        return out

    def forward(self, h: Tensor, mask=None) -> Tensor:
        return stack_layers(self.layers, h, mask, self.norm)

    def init_state(self, batch: int) -> list[dict]:
        return [layer.init_state(batch) for layer in self.layers]

    def step(self, state: list[dict], h_t: np.ndarray) -> np.ndarray:
        z = h_t
        for layer, st in zip(self.layers, state):
            z = layer.step(st, z)
        if self.norm is not None:
            z = self.norm.forward_np(z)
        return z


def stack_layers(layers, h, mask=None, norm: RMSNorm | None = None) -> Tensor:
    """Compose layers in sequence, then apply ``norm`` if given."""
    if len({layer.E for layer in layers}) > 1:
        raise ContractError("stacked layers must share the embedding size")
    z = h
    for layer in layers:
        z, _ = layer.forward(z, mask)
    if norm is not None:
        z = norm.forward(z)
    return z


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write a flat named-array container (``.npz``) with a format-version field."""
    path = Path(path)
    payload = {f"param/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64)
    payload["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["__format_version__"])
            meta = json.loads(str(data["__meta__"]))
            arrays = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_FORMAT_VERSION}")
    return arrays, meta
