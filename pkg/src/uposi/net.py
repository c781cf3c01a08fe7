"""Dense tanh networks with hand-written gradients, Gaussian policy head, persistence.

Parameter vectors are flattened layer by layer as ``[W_0 (row-major), b_0,
W_1, b_1, ...]``; a :class:`GaussianPolicy` appends its ``log_std`` after
the mean network's parameters.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class NetworkFormatError(ValueError):
    """Network file is unreadable (truncated, corrupt, wrong magic)."""


class VersionMismatchError(NetworkFormatError):
    pass


class ShapeMismatchError(NetworkFormatError):
    pass


@dataclass
class ForwardRecord:
    inputs: np.ndarray
    activations: list  # post-activation (and post-dropout) output of each hidden layer
    masks: list  # dropout masks (None in eval mode)
    squeeze: bool


class DenseNetwork:
    """Affine + tanh stack with identity output and optional inverted dropout."""

    activation = "tanh"

    def __init__(self, layer_dims: Sequence[int], dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None, output_scale: float = 1.0):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) <= 0:
            raise ValueError(f"layer_dims must list >= 2 positive sizes, got {dims}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.layer_dims = dims
        self.dropout = float(dropout)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = math.sqrt(3.0 / fan_in)
            W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            if i == len(dims) - 2:
                W *= output_scale
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))
        self.last_record: Optional[ForwardRecord] = None

    # -- parameter vector ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        i = 0
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = flat[i:i + W.size].reshape(W.shape).copy()
            i += W.size
            self.biases[k] = flat[i:i + b.size].copy()
            i += b.size

    def copy(self) -> "DenseNetwork":
        other = DenseNetwork.__new__(DenseNetwork)
        other.layer_dims = list(self.layer_dims)
        other.dropout = self.dropout
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.last_record = None
        return other

    # -- evaluation ---------------------------------------------------------

    def _as_batch(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.input_dim}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        return x, squeeze

    def forward(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None,
                record: bool = False) -> np.ndarray:
        """Evaluate the network on a vector or an ``(N, in)`` batch.

        ``mode="train"`` applies inverted dropout after every hidden layer and
        needs ``rng``. With ``record=True`` the intermediate activations are
        kept for :meth:`backward`.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x, squeeze = self._as_batch(x)
        use_dropout = mode == "train" and self.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - self.dropout
        acts, masks = [], []
        a = x
        n_layers = len(self.weights)
        for k in range(n_layers):
            z = a @ self.weights[k].T + self.biases[k]
            if k == n_layers - 1:
                a = z
                break
            a = np.tanh(z)
            if use_dropout:
                m = (rng.random(a.shape) < keep) / keep
                a = a * m
                masks.append(m)
            else:
                masks.append(None)
            acts.append(a)
        if record:
            self.last_record = ForwardRecord(x, acts, masks, squeeze)
        return a[0] if squeeze else a

    def backward(self, output_grad, record: Optional[ForwardRecord] = None):
        """Reverse-mode gradient of ``sum(output_grad * output)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` in the flat
        parameter order.
        """
        rec = record if record is not None else self.last_record
        if rec is None:
            raise RuntimeError("backward() called without a recorded forward pass")
        g = np.asarray(output_grad, dtype=float)
        if rec.squeeze and g.ndim == 1:
            g = g[None, :]
        if g.shape != (rec.inputs.shape[0], self.output_dim):
            raise ValueError(f"output_grad shape {g.shape} does not match recorded output")
        n_layers = len(self.weights)
        gW = [None] * n_layers
        gb = [None] * n_layers
        for k in range(n_layers - 1, -1, -1):
            a_in = rec.inputs if k == 0 else rec.activations[k - 1]
            gW[k] = g.T @ a_in
            gb[k] = g.sum(axis=0)
            g = g @ self.weights[k]
            if k > 0:
                m = rec.masks[k - 1]
                a = rec.activations[k - 1]
                if m is not None:
                    # a = tanh(z) * m, so d/dz = m * (1 - tanh^2) and tanh = a / m where m > 0
                    t = np.divide(a, m, out=np.zeros_like(a), where=m > 0)
                    g = g * m * (1.0 - t * t)
                else:
                    g = g * (1.0 - a * a)
        flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gW, gb)])
        return flat, (g[0] if rec.squeeze else g)

    def jvp(self, x, dparams) -> tuple[np.ndarray, np.ndarray]:
        """Forward-mode directional derivative (eval mode) along ``dparams``."""
        x, squeeze = self._as_batch(x)
        dparams = np.asarray(dparams, dtype=float)
        if dparams.shape != (self.n_params,):
            raise ValueError(f"tangent has shape {dparams.shape}, expected ({self.n_params},)")
        a, da = x, np.zeros_like(x)
        i = 0
        n_layers = len(self.weights)
        for k in range(n_layers):
            W, b = self.weights[k], self.biases[k]
            dW = dparams[i:i + W.size].reshape(W.shape)
            i += W.size
            db = dparams[i:i + b.size]
            i += b.size
            z = a @ W.T + b
            dz = da @ W.T + a @ dW.T + db
            if k == n_layers - 1:
                a, da = z, dz
            else:
                a = np.tanh(z)
                da = dz * (1.0 - a * a)
        if squeeze:
            return a[0], da[0]
        return a, da


# ---------------------------------------------------------------------------
# Gaussian policy
# ---------------------------------------------------------------------------


def log_prob_diag(actions, mean, log_std) -> np.ndarray:
    """Diagonal-Gaussian log density summed over the last axis."""
    std = np.exp(log_std)
    z = (np.asarray(actions) - mean) / std
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def kl_diag_gaussian(mean1, std1, mean2, std2) -> np.ndarray:
    """KL(N(mean1, std1^2) || N(mean2, std2^2)) summed over the last axis."""
    mean1, std1, mean2, std2 = (np.asarray(v, dtype=float) for v in (mean1, std1, mean2, std2))
    if np.any(std1 <= 0) or np.any(std2 <= 0):
        raise ValueError("standard deviations must be positive")
    return np.sum(np.log(std2 / std1) + (std1**2 + (mean1 - mean2) ** 2) / (2.0 * std2**2) - 0.5, axis=-1)


class GaussianPolicy:
    """``N(mean_net([obs, mu]), diag(exp(log_std)^2))`` in normalized action units.

    With ``mu_dim=0`` the policy sees the observation only (the "regular"
    baseline); passing a parameter vector to it is an error.
    """

    def __init__(self, obs_dim: int, mu_dim: int, act_dim: int, hidden: Sequence[int] = (64, 64),
                 rng: Optional[np.random.Generator] = None, init_log_std: float = 0.0,
                 output_scale: float = 0.01, obs_scale=None, angle_dims: Sequence[int] = ()):
        self.obs_dim, self.mu_dim, self.act_dim = int(obs_dim), int(mu_dim), int(act_dim)
        self.obs_scale = np.ones(self.obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=float).copy()
        if self.obs_scale.shape != (self.obs_dim,) or np.any(self.obs_scale <= 0):
            raise ValueError("obs_scale must hold one positive entry per observation dimension")
        self.angle_dims = tuple(int(i) for i in angle_dims)
        self.mean_net = DenseNetwork([self.feature_dim + self.mu_dim, *hidden, self.act_dim],
                                     rng=rng, output_scale=output_scale)
        self.log_std = np.full(self.act_dim, float(init_log_std))

    @property
    def feature_dim(self) -> int:
        return self.obs_dim + len(self.angle_dims)

    def features(self, obs) -> np.ndarray:
        """Scaled observation; angle entries become ``sin`` in place with ``cos`` appended."""
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {self.obs_dim}")
        x = obs / self.obs_scale
        if not self.angle_dims:
            return x
        idx = list(self.angle_dims)
        x = x.copy()
        x[..., idx] = np.sin(obs[..., idx])
        return np.concatenate([x, np.cos(obs[..., idx])], axis=-1)

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.act_dim

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_params(), self.log_std])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.mean_net.set_params(flat[:-self.act_dim])
        self.log_std = flat[-self.act_dim:].copy()

    def copy(self) -> "GaussianPolicy":
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.obs_dim, other.mu_dim, other.act_dim = self.obs_dim, self.mu_dim, self.act_dim
        other.obs_scale, other.angle_dims = self.obs_scale.copy(), self.angle_dims
        other.mean_net = self.mean_net.copy()
        other.log_std = self.log_std.copy()
        return other

    def inputs(self, obs, mu=None) -> np.ndarray:
        obs = self.features(obs)
        if self.mu_dim == 0:
            if mu is not None and np.size(mu) > 0:
                raise ValueError("this policy takes no model-parameter input")
            return obs
        mu = np.asarray(mu, dtype=float)
        if mu.shape[-1] != self.mu_dim:
            raise ValueError(f"parameter dim {mu.shape[-1]} != {self.mu_dim}")
        if obs.ndim == 2 and mu.ndim == 1:
            mu = np.broadcast_to(mu, (obs.shape[0], self.mu_dim))
        return np.concatenate([obs, mu], axis=-1)

    def mean(self, obs, mu=None) -> np.ndarray:
        return self.mean_net.forward(self.inputs(obs, mu))

    def act(self, obs, mu=None, rng: Optional[np.random.Generator] = None,
            deterministic: bool = False) -> np.ndarray:
        m = self.mean(obs, mu)
        if deterministic:
            return m
        if rng is None:
            raise ValueError("stochastic action needs an rng")
        return m + self.std * rng.standard_normal(m.shape)

    def log_prob(self, obs, mu, actions) -> np.ndarray:
        return log_prob_diag(actions, self.mean(obs, mu), self.log_std)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * (LOG_2PI + 1.0)))


def policy_sample(policy: GaussianPolicy, obs, mu_normed, rng, deterministic: bool = False):
    return policy.act(obs, mu_normed, rng=rng, deterministic=deterministic)


def log_prob(policy: GaussianPolicy, obs, mu_normed, action):
    return policy.log_prob(obs, mu_normed, action)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------
#
# File layout (all integers little-endian):
#   b"UPNN"            magic
#   uint32             format version (FORMAT_VERSION)
#   uint32             header length in bytes
#   header             UTF-8 JSON: kind, layer_dims, activation, dropout, meta,
#                      arrays: [{name, shape}, ...]
#   payload            every array in header order as raw '<f8'

MAGIC = b"UPNN"
FORMAT_VERSION = 1

# extra network kinds: kind -> loader(header, arrays, dense_net, path)
LOADERS: dict = {}


def _dense_arrays(net: DenseNetwork, prefix: str = "") -> list:
    out = []
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}W{k}", W))
        out.append((f"{prefix}b{k}", b))
    return out


def write_container(path, kind: str, layer_dims, dropout: float, arrays: list, meta: Optional[dict] = None):
    header = {
        "kind": kind,
        "layer_dims": [int(d) for d in layer_dims],
        "activation": DenseNetwork.activation,
        "dropout": float(dropout),
        "meta": meta or {},
        "arrays": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload)
    except OSError as exc:
        raise OSError(f"cannot write network file {path}: {exc}") from exc


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise NetworkFormatError(f"{path}: not a network file (bad magic or too short)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12 + hlen:
        raise NetworkFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        specs = header["arrays"]
        for key in ("kind", "layer_dims", "activation", "dropout"):
            header[key]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise NetworkFormatError(f"{path}: corrupt header ({exc})") from exc
    offset = 12 + hlen
    arrays = {}
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise NetworkFormatError(f"{path}: truncated payload at array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                             offset=offset).reshape(shape).astype(float)
        offset += nbytes
    if offset != len(data):
        raise NetworkFormatError(f"{path}: {len(data) - offset} trailing bytes")
    if header["activation"] != DenseNetwork.activation:
        raise NetworkFormatError(f"{path}: unsupported activation {header['activation']!r}")
    return header, arrays


def _dense_from(header: dict, arrays: dict, path, prefix: str = "") -> DenseNetwork:
    dims = header["layer_dims"]
    net = DenseNetwork.__new__(DenseNetwork)
    net.layer_dims = [int(d) for d in dims]
    net.dropout = float(header["dropout"])
    net.weights, net.biases, net.last_record = [], [], None
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        try:
            W, b = arrays[f"{prefix}W{k}"], arrays[f"{prefix}b{k}"]
        except KeyError as exc:
            raise ShapeMismatchError(f"{path}: missing array {exc}") from exc
        if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise ShapeMismatchError(
                f"{path}: layer {k} has W{W.shape}/b{b.shape}, header says ({fan_out}, {fan_in})")
        net.weights.append(W.copy())
        net.biases.append(b.copy())
    return net


def save_network(net, path, meta: Optional[dict] = None) -> None:
    """Write a :class:`DenseNetwork` or :class:`GaussianPolicy` to ``path``."""
    if isinstance(net, GaussianPolicy):
        arrays = _dense_arrays(net.mean_net) + [("log_std", net.log_std), ("obs_scale", net.obs_scale)]
        m = {"obs_dim": net.obs_dim, "mu_dim": net.mu_dim, "act_dim": net.act_dim,
             "angle_dims": list(net.angle_dims), **(meta or {})}
        write_container(path, "gaussian_policy", net.mean_net.layer_dims, 0.0, arrays, m)
    elif isinstance(net, DenseNetwork):
        write_container(path, "dense", net.layer_dims, net.dropout, _dense_arrays(net), meta)
    elif hasattr(net, "container_payload"):
        write_container(path, *net.container_payload(meta))
    else:
        raise TypeError(f"cannot save {type(net).__name__}")


def load_network(path):
    header, arrays = read_container(path)
    kind = header["kind"]
    net = _dense_from(header, arrays, path)
    if kind == "dense":
        return net
    if kind == "gaussian_policy":
        meta = header["meta"]
        pol = GaussianPolicy.__new__(GaussianPolicy)
        pol.obs_dim, pol.mu_dim, pol.act_dim = int(meta["obs_dim"]), int(meta["mu_dim"]), int(meta["act_dim"])
        pol.angle_dims = tuple(int(i) for i in meta.get("angle_dims", ()))
        if net.input_dim != pol.feature_dim + pol.mu_dim or net.output_dim != pol.act_dim:
            raise ShapeMismatchError(f"{path}: policy dims disagree with layer_dims")
        log_std = arrays.get("log_std")
        if log_std is None or log_std.shape != (pol.act_dim,):
            raise ShapeMismatchError(f"{path}: bad log_std array")
        scale = arrays.get("obs_scale")
        if scale is None or scale.shape != (pol.obs_dim,):
            raise ShapeMismatchError(f"{path}: bad obs_scale array")
        pol.mean_net = net
        pol.log_std = log_std.copy()
        pol.obs_scale = scale.copy()
        return pol
    if kind in LOADERS:
        return LOADERS[kind](header, arrays, net, path)
    raise NetworkFormatError(f"{path}: unknown network kind {kind!r}")
