"""Online system identification: regress model parameters from a short history.

Training alternates data generation and supervised fitting. The first round
runs the universal policy with the true parameters ("matched"); later
rounds feed the policy the identifier's own estimate while the simulator
keeps the true parameters ("mismatched"), so the identifier sees the states
its mistakes lead to. Labels are always the true parameters, and the
training buffer only grows.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (HISTORY_LEN, ConfigError, HistoryBuffer, HistorySegment, ModelParams, denormalize,
                   flatten_history, history_dim, make_rng)
from .envs.base import Env
from .net import LOADERS, Adam, DenseNetwork, GaussianPolicy, ShapeMismatchError, save_network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OsiConfig:
    iterations: int = 5  # total rounds, the first one matched
    mu_samples: int = 30
    seconds: float = 5.0
    hidden: tuple = (256, 128, 64)
    dropout: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    history: int = HISTORY_LEN
    heldout_mu_samples: int = 10
    heldout_seconds: float = 2.0
    early_stop_tol: float = 0.0  # stop when held-out MSE improves by less than this fraction (0: never)
    whiten_floor: float = 1e-10  # eigenvalue floor relative to the largest input variance

    def __post_init__(self):
        for name in ("iterations", "mu_samples", "epochs", "batch_size", "history"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.seconds <= 0 or self.lr <= 0:
            raise ConfigError("seconds and lr must be positive")


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class OSINetwork:
    """Dense regressor from a flattened history to the normalized parameter vector.

    Inputs go through a fixed whitening transform estimated from the first
    training set: consecutive observations in a window are nearly equal, and
    the information about accelerations (hence forces, masses, friction)
    lives in their small differences. Outputs are not clamped, so estimates
    outside the training range stay representable.
    """

    def __init__(self, obs_dim: int, act_dim: int, target_dim: int, h: int = HISTORY_LEN,
                 hidden=(256, 128, 64), dropout: float = 0.1, rng: Optional[np.random.Generator] = None,
                 angle_dims: Sequence[int] = ()):
        self.obs_dim, self.act_dim, self.target_dim, self.h = obs_dim, act_dim, target_dim, h
        self.angle_dims = tuple(int(d) for d in angle_dims)
        self.in_dim = history_dim(obs_dim, act_dim, h)
        self.net = DenseNetwork([self.feature_dim, *hidden, target_dim], dropout=dropout, rng=rng)
        self.shift = np.zeros(self.feature_dim)
        self.whiten = np.eye(self.feature_dim)
        self.fitted_scaler = False

    @property
    def feature_dim(self) -> int:
        return self.in_dim + (self.h + 1) * len(self.angle_dims)

    def features(self, X) -> np.ndarray:
        """Replace each unwrapped angle observation in the history by its sine and cosine."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.in_dim:
            raise ValueError(f"history dimension {X.shape[-1]} != {self.in_dim}")
        if not self.angle_dims:
            return X
        block = self.obs_dim + self.act_dim
        cols = [X[..., k * block + d] for k in range(self.h + 1) for d in self.angle_dims]
        keep = np.ones(self.in_dim, dtype=bool)
        keep[[k * block + d for k in range(self.h + 1) for d in self.angle_dims]] = False
        ang = np.stack(cols, axis=-1)
        return np.concatenate([X[..., keep], np.sin(ang), np.cos(ang)], axis=-1)

    def fit_scaler(self, X, floor: float = 1e-10) -> None:
        X = self.features(X)
        self.shift = X.mean(axis=0)
        cov = np.cov(X - self.shift, rowvar=False).reshape(self.feature_dim, self.feature_dim)
        evals, evecs = np.linalg.eigh(cov)
        top = max(float(evals.max()), 1e-300)
        evals = np.maximum(evals, floor * top)
        # symmetric (ZCA) whitening keeps each coordinate's meaning
        self.whiten = (evecs / np.sqrt(evals)) @ evecs.T
        self.fitted_scaler = True

    def transform(self, X) -> np.ndarray:
        return (self.features(X) - self.shift) @ self.whiten

    def predict(self, X, truth=None) -> np.ndarray:
        """Normalized estimate for flattened histories (``(in_dim,)`` or ``(N, in_dim)``).

        ``truth`` is ignored; it exists so oracle stubs share the interface.
        """
        return self.net.forward(self.transform(X), mode="eval")

    def copy(self) -> "OSINetwork":
        other = OSINetwork.__new__(OSINetwork)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        other.shift, other.whiten = self.shift.copy(), self.whiten.copy()
        return other

    def container_payload(self, meta=None):
        arrays = []
        for k, (W, b) in enumerate(zip(self.net.weights, self.net.biases)):
            arrays += [(f"W{k}", W), (f"b{k}", b)]
        arrays += [("shift", self.shift), ("whiten", self.whiten)]
        m = {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "target_dim": self.target_dim, "h": self.h,
             "angle_dims": list(self.angle_dims), "fitted_scaler": self.fitted_scaler, **(meta or {})}
        return "osi", self.net.layer_dims, self.net.dropout, arrays, m


def _load_osi(header, arrays, net, path) -> OSINetwork:
    meta = header["meta"]
    osi = OSINetwork.__new__(OSINetwork)
    osi.obs_dim, osi.act_dim = int(meta["obs_dim"]), int(meta["act_dim"])
    osi.target_dim, osi.h = int(meta["target_dim"]), int(meta["h"])
    osi.angle_dims = tuple(int(d) for d in meta.get("angle_dims", ()))
    osi.in_dim = history_dim(osi.obs_dim, osi.act_dim, osi.h)
    f = osi.feature_dim
    if net.input_dim != f or net.output_dim != osi.target_dim:
        raise ShapeMismatchError(f"{path}: identifier dims disagree with layer_dims")
    shift, whiten = arrays.get("shift"), arrays.get("whiten")
    if shift is None or whiten is None or shift.shape != (f,) or whiten.shape != (f, f):
        raise ShapeMismatchError(f"{path}: bad input scaler arrays")
    osi.net, osi.shift, osi.whiten = net, shift.copy(), whiten.copy()
    osi.fitted_scaler = bool(meta.get("fitted_scaler", True))
    return osi


LOADERS["osi"] = _load_osi


class OracleOSI:
    """Stub identifier that returns the true normalized parameters."""

    oracle = True

    def predict(self, X, truth=None):
        if truth is None:
            raise ValueError("oracle identifier needs the true parameters")
        return np.array(truth, dtype=float, copy=True)


class ConstantOSI:
    """Stub identifier with a fixed (possibly wrong) output."""

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def predict(self, X, truth=None):
        X = np.asarray(X)
        return self.value.copy() if X.ndim == 1 else np.tile(self.value, (X.shape[0], 1))


def osi_predict(osi, H, bounds=None):
    """Estimate from one history segment.

    Returns ``(normalized, params)``: the raw network output and, when
    ``bounds`` are given, the denormalized :class:`ModelParams` for the
    leading ``len(bounds)`` components (no clamping).
    """
    x = flatten_history(H) if isinstance(H, HistorySegment) else np.asarray(H, dtype=float)
    z = osi.predict(x)
    if bounds is None:
        return z, None
    b = np.asarray(bounds, dtype=float)
    return z, ModelParams(denormalize(z[: b.shape[0]], b), b)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class OsiBuffer:
    """Accumulated ``(flattened history, normalized true parameters)`` pairs."""

    inputs: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    rounds: list = field(default_factory=list)

    def add(self, X, Y, round_index: int) -> None:
        X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
        if X.shape[0] != Y.shape[0]:
            raise ValueError("inputs and labels differ in length")
        self.inputs.append(X)
        self.labels.append(Y)
        self.rounds.append(np.full(X.shape[0], round_index))

    def __len__(self) -> int:
        return int(sum(x.shape[0] for x in self.inputs))

    def arrays(self):
        if not self.inputs:
            raise ValueError("identifier training buffer is empty")
        return np.concatenate(self.inputs), np.concatenate(self.labels)


@dataclass
class GeneratedData:
    inputs: np.ndarray  # (N, in_dim)
    labels: np.ndarray  # (N, target_dim)
    mu: np.ndarray  # (N, mu_dim) physical parameters that generated each entry
    lane: np.ndarray  # (N,) which parameter sample
    states: np.ndarray  # (steps, lanes, state_dim) simulated trajectory (after warm-up)
    estimates: np.ndarray  # (N, target_dim) what the policy was given


def generate_data(policy: GaussianPolicy, env: Env, mus, steps: int, rng: np.random.Generator, osi=None,
                  h: int = HISTORY_LEN) -> GeneratedData:
    """Simulate one lane per parameter vector in ``mus`` for ``steps`` stored steps.

    Each lane first fills its history with ``h`` steps under the true
    parameters (not stored). Afterwards every step stores ``(H_t, target_t)``
    and then acts with the mean action of ``pi(x_t, m)``, where ``m`` is the
    true normalized target (``osi=None``) or ``osi.predict(H_t)``. A lane that
    terminates restarts from a fresh initial state with the same parameters
    and refills its history.
    """
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    n = mus.shape[0]
    spec = env.spec
    hist = HistoryBuffer(n, spec.obs_dim, spec.act_dim, h)
    state = env.reset(mus, rng)
    hist.reset(np.arange(n), env.observe(state))
    X, Y, E, M, L, S = [], [], [], [], [], []
    stored = np.zeros(n, dtype=np.int64)
    while np.any(stored < steps):
        truth = env.target(state, mus)
        ready = hist.full & (stored < steps)
        m_in = truth
        if osi is not None and np.any(ready):
            est = osi.predict(hist.flatten(), truth=truth)
            m_in = np.where(ready[:, None], est, truth)
        if np.any(ready):
            X.append(hist.flatten()[ready])
            Y.append(truth[ready])
            E.append(m_in[ready])
            M.append(mus[ready])
            L.append(np.flatnonzero(ready))
        a = np.clip(policy.mean(hist.current_obs, m_in if policy.mu_dim else None), -1.0, 1.0)
        res = env.step(state, env.scale_action(a), mus)
        stored += ready
        hist.push(a, env.observe(res.next_state))
        state = res.next_state
        if np.any(ready):
            S.append(np.where(ready[:, None], state, np.nan))
        dead = np.flatnonzero(res.terminated)
        if dead.size:
            state[dead] = env.reset(mus[dead], rng)
            hist.reset(dead, env.observe(state[dead]))
    return GeneratedData(np.concatenate(X), np.concatenate(Y), np.concatenate(M), np.concatenate(L),
                         np.array(S), np.concatenate(E))


def generate_matched_data(policy, env, mus, steps, rng, h: int = HISTORY_LEN) -> GeneratedData:
    return generate_data(policy, env, mus, steps, rng, osi=None, h=h)


def generate_mismatched_data(policy, osi, env, mus, steps, rng, h: int = HISTORY_LEN) -> GeneratedData:
    if osi is None:
        raise ValueError("mismatched generation needs an identifier")
    return generate_data(policy, env, mus, steps, rng, osi=osi, h=h)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def fit_osi(buffer: OsiBuffer, osi: OSINetwork, config: OsiConfig, rng: np.random.Generator):
    """Minibatch Adam on mean squared error; dropout on while training.

    Returns the per-epoch mean training loss (``sum over components``,
    averaged over samples).
    """
    X, Y = buffer.arrays()
    if not osi.fitted_scaler:
        osi.fit_scaler(X, config.whiten_floor)
    Z = osi.transform(X)
    net = osi.net
    opt = Adam(net.n_params, lr=config.lr)
    n = Z.shape[0]
    losses = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            pred = net.forward(Z[idx], mode="train", rng=rng, record=True)
            err = pred - Y[idx]
            total += float(np.sum(err**2))
            g, _ = net.backward(2.0 * err / len(idx))
            net.set_params(opt.step(net.get_params(), g))
        losses.append(total / n)
    return osi, losses


def osi_mse(osi, X, Y) -> np.ndarray:
    """Per-component mean squared error in normalized units."""
    return np.mean((osi.predict(X) - Y) ** 2, axis=0)


OSI_LOG_FIELDS = ["iteration", "phase", "buffer_size", "train_mse", "heldout_mse", "up_osi_perf", "up_osi_std"]


def _evaluation(evaluate, it, osi):
    if evaluate is None:
        return float("nan"), float("nan")
    v = evaluate(it, osi)
    if isinstance(v, tuple):
        return float(v[0]), float(v[1])
    return float(v), float("nan")


def train_osi(policy: GaussianPolicy, env: Env, config: OsiConfig, seed: int, out_dir=None,
              evaluate: Optional[Callable[[int, OSINetwork], float]] = None, osi: Optional[OSINetwork] = None):
    """One matched round then ``iterations - 1`` mismatched rounds, refitting on the whole buffer.

    ``evaluate(iteration, osi)`` may return a scalar or a ``(mean, std)`` pair
    (e.g. UP-OSI performance over a parameter grid) that is logged per round. Returns
    ``(osi, history, buffer)``.
    """
    spec = env.spec
    osi = osi if osi is not None else OSINetwork(spec.obs_dim, spec.act_dim, spec.target_dim, config.history,
                                                 config.hidden, config.dropout, rng=make_rng(seed, 0),
                                                 angle_dims=env.angle_obs_dims)
    steps = max(1, int(round(config.seconds / (spec.dt * spec.frame_skip))))
    buffer = OsiBuffer()
    rng_ho = make_rng(seed, 1)
    ho_steps = max(1, int(round(config.heldout_seconds / (spec.dt * spec.frame_skip))))
    heldout = generate_matched_data(policy, env, env.sample_mu(rng_ho, config.heldout_mu_samples), ho_steps,
                                    rng_ho, config.history)
    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "osi_log.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OSI_LOG_FIELDS)
    history = []
    prev_ho = None
    try:
        for it in range(config.iterations):
            rng_gen = make_rng(seed, 2, it)
            mus = env.sample_mu(rng_gen, config.mu_samples)
            if it == 0:
                data = generate_matched_data(policy, env, mus, steps, rng_gen, config.history)
            else:
                data = generate_mismatched_data(policy, osi, env, mus, steps, rng_gen, config.history)
            buffer.add(data.inputs, data.labels, it)
            _, losses = fit_osi(buffer, osi, config, make_rng(seed, 3, it))
            X, Y = buffer.arrays()
            train_mse = float(np.sum(osi_mse(osi, X, Y)))
            ho_mse = float(np.sum(osi_mse(osi, heldout.inputs, heldout.labels)))
            perf, perf_std = _evaluation(evaluate, it, osi)
            row = {"iteration": it, "phase": "matched" if it == 0 else "mismatched", "buffer_size": len(buffer),
                   "train_mse": train_mse, "heldout_mse": ho_mse, "up_osi_perf": perf, "up_osi_std": perf_std,
                   "epoch_losses": losses}
            history.append(row)
            log.info("osi round %d buffer %d train %.5f heldout %.5f perf %.4f", it, len(buffer), train_mse,
                     ho_mse, perf)
            if writer is not None:
                writer.writerow([row[k] if not isinstance(row[k], float) else repr(round(row[k], 10))
                                 for k in OSI_LOG_FIELDS])
                fh.flush()
            if out is not None:
                save_network(osi, out / f"osi_iter{it + 1}.bin", meta={"iteration": it + 1})
            if (config.early_stop_tol > 0 and prev_ho is not None
                    and ho_mse > (1.0 - config.early_stop_tol) * prev_ho):
                break
            prev_ho = ho_mse
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_network(osi, out / "osi.bin")
    return osi, history, buffer
