"""Dense policy/value networks, flat parameter views and plain SGD.

Parameters are immutable snapshots; every update returns a new one. Two
forward paths exist: a plain numpy path used while acting, and a taped path
(``Net``) used whenever gradients are needed. The taped path keeps each
layer's input and pre-activation so per-record gradients can be contracted
against a fixed vector without being materialised (the "ghost" product).
"""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from rlattrib.autodiff import Tensor

CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpParams:
    """Weights are stored ``(in, out)`` so a layer is ``x @ W + b``."""

    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeMismatch("weights and biases differ in layer count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[0]} != previous output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(tuple(ws), tuple(bs), self.activation)

    def layer_slices(self, offset: int = 0):
        """``[(weight_slice, bias_slice), ...]`` into the flat vector."""
        out, pos = [], offset
        for w, b in zip(self.weights, self.biases):
            ws = slice(pos, pos + w.size)
            pos += w.size
            out.append((ws, slice(pos, pos + b.size)))
            pos += b.size
        return out


@dataclass(frozen=True)
class PolicyValueParams:
    policy: MlpParams
    value: MlpParams
    round: int = 0
    step: int = 0

    @property
    def n_params(self) -> int:
        return self.policy.n_params + self.value.n_params

    @property
    def segments(self) -> dict:
        p = self.policy.n_params
        return {"policy": slice(0, p), "value": slice(p, p + self.value.n_params)}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.policy.flat(), self.value.flat()])

    def with_flat(self, vec: np.ndarray, **meta) -> "PolicyValueParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeMismatch(f"flat vector {vec.shape} != ({self.n_params},)")
        p = self.policy.n_params
        return replace(self, policy=self.policy.from_flat(vec[:p]), value=self.value.from_flat(vec[p:]), **meta)


@dataclass(frozen=True)
class GradVector:
    values: np.ndarray
    segments: dict = field(default_factory=dict)

    def __len__(self):
        return self.values.shape[0]

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.segments[name]]

    def __add__(self, other: "GradVector") -> "GradVector":
        return GradVector(self.values + other.values, self.segments)

    def __mul__(self, c: float) -> "GradVector":
        return GradVector(self.values * c, self.segments)

    __rmul__ = __mul__

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def dot(g1: GradVector, g2: GradVector) -> float:
    if len(g1) != len(g2):
        raise ShapeMismatch(f"gradient lengths differ: {len(g1)} vs {len(g2)}")
    return float(g1.values @ g2.values)


# initialisation -------------------------------------------------------------

def orthogonal(shape: tuple, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(sizes: list[int], rng: np.random.Generator, out_gain: float,
             hidden_gain: float = np.sqrt(2.0), activation: str = "tanh") -> MlpParams:
    ws, bs = [], []
    for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else hidden_gain
        ws.append(orthogonal((m, n), gain, rng))
        bs.append(np.zeros(n))
    return MlpParams(tuple(ws), tuple(bs), activation)


def init_policy_value(obs_dim: int, n_actions: int, rng: np.random.Generator,
                      hidden: tuple = (64, 64)) -> PolicyValueParams:
    policy = init_mlp([obs_dim, *hidden, n_actions], rng, out_gain=0.01)
    value = init_mlp([obs_dim, *hidden, 1], rng, out_gain=1.0)
    return PolicyValueParams(policy, value)


# plain forward ----------------------------------------------------------------

def _act(x, activation):
    return np.tanh(x) if activation == "tanh" else x


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (output, last hidden activation)."""
    if x.shape[-1] != params.in_dim:
        raise ShapeMismatch(f"input width {x.shape[-1]} != {params.in_dim}")
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _act(h @ w + b, params.activation)
    return h @ params.weights[-1] + params.biases[-1], h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def policy_forward(params: PolicyValueParams, obs: np.ndarray):
    """(logits, log_probs, hidden) for one observation or a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    logits, hidden = mlp_forward(params.policy, obs)
    return logits, log_softmax(logits), hidden


def value_forward(params: PolicyValueParams, obs: np.ndarray):
    obs = np.asarray(obs, dtype=np.float64)
    out, _ = mlp_forward(params.value, obs)
    return out[..., 0] if out.ndim > 1 else float(out[0])


# taped forward ----------------------------------------------------------------

@dataclass
class LayerTape:
    inputs: np.ndarray   # (N, in)
    pre: Tensor          # (N, out)
    w_slice: slice
    b_slice: slice


class Net:
    """Differentiable view of a ``PolicyValueParams`` snapshot.

    Build an objective from ``log_probs`` / ``values`` / ``logits``, call
    ``backward`` on it, then read ``grad_vector()``. Every forward call is
    recorded in ``tapes`` for ghost products.
    """

    def __init__(self, params: PolicyValueParams):
        self.params = params
        seg = params.segments
        self._leaves = {}
        for name, mlp in (("policy", params.policy), ("value", params.value)):
            self._leaves[name] = (
                [Tensor(w) for w in mlp.weights],
                [Tensor(b) for b in mlp.biases],
                mlp.layer_slices(seg[name].start),
                mlp.activation,
            )
        self.tapes: list[LayerTape] = []
        self.hidden = {}

    def _run(self, name: str, obs: np.ndarray) -> Tensor:
        ws, bs, slices, activation = self._leaves[name]
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[1] != ws[0].shape[0]:
            raise ShapeMismatch(f"input width {obs.shape[1]} != {ws[0].shape[0]}")
        h = Tensor(obs, requires_grad=False)
        for i, (w, b, (wsl, bsl)) in enumerate(zip(ws, bs, slices)):
            z = h @ w + b
            self.tapes.append(LayerTape(h.data, z, wsl, bsl))
            h = z.tanh() if (i < len(ws) - 1 and activation == "tanh") else z
            if i == len(ws) - 2:
                self.hidden[name] = h.data
        return h

    def logits(self, obs) -> Tensor:
        return self._run("policy", obs)

    def log_probs(self, obs) -> Tensor:
        return self.logits(obs).log_softmax()

    def values(self, obs) -> Tensor:
        return self._run("value", obs).column(0)

    def grad_vector(self) -> GradVector:
        out = np.zeros(self.params.n_params)
        for ws, bs, slices, _ in self._leaves.values():
            for w, b, (wsl, bsl) in zip(ws, bs, slices):
                if w.grad is not None:
                    out[wsl] = w.grad.ravel()
                if b.grad is not None:
                    out[bsl] = b.grad
        return GradVector(out, self.params.segments)

    def ghost_dot(self, target: GradVector) -> np.ndarray:
        """Per-row ``<target, d obj_i / d theta>`` after ``backward`` on ``sum_i obj_i``.

        Valid when each row's objective depends on that row of every
        forward call only (no cross-row coupling).
        """
        tv = target.values
        total = None
        for tape in self.tapes:
            delta = tape.pre.grad
            if delta is None:
                continue
            tw = tv[tape.w_slice].reshape(tape.inputs.shape[1], delta.shape[1])
            part = ((tape.inputs @ tw) * delta).sum(axis=1) + delta @ tv[tape.b_slice]
            total = part if total is None else total + part
        return total


def per_sample_grad(params: PolicyValueParams, objective: Callable[[Net], Tensor]) -> GradVector:
    """Exact gradient of a scalar objective built on ``Net(params)``."""
    net = Net(params)
    out = objective(net)
    if not isinstance(out, Tensor):
        return GradVector(np.zeros(params.n_params), params.segments)
    out.backward()
    g = net.grad_vector()
    if not np.all(np.isfinite(g.values)):
        raise NonFinite("non-finite gradient entry")
    return g


def clip_by_global_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


def sgd_step(params: PolicyValueParams, batch_grad: GradVector, lr: float,
             max_grad_norm: float = np.inf) -> PolicyValueParams:
    """Descend along ``batch_grad`` (a loss gradient) after global-norm clipping."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    g = clip_by_global_norm(batch_grad.values, max_grad_norm)
    return params.with_flat(params.flat() - lr * g, step=params.step + 1)


# checkpoints --------------------------------------------------------------------

def save_params(params: PolicyValueParams, path) -> None:
    arrays = {"version": np.array(CHECKPOINT_VERSION), "round": np.array(params.round),
              "step": np.array(params.step)}
    for name, mlp in (("policy", params.policy), ("value", params.value)):
        arrays[f"{name}_activation"] = np.array(mlp.activation)
        arrays[f"{name}_layers"] = np.array(len(mlp.weights))
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            arrays[f"{name}_W{i}"] = w
            arrays[f"{name}_b{i}"] = b
    # np.savez stamps entries with the current time; fixed timestamps keep files byte-stable
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0)), entry.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> PolicyValueParams:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        nets = {}
        for name in ("policy", "value"):
            n = int(data[f"{name}_layers"])
            nets[name] = MlpParams(
                tuple(data[f"{name}_W{i}"].copy() for i in range(n)),
                tuple(data[f"{name}_b{i}"].copy() for i in range(n)),
                str(data[f"{name}_activation"]),
            )
        return PolicyValueParams(nets["policy"], nets["value"], int(data["round"]), int(data["step"]))
