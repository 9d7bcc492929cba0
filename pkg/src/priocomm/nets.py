"""Dense networks with hand-derived gradients, Adam, and Gaussian policy heads.

All math is float64 numpy. The topology is fixed: tanh hidden layers,
identity output layer. The policy head samples independent Gaussians for
the control dimensions and, when enabled, squashes one extra dimension
through the logistic sigmoid to produce a communication priority in (0, 1);
its log-density carries the exact change-of-variables term so the
importance ratios used downstream stay exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, InputError, NumericError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# Sampled priorities are nudged into the open interval so the inverse
# sigmoid stays defined even when the pre-squash value saturates float64.
_PRIORITY_EPS = 1e-12


def _as_float64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


class Mlp:
    """Fully connected network: tanh on hidden layers, identity on the output.

    ``weights[k]`` has shape ``(layer_sizes[k+1], layer_sizes[k])`` and acts
    on column vectors; batched inputs use rows. Parameters are always
    float64 and kept finite; an update that breaks this is a hard error.
    """

    def __init__(self, layer_sizes, rng=None, out_scale: float = 1.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"layer_sizes must be >=2 positive ints, got {layer_sizes}")
        self.layer_sizes = sizes
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(gen.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        if out_scale != 1.0:
            self.weights[-1] *= out_scale

    @classmethod
    def from_arrays(cls, weights, biases) -> "Mlp":
        """Build a network from explicit parameter arrays (validated)."""
        ws = [np.array(w, dtype=np.float64) for w in weights]
        bs = [np.array(b, dtype=np.float64) for b in biases]
        if len(ws) != len(bs) or not ws:
            raise ConfigError("need one bias vector per weight matrix")
        sizes = [ws[0].shape[1]] + [w.shape[0] for w in ws]
        net = cls(sizes, rng=0)
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != net.weights[k].shape or b.shape != net.biases[k].shape:
                raise ConfigError(f"layer {k}: shape {w.shape}/{b.shape} breaks the size chain")
        net.weights = ws
        net.biases = bs
        return net

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list (weight matrices then bias vectors)."""
        return list(self.weights) + list(self.biases)

    def _forward_acts(self, x2d: np.ndarray) -> list[np.ndarray]:
        # acts[0] is the input; acts[k+1] the post-activation output of layer k.
        acts = [x2d]
        h = x2d
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if k == last else np.tanh(z)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite activation after layer {k}")
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        """Evaluate the network on a single vector or a (batch, in_dim) array."""
        arr = _as_float64(x, "input")
        single = arr.ndim == 1
        x2d = arr[None, :] if single else arr
        if x2d.ndim != 2 or x2d.shape[1] != self.in_dim:
            raise ConfigError(f"input width {arr.shape} incompatible with in_dim={self.in_dim}")
        y = self._forward_acts(x2d)[-1]
        return y[0] if single else y

    def backward(self, x, output_grad) -> "MlpGradients":
        """Gradients of a scalar loss w.r.t. every weight and bias.

        ``output_grad`` is dL/d(output); for batched input the returned
        gradients are summed over the batch, so fold any 1/B into it.
        """
        arr = _as_float64(x, "input")
        g = np.asarray(output_grad, dtype=np.float64)
        single = arr.ndim == 1
        x2d = arr[None, :] if single else arr
        g2d = g[None, :] if single else g
        if x2d.shape[1] != self.in_dim:
            raise ConfigError(f"input width {arr.shape} incompatible with in_dim={self.in_dim}")
        if g2d.shape != (x2d.shape[0], self.out_dim):
            raise ConfigError(f"output_grad shape {g.shape} does not match output ({x2d.shape[0]}, {self.out_dim})")
        acts = self._forward_acts(x2d)
        n_layers = len(self.weights)
        grad_w: list[np.ndarray | None] = [None] * n_layers
        grad_b: list[np.ndarray | None] = [None] * n_layers
        for k in range(n_layers - 1, -1, -1):
            if not np.all(np.isfinite(g2d)):
                raise NumericError(f"non-finite gradient flowing into layer {k}")
            grad_w[k] = g2d.T @ acts[k]
            grad_b[k] = g2d.sum(axis=0)
            if k > 0:
                # acts[k] is the tanh output of layer k-1.
                g2d = (g2d @ self.weights[k]) * (1.0 - acts[k] ** 2)
        return MlpGradients(grad_w, grad_b)


@dataclass
class MlpGradients:
    """Per-layer gradients mirroring :class:`Mlp` parameter shapes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def as_list(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


@dataclass
class AgentAction:
    """Continuous control vector plus an optional communication priority."""

    control: np.ndarray
    priority: float | None = None


def _stable_sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


class GaussianPolicyHead:
    """Diagonal Gaussian over control dims; last dim sigmoid-squashed to (0,1).

    ``log_std`` is state-independent and learnable; keep it inside
    [LOG_STD_MIN, LOG_STD_MAX] via :meth:`clamp_log_std` after updates.
    """

    def __init__(self, n_control: int, with_priority: bool = True,
                 log_std_init: float = math.log(0.5)):
        if n_control < 0 or (n_control == 0 and not with_priority):
            raise ConfigError("policy head needs at least one output dimension")
        self.n_control = int(n_control)
        self.with_priority = bool(with_priority)
        self.log_std = np.full(self.mean_output_dim, float(log_std_init))

    @property
    def mean_output_dim(self) -> int:
        return self.n_control + (1 if self.with_priority else 0)

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def entropy(self) -> float:
        """Analytic entropy of the pre-squash diagonal Gaussian."""
        return float(np.sum(0.5 + _HALF_LOG_2PI + self.log_std))

    def _check_mean(self, mean_raw) -> np.ndarray:
        mean = _as_float64(mean_raw, "mean_raw")
        if mean.shape != (self.mean_output_dim,):
            raise ConfigError(f"mean_raw must have length {self.mean_output_dim}, got {mean.shape}")
        return mean

    def event_vector(self, action: AgentAction) -> np.ndarray:
        """Map an action to pre-squash event space (priority -> logit)."""
        control = _as_float64(action.control, "action.control")
        if control.shape != (self.n_control,):
            raise ConfigError(f"control must have length {self.n_control}, got {control.shape}")
        if not self.with_priority:
            return control
        p = action.priority
        if p is None or not (0.0 < p < 1.0):
            raise InputError(f"priority must lie strictly inside (0,1), got {p!r}")
        z = math.log(p) - math.log1p(-p)
        return np.append(control, z)

    def _log_prob_from_event(self, mean: np.ndarray, x: np.ndarray,
                             priority: float | None) -> float:
        std = np.exp(self.log_std)
        u = (x - mean) / std
        lp = float(np.sum(-_HALF_LOG_2PI - self.log_std - 0.5 * u * u))
        if self.with_priority:
            # change of variables through the sigmoid: subtract log sigma'(z)
            lp -= math.log(priority) + math.log1p(-priority)
        return lp

    def sample(self, mean_raw, rng: np.random.Generator) -> tuple[AgentAction, float]:
        """Draw an action; returns it with the exact joint log-probability."""
        mean = self._check_mean(mean_raw)
        raw = mean + np.exp(self.log_std) * rng.standard_normal(self.mean_output_dim)
        if not np.all(np.isfinite(raw)):
            raise NumericError("sampled pre-squash action is non-finite")
        if self.with_priority:
            p = _stable_sigmoid(raw[-1])
            p = min(max(p, _PRIORITY_EPS), 1.0 - _PRIORITY_EPS)
            action = AgentAction(raw[:self.n_control].copy(), float(p))
        else:
            action = AgentAction(raw.copy(), None)
        logp, _ = self.log_prob_and_entropy(mean, action)
        return action, logp

    def log_prob_and_entropy(self, mean_raw, action: AgentAction) -> tuple[float, float]:
        """Log-density of ``action`` under the head, plus the policy entropy.

        Consistent with :meth:`sample` by construction: both derive the
        density from the action itself (priority inverted through logit).
        """
        mean = self._check_mean(mean_raw)
        x = self.event_vector(action)
        return self._log_prob_from_event(mean, x, action.priority), self.entropy()

    def mode(self, mean_raw) -> AgentAction:
        """Deterministic action: the Gaussian mean, priority squashed."""
        mean = self._check_mean(mean_raw)
        if not self.with_priority:
            return AgentAction(mean.copy(), None)
        p = _stable_sigmoid(mean[-1])
        p = min(max(p, _PRIORITY_EPS), 1.0 - _PRIORITY_EPS)
        return AgentAction(mean[:self.n_control].copy(), float(p))

    def event_matrix(self, controls: np.ndarray, priorities: np.ndarray | None) -> np.ndarray:
        """Batched :meth:`event_vector`: rows of controls plus logit(priority)."""
        controls = _as_float64(controls, "controls").reshape(-1, self.n_control)
        if not self.with_priority:
            return controls
        p = _as_float64(priorities, "priorities").reshape(-1)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise InputError("priorities must lie strictly inside (0,1)")
        z = np.log(p) - np.log1p(-p)
        return np.concatenate([controls, z[:, None]], axis=1)

    def batch_log_prob(self, means: np.ndarray, events: np.ndarray,
                       priorities: np.ndarray | None) -> np.ndarray:
        """Row-wise log-density for pre-computed event rows (see event_matrix)."""
        std = np.exp(self.log_std)
        u = (events - means) / std
        lp = np.sum(-_HALF_LOG_2PI - self.log_std - 0.5 * u * u, axis=1)
        if self.with_priority:
            p = np.asarray(priorities, dtype=np.float64).reshape(-1)
            lp = lp - (np.log(p) + np.log1p(-p))
        return lp


@dataclass
class AdamState:
    """Adam accumulators for a fixed list of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              names: list[str] | None = None) -> tuple[list[np.ndarray], AdamState]:
    """Standard Adam with bias correction; updates ``params`` in place."""
    if state.m is None or len(params) != len(state.m) or len(grads) != len(params):
        raise ConfigError("adam state does not match the parameter list")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        name = names[k] if names else f"param[{k}]"
        if p.shape != g.shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"{name}: non-finite gradient")
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not np.all(np.isfinite(p)):
            raise NumericError(f"{name}: update produced non-finite parameter")
    return params, state


def clip_grads_by_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# --- checkpoint file format ---------------------------------------------
#
#   bytes 0..7   magic b"PCCKPT01"
#   bytes 8..11  format version, uint32 little-endian (currently 1)
#   bytes 12..19 header length H, uint64 little-endian
#   H bytes      UTF-8 JSON: {"meta": {...}, "arrays": [{"name","shape"}...]}
#   rest         the arrays' float64 little-endian bytes, row-major, in
#                header order, concatenated without padding
#
# Round-trips are bit-exact because the float64 payload is stored verbatim.

_CKPT_MAGIC = b"PCCKPT01"
_CKPT_VERSION = 1


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    arrays: dict[str, np.ndarray] = {}
    offset = 20 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated checkpoint payload in {path}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    return arrays, header["meta"]
