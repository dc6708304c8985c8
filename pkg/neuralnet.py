"""
Fully connected OPF predictor with hand-written backpropagation.

Parameters live in one flat float64 vector; ``MlpArch.layout()`` maps each
layer to its slice so meta-learning can treat a model as a single vector.
"""

import base64
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from grid import Network


logger = logging.getLogger(__name__)

# Hidden widths per bus count, as tabulated for the benchmark cases.
TABLE_ARCHS = {
    14: (64, 32, 16),
    30: (128, 64, 32),
    118: (256, 128, 64),
}
DEFAULT_HIDDEN = (64, 32, 16)


class ShapeError(ValueError):
    """Raised on a dimension mismatch."""


class NonFiniteError(ArithmeticError):
    """Raised when a loss, gradient or update is not finite."""


@dataclass(frozen=True)
class LayerSlot:
    w_offset: int
    fan_in: int
    fan_out: int

    @property
    def b_offset(self) -> int:
        return self.w_offset + self.fan_in * self.fan_out

    @property
    def end(self) -> int:
        return self.b_offset + self.fan_out


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d <= 0 for d in dims):
            raise ShapeError(f"all layer widths must be positive, got {dims}")
        if self.hidden_activation != "relu" or self.output_activation != "sigmoid":
            raise ShapeError("only relu hidden layers with a sigmoid output are supported")

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def layout(self) -> List[LayerSlot]:
        slots, offset = [], 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            slot = LayerSlot(offset, fan_in, fan_out)
            slots.append(slot)
            offset = slot.end
        return slots

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.dims[:-1], self.dims[1:]))

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["hidden_dims"] = list(self.hidden_dims)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "MlpArch":
        return cls(**{**doc, "hidden_dims": tuple(doc["hidden_dims"])})


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Immutable flat parameter vector."""

    values: np.ndarray
    arch: MlpArch

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.arch.n_params,):
            raise ShapeError(f"expected {self.arch.n_params} parameters, got {values.shape}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        out = []
        for slot in self.arch.layout():
            w = self.values[slot.w_offset : slot.b_offset].reshape(slot.fan_in, slot.fan_out)
            b = self.values[slot.b_offset : slot.end]
            out.append((w, b))
        return out

    def with_values(self, values: np.ndarray) -> "MlpParams":
        return replace(self, values=values)


def arch_for_network(net: Network, hidden_dims: Optional[Sequence[int]] = None) -> MlpArch:
    """Predictor architecture for a case: tabulated widths when known, else the default."""
    if hidden_dims is None:
        hidden_dims = TABLE_ARCHS.get(net.n_bus, DEFAULT_HIDDEN)
    return MlpArch(
        input_dim=2 * len(net.load_buses),
        hidden_dims=tuple(int(h) for h in hidden_dims),
        output_dim=2 * net.n_gen - 1,
    )


def init_params(arch: MlpArch, seed: Union[int, Sequence[int]]) -> MlpParams:
    """He-style uniform fan-in initialisation with zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(arch.n_params)
    for slot in arch.layout():
        bound = np.sqrt(6.0 / slot.fan_in)
        values[slot.w_offset : slot.b_offset] = rng.uniform(-bound, bound, slot.fan_in * slot.fan_out)
    return MlpParams(values, arch)


def _as_batch(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} has shape {x.shape}, expected (*, {width})")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray) -> List[np.ndarray]:
    activations = [x]
    layers = params.layers()
    for i, (w, b) in enumerate(layers):
        z = activations[-1] @ w + b
        activations.append(expit(z) if i == len(layers) - 1 else np.maximum(z, 0.0))
    return activations


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Predict scaled targets; returns a vector for one input or a matrix for a batch."""
    single = np.ndim(x) == 1
    out = _forward_cache(params, _as_batch(x, params.arch.input_dim, "input"))[-1]
    return out[0] if single else out


def batch_loss(params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean over samples of the squared error summed over outputs."""
    x = _as_batch(x, params.arch.input_dim, "input")
    y = _as_batch(y, params.arch.output_dim, "target")
    if len(x) == 0 or len(x) != len(y):
        raise ShapeError(f"batch sizes differ or are empty: {len(x)} inputs, {len(y)} targets")
    err = forward(params, x) - y
    return float(np.sum(err * err) / len(x))


def loss_and_grad(params: MlpParams, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    x = _as_batch(x, params.arch.input_dim, "input")
    y = _as_batch(y, params.arch.output_dim, "target")
    k = len(x)
    if k == 0 or k != len(y):
        raise ShapeError(f"batch sizes differ or are empty: {k} inputs, {len(y)} targets")

    acts = _forward_cache(params, x)
    err = acts[-1] - y
    loss = float(np.sum(err * err) / k)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")

    grad = np.zeros(params.arch.n_params)
    slots = params.arch.layout()
    layers = params.layers()
    out = acts[-1]
    delta = (2.0 / k) * err * out * (1.0 - out)
    for i in range(len(slots) - 1, -1, -1):
        slot = slots[i]
        grad[slot.w_offset : slot.b_offset] = (acts[i].T @ delta).ravel()
        grad[slot.b_offset : slot.end] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (acts[i] > 0.0)
    return loss, grad


@dataclass
class OptimState:
    kind: str  # "adam" | "sgd"
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay nonnegative")


def adam(learning_rate: float = 0.001, weight_decay: float = 0.001) -> OptimState:
    return OptimState("adam", learning_rate, weight_decay)


def sgd(learning_rate: float = 0.1, weight_decay: float = 0.001) -> OptimState:
    return OptimState("sgd", learning_rate, weight_decay)


def step(state: OptimState, params: MlpParams, grad: np.ndarray) -> Tuple[MlpParams, OptimState]:
    """One optimizer update with L2 decay coupled into the gradient."""
    w = params.values
    if grad.shape != w.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {w.shape}")
    g = grad + state.weight_decay * w
    if state.kind == "sgd":
        new_w = w - state.learning_rate * g
        new_state = replace(state, t=state.t + 1)
    else:
        m = np.zeros_like(w) if state.m is None else state.m
        v = np.zeros_like(w) if state.v is None else state.v
        t = state.t + 1
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_w = w - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = replace(state, m=m, v=v, t=t)
    if not np.all(np.isfinite(new_w)):
        raise NonFiniteError(f"non-finite parameters after {state.kind} step {state.t + 1}")
    return params.with_values(new_w), new_state


# ---------------------------------------------------------------------------
# Target scaling
# ---------------------------------------------------------------------------

def target_bounds(net: Network) -> Tuple[np.ndarray, np.ndarray]:
    """Lower and upper physical bounds of [P_G non-slack; V_G all generators]."""
    gens = net.generators
    ns = net.non_slack_generators
    lo = np.concatenate([[gens[i].p_min for i in ns], [net.buses[g.bus].v_min for g in gens]])
    hi = np.concatenate([[gens[i].p_max for i in ns], [net.buses[g.bus].v_max for g in gens]])
    return lo, hi


def scale_targets(net: Network, p_gen_nonslack: np.ndarray, v_gen: np.ndarray) -> np.ndarray:
    lo, hi = target_bounds(net)
    raw = np.concatenate([np.asarray(p_gen_nonslack, float), np.asarray(v_gen, float)])
    return (raw - lo) / (hi - lo)


def unscale_outputs(net: Network, y_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Map scaled outputs back to (P_G of non-slack generators, V_G of all generators)."""
    lo, hi = target_bounds(net)
    y_hat = np.asarray(y_hat, dtype=float)
    if y_hat.shape[-1] != lo.size:
        raise ShapeError(f"expected {lo.size} outputs, got {y_hat.shape[-1]}")
    raw = y_hat * (hi - lo) + lo
    n_p = net.n_gen - 1
    return raw[..., :n_p], raw[..., n_p:]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], params: MlpParams, header: Optional[Dict[str, Any]] = None) -> None:
    """Write a JSON header plus base64 little-endian float64 payload."""
    doc = dict(header or {})
    doc["arch"] = params.arch.to_dict()
    doc["n_params"] = params.arch.n_params
    doc["values_b64"] = base64.b64encode(params.values.astype("<f8").tobytes()).decode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: Union[str, Path]) -> Tuple[MlpParams, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    arch = MlpArch.from_dict(doc.pop("arch"))
    values = np.frombuffer(base64.b64decode(doc.pop("values_b64")), dtype="<f8").astype(np.float64)
    if values.size != doc.get("n_params", arch.n_params):
        raise ShapeError(f"checkpoint {path} payload has {values.size} values")
    return MlpParams(values, arch), doc
