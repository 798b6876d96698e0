"""Feed-forward classifier with inverted dropout, written directly in numpy.

Parameters live in one flat float64 vector; :func:`param_layout` says which
contiguous span belongs to which weight matrix or bias.  Every array-valued
function accepts arbitrary leading batch dimensions, so the same code path
serves a single feature vector, a minibatch, and a stack of Monte-Carlo
passes of shape ``(K, n, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PROB_EPS = 1e-12
CHECKPOINT_HEADER = "#amalgam-checkpoint v1"

_ACTIVATIONS = ("relu", "tanh")


class ContractViolation(ValueError):
    """Raised when array shapes or values break an operation's contract."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    dropout_rate: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


class Span(NamedTuple):
    layer: int
    kind: str  # "W" or "b"
    start: int
    stop: int
    shape: tuple[int, ...]


def param_layout(spec: ModelSpec) -> list[Span]:
    """Contiguous spans of the flat parameter vector, weights before biases per layer."""
    spans = []
    offset = 0
    sizes = spec.layer_sizes
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        spans.append(Span(layer, "W", offset, offset + fan_in * fan_out, (fan_in, fan_out)))
        offset += fan_in * fan_out
        spans.append(Span(layer, "b", offset, offset + fan_out, (fan_out,)))
        offset += fan_out
    return spans


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Return ``[(W, b), ...]`` as views into ``params``."""
    params = np.asarray(params)
    if params.shape != (spec.num_params,):
        raise ContractViolation(
            f"parameter vector has shape {params.shape}, spec implies ({spec.num_params},)"
        )
    spans = param_layout(spec)
    return [
        (params[w.start:w.stop].reshape(w.shape), params[b.start:b.stop])
        for w, b in zip(spans[0::2], spans[1::2])
    ]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.num_params)
    for span in param_layout(spec):
        if span.kind == "W":
            fan_in, fan_out = span.shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[span.start:span.stop] = rng.uniform(-limit, limit, size=span.stop - span.start)
    return params


@dataclass(frozen=True)
class DropoutMask:
    """Per-hidden-layer multipliers with entries in ``{0, 1/(1-rate)}``.

    Each layer array broadcasts against that layer's activations, so shape
    ``(H,)`` applies one mask to a whole batch and ``(K, n, H)`` gives every
    pass and instance its own mask.
    """

    layers: tuple[np.ndarray, ...]
    keep_prob: float

    @classmethod
    def sample(cls, spec: ModelSpec, rng: np.random.Generator, batch_shape=(),
               rate: float | None = None) -> "DropoutMask":
        rate = spec.dropout_rate if rate is None else rate
        keep = 1.0 - rate
        layers = tuple(
            (rng.random((*batch_shape, h)) < keep) / keep for h in spec.hidden_dims
        )
        return cls(layers, keep)

    @classmethod
    def from_uniforms(cls, spec: ModelSpec, uniforms: np.ndarray, rate: float) -> "DropoutMask":
        """Build masks from pre-drawn uniforms whose last axis spans all hidden units."""
        if uniforms.shape[-1] != sum(spec.hidden_dims):
            raise ContractViolation(
                f"uniform block has {uniforms.shape[-1]} columns, "
                f"hidden units total {sum(spec.hidden_dims)}"
            )
        keep = 1.0 - rate
        bounds = np.cumsum((0, *spec.hidden_dims))
        return cls(
            tuple((uniforms[..., a:b] < keep) / keep for a, b in zip(bounds[:-1], bounds[1:])),
            keep,
        )


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def _check_mask(spec: ModelSpec, mask: DropoutMask | None):
    if mask is None:
        return
    if len(mask.layers) != len(spec.hidden_dims):
        raise ContractViolation(
            f"mask has {len(mask.layers)} layers, network has {len(spec.hidden_dims)} hidden layers"
        )
    for i, (m, h) in enumerate(zip(mask.layers, spec.hidden_dims)):
        if m.shape[-1] != h:
            raise ContractViolation(f"mask for hidden layer {i} has width {m.shape[-1]}, expected {h}")


def _forward_cache(spec, params, x, mask):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (spec.input_dim,):
        raise ContractViolation(
            f"layer 0 expects input width {spec.input_dim}, got shape {x.shape}"
        )
    _check_mask(spec, mask)
    layers = unflatten(spec, params)
    pre, post = [], [x]
    h = x
    for i, (W, b) in enumerate(layers[:-1]):
        z = h @ W + b
        a = _activate(spec.activation, z)
        if mask is not None:
            a = a * mask.layers[i]
        pre.append(z)
        post.append(a)
        h = a
    W, b = layers[-1]
    return h @ W + b, pre, post


def forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray,
            mask: DropoutMask | None = None) -> np.ndarray:
    """Logits for ``x``; without a mask this is the deterministic network."""
    logits, _, _ = _forward_cache(spec, params, x, mask)
    return logits


def backward(spec: ModelSpec, params: np.ndarray, x: np.ndarray,
             mask: DropoutMask | None, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(logits * upstream)`` with respect to the flat parameters.

    Batch dimensions of ``x`` and ``upstream`` are summed over.
    """
    logits, pre, post = _forward_cache(spec, params, x, mask)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != logits.shape:
        raise ContractViolation(
            f"upstream gradient shape {upstream.shape} does not match logits {logits.shape}"
        )
    layers = unflatten(spec, params)
    grad = np.zeros(spec.num_params)
    grads = unflatten(spec, grad)
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        a_in = np.broadcast_to(post[i], delta.shape[:-1] + post[i].shape[-1:])
        gW, gb = grads[i]
        gW += a_in.reshape(-1, a_in.shape[-1]).T @ delta.reshape(-1, delta.shape[-1])
        gb += delta.reshape(-1, delta.shape[-1]).sum(axis=0)
        if i == 0:
            break
        delta = delta @ layers[i][0].T
        if mask is not None:
            delta = delta * mask.layers[i - 1]
        # post[i] holds the masked activation; the unmasked one is needed for tanh'.
        z = pre[i - 1]
        delta = delta * _activate_grad(spec.activation, z, _activate(spec.activation, z))
    return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def weighted_kl_loss(student: np.ndarray, target: np.ndarray, weight=1.0,
                     direction: str = "forward") -> tuple[np.ndarray, np.ndarray]:
    """Instance-weighted KL loss and its gradient w.r.t. the student logits.

    ``direction="forward"`` computes ``weight * KL(target || student)``, the
    default distillation objective.  ``"reverse"`` computes
    ``weight * KL(student || target)``.  Probabilities are clamped below at
    ``PROB_EPS`` before logs are taken.
    """
    s = np.asarray(student, dtype=float)
    t = np.asarray(target, dtype=float)
    if s.shape != t.shape:
        raise ContractViolation(f"student {s.shape} and target {t.shape} differ in shape")
    weight = np.asarray(weight, dtype=float)
    if np.any(weight < 0) or not np.all(np.isfinite(weight)):
        raise ContractViolation("instance weights must be finite and non-negative")
    log_s = np.log(np.maximum(s, PROB_EPS))
    log_t = np.log(np.maximum(t, PROB_EPS))
    if direction == "forward":
        kl = np.where(t > 0, t * (log_t - log_s), 0.0).sum(axis=-1)
        grad = s - t
    elif direction == "reverse":
        gap = log_s - log_t
        kl = np.where(s > 0, s * gap, 0.0).sum(axis=-1)
        grad = s * (gap - kl[..., None])
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return weight * kl, weight[..., None] * grad


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray,
                   spec: ModelSpec | None = None) -> np.ndarray:
    """Update ``params`` in place and return it."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise ContractViolation(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = int(np.argmax(bad))
        where = f"index {idx}"
        if spec is not None:
            span = next(s for s in param_layout(spec) if s.start <= idx < s.stop)
            where = f"layer {span.layer} {span.kind} span [{span.start}, {span.stop})"
        raise FloatingPointError(f"non-finite gradient at {where}")
    state.step += 1
    if state.kind == "sgd":
        params -= state.learning_rate * grads
        return params
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ContractViolation("Adam moments do not match the parameter vector")
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# -- checkpoint text format -------------------------------------------------

def spec_lines(spec: ModelSpec) -> list[str]:
    return [
        f"input_dim={spec.input_dim}",
        f"hidden_dims={','.join(str(h) for h in spec.hidden_dims)}",
        f"num_classes={spec.num_classes}",
        f"dropout_rate={spec.dropout_rate!r}",
        f"activation={spec.activation}",
    ]


def dumps_checkpoint(spec: ModelSpec, params: np.ndarray) -> str:
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.num_params,):
        raise ContractViolation(f"parameter count {params.size} != {spec.num_params}")
    if not np.all(np.isfinite(params)):
        raise ContractViolation("parameters must be finite")
    lines = [CHECKPOINT_HEADER, *spec_lines(spec), f"num_params={spec.num_params}"]
    lines.extend(repr(float(p)) for p in params)
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str, first_line: int = 1) -> tuple[ModelSpec, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        got = lines[0] if lines else "<empty>"
        raise ValueError(f"line {first_line}: expected header {CHECKPOINT_HEADER!r}, got {got!r}")
    fields = {}
    for offset, line in enumerate(lines[1:7], start=1):
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {first_line + offset}: expected key=value, got {line!r}")
        fields[key] = value
    try:
        hidden = fields["hidden_dims"]
        spec = ModelSpec(
            input_dim=int(fields["input_dim"]),
            hidden_dims=tuple(int(h) for h in hidden.split(",")) if hidden else (),
            num_classes=int(fields["num_classes"]),
            dropout_rate=float(fields["dropout_rate"]),
            activation=fields["activation"],
        )
        count = int(fields["num_params"])
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing key {exc.args[0]!r}") from None
    if count != spec.num_params:
        raise ValueError(f"num_params={count} does not match the architecture ({spec.num_params})")
    values = lines[7:]
    if len(values) != count:
        raise ValueError(f"expected {count} parameter lines, found {len(values)}")
    return spec, np.array([float(v) for v in values])


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray):
    with open(path, "w") as f:
        f.write(dumps_checkpoint(spec, params))


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    with open(path) as f:
        return loads_checkpoint(f.read())
