"""Small tape-based reverse-mode autodiff over numpy float64 arrays.

Operations build :class:`Tensor` values eagerly. When a :class:`Tape` is active
(``with Tape() as tape:``) and any input requires a gradient, the op appends a
node holding its inputs and a closure that maps the output cotangent to input
cotangents. ``tape.backward(loss)`` replays the nodes in reverse, once each.

Outside a tape everything runs as plain numpy, which is what inference uses.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, UsageError

LOSS_FLOOR = 1e-12
GATES = ("i", "f", "g", "o")


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "atm_active_tape", default=None
)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients(Mapping):
    """Tensor -> gradient mapping. Tensors the loss does not depend on get zeros."""

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._grads.get(id(t))
        if hit is None or hit[0] is not t:
            return np.zeros_like(t.data)
        return hit[1]

    def __iter__(self):
        return (t for t, _ in self._grads.values())

    def __len__(self):
        return len(self._grads)

    def named(self, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {k: self[v] for k, v in params.items()}


class Tape:
    """Records differentiable ops issued while it is the active tape."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> Gradients:
        if id(loss) not in self._produced:
            raise UsageError("loss was not produced by an op recorded on this tape")
        if loss.data.size != 1:
            raise UsageError("backward needs a scalar loss")
        grads: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for node in reversed(self.nodes):
            hit = grads.get(id(node.out))
            if hit is None:
                continue
            in_grads = node.backward(hit[1])
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                if prev is None:
                    grads[id(t)] = (t, np.array(g, dtype=np.float64))
                else:
                    prev[1].__iadd__(g)
        return Gradients(grads)


def _make(data, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape.get()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear algebra primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T (+ bias). ``x`` is (in,) or (N, in); ``weight`` is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise InvalidInputError(
            f"linear: input width {x.shape[-1:]} does not match weight {weight.shape}"
        )
    y = x.data @ weight.data.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise InvalidInputError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        y = y + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        gw = np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        if bias is None:
            return gx, gw
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _make(y, inputs, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp(-|v|) never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last (class) axis."""
    x = as_tensor(x)
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}


def activation(kind: str, x) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}") from None
    return fn(x)


def stop_gradient(x) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(as_tensor(x).data)


def context_stack(x, radius: int) -> Tensor:
    """Differentiable context expansion of an (N, F) tensor (edge replication)."""
    from .dsp import context_indices

    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("context expansion needs a non-empty (N, F) tensor")
    n, f = x.shape
    idx = context_indices(n, radius)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g.reshape(n, idx.shape[1], f))
        return (gx,)

    return _make(x.data[idx].reshape(n, -1), (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack a list of (H,) tensors into an (N, H) tensor."""
    parts = [as_tensor(p) for p in parts]
    return _make(
        np.stack([p.data for p in parts]),
        tuple(parts),
        lambda g: tuple(g[i] for i in range(len(parts))),
    )


def total(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# Layer parameter containers
# ---------------------------------------------------------------------------


@dataclass
class DenseParams:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError(
                f"dense weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "DenseParams":
        bound = 1.0 / np.sqrt(in_dim)
        return cls(
            parameter(rng.uniform(-bound, bound, (out_dim, in_dim))),
            parameter(np.zeros(out_dim)),
        )


@dataclass
class LstmParams:
    """Per-gate weights, gate keys ``i f g o``: input (H, I), recurrent (H, H), bias (H,)."""

    input_weights: dict[str, Tensor]
    recurrent_weights: dict[str, Tensor]
    biases: dict[str, Tensor]

    def __post_init__(self):
        h, i = self.input_weights["i"].shape
        for gate in GATES:
            if (
                self.input_weights[gate].shape != (h, i)
                or self.recurrent_weights[gate].shape != (h, h)
                or self.biases[gate].shape != (h,)
            ):
                raise InvalidInputError(f"LSTM gate {gate!r} has inconsistent shapes")

    @property
    def hidden(self) -> int:
        return self.input_weights["i"].shape[0]

    @property
    def in_dim(self) -> int:
        return self.input_weights["i"].shape[1]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for gate in GATES:
            out[f"{prefix}/w_{gate}"] = self.input_weights[gate]
            out[f"{prefix}/u_{gate}"] = self.recurrent_weights[gate]
            out[f"{prefix}/b_{gate}"] = self.biases[gate]
        return out

    @classmethod
    def init(
        cls, rng: np.random.Generator, in_dim: int, hidden: int, forget_bias: float = 1.0
    ) -> "LstmParams":
        w, u, b = {}, {}, {}
        for gate in GATES:
            bound = 1.0 / np.sqrt(in_dim)
            w[gate] = parameter(rng.uniform(-bound, bound, (hidden, in_dim)))
            bound = 1.0 / np.sqrt(hidden)
            u[gate] = parameter(rng.uniform(-bound, bound, (hidden, hidden)))
            b[gate] = parameter(np.full(hidden, forget_bias if gate == "f" else 0.0))
        return cls(w, u, b)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int) -> "LstmParams":
        return cls(
            {g: parameter(np.zeros((hidden, in_dim))) for g in GATES},
            {g: parameter(np.zeros((hidden, hidden))) for g in GATES},
            {g: parameter(np.zeros(hidden)) for g in GATES},
        )


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(Tensor(np.zeros(hidden)), Tensor(np.zeros(hidden)))


@dataclass
class LossParams:
    log_sigma1: Tensor = field(default_factory=lambda: parameter(0.0))
    log_sigma2: Tensor = field(default_factory=lambda: parameter(0.0))

    @property
    def sigma1(self) -> float:
        return float(np.exp(self.log_sigma1.data))

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_sigma2.data))

    def named_parameters(self, prefix: str = "loss") -> dict[str, Tensor]:
        return {f"{prefix}/log_sigma1": self.log_sigma1, f"{prefix}/log_sigma2": self.log_sigma2}


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def dense_forward(p: DenseParams, x) -> Tensor:
    return linear(x, p.weight, p.bias)


def lstm_step(p: LstmParams, x, s: LstmState) -> LstmState:
    """One LSTM cell update built from primitive ops (no peepholes)."""
    x = as_tensor(x)
    if x.shape[-1] != p.in_dim or s.h.shape[-1] != p.hidden or s.c.shape[-1] != p.hidden:
        raise InvalidInputError("lstm_step: input or state width does not match params")

    def pre(gate):
        return add(
            linear(x, p.input_weights[gate], p.biases[gate]),
            linear(s.h, p.recurrent_weights[gate]),
        )

    i = sigmoid(pre("i"))
    f = sigmoid(pre("f"))
    g = tanh(pre("g"))
    o = sigmoid(pre("o"))
    c = add(mul(f, s.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def lstm_sequence(p: LstmParams, x) -> Tensor:
    """Run the cell over an (N, I) sequence from a zero state; returns (N, H) outputs.

    Fused counterpart of repeated :func:`lstm_step` with a hand-written
    backpropagation-through-time closure, one tape node per layer.
    """
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != p.in_dim:
        raise InvalidInputError(
            f"lstm_sequence: input {x.shape} does not match LSTM input width {p.in_dim}"
        )
    n, hid = x.shape[0], p.hidden
    w = np.concatenate([p.input_weights[g].data for g in GATES])  # (4H, I)
    u = np.concatenate([p.recurrent_weights[g].data for g in GATES])  # (4H, H)
    b = np.concatenate([p.biases[g].data for g in GATES])
    xw = x.data @ w.T + b  # (N, 4H)
    ut = u.T.copy()

    gates = np.empty((n, 4 * hid))
    cs = np.empty((n, hid))
    hs = np.empty((n, hid))
    h = np.zeros(hid)
    c = np.zeros(hid)
    for t in range(n):
        z = xw[t] + h @ ut
        a = gates[t]
        a[: 2 * hid] = _sigmoid(z[: 2 * hid])
        a[2 * hid : 3 * hid] = np.tanh(z[2 * hid : 3 * hid])
        a[3 * hid :] = _sigmoid(z[3 * hid :])
        c = a[hid : 2 * hid] * c + a[:hid] * a[2 * hid : 3 * hid]
        h = a[3 * hid :] * np.tanh(c)
        cs[t] = c
        hs[t] = h

    params = [p.input_weights[g] for g in GATES]
    params += [p.recurrent_weights[g] for g in GATES]
    params += [p.biases[g] for g in GATES]

    def backward(gh_out):
        dz = np.empty((n, 4 * hid))
        dh_next = np.zeros(hid)
        dc_next = np.zeros(hid)
        for t in range(n - 1, -1, -1):
            a = gates[t]
            ig, fg, gg, og = a[:hid], a[hid : 2 * hid], a[2 * hid : 3 * hid], a[3 * hid :]
            tc = np.tanh(cs[t])
            c_prev = cs[t - 1] if t > 0 else 0.0
            dh = gh_out[t] + dh_next
            dc = dc_next + dh * og * (1.0 - tc * tc)
            d = dz[t]
            d[:hid] = dc * gg * ig * (1.0 - ig)
            d[hid : 2 * hid] = dc * c_prev * fg * (1.0 - fg)
            d[2 * hid : 3 * hid] = dc * ig * (1.0 - gg * gg)
            d[3 * hid :] = dh * tc * og * (1.0 - og)
            dc_next = dc * fg
            dh_next = u.T @ d
        h_prev = np.vstack([np.zeros((1, hid)), hs[:-1]])
        gx = dz @ w
        gw = dz.T @ x.data
        gu = dz.T @ h_prev
        gb = dz.sum(axis=0)
        split = lambda m: [m[k * hid : (k + 1) * hid] for k in range(4)]  # noqa: E731
        return [gx] + split(gw) + split(gu) + split(gb)

    return _make(hs, (x, *params), backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise InvalidInputError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    k = diff.size

    def backward(g):
        gp = g * 2.0 * diff / k
        return gp, -gp

    return _make(np.mean(diff * diff), (pred, target), backward)


def _check_one_hot(one_hot: np.ndarray) -> np.ndarray:
    if one_hot.ndim != 2:
        raise InvalidInputError("one-hot targets must be (N, C)")
    ok = np.all((one_hot == 0) | (one_hot == 1)) and np.all(one_hot.sum(axis=1) == 1)
    if not ok:
        raise InvalidInputError("every target row must contain exactly one 1 and zeros")
    return one_hot.argmax(axis=1)


def cross_entropy_loss(posterior, one_hot) -> Tensor:
    """Mean over frames of -ln(max(p_true, 1e-12))."""
    posterior = as_tensor(posterior)
    target = np.asarray(one_hot.data if isinstance(one_hot, Tensor) else one_hot, dtype=float)
    if posterior.shape != target.shape:
        raise InvalidInputError(
            f"cross_entropy shape mismatch {posterior.shape} vs {target.shape}"
        )
    cls = _check_one_hot(target)
    rows = np.arange(len(cls))
    p_true = posterior.data[rows, cls]
    n = len(cls)

    def backward(g):
        gp = np.zeros_like(posterior.data)
        live = p_true > LOSS_FLOOR
        gp[rows[live], cls[live]] = -g / (n * p_true[live])
        return (gp,)

    value = -np.mean(np.log(np.maximum(p_true, LOSS_FLOOR)))
    return _make(value, (posterior,), backward)


def dynamic_weighted_loss(lp: LossParams, l1, l2) -> Tensor:
    """L1 / (2 sigma1^2) + L2 / sigma2^2 + ln sigma1 + ln sigma2, sigma_i = exp(log_sigma_i)."""
    l1, l2 = as_tensor(l1), as_tensor(l2)
    s1, s2 = lp.log_sigma1, lp.log_sigma2
    w1 = 0.5 * np.exp(-2.0 * s1.data)
    w2 = np.exp(-2.0 * s2.data)
    value = w1 * l1.data + w2 * l2.data + s1.data + s2.data

    def backward(g):
        return (
            g * w1,
            g * w2,
            g * (1.0 - 2.0 * w1 * l1.data),
            g * (1.0 - 2.0 * w2 * l2.data),
        )

    return _make(value, (l1, l2, s1, s2), backward)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam. Returns new arrays; inputs are left untouched."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        new_m[name], new_v[name] = m, v
        new_params[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` that updates ``Tensor.data`` in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, **kw):
        self.params = dict(params)
        self.lr = lr
        self.kw = kw
        self.state = AdamState()

    def step(self, grads: Gradients) -> None:
        values = {k: t.data for k, t in self.params.items()}
        named = grads.named(self.params)
        new, self.state = adam_step(values, named, self.state, self.lr, **self.kw)
        for k, t in self.params.items():
            t.data = new[k]


def named_arrays(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}

