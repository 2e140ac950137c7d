"""Dense feed-forward classifiers with switchable ReLU / softplus activations."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"SGEOCKPT"
FORMAT_VERSION = 1
_ACT_CODES = {"relu": 0, "softplus": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class CheckpointError(Exception):
    """Base class for checkpoint decoding failures."""


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w, b = _frozen(self.weight), _frozen(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"layer shapes do not match: weight {w.shape}, bias {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class Network:
    """Feed-forward classifier; hidden layers share one activation, the last
    layer emits logits."""

    layers: tuple[Layer, ...]
    activation: str = "relu"
    beta: float = 0.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "softplus" and not self.beta > 0:
            raise ValueError("softplus activation needs beta > 0")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if self.class_count < 2:
            raise ValueError("need at least two classes")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> Network:
        layers = tuple(Layer(params[2 * i], params[2 * i + 1]) for i in range(len(self.layers)))
        return dataclasses.replace(self, layers=layers)


def init_network(dims: Sequence[int], activation: str = "relu", beta: float = 0.0,
                 seed: int = 0) -> Network:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(fan_out)))
    return Network(tuple(layers), activation, beta)


def with_softplus(net: Network, beta: float) -> Network:
    """Twice-differentiable surrogate sharing the same weights."""
    if not beta > 0:
        raise ValueError("surrogate beta must be positive")
    return dataclasses.replace(net, activation="softplus", beta=float(beta))


def with_relu(net: Network) -> Network:
    return dataclasses.replace(net, activation="relu", beta=0.0)


def _activate(net: Network, h: Tensor) -> Tensor:
    if net.activation == "relu":
        return ad.relu(h)
    return ad.softplus(h, net.beta)


def _check_input(net: Network, x) -> None:
    shape = x.shape
    if not shape or shape[-1] != net.input_dim or len(shape) > 2:
        raise ad.ShapeError("forward_logits", shape, (net.input_dim,))


def forward_logits(net: Network, x, params: Sequence[Tensor] | None = None) -> Tensor:
    """Logits for one input ``(d,)`` or a batch ``(n, d)``.

    ``params`` substitutes graph nodes for the stored weights (used when
    differentiating with respect to parameters).
    """
    x = ad.as_tensor(x)
    _check_input(net, x)
    if params is None:
        params = [Tensor(p) for p in net.parameters()]
    h = x
    last = len(net.layers) - 1
    for i in range(len(net.layers)):
        w, b = params[2 * i], params[2 * i + 1]
        h = ad.matmul(w, h) + b if h.ndim == 1 else ad.matmul(h, ad.transpose(w)) + b
        if i < last:
            h = _activate(net, h)
    return h


def logits_np(net: Network, x) -> np.ndarray:
    with ad.no_grad():
        return forward_logits(net, np.asarray(x, dtype=np.float64)).value


def preactivations(net: Network, x) -> list[np.ndarray]:
    """Hidden pre-activation values, one array per hidden layer."""
    h = np.asarray(x, dtype=np.float64)
    out = []
    for layer in net.layers[:-1]:
        z = h @ layer.weight.T + layer.bias
        out.append(z)
        h = np.maximum(z, 0) if net.activation == "relu" else (
            np.maximum(z, 0) + np.log1p(np.exp(-net.beta * np.abs(z))) / net.beta)
    return out


def preactivation_margin(net: Network, x) -> float:
    """Smallest |pre-activation| over hidden units (inf for linear models)."""
    pre = preactivations(net, x)
    if not pre:
        return float("inf")
    return float(min(np.abs(z).min() for z in pre))


def predict(net: Network, x) -> int | np.ndarray:
    """Argmax of the logits; ties go to the smallest index."""
    logits = logits_np(net, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


@dataclass(frozen=True)
class QuantityOfInterest:
    """Which scalar of the model is explained.

    ``stage`` is ``"pre"`` (logit) or ``"post"`` (softmax probability);
    ``class_index=None`` selects the predicted class at the explained input.
    """

    stage: str = "pre"
    class_index: int | None = None

    def __post_init__(self):
        if self.stage not in ("pre", "post"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.class_index is not None and self.class_index < 0:
            raise ValueError("class_index must be nonnegative")

    def resolve(self, net: Network, x) -> int:
        if self.class_index is None:
            return int(predict(net, x))
        if self.class_index >= net.class_count:
            raise ValueError(f"class_index {self.class_index} >= class count {net.class_count}")
        return self.class_index


def quantity(net: Network, x, qoi: QuantityOfInterest, cls: int | None = None,
             params: Sequence[Tensor] | None = None) -> Tensor:
    """Selected score; a scalar for one input, a vector for a batch.

    ``cls`` overrides the class selector (callers pass the class resolved at
    the explained input so noisy samples keep the same target).
    """
    x = ad.as_tensor(x)
    if cls is None:
        cls = qoi.resolve(net, x.value if x.ndim == 1 else x.value[0])
    logits = forward_logits(net, x, params)
    scores = ad.softmax(logits, axis=-1) if qoi.stage == "post" else logits
    if scores.ndim == 1:
        return scores[cls]
    return scores[:, cls]


@dataclass(frozen=True, eq=False)
class ScalarQoI:
    """A network paired with a quantity of interest, seen as R^d -> R."""

    net: Network
    qoi: QuantityOfInterest = QuantityOfInterest()
    cls: int | None = None

    def fixed_at(self, x) -> ScalarQoI:
        return dataclasses.replace(self, cls=self.qoi.resolve(self.net, x))

    def _cls(self, x) -> int:
        return self.cls if self.cls is not None else self.qoi.resolve(self.net, x)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        with ad.no_grad():
            return float(quantity(self.net, x, self.qoi, self._cls(x)).value)

    def values(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cls = self.cls if self.cls is not None else self.qoi.resolve(self.net, X[0])
        with ad.no_grad():
            return quantity(self.net, X, self.qoi, cls).value

    def gradient(self, x) -> np.ndarray:
        x = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        (g,) = ad.backward(quantity(self.net, x, self.qoi, self._cls(x.value)), [x])
        return g.value

    def gradients(self, X) -> np.ndarray:
        """Per-row gradients of a batch, in one backward pass."""
        X = Tensor(np.atleast_2d(np.asarray(X, dtype=np.float64)), requires_grad=True)
        cls = self.cls if self.cls is not None else self.qoi.resolve(self.net, X.value[0])
        (g,) = ad.backward(ad.sum(quantity(self.net, X, self.qoi, cls)), [X])
        return g.value


def input_jacobian(net: Network, x) -> np.ndarray:
    """(d, c) matrix whose column i is the input gradient of logit i."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    logits = forward_logits(net, xt)
    cols = []
    for i in range(net.class_count):
        (g,) = ad.backward(logits[i], [xt])
        cols.append(g.value)
    return np.stack(cols, axis=1)


def batch_input_jacobian(net: Network, X) -> np.ndarray:
    """(n, d, c) input Jacobians of a batch, using c backward passes."""
    xt = Tensor(np.atleast_2d(np.asarray(X, dtype=np.float64)), requires_grad=True)
    logits = forward_logits(net, xt)
    cols = []
    for i in range(net.class_count):
        (g,) = ad.backward(ad.sum(logits[:, i]), [xt])
        cols.append(g.value)
    return np.stack(cols, axis=2)


def jvp_logits(net: Network, X, U, params: Sequence[Tensor] | None = None) -> Tensor:
    """Directional derivative of the logits along ``U`` (rows pair with ``X``).

    Equals ``input_jacobian(x).T @ u`` per row; differentiable with respect
    to ``params``.
    """
    X = ad.as_tensor(X)
    U = ad.as_tensor(U)
    if params is None:
        params = [Tensor(p) for p in net.parameters()]
    h, t = X, U
    last = len(net.layers) - 1
    for i in range(len(net.layers)):
        w, b = params[2 * i], params[2 * i + 1]
        wt = ad.transpose(w)
        h = ad.matmul(h, wt) + b
        t = ad.matmul(t, wt)
        if i < last:
            if net.activation == "relu":
                t = t * (h.value > 0).astype(np.float64)
            else:
                t = t * ad.sigmoid(h, net.beta)
            h = _activate(net, h)
    return t


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: Network, path, metadata: dict | None = None) -> None:
    """Write the little-endian binary checkpoint.

    Layout: magic, u32 version, u32 activation code, f64 beta, u32 layer
    count, then per layer u32 out, u32 in, f64 weights (row-major), f64
    biases. An optional trailer (u32 length + UTF-8 JSON) carries training
    metadata.
    """
    meta = dict(net.metadata)
    meta.update(metadata or {})
    parts = [MAGIC, struct.pack("<IIdI", FORMAT_VERSION, _ACT_CODES[net.activation],
                                float(net.beta), len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<II", layer.out_dim, layer.in_dim))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    if meta:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    head = struct.calcsize("<IIdI")
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError(f"{path}: corrupt header (bad magic bytes)")
    if len(data) < len(MAGIC) + head:
        raise TruncatedPayloadError(f"{path}: truncated payload in header")
    version, act, beta, n_layers = struct.unpack_from("<IIdI", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version mismatch (file {version}, expected {FORMAT_VERSION})")
    if act not in _ACT_NAMES:
        raise CorruptHeaderError(f"{path}: corrupt header (activation code {act})")
    off = len(MAGIC) + head
    layers = []
    for _ in range(n_layers):
        if len(data) < off + 8:
            raise TruncatedPayloadError(f"{path}: truncated payload")
        out_dim, in_dim = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = 8 * (out_dim * in_dim + out_dim)
        if len(data) < off + nbytes:
            raise TruncatedPayloadError(f"{path}: truncated payload")
        w = np.frombuffer(data, dtype="<f8", count=out_dim * in_dim, offset=off)
        off += 8 * out_dim * in_dim
        b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        layers.append(Layer(w.reshape(out_dim, in_dim).astype(np.float64), b.astype(np.float64)))
    meta = {}
    if off < len(data):
        if len(data) < off + 4:
            raise TruncatedPayloadError(f"{path}: truncated payload in metadata")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + n:
            raise TruncatedPayloadError(f"{path}: truncated payload in metadata")
        try:
            meta = json.loads(data[off: off + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptHeaderError(f"{path}: unreadable metadata") from exc
        off += n
        if off != len(data):
            raise CorruptHeaderError(f"{path}: trailing bytes after metadata")
    name = _ACT_NAMES[act]
    try:
        return Network(tuple(layers), name, beta if name == "softplus" else 0.0, meta)
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: {exc}") from exc
