"""Gradient-based attribution maps: SM, IG, SG and UG."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Network, QuantityOfInterest, quantity

METHODS = ("SM", "IG", "SG", "UG")


class DegenerateAttributionError(ValueError):
    pass


@dataclass(frozen=True)
class AttributionConfig:
    qoi: QuantityOfInterest = QuantityOfInterest()
    ig_baseline: tuple[float, ...] | None = None  # None means the zero baseline
    ig_steps: int = 50
    sg_sigma: float = 0.1
    sg_samples: int = 50
    ug_radius: float = 0.2
    ug_samples: int = 50
    seed: int = 0
    grad_times_input: bool = False

    def __post_init__(self):
        if self.sg_sigma < 0 or self.ug_radius < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.ig_steps < 1 or self.sg_samples < 1 or self.ug_samples < 1:
            raise ValueError("step and sample counts must be positive")

    @classmethod
    def preset(cls, data_range=(0.0, 1.0), dataset: str = "cifar", **overrides) -> AttributionConfig:
        """Noise scales used for image experiments.

        ``cifar``: sigma = 0.1 (u - l), UG radius 4 on a 0-255 scale;
        ``imagenet``: sigma = 0.2 (u - l), r = 0.2 (u - l);
        ``desk``: sigma = 0.1 (u - l), r = 0.2 (u - l) (our digit experiments).
        """
        lo, hi = data_range
        span = hi - lo
        if dataset == "cifar":
            kw = dict(sg_sigma=0.1 * span, ug_radius=4.0 / 255.0 * span)
        elif dataset == "imagenet":
            kw = dict(sg_sigma=0.2 * span, ug_radius=0.2 * span)
        elif dataset == "desk":
            kw = dict(sg_sigma=0.1 * span, ug_radius=0.2 * span)
        else:
            raise ValueError(f"unknown preset {dataset!r}")
        kw.update(overrides)
        return cls(**kw)

    def baseline(self, d: int) -> np.ndarray:
        if self.ig_baseline is None:
            return np.zeros(d)
        b = np.asarray(self.ig_baseline, dtype=np.float64)
        if b.shape != (d,):
            raise ValueError(f"IG baseline has length {b.size}, input has {d}")
        return b

    def snapshot(self) -> dict:
        out = dataclasses.asdict(self)
        out["qoi"] = dataclasses.asdict(self.qoi)
        if self.ig_baseline is not None:
            out["ig_baseline"] = list(self.ig_baseline)
        return out


@dataclass
class AttributionMap:
    scores: np.ndarray
    method: str
    grad_times_input: bool = False
    config: dict = field(default_factory=dict)
    input: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or not np.all(np.isfinite(self.scores)):
            raise ValueError("attribution scores must be a finite vector")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def d(self) -> int:
        return self.scores.size

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "d": self.d,
            "scores": self.scores.tolist(),
            "config": {**self.config, "grad_times_input": self.grad_times_input},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> AttributionMap:
        rec = json.loads(text)
        scores = np.asarray(rec["scores"], dtype=np.float64)
        if scores.size != rec["d"]:
            raise ValueError("scores length does not match d")
        cfg = dict(rec.get("config", {}))
        return cls(scores, rec["method"], bool(cfg.get("grad_times_input", False)), cfg)

    def to_blob(self) -> bytes:
        return self.scores.astype("<f8").tobytes()

    @staticmethod
    def scores_from_blob(blob: bytes) -> np.ndarray:
        if len(blob) % 8:
            raise ValueError("blob length is not a multiple of 8")
        return np.frombuffer(blob, dtype="<f8").astype(np.float64)


def method_noise(method: str, cfg: AttributionConfig, d: int, seed: int | None = None) -> np.ndarray | None:
    """The sample offsets used by SG/UG, drawn deterministically from a seed.

    Returns ``None`` when the method has no noise or its scale is zero.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if method == "SG" and cfg.sg_sigma > 0:
        return cfg.sg_sigma * rng.standard_normal((cfg.sg_samples, d))
    if method == "UG" and cfg.ug_radius > 0:
        return rng.uniform(-cfg.ug_radius, cfg.ug_radius, size=(cfg.ug_samples, d))
    return None


def _batch_gradient(net: Network, X: Tensor, qoi: QuantityOfInterest, cls: int,
                    create_graph: bool) -> Tensor:
    (G,) = ad.backward(ad.sum(quantity(net, X, qoi, cls)), [X], create_graph=create_graph)
    return G


def attribution_tensor(net: Network, x: Tensor, method: str, cfg: AttributionConfig, cls: int,
                       noise: np.ndarray | None = None, create_graph: bool = False) -> Tensor:
    """Attribution as a graph node; differentiable in ``x`` with ``create_graph``.

    ``noise`` holds the SG/UG offsets (one row per sample); callers freeze it
    to get a deterministic objective.
    """
    x = x if x.requires_grad else Tensor(x.value, requires_grad=True)
    if method == "SM" or (method in ("SG", "UG") and noise is None):
        (g,) = ad.backward(quantity(net, x, cfg.qoi, cls), [x], create_graph=create_graph)
    elif method in ("SG", "UG"):
        X = x + noise
        g = ad.mean(_batch_gradient(net, X, cfg.qoi, cls, create_graph), axis=0)
    elif method == "IG":
        m = cfg.ig_steps
        base = cfg.baseline(x.shape[0])
        alphas = ((np.arange(1, m + 1) - 0.5) / m)[:, None]
        diff = x - base
        X = base + ad.reshape(diff, (1, -1)) * alphas
        g = ad.mean(_batch_gradient(net, X, cfg.qoi, cls, create_graph), axis=0)
        return diff * g
    else:
        raise ValueError(f"unknown method {method!r}")
    if cfg.grad_times_input:
        g = g * x
    return g


def _map(net: Network, x, method: str, cfg: AttributionConfig) -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input has shape {x.shape}, network expects ({net.input_dim},)")
    cls = cfg.qoi.resolve(net, x)
    noise = method_noise(method, cfg, x.size)
    z = attribution_tensor(net, Tensor(x), method, cfg, cls, noise)
    return AttributionMap(z.value.copy(), method, cfg.grad_times_input and method != "IG",
                          cfg.snapshot(), x.copy())


def saliency_map(net: Network, x, cfg: AttributionConfig = AttributionConfig()) -> AttributionMap:
    """Input gradient of the quantity of interest (times the input if configured)."""
    return _map(net, x, "SM", cfg)


def integrated_gradients(net: Network, x, cfg: AttributionConfig = AttributionConfig()) -> AttributionMap:
    """(x - x_b) times the midpoint-rule average of gradients on the straight path."""
    return _map(net, x, "IG", cfg)


def smooth_gradient(net: Network, x, cfg: AttributionConfig = AttributionConfig()) -> AttributionMap:
    """Monte Carlo mean of gradients at x + sigma * n, n ~ N(0, I)."""
    return _map(net, x, "SG", cfg)


def uniform_gradient(net: Network, x, cfg: AttributionConfig = AttributionConfig()) -> AttributionMap:
    """Monte Carlo mean of gradients at x + u, u uniform on [-r, r]^d."""
    return _map(net, x, "UG", cfg)


_DISPATCH = {
    "SM": saliency_map,
    "IG": integrated_gradients,
    "SG": smooth_gradient,
    "UG": uniform_gradient,
}


def attribute(net: Network, x, method: str, cfg: AttributionConfig = AttributionConfig()) -> AttributionMap:
    try:
        fn = _DISPATCH[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None
    return fn(net, x, cfg)


def normalize_map(z) -> np.ndarray:
    """|z| / sum |z|."""
    a = np.abs(np.asarray(z, dtype=np.float64))
    total = a.sum()
    if total == 0:
        raise DegenerateAttributionError("degenerate attribution: all scores are zero")
    return a / total
