"""Attribution attacks: sign-gradient PGD on a softplus surrogate.

The attack loss is computed from the surrogate's attribution (which has
useful second derivatives) while feasibility is judged by the original
ReLU network's prediction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attribution import METHODS, AttributionConfig, attribute, attribution_tensor, method_noise
from .autodiff import Tensor
from .metrics import GridGeometry, mass_center
from .nn import Network, QuantityOfInterest, forward_logits, predict, with_softplus

KINDS = ("topk", "mass_center", "manipulate")


@dataclass(frozen=True, eq=False)
class AttackConfig:
    kind: str = "topk"
    epsilon: float = 8.0 / 255.0
    steps: int = 50
    step_size: float | None = None  # None means 2 * epsilon / steps
    surrogate_beta: float = 50.0
    k: int | None = None
    beta0: float = 1e11
    beta1: float = 1e6
    target_map: np.ndarray | None = None
    data_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    method: str = "SM"
    attribution: AttributionConfig = AttributionConfig()
    geometry: GridGeometry = GridGeometry()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown attribution method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not self.surrogate_beta > 0:
            raise ValueError("surrogate_beta must be positive")
        if self.kind == "topk" and (self.k is None or self.k < 1):
            raise ValueError("topk attack needs k >= 1")
        if (self.target_map is not None) != (self.kind == "manipulate"):
            raise ValueError("target_map is required for manipulate and only for manipulate")
        if self.target_map is not None:
            object.__setattr__(self, "target_map", np.asarray(self.target_map, dtype=np.float64))

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.0 * self.epsilon / self.steps if self.steps else 0.0

    def snapshot(self) -> dict:
        return {
            "kind": self.kind, "epsilon": self.epsilon, "steps": self.steps,
            "step_size": self.effective_step, "surrogate_beta": self.surrogate_beta, "k": self.k,
            "beta0": self.beta0, "beta1": self.beta1, "data_range": list(self.data_range),
            "seed": self.seed, "method": self.method, "attribution": self.attribution.snapshot(),
        }


@dataclass
class AttackResult:
    x: np.ndarray
    x_adv: np.ndarray
    feasible: bool
    loss_trace: list[float]
    best_step: int
    config: dict = field(default_factory=dict)

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.x_adv - self.x), initial=0.0))

    @property
    def l2(self) -> float:
        return float(np.linalg.norm(self.x_adv - self.x))

    def to_json(self) -> str:
        return json.dumps({
            "x_adv": self.x_adv.tolist(), "feasible": self.feasible, "loss_trace": self.loss_trace,
            "best_step": self.best_step, "linf": self.linf, "l2": self.l2, "config": self.config,
        }, sort_keys=True)

    def perturbation_blob(self) -> bytes:
        return (self.x_adv - self.x).astype("<f8").tobytes()


def project_linf(candidate, x, epsilon: float, data_range=(0.0, 1.0)) -> np.ndarray:
    """Closest point to ``candidate`` in the l-inf ball around x, clipped to the data range."""
    lo, hi = data_range
    return np.clip(np.clip(candidate, x - epsilon, x + epsilon), lo, hi)


def random_perturbation(x, epsilon: float, data_range=(0.0, 1.0), seed: int = 0) -> np.ndarray:
    """Per-coordinate uniform noise in [-eps, eps], clipped to the data range."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    u = np.random.default_rng(seed).uniform(-epsilon, epsilon, size=x.shape)
    return project_linf(x + u, x, epsilon, data_range)


# ------------------------------------------------------------------ losses


def _normalized(z: Tensor) -> Tensor:
    a = ad.smooth_abs(z)
    return a / ad.sum(a)


def topk_loss(z_adv, K) -> Tensor:
    """Share of the (smooth) absolute attribution mass inside K."""
    a = ad.smooth_abs(ad.as_tensor(z_adv))
    return ad.sum(ad.take(a, np.asarray(K, dtype=np.int64))) / ad.sum(a)


def mass_center_loss(z_adv, original_center, geom: GridGeometry = GridGeometry()) -> Tensor:
    """Negative distance between the attribution center and the original one."""
    z = ad.as_tensor(z_adv)
    coords = geom.coords(z.shape[0])
    center = ad.matmul(_normalized(z), Tensor(coords))
    diff = center - np.asarray(original_center, dtype=np.float64)
    return -ad.sqrt(ad.sum(diff * diff) + 1e-24)


def manipulate_loss(z_adv, target_map, h_adv, h_orig, beta0: float = 1e11, beta1: float = 1e6) -> Tensor:
    """beta0 ||z_adv - target||^2 + beta1 ||h_adv - h_orig||^2."""
    dz = ad.as_tensor(z_adv) - np.asarray(target_map, dtype=np.float64)
    dh = ad.as_tensor(h_adv) - np.asarray(h_orig, dtype=np.float64)
    return beta0 * ad.sum(dz * dz) + beta1 * ad.sum(dh * dh)


# ------------------------------------------------------------------ attack


def _objective(net: Network, x: np.ndarray, cfg: AttackConfig):
    """The attack loss as a function of a tensor input, plus the class it keeps."""
    surrogate = with_softplus(net, cfg.surrogate_beta)
    y = int(predict(net, x))
    acfg = cfg.attribution
    cls = acfg.qoi.resolve(net, x)
    # the attacker's noise is frozen for the whole attack, drawn from its own seed
    noise = method_noise(cfg.method, acfg, x.size, seed=cfg.seed)
    z_orig = attribute(net, x, cfg.method, acfg).scores

    if cfg.kind == "topk":
        n = np.abs(z_orig)
        K = np.argsort(-n, kind="stable")[: cfg.k]

        def finish(z, xt):
            return topk_loss(z, K)
    elif cfg.kind == "mass_center":
        c0 = mass_center(z_orig, cfg.geometry)

        def finish(z, xt):
            return mass_center_loss(z, c0, cfg.geometry)
    else:
        target = np.abs(cfg.target_map) / np.abs(cfg.target_map).sum()
        with ad.no_grad():
            h_orig = ad.softmax(forward_logits(surrogate, x)).value

        def finish(z, xt):
            h = ad.softmax(forward_logits(surrogate, xt))
            return manipulate_loss(_normalized(z), target, h, h_orig, cfg.beta0, cfg.beta1)

    def loss(xt: Tensor, create_graph: bool) -> Tensor:
        z = attribution_tensor(surrogate, xt, cfg.method, acfg, cls, noise, create_graph=create_graph)
        return finish(z, xt)

    return loss, y


def pgd_attack(net: Network, x, cfg: AttackConfig) -> AttackResult:
    """Sign-gradient PGD minimizing the attack loss inside the l-inf ball.

    Returns the feasible iterate (prediction unchanged on ``net``) with the
    lowest surrogate loss; ties keep the earliest. If no perturbed iterate is
    feasible the result is flagged infeasible and x_adv = x.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input has shape {x.shape}, network expects ({net.input_dim},)")
    loss_fn, y = _objective(net, x, cfg)
    step = cfg.effective_step
    xt = x.copy()
    trace, iterates, feasible = [], [], []
    for t in range(cfg.steps + 1):
        leaf = Tensor(xt, requires_grad=True)
        last = t == cfg.steps
        val = loss_fn(leaf, create_graph=not last)
        trace.append(float(val.value))
        iterates.append(xt)
        feasible.append(t == 0 or int(predict(net, xt)) == y)
        if last:
            break
        (g,) = ad.backward(val, [leaf])
        xt = project_linf(xt - step * np.sign(g.value), x, cfg.epsilon, cfg.data_range)

    losses = np.where(feasible, trace, np.inf)
    best = int(np.argmin(losses))
    any_moved = cfg.steps == 0 or any(feasible[1:])
    if not any_moved:
        best = 0
    return AttackResult(x.copy(), iterates[best].copy(), bool(any_moved), trace, best, cfg.snapshot())


def with_epsilon(cfg: AttackConfig, epsilon: float) -> AttackConfig:
    return dataclasses.replace(cfg, epsilon=float(epsilon))
