"""Natural training, Smooth Surface Regularization and a PGD-AT baseline."""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .geometry import batch_factorization, top_eigenpairs
from .nn import Network, forward_logits, init_network, jvp_logits, logits_np, predict, with_softplus

MODES = ("natural", "ssr", "pgd_at")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "natural"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "momentum"
    momentum: float = 0.9
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    ssr_beta: float = 0.3
    ssr_s: float | None = None  # None picks 1 for [0, 1] data and 1e6 for [0, 255]
    pgd_delta: float = 0.25
    pgd_steps: int = 30
    pgd_step_size: float | None = None  # None means 2.5 * delta / steps
    surrogate_beta: float = 50.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.ssr_beta < 0:
            raise ValueError("ssr_beta must be nonnegative")
        if self.ssr_s is not None and not self.ssr_s > 0:
            raise ValueError("ssr_s must be positive")
        if self.pgd_delta < 0 or self.pgd_steps < 0:
            raise ValueError("PGD budget and steps must be nonnegative")

    def scale_for(self, data_range) -> float:
        if self.ssr_s is not None:
            return self.ssr_s
        lo, hi = data_range
        return 1e6 if hi - lo > 1.0 else 1.0

    def snapshot(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    @property
    def epoch_seconds(self) -> float:
        return float(np.mean([r["wall_time"] for r in self.rows])) if self.rows else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = ["epoch", "loss", "accuracy", "mean_top_eigenvalue", "wall_time"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in self.rows:
            w.writerow([repr(r[k]) for k in keys])
        return buf.getvalue()


def mean_top_eigenvalue(net: Network, X, chunk: int = 512) -> float:
    X = np.atleast_2d(X)
    vals = []
    for i in range(0, X.shape[0], chunk):
        _, _, B = batch_factorization(net, X[i: i + chunk])
        vals.append(top_eigenpairs(B)[0])
    return float(np.mean(np.concatenate(vals)))


def ssr_penalty(net: Network, X, s: float, beta: float, params=None) -> Tensor:
    """beta * s * batch mean of the top eigenvalue of W A W^T.

    The eigenvector u comes from the c x c system and is held constant;
    u^T W A W^T u is rebuilt from the directional derivative v = W^T u as
    sum p v^2 - (p . v)^2 so it is differentiable in the parameters.
    """
    if beta == 0:
        return Tensor(0.0)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if params is None:
        params = [Tensor(p) for p in net.parameters()]
    current = net.with_parameters([p.value for p in params])
    _, _, B = batch_factorization(current, X)
    _, U = top_eigenpairs(B)
    V = jvp_logits(net, X, U, params)
    P = ad.softmax(forward_logits(net, X, params), axis=1)
    quad = ad.sum(P * V * V, axis=1) - ad.square(ad.sum(P * V, axis=1))
    return beta * s * ad.mean(quad)


def _project_l2(X_adv, X, delta, lo, hi):
    diff = X_adv - X
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    diff *= np.minimum(1.0, delta / np.maximum(norms, 1e-300))
    return np.clip(X + diff, lo, hi)


def _ce_rows(net: Network, X, y) -> np.ndarray:
    L = logits_np(net, X)
    m = L.max(axis=1, keepdims=True)
    return (m[:, 0] + np.log(np.exp(L - m).sum(axis=1))) - L[np.arange(len(y)), y]


def pgd_l2(net: Network, X, y, delta: float, steps: int, data_range=(0.0, 1.0),
           step_size: float | None = None, surrogate_beta: float = 50.0) -> np.ndarray:
    """l2 PGD maximizing cross-entropy; gradients from the softplus surrogate.

    Keeps, per row, the iterate with the highest loss on the ReLU network.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if delta == 0 or steps == 0:
        return X.copy()
    lo, hi = data_range
    alpha = step_size if step_size is not None else 2.5 * delta / steps
    sur = with_softplus(net, surrogate_beta)
    best, best_loss = X.copy(), _ce_rows(net, X, y)
    Xa = X.copy()
    for _ in range(steps):
        xt = Tensor(Xa, requires_grad=True)
        (g,) = ad.backward(ad.cross_entropy(forward_logits(sur, xt), y) * len(y), [xt])
        g = g.value
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        Xa = _project_l2(Xa + alpha * g / np.where(gn > 0, gn, 1.0), X, delta, lo, hi)
        cur = _ce_rows(net, Xa, y)
        better = cur > best_loss
        best[better], best_loss[better] = Xa[better], cur[better]
    return best


def _train(dataset: Dataset, cfg: TrainConfig, net: Network | None = None) -> tuple[Network, TrainHistory]:
    X, y = dataset.features, dataset.labels
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    c = max(int(y.max()) + 1, 2)
    if net is None:
        net = init_network([dataset.d, *cfg.hidden, c], "relu", 0.0, seed=cfg.seed)
    if y.max() >= net.class_count:
        raise ValueError("labels exceed the network's class count")
    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in net.parameters()]
    velocity = [np.zeros_like(p) for p in params]
    s = cfg.scale_for(dataset.data_range)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i: i + cfg.batch_size]
            Xb, yb = X[idx], y[idx]
            if cfg.mode == "pgd_at":
                Xb = pgd_l2(net.with_parameters(params), Xb, yb, cfg.pgd_delta, cfg.pgd_steps,
                            dataset.data_range, cfg.pgd_step_size, cfg.surrogate_beta)
            pt = [Tensor(p, requires_grad=True) for p in params]
            loss = ad.cross_entropy(forward_logits(net, Xb, pt), yb)
            if cfg.mode == "ssr" and cfg.ssr_beta > 0:
                loss = loss + ssr_penalty(net, Xb, s, cfg.ssr_beta, pt)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(epoch)
            grads = ad.backward(loss, pt)
            for j, g in enumerate(grads):
                if cfg.optimizer == "momentum":
                    velocity[j] = cfg.momentum * velocity[j] + g.value
                    params[j] = params[j] - cfg.learning_rate * velocity[j]
                else:
                    params[j] = params[j] - cfg.learning_rate * g.value
            losses.append(float(loss.value) * len(idx))
        net = net.with_parameters(params)
        history.append(
            epoch=epoch,
            loss=sum(losses) / len(dataset),
            accuracy=float(np.mean(predict(net, X) == y)),
            mean_top_eigenvalue=mean_top_eigenvalue(net, X),
            wall_time=time.perf_counter() - start,
        )
    meta = {"mode": cfg.mode, "seed": cfg.seed, "epoch": cfg.epochs}
    return dataclasses.replace(net, metadata=meta), history


def train_natural(dataset: Dataset, cfg: TrainConfig = TrainConfig()) -> tuple[Network, TrainHistory]:
    """Mini-batch cross-entropy training."""
    return _train(dataset, dataclasses.replace(cfg, mode="natural"))


def train_ssr(dataset: Dataset, cfg: TrainConfig = TrainConfig(mode="ssr")) -> tuple[Network, TrainHistory]:
    """Cross-entropy plus the SSR curvature penalty."""
    return _train(dataset, dataclasses.replace(cfg, mode="ssr"))


def train_pgd_at(dataset: Dataset, cfg: TrainConfig = TrainConfig(mode="pgd_at")) -> tuple[Network, TrainHistory]:
    """Training on l2-PGD adversarial examples of each batch."""
    return _train(dataset, dataclasses.replace(cfg, mode="pgd_at"))


def train(dataset: Dataset, cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    return {"natural": train_natural, "ssr": train_ssr, "pgd_at": train_pgd_at}[cfg.mode](dataset, cfg)
