"""Input-Hessian geometry, Lipschitz estimators and bound checks.

The loss Hessian of a locally linear network factors as W A W^T with
A = diag(p) - p p^T, so its spectrum is the spectrum of the small c x c
matrix B^T B with B = W sqrt(A).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attribution import AttributionConfig, method_noise, smooth_gradient
from .nn import (
    Network, QuantityOfInterest, ScalarQoI, batch_input_jacobian, input_jacobian, logits_np,
    predict,
)


class JacobiConvergenceError(RuntimeError):
    pass


# ----------------------------------------------------------------- spectra


def jacobi_eigh(S: np.ndarray, max_sweeps: int = 100, tol: float = 1e-15):
    """Eigen-decomposition of symmetric matrices by cyclic Jacobi rotations.

    Accepts one (c, c) matrix or a stack (n, c, c). Returns eigenvalues in
    descending order and the matching eigenvectors as columns.
    """
    S = np.asarray(S, dtype=np.float64)
    single = S.ndim == 2
    A = np.array(S[None] if single else S)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    n, c, _ = A.shape
    V = np.broadcast_to(np.eye(c), A.shape).copy()
    scale = np.sqrt(np.sum(A * A, axis=(1, 2)))
    off_mask = ~np.eye(c, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A[:, off_mask] ** 2, axis=1))
        if np.all(off <= tol * scale):
            break
        for p in range(c - 1):
            for q in range(p + 1, c):
                apq = A[:, p, q]
                active = np.abs(apq) > 0
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(theta == 0, 1.0, t)
                t = np.where(active, t, 0.0)
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                cs_, sn_ = cs[:, None], sn[:, None]
                for M in (A, V):
                    Mp, Mq = M[:, :, p].copy(), M[:, :, q].copy()
                    M[:, :, p] = cs_ * Mp - sn_ * Mq
                    M[:, :, q] = sn_ * Mp + cs_ * Mq
                Rp, Rq = A[:, p, :].copy(), A[:, q, :].copy()
                A[:, p, :] = cs_ * Rp - sn_ * Rq
                A[:, q, :] = sn_ * Rp + cs_ * Rq
    else:
        off = np.sqrt(np.sum(A[:, off_mask] ** 2, axis=1))
        if not np.all(off <= tol * scale):
            raise JacobiConvergenceError(f"Jacobi did not converge after {max_sweeps} sweeps")
    vals = np.diagonal(A, axis1=1, axis2=2)
    order = np.argsort(-vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    if single:
        return vals[0], V[0]
    return vals, V


def softmax_curvature(p: np.ndarray) -> np.ndarray:
    """A = diag(p) - p p^T, for one probit vector or a stack."""
    p = np.asarray(p, dtype=np.float64)
    return p[..., :, None] * np.eye(p.shape[-1]) - p[..., :, None] * p[..., None, :]


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    w, Q = np.linalg.eigh(A)
    return (Q * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ np.swapaxes(Q, -1, -2)


def top_eigenpairs(B: np.ndarray):
    """Largest eigenvalue of B B^T and its unit eigenvector, from B^T B.

    ``B`` is (d, c) or a stack (n, d, c). Returns (xi_max, u).
    """
    B = np.asarray(B, dtype=np.float64)
    single = B.ndim == 2
    Bs = B[None] if single else B
    vals, V = jacobi_eigh(np.swapaxes(Bs, 1, 2) @ Bs)
    u = Bs @ V[:, :, 0][:, :, None]
    u = u[:, :, 0]
    norms = np.linalg.norm(u, axis=1)
    fallback = np.zeros_like(u)
    fallback[:, 0] = 1.0
    u = np.where(norms[:, None] > 0, u / np.where(norms > 0, norms, 1.0)[:, None], fallback)
    if single:
        return vals[0, 0], u[0]
    return vals[:, 0], u


@dataclass
class HessianFactorization:
    W: np.ndarray
    p: np.ndarray
    A: np.ndarray
    sqrtA: np.ndarray
    B: np.ndarray
    eigvals: np.ndarray
    top_eigvec: np.ndarray

    @classmethod
    def from_jacobian(cls, W, p) -> HessianFactorization:
        W = np.asarray(W, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        A = softmax_curvature(p)
        sqrtA = psd_sqrt(A)
        B = W @ sqrtA
        vals, V = jacobi_eigh(B.T @ B)
        u = B @ V[:, 0]
        nu = np.linalg.norm(u)
        if nu > 0:
            u = u / nu
        else:
            u = np.zeros(W.shape[0])
            u[0] = 1.0
        return cls(W, p, A, sqrtA, B, vals, u)

    def dense(self) -> np.ndarray:
        """The d x d matrix W A W^T (only for checks on small d)."""
        return self.W @ self.A @ self.W.T


def closed_form_hessian(net: Network, x) -> HessianFactorization:
    """Cross-entropy input Hessian at x in factored form."""
    x = np.asarray(x, dtype=np.float64)
    logits = logits_np(net, x)
    p = np.exp(logits - logits.max())
    return HessianFactorization.from_jacobian(input_jacobian(net, x), p / p.sum())


def batch_factorization(net: Network, X):
    """(W, p, B) for a batch: shapes (n, d, c), (n, c), (n, d, c)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W = batch_input_jacobian(net, X)
    L = logits_np(net, X)
    P = np.exp(L - L.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    return W, P, W @ psd_sqrt(softmax_curvature(P))


def hessian_eigenvalues(fac: HessianFactorization) -> np.ndarray:
    """Spectrum of W A W^T restricted to its c-dimensional range, descending."""
    vals, _ = jacobi_eigh(fac.B.T @ fac.B)
    return vals


# ------------------------------------------------------------------ balls


@dataclass(frozen=True, eq=False)
class BallSpec:
    center: np.ndarray
    radius: float
    norm: float = 2

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        if self.norm not in (2, np.inf):
            raise ValueError("ball norm must be 2 or inf")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def dual(self) -> float:
        return 2 if self.norm == 2 else 1

    def sample(self, n: int, seed: int) -> np.ndarray:
        """n uniform points in the ball; a larger n extends the same sequence."""
        d = self.center.size
        dir_rng, rad_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        if self.norm == 2:
            g = dir_rng.standard_normal((n, d))
            g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
            r = self.radius * rad_rng.uniform(size=n) ** (1.0 / d)
            return self.center + g * r[:, None]
        return self.center + dir_rng.uniform(-self.radius, self.radius, size=(n, d))


@dataclass
class LipschitzEstimate:
    L_hat: float
    n_samples: int
    witness: np.ndarray
    norm: float


@dataclass
class RobustnessEstimate:
    lambda_hat: float
    n_samples: int
    witness: tuple | None
    norm: float


def _grad_fn(f) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(f, ScalarQoI):
        return f.gradients
    return f


def estimate_local_lipschitz(f, ball: BallSpec, n_samples: int, seed: int = 0) -> LipschitzEstimate:
    """Max dual gradient norm over the center and n sampled ball points.

    ``f`` is a :class:`ScalarQoI` or a function mapping an (m, d) batch to
    its (m, d) gradients.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    pts = np.vstack([ball.center, ball.sample(n_samples, seed)])
    norms = np.linalg.norm(_grad_fn(f)(pts), ord=ball.dual, axis=1)
    i = int(np.argmax(norms))
    return LipschitzEstimate(float(norms[i]), n_samples, pts[i].copy(), ball.norm)


def estimate_attribution_robustness(attr_fn, ball: BallSpec, n_samples: int, seed: int = 0,
                                    batched: bool = False) -> RobustnessEstimate:
    """Max of ||g(x) - g(x')||_2 / ||x - x'||_2 over sampled x' != x.

    ``attr_fn`` maps one input to its map, or an (m, d) batch to (m, d)
    maps when ``batched`` is set. A zero-radius ball gives 0.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if ball.radius == 0:
        return RobustnessEstimate(0.0, n_samples, None, ball.norm)
    pts = ball.sample(n_samples, seed)
    dist = np.linalg.norm(pts - ball.center, axis=1)
    pts = pts[dist > 0]
    dist = dist[dist > 0]
    if pts.shape[0] == 0:
        return RobustnessEstimate(0.0, n_samples, None, ball.norm)
    if batched:
        maps = attr_fn(np.vstack([ball.center, pts]))
        g0, G = maps[0], maps[1:]
    else:
        g0 = np.asarray(attr_fn(ball.center))
        G = np.array([attr_fn(p) for p in pts])
    ratios = np.linalg.norm(G - g0, axis=1) / dist
    i = int(np.argmax(ratios))
    return RobustnessEstimate(float(ratios[i]), n_samples, (ball.center.copy(), pts[i].copy()), ball.norm)


def sg_batch_attribution(net: Network, qoi: QuantityOfInterest, cls: int, sigma: float,
                         samples: int, seed: int) -> Callable[[np.ndarray], np.ndarray]:
    """Batched SmoothGrad with one frozen noise draw shared by every input."""
    cfg = AttributionConfig(qoi=qoi, sg_sigma=sigma, sg_samples=samples, seed=seed)
    noise = method_noise("SG", cfg, net.input_dim)
    f = ScalarQoI(net, qoi, cls)

    def attr(X):
        X = np.atleast_2d(X)
        if noise is None:
            return f.gradients(X)
        pts = (X[:, None, :] + noise[None]).reshape(-1, X.shape[1])
        return f.gradients(pts).reshape(X.shape[0], samples, -1).mean(axis=1)

    return attr


# ---------------------------------------------------------------- bounds


def sg_global_bound(F: float, sigma: float) -> float:
    """2F / sigma^2."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if F < 0:
        raise ValueError("F must be nonnegative")
    return 2.0 * F / sigma**2


def sg_noise_threshold(delta2: float, F: float, L: float) -> float:
    """sqrt(delta2 F / L): any larger sigma beats the 2L/delta2 gradient bound."""
    if not L > 0:
        raise ValueError("L must be positive")
    return float(np.sqrt(delta2 * F / L))


def theorem3_bound(delta2: float, eigvals) -> float:
    """delta2 * max |xi|."""
    xi = np.asarray(eigvals, dtype=np.float64)
    return float(delta2 * np.max(np.abs(xi))) if xi.size else 0.0


# ---------------------------------------------------------------- checks


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(w) for k, w in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(w) for w in v]
    return v


@dataclass
class CheckReport:
    check: str
    passed: bool
    witnesses: list = field(default_factory=list)
    statistics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"check": self.check, "pass": bool(self.passed),
                "witnesses": _jsonable(self.witnesses), "statistics": _jsonable(self.statistics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def verify_prop1(net: Network, x, sigma: float, n_samples: int = 10_000, seed: int = 0,
                 qoi: QuantityOfInterest = QuantityOfInterest("pre"), h: float = 1e-4) -> CheckReport:
    """SmoothGrad vs finite differences of the Monte Carlo smoothed function.

    The stencil uses common random numbers; the SmoothGrad estimate uses an
    independent draw. z-scores divide by the combined standard error.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    f = ScalarQoI(net, qoi).fixed_at(x)
    fd_seed, sg_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    eye = np.eye(d) * h
    if sigma == 0:
        sg = smooth_gradient(net, x, AttributionConfig(qoi=qoi, sg_sigma=0.0)).scores
        fd = ad.finite_diff_gradient(f.value, x, h)
        se = 1e-4 * np.maximum(1.0, np.abs(fd))
        z = (sg - fd) / se
        return CheckReport("prop1", bool(np.max(np.abs(z)) < 4), [],
                           {"sigma": 0.0, "max_abs_z": float(np.max(np.abs(z))), "sg": sg, "fd": fd})
    noise = sigma * np.random.default_rng(fd_seed).standard_normal((n_samples, d))
    fd = np.empty(d)
    fd_se = np.empty(d)
    for j in range(d):
        per = (f.values(x + eye[j] + noise) - f.values(x - eye[j] + noise)) / (2 * h)
        fd[j] = per.mean()
        fd_se[j] = per.std(ddof=1) / np.sqrt(n_samples)
    cfg = AttributionConfig(qoi=QuantityOfInterest(qoi.stage, f.cls), sg_sigma=sigma,
                            sg_samples=n_samples, seed=sg_seed)
    sg = smooth_gradient(net, x, cfg).scores
    grads = f.gradients(x + method_noise("SG", cfg, d))
    sg_se = grads.std(axis=0, ddof=1) / np.sqrt(n_samples)
    se = np.sqrt(fd_se**2 + sg_se**2)
    floor = 1e-9 * max(1.0, float(np.abs(sg).max()))
    z = (sg - fd) / np.maximum(se, floor)
    worst = int(np.argmax(np.abs(z)))
    return CheckReport("prop1", bool(np.abs(z).max() < 4), [{"coordinate": worst, "z": z[worst]}],
                       {"sigma": sigma, "n_samples": n_samples, "max_abs_z": float(np.abs(z).max()),
                        "z": z, "sg": sg, "fd": fd})


def triangle_bound_check(f, ball: BallSpec, n_samples: int, seed: int = 0) -> CheckReport:
    """Every sampled gradient gap is at most 2 L_hat over the same samples.

    Also reports 2 L_hat / ||x - x*|| for the pair attaining the largest gap.
    """
    pts = np.vstack([ball.center, ball.sample(n_samples, seed)])
    G = _grad_fn(f)(pts)
    L_hat = float(np.max(np.linalg.norm(G, ord=ball.dual, axis=1)))
    gaps = np.linalg.norm(G[1:] - G[0], axis=1)
    bad = np.flatnonzero(gaps > 2 * L_hat * (1 + 1e-12))
    i = int(np.argmax(gaps)) if gaps.size else 0
    dist = float(np.linalg.norm(pts[i + 1] - ball.center)) if gaps.size else 0.0
    witnesses = [{"x": ball.center, "x_prime": pts[j + 1], "gap": gaps[j]} for j in bad[:5]]
    return CheckReport("triangle", bad.size == 0, witnesses, {
        "L_hat": L_hat, "max_gap": float(gaps.max()) if gaps.size else 0.0,
        "lambda_bound_at_witness": 2 * L_hat / dist if dist > 0 else None,
        "witness_distance": dist, "violations": int(bad.size)})


def theorem2_check(net: Network, ball: BallSpec, sigma: float, n_samples: int = 20, seed: int = 0,
                   sg_samples: int = 100) -> CheckReport:
    """SmoothGrad robustness of a post-softmax score stays under 2 / sigma^2."""
    qoi = QuantityOfInterest("post")
    cls = qoi.resolve(net, ball.center)
    attr = sg_batch_attribution(net, qoi, cls, sigma, sg_samples, seed + 1)
    est = estimate_attribution_robustness(attr, ball, n_samples, seed, batched=True)
    bound = sg_global_bound(1.0, sigma)
    ok = est.lambda_hat <= bound
    return CheckReport("theorem2", ok, [] if ok else [est.witness],
                       {"lambda_hat": est.lambda_hat, "bound": bound, "sigma": sigma,
                        "ratio": est.lambda_hat / bound})


def theorem3_check(net: Network, x, delta2: float = 1e-2, n_samples: int = 1000, seed: int = 0,
                   qoi: QuantityOfInterest = QuantityOfInterest("post"), slack: float = 1.1,
                   min_fraction: float = 0.99, h: float = 1e-4) -> CheckReport:
    """Gradient gaps in a small l2 ball against delta2 times the top |eigenvalue|.

    The eigenvalues come from a finite-difference Hessian of the score; the
    slack absorbs the Taylor remainder.
    """
    x = np.asarray(x, dtype=np.float64)
    f = ScalarQoI(net, qoi).fixed_at(x)
    xi = np.linalg.eigvalsh(ad.finite_diff_hessian(f.value, x, h))
    bound = theorem3_bound(delta2, xi)
    ball = BallSpec(x, delta2, 2)
    pts = ball.sample(n_samples, seed)
    G = f.gradients(np.vstack([x, pts]))
    gaps = np.linalg.norm(G[1:] - G[0], axis=1)
    within = gaps <= slack * bound
    frac = float(within.mean())
    i = int(np.argmax(gaps))
    return CheckReport("theorem3", frac >= min_fraction,
                       [] if within.all() else [{"x": x, "x_prime": pts[i], "gap": gaps[i]}],
                       {"bound": bound, "max_gap": float(gaps.max()), "fraction_within": frac,
                        "eigvals": xi})


def prop3_check(net: Network, x, h: float = 1e-4, tol: float = 1e-3,
                hessian_override: Callable | None = None) -> CheckReport:
    """Closed-form W A W^T against a finite-difference cross-entropy Hessian.

    ``hessian_override(net, x)`` replaces the closed form (negative controls).
    """
    x = np.asarray(x, dtype=np.float64)
    y = int(predict(net, x))

    def loss(v):
        L = logits_np(net, v)
        m = L.max()
        return float(m + np.log(np.sum(np.exp(L - m))) - L[y])

    fac = closed_form_hessian(net, x)
    H = fac.dense() if hessian_override is None else np.asarray(hessian_override(net, x))
    fd = ad.finite_diff_hessian(loss, x, h)
    err = float(np.max(np.abs(H - fd)))
    row = float(np.max(np.abs(fac.A.sum(axis=1))))
    min_eig = float(np.linalg.eigvalsh(fac.A).min())
    xi = fac.eigvals
    psd = bool(xi.min() >= -1e-8 * max(1.0, xi.max()))
    ok = err < tol and row < 1e-12 and min_eig >= -1e-8 and psd
    return CheckReport("prop3", ok, [] if ok else [{"x": x}],
                       {"max_entry_error": err, "A_row_sum": row, "A_min_eig": min_eig,
                        "xi_min": float(xi.min()), "xi_max": float(xi.max())})


def eigen_trick_check(fac: HessianFactorization, rtol: float = 1e-8) -> CheckReport:
    """Jacobi spectrum of B^T B against a dense eigensolver on B B^T."""
    small = hessian_eigenvalues(fac)
    big = np.sort(np.linalg.eigvalsh(fac.B @ fac.B.T))[::-1]
    k = min(small.size, big.size)
    scale = max(float(np.abs(big).max()) if big.size else 0.0, 1e-300)
    err = float(np.max(np.abs(small[:k] - big[:k]))) / scale
    # anything beyond the first k eigenvalues must be (numerically) zero
    rest = float(np.max(np.abs(small[k:]), initial=0.0)) / scale
    ok = err <= rtol and rest <= rtol
    return CheckReport("eigen_trick", ok, [], {"relative_error": err, "residual": rest,
                                               "eigvals": small})
