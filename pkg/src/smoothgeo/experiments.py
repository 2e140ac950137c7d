"""Experiment drivers: attack robustness, regularization, transfer, theory checks."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, AttackResult, pgd_attack, random_perturbation
from .attribution import METHODS, AttributionConfig, attribute
from .data import Dataset, digits_preset, gen_two_moons
from .geometry import (
    BallSpec, CheckReport, HessianFactorization, eigen_trick_check, prop3_check,
    sg_global_bound, sg_noise_threshold, theorem2_check, theorem3_check, triangle_bound_check,
    verify_prop1,
)
from .metrics import DEFAULT_EPS_GRID, GridGeometry, MetricReport, compare_maps
from .nn import Network, QuantityOfInterest, ScalarQoI, init_network, load_checkpoint, predict, preactivation_margin
from .training import TrainHistory, mean_top_eigenvalue

EXPERIMENTS = ("robustness", "regularization", "transfer", "theory_check")


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str = "robustness"
    checkpoints: tuple[str, ...] = ()
    dataset: str = "digits"
    data_root: str | None = None
    methods: tuple[str, ...] = METHODS
    attacks: tuple[str, ...] = ("topk",)
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID  # native data units
    k: int = 4
    n_images: int = 100
    seed: int = 0
    steps: int = 50
    surrogate_beta: float = 50.0
    preset: str = "desk"
    qoi_stage: str = "post"  # predicted-class probability
    grad_times_input: tuple[str, ...] = ("SM", "SG", "UG")
    out_dir: str | None = None
    format: str = "csv"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if any(b <= a for a, b in zip(self.eps_grid, self.eps_grid[1:])):
            raise ValueError("eps grid must be strictly increasing")
        if any(m not in METHODS for m in self.methods):
            raise ValueError(f"unknown attribution method in {self.methods}")
        if self.qoi_stage not in ("pre", "post"):
            raise ValueError(f"unknown qoi stage {self.qoi_stage!r}")
        if self.format not in ("csv", "json"):
            raise ValueError("format must be csv or json")

    def attribution_config(self, method: str) -> AttributionConfig:
        """Noise presets on the unit model range, explaining the predicted class."""
        return AttributionConfig.preset((0.0, 1.0), self.preset, seed=self.seed,
                                        qoi=QuantityOfInterest(self.qoi_stage),
                                        grad_times_input=method in self.grad_times_input)

    def attack_config(self, kind: str, method: str, eps_unit: float, geometry: GridGeometry,
                      target_map=None) -> AttackConfig:
        return AttackConfig(kind=kind, epsilon=eps_unit, steps=self.steps,
                            surrogate_beta=self.surrogate_beta,
                            k=self.k if kind == "topk" else None,
                            target_map=target_map if kind == "manipulate" else None,
                            data_range=(0.0, 1.0), seed=self.seed + 1, method=method,
                            attribution=self.attribution_config(method), geometry=geometry)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SMOOTHGEO_WORKERS", "1")))
    except ValueError:
        return 1


def _map_inputs(fn, items: list) -> list:
    """Apply ``fn`` per item, optionally in a process pool; order is preserved."""
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, *zip(*items)))


# ------------------------------------------------------------------ inputs


@dataclass
class EvalSet:
    X: np.ndarray
    y: np.ndarray
    geometry: GridGeometry
    native_span: float  # eps in native units is divided by this


def load_test_data(spec: ExperimentSpec) -> tuple[Dataset, float]:
    """Test split on the unit range, plus the native-unit span for eps scaling."""
    if spec.dataset == "digits":
        _, test = digits_preset(spec.data_root)
    elif spec.dataset == "moons":
        test = gen_two_moons(400, 0.1, spec.seed + 1)
    else:
        raise ValueError(f"unknown dataset {spec.dataset!r}")
    lo, hi = test.data_range
    return test.to_unit(), hi - lo


def evaluation_set(net: Network, test: Dataset, n: int, native_span: float) -> EvalSet:
    """First n correctly classified test points."""
    ok = np.flatnonzero(predict(net, test.features) == test.labels)[:n]
    return EvalSet(test.features[ok], test.labels[ok], test.geometry, native_span)


def _targets(ev: EvalSet, net: Network, method: str, acfg: AttributionConfig) -> list:
    """Manipulate target per input: the map of the next input with another label."""
    maps = {}
    out = []
    n = len(ev.y)
    for i in range(n):
        j = next(((i + s) % n for s in range(1, n) if ev.y[(i + s) % n] != ev.y[i]), (i + 1) % n)
        if j not in maps:
            maps[j] = attribute(net, ev.X[j], method, acfg).scores
        out.append(maps[j])
    return out


def _attack_one(net: Network, x, cfg: AttackConfig, k: int, geometry: GridGeometry):
    res = pgd_attack(net, x, cfg)
    z = attribute(net, x, cfg.method, cfg.attribution).scores
    z_adv = attribute(net, res.x_adv, cfg.method, cfg.attribution).scores
    return compare_maps(z, z_adv, k, geometry), res


def _report(per_eps: dict, audits: dict, k: int, label: dict) -> MetricReport:
    rep = MetricReport.from_pairs(per_eps, k, label)
    rep.audit = audits
    return rep


def attack_suite(net: Network, ev: EvalSet, spec: ExperimentSpec, method: str, kind: str):
    """Attack every input at every eps; returns (report, results by eps)."""
    acfg = spec.attribution_config(method)
    targets = _targets(ev, net, method, acfg) if kind == "manipulate" else [None] * len(ev.y)
    per_eps, audits, results = {}, {}, {}
    for eps in spec.eps_grid:
        eps_unit = eps / ev.native_span
        items = [(net, ev.X[i], spec.attack_config(kind, method, eps_unit, ev.geometry, targets[i]),
                  spec.k, ev.geometry) for i in range(len(ev.y))]
        out = _map_inputs(_attack_one, items)
        per_eps[eps] = [m for m, _ in out]
        results[eps] = [r for _, r in out]
        audits[eps] = {"infeasible": sum(not r.feasible for r in results[eps]),
                       "max_linf": max((r.linf for r in results[eps]), default=0.0),
                       "eps_unit": eps_unit}
    return _report(per_eps, audits, spec.k, {"method": method, "attack": kind}), results


# ------------------------------------------------------------------ drivers


def _load_nets(spec: ExperimentSpec) -> list[Network]:
    if not spec.checkpoints:
        raise ValueError("experiment needs at least one checkpoint")
    return [load_checkpoint(p) for p in spec.checkpoints]


def run_robustness_experiment(spec: ExperimentSpec, net: Network | None = None,
                              test: tuple[Dataset, float] | None = None) -> list[MetricReport]:
    """One report per (method, attack kind) on a single model."""
    net = net if net is not None else _load_nets(spec)[0]
    data, span = test if test is not None else load_test_data(spec)
    ev = evaluation_set(net, data, spec.n_images, span)
    reports = [attack_suite(net, ev, spec, m, kind)[0] for kind in spec.attacks for m in spec.methods]
    if spec.out_dir:
        write_reports(reports, Path(spec.out_dir), "robustness", spec.format)
    return reports


def run_regularization_experiment(spec: ExperimentSpec, nets: dict[str, Network] | None = None,
                                  histories: dict[str, TrainHistory] | None = None,
                                  test: tuple[Dataset, float] | None = None) -> dict:
    """The robustness pipeline per model, side by side, with curvature, accuracy and time.

    Each model is evaluated on its own first-N correctly classified inputs.
    """
    if nets is None:
        loaded = _load_nets(spec)
        nets = {Path(p).stem: n for p, n in zip(spec.checkpoints, loaded)}
    data, span = test if test is not None else load_test_data(spec)
    histories = histories or {}
    table = {}
    for name, net in nets.items():
        ev = evaluation_set(net, data, spec.n_images, span)
        reports = [attack_suite(net, ev, spec, m, kind)[0] for kind in spec.attacks for m in spec.methods]
        for r in reports:
            r.label = {"model": name, **r.label}
        hist = histories.get(name)
        table[name] = {
            "reports": reports,
            "mean_top_eigenvalue": mean_top_eigenvalue(net, ev.X),
            "test_accuracy": float(np.mean(predict(net, data.features) == data.labels)),
            "train_accuracy": hist.rows[-1]["accuracy"] if hist and hist.rows else None,
            "epoch_seconds": hist.epoch_seconds if hist else None,
        }
    if spec.out_dir:
        out = Path(spec.out_dir)
        write_reports([r for v in table.values() for r in v["reports"]], out, "regularization", spec.format)
        write_summary(table, out / "regularization_summary.json")
    return table


def run_transfer_experiment(spec: ExperimentSpec, net: Network | None = None,
                            test: tuple[Dataset, float] | None = None) -> list[MetricReport]:
    """Attack SM, then score the found perturbations under every method."""
    net = net if net is not None else _load_nets(spec)[0]
    data, span = test if test is not None else load_test_data(spec)
    ev = evaluation_set(net, data, spec.n_images, span)
    reports = []
    for kind in spec.attacks:
        _, results = attack_suite(net, ev, spec, "SM", kind)
        for method in spec.methods:
            acfg = spec.attribution_config(method)
            per_eps, audits = {}, {}
            for eps in spec.eps_grid:
                rows = []
                for r in results[eps]:
                    z = attribute(net, r.x, method, acfg).scores
                    rows.append(compare_maps(z, attribute(net, r.x_adv, method, acfg).scores, spec.k, ev.geometry))
                per_eps[eps] = rows
                audits[eps] = {"infeasible": sum(not r.feasible for r in results[eps]),
                               "max_linf": max((r.linf for r in results[eps]), default=0.0)}
            reports.append(_report(per_eps, audits, spec.k, {"method": method, "attack": kind, "source": "SM"}))
    if spec.out_dir:
        write_reports(reports, Path(spec.out_dir), "transfer", spec.format)
    return reports


def random_baseline(net: Network, ev: EvalSet, method: str, spec: ExperimentSpec, eps: float) -> list[float]:
    """cosd between the clean map and the map after a random same-budget perturbation."""
    acfg = spec.attribution_config(method)
    out = []
    for i, x in enumerate(ev.X):
        xr = random_perturbation(x, eps / ev.native_span, (0.0, 1.0), spec.seed + 1000 + i)
        z = attribute(net, x, method, acfg).scores
        out.append(compare_maps(z, attribute(net, xr, method, acfg).scores, spec.k, ev.geometry)["cosd"])
    return out


def run_theory_checks(spec: ExperimentSpec, n_nets: int = 5) -> list[CheckReport]:
    """Every geometry verifier on fresh random networks; see :func:`all_passed`."""
    rng = np.random.default_rng(spec.seed)
    reports = []

    def random_net(activation, beta=0.0, max_dim=12, max_classes=6):
        depth = int(rng.integers(1, 4))
        d = int(rng.integers(2, max_dim + 1))
        dims = [d] + [int(rng.integers(2, max_dim + 1)) for _ in range(depth - 1)] + [int(rng.integers(2, max_classes + 1))]
        return init_network(dims, activation, beta, seed=int(rng.integers(2**31)))

    for i in range(n_nets):
        net = random_net("relu")
        x = rng.uniform(0, 1, net.input_dim)
        f = ScalarQoI(net, QuantityOfInterest("pre")).fixed_at(x)
        reports.append(triangle_bound_check(f, BallSpec(x, 0.5, 2), 200, spec.seed + i))
        sigma = float(rng.uniform(0.1, 1.0))
        reports.append(theorem2_check(net, BallSpec(x, float(rng.uniform(0.05, 1.0)), 2), sigma, 20, spec.seed + i))
        while preactivation_margin(net, x) <= 1e-2:
            x = rng.uniform(0, 1, net.input_dim)
        reports.append(prop3_check(net, x))
        W = rng.normal(size=(int(rng.integers(1, 17)), int(rng.integers(2, 11))))
        reports.append(eigen_trick_check(HessianFactorization.from_jacobian(W, rng.dirichlet(np.ones(W.shape[1])))))
        sp = random_net("softplus", float(rng.uniform(1, 10)))
        xs = rng.uniform(0, 1, sp.input_dim)
        reports.append(theorem3_check(sp, xs, 1e-2, 1000, spec.seed + i))
        reports.append(verify_prop1(sp, xs, 0.1, 10_000, spec.seed + i))
    reports.append(prop2_algebra_check(rng))
    if spec.out_dir:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "theory_checks.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True))
    return reports


def prop2_algebra_check(rng, trials: int = 1000) -> CheckReport:
    """sigma above the noise threshold always beats the 2L/delta2 bound."""
    bad = []
    for _ in range(trials):
        d2, F, L = rng.uniform(1e-3, 10), rng.uniform(1e-3, 10), rng.uniform(1e-3, 100)
        sigma = sg_noise_threshold(d2, F, L) * rng.uniform(1.0001, 100)
        if not sg_global_bound(F, sigma) < 2 * L / d2:
            bad.append({"delta2": d2, "F": F, "L": L, "sigma": sigma})
    return CheckReport("prop2", not bad, bad[:5], {"trials": trials, "violations": len(bad)})


def all_passed(reports: list[CheckReport]) -> bool:
    return all(r.passed for r in reports)


# ----------------------------------------------------------------- output


def reports_csv(reports: list[MetricReport]) -> str:
    """One CSV with the union of label columns; rows in report order."""
    keys = sorted({key for r in reports for key in r.label})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + ["eps", "k_in", "cor", "cdl", "cosd"])
    for r in reports:
        full = dataclasses.replace(r, label={key: r.label.get(key, "") for key in keys})
        w.writerows(full.csv_rows())
    return buf.getvalue()


def write_reports(reports: list[MetricReport], out: Path, name: str, fmt: str = "csv") -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / f"{name}.csv"
        path.write_text(reports_csv(reports))
    else:
        path = out / f"{name}.json"
        path.write_text(json.dumps([_with_audit(r) for r in reports], indent=1, sort_keys=True))
    # the audit (infeasible counts, budget check) always goes to JSON
    (out / f"{name}_audit.json").write_text(json.dumps([_with_audit(r) for r in reports], indent=1, sort_keys=True))
    return path


def _with_audit(r: MetricReport) -> dict:
    d = r.to_dict()
    d["audit"] = {repr(float(k)): v for k, v in r.audit.items()}
    return d


def write_summary(table: dict, path: Path) -> None:
    rows = {name: {key: v for key, v in entry.items() if key != "reports"} for name, entry in table.items()}
    for name, entry in table.items():
        rows[name]["auc_cosd"] = {r.label["method"] + "/" + r.label["attack"]: (r.auc or {}).get("cosd")
                                  for r in entry["reports"]}
    path.write_text(json.dumps(rows, indent=1, sort_keys=True))
