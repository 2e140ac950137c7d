"""Acceptance criteria 1 to 13.

Each test records its outcome through ``conftest.criterion``; the terminal
summary prints one PASS/FAIL line per criterion. The digits experiments
share session fixtures so every model is trained once.
"""

import time

import numpy as np
import pytest

from smoothgeo import autodiff as ad
from smoothgeo.attribution import AttributionConfig, attribute, integrated_gradients
from smoothgeo.autodiff import Tensor
from smoothgeo.data import digits_preset
from smoothgeo.experiments import (
    ExperimentSpec, attack_suite, evaluation_set, random_baseline,
    run_regularization_experiment, run_robustness_experiment, run_transfer_experiment,
)
from smoothgeo.geometry import (
    BallSpec, HessianFactorization, eigen_trick_check, prop3_check, theorem2_check,
    theorem3_check, verify_prop1,
)
from smoothgeo.metrics import (
    GridGeometry, center_dislocation, compare_maps, cosine_distance, log_auc, mass_center,
    spearman_correlation, topk_intersection,
)
from smoothgeo.nn import (
    QuantityOfInterest, ScalarQoI, init_network, predict, preactivation_margin, quantity,
)
from smoothgeo.training import TrainConfig, mean_top_eigenvalue, train

from conftest import criterion, random_net

pytestmark = pytest.mark.acceptance

N_EVAL = 100
METHODS = ("SM", "IG", "SG", "UG")


def _generic_net(rng, activation, max_dim=16, max_classes=10, beta=0.0):
    depth = int(rng.integers(1, 4))
    dims = ([int(rng.integers(2, max_dim + 1))] + [int(rng.integers(2, max_dim + 1)) for _ in range(depth - 1)]
            + [int(rng.integers(2, max_classes + 1))])
    return init_network(dims, activation, beta, seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def digits(digits_root):
    train_set, test_set = digits_preset(digits_root)
    lo, hi = test_set.data_range
    return train_set.to_unit(), test_set.to_unit(), hi - lo


@pytest.fixture(scope="session")
def natural(digits):
    start = time.perf_counter()
    net, hist = train(digits[0], TrainConfig(mode="natural", seed=0))
    return net, hist, time.perf_counter() - start


@pytest.fixture(scope="session")
def ssr(digits):
    start = time.perf_counter()
    net, hist = train(digits[0], TrainConfig(mode="ssr", seed=0))
    return net, hist, time.perf_counter() - start


@pytest.fixture(scope="session")
def regularization(digits, natural, ssr):
    """Paired natural/SSR evaluation under the top-k attack; also feeds criterion 12."""
    _, test, span = digits
    start = time.perf_counter()
    spec = ExperimentSpec(experiment="regularization", n_images=N_EVAL, methods=METHODS)
    table = run_regularization_experiment(spec, {"natural": natural[0], "ssr": ssr[0]},
                                          {"natural": natural[1], "ssr": ssr[1]}, (test, span))
    return table, time.perf_counter() - start


def _auc_cosd(reports) -> dict:
    return {r.label["method"]: r.auc["cosd"] for r in reports}


def _fmt(d: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in d.items())


# ---------------------------------------------------------------- theory


class TestTheory:
    def test_c01_gradient_correctness(self):
        with criterion(1, "gradient correctness") as rec:
            rng = np.random.default_rng(101)
            start = time.perf_counter()
            worst = 0.0
            for _ in range(100):
                net = random_net(rng, "softplus")
                x = rng.uniform(0, 1, net.input_dim)
                f = ScalarQoI(net, QuantityOfInterest("pre", int(rng.integers(net.class_count))))
                g = f.gradient(x)
                fd = ad.finite_diff_gradient(f.value, x, 1e-3)
                worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g)))))
            # d/dx ||grad_x f||^2 through double backprop
            worst2 = 0.0
            for _ in range(20):
                net = random_net(rng, "softplus", max_dim=8)
                x = rng.uniform(0, 1, net.input_dim)
                qoi = QuantityOfInterest("pre", int(rng.integers(net.class_count)))
                f = ScalarQoI(net, qoi)

                def grad_norm_sq(v):
                    return float(np.sum(f.gradient(v) ** 2))

                xt = Tensor(x, requires_grad=True)
                (gx,) = ad.backward(quantity(net, xt, qoi, qoi.class_index), [xt], create_graph=True)
                (hg,) = ad.backward(ad.sum(gx * gx), [xt])
                fd = ad.finite_diff_gradient(grad_norm_sq, x, 1e-4)
                worst2 = max(worst2, float(np.max(np.abs(hg.value - fd) / np.maximum(1.0, np.abs(fd)))))
            elapsed = time.perf_counter() - start
            rec["passed"] = worst < 1e-4 and worst2 < 1e-3 and elapsed < 30
            rec["detail"] = f"max rel err {worst:.2e} (<1e-4), double backprop {worst2:.2e} (<1e-3), {elapsed:.1f}s"
            assert rec["passed"], rec["detail"]

    def test_c02_ig_completeness(self):
        with criterion(2, "IG completeness") as rec:
            rng = np.random.default_rng(102)
            worst = 0.0
            for _ in range(50):
                net = random_net(rng, "softplus")
                x = rng.uniform(0, 1, net.input_dim)
                xb = rng.uniform(0, 1, net.input_dim)
                cfg = AttributionConfig(qoi=QuantityOfInterest("post"), ig_steps=512, ig_baseline=tuple(xb))
                z = integrated_gradients(net, x, cfg).scores
                f = ScalarQoI(net, cfg.qoi).fixed_at(x)
                delta = f.value(x) - f.value(xb)
                worst = max(worst, abs(z.sum() - delta) / (1e-3 * abs(delta) + 1e-6))
            rec["passed"] = worst < 1.0
            rec["detail"] = f"max |sum IG - delta f| / tolerance = {worst:.3f} (<1)"
            assert rec["passed"], rec["detail"]

    def test_c03_prop3_exactness(self):
        with criterion(3, "closed-form Hessian exactness") as rec:
            rng = np.random.default_rng(103)
            reports = []
            while len(reports) < 50:
                net = _generic_net(rng, "relu")
                x = rng.uniform(0, 1, net.input_dim)
                if preactivation_margin(net, x) <= 1e-2:
                    continue
                reports.append(prop3_check(net, x))
            err = max(r.statistics["max_entry_error"] for r in reports)
            row = max(r.statistics["A_row_sum"] for r in reports)
            eig = min(r.statistics["A_min_eig"] for r in reports)
            rec["passed"] = all(r.passed for r in reports)
            rec["detail"] = f"max entry err {err:.2e}, A row sum {row:.1e}, A min eig {eig:.1e}"
            assert rec["passed"], rec["detail"]

    def test_c04_eigen_trick(self):
        with criterion(4, "small-matrix eigenvalue trick") as rec:
            rng = np.random.default_rng(104)
            reports = []
            for _ in range(100):
                W = rng.normal(size=(int(rng.integers(1, 65)), int(rng.integers(2, 11))))
                p = rng.dirichlet(np.ones(W.shape[1]) * rng.uniform(0.1, 5))
                reports.append(eigen_trick_check(HessianFactorization.from_jacobian(W, p)))
            err = max(r.statistics["relative_error"] for r in reports)
            rec["passed"] = all(r.passed for r in reports)
            rec["detail"] = f"max relative spectrum error {err:.1e} (<=1e-8)"
            assert rec["passed"], rec["detail"]

    def test_c05_sg_hard_bound(self):
        with criterion(5, "SmoothGrad robustness bound") as rec:
            rng = np.random.default_rng(105)
            violations, worst = 0, 0.0
            for i in range(1000):
                act = "relu" if i % 2 == 0 else "softplus"
                net = _generic_net(rng, act, beta=float(rng.uniform(1, 10)) if act == "softplus" else 0.0)
                ball = BallSpec(rng.uniform(0, 1, net.input_dim), float(rng.uniform(0.01, 1.0)),
                                2 if rng.random() < 0.5 else np.inf)
                sigma = float(np.exp(rng.uniform(np.log(0.05), 0.0)))
                r = theorem2_check(net, ball, sigma, 20, i)
                violations += not r.passed
                worst = max(worst, r.statistics["ratio"])
            rec["passed"] = violations == 0
            rec["detail"] = f"{violations} violations in 1000 trials, max lambda/bound {worst:.3f}"
            assert rec["passed"], rec["detail"]

    def test_c06_curvature_bound(self):
        with criterion(6, "curvature bound on gradient change") as rec:
            rng = np.random.default_rng(106)
            fracs = []
            for i in range(10):
                net = _generic_net(rng, "softplus", max_dim=12, beta=float(rng.uniform(1, 10)))
                x = rng.uniform(0, 1, net.input_dim)
                fracs.append(theorem3_check(net, x, 1e-2, 1000, i).statistics["fraction_within"])
            rec["passed"] = min(fracs) >= 0.99
            rec["detail"] = f"min fraction within 1.1x bound over 10 nets {min(fracs):.4f} (>=0.99)"
            assert rec["passed"], rec["detail"]

    def test_c07_smoothgrad_is_smoothed_gradient(self):
        with criterion(7, "SmoothGrad equals gradient of smoothed function") as rec:
            rng = np.random.default_rng(107)
            zs = []
            for i in range(20):
                net = random_net(rng, "softplus", max_dim=8)
                x = rng.uniform(0, 1, net.input_dim)
                r = verify_prop1(net, x, float(rng.uniform(0.05, 0.5)), 10_000, i)
                zs.append(r.statistics["max_abs_z"])
            rec["passed"] = max(zs) < 4
            rec["detail"] = f"max per-coordinate z-score {max(zs):.2f} (<4) over 20 nets"
            assert rec["passed"], rec["detail"]


class TestMetricsSuite:
    def test_c08_metric_examples(self):
        with criterion(8, "metric unit examples") as rec:
            g22, g13 = GridGeometry(2, 2), GridGeometry(1, 3)
            checks = {
                "k-in identical": (topk_intersection([4, 3, 2, 1], [4, 3, 2, 1], 2), 0.7),
                "k-in reversed": (topk_intersection([4, 3, 2, 1], [1, 2, 3, 4], 2), 0.3),
                "k-in k=d": (topk_intersection([4, 3, 2, 1], [0, 0, 5, 1], 4), 1.0),
                "spearman identical": (spearman_correlation([1, 2, 3, 4], [1, 2, 3, 4]), 1.0),
                "spearman reversed": (spearman_correlation([1, 2, 3, 4], [4, 3, 2, 1]), -1.0),
                "spearman 0.5": (spearman_correlation([1, 2, 3], [2, 1, 3]), 0.5),
                "center point mass": (tuple(mass_center([1, 0, 0, 0], g22)), (0.0, 0.0)),
                "center uniform": (tuple(mass_center([1, 1, 1, 1], g22)), (0.5, 0.5)),
                "center scaling": (tuple(mass_center([7, 2, 0, 1], g22)), tuple(mass_center([14, 4, 0, 2], g22))),
                "cdl identical": (center_dislocation([1, 2, 3], [1, 2, 3], g13), 0.0),
                "cdl one cell": (center_dislocation([1, 0, 0, 0], [0, 1, 0, 0], g22), 1.0),
                "cdl symmetric swap": (center_dislocation([1, 0, 0], [0, 0, 1], g13), 2.0),
                "cosd self": (cosine_distance([1, -2, 3], [1, -2, 3]), 0.0),
                "cosd negated": (cosine_distance([1, -2, 3], [-1, 2, -3]), 2.0),
                "cosd orthogonal": (cosine_distance([1, 0], [0, 1]), 1.0),
                "auc rectangle": (log_auc([(e, 0.25) for e in (2, 4, 8, 16)]), 0.75),
                "auc triangle": (log_auc([(2, 0.0), (4, 1.0)]), 0.5),
                "default grid": (ExperimentSpec().eps_grid, (2.0, 4.0, 8.0, 16.0)),
            }
            bad = [name for name, (got, want) in checks.items()
                   if not np.allclose(got, want, rtol=1e-12, atol=1e-12)]
            rec["passed"] = not bad
            rec["detail"] = f"{len(checks) - len(bad)}/{len(checks)} examples" + (f", failed {bad}" if bad else "")
            assert rec["passed"], rec["detail"]


# ---------------------------------------------------------------- digits experiments


class TestDigits:
    def test_c09_attack_efficacy(self, digits, natural):
        with criterion(9, "manipulate attack beats random perturbation") as rec:
            net, _, train_seconds = natural
            _, test, span = digits
            start = time.perf_counter()
            spec = ExperimentSpec(n_images=N_EVAL, methods=("SM",), attacks=("manipulate",), eps_grid=(8.0,))
            ev = evaluation_set(net, test, N_EVAL, span)
            _, results = attack_suite(net, ev, spec, "SM", "manipulate")
            results = results[8.0]
            acfg = spec.attribution_config("SM")
            attack_cosd = [compare_maps(attribute(net, r.x, "SM", acfg).scores,
                                        attribute(net, r.x_adv, "SM", acfg).scores, spec.k, ev.geometry)["cosd"]
                           for r in results]
            rand_cosd = random_baseline(net, ev, "SM", spec, 8.0)
            wins = float(np.mean(np.array(attack_cosd) > np.array(rand_cosd)))
            eps = 8.0 / span
            budget = all(r.linf <= eps + 1e-12 for r in results)
            in_range = all(r.x_adv.min() >= 0.0 and r.x_adv.max() <= 1.0 for r in results)
            feasible = all(predict(net, r.x_adv) == predict(net, r.x) for r in results if r.feasible)
            identity = all(np.array_equal(r.x_adv, r.x) for r in results if not r.feasible)
            elapsed = train_seconds + time.perf_counter() - start
            rec["passed"] = (len(results) == N_EVAL and wins >= 0.9 and budget and in_range and feasible
                             and identity and elapsed < 600)
            rec["detail"] = (f"attack > random on {wins:.0%} of {len(results)} (>=90%), "
                             f"mean cosd {np.mean(attack_cosd):.3f} vs {np.mean(rand_cosd):.3f}, "
                             f"invariants {'ok' if budget and in_range and feasible and identity else 'VIOLATED'}, "
                             f"infeasible {sum(not r.feasible for r in results)}, {elapsed:.0f}s (<600)")
            assert rec["passed"], rec["detail"]

    def test_c10_ssr_direction(self, digits, natural, ssr, regularization):
        with criterion(10, "SSR lowers curvature and attribution fragility") as rec:
            table, eval_seconds = regularization
            train_set, test, _ = digits
            # curvature on the same points for both models: the whole test split
            xi = {m: mean_top_eigenvalue(net, test.features) for m, net in (("natural", natural[0]), ("ssr", ssr[0]))}
            # reported only: natural training saturates the softmax on its own training points
            xi_train = {m: mean_top_eigenvalue(net, train_set.features)
                        for m, net in (("natural", natural[0]), ("ssr", ssr[0]))}
            test_acc = {m: table[m]["test_accuracy"] for m in table}
            train_acc = {m: float(np.mean(predict(net, train_set.features) == train_set.labels))
                         for m, net in (("natural", natural[0]), ("ssr", ssr[0]))}
            auc = {m: _auc_cosd(table[m]["reports"]) for m in table}
            elapsed = natural[2] + ssr[2] + eval_seconds
            lower_xi = xi["ssr"] < xi["natural"]
            lower_auc = all(auc["ssr"][m] < auc["natural"][m] for m in METHODS)
            gap = 100 * (test_acc["natural"] - test_acc["ssr"])
            rec["passed"] = lower_xi and lower_auc and gap <= 5 and elapsed < 900
            rec["detail"] = (f"test-split xi {xi['natural']:.3f} -> {xi['ssr']:.3f} (train split "
                             f"{xi_train['natural']:.3f} -> {xi_train['ssr']:.3f}); AUC-cosd natural [{_fmt(auc['natural'])}] "
                             f"ssr [{_fmt(auc['ssr'])}]; clean test acc {test_acc['natural']:.3f} -> "
                             f"{test_acc['ssr']:.3f} (gap {gap:.1f} pts, <=5); train acc "
                             f"{train_acc['natural']:.3f} -> {train_acc['ssr']:.3f}; {elapsed:.0f}s (<900)")
            assert rec["passed"], rec["detail"]

    def test_c11_transfer_ordering(self, digits, natural):
        with criterion(11, "transfer ordering SM > IG > SG, SM > UG") as rec:
            _, test, span = digits
            spec = ExperimentSpec(experiment="transfer", n_images=N_EVAL, methods=METHODS)
            auc = _auc_cosd(run_transfer_experiment(spec, natural[0], (test, span)))
            rec["passed"] = auc["SM"] > auc["IG"] > auc["SG"] and auc["SM"] > auc["UG"]
            rec["detail"] = f"AUC-cosd {_fmt(auc)}"
            assert rec["passed"], rec["detail"]

    def test_c12_smoothing_direction(self, regularization):
        with criterion(12, "SG and UG below SM under top-k") as rec:
            auc = _auc_cosd(regularization[0]["natural"]["reports"])
            rec["passed"] = auc["SG"] < auc["SM"] and auc["UG"] < auc["SM"]
            rec["detail"] = f"natural model AUC-cosd {_fmt(auc)}"
            assert rec["passed"], rec["detail"]

    def test_c13_determinism(self, digits, natural, ssr, tmp_path):
        with criterion(13, "byte-identical CSV on re-run") as rec:
            _, test, span = digits
            data = (test, span)
            small = dict(n_images=4, steps=5, methods=METHODS, attacks=("topk", "mass_center", "manipulate"))
            outputs = {}
            for run in ("a", "b"):
                out = tmp_path / run
                run_robustness_experiment(ExperimentSpec(out_dir=str(out), **small), natural[0], data)
                run_transfer_experiment(ExperimentSpec(experiment="transfer", out_dir=str(out), **small),
                                        natural[0], data)
                run_regularization_experiment(ExperimentSpec(experiment="regularization", out_dir=str(out), **small),
                                              {"natural": natural[0], "ssr": ssr[0]}, test=data)
                outputs[run] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
            same = outputs["a"] == outputs["b"] and len(outputs["a"]) == 3
            rec["passed"] = same
            rec["detail"] = f"{len(outputs['a'])} CSV files, {'identical' if same else 'DIFFER'}"
            assert rec["passed"], rec["detail"]
