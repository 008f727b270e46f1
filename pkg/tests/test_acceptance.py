"""Acceptance criteria 1-12, each reported as one PASS/FAIL line.

The experiment criteria (4-9) run the full offline stage at the reference
configurations through the command-line harness and take minutes each; they
are marked ``slow``. Runs are shared between criteria within one session.
"""
import filecmp
import functools
from pathlib import Path

import numpy as np
import pytest

from conftest import VERDICTS
from localrb.backends import GalerkinCD
from localrb.cli import run_compare, run_offline, run_online
from localrb.config import load_config
from localrb.greedy import SnapshotLibrary, local_sample_set, q_of_err
from localrb.metric import (
    MetricField,
    ParameterDomain,
    distance,
    estimate_hessian,
    metric_at,
    metric_from_hessian,
)
from localrb.online import OnlineModel, online_solve
from localrb.ortho import orthonormalize
from localrb.store import OfflineBundle, load_bundle, save_bundle

TOL = 1e-4


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


# -- shared experiment runs --------------------------------------------------------

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EXPERIMENTS = {
    "t1": "test1.txt",
    "t1_iso": "test1_isotropic.txt",
    "t1_adapt": "test1_adaptive.txt",
    "t2": "test2.txt",
    "t2_iso": "test2_isotropic.txt",
    "t3": "test3.txt",
    "t3_iso": "test3_isotropic.txt",
    "t3_adapt": "test3_adaptive.txt",
    "t4_adapt": "test4_adaptive.txt",
}


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiments")

    @functools.cache
    def run(name):
        out = root / name
        cfg = load_config(CONFIGS / EXPERIMENTS[name])
        assert cfg["greedy.tol"] == TOL
        summary = run_offline(cfg, str(out))
        return summary, out

    return run


def online_sweep(run_dir, tmp, queries):
    s = run_online(run_dir / "bundle.lrb", queries, str(tmp), validate=True, timings=False)
    assert s["failed"] == 0
    return s


# -- 1. orthonormalization oracle ---------------------------------------------------


def random_spd(rng, n, cond):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), n))
    eig[0], eig[-1] = 1.0, cond
    return (Q * eig) @ Q.T


def test_criterion_01_orthonormalization_oracle():
    rng = np.random.default_rng(2024)
    worst_orth = worst_chol = 0.0
    for k in range(100):
        n = (2, 5, 10, 20)[k % 4]
        G = random_spd(rng, n, 10.0 ** rng.uniform(0, 6))
        G = 0.5 * (G + G.T)
        gamma, accepted = orthonormalize(G)
        assert accepted.all()
        worst_orth = max(worst_orth, np.abs(gamma @ G @ gamma.T - np.eye(n)).max())
        ref = np.linalg.inv(np.linalg.cholesky(G))
        worst_chol = max(worst_chol, np.linalg.norm(gamma - ref) / np.linalg.norm(ref))
    verdict(1, worst_orth <= 1e-9 and worst_chol <= 1e-8,
            f"max |gamma G gamma^T - I| = {worst_orth:.2e}, max rel. diff to Cholesky = {worst_chol:.2e}")


# -- 2. Hessian exactness -------------------------------------------------------------


def test_criterion_02_hessian_exact_for_quadratics():
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(20):
        p = 2 + k % 2
        domain = ParameterDomain(-np.ones(p), np.ones(p))
        n_modes = 4
        A = rng.standard_normal((n_modes, p, p))
        A = A + np.swapaxes(A, 1, 2)
        b = rng.standard_normal((n_modes, p))
        c = rng.standard_normal(n_modes)

        def coeffs(mu):
            return 0.5 * np.einsum("i,nij,j->n", mu, A, mu) + b @ mu + c

        mu = rng.uniform(-0.9, 0.9, p)
        delta = np.full(p, 0.02)
        H = estimate_hessian(coeffs, mu, delta, domain)
        exact = np.einsum("n,nij->ij", coeffs(mu), A)
        worst = max(worst, np.abs(H - exact).max() / np.abs(exact).max())
    verdict(2, worst <= 1e-8, f"max rel. error {worst:.2e} over 20 fields in p = 2, 3")


# -- 3. metric and distance properties ------------------------------------------------


def test_criterion_03_metric_properties():
    rng = np.random.default_rng(11)
    failures = []
    for k in range(1000):
        p = 2 + k % 2
        H = rng.standard_normal((p, p))
        H = H + H.T
        M1 = metric_from_hessian(H)
        if np.linalg.eigvalsh(M1).min() < -1e-12 * max(1.0, np.abs(M1).max()):
            failures.append(f"{k}: metric not PSD")
        if np.abs(M1 - M1.T).max() > 0:
            failures.append(f"{k}: metric not symmetric")
        a, b = rng.uniform(-1, 1, p), rng.uniform(-1, 1, p)
        H2 = 3.0 * rng.standard_normal((p, p))
        M2 = metric_from_hessian(H2 + H2.T)
        d_ab = distance((M1, a), (M2, b))
        d_ba = distance((M2, b), (M1, a))
        if abs(d_ab - d_ba) > 1e-12 * max(1.0, d_ab):
            failures.append(f"{k}: asymmetric distance")
        if distance((M1, a), (M1, a)) != 0.0:
            failures.append(f"{k}: nonzero self-distance")
        I = np.eye(p)
        eu = np.linalg.norm(b - a)
        if abs(distance((I, a), (I, b)) - eu) > 1e-14 * eu:
            failures.append(f"{k}: identity metric is not Euclidean")
    verdict(3, not failures, f"1000 random inputs, {len(failures)} violations {failures[:3]}")


# -- 4-6. anisotropic versus isotropic snapshot counts ---------------------------------


@pytest.mark.slow
def test_criterion_04_test1_fixed_training(experiment, tmp_path):
    (sa, da), (sb, db) = experiment("t1"), experiment("t1_iso")
    v = run_compare(str(da), str(db), str(tmp_path / "cmp"))
    ok = sa["final_err"] <= TOL and v["snapshot_ratio"] <= 0.9
    verdict(4, ok, f"final max err {sa['final_err']:.3e}, K aniso {sa['K']} / iso {sb['K']} "
                   f"= {v['snapshot_ratio']:.3f} (<= 0.9), evals {sa['eta_evals']}")


@pytest.mark.slow
def test_criterion_05_test2_snapshot_ratio(experiment, tmp_path):
    (sa, da), (sb, db) = experiment("t2"), experiment("t2_iso")
    v = run_compare(str(da), str(db), str(tmp_path / "cmp"))
    verdict(5, v["snapshot_ratio"] <= 0.7 and sa["final_err"] <= TOL,
            f"K aniso {sa['K']} / iso {sb['K']} = {v['snapshot_ratio']:.3f} (<= 0.7)")


@pytest.mark.slow
def test_criterion_06_test3_snapshot_ratio(experiment, tmp_path):
    (sa, da), (sb, db) = experiment("t3"), experiment("t3_iso")
    v = run_compare(str(da), str(db), str(tmp_path / "cmp"))
    verdict(6, v["snapshot_ratio"] <= 0.7 and sa["final_err"] <= TOL,
            f"K aniso {sa['K']} / iso {sb['K']} = {v['snapshot_ratio']:.3f} (<= 0.7)")


# -- 7-8. adaptive training sets ----------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_test1_adaptive_training(experiment, tmp_path):
    (sf, _), (sa, da) = experiment("t1"), experiment("t1_adapt")
    bundle = load_bundle(da / "bundle.lrb")
    dom = ParameterDomain(np.array(bundle.descriptor["domain_lower"]), np.array(bundle.descriptor["domain_upper"]))
    s = online_sweep(da, tmp_path / "q", dom.lattice(75))
    ratio = sa["eta_evals"] / sf["eta_evals"]
    ok = ratio <= 0.6 and s["max_err"] <= 5 * TOL
    verdict(7, ok, f"evals adaptive {sa['eta_evals']} / fixed {sf['eta_evals']} = {ratio:.3f} (<= 0.6), "
                   f"75x75 test max err {s['max_err']:.3e} (<= {5 * TOL:g})")


@pytest.mark.slow
def test_criterion_08_test3_origin_patch(experiment, tmp_path):
    (_, df), (_, da) = experiment("t3"), experiment("t3_adapt")
    patch = ParameterDomain(np.array([-0.05, -0.05]), np.array([0.05, 0.05])).lattice(100)
    fixed = online_sweep(df, tmp_path / "f", patch)["max_err"]
    adapt = online_sweep(da, tmp_path / "a", patch)["max_err"]
    ok = adapt <= fixed / 50 and adapt <= 10 * TOL
    verdict(8, ok, f"patch max err adaptive {adapt:.3e}, fixed {fixed:.3e}, "
                   f"ratio {fixed / adapt:.1f} (>= 50), adaptive <= {10 * TOL:g}")


# -- 9. convection-diffusion ---------------------------------------------------------------


def span_oracle(cd, mu, V):
    """Galerkin solution on span(V) from a basis orthonormalized twice by modified Gram-Schmidt."""
    G = cd.gram_matrix
    Z = []
    for v in V:
        z = v.copy()
        for _ in range(2):
            for q in Z:
                z -= (q @ (G @ z)) * q
        z /= np.sqrt(z @ (G @ z))
        Z.append(z)
    Z = np.array(Z)
    A = cd.forms.operator(mu)
    c = np.linalg.solve(Z @ (A @ Z.T), Z @ cd.forms.rhs(mu))
    return c @ Z


@pytest.mark.slow
def test_criterion_09_test4_convection_diffusion(experiment, tmp_path):
    s4, d4 = experiment("t4_adapt")
    bundle = load_bundle(d4 / "bundle.lrb")
    model = OnlineModel(bundle)
    cd = model.backend
    s = online_sweep(d4, tmp_path / "q", cd.domain.lattice(75))

    worst = 0.0
    for mu in cd.domain.sample(np.random.default_rng(9), 20):
        sol = model.solve(mu)
        V = bundle.snapshots[sol.used] - cd.lifting
        u_rb = sol.weights[np.isin(sol.local, sol.used)] @ V
        u_ref = span_oracle(cd, mu, V)
        worst = max(worst, cd.norm(u_rb - u_ref) / cd.norm(u_ref))
    ok = s["frac_above_tol"] <= 0.02 and worst <= 1e-8
    verdict(9, ok, f"K {s4['K']}, 75x75 sweep: {100 * s['frac_above_tol']:.2f}% above tol (<= 2%), "
                   f"max err {s['max_err']:.2e}; direct-span oracle max rel. diff {worst:.2e} (<= 1e-8)")


# -- 10. training-set size rule ------------------------------------------------------------


def test_criterion_10_q_of_err():
    vals = (q_of_err(1e-4, 1e-4, 100, 1000), q_of_err(1.0, 1e-4, 100, 1000), q_of_err(1e-2, 1e-4, 100, 1000))
    verdict(10, vals == (1000, 100, 550), f"Q(tol), Q(1), Q(1e-2) = {vals}")


# -- 11. bundle round trip -------------------------------------------------------------------


def small_cd_bundle(cd, n, N):
    lib = SnapshotLibrary(cd)
    for mu in cd.domain.sample(np.random.default_rng(5), n):
        lib.add(mu)
    field = MetricField.identity(lib.mus)
    return OfflineBundle(cd.descriptor(), N, TOL, lib.mus, lib.gram, lib.affine_a, lib.affine_f,
                         field, np.zeros((0, 5)), lib.snapshots())


def test_criterion_11_bundle_round_trip(tmp_path):
    cd = GalerkinCD(h=0.05)
    bundle = small_cd_bundle(cd, 25, 6)
    save_bundle(bundle, tmp_path / "a.lrb")
    save_bundle(load_bundle(tmp_path / "a.lrb"), tmp_path / "b.lrb")
    bitwise = filecmp.cmp(tmp_path / "a.lrb", tmp_path / "b.lrb", shallow=False)
    loaded = load_bundle(tmp_path / "a.lrb")
    arrays_equal = all(np.array_equal(getattr(bundle, k), getattr(loaded, k))
                       for k in ("sample_mus", "gram", "affine_a", "affine_f", "snapshots"))

    save_bundle(bundle.without_snapshots(), tmp_path / "lean.lrb")
    lean = load_bundle(tmp_path / "lean.lrb")
    worst = 0.0
    for mu in cd.domain.sample(np.random.default_rng(6), 10):
        full_sol, lean_sol = online_solve(bundle, mu), online_solve(lean, mu)
        worst = max(worst, np.abs(full_sol.weights - lean_sol.weights).max())
    ok = bitwise and arrays_equal and lean.snapshots is None and worst == 0.0
    verdict(11, ok, f"bitwise re-save {bitwise}, arrays equal {arrays_equal}, "
                    f"snapshot-free online weights max diff {worst:.1e}")


# -- 12. k-NN oracle -------------------------------------------------------------------------


def test_criterion_12_knn_oracle():
    rng = np.random.default_rng(12)
    domain = ParameterDomain(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    N = 10
    mismatches = 0
    for kind in ("isotropic", "random-psd"):
        pts = domain.sample(rng, 200)
        if kind == "isotropic":
            field = None
        else:
            B = rng.standard_normal((200, 2, 2))
            field = MetricField(pts, B @ np.swapaxes(B, 1, 2), np.ones(200))
        Ms = [np.eye(2) if field is None else metric_at(field, x)[0] for x in pts]
        for q in domain.sample(rng, 100):
            Mq = np.eye(2) if field is None else metric_at(field, q)[0]
            d = [distance((Mq, q), (Ms[k], pts[k])) for k in range(len(pts))]
            ref = sorted(range(len(pts)), key=lambda k: (d[k], k))[:N]
            idx, _ = local_sample_set(q, pts, N, field)
            mismatches += list(idx) != ref
    verdict(12, mismatches == 0, f"{mismatches} mismatches over 2 x 100 queries on 200 points")
