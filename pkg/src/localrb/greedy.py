"""Offline stage: classical bootstrap, local enrichment and metric updates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .metric import (
    MetricField,
    ParameterDomain,
    default_increment,
    hessian_from_stencil,
    metric_from_hessian,
    pairwise_distances,
    stencil_points,
)
from .online import _solve_reduced, local_bases, reduced_blocks, select_local
from .training import TrainingSet, bisection_training_set, generate_training_set, lattice_training_set

log = logging.getLogger(__name__)

__all__ = [
    "OfflineConfig",
    "SnapshotLibrary",
    "SampleSet",
    "GreedyState",
    "SweepResult",
    "NonConvergence",
    "LocalEvaluator",
    "q_of_err",
    "classical_greedy",
    "local_sample_set",
    "domain_of_influence_excludes",
    "enrichment_loop",
    "offline_drive",
]


class NonConvergence(RuntimeError):
    """Raised when the offline loop hits its sample cap or stagnates."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


def q_of_err(err: float, tol: float, Q_m: int, Q_M: int) -> int:
    """Training-set size for the next iteration given the current error.

    ``err`` is clamped to ``[tol, 1]`` so the result always lies in
    ``[Q_m, Q_M]``.

    Examples
    --------
    >>> q_of_err(1e-2, 1e-4, 100, 1000)
    550
    """
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    if not err > 0.0:
        raise ValueError("err must be positive")
    if Q_m > Q_M or Q_m < 1:
        raise ValueError("need 1 <= Q_m <= Q_M")
    e = min(max(err, tol), 1.0)
    ratio = math.log(e) / math.log(tol)
    # the 1e-9 guard keeps exact integers from being pushed up by roundoff
    q = math.ceil((Q_M - Q_m) * ratio + Q_m - 1e-9)
    return int(min(max(q, Q_m), Q_M))


@dataclass
class OfflineConfig:
    N: int = 20
    tol: float = 1e-4
    train_mode: str = "fixed"  # "fixed" | "adaptive"
    lattice: int = 75
    Q_m: int = 500
    Q_M: int = 5625
    metric_mode: str = "anisotropic"  # "anisotropic" | "isotropic"
    delta_fraction: float = 1e-2
    delta: tuple | None = None
    seed: int = 0
    random_start: bool = False
    max_samples: int = 5000
    stall_iterations: int = 3
    chunk: int = 128
    pool_factor: int = 50
    pool_cap: int = 20000
    lloyd_sweeps: int = 3
    generator: str = "sampling"  # "sampling" | "bisection"
    interpolation: str = "auto"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tol must lie in (0, 1)")
        if self.train_mode not in ("fixed", "adaptive"):
            raise ValueError("train_mode must be 'fixed' or 'adaptive'")
        if self.generator not in ("sampling", "bisection"):
            raise ValueError("generator must be 'sampling' or 'bisection'")
        if self.metric_mode not in ("anisotropic", "isotropic"):
            raise ValueError("metric_mode must be 'anisotropic' or 'isotropic'")
        if self.lattice < 2:
            raise ValueError("lattice needs at least 2 points per direction")
        if not 1 <= self.Q_m <= self.Q_M:
            raise ValueError("need 1 <= Q_m <= Q_M")

    @property
    def anisotropic(self) -> bool:
        return self.metric_mode == "anisotropic"


class SnapshotLibrary:
    """Sample points with their snapshots and the reduced data built from them.

    For Galerkin backends the stored vectors are the homogeneous parts
    ``u - u_g`` and the library also keeps ``A^q_ij = a_q(v_j, v_i)`` and
    ``f^q_i = f_q(v_i)``. For projection backends the Gram matrix comes from
    the backend's factored inner products.
    """

    def __init__(self, backend):
        self.backend = backend
        p = backend.domain.dim
        self.mus = np.empty((0, p))
        self.vectors = np.empty((0, backend.ndof))
        self.gram = np.empty((0, 0))
        self.galerkin = backend.kind == "galerkin"
        if self.galerkin:
            forms = backend.affine_terms()
            self._a = forms.a_blocks
            self._f = np.array(forms.f_blocks)
            self.affine_a = np.empty((forms.q_a, 0, 0))
            self.affine_f = np.empty((forms.q_f, 0))
        else:
            self.affine_a = np.empty((0, 0, 0))
            self.affine_f = np.empty((0, 0))

    def __len__(self) -> int:
        return self.mus.shape[0]

    def coefficients(self, mu):
        g = self.backend.forms.g(mu)
        return g, self.backend.forms.h(mu)

    def index_of(self, mu) -> int | None:
        hit = np.flatnonzero(np.all(self.mus == np.asarray(mu, dtype=float), axis=1))
        return int(hit[0]) if hit.size else None

    def add(self, mu, vector=None) -> int:
        """Append a sample (snapshot computed unless ``vector`` is supplied)."""
        mu = np.asarray(mu, dtype=float)
        if self.index_of(mu) is not None:
            raise ValueError(f"duplicate sample point {mu}")
        b = self.backend
        if vector is None:
            vector = b.homogeneous(mu[None, :])[0] if self.galerkin else b.truth(mu[None, :])[0]
        vector = np.asarray(vector, dtype=float)
        K = len(self)
        if self.galerkin:
            col = b.inner(self.vectors, vector[None, :])[:, 0] if K else np.empty(0)
            diag = b.inner(vector, vector)
        else:
            row = b.gram(mu[None, :], np.vstack([self.mus, mu[None, :]]))[0]
            col, diag = row[:K], row[K]
        G = np.empty((K + 1, K + 1))
        G[:K, :K] = self.gram
        G[:K, K] = G[K, :K] = col
        G[K, K] = diag
        self.gram = G
        if self.galerkin:
            Q = len(self._a)
            A = np.empty((Q, K + 1, K + 1))
            A[:, :K, :K] = self.affine_a
            for q, Aq in enumerate(self._a):
                Av = Aq @ vector
                vA = Aq.T @ vector
                A[q, :K, K] = self.vectors @ Av  # a_q(v_new, v_i)
                A[q, K, :K] = self.vectors @ vA  # a_q(v_i, v_new)
                A[q, K, K] = vector @ Av
            self.affine_a = A
            self.affine_f = np.concatenate([self.affine_f, (self._f @ vector)[:, None]], axis=1)
        self.mus = np.vstack([self.mus, mu[None, :]])
        self.vectors = np.vstack([self.vectors, vector[None, :]])
        return K

    def snapshots(self) -> np.ndarray:
        """Full snapshot vectors (the lifting added back for Galerkin backends)."""
        return self.vectors + self.backend.lifting if self.galerkin else self.vectors.copy()


#: the spec-facing name for the ordered sample collection
SampleSet = SnapshotLibrary


@dataclass
class SweepResult:
    errors: np.ndarray
    radii: np.ndarray
    hessians: np.ndarray | None = None


class LocalEvaluator:
    """Batched evaluation of local reduced approximations over point sets."""

    def __init__(self, backend, library: SnapshotLibrary, N: int, chunk: int = 128):
        self.backend = backend
        self.library = library
        self.N = N
        self.chunk = chunk

    def distances(self, mus, field: MetricField | None, M_mus=None, M_samples=None):
        S = self.library.mus
        if field is None or field.isotropic:
            return pairwise_distances(mus, None, S, None)
        if M_mus is None:
            M_mus, _ = field.evaluate(mus)
        if M_samples is None:
            M_samples, _ = field.evaluate(S)
        return pairwise_distances(mus, M_mus, S, M_samples)

    def sweep(self, mus, field: MetricField | None, truths=None, hessian: bool = False,
              delta=None, N: int | None = None) -> SweepResult:
        """Errors, radii and (optionally) Hessians at every point of ``mus``.

        ``truths`` holds the homogeneous truth vectors at ``mus`` and is
        required for Galerkin backends.
        """
        N = self.N if N is None else N
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        T = mus.shape[0]
        lib = self.library
        domain = self.backend.domain
        if hessian and delta is None:
            delta = default_increment(domain)
        M_samples = None
        if field is not None and not field.isotropic:
            M_samples, _ = field.evaluate(lib.mus)
            M_train, _ = field.evaluate(mus)
        errors = np.empty(T)
        radii = np.empty(T)
        H = np.empty((T, domain.dim, domain.dim)) if hessian else None
        for lo in range(0, T, self.chunk):
            sl = slice(lo, min(lo + self.chunk, T))
            X = mus[sl]
            if M_samples is None:
                dist = pairwise_distances(X, None, lib.mus, None)
            else:
                dist = pairwise_distances(X, M_train[sl], lib.mus, M_samples)
            order, radii[sl] = select_local(dist, N)
            gamma, accepted = local_bases(lib.gram, order, N)
            if hessian:
                stencil, _ = stencil_points(X, delta, domain)
                pts = np.concatenate([X[:, None, :], stencil], axis=1)
            else:
                pts = X[:, None, :]
            coeffs = self._coefficients(pts, order, gamma, accepted)  # (b, S, m)
            y = np.einsum("bji,bj->bi", gamma, coeffs[:, 0])
            errors[sl] = self._errors(X, order, y, None if truths is None else truths[sl])
            if hessian:
                H[sl] = hessian_from_stencil(coeffs[:, 1:], delta)
        return SweepResult(errors, radii, H)

    def _coefficients(self, pts, order, gamma, accepted):
        lib = self.library
        if lib.galerkin:
            Ar, Fr = reduced_blocks(lib.affine_a, lib.affine_f, order, gamma)
            g, h = self.backend.forms.g(pts), self.backend.forms.h(pts)  # (b, S, Q)
            R = np.einsum("bsq,bqij->bsij", g, Ar)
            F = np.einsum("bsq,bqi->bsi", h, Fr)
            return _solve_reduced(R, F, accepted[:, None, :])
        cross = self.backend.cross(pts, lib.mus[order])  # (b, S, m)
        return np.einsum("bij,bsj->bsi", gamma, cross)

    def _errors(self, X, order, y, truths):
        lib = self.library
        if lib.galerkin:
            if truths is None:
                truths = self.backend.homogeneous(X)
            approx = np.matmul(y[:, None, :], lib.vectors[order])[:, 0]
            return self.backend.norm(truths - approx)
        return self.backend.residual_norms(X, lib.mus[order], y)


def local_sample_set(mu, samples, N: int, field: MetricField | None = None):
    """Indices of the ``min(N, K)`` nearest samples to ``mu`` and the ball radius.

    ``samples`` is a ``SampleSet`` or a ``(K, p)`` array of points. Ties are
    broken by insertion order.
    """
    S = samples.mus if hasattr(samples, "mus") else np.atleast_2d(np.asarray(samples, dtype=float))
    if S.shape[0] == 0:
        raise ValueError("sample set is empty")
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    if field is None or field.isotropic:
        dist = pairwise_distances(mu, None, S, None)
    else:
        Mq, _ = field.evaluate(mu)
        Ms, _ = field.evaluate(S)
        dist = pairwise_distances(mu, Mq, S, Ms)
    order, radius = select_local(dist, N, extra=0)
    return order[0], float(radius[0])


@dataclass
class GreedyState:
    """Everything the offline loop carries between outer iterations."""

    library: SnapshotLibrary
    train: TrainingSet
    field: MetricField
    errors: np.ndarray
    radii: np.ndarray
    N: int
    tol: float
    iteration: int = 0
    eta_evals: int = 0
    history: list = field(default_factory=list)
    last_added: list = field(default_factory=list)

    @property
    def err(self) -> float:
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def K(self) -> int:
        return len(self.library)

    def record(self, max_err: float):
        self.history.append(
            {
                "iteration": self.iteration,
                "K": self.K,
                "max_err": float(max_err),
                "eta_evals": self.eta_evals,
                "train_size": len(self.train),
            }
        )


def domain_of_influence_excludes(candidate, new_point, state: GreedyState) -> bool:
    """Whether ``candidate`` falls in the domain of influence of ``new_point``.

    True iff ``candidate`` lies in the ball of ``new_point`` or
    ``new_point`` lies in the ball of ``candidate``; tensors and radii come
    from ``state.field``.
    """
    pts = np.array([candidate, new_point], dtype=float)
    M, r = state.field.evaluate(pts)
    d = pairwise_distances(pts[:1], M[:1], pts[1:], M[1:])[0, 0]
    return bool(d <= r[0] or d <= r[1])


def enrichment_loop(state: GreedyState, truths=None) -> GreedyState:
    """One pass of basis enrichment with domain-of-influence exclusion.

    Errors and radii in ``state`` are frozen for the whole pass; balls use
    ``state.field`` evaluated at the training points.
    """
    X = state.train.points
    lib = state.library
    errors = state.errors
    radii = state.radii
    if state.field.isotropic:
        M = None
    else:
        M, _ = state.field.evaluate(X)
    working = np.ones(X.shape[0], dtype=bool)
    added = []
    while working.any():
        idx = np.flatnonzero(working)
        k = idx[np.argmax(errors[idx])]
        if errors[k] <= state.tol:
            break
        if lib.index_of(X[k]) is None:
            vec = None if truths is None else truths[k]
            lib.add(X[k], vec)
            added.append(int(k))
        else:
            log.debug("training point %s is already a sample; skipped", X[k])
        if M is None:
            d = pairwise_distances(X[k:k + 1], None, X[idx], None)[0]
        else:
            d = pairwise_distances(X[k:k + 1], M[k:k + 1], X[idx], M[idx])[0]
        working[idx[d <= np.maximum(radii[k], radii[idx])]] = False
        working[k] = False
    return replace(state, last_added=added)


def _pick_seed(train: np.ndarray, domain: ParameterDomain, rng) -> int:
    if rng is None:
        d = np.linalg.norm((train - domain.centroid) / domain.extent, axis=1)
        return int(np.argmin(d))
    return int(rng.integers(train.shape[0]))


def _bootstrap(backend, train: TrainingSet, count: int, tol: float, library, evaluator,
               truths, rng, on_sweep=None):
    X = train.points
    k = _pick_seed(X, backend.domain, rng)
    library.add(X[k], None if truths is None else truths[k])
    selected = []
    while len(library) < count:
        res = evaluator.sweep(X, None, truths, N=len(library))
        err = float(res.errors.max())
        if on_sweep is not None:
            on_sweep(err, res)
        selected.append(err)
        if err <= tol:
            break
        k = int(np.argmax(res.errors))
        if library.index_of(X[k]) is not None:
            break
        library.add(X[k], None if truths is None else truths[k])
    return selected


def classical_greedy(backend, train, count: int, tol: float, seed=None) -> SnapshotLibrary:
    """Standard greedy selection with global spaces, up to ``count`` samples.

    The first sample is the training point nearest the domain centroid, or a
    random one when ``seed`` is given. ``library.selected_errors`` lists the
    maximal error seen before each later selection.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if not isinstance(train, TrainingSet):
        train = TrainingSet(np.atleast_2d(np.asarray(train, dtype=float)))
    if len(train) == 0:
        raise ValueError("training set is empty")
    rng = None if seed is None else np.random.default_rng(seed)
    lib = SnapshotLibrary(backend)
    truths = backend.homogeneous(train.points) if lib.galerkin else None
    ev = LocalEvaluator(backend, lib, count)
    lib.selected_errors = _bootstrap(backend, train, count, tol, lib, ev, truths, rng)
    return lib


def _fit_radii(evaluator: LocalEvaluator, X, field, N):
    """Radii of the ``N``-balls at ``X`` under ``field``."""
    r = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], 1024):
        dist = evaluator.distances(X[lo:lo + 1024], field)
        _, r[lo:lo + 1024] = select_local(dist, N, extra=0)
    return r


def offline_drive(backend, config: OfflineConfig, progress=None) -> "OfflineBundle":
    """Run the full offline stage and return the bundle for the online stage.

    Parameters
    ----------
    backend : ProblemBackend
    config : OfflineConfig
    progress : callable, optional
        Called with each history record as soon as it is produced.

    Raises
    ------
    NonConvergence
        Sample cap reached or the error stagnated; ``exc.state`` holds the
        state at that moment.
    """
    from .store import OfflineBundle

    cfg = config
    domain = backend.domain
    # adaptive-train pools draw from one stream for the whole run
    rng = np.random.default_rng(cfg.seed)

    def new_training_set(field, Q, generation):
        if cfg.generator == "bisection":
            return bisection_training_set(field, Q, domain, generation=generation)
        return generate_training_set(field, Q, domain, rng=rng, pool_factor=cfg.pool_factor,
                                     pool_cap=cfg.pool_cap, sweeps=cfg.lloyd_sweeps, generation=generation)

    # the bootstrap seed point is random only on request; the pool always uses ``seed``
    seed_rng = np.random.default_rng([cfg.seed, 1]) if cfg.random_start else None
    delta = default_increment(domain, cfg.delta_fraction) if cfg.delta is None else np.asarray(cfg.delta, float)

    if cfg.train_mode == "fixed":
        train = lattice_training_set(domain, cfg.lattice)
    else:
        train = new_training_set(MetricField.identity(domain.corners()), cfg.Q_m, 0)

    lib = SnapshotLibrary(backend)
    truths = backend.homogeneous(train.points) if lib.galerkin else None
    ev = LocalEvaluator(backend, lib, cfg.N, cfg.chunk)
    state = GreedyState(lib, train, MetricField.identity(train.points), np.zeros(0), np.zeros(0),
                        cfg.N, cfg.tol)

    def on_boot(err, res):
        state.iteration += 1
        state.eta_evals += len(state.train)
        state.record(err)
        if progress:
            progress(state.history[-1])

    _bootstrap(backend, train, cfg.N + 1, cfg.tol, lib, ev, truths, seed_rng, on_boot)

    field = MetricField.identity(train.points, mode=cfg.interpolation)
    best = []
    while True:
        X = state.train.points
        res = ev.sweep(X, field, truths, hessian=cfg.anisotropic, delta=delta)
        state.iteration += 1
        state.eta_evals += X.shape[0]
        state.errors = res.errors
        state.radii = res.radii
        state.field = field
        state.record(state.err)
        if progress:
            progress(state.history[-1])
        log.info("iteration %d: K=%d max_err=%.3e train=%d", state.iteration, state.K, state.err, len(X))
        if state.err <= cfg.tol:
            break

        # local spaces are not nested, so the max error may plateau while the
        # sample set grows; only a run that neither improves nor grows is stuck
        best.append((min(state.err, best[-1][0]) if best else state.err, state.K))
        s = cfg.stall_iterations
        if s and len(best) > s and best[-1][0] >= best[-1 - s][0] * (1.0 - 1e-12) \
                and best[-1][1] == best[-1 - s][1]:
            raise NonConvergence(f"max error stagnated at {best[-1][0]:.3e} over {s} iterations", state)

        # metric update at the current training points
        if cfg.anisotropic:
            M = metric_from_hessian(res.hessians)
            field = MetricField(X, M, np.ones(X.shape[0]), mode=cfg.interpolation)
        else:
            field = MetricField.identity(X, mode=cfg.interpolation)
        state.radii = _fit_radii(ev, X, field, cfg.N)
        field = field.with_radii(state.radii)
        state.field = field

        state = enrichment_loop(state, truths)
        if state.K > cfg.max_samples:
            raise NonConvergence(f"sample count {state.K} exceeds the cap {cfg.max_samples}", state)

        if cfg.train_mode == "adaptive":
            # balls after enrichment set the resolution of the next training set
            field = field.with_radii(_fit_radii(ev, X, field, cfg.N))
            Q = q_of_err(state.err, cfg.tol, cfg.Q_m, cfg.Q_M)
            train = new_training_set(field, Q, state.train.generation + 1)
            state.train = train
            if lib.galerkin:
                truths = backend.homogeneous(train.points)

    return OfflineBundle.from_state(backend, state, cfg)
