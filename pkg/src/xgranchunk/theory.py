"""Substitution-loss geometry and Monte Carlo checks of its bounds.

For a query ``q``, a true chunk embedding ``e`` and its approximation ``v``
(all unit vectors), with ``s = cos(q, e)`` and ``rho = cos(e, v)``::

    cos(q, v) = s*rho + sin(a)*sin(b)*cos(phi)

where ``phi`` is the azimuth of ``v`` around ``e`` measured from ``q``. The
substitution loss ``|cos(q, e) - cos(q, v)|`` is therefore at most
``s(1 - rho) + sqrt(1 - s^2) sqrt(1 - rho^2)``, and at most
``s(1 - rho) + (2/pi) sqrt(1 - s^2) sqrt(1 - rho^2)`` on average when
``phi`` is uniform.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NotUnitNorm

UNIT_TOL = 1e-6
VIOLATION_TOL = 1e-9
BLOCK_TRIALS = 10_000


@dataclass(frozen=True)
class GeometryConfig:
    s: float
    rho: float
    d: int = 3
    trials: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if abs(self.s) > 1 or abs(self.rho) > 1:
            raise ValueError("s and rho must lie in [-1, 1]")
        if self.d < 3:
            raise ValueError("azimuth needs d >= 3")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class BoundReport:
    s: float
    rho: float
    trials: int
    max_loss: float
    mean_loss: float
    std_loss: float
    worst_case_bound: float
    expected_bound: float
    violations: int
    mean_abs_cos_phi: float
    max_identity_error: float

    @property
    def expected_margin(self) -> float:
        """Slack allowed for the sample mean: three standard errors."""
        return 3 * self.std_loss / math.sqrt(self.trials)

    @property
    def expected_ok(self) -> bool:
        return self.mean_loss <= self.expected_bound + self.expected_margin

    def as_row(self) -> dict:
        return {
            "s": self.s, "rho": self.rho, "trials": self.trials,
            "max_eps": self.max_loss, "mean_eps": self.mean_loss,
            "wc_bound": self.worst_case_bound, "exp_bound": self.expected_bound,
            "exp_margin": self.expected_margin, "violations": self.violations,
            "mean_abs_cos_phi": self.mean_abs_cos_phi,
            "max_identity_err": self.max_identity_error,
        }


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if abs(np.linalg.norm(x) - 1.0) > UNIT_TOL:
        raise NotUnitNorm(f"{name} has norm {np.linalg.norm(x):.8f}")
    return x


def substitution_loss(q, e, v) -> float:
    q, e, v = _check_unit("q", q), _check_unit("e", e), _check_unit("v", v)
    return abs(float(q @ e) - float(q @ v))


def _tangent(s):
    return math.sqrt(max(0.0, 1.0 - s * s))


def worst_case_bound(s: float, rho: float) -> float:
    return s * (1 - rho) + _tangent(s) * _tangent(rho)


def expected_bound(s: float, rho: float) -> float:
    return s * (1 - rho) + (2 / math.pi) * _tangent(s) * _tangent(rho)


@dataclass
class Configurations:
    """``trials`` sampled triples plus the azimuths that produced them."""

    q: np.ndarray
    e: np.ndarray
    v: np.ndarray
    phi: np.ndarray


def _random_frames(rng, trials: int, d: int) -> np.ndarray:
    # (trials, d, 3) with orthonormal columns e, u, w
    g = rng.standard_normal((trials, d, 3))
    qmat, r = np.linalg.qr(g)
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    signs[signs == 0] = 1
    return qmat * signs[:, None, :]


def sample_configurations(cfg: GeometryConfig, rng: np.random.Generator, trials: int | None = None,
                          phi: float | np.ndarray | None = None) -> Configurations:
    """Build ``(q, e, v)`` triples with cos(q,e) = s and cos(e,v) = rho.

    Each trial draws a random orthonormal frame ``(e, u, w)``; ``q`` lies in
    the ``e``-``u`` plane and ``v`` is rotated by azimuth ``phi`` (uniform
    unless given) about ``e``, measured from ``u``.
    """
    trials = cfg.trials if trials is None else trials
    frames = _random_frames(rng, trials, cfg.d)
    e, u, w = frames[:, :, 0], frames[:, :, 1], frames[:, :, 2]
    if phi is None:
        phi = rng.uniform(0.0, 2 * math.pi, size=trials)
    phi = np.broadcast_to(np.asarray(phi, dtype=np.float64), (trials,))
    sa, sb = _tangent(cfg.s), _tangent(cfg.rho)
    q = cfg.s * e + sa * u
    v = cfg.rho * e + sb * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w)
    return Configurations(q=q, e=e, v=v, phi=phi)


def sample_configuration(cfg: GeometryConfig, rng: np.random.Generator, phi: float | None = None):
    c = sample_configurations(cfg, rng, trials=1, phi=phi)
    return c.q[0], c.e[0], c.v[0]


def spherical_cosine_identity_error(cfg: GeometryConfig, conf: Configurations) -> np.ndarray:
    """|cos(q,v) - (cos a cos b + sin a sin b cos phi)| per trial."""
    lhs = np.einsum("ij,ij->i", conf.q, conf.v)
    rhs = cfg.s * cfg.rho + _tangent(cfg.s) * _tangent(cfg.rho) * np.cos(conf.phi)
    return np.abs(lhs - rhs)


@dataclass
class _Partial:
    n: int
    total: float
    total_sq: float
    max_loss: float
    violations: int
    abs_cos_phi: float
    max_identity_error: float

    def merge(self, other: "_Partial") -> "_Partial":
        return _Partial(
            self.n + other.n, self.total + other.total, self.total_sq + other.total_sq,
            max(self.max_loss, other.max_loss), self.violations + other.violations,
            self.abs_cos_phi + other.abs_cos_phi,
            max(self.max_identity_error, other.max_identity_error),
        )


def _run_block(cfg: GeometryConfig, seed_seq: np.random.SeedSequence, trials: int, phi) -> _Partial:
    rng = np.random.default_rng(seed_seq)
    conf = sample_configurations(cfg, rng, trials=trials, phi=phi)
    eps = np.abs(np.einsum("ij,ij->i", conf.q, conf.e) - np.einsum("ij,ij->i", conf.q, conf.v))
    bound = worst_case_bound(cfg.s, cfg.rho)
    return _Partial(
        n=trials,
        total=float(eps.sum()),
        total_sq=float((eps * eps).sum()),
        max_loss=float(eps.max()),
        violations=int(np.count_nonzero(eps > bound + VIOLATION_TOL)),
        abs_cos_phi=float(np.abs(np.cos(conf.phi)).sum()),
        max_identity_error=float(spherical_cosine_identity_error(cfg, conf).max()),
    )


def monte_carlo_verify(cfg: GeometryConfig, *, workers: int = 1, phi: float | None = None) -> BoundReport:
    """Sample ``cfg.trials`` configurations and compare losses against both bounds.

    Trials are split into fixed-size blocks with spawned seeds, so the result
    does not depend on ``workers``.
    """
    nblocks = math.ceil(cfg.trials / BLOCK_TRIALS)
    sizes = [BLOCK_TRIALS] * (nblocks - 1) + [cfg.trials - BLOCK_TRIALS * (nblocks - 1)]
    seeds = np.random.SeedSequence(cfg.seed).spawn(nblocks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _run_block(cfg, a[0], a[1], phi), zip(seeds, sizes)))
    else:
        parts = [_run_block(cfg, sd, n, phi) for sd, n in zip(seeds, sizes)]
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    mean = acc.total / acc.n
    var = max(0.0, acc.total_sq / acc.n - mean * mean) * acc.n / max(acc.n - 1, 1)
    return BoundReport(
        s=cfg.s, rho=cfg.rho, trials=acc.n,
        max_loss=acc.max_loss, mean_loss=mean, std_loss=math.sqrt(var),
        worst_case_bound=worst_case_bound(cfg.s, cfg.rho),
        expected_bound=expected_bound(cfg.s, cfg.rho),
        violations=acc.violations,
        mean_abs_cos_phi=acc.abs_cos_phi / acc.n,
        max_identity_error=acc.max_identity_error,
    )


def verify_grid(values, trials: int, seed: int = 0, d: int = 3, workers: int = 1) -> list[BoundReport]:
    return [
        monte_carlo_verify(GeometryConfig(s=s, rho=r, d=d, trials=trials, seed=seed), workers=workers)
        for s in values
        for r in values
    ]


# -- measurements on real encoder outputs --------------------------------


@dataclass
class EmpiricalPoint:
    s: float
    rho: float
    loss: float
    worst_case_bound: float
    expected_bound: float
    cos_phi: float  # nan when q or v is parallel to e


def measure_point(q, e, v) -> EmpiricalPoint:
    """Observed loss for one (query, teacher, approximation) triple, with the
    implied ``s``, ``rho`` and azimuth."""
    q, e, v = _check_unit("q", q), _check_unit("e", e), _check_unit("v", v)
    s, rho = float(q @ e), float(e @ v)
    qt, vt = q - s * e, v - rho * e
    nq, nv = np.linalg.norm(qt), np.linalg.norm(vt)
    cos_phi = float(qt @ vt / (nq * nv)) if nq > 1e-12 and nv > 1e-12 else math.nan
    return EmpiricalPoint(
        s=s, rho=rho, loss=abs(s - float(q @ v)),
        worst_case_bound=worst_case_bound(s, rho),
        expected_bound=expected_bound(s, rho),
        cos_phi=cos_phi,
    )


@dataclass
class EmpiricalReport:
    points: list[EmpiricalPoint]

    @property
    def violations(self) -> int:
        return sum(p.loss > p.worst_case_bound + VIOLATION_TOL for p in self.points)

    @property
    def mean_loss(self) -> float:
        return float(np.mean([p.loss for p in self.points]))

    @property
    def mean_expected_bound(self) -> float:
        return float(np.mean([p.expected_bound for p in self.points]))

    @property
    def mean_abs_cos_phi(self) -> float:
        vals = [abs(p.cos_phi) for p in self.points if not math.isnan(p.cos_phi)]
        return float(np.mean(vals)) if vals else math.nan


def empirical_check(teacher: np.ndarray, approx: np.ndarray, queries: np.ndarray) -> EmpiricalReport:
    """Every query against every (teacher row, approximation row) pair."""
    teacher = np.asarray(teacher, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    teacher = teacher / np.linalg.norm(teacher, axis=1, keepdims=True)
    approx = approx / np.linalg.norm(approx, axis=1, keepdims=True)
    queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    points = [measure_point(q, e, v) for e, v in zip(teacher, approx) for q in queries]
    return EmpiricalReport(points)
