"""
Johnson-Lindenstrauss projection matrices and property checks.

Three random families are offered:

* ``gaussian``: i.i.d. N(0, 1/k) entries.
* ``bernoulli``: i.i.d. +-1/sqrt(k) entries.
* ``scaled_projection``: sqrt(d/k) times a random orthogonal projection.

Only the last two carry the almost-sure bound ||M|| <= sqrt(d) that the
sampled-curve guarantee needs; reports flag gaussian matrices.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from .model import FloatArray, ModelParams, perp_decompose
from .seeding import STREAM_MATRIX, check_seed, rng_for

# constants of the projected-index lemma
LEMMA_C = 1.0 / math.sqrt(289.0)
LEMMA_CC = math.sqrt(72.0)

POWER_RTOL = 1e-6
POWER_MIN_ITER = 20
POWER_MAX_ITER = 1000
ORTHO_TOL = 1e-10

_HEADER_PATTERN = re.compile(
    r"^#?\s*family=(?P<family>\w+)\s+k=(?P<k>\d+)\s+d=(?P<d>\d+)\s+seed=(?P<seed>\w+)\s*$"
)


class JLFamily(str, Enum):
    GAUSSIAN = "gaussian"
    BERNOULLI = "bernoulli"
    SCALED_PROJECTION = "scaled_projection"
    IDENTITY = "identity"

    @property
    def curve_guarantee(self) -> bool:
        """Whether ||M|| <= sqrt(d) holds almost surely for this family."""
        return self is not JLFamily.GAUSSIAN


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """A k x d projection with its family tag and seed."""

    entries: FloatArray
    family: JLFamily
    seed: int | None = None

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.size == 0:
            raise ValueError(
                f"projection entries must be a k x d grid, got {entries.shape}"
            )
        k, d = entries.shape
        if k > d:
            raise ValueError(f"target dimension k={k} exceeds source dimension d={d}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("projection entries must be finite")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "family", JLFamily(self.family))

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def identity(cls, d: int) -> ProjectionMatrix:
        return cls(np.eye(d), JLFamily.IDENTITY)

    def scaled(self, factor: float) -> ProjectionMatrix:
        return ProjectionMatrix(factor * self.entries, self.family, self.seed)

    def apply(self, points: ArrayLike) -> FloatArray:
        """Project a d-vector, or every row of an (n, d) array."""
        arr = np.asarray(points, dtype=np.float64)
        if arr.shape[-1] != self.d:
            raise ValueError(
                f"points have dimension {arr.shape[-1]}, matrix expects {self.d}"
            )
        return arr @ self.entries.T

    def operator_norm(self, method: str = "power") -> float:
        """Spectral norm ||M|| from l2^d to l2^k.

        ``"power"`` runs power iteration on M^T M to relative 1e-6 and falls
        back to the sqrt(d) bound (or the SVD for gaussian matrices) if it does
        not settle. ``"svd"`` uses the largest singular value directly.
        """
        if method == "svd":
            return float(np.linalg.norm(self.entries, 2))
        if method != "power":
            raise ValueError(f"unknown norm method {method!r}, expected 'power' or 'svd'")
        vec = np.random.default_rng(0).standard_normal(self.d)
        vec /= np.linalg.norm(vec)
        estimate = 0.0
        for i in range(POWER_MAX_ITER):
            image = self.entries.T @ (self.entries @ vec)
            size = float(np.linalg.norm(image))
            if size == 0.0:
                return 0.0
            previous, estimate = estimate, math.sqrt(size)
            vec = image / size
            converged = abs(estimate - previous) <= POWER_RTOL * estimate
            if i + 1 >= POWER_MIN_ITER and converged:
                return estimate
        if self.family in (JLFamily.BERNOULLI, JLFamily.SCALED_PROJECTION):
            return math.sqrt(self.d)
        return float(np.linalg.norm(self.entries, 2))

    def header(self) -> str:
        seed = "none" if self.seed is None else str(self.seed)
        return f"family={self.family.value} k={self.k} d={self.d} seed={seed}"

    def save(self, path: str | Path) -> None:
        """Write a row-major text grid preceded by a header line."""
        try:
            np.savetxt(path, self.entries, fmt="%.17g", header=self.header())
        except OSError as e:
            raise OSError(f"cannot write projection matrix to {path}: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> ProjectionMatrix:
        try:
            with open(path, encoding="utf-8") as f:
                first = f.readline().strip()
                entries = np.loadtxt(f, ndmin=2)
        except OSError as e:
            raise OSError(f"cannot read projection matrix from {path}: {e}") from e
        match = _HEADER_PATTERN.match(first)
        if match is None:
            raise ValueError(f"{path}: missing 'family=... k=... d=... seed=...' header")
        k, d = int(match["k"]), int(match["d"])
        if entries.shape != (k, d):
            raise ValueError(f"{path}: header says {k}x{d}, grid is {entries.shape}")
        seed = None if match["seed"] == "none" else int(match["seed"])
        return cls(entries, JLFamily(match["family"]), seed)


def _orthonormal_rows(gaussian_rows: FloatArray) -> FloatArray:
    q, _ = np.linalg.qr(gaussian_rows.T)
    rows = q.T
    k = rows.shape[0]
    if np.max(np.abs(rows @ rows.T - np.eye(k))) > ORTHO_TOL:
        q, _ = np.linalg.qr(rows.T)
        rows = q.T
    return rows


def generate(family: JLFamily | str, k: int, d: int, seed: int) -> ProjectionMatrix:
    """Draw a k x d matrix of the given family.

    Row ``r`` is drawn from its own substream of ``seed``, so the result is a
    deterministic function of (family, k, d, seed).
    """
    family = JLFamily(family)
    check_seed(seed)
    if k < 1 or d < 1:
        raise ValueError(f"dimensions must be positive, got k={k}, d={d}")
    if k > d:
        raise ValueError(f"target dimension k={k} exceeds source dimension d={d}")
    if family is JLFamily.IDENTITY:
        if k != d:
            raise ValueError("the identity family needs k == d")
        return ProjectionMatrix(np.eye(d), family, seed)

    rows = [rng_for(seed, STREAM_MATRIX, r) for r in range(k)]
    if family is JLFamily.BERNOULLI:
        signs = np.array([rng.choice([-1.0, 1.0], size=d) for rng in rows])
        entries = signs / math.sqrt(k)
    else:
        gaussian = np.array([rng.standard_normal(d) for rng in rows])
        if family is JLFamily.GAUSSIAN:
            entries = gaussian / math.sqrt(k)
        else:
            entries = math.sqrt(d / k) * _orthonormal_rows(gaussian)
    return ProjectionMatrix(entries, family, seed)


@dataclass(frozen=True)
class DistortionReport:
    """Outcome of a weak (or, with delta = 0, strong) JL check on a point set."""

    n_points: int
    eps: float
    delta: float
    max_expand: float
    max_shrink: float
    weak_violations: int
    delta_bucket: int
    family: JLFamily
    violating: tuple[int, ...] = field(default=())

    @property
    def weak_holds(self) -> bool:
        return self.weak_violations == 0

    @property
    def strong_holds(self) -> bool:
        return (
            max(self.max_expand, self.max_shrink) <= self.eps
            and self.delta_bucket == 0
            and self.weak_violations == 0
        )

    @property
    def curve_guarantee(self) -> bool:
        return self.family.curve_guarantee


def check_weak_jl(
    M: ProjectionMatrix, points: ArrayLike, eps: float, delta: float
) -> DistortionReport:
    """Classify every point against the weak JL property.

    A point passes if (1 - eps)|x| <= |Mx| <= (1 + eps)|x|; otherwise it is
    covered by the small clause when |x| <= delta and |Mx| <= delta, and is a
    violation if neither holds.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    norms = np.linalg.norm(pts, axis=1)
    images = np.linalg.norm(M.apply(pts), axis=1)
    strong = (images >= (1.0 - eps) * norms) & (images <= (1.0 + eps) * norms)
    small = (norms <= delta) & (images <= delta)
    bucket = ~strong & small
    violating = np.flatnonzero(~strong & ~small)

    nonzero = norms > 0
    ratios = images[nonzero] / norms[nonzero]
    max_expand = float(np.max(ratios - 1.0)) if ratios.size else 0.0
    large = norms > delta
    shrink = 1.0 - images[large] / norms[large]
    max_shrink = float(np.max(shrink)) if shrink.size else 0.0
    return DistortionReport(
        n_points=pts.shape[0],
        eps=eps,
        delta=delta,
        max_expand=max_expand,
        max_shrink=max_shrink,
        weak_violations=int(violating.size),
        delta_bucket=int(np.count_nonzero(bucket)),
        family=M.family,
        violating=tuple(int(i) for i in violating),
    )


def curve_sample_count(L_phi: float, d: int, delta: float, eps: float) -> int:
    """Samples per unit time of a Lipschitz curve, ceil(4 L (sqrt(d)+2) / (delta eps))."""
    if L_phi < 0:
        raise ValueError(f"Lipschitz constant must be nonnegative, got {L_phi}")
    if d < 1 or not delta > 0 or not 0 < eps < 1:
        raise ValueError("need d >= 1, delta > 0 and 0 < eps < 1")
    value = 4.0 * L_phi * (math.sqrt(d) + 2.0) / (delta * eps)
    return math.ceil(round(value, 9))


def jl_target_dimension(n_points: int, eps: float, constant: float = 8.0) -> int:
    """ceil(constant * eps^-2 * ln(n_points))."""
    if n_points < 1 or not eps > 0:
        raise ValueError("need n_points >= 1 and eps > 0")
    return max(1, math.ceil(constant * math.log(n_points) / (eps * eps)))


def _log_ceil(log_value: float) -> float:
    # log of ceil(exp(log_value)); beyond double range the ceiling is irrelevant
    if log_value < 700.0:
        return math.log(max(math.ceil(math.exp(log_value)), 1))
    return log_value


@dataclass(frozen=True)
class DimensionEstimate:
    """Point counts of the controlled reduction, all stored as natural logarithms."""

    log_N1: float
    log_N2: float
    log_N3: float
    log_total: float
    k0: int
    eps: float
    delta: float
    branching_exponent: int
    constant: float = 1.0

    @staticmethod
    def _exp(log_value: float) -> float:
        return math.exp(log_value) if log_value < 709.0 else math.inf

    @property
    def N1(self) -> float:
        return self._exp(self.log_N1)

    @property
    def N2(self) -> float:
        return self._exp(self.log_N2)

    @property
    def N3(self) -> float:
        return self._exp(self.log_N3)

    @property
    def N_total(self) -> float:
        return self._exp(self.log_total)

    def as_dict(self) -> dict[str, float | int]:
        return {
            "log_N1": self.log_N1,
            "log_N2": self.log_N2,
            "log_N3": self.log_N3,
            "log_N_total": self.log_total,
            "k0": self.k0,
            "eps": self.eps,
            "delta": self.delta,
            "branching_exponent": self.branching_exponent,
            "constant": self.constant,
        }


def dimension_estimate(
    params: ModelParams,
    horizon: float,
    eps: float,
    delta: float,
    V0: float,
    X0: float,
) -> DimensionEstimate:
    """Number of points the projection must handle, and the resulting k0.

    ``horizon`` plays the role of the time-to-region bound. Counts are
    accumulated in log space since the trajectory branching factor
    N^(floor(T/tau) + 1) overflows for any realistic horizon.
    """
    if not (horizon > 0 and eps > 0 and delta > 0):
        raise ValueError("horizon, eps and delta must be positive")
    if V0 < 0 or X0 < 0:
        raise ValueError("V0 and X0 must be nonnegative")
    N, tau = params.N, params.tau
    eps_eff = min(eps, 0.5)
    delta_eff = min(
        delta,
        math.sqrt(2.0) / 2.0 * eps * (math.sqrt(X0) + N / (LEMMA_C * params.theta)),
    )
    steps = math.floor(horizon / tau + 1e-9)
    branching = steps + 1
    log_P = branching * math.log(N)
    L_x = math.sqrt(2.0 * N * V0)
    if L_x > 0:
        log_N1 = (
            log_P
            + math.log(horizon + tau)
            + math.log(math.comb(N, 2))
            + math.log(4.0 * L_x * (math.sqrt(params.d) + 2.0) / (delta_eff * eps_eff))
        )
        log_N1 = _log_ceil(log_N1)
    else:
        log_N1 = -math.inf
    log_N2 = (steps + 3) * math.log(N)
    log_N3 = math.log(2 * N)
    log_total = float(np.logaddexp.reduce([log_N1, log_N2, log_N3]))
    k0 = math.ceil(log_total / (eps_eff * eps_eff))
    return DimensionEstimate(
        log_N1=log_N1,
        log_N2=log_N2,
        log_N3=log_N3,
        log_total=log_total,
        k0=k0,
        eps=eps_eff,
        delta=delta_eff,
        branching_exponent=branching,
    )


class UncontrolledEstimate(NamedTuple):
    samples_per_time: int
    n_points: float
    k0: int


def uncontrolled_dimension_estimate(
    N: int, d: int, T: float, V0: float, delta: float, eps: float
) -> UncontrolledEstimate:
    """Point count N' T N^2 of the uncontrolled reduction.

    N' = ceil(4 sqrt(2 N V0) (sqrt(d) + 2) / (delta eps)) samples per unit time.
    """
    per_time = curve_sample_count(math.sqrt(2.0 * N * V0), d, delta, eps)
    n_points = max(per_time * T * N * N, 1.0)
    return UncontrolledEstimate(
        samples_per_time=per_time,
        n_points=n_points,
        k0=math.ceil(math.log(n_points) / (eps * eps)),
    )


def exactness_at_zero(M: ProjectionMatrix, v0: ArrayLike) -> float:
    """E_M = |1 - sum |v_i^perp|^2 / sum |M v_i^perp|^2|.

    A consensus input gives 0; a nonzero spread collapsed by ``M`` gives inf.
    """
    _, perp = perp_decompose(v0)
    high = float(np.sum(perp * perp))
    projected = M.apply(perp)
    low = float(np.sum(projected * projected))
    if low == 0.0:
        return 0.0 if high == 0.0 else math.inf
    return abs(1.0 - high / low)


@dataclass(frozen=True)
class LemmaVerdict:
    index: int
    A: float
    B: float
    large_branch: bool
    hypothesis_violations: list[str]
    conclusion_violations: list[str]

    @property
    def hypotheses_hold(self) -> bool:
        return not self.hypothesis_violations

    @property
    def passed(self) -> bool:
        return not self.conclusion_violations


def technical_lemma_check(
    a_list: ArrayLike, b_list: ArrayLike, M: ProjectionMatrix, Delta: float
) -> LemmaVerdict:
    """Check the projected-index lemma on one instance.

    Hypotheses: M is weakly JL with eps = 1/2 and delta = Delta at every a_i,
    and |M a_i - b_i| <= Delta. Conclusions are checked regardless, and the
    two kinds of failure are reported separately.
    """
    if not Delta > 0:
        raise ValueError(f"Delta must be positive, got {Delta}")
    a = np.atleast_2d(np.asarray(a_list, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b_list, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"need as many a_i as b_i, got {a.shape[0]} and {b.shape[0]}")
    if b.shape[1] != M.k:
        raise ValueError(f"b_i have dimension {b.shape[1]}, matrix maps to {M.k}")
    n = a.shape[0]

    hypotheses = []
    report = check_weak_jl(M, a, 0.5, Delta)
    for i in report.violating:
        hypotheses.append(f"weak JL fails at a_{i + 1}")
    gaps = np.linalg.norm(M.apply(a) - b, axis=1)
    for i in np.flatnonzero(gaps > Delta):
        hypotheses.append(f"|M a_{i + 1} - b_{i + 1}| = {gaps[i]:.6g} > Delta")

    a_norms = np.linalg.norm(a, axis=1)
    b_norms = np.linalg.norm(b, axis=1)
    index = int(np.argmax(b_norms))
    A = float(np.sum(a_norms**2) / n)
    B = float(np.sum(b_norms**2) / n)
    tol = 1e-12
    conclusions = []
    large = math.sqrt(B) >= 2.0 * Delta
    if large:
        if a_norms[index] < b_norms[index] / 4.0 - tol:
            conclusions.append("|a_i| >= |b_i| / 4")
        if a_norms[index] < LEMMA_C * math.sqrt(A) - tol:
            conclusions.append("|a_i| >= c sqrt(A)")
        if B > 16.0 * n * A * (1.0 + tol) + tol:
            conclusions.append("B <= 16 N A")
    if math.sqrt(B) <= 2.0 * Delta and math.sqrt(A) > LEMMA_CC * Delta * (1.0 + tol):
        conclusions.append("sqrt(A) <= C Delta")
    return LemmaVerdict(
        index=index,
        A=A,
        B=B,
        large_branch=large,
        hypothesis_violations=hypotheses,
        conclusion_violations=conclusions,
    )
