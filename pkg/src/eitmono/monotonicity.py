"""Monotonicity test matrices and the regularized definiteness check.

For a candidate pixel set ``C`` the positive-part and negative-part tests are

    linear:     A+ = R - B - beta * S(C)
                A- = B - beta_U * beta * S(C) - R
    nonlinear:  A+ = R - R(gamma0 + beta chi_C)
                A- = R(gamma0 - beta/(1+beta) * beta_L chi_C) - R

where ``S(C)`` is the sum of the pixel derivative matrices over ``C``
(negative semi-definite). ``C`` passes when
``lambda_min(A) + alpha0/|C| >= 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ParameterError
from .forward import (ConductivityField, DerivativeTensor, VoltageMatrix, assemble,
                      indicator_conductivity, raw_voltage_matrix)
from .geometry import BetaBounds, Phantom, PixelGrid, PixelSet
from .measurement import PatternBasis
from .mesh import ElectrodeLayout, Mesh

MODES = ("linear", "nonlinear")
PARTS = ("positive", "negative")


@dataclass(frozen=True)
class MonotonicityConfig:
    beta_bounds: BetaBounds
    alpha0: float = 0.0
    mode: str = "linear"
    part: str = "positive"
    volume_floor: float = 0.0
    noise_delta: float | None = None  # absolute noise level, when declared
    domain_area: float = math.pi
    enforce_alpha_bound: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.part not in PARTS:
            raise ConfigError(f"part must be one of {PARTS}, got {self.part!r}")
        if not self.alpha0 >= 0:
            raise ConfigError("alpha0 must be nonnegative")
        if not 0 <= self.volume_floor <= self.domain_area:
            raise ConfigError("volume_floor must lie in [0, |domain|]")
        if (self.enforce_alpha_bound and self.noise_delta
                and self.alpha0 < self.domain_area * self.noise_delta):
            raise ConfigError(
                f"alpha0 = {self.alpha0:.3g} below |domain| * delta = "
                f"{self.domain_area * self.noise_delta:.3g} for the declared noise")

    def alpha(self, area: float) -> float:
        return self.alpha0 / area

    @property
    def derivative_weight(self) -> float:
        b = self.beta_bounds
        return b.beta if self.part == "positive" else b.beta_upper * b.beta

    def replace(self, **changes) -> "MonotonicityConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class NonlinearContext:
    """What is needed to evaluate R at perturbed test conductivities."""

    mesh: Mesh
    layout: ElectrodeLayout
    sigma0: ConductivityField
    patterns: PatternBasis
    owner: np.ndarray  # per triangle, inside-pixel row

    def response(self, rows: np.ndarray, change: float) -> np.ndarray:
        sigma = indicator_conductivity(self.sigma0, self.owner, rows, change)
        R, _ = raw_voltage_matrix(assemble(self.mesh, sigma, self.layout), self.patterns)
        return 0.5 * (R + R.T)


@dataclass(frozen=True, eq=False)
class TestMatrices:
    background: VoltageMatrix
    data: VoltageMatrix
    tensor: DerivativeTensor | None = None
    nonlinear: NonlinearContext | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        k = self.background.k
        if self.data.k != k:
            raise ParameterError(f"data has k={self.data.k}, background has k={k}")
        if self.tensor is not None and self.tensor.k != k:
            raise ParameterError("derivative tensor does not match the electrode count")
        if self.nonlinear is not None and self.nonlinear.patterns.k != k:
            raise ParameterError("nonlinear context does not match the electrode count")

    def rows(self, pset: PixelSet) -> np.ndarray:
        if self.tensor is None:
            raise ParameterError("pixel rows need the derivative tensor")
        return self.tensor.rows(pset)


@dataclass(frozen=True)
class Outcome:
    passed: bool
    lam_min: float
    alpha: float


def _negative_change(cfg: MonotonicityConfig) -> float:
    return -cfg.beta_bounds.negative_contrast


def _nonlinear_matrix(ctx: TestMatrices, rows: np.ndarray, cfg: MonotonicityConfig) -> np.ndarray:
    if ctx.nonlinear is None:
        raise ParameterError("nonlinear mode needs a NonlinearContext")
    R = ctx.data.entries
    if cfg.part == "positive":
        return R - ctx.nonlinear.response(rows, cfg.beta_bounds.beta)
    return ctx.nonlinear.response(rows, _negative_change(cfg)) - R


def _rows_for(ctx: TestMatrices, C: PixelSet) -> np.ndarray:
    if ctx.tensor is not None:
        return ctx.tensor.rows(C)
    raise ParameterError("cannot map pixels to elements without the derivative tensor")


def test_matrix(ctx: TestMatrices, C: PixelSet, cfg: MonotonicityConfig) -> np.ndarray:
    """Symmetric test matrix A+ or A- for the candidate set ``C``."""
    if len(C) == 0:
        raise ParameterError("test set C must be nonempty")
    if cfg.mode == "nonlinear":
        return _nonlinear_matrix(ctx, _rows_for(ctx, C), cfg)
    if ctx.tensor is None:
        raise ParameterError("linear mode needs the derivative tensor")
    S = ctx.tensor.sum_over(C)
    R, B = ctx.data.entries, ctx.background.entries
    base = R - B if cfg.part == "positive" else B - R
    return base - cfg.derivative_weight * S


test_matrix.__test__ = False


def min_eigenvalue(A: np.ndarray) -> float:
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalError("test matrix has non-finite entries")
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])


def _decide(A: np.ndarray, area: float, cfg: MonotonicityConfig) -> Outcome:
    lam = min_eigenvalue(A)
    alpha = cfg.alpha(area)
    tol = 1e-12 * max(np.abs(A).max(), np.finfo(float).tiny)
    return Outcome(lam + alpha >= -tol, lam, alpha)


def regularized_psd(A: np.ndarray, C: PixelSet | int, cfg: MonotonicityConfig, rho: float) -> bool:
    """``lambda_min(A) + alpha0/|C| >= 0`` with ``|C| = rho^2 * #pixels``.

    ``C`` may be a PixelSet or a pixel count. Sets below the volume floor fail.
    """
    n = C if isinstance(C, int) else len(C)
    if n <= 0:
        raise ParameterError("test set C must be nonempty")
    area = rho * rho * n
    if area < cfg.volume_floor:
        return False
    return _decide(A, area, cfg).passed


@dataclass(frozen=True)
class BetaReport:
    positive_margin: float
    negative_margin: float
    background_within: bool
    negative_bound: float


def validate_beta(phantom: Phantom, bounds: BetaBounds) -> BetaReport:
    """Check the phantom's amplitudes against beta; raise ConfigError on violation."""
    g0 = phantom.background
    if not bounds.beta_lower <= g0 <= bounds.beta_upper:
        raise ConfigError(f"background {g0} outside [beta_lower, beta_upper] = "
                          f"[{bounds.beta_lower}, {bounds.beta_upper}]")
    neg_bound = bounds.negative_contrast
    pos_margin = bounds.beta - phantom.max_positive
    neg_margin = neg_bound - phantom.max_negative
    tol = 1e-12 * max(1.0, bounds.beta)
    if pos_margin < -tol:
        raise ConfigError(f"positive amplitude {phantom.max_positive} exceeds beta = {bounds.beta}")
    if neg_margin < -tol:
        raise ConfigError(f"negative amplitude {phantom.max_negative} exceeds "
                          f"beta/(1+beta)*beta_lower = {neg_bound}")
    return BetaReport(max(pos_margin, 0.0), max(neg_margin, 0.0), True, neg_bound)


class MonotonicityTest:
    """Incremental evaluator used by the peeling loop.

    Holds the running derivative sum over the current set so that testing
    the removal of a few pixels costs one small eigensolve.
    """

    def __init__(self, ctx: TestMatrices, cfg: MonotonicityConfig, grid: PixelGrid):
        self.ctx = ctx
        self.cfg = cfg
        self.rho = grid.side
        if cfg.mode == "linear":
            if ctx.tensor is None:
                raise ParameterError("linear mode needs the derivative tensor")
            R, B = ctx.data.entries, ctx.background.entries
            self._base = R - B if cfg.part == "positive" else B - R
        self._rows: set[int] = set()
        self._S = None

    def reset(self, J: PixelSet) -> None:
        rows = self.ctx.rows(J) if self.ctx.tensor is not None else np.asarray(list(J))
        self._rows = set(rows.tolist())
        if self.cfg.mode == "linear":
            self._S = self.ctx.tensor.matrices[rows].sum(axis=0)

    def _removed_rows(self, removed: Sequence[int]) -> np.ndarray:
        return self.ctx.rows(PixelSet(removed)) if len(removed) else np.zeros(0, dtype=np.int64)

    def check(self, removed: Sequence[int]) -> Outcome:
        rr = self._removed_rows(removed)
        n = len(self._rows) - len(rr)
        if n <= 0:
            raise ParameterError("test set C must be nonempty")
        area = self.rho ** 2 * n
        if self.cfg.mode == "linear":
            S = self._S - self.ctx.tensor.matrices[rr].sum(axis=0) if len(rr) else self._S
            A = self._base - self.cfg.derivative_weight * S
        else:
            rows = np.array(sorted(self._rows.difference(rr.tolist())), dtype=np.int64)
            A = _nonlinear_matrix(self.ctx, rows, self.cfg)
        out = _decide(A, area, self.cfg)
        if area < self.cfg.volume_floor:
            return Outcome(False, out.lam_min, out.alpha)
        return out

    def commit(self, removed: Sequence[int]) -> None:
        rr = self._removed_rows(removed)
        if self.cfg.mode == "linear" and len(rr):
            self._S = self._S - self.ctx.tensor.matrices[rr].sum(axis=0)
        self._rows.difference_update(rr.tolist())

    def evaluate(self, C: PixelSet) -> Outcome:
        A = test_matrix(self.ctx, C, self.cfg)
        area = self.rho ** 2 * len(C)
        out = _decide(A, area, self.cfg)
        if area < self.cfg.volume_floor:
            return Outcome(False, out.lam_min, out.alpha)
        return out
