"""Cyclic semi-parametric GEE solver.

The fit alternates four estimating-equation blocks until joint
convergence: the time smooth, one carry-over smooth per carried
treatment, the parametric coefficients, and the working correlation
parameter. Each mean block is solved by Fisher scoring, which reduces to
iteratively reweighted least squares on the working response
``z = M theta + N^{-1} (y - mu)`` with weights ``W = N V^{-1} N``; the
correlation block has a closed-form moment solution. Robust (sandwich)
covariances are assembled per block at convergence.

Inner reductions stack subjects with equal observation counts so the per
iteration work is a handful of batched einsums rather than a Python loop
over subjects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .correlation import WorkingCorrelation, materialize, moment_system, update_alpha
from .design import DesignBundle, ModelSpec
from .errors import (
    BlockSingularityError,
    DesignSingularityError,
    DivergenceError,
    InferenceError,
)
from .families import estimate_dispersion, family_functions
from .splines import SplineBasis, SmoothFunction, basis_matrix, build_basis, sum_to_zero_transform

_MAX_HALVINGS = 20
_MAX_INNER_ITER = 100
# damping kicks in for the correlation parameter once cycling runs long
_DAMP_AFTER_CYCLES = 50

TIME_BLOCK = "time"
CARRY_BLOCK = "carryover"


@dataclass
class _Group:
    """Subjects sharing an observation count, stacked for batched algebra."""

    positions: np.ndarray        # indices into bundle.subjects
    X: np.ndarray                # (n, T, p)
    y: np.ndarray                # (n, T)
    times: np.ndarray            # (n, T)
    carry: np.ndarray            # (n, T, c)
    offset: np.ndarray           # (n, T) fixed external offset
    S: np.ndarray | None = None  # (n, T, m) raw basis values
    S1: np.ndarray | None = None  # (n, T, m-1) sum-to-zero time design

    @property
    def size(self) -> int:
        return self.y.shape[1]


@dataclass
class _Context:
    bundle: DesignBundle
    spec: ModelSpec
    groups: list[_Group]
    basis: SplineBasis | None
    center: np.ndarray | None          # (m, m-1) constraint transform
    carry_active: tuple[bool, ...]     # per carry treatment: any indicator nonzero
    n_obs: int

    @property
    def p(self) -> int:
        return self.bundle.p

    @property
    def has_time_smooth(self) -> bool:
        return self.basis is not None

    @property
    def m(self) -> int:
        return 0 if self.basis is None else self.basis.m

    def n_mean_params(self) -> int:
        k = self.p
        if self.has_time_smooth:
            k += self.m - 1
        k += self.m * sum(self.carry_active)
        return k

    def joint_designs(self) -> list[np.ndarray]:
        """All mean blocks side by side: [X | centered S | active carry bases]."""
        out = []
        for g in self.groups:
            parts = [g.X]
            if self.basis is not None:
                parts.append(g.S1)
            for ci, active in enumerate(self.carry_active):
                if active:
                    parts.append(g.carry[:, :, ci : ci + 1] * g.S)
            out.append(np.concatenate(parts, axis=2))
        return out


@dataclass
class FitState:
    """Parameters plus per-subject caches of the current working quantities.

    Mutated in place while :func:`fit` cycles; a finalized copy rides in
    the returned :class:`FitResult`.
    """

    beta: np.ndarray
    alpha_time: np.ndarray | None
    alpha_carry: dict[str, np.ndarray]
    corr: WorkingCorrelation
    phi: float
    iteration: int = 0
    # caches, one entry per subject in bundle order (filled by finalization)
    mu: tuple[np.ndarray, ...] = ()
    mean_deriv: tuple[np.ndarray, ...] = ()
    working_response: tuple[np.ndarray, ...] = ()
    weight_matrices: tuple[np.ndarray, ...] = ()
    v3_inverses: tuple[np.ndarray, ...] = ()
    pearson_residuals: tuple[np.ndarray, ...] = ()
    _ctx: _Context | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    rel_change: float
    score_time: float
    score_carry: float
    score_beta: float
    phi: float
    alpha: float | None
    alpha_clipped: bool
    mode: str = "cyclic"


@dataclass(frozen=True)
class WaldRow:
    label: str
    estimate: float
    std_err: float
    wald: float
    p_value: float


@dataclass(frozen=True)
class FitResult:
    """Converged (or abandoned) fit with covariances and smooth summaries."""

    converged: bool
    state: FitState
    beta_labels: tuple[str, ...]
    cov_naive: np.ndarray | None
    cov_robust: np.ndarray | None
    trace: tuple[CycleRecord, ...]
    final_scores: Mapping[str, float]
    basis: SplineBasis | None
    time_smooth: SmoothFunction | None
    carry_smooths: Mapping[str, SmoothFunction]
    smooth_covariances: Mapping[str, np.ndarray]

    @property
    def beta(self) -> np.ndarray:
        return self.state.beta

    @property
    def iterations(self) -> int:
        return self.state.iteration

    def _smooth_series(self, smooth, cov, n_grid, level):
        lo, hi = smooth.basis.domain
        grid = np.linspace(lo, hi, n_grid)
        rows = basis_matrix(smooth.basis, grid)
        values = rows @ smooth.coefficients
        if cov is None:
            se = np.full(n_grid, np.nan)
        else:
            se = np.sqrt(np.maximum(np.einsum("gi,ij,gj->g", rows, cov, rows), 0.0))
        z = stats.norm.ppf(0.5 + level / 2.0)
        return grid, values, values - z * se, values + z * se

    def time_smooth_series(self, n_grid: int = 101, level: float = 0.95):
        """(grid, fit, lower, upper) for the time smooth, sandwich bands."""
        if self.time_smooth is None:
            raise ValueError("model has no time smooth")
        return self._smooth_series(
            self.time_smooth, self.smooth_covariances.get(TIME_BLOCK), n_grid, level
        )

    def carry_smooth_series(self, treatment: str, n_grid: int = 101, level: float = 0.95):
        """(grid, fit, lower, upper) for one carry-over smooth."""
        smooth = self.carry_smooths[treatment]
        cov = self.smooth_covariances.get(f"{CARRY_BLOCK}:{treatment}")
        return self._smooth_series(smooth, cov, n_grid, level)


# ---------------------------------------------------------------------------
# context assembly


def _build_context(bundle: DesignBundle, spec: ModelSpec, offset=None) -> _Context:
    subjects = bundle.subjects
    if offset is None:
        offsets = [np.zeros(s.n_obs) for s in subjects]
    else:
        flat = np.asarray(offset, dtype=float)
        if flat.size != bundle.n_obs:
            raise ValueError(f"offset length {flat.size} != total observations {bundle.n_obs}")
        offsets, pos = [], 0
        for s in subjects:
            offsets.append(flat[pos : pos + s.n_obs])
            pos += s.n_obs

    by_size: dict[int, list[int]] = {}
    for i, s in enumerate(subjects):
        by_size.setdefault(s.n_obs, []).append(i)

    groups = []
    for t_size in sorted(by_size):
        idx = np.array(by_size[t_size])
        groups.append(
            _Group(
                positions=idx,
                X=np.stack([subjects[i].X for i in idx]),
                y=np.stack([subjects[i].y for i in idx]),
                times=np.stack([subjects[i].times for i in idx]),
                carry=np.stack([subjects[i].carry_indicators for i in idx]),
                offset=np.stack([offsets[i] for i in idx]),
            )
        )

    basis = None
    center = None
    if spec.spline is not None:
        m = spec.spline.basis_size or bundle.max_obs_per_period
        basis = build_basis(bundle.all_times(), degree=spec.spline.degree, m=m)
        totals = np.zeros(basis.m)
        for g in groups:
            S = basis_matrix(basis, g.times.ravel()).reshape(g.times.shape + (basis.m,))
            g.S = S
            totals += S.sum(axis=(0, 1))
        center = sum_to_zero_transform(totals)
        for g in groups:
            g.S1 = g.S @ center

    n_carry = len(bundle.carry_treatments)
    active = tuple(
        any(np.any(g.carry[:, :, ci] != 0.0) for g in groups) for ci in range(n_carry)
    )
    return _Context(
        bundle=bundle,
        spec=spec,
        groups=groups,
        basis=basis,
        center=center,
        carry_active=active,
        n_obs=bundle.n_obs,
    )


# ---------------------------------------------------------------------------
# linear-predictor pieces


def _mat_vec(stack: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return (stack.reshape(-1, vec.size) @ vec).reshape(stack.shape[:2])


def _eta_x(ctx: _Context, beta: np.ndarray) -> list[np.ndarray]:
    return [g.offset + _mat_vec(g.X, beta) for g in ctx.groups]


def _eta_time(ctx: _Context, alpha_time) -> list[np.ndarray]:
    if not ctx.has_time_smooth or alpha_time is None:
        return [np.zeros_like(g.y) for g in ctx.groups]
    return [_mat_vec(g.S, alpha_time) for g in ctx.groups]


def _eta_carry(ctx: _Context, alpha_carry, skip: str | None = None) -> list[np.ndarray]:
    parts = [np.zeros_like(g.y) for g in ctx.groups]
    for ci, trt in enumerate(ctx.bundle.carry_treatments):
        if trt == skip or not ctx.carry_active[ci]:
            continue
        coef = alpha_carry[trt]
        for k, g in enumerate(ctx.groups):
            parts[k] += g.carry[:, :, ci] * _mat_vec(g.S, coef)
    return parts


def _full_eta(ctx: _Context, state: FitState) -> list[np.ndarray]:
    ex = _eta_x(ctx, state.beta)
    et = _eta_time(ctx, state.alpha_time)
    ec = _eta_carry(ctx, state.alpha_carry)
    return [a + b + c for a, b, c in zip(ex, et, ec)]


def _rinv_by_size(ctx: _Context, corr: WorkingCorrelation) -> dict[int, np.ndarray]:
    out = {}
    for g in ctx.groups:
        t = g.size
        if t not in out:
            out[t] = np.linalg.inv(materialize(corr, t))
    return out


# ---------------------------------------------------------------------------
# Fisher scoring on one block


def _block_designs(ctx: _Context, block: str, treatment: str | None = None) -> list[np.ndarray]:
    if block == "beta":
        return [g.X for g in ctx.groups]
    if block == TIME_BLOCK:
        return [g.S1 for g in ctx.groups]
    ci = ctx.bundle.carry_treatments.index(treatment)
    return [g.carry[:, :, ci : ci + 1] * g.S for g in ctx.groups]


def _theta_valid(ctx, designs, offsets, theta) -> bool:
    fam = ctx.spec.family
    for M, off in zip(designs, offsets):
        eta = off + _mat_vec(M, theta)
        mu = fam.link_inverse(eta)
        if not np.all(fam.in_support(mu)):
            return False
    return True


def _score_info(ctx, designs, offsets, theta, rinv):
    """Unscaled score M'NV^{-1}(y-mu) and Fisher information M'WM."""
    fam = ctx.spec.family
    q = theta.size
    score = np.zeros(q)
    info = np.zeros((q, q))
    for g, M, off in zip(ctx.groups, designs, offsets):
        flat = M.reshape(-1, q)
        eta = off + (flat @ theta).reshape(off.shape)
        mu, dmu, var = family_functions(fam, eta)
        sqv = np.sqrt(var)
        G = M * (dmu / sqv)[:, :, None]
        rs = (g.y - mu) / sqv
        R = rinv[g.size]  # symmetric
        g_flat = G.reshape(-1, q)
        score += g_flat.T @ (rs @ R).ravel()
        rg = np.matmul(R, G)  # batched over subjects
        info += g_flat.T @ rg.reshape(-1, q)
    return score, info


def _solve_block_irls(ctx, designs, offsets, theta0, corr, phi, tol_inner, label):
    """Fisher scoring until the scaled score and the step are both small."""
    theta = np.asarray(theta0, dtype=float).copy()
    rinv = _rinv_by_size(ctx, corr)
    for it in range(_MAX_INNER_ITER):
        score, info = _score_info(ctx, designs, offsets, theta, rinv)
        if not (np.all(np.isfinite(score)) and np.all(np.isfinite(info))):
            raise DivergenceError(
                f"{label}: non-finite working quantities at inner iteration {it}; "
                f"theta={theta!r}"
            )
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise BlockSingularityError(
                f"{label}: singular Fisher information ({info.shape[0]} columns)"
            ) from None
        for _ in range(_MAX_HALVINGS):
            if _theta_valid(ctx, designs, offsets, theta + step):
                break
            step = 0.5 * step
        else:
            raise DivergenceError(
                f"{label}: step leaves the family support after {_MAX_HALVINGS} halvings "
                f"at inner iteration {it}; theta={theta!r}"
            )
        theta = theta + step
        scale = 1.0 + float(np.max(np.abs(theta)))
        if np.max(np.abs(step)) / scale < tol_inner and np.max(np.abs(score)) / phi < tol_inner:
            break
    return theta


def _inner_tolerance(tol: float) -> float:
    return max(min(1e-2 * tol, 1e-8), 1e-14)


# ---------------------------------------------------------------------------
# public operations


def initialize(bundle: DesignBundle, spec: ModelSpec, offset=None) -> FitState:
    """Starting state: one GLM pass (independence, no smooths), zero smooths.

    Raises :class:`DesignSingularityError` naming dependent columns when the
    stacked parametric design is rank deficient.
    """
    ctx = _build_context(bundle, spec, offset)
    x_all = bundle.stacked_X()
    rank = np.linalg.matrix_rank(x_all)
    if rank < ctx.p:
        _, r, piv = scipy.linalg.qr(x_all, mode="economic", pivoting=True)
        dependent = tuple(bundle.column_labels[j] for j in sorted(piv[rank:]))
        raise DesignSingularityError(dependent)

    beta0 = np.zeros(ctx.p)
    if "intercept" in bundle.column_labels:
        ybar = float(np.mean(bundle.responses()))
        link = spec.family.link
        if link == "log":
            start = np.log(max(ybar, 1e-8))
        elif link == "inverse":
            start = 1.0 / ybar if ybar != 0.0 else 1.0
        elif link == "logit":
            pbar = min(max(ybar, 0.01), 0.99)
            start = np.log(pbar / (1.0 - pbar))
        else:
            start = ybar
        beta0[bundle.column_labels.index("intercept")] = start

    designs = _block_designs(ctx, "beta")
    offsets = [g.offset for g in ctx.groups]
    beta = _solve_block_irls(
        ctx,
        designs,
        offsets,
        beta0,
        WorkingCorrelation("independence"),
        phi=1.0,
        tol_inner=_inner_tolerance(spec.tolerance),
        label="initial GLM",
    )

    alpha_time = np.zeros(ctx.m) if ctx.has_time_smooth else None
    alpha_carry = {trt: np.zeros(ctx.m) for trt in bundle.carry_treatments}
    if spec.correlation == "independence":
        corr = WorkingCorrelation("independence")
    else:
        corr = WorkingCorrelation(spec.correlation, 0.0)
    return FitState(
        beta=beta,
        alpha_time=alpha_time,
        alpha_carry=alpha_carry,
        corr=corr,
        phi=1.0,
        iteration=0,
        _ctx=ctx,
    )


def solve_spline_block(state: FitState, block: str, treatment: str | None = None) -> np.ndarray:
    """Solve one smooth block with everything else held fixed.

    ``block`` is ``"time"`` or ``"carryover"`` (with a treatment). Returns
    the updated basis coefficients; the time block is solved in its
    sum-to-zero parameterization and mapped back to the full basis.
    """
    ctx = state._ctx
    if ctx is None:
        raise ValueError("state is detached from its fitting context")
    tol_inner = _inner_tolerance(ctx.spec.tolerance)
    ex = _eta_x(ctx, state.beta)

    if block == TIME_BLOCK:
        if not ctx.has_time_smooth:
            raise ValueError("model has no time smooth")
        ec = _eta_carry(ctx, state.alpha_carry)
        offsets = [a + b for a, b in zip(ex, ec)]
        gamma0 = ctx.center.T @ state.alpha_time
        gamma = _solve_block_irls(
            ctx,
            _block_designs(ctx, TIME_BLOCK),
            offsets,
            gamma0,
            state.corr,
            state.phi,
            tol_inner,
            "time-smooth block",
        )
        return ctx.center @ gamma

    if block != CARRY_BLOCK:
        raise ValueError(f"unknown block {block!r}; expected 'time' or 'carryover'")
    if treatment not in ctx.bundle.carry_treatments:
        raise ValueError(f"no carry-over smooth for treatment {treatment!r}")
    ci = ctx.bundle.carry_treatments.index(treatment)
    if not ctx.carry_active[ci]:
        # indicator identically zero: the score is identically zero too
        return np.zeros(ctx.m)
    et = _eta_time(ctx, state.alpha_time)
    ec = _eta_carry(ctx, state.alpha_carry, skip=treatment)
    offsets = [a + b + c for a, b, c in zip(ex, et, ec)]
    return _solve_block_irls(
        ctx,
        _block_designs(ctx, CARRY_BLOCK, treatment),
        offsets,
        state.alpha_carry[treatment],
        state.corr,
        state.phi,
        tol_inner,
        f"carry-over block ({treatment})",
    )


def solve_beta(state: FitState) -> np.ndarray:
    """Solve the parametric block with the smooths fixed as offsets."""
    ctx = state._ctx
    if ctx is None:
        raise ValueError("state is detached from its fitting context")
    et = _eta_time(ctx, state.alpha_time)
    ec = _eta_carry(ctx, state.alpha_carry)
    offsets = [g.offset + a + b for g, a, b in zip(ctx.groups, et, ec)]
    return _solve_block_irls(
        ctx,
        _block_designs(ctx, "beta"),
        offsets,
        state.beta,
        state.corr,
        state.phi,
        _inner_tolerance(ctx.spec.tolerance),
        "parametric block",
    )


def block_scores(state: FitState) -> dict[str, float]:
    """Sup-norms of the three mean-block estimating equations at the state.

    The time-smooth score is measured in its sum-to-zero parameterization
    (the space the block is actually solved in).
    """
    ctx = state._ctx
    rinv = _rinv_by_size(ctx, state.corr)
    ex = _eta_x(ctx, state.beta)  # includes the external offset
    et = _eta_time(ctx, state.alpha_time)
    ec = _eta_carry(ctx, state.alpha_carry)

    def sup(designs, offsets, theta):
        score, _ = _score_info(ctx, designs, offsets, theta, rinv)
        return float(np.max(np.abs(score)) / state.phi) if score.size else 0.0

    out = {
        "U3": sup(
            _block_designs(ctx, "beta"),
            [g.offset + a + b for g, a, b in zip(ctx.groups, et, ec)],
            state.beta,
        )
    }
    if ctx.has_time_smooth:
        out["U1"] = sup(
            _block_designs(ctx, TIME_BLOCK),
            [a + b for a, b in zip(ex, ec)],
            ctx.center.T @ state.alpha_time,
        )
    else:
        out["U1"] = 0.0
    carry_sup = 0.0
    for ci, trt in enumerate(ctx.bundle.carry_treatments):
        if not ctx.carry_active[ci]:
            continue
        off = [a + b + c for a, b, c in zip(ex, et, _eta_carry(ctx, state.alpha_carry, skip=trt))]
        carry_sup = max(
            carry_sup,
            sup(_block_designs(ctx, CARRY_BLOCK, trt), off, state.alpha_carry[trt]),
        )
    out["U2"] = carry_sup
    return out


def _pearson_by_subject(ctx: _Context, state: FitState) -> list[np.ndarray]:
    etas = _full_eta(ctx, state)
    res: list[np.ndarray | None] = [None] * len(ctx.bundle.subjects)
    fam = ctx.spec.family
    for g, eta in zip(ctx.groups, etas):
        mu, _, var = family_functions(fam, eta)
        rs = (g.y - mu) / np.sqrt(var)
        for row, pos in enumerate(g.positions):
            res[pos] = rs[row]
    return res


def _param_vector(state: FitState) -> np.ndarray:
    parts = [state.beta]
    if state.alpha_time is not None:
        parts.append(state.alpha_time)
    for trt in sorted(state.alpha_carry):
        parts.append(state.alpha_carry[trt])
    if state.corr.alpha is not None:
        parts.append(np.array([state.corr.alpha]))
    return np.concatenate(parts)


def _pack_mean_params(ctx: _Context, state: FitState) -> np.ndarray:
    parts = [state.beta]
    if ctx.has_time_smooth:
        parts.append(ctx.center.T @ state.alpha_time)
    for ci, trt in enumerate(ctx.bundle.carry_treatments):
        if ctx.carry_active[ci]:
            parts.append(state.alpha_carry[trt])
    return np.concatenate(parts)


def _unpack_mean_params(ctx: _Context, state: FitState, theta: np.ndarray) -> None:
    pos = ctx.p
    state.beta = theta[:pos]
    if ctx.has_time_smooth:
        state.alpha_time = ctx.center @ theta[pos : pos + ctx.m - 1]
        pos += ctx.m - 1
    for ci, trt in enumerate(ctx.bundle.carry_treatments):
        if ctx.carry_active[ci]:
            state.alpha_carry[trt] = theta[pos : pos + ctx.m]
            pos += ctx.m


def fit(bundle: DesignBundle, spec: ModelSpec, offset=None) -> FitResult:
    """Run the full cycle U1 -> U2 -> U3 -> (phi, U4) until convergence.

    Convergence requires both the maximum relative parameter change and
    every mean-block score sup-norm to fall below ``spec.tolerance``.
    When the block cycling enters a slow geometric tail (the smooth blocks
    share a basis, so their Gauss-Seidel coupling can be strong), the mean
    blocks are solved in one combined Fisher step instead; the estimating
    equations and the fixed point are unchanged. Non-convergence is
    reported on the result, not raised.
    """
    state = initialize(bundle, spec, offset)
    ctx = state._ctx
    trace: list[CycleRecord] = []
    converged = False
    joint_mode = False
    joint_designs = None
    prev_max_score = np.inf

    for cycle in range(1, spec.max_iterations + 1):
        previous = _param_vector(state)
        alpha_prev = state.corr.alpha

        if joint_mode:
            if joint_designs is None:
                joint_designs = ctx.joint_designs()
            theta = _solve_block_irls(
                ctx,
                joint_designs,
                [g.offset for g in ctx.groups],
                _pack_mean_params(ctx, state),
                state.corr,
                state.phi,
                _inner_tolerance(spec.tolerance),
                "combined mean block",
            )
            _unpack_mean_params(ctx, state, theta)
        else:
            if ctx.has_time_smooth:
                state.alpha_time = solve_spline_block(state, TIME_BLOCK)
            for ci, trt in enumerate(bundle.carry_treatments):
                if ctx.carry_active[ci]:
                    state.alpha_carry[trt] = solve_spline_block(state, CARRY_BLOCK, trt)
            state.beta = solve_beta(state)

        residuals = _pearson_by_subject(ctx, state)
        state.phi = estimate_dispersion(np.concatenate(residuals), ctx.n_mean_params())

        clipped = False
        if spec.correlation != "independence":
            corr, clipped = update_alpha(moment_system(residuals, state.phi), spec.correlation)
            alpha_new = corr.alpha
            if cycle > _DAMP_AFTER_CYCLES and alpha_prev is not None:
                alpha_new = 0.5 * (alpha_new + alpha_prev)
            state.corr = WorkingCorrelation(spec.correlation, alpha_new)

        state.iteration = cycle
        current = _param_vector(state)
        if previous.size == current.size:
            rel = float(np.max(np.abs(current - previous) / (1.0 + np.abs(previous))))
        else:
            rel = np.inf
        scores = block_scores(state)
        max_score = max(scores.values())
        trace.append(
            CycleRecord(
                cycle=cycle,
                rel_change=rel,
                score_time=scores["U1"],
                score_carry=scores["U2"],
                score_beta=scores["U3"],
                phi=state.phi,
                alpha=state.corr.alpha,
                alpha_clipped=clipped,
                mode="joint" if joint_mode else "cyclic",
            )
        )
        if rel < spec.tolerance and max_score < spec.tolerance:
            converged = True
            break
        if not joint_mode and cycle >= 2 and rel < 0.1 and max_score > 0.5 * prev_max_score:
            joint_mode = True
        prev_max_score = max_score

    _finalize_caches(ctx, state)
    scores = block_scores(state)

    cov_naive = cov_robust = None
    joint_robust = None
    try:
        a, b = _joint_sandwich_parts(state)
        a_inv = np.linalg.inv(a)
        joint_robust = a_inv @ b @ a_inv
        bb = slice(0, ctx.p)
        naive = state.phi * a_inv[bb, bb]
        robust = joint_robust[bb, bb]
        cov_naive = 0.5 * (naive + naive.T)
        cov_robust = 0.5 * (robust + robust.T)
    except np.linalg.LinAlgError:
        pass

    smooth_covs: dict[str, np.ndarray] = {}
    time_smooth = None
    carry_smooths: dict[str, SmoothFunction] = {}
    if ctx.has_time_smooth:
        time_smooth = SmoothFunction(ctx.basis, state.alpha_time)
        slices = _joint_slices(ctx)
        if joint_robust is not None:
            sl = slices[TIME_BLOCK]
            cov_gamma = joint_robust[sl, sl]
            smooth_covs[TIME_BLOCK] = ctx.center @ cov_gamma @ ctx.center.T
        for ci, trt in enumerate(bundle.carry_treatments):
            carry_smooths[trt] = SmoothFunction(ctx.basis, state.alpha_carry[trt])
            key = f"{CARRY_BLOCK}:{trt}"
            if joint_robust is not None and key in slices:
                sl = slices[key]
                cov_c = joint_robust[sl, sl]
                smooth_covs[key] = 0.5 * (cov_c + cov_c.T)

    return FitResult(
        converged=converged,
        state=state,
        beta_labels=bundle.column_labels,
        cov_naive=cov_naive,
        cov_robust=cov_robust,
        trace=tuple(trace),
        final_scores=scores,
        basis=ctx.basis,
        time_smooth=time_smooth,
        carry_smooths=carry_smooths,
        smooth_covariances=smooth_covs,
    )


def _finalize_caches(ctx: _Context, state: FitState) -> None:
    """Materialize the per-subject working quantities at the current state."""
    n_subj = len(ctx.bundle.subjects)
    mu_l: list[np.ndarray | None] = [None] * n_subj
    dmu_l: list[np.ndarray | None] = [None] * n_subj
    z_l: list[np.ndarray | None] = [None] * n_subj
    w_l: list[np.ndarray | None] = [None] * n_subj
    v3i_l: list[np.ndarray | None] = [None] * n_subj
    pr_l: list[np.ndarray | None] = [None] * n_subj

    rinv = _rinv_by_size(ctx, state.corr)
    etas = _full_eta(ctx, state)
    fam = ctx.spec.family
    for g, eta in zip(ctx.groups, etas):
        mu, dmu, var = family_functions(fam, eta)
        sqv = np.sqrt(var)
        xb = np.einsum("ntp,p->nt", g.X, state.beta)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = xb + (g.y - mu) / dmu
        R = rinv[g.size]
        for row, pos in enumerate(g.positions):
            inv_s = 1.0 / sqv[row]
            v3inv = R * np.outer(inv_s, inv_s)
            w = v3inv * np.outer(dmu[row], dmu[row])
            mu_l[pos] = mu[row]
            dmu_l[pos] = dmu[row]
            z_l[pos] = z[row]
            w_l[pos] = w
            v3i_l[pos] = v3inv
            pr_l[pos] = (g.y[row] - mu[row]) / sqv[row]

    state.mu = tuple(mu_l)
    state.mean_deriv = tuple(dmu_l)
    state.working_response = tuple(z_l)
    state.weight_matrices = tuple(w_l)
    state.v3_inverses = tuple(v3i_l)
    state.pearson_residuals = tuple(pr_l)


def _subject_joint_designs(ctx: _Context) -> list[np.ndarray]:
    """Per-subject stacked design over all mean blocks, in bundle order."""
    per_subject: list[np.ndarray | None] = [None] * len(ctx.bundle.subjects)
    for g, M in zip(ctx.groups, ctx.joint_designs()):
        for row, pos in enumerate(g.positions):
            per_subject[pos] = M[row]
    return per_subject


def _joint_slices(ctx: _Context) -> dict[str, slice]:
    out = {"beta": slice(0, ctx.p)}
    pos = ctx.p
    if ctx.has_time_smooth:
        out[TIME_BLOCK] = slice(pos, pos + ctx.m - 1)
        pos += ctx.m - 1
    for ci, trt in enumerate(ctx.bundle.carry_treatments):
        if ctx.carry_active[ci]:
            out[f"{CARRY_BLOCK}:{trt}"] = slice(pos, pos + ctx.m)
            pos += ctx.m
    return out


def _joint_sandwich_parts(state: FitState, independence: bool = False):
    """A and B over the joint mean-parameter design.

    Treating the smooth coefficients as part of the estimated parameter
    vector is what makes the extracted beta block account for the smooth
    nuisance estimation (equivalently: it is the sandwich of the
    smooth-projected design residuals).
    """
    ctx = state._ctx
    if not state.mu:
        _finalize_caches(ctx, state)
    designs = _subject_joint_designs(ctx)
    q = designs[0].shape[1]
    a = np.zeros((q, q))
    b = np.zeros((q, q))
    for i, subj in enumerate(ctx.bundle.subjects):
        M = designs[i]
        dmu = state.mean_deriv[i]
        if independence:
            var = ctx.spec.family.variance(state.mu[i])
            nd = M * (dmu / np.sqrt(var))[:, None]
            core = nd.T
            u = (subj.y - state.mu[i]) / np.sqrt(var)
        else:
            nd = M * dmu[:, None]
            core = nd.T @ state.v3_inverses[i]
            u = subj.y - state.mu[i]
        a += core @ nd
        gvec = core @ u
        b += np.outer(gvec, gvec)
    return a, b


def sandwich_covariance(state: FitState) -> tuple[np.ndarray, np.ndarray]:
    """(naive, robust) covariance of the parametric coefficients.

    ``A`` is the working Fisher information and ``B`` the empirical
    outer-product middle, both over the joint mean-parameter design; the
    beta block of ``phi * A^{-1}`` (naive) and ``A^{-1} B A^{-1}``
    (robust) is returned, symmetrized to machine precision.
    """
    ctx = state._ctx
    a, b = _joint_sandwich_parts(state)
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise InferenceError("working information matrix A is singular") from None
    bb = slice(0, ctx.p)
    naive = state.phi * a_inv[bb, bb]
    robust = (a_inv @ b @ a_inv)[bb, bb]
    return 0.5 * (naive + naive.T), 0.5 * (robust + robust.T)


def independence_beta_covariance(state: FitState) -> np.ndarray:
    """Naive covariance of beta under working independence at the fitted
    state (the reference covariance in the QIC penalty)."""
    ctx = state._ctx
    a, _ = _joint_sandwich_parts(state, independence=True)
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise InferenceError("independence information matrix is singular") from None
    bb = slice(0, ctx.p)
    omega = state.phi * a_inv[bb, bb]
    return 0.5 * (omega + omega.T)


def wald_table(result: FitResult) -> list[WaldRow]:
    """Per-coefficient Wald tests from the robust covariance."""
    if result.cov_robust is None:
        raise InferenceError("no robust covariance available for Wald tests")
    rows = []
    se = np.sqrt(np.diag(result.cov_robust))
    for j, label in enumerate(result.beta_labels):
        est = float(result.beta[j])
        s = float(se[j])
        wald = (est / s) ** 2 if s > 0 else np.inf
        rows.append(
            WaldRow(
                label=label,
                estimate=est,
                std_err=s,
                wald=float(wald),
                p_value=float(stats.chi2.sf(wald, df=1)),
            )
        )
    return rows
