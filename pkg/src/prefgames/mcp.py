"""Mixed complementarity solver: smoothed Fischer-Burmeister Newton.

The system pairs free rows (must vanish) with unconstrained unknowns and
comp rows with ``0 <= x_j perp F_j(x) >= 0``.  Comp rows are reformulated
through ``phi_mu(a, b) = a + b - sqrt(a^2 + b^2 + 2 mu)``, which vanishes
exactly on the complementarity set when mu = 0; mu > 0 rounds off the kink
and is annealed toward zero inside the solve.  The solver itself works on
a penalized variant that mixes in max(0,a)*max(0,b), which has the same
zero set but keeps large complementarity products visible when one
argument is huge (plain FB rows vanish in that regime and multipliers can
run away).  The outer relaxation parameter sigma is a fixed input per
solve.

A damped Newton iteration with a nonmonotone Armijo backtracking line
search on 0.5*||Phi||^2 drives the residual to zero; when the square
Newton direction cannot make a reasonable step, Levenberg-Marquardt
directions on the merit take over, escalating toward steepest descent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import exprgraph as eg
from .exprgraph import VarPool, compile_rows
from .transcribe import MicpSystem

_KINK_GRAD = 1.0 - 1.0 / np.sqrt(2.0)
_KINK_EPS = 1e-12


@dataclass
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 200
    armijo_slope: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    reg_init: float = 1e-8
    reg_max: float = 1e-2
    mu_snap: float = 1e-14
    mu_scale: float = 0.1  # keep mu <= mu_scale * max|Phi_0|^2
    mu_rule: str = "rms"  # anneal when ||Phi_mu||_rms < sqrt(mu); or "progress"
    fb_weight: float = 0.95  # FB vs product-penalty mix on comp rows
    newton_min_step: float = 1e-10  # smallest Newton step before the LM fallback
    lm_init: float = 1e-6
    lm_max: float = 1e8
    lm_min_step: float = 1e-2  # escalate nu rather than backtrack far
    memory: int = 1  # nonmonotone line-search window (1 = monotone)
    proximal: bool = True  # proximal-point continuation when the plain solve fails
    prox_rho0: float = 1e-2
    prox_rho_min: float = 1e-9
    prox_stages: int = 40
    trace_path: str | None = None


@dataclass
class McpInstance:
    """One solve: a system, fixed sigma, initial smoothing, start point."""

    system: MicpSystem
    sigma_value: float = 0.0
    smoothing_mu: float = 1e-4
    start_point: np.ndarray | None = None


@dataclass
class McpResult:
    point: np.ndarray
    status: str  # converged | stalled | max-iterations | singular
    residual_norm: float  # inf-norm of the solver residual at mu = 0
    comp_violation: float  # max over pair products G_j*H_j and x_j*F_j
    iterations: int
    message: str = ""


def _phi(a, b, mu):
    return a + b - np.sqrt(a * a + b * b + 2.0 * mu)


def fb_residual(x, fx, instance: McpInstance, mu: float | None = None) -> np.ndarray:
    """Row j is F_j for free indices, phi_mu(x_j, F_j) for comp indices."""
    x = np.asarray(x, dtype=float)
    fx = np.asarray(fx, dtype=float)
    if x.shape != fx.shape:
        raise ValueError("x and Fx length mismatch")
    mu = instance.smoothing_mu if mu is None else mu
    out = fx.copy()
    ci = instance.system.comp_index
    if len(ci):
        out[ci] = _phi(x[ci], fx[ci], mu)
    return out


def _fb_scales(a, b, mu):
    """Partial derivatives (d/da, d/db) of phi_mu, with kink convention."""
    r = np.sqrt(a * a + b * b + 2.0 * mu)
    da = np.empty_like(r)
    db = np.empty_like(r)
    ok = r > _KINK_EPS
    da[ok] = 1.0 - a[ok] / r[ok]
    db[ok] = 1.0 - b[ok] / r[ok]
    da[~ok] = _KINK_GRAD
    db[~ok] = _KINK_GRAD
    return da, db


def _penalized_rows(a, b, mu, weight):
    """weight*phi_mu(a,b) + (1-weight)*max(0,a)*max(0,b).

    The penalty term keeps complementarity products visible even when one
    argument grows large, where plain FB rows collapse toward zero
    (multiplier-runaway trap on degenerate systems).  Zero set at mu = 0 is
    unchanged.
    """
    out = weight * _phi(a, b, mu)
    if weight < 1.0:
        out = out + (1.0 - weight) * np.maximum(a, 0.0) * np.maximum(b, 0.0)
    return out


def _penalized_scales(a, b, mu, weight):
    da, db = _fb_scales(a, b, mu)
    if weight < 1.0:
        da = weight * da + (1.0 - weight) * (a > 0.0) * np.maximum(b, 0.0)
        db = weight * db + (1.0 - weight) * (b > 0.0) * np.maximum(a, 0.0)
    else:
        da = weight * da
        db = weight * db
    return da, db


def _solver_residual(x, fx, comp_index, mu, weight):
    out = fx.copy()
    if len(comp_index):
        ci = comp_index
        out[ci] = _penalized_rows(x[ci], fx[ci], mu, weight)
    return out


def _solver_jacobian(x, fx, jac, comp_index, mu, weight):
    """Jacobian of the (penalized) FB-reformulated residual as CSR."""
    n = len(x)
    db = np.ones(n)
    da = np.zeros(n)
    if len(comp_index):
        ci = comp_index
        da_c, db_c = _penalized_scales(x[ci], fx[ci], mu, weight)
        da[ci] = da_c
        db[ci] = db_c
    scaled = sp.csr_matrix(jac.multiply(db[:, None]))
    return scaled + sp.diags(da, format="csr")


class _ProximalShift:
    """System wrapper evaluating F(x) + rho * (x - x_ref).

    Duck-types the subset of MicpSystem the Newton core needs.  Pair
    products delegate to the unshifted system so violation metrics stay
    meaningful.
    """

    def __init__(self, system, rho, x_ref):
        self._inner = system
        self.rho = rho
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.dim = system.dim
        self.comp_index = system.comp_index
        self.free_index = system.free_index
        self.pair_records = system.pair_records
        self._shift = sp.identity(system.dim, format="csr") * rho

    def eval(self, x, sigma):
        fx, jac = self._inner.eval(x, sigma)
        return fx + self.rho * (x - self.x_ref), jac + self._shift

    def pair_products(self, x, fx=None, sigma=0.0):
        return self._inner.pair_products(x, fx=None, sigma=sigma)


def _newton_core(system, sigma, x0, mu0, opts, trace=None):
    """Damped (LM-safeguarded) semismooth Newton on the penalized FB system.

    Returns (status, x, norm0, iterations); x is the best point seen by the
    unsmoothed residual norm.
    """
    n = system.dim
    ci = system.comp_index
    w = opts.fb_weight
    x = np.asarray(x0, dtype=float).copy()
    if len(ci):
        x[ci] = np.maximum(x[ci], 0.0)
    mu = float(mu0)
    eye = sp.identity(n, format="csr")
    recent: list = []  # merit history for the nonmonotone Armijo test

    fx, jac = system.eval(x, sigma)
    phi_0 = _solver_residual(x, fx, ci, 0.0, w)
    best_x, best_norm = x.copy(), float(np.max(np.abs(phi_0))) if n else 0.0

    status = "max-iterations"
    it = 0
    nu_warm = 0.0  # last successful LM parameter, persisted across iterations
    while it < opts.max_iter:
        norm0 = float(np.max(np.abs(phi_0))) if n else 0.0
        if norm0 < best_norm:
            best_norm, best_x = norm0, x.copy()
        if norm0 <= opts.tol:
            return "converged", x, norm0, it

        # Anneal the smoothing toward zero as the iteration progresses.
        mu_in = mu
        if opts.mu_rule == "progress":
            target = opts.mu_scale * norm0 * norm0
            while mu > 0.0 and mu > target:
                mu = mu / 10.0
                if mu < opts.mu_snap:
                    mu = 0.0
        else:  # "rms"
            rms = np.sqrt(max(n, 1))
            phi_mu = _solver_residual(x, fx, ci, mu, w) if mu > 0.0 else phi_0
            while mu > 0.0 and float(np.linalg.norm(phi_mu)) < np.sqrt(mu) * rms:
                mu = mu / 10.0
                if mu < opts.mu_snap:
                    mu = 0.0
                phi_mu = _solver_residual(x, fx, ci, mu, w)
        if mu != mu_in:
            recent.clear()  # merit history refers to the old smoothing
        phi_mu = _solver_residual(x, fx, ci, mu, w) if mu > 0.0 else phi_0

        jphi = _solver_jacobian(x, fx, jac, ci, mu, w)
        theta = 0.5 * float(phi_mu @ phi_mu)
        grad = jphi.T @ phi_mu
        recent.append(theta)
        del recent[:-max(opts.memory, 1)]
        theta_ref = max(recent)

        def try_direction(direction, min_step):
            slope = float(grad @ direction)
            if not np.isfinite(slope) or slope >= 0.0:
                return None
            t = 1.0
            while t >= min_step:
                x_new = x + t * direction
                fx_n, jac_n = system.eval(x_new, sigma)
                phi_n = _solver_residual(x_new, fx_n, ci, mu, w)
                theta_n = 0.5 * float(phi_n @ phi_n)
                if np.isfinite(theta_n) and theta_n <= theta_ref + opts.armijo_slope * t * slope:
                    return t, x_new, fx_n, jac_n, phi_n
                t *= opts.backtrack
            return None

        # Square Newton direction (regularized only if factorization fails).
        hit = None
        reg = 0.0
        while True:
            try:
                mat = jphi if reg == 0.0 else jphi + eye * reg
                d = spla.splu(mat.tocsc()).solve(-phi_mu)
                if np.all(np.isfinite(d)):
                    hit = try_direction(d, max(opts.newton_min_step, opts.min_step))
                    break
            except RuntimeError:
                pass
            reg = opts.reg_init if reg == 0.0 else reg * 10.0
            if reg > opts.reg_max:
                break

        # Levenberg-Marquardt fallback: always a descent direction on the
        # merit, interpolating toward steepest descent as nu grows.  The
        # parameter warm-starts near the last value that worked.
        if hit is None:
            jtj = (jphi.T @ jphi).tocsr()
            nu = max(opts.lm_init, nu_warm / 10.0)
            while nu <= opts.lm_max:
                try:
                    d = spla.splu((jtj + eye * nu).tocsc()).solve(-grad)
                    if np.all(np.isfinite(d)):
                        hit = try_direction(d, opts.lm_min_step)
                        if hit is not None:
                            nu_warm = nu
                            break
                except RuntimeError:
                    pass
                nu *= 10.0
        if hit is None:
            if float(grad @ grad) == 0.0:
                status = "stalled:zero merit gradient"
            elif reg > opts.reg_max:
                status = f"singular:factorization failed up to {opts.reg_max}"
            else:
                status = "stalled:line search failed"
            break

        t, x, fx, jac, phi_mu = hit
        phi_0 = _solver_residual(x, fx, ci, 0.0, w) if mu > 0.0 else phi_mu
        it += 1
        if trace is not None:
            trace.append((it, float(np.max(np.abs(phi_0))), t, mu))

    norm0 = float(np.max(np.abs(phi_0))) if n else 0.0
    if norm0 < best_norm:
        best_norm, best_x = norm0, x.copy()
    if best_norm <= opts.tol:
        return "converged", best_x, best_norm, it
    return status, best_x, best_norm, it


def solve(instance: McpInstance, opts: SolveOptions | None = None) -> McpResult:
    """Solve the complementarity system by smoothed penalized-FB Newton.

    The smoothing mu anneals toward zero inside the Newton loop.  If the
    plain solve cannot finish, a proximal-point continuation retries from
    the best point: solve F(x) + rho (x - x_ref) = 0 (in the FB sense),
    recenter, shrink rho, and finish with an unshifted solve.  Every path
    is deterministic.  The best point found is returned with a status of
    converged, stalled, max-iterations, or singular.
    """
    opts = opts or SolveOptions()
    system = instance.system
    n = system.dim
    sigma = instance.sigma_value

    x0 = np.zeros(n) if instance.start_point is None else np.asarray(
        instance.start_point, dtype=float).copy()
    if x0.shape != (n,):
        raise ValueError(f"start point has shape {x0.shape}, expected ({n},)")
    if not np.all(np.isfinite(x0)):
        raise ValueError("start point is not finite")

    trace = [] if opts.trace_path else None
    status, x, norm, used = _newton_core(system, sigma, x0, instance.smoothing_mu,
                                         opts, trace)
    total = used
    message = ""

    if status != "converged" and opts.proximal and opts.prox_stages > 0:
        rho = opts.prox_rho0
        x_ref = x
        stages = 0
        budget = max(opts.max_iter // 4, 50)
        sub_opts = SolveOptions(**{**opts.__dict__, "max_iter": budget,
                                   "trace_path": None, "proximal": False})
        while stages < opts.prox_stages and rho >= opts.prox_rho_min:
            shifted = _ProximalShift(system, rho, x_ref)
            st, xs, _, its = _newton_core(shifted, sigma, x_ref,
                                          max(instance.smoothing_mu, 1e-4),
                                          sub_opts, None)
            total += its
            stages += 1
            if st == "converged":
                x_ref = xs
                rho *= 0.1
            else:
                rho *= 10.0
                if rho > 1e4:
                    break
        status2, x2, norm2, used2 = _newton_core(system, sigma, x_ref,
                                                 instance.smoothing_mu, sub_opts,
                                                 trace)
        total += used2
        if norm2 <= norm:
            status, x, norm = status2, x2, norm2
        message = f"proximal continuation: {stages} stages"

    if ":" in status:
        status, detail = status.split(":", 1)
        message = f"{detail}; {message}" if message else detail

    if opts.trace_path:
        with open(opts.trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "residual", "step", "mu"])
            writer.writerows(trace)

    fx_b, _ = system.eval(x, sigma)
    viol = _comp_violation(system, x, fx_b)
    return McpResult(point=x, status=status, residual_norm=norm,
                     comp_violation=viol, iterations=total, message=message)


def _comp_violation(system, x, fx):
    parts = [0.0]
    prods = system.pair_products(x, fx=fx)
    if len(prods):
        parts.append(float(np.max(prods)))
    ci = system.comp_index
    if len(ci):
        parts.append(float(np.max(x[ci] * fx[ci])))
    return max(parts)


@dataclass
class SolutionReport:
    stationarity_inf: float
    min_comp_x: float
    min_comp_f: float
    max_pair_product: float
    max_xf_product: float


def check_solution(system: MicpSystem, point, sigma: float) -> SolutionReport:
    """Feasibility/optimality report at a candidate point.

    Negative min entries over comp rows signal infeasibility; the pair
    products are the componentwise complementarity violations the
    annealing loop terminates on.
    """
    x = np.asarray(point, dtype=float)
    fx, _ = system.eval(x, sigma)
    fi, ci = system.free_index, system.comp_index
    stat = float(np.max(np.abs(fx[fi]))) if len(fi) else 0.0
    min_x = float(np.min(x[ci])) if len(ci) else 0.0
    min_f = float(np.min(fx[ci])) if len(ci) else 0.0
    prods = system.pair_products(x, fx=fx)
    max_pair = float(np.max(prods)) if len(prods) else 0.0
    max_xf = float(np.max(x[ci] * fx[ci])) if len(ci) else 0.0
    return SolutionReport(stat, min_x, min_f, max_pair, max_xf)


def lcp_system(M, q) -> MicpSystem:
    """Expression-graph system for the LCP ``0 <= x perp Mx + q >= 0``."""
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(q)
    pool = VarPool()
    ids = [pool.new_id(f"x[{j}]") for j in range(n)]
    xs = [eg.var(v) for v in ids]
    rows = [eg.weighted_sum(zip(M[j], xs), offset=q[j]) for j in range(n)]
    sigma = pool.new_id("sigma", eg.PARAMETER)
    return MicpSystem(
        layout=ids,
        residual=compile_rows(rows, ids + [sigma], wrt=ids),
        free_index=np.zeros(0, dtype=np.intp),
        comp_index=np.arange(n, dtype=np.intp),
        sigma_var=sigma,
        sigma_slot=n,
        spans=[],
        pair_records=[],
        row_labels=[f"lcp row {j}" for j in range(n)],
        rows=rows,
        game=None,
        blocks=[],
    )
