"""Orchestration: relaxation annealing, penalty baseline, diagnostics.

`solve_goop` transcribes a game once and then solves a sequence of
relaxed complementarity systems with the relaxation parameter shrinking
geometrically, warm-starting each round at the previous solution, until
the componentwise complementarity violation drops below tolerance.
`solve_baseline` scalarizes each player's hierarchy with geometric penalty
weights and solves the resulting single-level game through the same
machinery, so comparisons share the entire solver stack.

Non-convergence is a first-class outcome: it is reported with
diagnostics, never retried silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from . import mcp
from .exprgraph import compile_rows
from .problem import GameSpec, PlayerSpec, PreferenceLevel, validate
from .transcribe import MicpSystem, assemble_micp, relax, transcribe_player

SOLUTION_FOUND = "solution-found"
LOW_PRECISION = "low-precision"
NOT_CONVERGED = "not-converged"


@dataclass
class AnnealSchedule:
    """Annealing inputs: start relaxation, shrink factor, tolerances."""

    sigma0: float = 0.1
    kappa: float = 0.1
    gamma: float = 1e-6
    epsilon: float = 1e-6
    max_rounds: int = 12

    def __post_init__(self):
        if self.sigma0 <= 0 or self.gamma <= 0 or self.epsilon <= 0:
            raise ValueError("schedule parameters must be positive")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")

    def sigma_at(self, k: int) -> float:
        return self.sigma0 * self.kappa ** k


@dataclass
class EquilibriumSolution:
    """Result of one game solve, with enough context to audit it."""

    status: str
    point: np.ndarray
    system: MicpSystem
    final_sigma: float
    comp_violation: float
    stationarity_residual: float
    level_values: dict  # player id -> [J_1 .. J_K] on the original objectives
    sigma_trace: list
    violation_trace: list
    rounds: int
    newton_iterations: int
    message: str = ""

    def primal(self, pid: int) -> np.ndarray:
        player = self.system.game.player(pid)
        cols = [self.system.column(v) for v in player.primal_vars]
        return self.point[cols]

    def induced_duals(self, pid: int) -> dict:
        """Values of the multipliers that became unknowns for this player."""
        for span, block in zip(self.system.spans, self.system.blocks):
            if span.pid == pid:
                out = {}
                for v in block.decision_vars:
                    if v.role in (eg.DUAL_EQ, eg.DUAL_INEQ):
                        out[v.name] = float(self.point[self.system.column(v)])
                return out
        raise KeyError(f"no player with id {pid}")

    def shared_ineq_duals(self) -> np.ndarray:
        cols = [j for j, v in enumerate(self.system.layout)
                if v.role == eg.SHARED_DUAL and v.name.split(".")[-1].startswith("lam")]
        return self.point[cols]


def build_system(game: GameSpec, relax_inner: bool = False) -> MicpSystem:
    """Validate, transcribe every player, relax, and assemble once."""
    diags = validate(game)
    if diags:
        raise ValueError("invalid game: " + "; ".join(diags))
    ns = game.pool.namespace()
    sigma = game.pool.new_id(f"{ns}.sigma", eg.PARAMETER)
    sigma_expr = eg.var(sigma)
    blocks = [
        transcribe_player(p, game.pool, sigma=sigma_expr, relax_inner=relax_inner,
                          namespace=ns)
        for p in game.players
    ]
    relaxed = [relax(b, sigma_expr) for b in blocks]
    return assemble_micp(game, relaxed, sigma, namespace=ns)


def _level_evaluators(player: PlayerSpec, layout) -> list:
    """Per-level (compiled fn, is_max_form) pairs over a layout point."""
    fns = []
    for lvl in player.levels:
        if lvl.max_terms:
            fns.append((compile_rows(lvl.max_terms, layout), True))
        else:
            fns.append((compile_rows([lvl.objective], layout), False))
    return fns


def _eval_levels(fns, point) -> list:
    vals = []
    for fn, is_max in fns:
        tv, _ = fn.eval(point)
        vals.append(float(np.sum(np.maximum(0.0, tv))) if is_max else float(tv[0]))
    return vals


def preference_values(game: GameSpec, system: MicpSystem, point) -> dict:
    """Per-player per-level objective values on the original max-form costs."""
    return {p.id: _eval_levels(_level_evaluators(p, system.layout), point)
            for p in game.players}


def preference_report(game: GameSpec, solution: EquilibriumSolution) -> dict:
    """Sum of players' preference values at each level index (1-based)."""
    values = preference_values(game, solution.system, solution.point)
    sums: dict = {}
    for p in game.players:
        for k, v in enumerate(values[p.id], start=1):
            sums[k] = sums.get(k, 0.0) + v
    return sums


def _max_pair_violation(system: MicpSystem, x, sigma: float) -> float:
    prods = system.pair_products(x, sigma=sigma)
    return float(np.max(prods)) if len(prods) else 0.0


def solve_goop(game: GameSpec, schedule: AnnealSchedule | None = None,
               relax_inner: bool = False,
               options: mcp.SolveOptions | None = None,
               start: np.ndarray | None = None,
               mu0: float = 1e-1, mu_warm: float = 1e-6,
               system: MicpSystem | None = None) -> EquilibriumSolution:
    """Anneal the relaxation to zero, warm-starting every round.

    Rounds use sigma_k = sigma0 * kappa**k.  The loop returns as soon as
    the max componentwise pair product is within gamma (including after
    the very first solve), degrades to low-precision when successive
    iterates stop moving, and reports not-converged when the inner solver
    fails or the round cap is reached.
    """
    schedule = schedule or AnnealSchedule()
    if system is None:
        system = build_system(game, relax_inner=relax_inner)
    if options is None:
        # small systems afford long degenerate-corner crawls; large ones
        # pay tens of ms per iteration, so scale the budget down with size
        options = mcp.SolveOptions(max_iter=max(600, min(4000, 60000 // max(system.dim, 1))))

    z = np.zeros(system.dim) if start is None else np.asarray(start, dtype=float).copy()
    sigma_trace: list = []
    viol_trace: list = []
    newton_total = 0
    status, message = NOT_CONVERGED, f"round cap {schedule.max_rounds} reached"
    sig = schedule.sigma_at(0)

    for k in range(schedule.max_rounds):
        sig = schedule.sigma_at(k)
        sigma_trace.append(sig)
        inst = mcp.McpInstance(system, sigma_value=sig,
                               smoothing_mu=mu0 if k == 0 else mu_warm,
                               start_point=z)
        res = mcp.solve(inst, options)
        newton_total += res.iterations
        if res.status != "converged":
            z = res.point
            viol_trace.append(_max_pair_violation(system, z, sig))
            status = NOT_CONVERGED
            message = f"inner solve {res.status} at round {k}: {res.message}"
            break
        z_new = res.point
        viol = _max_pair_violation(system, z_new, sig)
        viol_trace.append(viol)
        if viol <= schedule.gamma:
            z = z_new
            status, message = SOLUTION_FOUND, ""
            break
        if float(np.linalg.norm(z_new - z)) < schedule.epsilon:
            z = z_new
            status, message = LOW_PRECISION, "iterates stopped moving"
            break
        z = z_new

    report = mcp.check_solution(system, z, sig)
    return EquilibriumSolution(
        status=status,
        point=z,
        system=system,
        final_sigma=sig,
        comp_violation=report.max_pair_product,
        stationarity_residual=report.stationarity_inf,
        level_values=preference_values(game, system, z),
        sigma_trace=sigma_trace,
        violation_trace=viol_trace,
        rounds=len(sigma_trace),
        newton_iterations=newton_total,
        message=message,
    )


def scalarized_game(game: GameSpec, alpha: float, weights=None) -> GameSpec:
    """Single-level variant: objectives alpha^(k-1)-weighted sums per player.

    Reuses the source game's variables and constraint expressions, so both
    formulations consume identical inputs.
    """
    if weights is None and alpha < 1.0:
        raise ValueError("alpha must be at least 1")
    players = []
    for p in game.players:
        K = p.num_levels
        w = list(weights) if weights is not None else [alpha ** k for k in range(K)]
        if len(w) != K:
            raise ValueError(f"player {p.id}: {len(w)} weights for {K} levels")
        objective = eg.weighted_sum(
            (w[k], p.levels[k].objective) for k in range(K))
        merged = PreferenceLevel(
            objective=objective,
            equalities=[c for lvl in p.levels for c in lvl.equalities],
            inequalities=[c for lvl in p.levels for c in lvl.inequalities],
            slack_ids=[s for lvl in p.levels for s in lvl.slack_ids],
            max_terms=[],
        )
        players.append(PlayerSpec(
            id=p.id, primal_vars=list(p.primal_vars), levels=[merged],
            innermost_equalities=list(p.innermost_equalities),
            innermost_inequalities=list(p.innermost_inequalities),
        ))
    return GameSpec(players=players, shared_equalities=list(game.shared_equalities),
                    shared_inequalities=list(game.shared_inequalities), pool=game.pool)


def solve_baseline(game: GameSpec, alpha: float, weights=None,
                   options: mcp.SolveOptions | None = None,
                   mu0: float = 1e-1) -> EquilibriumSolution:
    """Penalty-weighted single-level game, one plain KKT solve.

    The hierarchy is collapsed into one objective with weights
    [1, alpha, ..., alpha^(K-1)] (innermost level weighted most); the
    resulting system has no complementarity pairs and no annealing.
    Preference values are still reported on the original levels.
    """
    flat = scalarized_game(game, alpha, weights)
    system = build_system(flat)
    if options is None:
        options = mcp.SolveOptions(max_iter=max(600, min(4000, 60000 // max(system.dim, 1))))
    inst = mcp.McpInstance(system, sigma_value=0.0, smoothing_mu=mu0,
                           start_point=np.zeros(system.dim))
    res = mcp.solve(inst, options)
    status = SOLUTION_FOUND if res.status == "converged" else NOT_CONVERGED
    report = mcp.check_solution(system, res.point, 0.0)
    return EquilibriumSolution(
        status=status,
        point=res.point,
        system=system,
        final_sigma=0.0,
        comp_violation=report.max_pair_product,
        stationarity_residual=report.stationarity_inf,
        level_values=preference_values(game, system, res.point),
        sigma_trace=[0.0],
        violation_trace=[report.max_pair_product],
        rounds=1,
        newton_iterations=res.iterations,
        message="" if status == SOLUTION_FOUND else f"inner solve {res.status}: {res.message}",
    )


def _lex_improves(cand, base, tol):
    for a, b in zip(cand, base):
        if a < b - tol:
            return True
        if a > b + tol:
            return False
    return False


def lexicographic_probe(game: GameSpec, solution: EquilibriumSolution,
                        samples: int, radius: float, seed: int = 0,
                        tol: float = 1e-6) -> dict:
    """Sampled unilateral-deviation test.

    For each player, perturbs that player's primal variables within
    `radius`, projects back onto the player's private equality manifold
    (random perturbations never satisfy dynamics equalities exactly),
    discards candidates violating private or shared constraints beyond
    `tol`, and counts candidates whose preference vector lexicographically
    improves, most-important level first, by more than `tol`.
    """
    rng = np.random.default_rng(seed)
    system = solution.system
    x = solution.point
    counts: dict = {}

    for p in game.players:
        cols = np.array([system.column(v) for v in p.primal_vars], dtype=np.intp)
        own_eqs = list(p.innermost_equalities)
        eq_fn = compile_rows(own_eqs, p.primal_vars) if own_eqs else None
        ineq_rows = list(p.innermost_inequalities) + list(game.shared_inequalities)
        eq_rows = own_eqs + list(game.shared_equalities)
        ineq_fn = compile_rows(ineq_rows, system.layout) if ineq_rows else None
        alleq_fn = compile_rows(eq_rows, system.layout) if eq_rows else None
        level_fns = _level_evaluators(p, system.layout)
        base_prefs = list(reversed(_eval_levels(level_fns, x)))

        count = 0
        for _ in range(samples):
            cand = x.copy()
            cand[cols] += rng.uniform(-radius, radius, size=len(cols))
            if eq_fn is not None:
                ok = False
                v = cand[cols]
                for _ in range(8):
                    ev, jac = eq_fn.eval(v)
                    if float(np.max(np.abs(ev))) <= 1e-9:
                        ok = True
                        break
                    step, *_ = np.linalg.lstsq(jac.toarray(), -ev, rcond=None)
                    v = v + step
                if not ok:
                    continue
                cand[cols] = v
            if ineq_fn is not None:
                iv, _ = ineq_fn.eval(cand)
                if len(iv) and float(np.min(iv)) < -tol:
                    continue
            if alleq_fn is not None:
                ev, _ = alleq_fn.eval(cand)
                if len(ev) and float(np.max(np.abs(ev))) > tol:
                    continue
            cand_prefs = list(reversed(_eval_levels(level_fns, cand)))
            if _lex_improves(cand_prefs, base_prefs, tol):
                count += 1
        counts[p.id] = count
    return counts
