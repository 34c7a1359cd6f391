"""Declarative model of an N-player game with ordered preference levels.

Each player carries a stack of preference levels; the list is ordered from
the outermost (least important) level to the innermost (most important).
Constraints may live at any level: the innermost feasible set holds the
dynamics and hard private constraints, while slack inequalities introduced
by `smooth_max` attach to the level whose objective they smooth.  Shared
constraints couple all players and everyone is equally responsible for
satisfying them.

Inequality expressions use the convention ``expr >= 0``; equalities mean
``expr == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import exprgraph as eg
from .exprgraph import Expr, VarId, VarPool


@dataclass
class PreferenceLevel:
    """One objective in a player's hierarchy plus its level-local constraints.

    max_terms holds the raw arguments f_j of a sum-of-max(0, f_j) objective
    when the level was produced by `smooth_max`; metrics are reported on
    that original form rather than on slack values.
    """

    objective: Expr
    equalities: list = field(default_factory=list)
    inequalities: list = field(default_factory=list)
    slack_ids: list = field(default_factory=list)
    max_terms: list = field(default_factory=list)


@dataclass
class PlayerSpec:
    """One player: primal variables, ordered levels, innermost feasible set.

    levels[0] is the outermost (least important) objective; levels[-1] is
    the innermost and most important one.
    """

    id: int
    primal_vars: list
    levels: list
    innermost_equalities: list = field(default_factory=list)
    innermost_inequalities: list = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def own_vars(self) -> list:
        out = list(self.primal_vars)
        for lvl in self.levels:
            out.extend(lvl.slack_ids)
        return out


@dataclass
class GameSpec:
    """All players plus the constraints they share."""

    players: list
    shared_equalities: list = field(default_factory=list)
    shared_inequalities: list = field(default_factory=list)
    pool: VarPool = field(default_factory=VarPool)

    def player(self, pid: int) -> PlayerSpec:
        for p in self.players:
            if p.id == pid:
                return p
        raise KeyError(f"no player with id {pid}")


def smooth_max(level: PreferenceLevel, terms, pool: VarPool, label: str = "s") -> PreferenceLevel:
    """Slack transformation of a sum-of-max(0, f_j) objective.

    Replaces the objective with sum_j s_j and appends s_j >= f_j, s_j >= 0
    to the level's inequalities, so the problem becomes smooth while the
    optimal value is unchanged (each slack tightens to max(0, f_j)).
    """
    terms = list(terms)
    if not terms:
        raise ValueError("smooth_max needs at least one term")
    slack_ids = [pool.new_id(f"{label}[{j}]", eg.SLACK) for j in range(len(terms))]
    slacks = [eg.var(s) for s in slack_ids]
    ineqs = list(level.inequalities)
    for s, f in zip(slacks, terms):
        ineqs.append(s - f)  # s >= f
        ineqs.append(s)      # s >= 0
    return PreferenceLevel(
        objective=eg.add(*slacks),
        equalities=list(level.equalities),
        inequalities=ineqs,
        slack_ids=list(level.slack_ids) + slack_ids,
        max_terms=list(level.max_terms) + terms,
    )


def _check_exprs(diags, exprs, pool, allowed, where):
    for e in exprs:
        if not isinstance(e, Expr):
            diags.append(f"{where}: not an expression (got {type(e).__name__})")
            continue
        for v in eg.variables_in(e):
            if not pool.contains(v):
                diags.append(f"{where}: unregistered variable {v.name}")
            elif allowed is not None and v not in allowed:
                diags.append(f"{where}: references foreign variable {v.name}")


def validate(game: GameSpec) -> list:
    """Diagnostics for a malformed game; empty list means well-formed.

    Checks: per-player variable sets are disjoint, objectives are scalar
    expressions, every expression references only registered variables,
    and player expressions touch only their own variables plus opponents'
    primals.
    """
    diags: list = []
    owned: dict = {}
    for p in game.players:
        if not p.levels:
            diags.append(f"player {p.id}: no preference levels")
        for v in p.own_vars():
            if v in owned:
                diags.append(
                    f"player {p.id}: overlapping variable {v.name} also owned by player {owned[v]}"
                )
            else:
                owned[v] = p.id

    all_primals = set()
    for p in game.players:
        all_primals.update(p.primal_vars)

    for p in game.players:
        allowed = set(p.own_vars()) | all_primals
        where = f"player {p.id}"
        _check_exprs(diags, p.innermost_equalities, game.pool, allowed, f"{where} innermost equality")
        _check_exprs(diags, p.innermost_inequalities, game.pool, allowed, f"{where} innermost inequality")
        for k, lvl in enumerate(p.levels, start=1):
            wl = f"{where} level {k}"
            if not isinstance(lvl.objective, Expr):
                diags.append(f"{wl}: non-scalar objective")
            else:
                _check_exprs(diags, [lvl.objective], game.pool, allowed, f"{wl} objective")
            _check_exprs(diags, lvl.equalities, game.pool, allowed, f"{wl} equality")
            _check_exprs(diags, lvl.inequalities, game.pool, allowed, f"{wl} inequality")

    shared_allowed = all_primals | set(owned)
    _check_exprs(diags, game.shared_equalities, game.pool, shared_allowed, "shared equality")
    _check_exprs(diags, game.shared_inequalities, game.pool, shared_allowed, "shared inequality")
    return diags
