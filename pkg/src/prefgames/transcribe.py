"""Recursive KKT transcription of nested preference levels.

Each player's hierarchy collapses bottom-up: the innermost problem is
replaced by its first-order conditions, which become the constraint system
of the level above, and so on until a single-level problem with
complementarity constraints remains.  Multipliers introduced along the way
("induced" variables) join the player's decision vector.  The final
per-player blocks, one relaxed complementarity row each, assemble into one
square mixed complementarity system over all players plus the shared
constraints.

Within a `KktBlock`, `comp_pairs` lists (expression, multiplier) pairs
meaning ``0 <= expr  perp  multiplier >= 0``; both members also appear in
`inequalities`, and the pair products are what convergence of the outer
annealing loop is measured on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from .exprgraph import Expr, VarId, VarPool, var, differentiate, compile_rows
from .problem import GameSpec, PlayerSpec


@dataclass
class KktBlock:
    """Constraint system of one level of one player's nested problem."""

    decision_vars: list
    equalities: list
    inequalities: list
    comp_pairs: list  # (Expr, VarId): 0 <= Expr perp var >= 0
    relaxed: bool = False

    def pair_product(self) -> Expr:
        """Aggregated inner product sum_j G_j * H_j over the comp pairs."""
        return eg.add(*[eg.mul(g, var(h)) for g, h in self.comp_pairs])


def kkt_step(inner: KktBlock, inner_objective: Expr, pool: VarPool,
             prefix: str, sigma: Expr | None = None) -> KktBlock:
    """One recursion step: replace a level's problem by its KKT conditions.

    `inner` is the constraint system of the level being transcribed and
    `inner_objective` its cost.  The returned block contains fresh
    multipliers for every constraint row, stationarity of the level's
    Lagrangian with respect to all of `inner`'s decision variables, the
    carried constraints, and fresh complementarity pairs for every
    inequality.  Existing comp pairs are converted to member
    non-negativity (already carried) plus one aggregated product equality
    with a free multiplier; if `sigma` is given the aggregated product is
    instead relaxed to ``sigma - sum G_j H_j >= 0``.
    """
    nlp_eqs = list(inner.equalities)
    nlp_ineqs = list(inner.inequalities)
    if inner.comp_pairs:
        agg = inner.pair_product()
        if sigma is None:
            nlp_eqs.append(agg)
        else:
            nlp_ineqs.append(sigma - agg)

    mu = [pool.new_id(f"{prefix}.mu[{j}]", eg.DUAL_EQ) for j in range(len(nlp_eqs))]
    lam = [pool.new_id(f"{prefix}.lam[{j}]", eg.DUAL_INEQ) for j in range(len(nlp_ineqs))]

    lagrangian = eg.weighted_sum(
        [(1.0, inner_objective)]
        + [(-1.0, eg.mul(var(l), c)) for l, c in zip(lam, nlp_ineqs)]
        + [(-1.0, eg.mul(var(m), c)) for m, c in zip(mu, nlp_eqs)]
    )
    stationarity = [differentiate(lagrangian, v) for v in inner.decision_vars]

    return KktBlock(
        decision_vars=inner.decision_vars + mu + lam,
        equalities=stationarity + nlp_eqs,
        inequalities=nlp_ineqs + [var(l) for l in lam],
        comp_pairs=[(c, l) for c, l in zip(nlp_ineqs, lam)],
    )


def transcribe_player(player: PlayerSpec, pool: VarPool,
                      sigma: Expr | None = None,
                      relax_inner: bool = False,
                      namespace: str = "") -> KktBlock:
    """Fold kkt_step from the innermost level down to level 2.

    The result is the constraint system of the player's single-level
    problem whose objective is the outermost cost; its comp pairs are the
    complementarity constraints accumulated by the recursion.  A one-level
    player needs no recursion and keeps plain constraints.
    """
    ns = f"{namespace}." if namespace else ""
    K = player.num_levels
    innermost = player.levels[K - 1]
    block = KktBlock(
        decision_vars=list(player.primal_vars) + list(innermost.slack_ids),
        equalities=list(player.innermost_equalities) + list(innermost.equalities),
        inequalities=list(player.innermost_inequalities) + list(innermost.inequalities),
        comp_pairs=[],
    )
    for k in range(K, 1, -1):
        level = player.levels[k - 1]
        block = kkt_step(block, level.objective, pool, f"{ns}p{player.id}.L{k}",
                         sigma=sigma if relax_inner else None)
        outer = player.levels[k - 2]
        block.decision_vars += list(outer.slack_ids)
        block.equalities += list(outer.equalities)
        block.inequalities += list(outer.inequalities)
    return block


def relax(block: KktBlock, sigma: Expr) -> KktBlock:
    """Relax the block's complementarity to ``sigma - sum G_j H_j >= 0``.

    Pair member non-negativity is retained; the pairs themselves stay
    recorded so violation can be reported componentwise.  A block without
    pairs is returned unchanged.  At sigma = 0 the relaxed feasible set
    coincides with the original complementarity set.
    """
    if not block.comp_pairs:
        return KktBlock(list(block.decision_vars), list(block.equalities),
                        list(block.inequalities), [], relaxed=True)
    return KktBlock(
        decision_vars=list(block.decision_vars),
        equalities=list(block.equalities),
        inequalities=list(block.inequalities) + [sigma - block.pair_product()],
        comp_pairs=list(block.comp_pairs),
        relaxed=True,
    )


@dataclass
class PlayerSpan:
    """Index ranges of one player's unknowns inside the assembled layout."""

    pid: int
    z: slice
    mu: slice
    lam: slice


@dataclass
class PairRecord:
    """Where to read one complementarity pair (G_j, H_j) at a solution.

    g_row indexes the residual row whose value is G_j; h_col indexes the
    layout entry holding H_j.
    """

    pid: int
    g_row: int
    h_col: int


@dataclass
class MicpSystem:
    """Square mixed complementarity system for all players.

    Rows listed in free_index pair with unconstrained unknowns and must
    vanish; rows in comp_index pair with non-negative unknowns under
    ``0 <= x perp F(x) >= 0``.  The relaxation parameter sigma is a
    runtime input appended after the layout (slot `sigma_slot`).
    """

    layout: list
    residual: object  # CompiledVectorFn over layout + [sigma]
    free_index: np.ndarray
    comp_index: np.ndarray
    sigma_var: VarId
    sigma_slot: int
    spans: list
    pair_records: list
    row_labels: list
    rows: list
    game: GameSpec
    blocks: list

    @property
    def dim(self) -> int:
        return len(self.layout)

    def eval(self, x, sigma: float):
        """Residual and sparse Jacobian (w.r.t. x only) at (x, sigma)."""
        point = np.concatenate([np.asarray(x, dtype=float), [float(sigma)]])
        return self.residual.eval(point)

    def column(self, vid: VarId) -> int:
        return self._col[vid]

    def __post_init__(self):
        self._col = {v: j for j, v in enumerate(self.layout)}

    def pair_products(self, x, fx=None, sigma: float = 0.0) -> np.ndarray:
        """Componentwise products G_j * H_j at a point, in record order."""
        if not self.pair_records:
            return np.zeros(0)
        if fx is None:
            fx, _ = self.eval(x, sigma)
        g = fx[[r.g_row for r in self.pair_records]]
        h = np.asarray(x, dtype=float)[[r.h_col for r in self.pair_records]]
        return g * h


def assemble_micp(game: GameSpec, blocks, sigma: VarId,
                  namespace: str = "") -> MicpSystem:
    """Stack all players' first-order systems into one square MiCP.

    Per player the Lagrangian couples the outermost objective with that
    player's aggregated inequality vector (carried inequalities, pair
    members, relaxed product row) and equalities, plus the shared
    constraints.  One shared multiplier vector serves every player, and
    the shared rows appear once in the stacked system.
    """
    if len(blocks) != len(game.players):
        raise ValueError(f"{len(blocks)} blocks for {len(game.players)} players")
    pool = game.pool
    ns = f"{namespace}." if namespace else ""

    mu_ids, lam_ids = [], []
    for p, b in zip(game.players, blocks):
        mu_ids.append([pool.new_id(f"{ns}p{p.id}.micp.mu[{j}]", eg.DUAL_EQ)
                       for j in range(len(b.equalities))])
        lam_ids.append([pool.new_id(f"{ns}p{p.id}.micp.lam[{j}]", eg.DUAL_INEQ)
                        for j in range(len(b.inequalities))])
    mu_s = [pool.new_id(f"{ns}shared.mu[{j}]", eg.SHARED_DUAL)
            for j in range(len(game.shared_equalities))]
    lam_s = [pool.new_id(f"{ns}shared.lam[{j}]", eg.SHARED_DUAL)
             for j in range(len(game.shared_inequalities))]

    shared_terms = (
        [(-1.0, eg.mul(var(l), c)) for l, c in zip(lam_s, game.shared_inequalities)]
        + [(-1.0, eg.mul(var(m), c)) for m, c in zip(mu_s, game.shared_equalities)]
    )

    free_rows, free_vars, free_labels = [], [], []
    comp_rows, comp_vars, comp_labels = [], [], []
    span_of = {}

    for p, b, mids, lids in zip(game.players, blocks, mu_ids, lam_ids):
        lagrangian = eg.weighted_sum(
            [(1.0, p.levels[0].objective)]
            + [(-1.0, eg.mul(var(l), c)) for l, c in zip(lids, b.inequalities)]
            + [(-1.0, eg.mul(var(m), c)) for m, c in zip(mids, b.equalities)]
            + shared_terms
        )
        for v in b.decision_vars:
            free_rows.append(differentiate(lagrangian, v))
            free_vars.append(v)
            free_labels.append(f"p{p.id} stationarity d/d {v.name}")
        for j, (c, m) in enumerate(zip(b.equalities, mids)):
            free_rows.append(c)
            free_vars.append(m)
            free_labels.append(f"p{p.id} equality[{j}]")
        comp_chunk_rows = list(b.inequalities)
        comp_rows.append(comp_chunk_rows)
        comp_vars.append(lids)
        comp_labels.append([f"p{p.id} inequality[{j}]" for j in range(len(comp_chunk_rows))])

    for j, (c, m) in enumerate(zip(game.shared_equalities, mu_s)):
        free_rows.append(c)
        free_vars.append(m)
        free_labels.append(f"shared equality[{j}]")

    rows = list(free_rows)
    layout = list(free_vars)
    labels = list(free_labels)
    comp_start = len(rows)
    chunk_offsets = []
    for chunk, lids, lbls in zip(comp_rows, comp_vars, comp_labels):
        chunk_offsets.append(len(rows))
        rows.extend(chunk)
        layout.extend(lids)
        labels.extend(lbls)
    shared_comp_at = len(rows)
    rows.extend(game.shared_inequalities)
    layout.extend(lam_s)
    labels.extend(f"shared inequality[{j}]" for j in range(len(lam_s)))

    col_of = {v: j for j, v in enumerate(layout)}
    spans = []
    cursor = 0
    for p, b, mids, lids, off in zip(game.players, blocks, mu_ids, lam_ids, chunk_offsets):
        nz, nm = len(b.decision_vars), len(mids)
        spans.append(PlayerSpan(p.id, slice(cursor, cursor + nz),
                                slice(cursor + nz, cursor + nz + nm),
                                slice(off, off + len(lids))))
        cursor += nz + nm

    pair_records = []
    for p, b, off in zip(game.players, blocks, chunk_offsets):
        row_of = {}
        for j, c in enumerate(b.inequalities):
            row_of.setdefault(c.uid, off + j)
        for g_expr, h_vid in b.comp_pairs:
            pair_records.append(PairRecord(
                pid=p.id, g_row=row_of[g_expr.uid], h_col=col_of[h_vid]))

    residual = compile_rows(rows, layout + [sigma], wrt=layout)
    return MicpSystem(
        layout=layout,
        residual=residual,
        free_index=np.arange(comp_start, dtype=np.intp),
        comp_index=np.arange(comp_start, len(rows), dtype=np.intp),
        sigma_var=sigma,
        sigma_slot=len(layout),
        spans=spans,
        pair_records=pair_records,
        row_labels=labels,
        rows=rows,
        game=game,
        blocks=list(blocks),
    )


def dump_system(system: MicpSystem, path) -> None:
    """Write one annotated line per residual row (debug aid)."""
    comp = set(system.comp_index.tolist())
    with open(path, "w") as fh:
        fh.write(f"# layout dim {system.dim}, sigma slot {system.sigma_slot}\n")
        for j, (vid, label, row) in enumerate(
                zip(system.layout, system.row_labels, system.rows)):
            kind = "comp" if j in comp else "free"
            op = ">= 0, perp" if kind == "comp" else "= 0, paired"
            fh.write(f"F[{j}] [{label}] {op} {vid.name}:\n    {eg.to_str(row)}\n")
