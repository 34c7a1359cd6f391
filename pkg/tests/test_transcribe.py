import numpy as np
import pytest

from prefgames import drive, mcp
from prefgames import exprgraph as eg
from prefgames.problem import GameSpec, PlayerSpec, PreferenceLevel
from prefgames.transcribe import (KktBlock, assemble_micp, kkt_step, relax,
                                  transcribe_player)

from toys import ALL_TOYS, toy_halfspace


def _three_level_player(pool, n=2, m=1, p=2):
    zs = [pool.variable(f"z{j}") for j in range(n)]
    eqs = [eg.add(*zs) - 1.0][:m]
    ineqs = [zs[j % n] + float(j) for j in range(p)]
    levels = [PreferenceLevel(objective=(zs[0] - 2.0) ** 2),
              PreferenceLevel(objective=(zs[-1] - 1.0) ** 2),
              PreferenceLevel(objective=eg.add(*[z * z for z in zs]))]
    return PlayerSpec(id=0, primal_vars=[z.payload for z in zs], levels=levels,
                      innermost_equalities=eqs, innermost_inequalities=ineqs)


def test_one_level_player_is_base_case():
    pool = eg.VarPool()
    z = pool.variable("z")
    player = PlayerSpec(id=0, primal_vars=[z.payload],
                        levels=[PreferenceLevel(objective=z * z)],
                        innermost_inequalities=[z + 1])
    block = transcribe_player(player, pool)
    assert block.decision_vars == [z.payload]
    assert block.comp_pairs == []
    assert len(block.equalities) == 0
    assert len(block.inequalities) == 1


def test_two_level_scalar_toy_block_structure():
    # outer (z-1)^2, inner z^2 s.t. z - 1/2 >= 0; KKT: 2z - lam = 0.
    pool = eg.VarPool()
    z = pool.variable("z")
    h = z - 0.5
    inner = KktBlock(decision_vars=[z.payload], equalities=[],
                     inequalities=[h], comp_pairs=[])
    block = kkt_step(inner, z * z, pool, "L2")
    assert len(block.decision_vars) == 2  # z and lam
    lam = block.decision_vars[1]
    assert lam.role == eg.DUAL_INEQ
    # stationarity row is 2z - lam, carried h, dual nonnegativity, one pair
    assert len(block.equalities) == 1
    assert len(block.inequalities) == 2
    assert block.comp_pairs == [(h, lam)]
    at = {z.payload: 0.5, lam: 1.0}
    assert eg.evaluate(block.equalities[0], at) == pytest.approx(0.0)
    assert eg.evaluate(h, at) == pytest.approx(0.0)


def test_three_level_counting_oracle():
    # hand-unrolled recursion: level-3 multipliers p+m, level-2 carries
    # stationarity n+p+m with multiplier block n+m+1 plus 2p pair duals.
    for n, m, p in [(2, 1, 2), (3, 1, 3), (1, 1, 1)]:
        pool = eg.VarPool()
        player = _three_level_player(pool, n=n, m=m, p=p)
        block = transcribe_player(player, pool)
        assert len(block.decision_vars) == 2 * n + 3 * p + 2 * m + 1
        assert len(block.comp_pairs) == 2 * p


def test_three_level_pair_stacking_matches_two_blocks():
    # pairs stack as [carried h; inner duals] against the two fresh
    # multiplier blocks, each of length p.
    pool = eg.VarPool()
    n, m, p = 2, 1, 2
    player = _three_level_player(pool, n=n, m=m, p=p)
    block = transcribe_player(player, pool)
    g_first = [g for g, _ in block.comp_pairs[:p]]
    g_second = [g for g, _ in block.comp_pairs[p:]]
    assert g_first == player.innermost_inequalities
    for g in g_second:
        assert g.kind == eg.VAR and g.payload.role == eg.DUAL_INEQ
    h_roles = {h.role for _, h in block.comp_pairs}
    assert h_roles == {eg.DUAL_INEQ}


def test_two_level_equalities_only():
    # p = 0: no complementarity anywhere, induced vars = m + n.
    pool = eg.VarPool()
    z1, z2 = pool.variable("z1"), pool.variable("z2")
    levels = [PreferenceLevel(objective=(z1 - z2) ** 2),
              PreferenceLevel(objective=(z1 - 2) ** 2 + z2 * z2)]
    player = PlayerSpec(id=0, primal_vars=[z1.payload, z2.payload], levels=levels,
                        innermost_equalities=[z1 + z2 - 1])
    block = transcribe_player(player, pool)
    n, m = 2, 1
    assert len(block.comp_pairs) == 0
    assert len(block.decision_vars) == n + m  # primals plus m induced duals
    assert len(block.equalities) == n + m  # stationarity rows plus carried g
    assert len(block.inequalities) == 0


def test_relax_inner_products_option():
    pool_off = eg.VarPool()
    off = transcribe_player(_three_level_player(pool_off), pool_off)
    pool_on = eg.VarPool()
    sig = eg.var(pool_on.new_id("sigma", eg.PARAMETER))
    on = transcribe_player(_three_level_player(pool_on), pool_on,
                           sigma=sig, relax_inner=True)
    # OFF keeps the aggregated product as an equality; ON turns it into a
    # sigma-bounded inequality with its own pair.
    assert len(on.comp_pairs) == len(off.comp_pairs) + 1
    assert len(on.equalities) == len(off.equalities) - 1


def _toy_pair_block(pool):
    g1, g2 = pool.variable("g1"), pool.variable("g2")
    h1 = pool.new_id("h1", eg.DUAL_INEQ)
    h2 = pool.new_id("h2", eg.DUAL_INEQ)
    return KktBlock(
        decision_vars=[g1.payload, g2.payload, h1, h2],
        equalities=[],
        inequalities=[g1, g2, eg.var(h1), eg.var(h2)],
        comp_pairs=[(g1, h1), (g2, h2)],
    ), (g1.payload, g2.payload, h1, h2)


def _relaxed_row_value(block, vids, point, sigma_value, pool, sigma):
    relaxed = relax(block, eg.var(sigma))
    row = relaxed.inequalities[-1]
    at = dict(zip(vids, point))
    at[sigma] = sigma_value
    return eg.evaluate(row, at)


def test_relax_examples():
    pool = eg.VarPool()
    block, vids = _toy_pair_block(pool)
    sigma = pool.new_id("sigma", eg.PARAMETER)
    # sigma = 0 reproduces the strict complementarity set
    assert _relaxed_row_value(block, vids, (1.0, 0.0, 0.0, 1.0), 0.0, pool, sigma) == 0.0
    assert _relaxed_row_value(block, vids, (1.0, 1.0, 1.0, 0.0), 0.0, pool, sigma) == -1.0
    # orthogonal pair feasible for any sigma >= 0
    for s in (0.0, 0.5, 2.0):
        assert _relaxed_row_value(block, vids, (1.0, 0.0, 0.0, 1.0), s, pool, sigma) >= 0.0
    # G=(1,1), H=(1,0): product 1, feasible iff sigma >= 1
    assert _relaxed_row_value(block, vids, (1.0, 1.0, 1.0, 0.0), 0.999, pool, sigma) < 0.0
    assert _relaxed_row_value(block, vids, (1.0, 1.0, 1.0, 0.0), 1.0, pool, sigma) == 0.0


def test_relax_sigma_monotone():
    pool = eg.VarPool()
    block, vids = _toy_pair_block(pool)
    sigma = pool.new_id("sigma", eg.PARAMETER)
    rng = np.random.default_rng(0)
    for _ in range(50):
        pt = rng.uniform(0.0, 2.0, size=4)
        lo = _relaxed_row_value(block, vids, pt, 0.3, pool, sigma)
        hi = _relaxed_row_value(block, vids, pt, 0.7, pool, sigma)
        assert hi >= lo  # sigma enters only as sigma - G.H


def test_relax_no_pairs_is_identity():
    pool = eg.VarPool()
    z = pool.variable("z")
    sigma = pool.new_id("sigma", eg.PARAMETER)
    block = KktBlock([z.payload], [z - 1], [z], [])
    relaxed = relax(block, eg.var(sigma))
    assert relaxed.inequalities == [z]
    assert relaxed.comp_pairs == []


def test_assemble_unconstrained_single_player():
    pool = eg.VarPool()
    z = pool.variable("z")
    player = PlayerSpec(id=0, primal_vars=[z.payload],
                        levels=[PreferenceLevel(objective=(z - 1) ** 2)])
    game = GameSpec(players=[player], pool=pool)
    sigma = pool.new_id("sigma", eg.PARAMETER)
    block = transcribe_player(player, pool)
    system = assemble_micp(game, [relax(block, eg.var(sigma))], sigma)
    assert system.dim == 1
    assert len(system.comp_index) == 0
    fx, jac = system.eval(np.array([0.0]), 0.0)
    assert fx[0] == pytest.approx(-2.0)  # 2(z-1) at z=0
    fx, _ = system.eval(np.array([1.0]), 0.0)
    assert fx[0] == 0.0


def test_assemble_two_player_sequential_oracle():
    # J1=(a-b)^2, J2=(b-1)^2: F = [2(a-b), 2(b-1)]; substitution gives (1,1).
    pool = eg.VarPool()
    a, b = pool.variable("a"), pool.variable("b")
    players = [
        PlayerSpec(id=0, primal_vars=[a.payload],
                   levels=[PreferenceLevel(objective=(a - b) ** 2)]),
        PlayerSpec(id=1, primal_vars=[b.payload],
                   levels=[PreferenceLevel(objective=(b - 1) ** 2)]),
    ]
    game = GameSpec(players=players, pool=pool)
    system = drive.build_system(game)
    fx, _ = system.eval(np.array([0.5, 2.0]), 0.0)
    assert fx == pytest.approx([2 * (0.5 - 2.0), 2 * (2.0 - 1.0)])
    fx, _ = system.eval(np.array([1.0, 1.0]), 0.0)
    assert np.allclose(fx, 0.0)


def test_assemble_dimension_mismatch():
    pool = eg.VarPool()
    z = pool.variable("z")
    player = PlayerSpec(id=0, primal_vars=[z.payload],
                        levels=[PreferenceLevel(objective=z * z)])
    game = GameSpec(players=[player], pool=pool)
    sigma = pool.new_id("sigma", eg.PARAMETER)
    with pytest.raises(ValueError):
        assemble_micp(game, [], sigma)


def test_multiplier_closure_on_toy():
    game, _ = toy_halfspace()
    system = drive.build_system(game)
    n = system.dim
    assert system.residual.output_arity == n
    assert sorted(np.concatenate([system.free_index, system.comp_index]).tolist()) \
        == list(range(n))
    dual_cols = [j for j, v in enumerate(system.layout)
                 if v.role in (eg.DUAL_EQ, eg.DUAL_INEQ, eg.SHARED_DUAL)]
    for j in dual_cols:
        vid = system.layout[j]
        assert any((row.vmask >> vid.index) & 1 for row in system.rows), vid


def test_degenerate_level_collapse():
    # A constant middle level: its stationarity contributes nothing, so the
    # solution of the 2-level game extended with zeros solves the 3-level one.
    # The fully degenerate middle duals leave the unrelaxed inner product
    # equality without interior, so the check runs with relax_inner on.
    def build(with_const_level):
        pool = eg.VarPool()
        z = pool.variable("z")
        levels = [PreferenceLevel(objective=(z - 1) ** 2)]
        if with_const_level:
            levels.append(PreferenceLevel(objective=eg.const(3.0)))
        levels.append(PreferenceLevel(objective=z * z))
        player = PlayerSpec(id=0, primal_vars=[z.payload], levels=levels,
                            innermost_inequalities=[z - 0.5])
        return GameSpec(players=[player], pool=pool)

    sol2 = drive.solve_goop(build(False))
    sol3 = drive.solve_goop(build(True), relax_inner=True)
    assert sol2.status == drive.SOLUTION_FOUND
    assert sol3.status == drive.SOLUTION_FOUND
    assert sol3.primal(0)[0] == pytest.approx(sol2.primal(0)[0], abs=1e-5)


@pytest.mark.parametrize("name,builder", ALL_TOYS)
def test_bilevel_toys_against_analytic_solutions(name, builder):
    game, expected = builder()
    sol = drive.solve_goop(game)
    assert sol.status == drive.SOLUTION_FOUND, (name, sol.message)
    for pid, want in expected.items():
        assert sol.primal(pid) == pytest.approx(want, abs=2e-6), name
