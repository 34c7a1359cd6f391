import numpy as np
import pytest

from prefgames import drive
from prefgames import exprgraph as eg
from prefgames.problem import (GameSpec, PlayerSpec, PreferenceLevel,
                               smooth_max, validate)


def _single_var_game(levels_for, extra=None):
    pool = eg.VarPool()
    z = pool.variable("z")
    player = PlayerSpec(id=0, primal_vars=[z.payload], levels=levels_for(z, pool))
    return GameSpec(players=[player], pool=pool), z


def test_smooth_max_requires_terms():
    pool = eg.VarPool()
    lvl = PreferenceLevel(objective=eg.const(0.0))
    with pytest.raises(ValueError):
        smooth_max(lvl, [], pool)


def test_smooth_max_structure():
    pool = eg.VarPool()
    z = pool.variable("z")
    lvl = smooth_max(PreferenceLevel(objective=eg.const(0.0)), [z - 1], pool)
    assert len(lvl.slack_ids) == 1
    assert len(lvl.inequalities) == 2  # s >= f and s >= 0
    assert lvl.max_terms and lvl.max_terms[0] is (z - 1)
    s = lvl.slack_ids[0]
    assert lvl.objective is eg.var(s)


def test_smooth_max_floor_single_term():
    # minimize max(0, z - 1) over free z: optimum 0 at any z <= 1
    def levels(z, pool):
        return [smooth_max(PreferenceLevel(objective=eg.const(0.0)), [z - 1], pool)]

    game, z = _single_var_game(levels)
    sol = drive.solve_goop(game)
    assert sol.status == drive.SOLUTION_FOUND
    assert sol.level_values[0][0] == pytest.approx(0.0, abs=1e-8)
    assert sol.primal(0)[0] <= 1.0 + 1e-8


@pytest.mark.parametrize("v_fixed,expected", [(3.0, 0.0), (1.0, 1.0)])
def test_smooth_max_inactive_and_active_term(v_fixed, expected):
    # J = max(0, 2 - v) with v pinned by an equality; slack optimum = max(0, 2-v)
    pool = eg.VarPool()
    v = pool.variable("v")
    lvl = smooth_max(PreferenceLevel(objective=eg.const(0.0)), [2.0 - v], pool)
    player = PlayerSpec(id=0, primal_vars=[v.payload], levels=[lvl],
                        innermost_equalities=[v - v_fixed])
    game = GameSpec(players=[player], pool=pool)
    sol = drive.solve_goop(game)
    assert sol.status == drive.SOLUTION_FOUND
    s_col = sol.system.column(lvl.slack_ids[0])
    assert sol.point[s_col] == pytest.approx(expected, abs=1e-8)
    assert sol.level_values[0][0] == pytest.approx(expected, abs=1e-8)


def test_smooth_max_value_matches_max_form_on_grid():
    # transformed optimal value == original max composite at fixed decisions
    pool = eg.VarPool()
    v = pool.variable("w")
    terms = [2.0 - v, v - 4.0]
    for v_fixed in np.linspace(0.0, 6.0, 7):
        expected = max(0.0, 2.0 - v_fixed) + max(0.0, v_fixed - 4.0)
        lvl = smooth_max(PreferenceLevel(objective=eg.const(0.0)), terms, pool,
                         label=f"s{v_fixed}")
        player = PlayerSpec(id=0, primal_vars=[v.payload], levels=[lvl],
                            innermost_equalities=[v - float(v_fixed)])
        game = GameSpec(players=[player], pool=pool)
        sol = drive.solve_goop(game)
        assert sol.status == drive.SOLUTION_FOUND
        got = sum(sol.point[sol.system.column(s)] for s in lvl.slack_ids)
        assert got == pytest.approx(expected, abs=1e-9)


def test_validate_well_formed():
    def levels(z, pool):
        return [PreferenceLevel(objective=(z - 1) ** 2)]

    game, _ = _single_var_game(levels)
    assert validate(game) == []


def test_validate_overlapping_vars():
    pool = eg.VarPool()
    z = pool.variable("z")
    mk = lambda pid: PlayerSpec(id=pid, primal_vars=[z.payload],
                                levels=[PreferenceLevel(objective=z * z)])
    game = GameSpec(players=[mk(0), mk(1)], pool=pool)
    diags = validate(game)
    assert any("overlapping" in d for d in diags)


def test_validate_non_scalar_objective():
    pool = eg.VarPool()
    z = pool.variable("z")
    player = PlayerSpec(id=0, primal_vars=[z.payload],
                        levels=[PreferenceLevel(objective=[z, z * z])])
    game = GameSpec(players=[player], pool=pool)
    diags = validate(game)
    assert any("non-scalar objective" in d for d in diags)


def test_validate_unregistered_variable():
    pool = eg.VarPool()
    z = pool.variable("z")
    other = eg.VarPool()
    w = other.variable("w")
    player = PlayerSpec(id=0, primal_vars=[z.payload],
                        levels=[PreferenceLevel(objective=z + w)])
    game = GameSpec(players=[player], pool=pool)
    diags = validate(game)
    assert any("unregistered" in d for d in diags)


def test_validate_order_independent():
    pool = eg.VarPool()
    z0 = pool.variable("z0")
    z1 = pool.variable("z1")
    p0 = PlayerSpec(id=0, primal_vars=[z0.payload],
                    levels=[PreferenceLevel(objective=[z0])])  # bad objective
    p1 = PlayerSpec(id=1, primal_vars=[z1.payload],
                    levels=[PreferenceLevel(objective=z1 * z1)])
    a = validate(GameSpec(players=[p0, p1], pool=pool))
    b = validate(GameSpec(players=[p1, p0], pool=pool))
    assert sorted(a) == sorted(b)
