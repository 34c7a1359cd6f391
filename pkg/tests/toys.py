"""Hand-solved scalar bilevel/trilevel instances with analytic solutions.

Each builder returns (game, expected_primal) where expected_primal maps
player id to the unique lexicographic solution of the hierarchy.  All
instances are convex level by level with unique inner minimizers, so the
analytic answers below are derived by solving the innermost problem first
and substituting upward.
"""

from prefgames import exprgraph as eg
from prefgames.problem import GameSpec, PlayerSpec, PreferenceLevel


def _one_player(levels, z, pool, eqs=(), ineqs=()):
    player = PlayerSpec(id=0, primal_vars=[v.payload for v in z], levels=levels,
                        innermost_equalities=list(eqs),
                        innermost_inequalities=list(ineqs))
    return GameSpec(players=[player], pool=pool)


def toy_halfspace():
    # outer (z-1)^2, inner z^2 s.t. z >= 1/2: inner argmin is {1/2}.
    pool = eg.VarPool()
    z = pool.variable("z")
    levels = [PreferenceLevel(objective=(z - 1) ** 2),
              PreferenceLevel(objective=z * z)]
    return _one_player(levels, [z], pool, ineqs=[z - 0.5]), {0: [0.5]}


def toy_unconstrained_inner():
    # outer (z-3)^2, inner (z-1)^2 free: inner argmin {1} pins z.
    pool = eg.VarPool()
    z = pool.variable("z")
    levels = [PreferenceLevel(objective=(z - 3) ** 2),
              PreferenceLevel(objective=(z - 1) ** 2)]
    return _one_player(levels, [z], pool), {0: [1.0]}


def toy_inactive_bound():
    # outer (z-5)^2, inner z^2 s.t. z + 1 >= 0: argmin {0}, bound inactive.
    pool = eg.VarPool()
    z = pool.variable("z")
    levels = [PreferenceLevel(objective=(z - 5) ** 2),
              PreferenceLevel(objective=z * z)]
    return _one_player(levels, [z], pool, ineqs=[z + 1]), {0: [0.0]}


def toy_equality_inner():
    # inner (z1-2)^2 + z2^2 s.t. z1 + z2 = 1 -> (1.5, -0.5); outer follows.
    pool = eg.VarPool()
    z1 = pool.variable("z1")
    z2 = pool.variable("z2")
    levels = [PreferenceLevel(objective=(z1 - z2) ** 2),
              PreferenceLevel(objective=(z1 - 2) ** 2 + z2 * z2)]
    game = _one_player(levels, [z1, z2], pool, eqs=[z1 + z2 - 1])
    return game, {0: [1.5, -0.5]}


def toy_upper_bound():
    # outer (z+2)^2, inner (z-1)^2 s.t. 3 - z >= 0: argmin {1}.
    pool = eg.VarPool()
    z = pool.variable("z")
    levels = [PreferenceLevel(objective=(z + 2) ** 2),
              PreferenceLevel(objective=(z - 1) ** 2)]
    return _one_player(levels, [z], pool, ineqs=[3.0 - z]), {0: [1.0]}


def toy_three_level():
    # innermost (z-1)^2 s.t. z >= 0 -> {1}; middle (z-2)^2 inherits {1};
    # outer z^2 inherits {1}.
    pool = eg.VarPool()
    z = pool.variable("z")
    levels = [PreferenceLevel(objective=z * z),
              PreferenceLevel(objective=(z - 2) ** 2),
              PreferenceLevel(objective=(z - 1) ** 2)]
    return _one_player(levels, [z], pool, ineqs=[z]), {0: [1.0]}


ALL_TOYS = [
    ("halfspace", toy_halfspace),
    ("unconstrained-inner", toy_unconstrained_inner),
    ("inactive-bound", toy_inactive_bound),
    ("equality-inner", toy_equality_inner),
    ("upper-bound", toy_upper_bound),
    ("three-level", toy_three_level),
]
