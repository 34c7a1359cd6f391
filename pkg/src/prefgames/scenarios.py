"""Highway driving scenarios: builders, samplers, and experiment metrics.

Vehicles follow discrete double-integrator dynamics.  Each player's
hierarchy is (outermost to innermost): control effort, then goal reaching
and speed-limit obedience in the order fixed by that player's priority
mode.  Goal and speed costs are sums of max(0, .) pieces and enter the
game in slack-smoothed form; collision avoidance is a shared constraint
between every vehicle pair at every step.

The literature this reproduces leaves all numeric constants unspecified;
the defaults here are desk-scale values chosen to reproduce qualitative
behavior, and every output file records them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import exprgraph as eg
from .problem import GameSpec, PlayerSpec, PreferenceLevel, smooth_max

GOAL_OVER_SPEED = "goal-over-speed"
SPEED_OVER_GOAL = "speed-over-goal"


@dataclass
class HighwayConfig:
    n_players: int = 2
    horizon: int = 15
    dt: float = 0.2
    lane_bounds: tuple = (0.0, 4.0)
    v_min: tuple = (-1.0, -1.0)  # per axis (x, y)
    v_max: tuple = (1.0, 1.0)
    d_col: float = 0.5
    mode: str = "1d"  # "1d": state (px, vx); "2d": state (px, py, vx, vy)
    goals: list = field(default_factory=list)       # per player, one value per axis
    goal_signs: list = field(default_factory=list)  # per player per axis; +1 = undershoot
    priorities: list = field(default_factory=list)  # per player priority mode

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.lane_bounds[0] >= self.lane_bounds[1]:
            raise ValueError("lane bounds must be increasing")
        if self.d_col <= 0:
            raise ValueError("d_col must be positive")
        if self.mode not in ("1d", "2d"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.goal_signs:
            self.goal_signs = [[1.0] * self.n_axes for _ in range(self.n_players)]
        if len(self.goals) != self.n_players or len(self.priorities) != self.n_players:
            raise ValueError("need one goal and one priority per player")
        for pr in self.priorities:
            if pr not in (GOAL_OVER_SPEED, SPEED_OVER_GOAL):
                raise ValueError(f"unknown priority {pr!r}")

    @property
    def n_axes(self) -> int:
        return 1 if self.mode == "1d" else 2

    @property
    def state_dim(self) -> int:
        return 2 * self.n_axes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lane_bounds"] = list(self.lane_bounds)
        d["v_min"] = list(self.v_min)
        d["v_max"] = list(self.v_max)
        return d


@dataclass
class InitialState:
    """Per-player start states: (px, vx) in 1d, (px, py, vx, vy) in 2d."""

    states: list

    def positions(self, n_axes: int) -> np.ndarray:
        return np.array([s[:n_axes] for s in self.states], dtype=float)


def check_initial_state(cfg: HighwayConfig, x0: InitialState) -> list:
    """Invariant diagnostics: finite, inside lane, no initial collision."""
    diags = []
    if len(x0.states) != cfg.n_players:
        return [f"{len(x0.states)} states for {cfg.n_players} players"]
    for i, s in enumerate(x0.states):
        if len(s) != cfg.state_dim:
            diags.append(f"player {i}: state dim {len(s)} != {cfg.state_dim}")
            continue
        if not np.all(np.isfinite(s)):
            diags.append(f"player {i}: non-finite state")
        if cfg.mode == "2d" and not (cfg.lane_bounds[0] <= s[1] <= cfg.lane_bounds[1]):
            diags.append(f"player {i}: outside lane bounds")
    if not diags:
        pos = x0.positions(cfg.n_axes)
        for i in range(cfg.n_players):
            for j in range(i + 1, cfg.n_players):
                dist = float(np.linalg.norm(pos[i] - pos[j]))
                if dist < cfg.d_col:
                    diags.append(f"players {i},{j}: initial distance {dist:.3f} < d_col")
    return diags


def _dynamics_matrices(cfg: HighwayConfig):
    dt = cfg.dt
    if cfg.mode == "1d":
        A = np.array([[1.0, dt], [0.0, 1.0]])
        B = np.array([[0.5 * dt * dt], [dt]])
    else:
        A = np.array([[1.0, 0.0, dt, 0.0],
                      [0.0, 1.0, 0.0, dt],
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0]])
        B = np.array([[0.5 * dt * dt, 0.0],
                      [0.0, 0.5 * dt * dt],
                      [dt, 0.0],
                      [0.0, dt]])
    return A, B


def build_highway(cfg: HighwayConfig, x0: InitialState,
                  pool: eg.VarPool | None = None) -> GameSpec:
    """Game for one highway scenario.

    Per player: states x_1..x_T and controls u_1..u_T, dynamics rollout
    equalities from x_0, lane-bound inequalities (2d only), and the
    three-level hierarchy in the order this player's priority dictates.
    """
    diags = check_initial_state(cfg, x0)
    if diags:
        raise ValueError("infeasible initial state: " + "; ".join(diags))
    pool = pool or eg.VarPool()
    T = cfg.horizon
    A, B = _dynamics_matrices(cfg)
    sd, na = cfg.state_dim, cfg.n_axes
    state_names = ("px", "vx") if cfg.mode == "1d" else ("px", "py", "vx", "vy")
    ctrl_names = ("ax",) if cfg.mode == "1d" else ("ax", "ay")

    players = []
    states_of = {}
    for i in range(cfg.n_players):
        xs = [[pool.variable(f"p{i}.x[{t}].{nm}") for nm in state_names]
              for t in range(1, T + 1)]
        us = [[pool.variable(f"p{i}.u[{t}].{nm}") for nm in ctrl_names]
              for t in range(1, T + 1)]
        states_of[i] = xs

        eqs = []
        prev = [eg.const(v) for v in x0.states[i]]
        for t in range(T):
            for r in range(sd):
                rhs = eg.weighted_sum(
                    [(A[r, c], prev[c]) for c in range(sd)]
                    + [(B[r, c], us[t][c]) for c in range(na)])
                eqs.append(xs[t][r] - rhs)
            prev = xs[t]

        ineqs = []
        if cfg.mode == "2d":
            lo, hi = cfg.lane_bounds
            for t in range(T):
                ineqs.append(xs[t][1] - lo)
                ineqs.append(hi - xs[t][1])

        ctrl = eg.add(*[u * u for ut in us for u in ut])
        goal_terms = []
        for j in range(na):
            sign = float(cfg.goal_signs[i][j])
            goal_terms.append(sign * (eg.const(cfg.goals[i][j]) - xs[T - 1][j]))
        obey_terms = []
        for t in range(T):
            for j in range(na):
                v = xs[t][na + j]
                obey_terms.append(eg.const(cfg.v_min[j]) - v)
                obey_terms.append(v - eg.const(cfg.v_max[j]))

        goal_level = smooth_max(PreferenceLevel(objective=eg.const(0.0)),
                                goal_terms, pool, label=f"p{i}.goal.s")
        obey_level = smooth_max(PreferenceLevel(objective=eg.const(0.0)),
                                obey_terms, pool, label=f"p{i}.obey.s")
        if cfg.priorities[i] == GOAL_OVER_SPEED:
            levels = [PreferenceLevel(objective=ctrl), obey_level, goal_level]
        else:
            levels = [PreferenceLevel(objective=ctrl), goal_level, obey_level]

        primal = [v.payload for row in xs for v in row] + \
                 [v.payload for row in us for v in row]
        players.append(PlayerSpec(
            id=i, primal_vars=primal, levels=levels,
            innermost_equalities=eqs, innermost_inequalities=ineqs,
        ))

    shared = []
    for i in range(cfg.n_players):
        for j in range(i + 1, cfg.n_players):
            for t in range(T):
                gap = eg.add(*[
                    (states_of[i][t][a] - states_of[j][t][a]) ** 2 for a in range(na)])
                shared.append(gap - cfg.d_col ** 2)

    return GameSpec(players=players, shared_inequalities=shared, pool=pool)


def sample_initial_states(bases, count_per_base: int, radius=(0.5, 0.2),
                          seed: int = 0, cfg: HighwayConfig | None = None) -> list:
    """Uniform perturbations around base states, bases included.

    Each base contributes `count_per_base` scenarios; the first is the
    base itself (a radius-0 sample), the rest perturb positions and
    velocities by the two radii.  Invalid draws (lane violation or initial
    collision, judged against `cfg`) are redrawn up to 100 times.
    Deterministic for a fixed seed.
    """
    if np.isscalar(radius):
        radius = (float(radius), float(radius))
    rng = np.random.default_rng(seed)
    out = []
    for b_idx, base in enumerate(bases):
        out.append(base)
        arr = np.array(base.states, dtype=float)
        na = arr.shape[1] // 2
        widths = np.array([radius[0]] * na + [radius[1]] * na)
        for _ in range(count_per_base - 1):
            for attempt in range(100):
                pert = rng.uniform(-widths, widths, size=arr.shape)
                cand = InitialState(states=(arr + pert).tolist())
                if cfg is None or not check_initial_state(cfg, cand):
                    out.append(cand)
                    break
            else:
                raise ValueError(
                    f"base {b_idx}: no valid sample in 100 tries (radius {radius})")
    return out


def performance_gap(goop_sol, base_sol, level: int) -> float:
    """Sum over players of (baseline minus hierarchy) value at one level."""
    gv, bv = goop_sol.level_values, base_sol.level_values
    if set(gv) != set(bv) or any(len(gv[i]) != len(bv[i]) for i in gv):
        raise ValueError("mismatched games")
    if not all(1 <= level <= len(v) for v in gv.values()):
        raise ValueError(f"level {level} out of range")
    return float(sum(bv[i][level - 1] - gv[i][level - 1] for i in gv))


def extract_trajectories(cfg: HighwayConfig, x0: InitialState, solution) -> dict:
    """Per-player state/control time series from a solution, t = 0..T."""
    T, sd, na = cfg.horizon, cfg.state_dim, cfg.n_axes
    state_names = ("px", "vx") if cfg.mode == "1d" else ("px", "py", "vx", "vy")
    ctrl_names = ("ax",) if cfg.mode == "1d" else ("ax", "ay")
    out = {}
    for i in range(cfg.n_players):
        z = solution.primal(i)
        states = z[:T * sd].reshape(T, sd)
        controls = z[T * sd:].reshape(T, na)
        rec = {"t": [round(t * cfg.dt, 10) for t in range(T + 1)]}
        for c, nm in enumerate(state_names):
            rec[nm] = [float(x0.states[i][c])] + [float(v) for v in states[:, c]]
        for c, nm in enumerate(ctrl_names):
            rec[nm] = [float(v) for v in controls[:, c]]
        out[i] = rec
    return out


def pairwise_distances(cfg: HighwayConfig, trajectories: dict) -> dict:
    """Inter-vehicle distance series per unordered pair, t = 0..T."""
    na = cfg.n_axes
    keys = ("px",) if na == 1 else ("px", "py")
    out = {}
    for i in range(cfg.n_players):
        for j in range(i + 1, cfg.n_players):
            pi = np.array([trajectories[i][k] for k in keys])
            pj = np.array([trajectories[j][k] for k in keys])
            out[(i, j)] = np.sqrt(np.sum((pi - pj) ** 2, axis=0)).tolist()
    return out


# ----------------------------------------------------------------------------
# Canned scenarios.


def running_example_1d() -> tuple:
    """Two vehicles on a line: a goal-driven one closing in on a
    speed-limit-driven one.  Exhibits the temporary-speeding negotiation."""
    cfg = HighwayConfig(
        n_players=2, horizon=15, dt=0.2, mode="1d",
        v_min=(-1.0,), v_max=(1.0,), d_col=0.5,
        goals=[[3.2], [3.2]],
        priorities=[GOAL_OVER_SPEED, SPEED_OVER_GOAL],
    )
    x0 = InitialState(states=[[0.0, 1.4], [0.75, 0.8]])
    return cfg, x0


def ambulance_bases(n_bases: int = 10, seed: int = 7, horizon: int = 10,
                    mode: str = "2d") -> list:
    """Conflict scenarios: a trailing ambulance whose goal is unreachable
    at the speed limit, with slower cars in its path.

    Returns (config, initial state) pairs; each base gets its own goals so
    the ambulance goal stays out of reach from its start."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_bases):
        dt, T = 0.2, horizon
        if mode == "2d":
            amb_y = 1.0 + 0.4 * rng.uniform(-1, 1)
            car1_y = amb_y + 0.55 + 0.2 * rng.uniform(0, 1)
            car2_y = max(amb_y - 0.55 - 0.2 * rng.uniform(0, 1), 0.2)
            amb = [0.0, amb_y, 0.9 + 0.2 * rng.uniform(0, 1), 0.0]
            car1 = [0.65 + 0.15 * rng.uniform(0, 1), car1_y, 0.55 + 0.15 * rng.uniform(0, 1), 0.0]
            car2 = [0.65 + 0.15 * rng.uniform(0, 1), car2_y, 0.55 + 0.15 * rng.uniform(0, 1), 0.0]
            horizon_reach = amb[0] + 1.0 * T * dt  # distance cap at the speed limit
            goals = [[horizon_reach + 0.6 + 0.3 * rng.uniform(0, 1), amb_y],
                     [car1[0] + 0.45 * T * dt, car1_y],
                     [car2[0] + 0.45 * T * dt, car2_y]]
            cfg = HighwayConfig(
                n_players=3, horizon=T, dt=dt, mode="2d",
                lane_bounds=(0.0, 4.0), v_min=(-1.0, -0.6), v_max=(1.0, 0.6),
                d_col=0.5, goals=goals,
                priorities=[GOAL_OVER_SPEED, SPEED_OVER_GOAL, SPEED_OVER_GOAL],
            )
            x0 = InitialState(states=[amb, car1, car2])
        else:
            amb = [0.0, 0.9 + 0.2 * rng.uniform(0, 1)]
            car1 = [0.7 + 0.1 * rng.uniform(0, 1), 0.5 + 0.2 * rng.uniform(0, 1)]
            car2 = [car1[0] + 0.7 + 0.1 * rng.uniform(0, 1), 0.5 + 0.2 * rng.uniform(0, 1)]
            horizon_reach = amb[0] + 1.0 * T * dt
            goals = [[horizon_reach + 0.6 + 0.3 * rng.uniform(0, 1)],
                     [car1[0] + 0.45 * T * dt],
                     [car2[0] + 0.45 * T * dt]]
            cfg = HighwayConfig(
                n_players=3, horizon=T, dt=dt, mode="1d",
                v_min=(-1.0,), v_max=(1.0,), d_col=0.5, goals=goals,
                priorities=[GOAL_OVER_SPEED, SPEED_OVER_GOAL, SPEED_OVER_GOAL],
            )
            x0 = InitialState(states=[amb, car1, car2])
        out.append((cfg, x0))
    return out


# ----------------------------------------------------------------------------
# Scenario files.


def save_scenario(path, cfg: HighwayConfig, x0: InitialState) -> None:
    payload = {
        "config": {
            "mode": cfg.mode, "horizon": cfg.horizon, "dt": cfg.dt,
            "lane_bounds": list(cfg.lane_bounds),
            "v_min": list(cfg.v_min), "v_max": list(cfg.v_max),
            "d_col": cfg.d_col,
            "players": [
                {"priority": cfg.priorities[i], "goal": list(cfg.goals[i]),
                 "goal_signs": list(cfg.goal_signs[i])}
                for i in range(cfg.n_players)
            ],
        },
        "initial_state": [list(map(float, s)) for s in x0.states],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path):
    with open(path) as fh:
        payload = json.load(fh)
    try:
        c = payload["config"]
        players = c["players"]
        cfg = HighwayConfig(
            n_players=len(players),
            horizon=int(c["horizon"]), dt=float(c["dt"]),
            lane_bounds=tuple(c.get("lane_bounds", (0.0, 4.0))),
            v_min=tuple(c["v_min"]), v_max=tuple(c["v_max"]),
            d_col=float(c["d_col"]), mode=c["mode"],
            goals=[p["goal"] for p in players],
            goal_signs=[p.get("goal_signs", [1.0] * (1 if c["mode"] == "1d" else 2))
                        for p in players],
            priorities=[p["priority"] for p in players],
        )
        x0 = InitialState(states=payload["initial_state"])
    except KeyError as e:
        raise ValueError(f"scenario file {path}: missing key {e}") from None
    diags = check_initial_state(cfg, x0)
    if diags:
        raise ValueError(f"scenario file {path}: " + "; ".join(diags))
    return cfg, x0
