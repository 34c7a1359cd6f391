"""N-player trajectory games with ordered (lexicographic) preferences.

Each player's problem is a nested hierarchy of objectives; the innermost
level is the most important.  The toolkit transcribes the nested levels
into their stationarity conditions, assembles all players into one mixed
complementarity system, and solves a sequence of relaxations of that
system while the relaxation parameter anneals to zero.
"""

from .exprgraph import VarId, VarPool, Expr, compile_rows, differentiate
from .problem import PreferenceLevel, PlayerSpec, GameSpec, smooth_max, validate
from .transcribe import KktBlock, MicpSystem, kkt_step, transcribe_player, relax, assemble_micp
from .mcp import McpInstance, McpResult, SolveOptions, fb_residual, solve, check_solution
from .drive import AnnealSchedule, EquilibriumSolution, solve_goop, solve_baseline
from .drive import preference_report, lexicographic_probe

__all__ = [
    "VarId", "VarPool", "Expr", "compile_rows", "differentiate",
    "PreferenceLevel", "PlayerSpec", "GameSpec", "smooth_max", "validate",
    "KktBlock", "MicpSystem", "kkt_step", "transcribe_player", "relax", "assemble_micp",
    "McpInstance", "McpResult", "SolveOptions", "fb_residual", "solve", "check_solution",
    "AnnealSchedule", "EquilibriumSolution", "solve_goop", "solve_baseline",
    "preference_report", "lexicographic_probe",
]

__version__ = "0.1.0"
