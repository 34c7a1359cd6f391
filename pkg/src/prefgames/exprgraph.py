"""Immutable symbolic expression graphs with exact differentiation.

Every cost, constraint, and derived optimality residual in this package is
an :class:`Expr`.  Nodes are hash-consed: structurally identical
subexpressions are represented by the same object, so repeated
differentiation (gradients of gradients of gradients) shares work instead
of exploding.  Graphs are canonicalized at construction: constants fold,
sums flatten into affine combinations, repeated factors collapse into
integer powers.

Supported node kinds: variable, constant, affine combination (which
subsumes sums and negations), product, integer power, and square root.
User-level models should stay polynomial/affine so all derivatives exist
everywhere; square roots are reserved for smoothing layers that keep the
argument away from zero.

`compile_rows` turns a list of scalar expressions into a
:class:`CompiledVectorFn` that evaluates the vector and its sparse
Jacobian with batched numpy operations.  Evaluation is deterministic:
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Node kinds.
VAR = "var"
CONST = "const"
AFFINE = "affine"
PROD = "prod"
POW = "pow"
SQRT = "sqrt"

# Variable roles.  Multipliers induced by KKT transcription keep the dual
# roles even though they later become ordinary unknowns of the outer system.
PRIMAL = "primal"
DUAL_EQ = "dual-eq"
DUAL_INEQ = "dual-ineq"
SLACK = "slack"
SHARED_DUAL = "shared-dual"
PARAMETER = "parameter"


class UnknownVariableError(ValueError):
    """An expression references a variable outside the compiled layout."""


@dataclass(frozen=True)
class VarId:
    """Identity of one scalar decision variable or runtime parameter.

    index is dense (0..n-1) within one pool; name is the unique semantic
    tag ("p0.x[3]", "p1.L2.lam[4]", ...).
    """

    index: int
    name: str
    role: str = PRIMAL

    def __repr__(self):
        return f"VarId({self.index}, {self.name!r}, {self.role})"


class VarPool:
    """Allocator for VarIds with dense indices and unique names."""

    def __init__(self):
        self.ids: list[VarId] = []
        self._by_name: dict[str, VarId] = {}
        self._namespaces = 0

    def __len__(self):
        return len(self.ids)

    def namespace(self) -> str:
        """Fresh prefix so repeated transcriptions never collide on names."""
        ns = f"t{self._namespaces}"
        self._namespaces += 1
        return ns

    def new_id(self, name: str, role: str = PRIMAL) -> VarId:
        if name in self._by_name:
            raise ValueError(f"variable name {name!r} already registered")
        vid = VarId(len(self.ids), name, role)
        self.ids.append(vid)
        self._by_name[name] = vid
        return vid

    def variable(self, name: str, role: str = PRIMAL) -> "Expr":
        return var(self.new_id(name, role))

    def contains(self, vid: VarId) -> bool:
        return 0 <= vid.index < len(self.ids) and self.ids[vid.index] == vid


class Expr:
    """One node of a canonicalized expression graph.  Do not mutate."""

    __slots__ = ("kind", "payload", "children", "coeffs", "uid", "vmask")

    def __init__(self, kind, payload, children, coeffs, uid, vmask):
        self.kind = kind
        self.payload = payload
        self.children = children
        self.coeffs = coeffs  # AFFINE only: per-child coefficients
        self.uid = uid
        self.vmask = vmask

    # Arithmetic sugar; numbers are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Expr):
            if other.kind != CONST:
                raise TypeError("division only by constants; keep models polynomial")
            other = other.payload
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, n):
        return pow_int(self, n)

    def is_const(self, value=None):
        return self.kind == CONST and (value is None or self.payload == value)

    def __repr__(self):
        return f"Expr<{to_str(self)}>"


# Global intern table.  Construction is single-threaded; evaluation of the
# resulting immutable graphs is safe to share.
_INTERN: dict[tuple, Expr] = {}
_DIFF_CACHE: dict[tuple, Expr] = {}
_UID = [0]


def _intern(kind, payload, children=(), coeffs=()):
    key = (kind, payload, coeffs, tuple(c.uid for c in children))
    node = _INTERN.get(key)
    if node is not None:
        return node
    vmask = 0
    for c in children:
        vmask |= c.vmask
    if kind == VAR:
        vmask = 1 << payload.index
    _UID[0] += 1
    node = Expr(kind, payload, children, coeffs, _UID[0], vmask)
    _INTERN[key] = node
    return node


def reset_cache():
    """Drop interned nodes and derivative memos (test hygiene only)."""
    _INTERN.clear()
    _DIFF_CACHE.clear()


def var(vid: VarId) -> Expr:
    return _intern(VAR, vid)


def const(value) -> Expr:
    value = float(value)
    if math.isnan(value) or math.isinf(value):
        raise ValueError(f"non-finite constant {value}")
    if value == 0.0:
        value = 0.0  # normalize -0.0
    return _intern(CONST, value)


ZERO = None  # set after const is defined
ONE = None


def _lift(x):
    return x if isinstance(x, Expr) else const(x)


def _make_affine(c0: float, items) -> Expr:
    """items: iterable of (coeff, Expr) with non-AFFINE, non-CONST exprs."""
    acc: dict[int, list] = {}
    for coeff, e in items:
        if coeff == 0.0:
            continue
        slot = acc.get(e.uid)
        if slot is None:
            acc[e.uid] = [coeff, e]
        else:
            slot[0] += coeff
    terms = [(c, e) for c, e in acc.values() if c != 0.0]
    if not terms:
        return const(c0)
    terms.sort(key=lambda t: t[1].uid)
    if c0 == 0.0 and len(terms) == 1 and terms[0][0] == 1.0:
        return terms[0][1]
    children = tuple(e for _, e in terms)
    coeffs = tuple(float(c) for c, _ in terms)
    return _intern(AFFINE, float(c0), children, coeffs)


def _collect_affine(c0, items, coeff, e):
    """Fold one summand (coeff * e) into the running affine accumulator."""
    if e.kind == CONST:
        return c0 + coeff * e.payload
    if e.kind == AFFINE:
        c0 += coeff * e.payload
        for c, child in zip(e.coeffs, e.children):
            items.append((coeff * c, child))
        return c0
    items.append((coeff, e))
    return c0


def add(*terms) -> Expr:
    """Sum of expressions/numbers, flattened and constant-folded."""
    c0 = 0.0
    items: list = []
    for t in terms:
        c0 = _collect_affine(c0, items, 1.0, _lift(t))
    return _make_affine(c0, items)


def scale(e: Expr, c) -> Expr:
    c = float(c)
    items: list = []
    c0 = _collect_affine(0.0, items, c, _lift(e))
    return _make_affine(c0, items)


def weighted_sum(pairs, offset=0.0) -> Expr:
    """Affine combination offset + sum(c_i * e_i) built in one pass."""
    c0 = float(offset)
    items: list = []
    for c, e in pairs:
        c0 = _collect_affine(c0, items, float(c), _lift(e))
    return _make_affine(c0, items)


def _factor_items(e, coeff, acc):
    """Fold one factor into {base_uid: [base, exponent]}, scaling coeff."""
    if e.kind == CONST:
        return coeff * e.payload
    if e.kind == AFFINE and e.payload == 0.0 and len(e.children) == 1:
        coeff *= e.coeffs[0]
        e = e.children[0]
    if e.kind == PROD:
        for f in e.children:
            coeff = _factor_items(f, coeff, acc)
        return coeff
    if e.kind == POW:
        base, exp = e.children[0], e.payload
    else:
        base, exp = e, 1
    slot = acc.get(base.uid)
    if slot is None:
        acc[base.uid] = [base, exp]
    else:
        slot[1] += exp
    return coeff


def mul(*factors) -> Expr:
    """Product with constants folded out and repeated factors merged."""
    work = [_lift(f) for f in factors]
    coeff = 1.0
    while True:
        acc: dict[int, list] = {}
        for f in work:
            coeff = _factor_items(f, coeff, acc)
        if coeff == 0.0:
            return const(0.0)
        parts, dirty = [], False
        for base, exp in acc.values():
            if exp == 0:
                continue
            p = base if exp == 1 else pow_int(base, exp)
            # pow_int can fold (sqrt(u)**2 -> u, (x*y)**2 -> x^2*y^2); folded
            # parts must re-enter factor collection.
            dirty = dirty or (exp != 1 and p.kind != POW)
            parts.append(p)
        if not dirty:
            break
        work = parts
    if not parts:
        return const(coeff)
    if len(parts) == 1:
        out = parts[0]
    else:
        parts.sort(key=lambda p: p.uid)
        out = _intern(PROD, None, tuple(parts))
    return out if coeff == 1.0 else scale(out, coeff)


def pow_int(e: Expr, n) -> Expr:
    if not isinstance(n, (int, np.integer)):
        raise TypeError("exponent must be an integer")
    n = int(n)
    e = _lift(e)
    if n == 0:
        return const(1.0)
    if n == 1:
        return e
    if e.kind == CONST:
        if e.payload == 0.0 and n < 0:
            raise ZeroDivisionError("0 raised to a negative power")
        return const(e.payload ** n)
    if e.kind == AFFINE and e.payload == 0.0 and len(e.children) == 1:
        return scale(pow_int(e.children[0], n), e.coeffs[0] ** n)
    if e.kind == POW:
        return pow_int(e.children[0], e.payload * n)
    if e.kind == SQRT and n % 2 == 0:
        return pow_int(e.children[0], n // 2)
    if e.kind == PROD:
        return mul(*[pow_int(f, n) for f in e.children])
    return _intern(POW, n, (e,))


def sqrt(e: Expr) -> Expr:
    """Square root node.  Only smoothing layers should introduce these."""
    e = _lift(e)
    if e.kind == CONST:
        if e.payload < 0.0:
            raise ValueError("square root of a negative constant")
        return const(math.sqrt(e.payload))
    return _intern(SQRT, None, (e,))


def differentiate(e: Expr, v: VarId) -> Expr:
    """Exact symbolic derivative d(e)/d(v), canonicalized."""
    if not (e.vmask >> v.index) & 1:
        return const(0.0)
    key = (e.uid, v)
    hit = _DIFF_CACHE.get(key)
    if hit is not None:
        return hit
    k = e.kind
    if k == VAR:
        out = const(1.0) if e.payload == v else const(0.0)
    elif k == AFFINE:
        out = weighted_sum(
            (c, differentiate(child, v))
            for c, child in zip(e.coeffs, e.children)
            if (child.vmask >> v.index) & 1
        )
    elif k == PROD:
        parts = []
        for i, child in enumerate(e.children):
            if not (child.vmask >> v.index) & 1:
                continue
            rest = e.children[:i] + e.children[i + 1:]
            parts.append(mul(differentiate(child, v), *rest))
        out = add(*parts)
    elif k == POW:
        base, n = e.children[0], e.payload
        out = scale(mul(pow_int(base, n - 1), differentiate(base, v)), n)
    elif k == SQRT:
        base = e.children[0]
        out = scale(mul(differentiate(base, v), pow_int(e, -1)), 0.5)
    else:  # CONST; unreachable because vmask is 0
        out = const(0.0)
    _DIFF_CACHE[key] = out
    return out


def gradient(e: Expr, vids) -> list[Expr]:
    return [differentiate(e, v) for v in vids]


def variables_in(e: Expr) -> list[VarId]:
    """All VarIds referenced by e, sorted by (index, name)."""
    seen = set()
    out = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if node.uid in seen:
            continue
        seen.add(node.uid)
        if node.kind == VAR:
            out.add(node.payload)
        else:
            stack.extend(node.children)
    return sorted(out, key=lambda v: (v.index, v.name))


def evaluate(e: Expr, values: dict[VarId, float]) -> float:
    """Slow-path recursive evaluation for tests and small expressions."""
    memo: dict[int, float] = {}

    def rec(node):
        got = memo.get(node.uid)
        if got is not None:
            return got
        k = node.kind
        if k == CONST:
            r = node.payload
        elif k == VAR:
            try:
                r = float(values[node.payload])
            except KeyError:
                raise UnknownVariableError(f"no value for {node.payload.name}")
        elif k == AFFINE:
            r = node.payload + sum(c * rec(ch) for c, ch in zip(node.coeffs, node.children))
        elif k == PROD:
            r = 1.0
            for ch in node.children:
                r *= rec(ch)
        elif k == POW:
            r = rec(node.children[0]) ** node.payload
        else:
            r = math.sqrt(rec(node.children[0]))
        memo[node.uid] = r
        return r

    return rec(e)


def to_str(e: Expr) -> str:
    """Readable rendering, mainly for debug dumps."""
    k = e.kind
    if k == CONST:
        return repr(e.payload)
    if k == VAR:
        return e.payload.name
    if k == AFFINE:
        bits = [] if e.payload == 0.0 else [repr(e.payload)]
        for c, ch in zip(e.coeffs, e.children):
            s = to_str(ch)
            if ch.kind in (AFFINE,):
                s = f"({s})"
            bits.append(s if c == 1.0 else f"{c!r}*{s}")
        return " + ".join(bits).replace("+ -", "- ")
    if k == PROD:
        return "*".join(
            f"({to_str(ch)})" if ch.kind == AFFINE else to_str(ch) for ch in e.children
        )
    if k == POW:
        base = to_str(e.children[0])
        if e.children[0].kind in (AFFINE, PROD):
            base = f"({base})"
        return f"{base}^{e.payload}"
    return f"sqrt({to_str(e.children[0])})"


# ----------------------------------------------------------------------------
# Compilation to a batched numpy evaluator.


class _AffineStep:
    __slots__ = ("matrix", "offset", "out")

    def __init__(self, matrix, offset, out):
        self.matrix = matrix
        self.offset = offset
        self.out = out

    def run(self, w):
        w[self.out] = self.matrix.dot(w) + self.offset


class _MulStep:
    __slots__ = ("out", "a", "b")

    def __init__(self, out, a, b):
        self.out = out
        self.a = a
        self.b = b

    def run(self, w):
        w[self.out] = w[self.a] * w[self.b]


class _PowStep:
    __slots__ = ("exponent", "out", "a")

    def __init__(self, exponent, out, a):
        self.exponent = exponent
        self.out = out
        self.a = a

    def run(self, w):
        w[self.out] = w[self.a] ** self.exponent


class _SqrtStep:
    __slots__ = ("out", "a")

    def __init__(self, out, a):
        self.out = out
        self.a = a

    def run(self, w):
        w[self.out] = np.sqrt(w[self.a])


class CompiledVectorFn:
    """Vector function + sparse Jacobian compiled from expression rows.

    The Jacobian pattern is fixed at compile time and is a superset of the
    true nonzero set at every point; entries outside it are exactly zero.
    """

    def __init__(self, layout, steps, template, in_slots, in_positions,
                 out_slots, jac_pattern, jac_slots, n_rows, n_jac_cols):
        self.layout = list(layout)
        self.input_arity = len(layout)
        self.output_arity = n_rows
        self._steps = steps
        self._template = template
        self._in_slots = in_slots
        self._in_positions = in_positions
        self._out_slots = out_slots
        self.jacobian_pattern = jac_pattern  # sorted list of (row, col)
        self._jac_slots = jac_slots
        rows = np.array([r for r, _ in jac_pattern], dtype=np.intp)
        cols = np.array([c for _, c in jac_pattern], dtype=np.intp)
        self._jac_csr = sp.csr_matrix(
            (np.ones(len(jac_pattern)), (rows, cols)),
            shape=(n_rows, n_jac_cols),
        )
        self._jac_csr.sort_indices()
        # Permutation from pattern order (row, col sorted) to csr data order.
        order = sp.csr_matrix(
            (np.arange(len(jac_pattern), dtype=np.intp), (rows, cols)),
            shape=(n_rows, self.input_arity),
        )
        order.sort_indices()
        self._jac_perm = order.data.astype(np.intp) if len(jac_pattern) else np.zeros(0, np.intp)

    def eval(self, point):
        """Evaluate the rows and Jacobian at `point` (length = input arity)."""
        point = np.asarray(point, dtype=float)
        if point.shape != (self.input_arity,):
            raise ValueError(
                f"point has shape {point.shape}, expected ({self.input_arity},)"
            )
        w = self._template.copy()
        if len(self._in_slots):
            w[self._in_slots] = point[self._in_positions]
        for step in self._steps:
            step.run(w)
        values = w[self._out_slots].copy() if len(self._out_slots) else np.zeros(0)
        data = w[self._jac_slots][self._jac_perm] if len(self._jac_slots) else np.zeros(0)
        jac = sp.csr_matrix(
            (data, self._jac_csr.indices, self._jac_csr.indptr),
            shape=self._jac_csr.shape,
        )
        return values, jac

    __call__ = eval


def compile_rows(rows, layout, wrt=None) -> CompiledVectorFn:
    """Compile scalar expression rows over a variable layout.

    wrt selects the Jacobian columns, in wrt order (defaults to the full
    layout); extra layout entries such as runtime parameters can be
    excluded from differentiation by passing the shorter list.
    """
    rows = list(rows)
    layout = list(layout)
    if len(set(layout)) != len(layout):
        raise ValueError("layout contains duplicate variables")
    wrt = layout if wrt is None else list(wrt)
    col_of = {v: j for j, v in enumerate(layout)}
    jcol_of = {v: j for j, v in enumerate(wrt)}

    # Jacobian entries: differentiate only where the support mask allows.
    jac_entries = []  # (row, col, expr)
    for i, r in enumerate(rows):
        for v in wrt:
            if not (r.vmask >> v.index) & 1:
                continue
            d = differentiate(r, v)
            if not d.is_const(0.0):
                jac_entries.append((i, jcol_of[v], d))

    roots = rows + [d for _, _, d in jac_entries]

    # Deterministic postorder over the union graph.
    slot_of: dict[int, int] = {}
    nodes: list[Expr] = []
    for root in roots:
        if root.uid in slot_of:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node.uid in slot_of:
                continue
            if expanded:
                slot_of[node.uid] = len(nodes)
                nodes.append(node)
            else:
                stack.append((node, True))
                for ch in reversed(node.children):
                    if ch.uid not in slot_of:
                        stack.append((ch, False))

    level = {}
    for node in nodes:
        if node.children:
            level[node.uid] = 1 + max(level[ch.uid] for ch in node.children)
        else:
            level[node.uid] = 0

    # Check every referenced variable is in the layout and map input slots.
    in_slots, in_positions = [], []
    for node in nodes:
        if node.kind == VAR:
            if node.payload not in col_of:
                raise UnknownVariableError(
                    f"variable {node.payload.name} is not in the layout"
                )
            in_slots.append(slot_of[node.uid])
            in_positions.append(col_of[node.payload])

    n_slots = len(nodes)
    template = np.zeros(max(n_slots, 1))
    for node in nodes:
        if node.kind == CONST:
            template[slot_of[node.uid]] = node.payload

    # Emit batched ops ordered by (level, chain position).  n-ary products
    # become binary chains through temporary slots.
    ops = []  # (level, sub, kind_rank, key, out, a, b)
    extra = [n_slots]

    def temp_slot():
        s = extra[0]
        extra[0] += 1
        return s

    for node in nodes:
        lv = level[node.uid]
        k = node.kind
        if k in (VAR, CONST):
            continue
        out = slot_of[node.uid]
        if k == AFFINE:
            ops.append((lv, 0, 0, None, out, node, None))
        elif k == PROD:
            slots = [slot_of[ch.uid] for ch in node.children]
            a = slots[0]
            for j, b in enumerate(slots[1:]):
                dest = out if j == len(slots) - 2 else temp_slot()
                ops.append((lv, j, 1, None, dest, a, b))
                a = dest
        elif k == POW:
            ops.append((lv, 0, 2, node.payload, out, slot_of[node.children[0].uid], None))
        elif k == SQRT:
            ops.append((lv, 0, 3, None, out, slot_of[node.children[0].uid], None))

    if extra[0] > n_slots:
        template = np.concatenate([template, np.zeros(extra[0] - n_slots)])

    steps = []
    ops.sort(key=lambda t: (t[0], t[1], t[2], 0 if t[3] is None else t[3]))
    i = 0
    while i < len(ops):
        lv, sub, rank, key = ops[i][:4]
        j = i
        while j < len(ops) and ops[j][:4] == (lv, sub, rank, key):
            j += 1
        batch = ops[i:j]
        if rank == 0:
            m = len(batch)
            data, indices, indptr, offs, outs = [], [], [0], [], []
            for _, _, _, _, out, node, _ in batch:
                for c, ch in zip(node.coeffs, node.children):
                    data.append(c)
                    indices.append(slot_of[ch.uid])
                indptr.append(len(data))
                offs.append(node.payload)
                outs.append(out)
            mat = sp.csr_matrix(
                (np.array(data), np.array(indices, np.intp), np.array(indptr, np.intp)),
                shape=(m, len(template)),
            )
            steps.append(_AffineStep(mat, np.array(offs), np.array(outs, np.intp)))
        elif rank == 1:
            steps.append(_MulStep(
                np.array([b[4] for b in batch], np.intp),
                np.array([b[5] for b in batch], np.intp),
                np.array([b[6] for b in batch], np.intp),
            ))
        elif rank == 2:
            steps.append(_PowStep(
                key,
                np.array([b[4] for b in batch], np.intp),
                np.array([b[5] for b in batch], np.intp),
            ))
        else:
            steps.append(_SqrtStep(
                np.array([b[4] for b in batch], np.intp),
                np.array([b[5] for b in batch], np.intp),
            ))
        i = j

    out_slots = np.array([slot_of[r.uid] for r in rows], dtype=np.intp)
    jac_pattern = sorted((r, c) for r, c, _ in jac_entries)
    by_rc = {(r, c): d for r, c, d in jac_entries}
    jac_slots = np.array([slot_of[by_rc[rc].uid] for rc in jac_pattern], dtype=np.intp)

    return CompiledVectorFn(
        layout, steps, template,
        np.array(in_slots, np.intp), np.array(in_positions, np.intp),
        out_slots, jac_pattern, jac_slots, len(rows), len(wrt),
    )
