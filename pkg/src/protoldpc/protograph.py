"""Base graphs, Z-lifting, rate matching and systematic encoding.

The lifted code keeps its edges in *bundle-major* order: edge ``t * Z + j``
is the ``j``-th copy of base entry ``t``.  The edge-type of an edge is
therefore ``edge // Z``, and any per-edge-type array of width ``E_b`` can be
broadcast over a ``(..., E_b, Z)`` view of per-edge messages without ever
materialising per-edge parameters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class BaseGraphError(ValueError):
    """Raised for malformed base-graph files or invalid base-graph data."""


@dataclass(frozen=True, eq=False)
class BaseGraph:
    """Prototype parity structure with per-lifting-set circulant shifts.

    Attributes
    ----------
    m_b, n_b : int
        Number of base check nodes (rows) and variable nodes (columns).
    rows, cols : ndarray of int, shape (E_b,)
        Position of every non-zero base entry, in row-major order.
    shifts : ndarray of int, shape (E_b, L)
        Shift coefficient of every entry for each of the ``L`` lifting sets.
    lifting_sets : tuple of tuple of int
        Lifting sizes belonging to each set (may be empty for toy graphs).
    punctured_cols : tuple of int
        Columns whose lifted bits are never transmitted.
    """

    m_b: int
    n_b: int
    rows: np.ndarray
    cols: np.ndarray
    shifts: np.ndarray
    lifting_sets: tuple = ()
    punctured_cols: tuple = ()
    name: str = "base"

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        shifts = np.asarray(self.shifts, dtype=np.int64)
        if shifts.ndim == 1:
            shifts = shifts[:, None]
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "shifts", shifts)
        object.__setattr__(self, "lifting_sets", tuple(tuple(s) for s in self.lifting_sets))
        object.__setattr__(self, "punctured_cols", tuple(int(c) for c in self.punctured_cols))
        for a in (rows, cols, shifts):
            a.setflags(write=False)
        if not (rows.shape == cols.shape and shifts.shape[0] == rows.shape[0]):
            raise BaseGraphError("rows, cols and shifts must describe the same entries")
        if rows.size and (rows.min() < 0 or rows.max() >= self.m_b):
            raise BaseGraphError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= self.n_b):
            raise BaseGraphError("column index out of range")
        if np.any(shifts < 0):
            raise BaseGraphError("shift coefficients must be non-negative")
        keys = rows * self.n_b + cols
        if np.unique(keys).size != keys.size:
            raise BaseGraphError("duplicate entry")
        if np.any(np.diff(keys) < 0):
            raise BaseGraphError("entries must be listed in row-major order")
        if any(c < 0 or c >= self.n_b for c in self.punctured_cols):
            raise BaseGraphError("punctured column out of range")

    @property
    def k_b(self) -> int:
        return self.n_b - self.m_b

    @property
    def num_entries(self) -> int:
        """Number of base edges (edge-types), ``E_b``."""
        return int(self.rows.size)

    @property
    def num_lifting_sets(self) -> int:
        return int(self.shifts.shape[1])

    @cached_property
    def hash(self) -> str:
        """SHA-256 over the canonical content; guards parameter files."""
        h = hashlib.sha256()
        h.update(f"{self.m_b} {self.n_b} {self.punctured_cols}".encode())
        h.update(np.ascontiguousarray(self.rows).tobytes())
        h.update(np.ascontiguousarray(self.cols).tobytes())
        h.update(np.ascontiguousarray(self.shifts).tobytes())
        return h.hexdigest()[:16]

    def dense(self, lifting_set: int = 0, Z: int | None = None) -> np.ndarray:
        """Base matrix with ``-1`` for zero blocks and shifts elsewhere."""
        out = -np.ones((self.m_b, self.n_b), dtype=np.int64)
        s = self.shifts[:, lifting_set]
        out[self.rows, self.cols] = s if Z is None else s % Z
        return out

    def lifting_set_of(self, Z: int) -> int | None:
        for i, zs in enumerate(self.lifting_sets):
            if Z in zs:
                return i
        return None

    def column_degrees(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_b)

    def row_degrees(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.m_b)


def parse_base_graph(text: str, name: str = "base") -> BaseGraph:
    """Parse the base-graph text format (see ``load_base_graph``)."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body))
    if len(lines) < 2:
        raise BaseGraphError("base-graph file needs a header line and a punctured-column line")

    lineno, body = lines[0]
    try:
        m_b, n_b, n_sets = (int(v) for v in body.split())
    except ValueError:
        raise BaseGraphError(f"line {lineno}: expected '<m_b> <n_b> <num_lifting_sets>'") from None
    if m_b <= 0 or n_b <= m_b or n_sets <= 0:
        raise BaseGraphError(f"line {lineno}: need 0 < m_b < n_b and num_lifting_sets >= 1")

    lineno, body = lines[1]
    if body == "-":
        punctured = ()
    else:
        try:
            punctured = tuple(int(v) for v in body.split())
        except ValueError:
            raise BaseGraphError(f"line {lineno}: malformed punctured-column list") from None
    for c in punctured:
        if not 0 <= c < n_b:
            raise BaseGraphError(f"line {lineno}: punctured column {c} out of range")

    sets: dict[int, tuple] = {}
    rows, cols, shifts = [], [], []
    seen: dict[tuple, int] = {}
    for lineno, body in lines[2:]:
        fields = body.split()
        if fields[0] == "liftset":
            try:
                idx = int(fields[1])
                sizes = tuple(int(v) for v in fields[2:])
            except (ValueError, IndexError):
                raise BaseGraphError(f"line {lineno}: malformed lifting-set line") from None
            if not 0 <= idx < n_sets or idx in sets:
                raise BaseGraphError(f"line {lineno}: bad or repeated lifting-set index {idx}")
            sets[idx] = sizes
            continue
        try:
            vals = [int(v) for v in fields]
        except ValueError:
            raise BaseGraphError(f"line {lineno}: malformed entry line") from None
        if len(vals) != 2 + n_sets:
            raise BaseGraphError(
                f"line {lineno}: expected row, col and {n_sets} shifts, got {len(vals)} fields")
        r, c = vals[0], vals[1]
        if not (0 <= r < m_b and 0 <= c < n_b):
            raise BaseGraphError(f"line {lineno}: entry ({r}, {c}) out of range")
        if any(v < 0 for v in vals[2:]):
            raise BaseGraphError(f"line {lineno}: negative shift")
        if (r, c) in seen:
            raise BaseGraphError(
                f"line {lineno}: duplicate entry ({r}, {c}) first seen on line {seen[(r, c)]}")
        seen[(r, c)] = lineno
        rows.append(r)
        cols.append(c)
        shifts.append(vals[2:])

    if not rows:
        raise BaseGraphError("base graph has no entries")
    order = np.lexsort((np.asarray(cols), np.asarray(rows)))
    lifting_sets = tuple(sets.get(i, ()) for i in range(n_sets))
    return BaseGraph(
        m_b=m_b,
        n_b=n_b,
        rows=np.asarray(rows)[order],
        cols=np.asarray(cols)[order],
        shifts=np.asarray(shifts, dtype=np.int64).reshape(len(rows), n_sets)[order],
        lifting_sets=lifting_sets,
        punctured_cols=punctured,
        name=name,
    )


BUNDLED = {"bg2": "bg2.txt"}


def load_base_graph(path) -> BaseGraph:
    """Load a base graph from a file, or a bundled asset by name (``"bg2"``).

    File format (``#`` starts a comment)::

        <m_b> <n_b> <num_lifting_sets>
        <punctured columns, or ->
        liftset <i> <Z> <Z> ...          # optional, one per lifting set
        <row> <col> <s_0> ... <s_{L-1}>  # one per non-zero entry
    """
    key = str(path).lower()
    if key in BUNDLED:
        text = resources.files("protoldpc").joinpath("data", BUNDLED[key]).read_text()
        return parse_base_graph(text, name=key)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"base-graph file not found: {path}")
    return parse_base_graph(p.read_text(), name=p.stem)


def format_base_graph(base: BaseGraph) -> str:
    out = [f"{base.m_b} {base.n_b} {base.num_lifting_sets}",
           " ".join(map(str, base.punctured_cols)) or "-"]
    for i, zs in enumerate(base.lifting_sets):
        if zs:
            out.append(f"liftset {i} " + " ".join(map(str, zs)))
    for r, c, s in zip(base.rows, base.cols, base.shifts):
        out.append(f"{r} {c} " + " ".join(map(str, s)))
    return "\n".join(out) + "\n"


def _degree_groups(node_of_edge: np.ndarray, num_nodes: int):
    """Group nodes by degree: list of (degree, node_ids, edge_ids[n_d, d])."""
    order = np.argsort(node_of_edge, kind="stable")
    deg = np.bincount(node_of_edge, minlength=num_nodes)
    starts = np.concatenate(([0], np.cumsum(deg)[:-1]))
    groups = []
    for d in np.unique(deg):
        if d == 0:
            continue
        nodes = np.flatnonzero(deg == d)
        idx = order[starts[nodes][:, None] + np.arange(d)[None, :]]
        groups.append((int(d), nodes, idx))
    return groups


@dataclass(frozen=True, eq=False)
class LiftedCode:
    """A Z-lifted protograph code.

    Only the first ``m_used`` base rows and ``n_used`` base columns take part
    (rate matching by row truncation); ``edge_type`` always refers to the
    entry index of the full base graph, so parameters trained on one base
    graph apply to every code lifted from it.
    """

    base: BaseGraph
    Z: int
    lifting_set: int
    m_used: int
    n_used: int
    edge_vn: np.ndarray
    edge_cn: np.ndarray
    edge_type: np.ndarray
    tx_positions: np.ndarray
    label: str = field(default="")

    @property
    def n(self) -> int:
        return self.Z * self.n_used

    @property
    def m(self) -> int:
        return self.Z * self.m_used

    @property
    def k(self) -> int:
        return self.Z * self.base.k_b

    @property
    def num_edges(self) -> int:
        return int(self.edge_vn.size)

    @property
    def n_tx(self) -> int:
        return int(self.tx_positions.size)

    @property
    def rate(self) -> float:
        return self.k / self.n_tx

    @cached_property
    def transmit_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.tx_positions] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def types_used(self) -> np.ndarray:
        """Base-entry indices present in this code, ascending."""
        return np.unique(self.edge_type)

    @cached_property
    def H(self) -> sp.csr_matrix:
        data = np.ones(self.num_edges, dtype=np.int32)
        return sp.csr_matrix((data, (self.edge_cn, self.edge_vn)), shape=(self.m, self.n))

    @cached_property
    def bundle_types(self) -> np.ndarray:
        """Edge-type of each Z-bundle, in edge order (edges reshape to (n_bundles, Z))."""
        return self.edge_type[::self.Z]

    @cached_property
    def vn_groups(self):
        """Variable nodes grouped by degree: (d, nodes, edges[n_d, d], types[n_d, d])."""
        return [(d, nodes, idx, self.edge_type[idx])
                for d, nodes, idx in _degree_groups(self.edge_vn, self.n)]

    @cached_property
    def cn_groups(self):
        """Check nodes grouped by degree: (d, nodes, edges[m_d, d], types[m_d, d])."""
        return [(d, nodes, idx, self.edge_type[idx])
                for d, nodes, idx in _degree_groups(self.edge_cn, self.m)]

    @cached_property
    def vn_adjacency(self) -> list:
        return [self.edge_cn[np.flatnonzero(self.edge_vn == v)] for v in range(self.n)]

    @cached_property
    def cn_adjacency(self) -> list:
        return [self.edge_vn[np.flatnonzero(self.edge_cn == c)] for c in range(self.m)]

    @cached_property
    def _encoder(self):
        return _build_encoder(self)

    def summary(self) -> str:
        return (f"({self.n_tx},{self.k}), E={self.num_edges}, R={self.rate:.4f}")

    def check_syndrome(self, hard_bits) -> bool | np.ndarray:
        return check_syndrome(self, hard_bits)

    def encode(self, info, rng=None):
        return encode(self, info, rng)


def _build_lifted(base: BaseGraph, Z: int, lifting_set: int, m_used: int, n_used: int,
                  tx_positions=None, label: str = "") -> LiftedCode:
    sel = np.flatnonzero((base.rows < m_used) & (base.cols < n_used))
    if base.rows[sel].size and np.any(np.bincount(base.rows[sel], minlength=m_used) == 0):
        raise BaseGraphError("selected rows include an empty check row")
    shift = base.shifts[sel, lifting_set] % Z
    j = np.arange(Z)
    # right-circulant block: row j of the block connects to column (j + s) mod Z
    edge_cn = (base.rows[sel, None] * Z + j[None, :]).ravel()
    edge_vn = (base.cols[sel, None] * Z + (j[None, :] + shift[:, None]) % Z).ravel()
    edge_type = np.repeat(sel, Z)
    if tx_positions is None:
        punct = np.zeros(n_used * Z, dtype=bool)
        for c in base.punctured_cols:
            if c < n_used:
                punct[c * Z:(c + 1) * Z] = True
        tx_positions = np.flatnonzero(~punct)
    tx_positions = np.asarray(tx_positions, dtype=np.int64)
    for a in (edge_cn, edge_vn, edge_type, tx_positions):
        a.setflags(write=False)
    return LiftedCode(base=base, Z=Z, lifting_set=lifting_set, m_used=m_used, n_used=n_used,
                      edge_vn=edge_vn, edge_cn=edge_cn, edge_type=edge_type,
                      tx_positions=tx_positions, label=label or f"{base.name}-Z{Z}")


def lift(base: BaseGraph, Z: int, lifting_set: int | None = None, strict: bool = False) -> LiftedCode:
    """Lift ``base`` by factor ``Z`` using circulant permutations.

    Base entry ``(r, c, s)`` becomes the ``Z x Z`` identity cyclically
    shifted right by ``s mod Z``: check ``r*Z + j`` connects to variable
    ``c*Z + (j + s) % Z``, as in 3GPP TS 38.212.

    The shift column is ``lifting_set`` if given, otherwise the set whose
    table contains ``Z``.  When ``Z`` is in no table, ``strict`` raises and
    non-strict mode reduces the set-0 shifts modulo ``Z``.
    """
    if not isinstance(Z, (int, np.integer)) or Z <= 0:
        raise ValueError(f"lifting size must be a positive integer, got {Z!r}")
    Z = int(Z)
    if lifting_set is None:
        lifting_set = base.lifting_set_of(Z)
        if lifting_set is None:
            if strict:
                raise ValueError(f"Z={Z} is not in any lifting set of {base.name}")
            lifting_set = 0
    if not 0 <= lifting_set < base.num_lifting_sets:
        raise ValueError(f"lifting set {lifting_set} out of range")
    return _build_lifted(base, Z, lifting_set, base.m_b, base.n_b)


def rate_match(code: LiftedCode, n_tx: int | None = None, rate: float | None = None,
               mode: str = "auto") -> LiftedCode:
    """Select transmitted bits so that ``n_tx`` bits carry the ``k`` info bits.

    ``mode="rows"`` keeps the first ``m_used`` base rows and first
    ``k_b + m_used`` columns and requires ``n_tx`` to fill whole column
    blocks (error ``rate not representable`` otherwise).  ``mode="buffer"``
    keeps every row and sends a prefix of the 5G circular buffer starting
    after the punctured columns, wrapping around (repetition) if ``n_tx``
    exceeds the buffer.  ``mode="auto"`` truncates to the fewest rows that
    cover the prefix and transmits the prefix; untransmitted bits of the last
    partial block are decoded from a zero LLR.
    """
    if (n_tx is None) == (rate is None):
        raise ValueError("give exactly one of n_tx or rate")
    base, Z = code.base, code.Z
    k = code.k
    if n_tx is None:
        if not 0 < rate <= 1:
            raise ValueError("rate must lie in (0, 1]")
        n_tx = int(round(k / rate))
    n_tx = int(n_tx)
    if n_tx < k:
        raise ValueError(f"n_tx={n_tx} is below k={k}")
    p = len(base.punctured_cols)
    if base.punctured_cols != tuple(range(p)):
        raise ValueError("rate matching assumes the punctured columns come first")
    start = p * Z

    if mode == "rows":
        cols, rem = divmod(n_tx, Z)
        m_used = cols + p - base.k_b
        if rem or not 1 <= m_used <= base.m_b:
            raise ValueError(f"rate not representable: n_tx={n_tx} is not a whole number "
                             f"of {Z}-bit blocks within the base graph")
        return _build_lifted(base, Z, code.lifting_set, m_used, base.k_b + m_used,
                             label=f"{base.name}-Z{Z}-N{n_tx}")
    if mode == "buffer":
        buf = np.arange(start, base.n_b * Z)
        tx = buf[np.arange(n_tx) % buf.size]
        return _build_lifted(base, Z, code.lifting_set, base.m_b, base.n_b, tx_positions=tx,
                             label=f"{base.name}-Z{Z}-N{n_tx}")
    if mode != "auto":
        raise ValueError(f"unknown rate-matching mode {mode!r}")
    m_used = math.ceil((start + n_tx) / Z) - base.k_b
    if m_used > base.m_b:
        return rate_match(code, n_tx=n_tx, mode="buffer")
    m_used = max(m_used, 1)
    n_used = base.k_b + m_used
    tx = np.arange(start, start + n_tx)
    return _build_lifted(base, Z, code.lifting_set, m_used, n_used, tx_positions=tx,
                         label=f"{base.name}-Z{Z}-N{n_tx}")


def check_syndrome(code: LiftedCode, hard_bits) -> bool | np.ndarray:
    """True iff every parity check has even parity; vectorised over rows."""
    x = np.asarray(hard_bits)
    if x.shape[-1] != code.n:
        raise ValueError(f"expected {code.n} bits, got {x.shape[-1]}")
    x2 = x.reshape(-1, code.n).astype(np.int32) & 1
    syn = (code.H @ x2.T) & 1
    ok = ~np.any(syn, axis=0)
    return bool(ok[0]) if x.ndim == 1 else ok.reshape(x.shape[:-1])


# --- encoding -------------------------------------------------------------

def gf2_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a square binary matrix over GF(2) by Gauss-Jordan elimination."""
    n = a.shape[0]
    aug = np.concatenate([a.astype(np.uint8) & 1, np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        piv = np.flatnonzero(aug[col:, col]) + col
        if piv.size == 0:
            raise np.linalg.LinAlgError("matrix is singular over GF(2)")
        p = piv[0]
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        rows = np.flatnonzero(aug[:, col])
        rows = rows[rows != col]
        aug[rows] ^= aug[col]
    return aug[:, n:]


def _build_encoder(code: LiftedCode):
    """Split H = [[A, B, 0], [C, D, I]] and invert the core block B.

    The core is the smallest leading square block of the parity part whose
    complement is an identity; for 5G base graphs that is the 4-row
    double-diagonal core.  Falls back to inverting the whole parity part.
    """
    k, n, m = code.k, code.n, code.m
    H = code.H.tocsc()
    Hp = H[:, k:].tocsr()
    g = m
    for cand in range(code.Z, m, code.Z):
        tail = Hp[cand:, cand:]
        if tail.nnz == m - cand and (tail != sp.identity(m - cand, format="csr")).nnz == 0:
            g = cand
            break
    B = Hp[:g, :g].toarray()
    try:
        B_inv = gf2_inverse(B)
    except np.linalg.LinAlgError:
        raise ValueError("parity core of the code is singular; cannot encode") from None
    A = H[:g, :k].tocsr()
    C = H[g:, :k].tocsr()
    D = Hp[g:, :g].tocsr()
    return A, sp.csr_matrix(B_inv.astype(np.int32)), C, D


def encode(code: LiftedCode, info, rng=None) -> np.ndarray:
    """Systematic encoding: returns codewords of length ``n`` whose first ``k``
    bits equal ``info``.

    ``info`` may be an array of shape ``(k,)`` or ``(B, k)``; if ``info`` is an
    integer and ``rng`` a ``numpy.random.Generator``, that many random
    codewords are drawn.
    """
    if isinstance(info, (int, np.integer)):
        if rng is None:
            raise ValueError("rng is required to draw random info words")
        info = rng.integers(0, 2, size=(int(info), code.k), dtype=np.uint8)
    s = np.asarray(info)
    single = s.ndim == 1
    s = np.atleast_2d(s).astype(np.int32) & 1
    if s.shape[1] != code.k:
        raise ValueError(f"expected {code.k} info bits, got {s.shape[1]}")
    A, B_inv, C, D = code._encoder
    st = s.T
    p_a = (B_inv @ ((A @ st) & 1)) & 1
    p_b = (C @ st + D @ p_a) & 1
    x = np.concatenate([s, p_a.T, p_b.T], axis=1).astype(np.uint8)
    return x[0] if single else x


# --- cycles ---------------------------------------------------------------

@dataclass(frozen=True)
class CycleCensus:
    """Exact counts of simple cycles keyed by (even) length."""

    counts: dict

    def to_csv(self) -> str:
        return "length,count\n" + "".join(f"{L},{c}\n" for L, c in sorted(self.counts.items()))


def count_short_cycles(code: LiftedCode, max_len: int = 6) -> CycleCensus:
    """Count simple cycles of every even length from 4 to ``max_len`` (<= 10)."""
    from .cycles import count_cycles_bipartite, count_cycles_quasi_cyclic

    if max_len not in (4, 6, 8, 10):
        raise ValueError("max_len must be one of 4, 6, 8, 10")
    if code.Z > 1:
        counts = count_cycles_quasi_cyclic(code.edge_vn, code.edge_cn, code.n, code.m,
                                           code.Z, code.n_used, max_len)
    else:
        counts = count_cycles_bipartite(code.edge_vn, code.edge_cn, code.n, code.m, max_len)
    return CycleCensus(counts)
