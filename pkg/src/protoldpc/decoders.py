"""Flooding message-passing decoders over a lifted protograph code.

All decoders share one engine.  Messages live on edges as ``(B, E)`` float
arrays (batch first).  Per-edge-type parameters of width ``E_b`` are looked
up through ``code.edge_type`` (or broadcast over ``(B, n_bundles, Z)``), so a
single parameter array serves every lifting of the same base graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from .protograph import LiftedCode

TANH_CLIP = 19.0
ATANH_CLIP = 1.0 - 1e-15
PARAMS_FORMAT = "protoldpc-params/1"
_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


class DecoderKind(str, Enum):
    SP = "sp"
    MS = "ms"
    NMS = "nms"
    OMS = "oms"
    TYPE1 = "type1"
    TYPE2 = "type2"
    TYPE3 = "type3"
    TYPE4 = "type4"
    TYPE5 = "type5"
    TYPE6 = "type6"
    NEURAL_SP = "neural-sp"

    @classmethod
    def parse(cls, name) -> "DecoderKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"bp": "sp", "neural-sp": "neural-sp", "nsp": "neural-sp",
                   **{f"type-{i}": f"type{i}" for i in range(1, 7)},
                   **{f"neural-type{i}": f"type{i}" for i in range(1, 7)}}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown decoder kind {name!r}; valid kinds: {valid}") from None

    @property
    def is_neural(self) -> bool:
        return self not in (DecoderKind.SP, DecoderKind.MS, DecoderKind.NMS, DecoderKind.OMS)

    @property
    def is_damped(self) -> bool:
        return self in (DecoderKind.TYPE5, DecoderKind.TYPE6)

    @property
    def uses_tanh(self) -> bool:
        return self in (DecoderKind.SP, DecoderKind.NEURAL_SP)


# Per neural kind: how alpha, beta, gamma are structured within one iteration.
#   "free"  one value per edge-type
#   "tied"  one scalar shared by every edge-type
#   "fixed" not trainable; held at the default
_F, _T, _X = "free", "tied", "fixed"
PARAM_STRUCTURE = {
    DecoderKind.TYPE1: {"alpha": _F, "beta": _F, "gamma": _X},
    DecoderKind.TYPE2: {"alpha": _T, "beta": _T, "gamma": _X},
    DecoderKind.TYPE3: {"alpha": _T, "beta": _X, "gamma": _X},
    DecoderKind.TYPE4: {"alpha": _X, "beta": _T, "gamma": _X},
    DecoderKind.TYPE5: {"alpha": _F, "beta": _F, "gamma": _F},
    DecoderKind.TYPE6: {"alpha": _F, "beta": _F, "gamma": _T},
    DecoderKind.NEURAL_SP: {"alpha": _F, "beta": _F, "gamma": _X},
}
PARAM_DEFAULTS = {"alpha": 1.0, "beta": 0.0, "gamma": 0.0}


@dataclass(frozen=True, eq=False)
class DecoderParams:
    """Decoder choice plus its per-iteration, per-edge-type parameters.

    Classical kinds carry no arrays; NMS and OMS keep their constant in
    ``factor``.  Neural kinds carry ``alpha``, ``beta`` and ``gamma`` of
    shape ``(iterations, E_b)``, with tied entries stored expanded.
    """

    kind: DecoderKind
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    factor: float | None = None
    base_name: str = ""
    base_hash: str = ""

    def __post_init__(self):
        kind = DecoderKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is DecoderKind.NMS:
            f = 0.8 if self.factor is None else float(self.factor)
            if not 0 < f <= 1:
                raise ValueError(f"NMS factor must lie in (0, 1], got {f}")
            object.__setattr__(self, "factor", f)
        elif kind is DecoderKind.OMS:
            f = 0.15 if self.factor is None else float(self.factor)
            if f < 0:
                raise ValueError(f"OMS offset must be non-negative, got {f}")
            object.__setattr__(self, "factor", f)
        if not kind.is_neural:
            return
        arrays = {}
        for name in ("alpha", "beta", "gamma"):
            a = getattr(self, name)
            if a is None:
                raise ValueError(f"{kind.value} decoder needs a {name} array")
            a = np.array(a, dtype=np.float64)
            if a.ndim != 2:
                raise ValueError(f"{name} must have shape (iterations, E_b)")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            a.setflags(write=False)
            arrays[name] = a
        if len({a.shape for a in arrays.values()}) != 1:
            raise ValueError("alpha, beta and gamma must have equal shapes")
        g = arrays["gamma"]
        if np.any(g < 0) or np.any(g >= 1):
            raise ValueError("damping factors must lie in [0, 1)")
        for name, a in arrays.items():
            rule = PARAM_STRUCTURE[kind][name]
            if rule == _T and np.any(a != a[:, :1]):
                raise ValueError(f"{kind.value}: tied {name} must be equal within an iteration")
            if rule == _X and np.any(a != PARAM_DEFAULTS[name]):
                raise ValueError(f"{kind.value}: {name} is fixed at {PARAM_DEFAULTS[name]}")
            object.__setattr__(self, name, a)

    @property
    def iterations(self) -> int | None:
        """Number of parameterised iterations (``None``: unlimited, classical kinds)."""
        return None if self.alpha is None else int(self.alpha.shape[0])

    @property
    def num_types(self) -> int | None:
        return None if self.alpha is None else int(self.alpha.shape[1])

    # --- constructors ---------------------------------------------------

    @classmethod
    def classical(cls, kind, factor: float | None = None) -> "DecoderParams":
        kind = DecoderKind.parse(kind)
        if kind.is_neural:
            raise ValueError(f"{kind.value} is a neural kind; use DecoderParams.neutral")
        return cls(kind=kind, factor=factor)

    @classmethod
    def neutral(cls, kind, iterations: int, base, gamma: float = 0.0) -> "DecoderParams":
        """MS-neutral neural parameters (alpha=1, beta=0) for ``base``.

        ``base`` is a ``BaseGraph`` or an edge-type count.
        """
        kind = DecoderKind.parse(kind)
        if not kind.is_neural:
            raise ValueError(f"{kind.value} has no trainable parameters")
        num_types = base if isinstance(base, (int, np.integer)) else base.num_entries
        shape = (int(iterations), int(num_types))
        g = gamma if kind.is_damped else 0.0
        return cls(kind=kind, alpha=np.ones(shape), beta=np.zeros(shape), gamma=np.full(shape, g),
                   base_name=getattr(base, "name", ""), base_hash=getattr(base, "hash", ""))

    def with_values(self, **arrays) -> "DecoderParams":
        return replace(self, **arrays)

    def truncated(self, iterations: int) -> "DecoderParams":
        """The first ``iterations`` layers as a shorter decoder."""
        if not self.kind.is_neural:
            return self
        if not 1 <= iterations <= self.iterations:
            raise ValueError(f"cannot truncate {self.iterations} iterations to {iterations}")
        return replace(self, alpha=self.alpha[:iterations], beta=self.beta[:iterations],
                       gamma=self.gamma[:iterations])

    def equals(self, other: "DecoderParams") -> bool:
        """Bitwise equality of kind, constants, metadata and arrays."""
        if (self.kind, self.factor, self.base_name, self.base_hash) != \
                (other.kind, other.factor, other.base_name, other.base_hash):
            return False
        for name in ("alpha", "beta", "gamma"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True

    # --- persistence ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {"format": PARAMS_FORMAT, "kind": self.kind.value, "iterations": self.iterations,
             "num_types": self.num_types, "factor": self.factor,
             "base_name": self.base_name, "base_hash": self.base_hash}
        for name in ("alpha", "beta", "gamma"):
            a = getattr(self, name)
            d[name] = None if a is None else a.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderParams":
        if d.get("format") != PARAMS_FORMAT:
            raise ValueError(f"not a parameter file (format {d.get('format')!r})")
        p = cls(kind=d["kind"], alpha=d.get("alpha"), beta=d.get("beta"), gamma=d.get("gamma"),
                factor=d.get("factor"), base_name=d.get("base_name", ""),
                base_hash=d.get("base_hash", ""))
        if p.kind.is_neural and (p.iterations != d["iterations"] or p.num_types != d["num_types"]):
            raise ValueError("parameter arrays do not match the header")
        return p


def save_params(params: DecoderParams, path) -> Path:
    """Write parameters as JSON; floats use shortest round-trip repr."""
    path = Path(path)
    path.write_text(json.dumps(params.to_dict(), indent=1) + "\n")
    return path


def load_params(path) -> DecoderParams:
    return DecoderParams.from_dict(json.loads(Path(path).read_text()))


def check_compatible(params: DecoderParams, code: LiftedCode) -> None:
    """Raise if neural parameters were made for a different base graph."""
    if not params.kind.is_neural:
        return
    if params.num_types != code.base.num_entries:
        raise ValueError(f"parameter width {params.num_types} does not match the "
                         f"{code.base.num_entries} edge-types of {code.base.name}")
    if params.base_hash and params.base_hash != code.base.hash:
        raise ValueError(f"parameters were trained for base graph {params.base_name!r} "
                         f"(hash {params.base_hash}), code uses hash {code.base.hash}")


class EdgeParams:
    """Read-only per-edge view of an ``E_b``-wide parameter array.

    ``view[e]`` returns the parameter of edge ``e`` through its edge-type;
    nothing of size ``E`` is stored.
    """

    def __init__(self, values, code: LiftedCode):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != code.base.num_entries:
            raise ValueError(f"parameter width {values.shape[-1]} does not match "
                             f"E_b={code.base.num_entries}")
        self.values = values
        self.code = code

    def __len__(self) -> int:
        return self.code.num_edges

    def __getitem__(self, edge):
        return self.values[..., self.code.edge_type[edge]]

    def bundles(self) -> np.ndarray:
        """Values per bundle, shape ``(..., n_bundles, 1)``; broadcasts over Z."""
        return self.values[..., self.code.bundle_types, None]


def expand_params(base_values, code: LiftedCode) -> EdgeParams:
    return EdgeParams(base_values, code)


# --- node updates ---------------------------------------------------------

def _exclusive(x, op):
    """Leave-one-out reduction along the last axis via prefix/suffix scans."""
    acc = np.add.accumulate if op == "sum" else np.multiply.accumulate
    ident = 0.0 if op == "sum" else 1.0
    pre = np.full_like(x, ident)
    suf = np.full_like(x, ident)
    if x.shape[-1] > 1:
        pre[..., 1:] = acc(x[..., :-1], axis=-1)
        suf[..., :-1] = acc(x[..., :0:-1], axis=-1)[..., ::-1]
    return pre + suf if op == "sum" else pre * suf


def vn_extrinsic(llr: np.ndarray, cn_msgs: np.ndarray, code: LiftedCode) -> np.ndarray:
    """Undamped VN-to-CN messages ``l_v + sum_{c' != c} l_{c'->v}``."""
    out = np.empty_like(cn_msgs)
    for d, nodes, idx, _ in code.vn_groups:
        if d == 1:
            out[:, idx[:, 0]] = llr[:, nodes]
        else:
            out[:, idx] = llr[:, nodes, None] + _exclusive(cn_msgs[:, idx], "sum")
    return out


def damp(vnt: np.ndarray, prev: np.ndarray, gamma: np.ndarray, code: LiftedCode) -> np.ndarray:
    """Convex blend ``gamma * prev + (1 - gamma) * vnt`` with per-type gamma."""
    B = vnt.shape[0]
    g = EdgeParams(gamma, code).bundles()
    out = g * prev.reshape(B, -1, code.Z) + (1.0 - g) * vnt.reshape(B, -1, code.Z)
    return out.reshape(B, -1)


def vn_update(llr, cn_msgs, code: LiftedCode, prev=None, gamma=None) -> np.ndarray:
    """VN update with optional damping.

    ``llr`` is ``(B, n)`` (or an ``LlrFrame``), messages ``(B, E)``.  When
    ``gamma`` (width ``E_b``) has any positive entry, ``prev`` is required.
    """
    llr = np.atleast_2d(getattr(llr, "values", llr))
    cn_msgs = np.atleast_2d(cn_msgs)
    if cn_msgs.shape[-1] != code.num_edges:
        raise ValueError(f"expected {code.num_edges} edge messages, got {cn_msgs.shape[-1]}")
    vnt = vn_extrinsic(llr, cn_msgs, code)
    if gamma is None or not np.any(np.asarray(gamma) > 0):
        return vnt
    if prev is None:
        raise ValueError("damping needs the previous VN messages")
    return damp(vnt, np.atleast_2d(prev), gamma, code)


def marginal(llr: np.ndarray, cn_msgs: np.ndarray, code: LiftedCode) -> np.ndarray:
    """Soft output ``s_v = l_v + sum_c l_{c->v}``."""
    s = llr.copy()
    for _, nodes, idx, _ in code.vn_groups:
        s[:, nodes] += cn_msgs[:, idx].sum(axis=-1)
    return s


def _min_excl(mag):
    """Leave-one-out minimum from min1/min2 and the argmin."""
    i1 = np.argmin(mag, axis=-1)[..., None]
    min1 = np.take_along_axis(mag, i1, axis=-1)
    rest = mag.copy()
    np.put_along_axis(rest, i1, np.inf, axis=-1)
    min2 = rest.min(axis=-1, keepdims=True)
    at = np.arange(mag.shape[-1]) == i1
    return np.where(at, min2, min1)


def _check(kind: DecoderKind, x, types, alpha, beta, factor):
    """Check-node outputs for one degree group; ``x`` is ``(B, m_d, d)``."""
    if kind.uses_tanh:
        t = np.tanh(np.clip(0.5 * x, -TANH_CLIP, TANH_CLIP))
        p = np.clip(_exclusive(t, "prod"), -ATANH_CLIP, ATANH_CLIP)
        phi = 2.0 * np.arctanh(p)
        if kind is DecoderKind.SP:
            return phi
        return alpha[types] * phi + beta[types]
    neg = x < 0
    ext_neg = np.logical_xor.reduce(neg, axis=-1, keepdims=True) ^ neg
    m = _min_excl(np.abs(x))
    if kind is DecoderKind.MS:
        mag = m
    elif kind is DecoderKind.NMS:
        mag = factor * m
    elif kind is DecoderKind.OMS:
        mag = np.maximum(m - factor, 0.0)
    else:
        mag = np.maximum(alpha[types] * m - beta[types], 0.0)
    return np.where(ext_neg, -mag, mag)


def cn_update(vn_msgs, code: LiftedCode, kind, alpha=None, beta=None, factor=None) -> np.ndarray:
    """CN-to-VN messages for every edge.

    ``alpha`` and ``beta`` are ``E_b``-wide arrays for the neural kinds;
    ``factor`` is the NMS scale or OMS offset (defaults 0.8 and 0.15).
    """
    kind = DecoderKind.parse(kind)
    vn_msgs = np.atleast_2d(vn_msgs)
    if vn_msgs.shape[-1] != code.num_edges:
        raise ValueError(f"expected {code.num_edges} edge messages, got {vn_msgs.shape[-1]}")
    if factor is None:
        factor = {DecoderKind.NMS: 0.8, DecoderKind.OMS: 0.15}.get(kind)
    if kind.is_neural:
        alpha = np.asarray(alpha, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        for a in (alpha, beta):
            if a.shape != (code.base.num_entries,):
                raise ValueError(f"per-iteration parameters must have width {code.base.num_entries}")
    out = np.empty_like(vn_msgs)
    for d, _, idx, types in code.cn_groups:
        if d < 2:
            raise ValueError("check nodes must have degree at least 2")
        out[:, idx] = _check(kind, vn_msgs[:, idx], types, alpha, beta, factor)
    return out


# --- decoding -------------------------------------------------------------

@dataclass(eq=False)
class MessageTrace:
    """Per-iteration edge messages of a decode, each list entry ``(B, E)``.

    ``vn[i]`` are the (damped) VN-to-CN messages fed to check layer ``i``,
    ``vnt[i]`` their undamped values and ``cn[i]`` the check outputs.
    Frames that stopped early repeat their last messages.
    """

    llr: np.ndarray
    vn: list = field(default_factory=list)
    vnt: list = field(default_factory=list)
    cn: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.cn)


@dataclass(eq=False)
class DecodeResult:
    soft: np.ndarray
    probs: np.ndarray
    hard: np.ndarray
    iterations_used: np.ndarray
    converged: np.ndarray
    trace: MessageTrace | None = None


def _params_at(params: DecoderParams, i: int):
    if params.kind.is_neural:
        return params.alpha[i], params.beta[i], params.gamma[i]
    return None, None, None


def decode(frame, code: LiftedCode, params: DecoderParams, max_iter: int | None = None,
           early_term: bool = True, trace: bool = False, on_iteration=None) -> DecodeResult:
    """Decode channel LLRs with flooding message passing.

    ``frame`` is an ``LlrFrame`` or an LLR array of shape ``(n,)`` or
    ``(B, n)``.  Output arrays follow the input's batch shape.  With
    ``early_term`` a frame stops as soon as its hard decision satisfies
    every check.  ``on_iteration(i, active, vn, cn)`` is called after each
    iteration with the rows still being decoded, for streaming statistics.
    """
    llr = np.asarray(getattr(frame, "values", frame), dtype=np.float64)
    single = llr.ndim == 1
    llr = np.atleast_2d(llr)
    if llr.shape[1] != code.n:
        raise ValueError(f"frame length {llr.shape[1]} does not match code length {code.n}")
    kind = params.kind
    check_compatible(params, code)
    if max_iter is None:
        max_iter = params.iterations or 25
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if kind.is_neural and max_iter > params.iterations:
        raise ValueError(f"{kind.value} parameters cover {params.iterations} iterations, "
                         f"{max_iter} requested")

    B, E = llr.shape[0], code.num_edges
    soft = llr.copy()
    iters = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    act = np.arange(B)
    L = llr
    cn = np.zeros((B, E))
    vn = None
    tr = MessageTrace(llr=llr.copy()) if trace else None

    for i in range(max_iter):
        alpha, beta, gamma = _params_at(params, i)
        vnt = vn_extrinsic(L, cn, code)
        if kind.is_damped and i > 0:
            vn = damp(vnt, vn, gamma, code)
        else:
            vn = vnt
        cn = cn_update(vn, code, kind, alpha, beta, params.factor)
        s = marginal(L, cn, code)
        soft[act] = s
        iters[act] = i + 1
        if on_iteration is not None:
            on_iteration(i, act, vn, cn)
        if tr is not None:
            for store, cur in ((tr.vn, vn), (tr.vnt, vnt), (tr.cn, cn)):
                if act.size == B:
                    store.append(cur)
                else:
                    full = store[-1].copy()
                    full[act] = cur
                    store.append(full)
        if early_term:
            ok = check_syndrome_batch(code, s < 0)
            if ok.any():
                converged[act[ok]] = True
                keep = ~ok
                act, L, cn, vn = act[keep], L[keep], cn[keep], vn[keep]
                if act.size == 0:
                    break

    hard = (soft < 0).astype(np.uint8)
    if not early_term:
        converged = check_syndrome_batch(code, hard)
    # keep probabilities strictly inside (0, 1) even when |s| saturates expit
    probs = np.clip(expit(soft), _P_LO, _P_HI)
    if single:
        return DecodeResult(soft[0], probs[0], hard[0], iters[0], converged[0], tr)
    return DecodeResult(soft, probs, hard, iters, converged, tr)


def check_syndrome_batch(code: LiftedCode, hard) -> np.ndarray:
    """Per-frame syndrome check for a ``(B, n)`` bit array."""
    syn = (code.H @ np.asarray(hard, dtype=np.int32).T) & 1
    return ~np.any(syn, axis=0)
