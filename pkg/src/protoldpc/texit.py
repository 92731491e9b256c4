"""Trajectory-based EXIT analysis from simulated decoder messages.

Edge messages of every iteration are binned into fine conditional
histograms while decoding, so memory does not grow with the frame count.
Average mutual information is then estimated from a coarse (default 100
bin) histogram over a symmetric range set by the largest observed
magnitude, capped at 60.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, transmit_and_demap
from .decoders import DecoderParams, decode
from .protograph import LiftedCode

CLIP = 60.0
FINE_BINS = 10000           # bin width 0.012 over [-60, 60]
_FINE_W = 2 * CLIP / FINE_BINS


@dataclass(frozen=True)
class AmiEstimate:
    value: float
    equiprobable: bool = True    # False: one label class missing, empirical prior used


def _mi_from_counts(c0: np.ndarray, c1: np.ndarray) -> AmiEstimate:
    n0, n1 = c0.sum(), c1.sum()
    if n0 + n1 == 0:
        raise ValueError("no samples")
    if n0 == 0 or n1 == 0:
        # a single label class carries no information about the label
        return AmiEstimate(0.0, equiprobable=False)
    p0, p1 = c0 / n0, c1 / n1
    mix = 0.5 * (p0 + p1)
    mi = 0.0
    for p in (p0, p1):
        nz = p > 0
        mi += 0.5 * float(np.sum(p[nz] * np.log2(p[nz] / mix[nz])))
    return AmiEstimate(min(max(mi, 0.0), 1.0))


def estimate_ami(samples, labels, bins: int = 100, detail: bool = False):
    """AMI in bits between LLR samples and their bits, assuming P(x=0) = 1/2.

    The histogram spans ``[-L, L]`` with ``L = min(max|sample|, 60)``;
    samples beyond 60 land in the outer bins.
    """
    y = np.asarray(samples, dtype=np.float64).ravel()
    x = np.asarray(labels).ravel().astype(bool)
    if y.shape != x.shape:
        raise ValueError("samples and labels must have the same length")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    L = min(float(np.max(np.abs(y))), CLIP) if y.size else 0.0
    if L == 0.0:
        est = AmiEstimate(0.0, equiprobable=bool(x.any() and (~x).any()))
    else:
        idx = np.clip(((y + L) / (2 * L) * bins).astype(np.int64), 0, bins - 1)
        c0 = np.bincount(idx[~x], minlength=bins).astype(np.float64)
        c1 = np.bincount(idx[x], minlength=bins).astype(np.float64)
        est = _mi_from_counts(c0, c1)
    return est if detail else est.value


@dataclass(eq=False)
class LlrHistogram:
    """Streaming conditional histogram of LLR samples on a fixed fine grid."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, FINE_BINS), dtype=np.int64))
    max_abs: float = 0.0

    def add(self, samples: np.ndarray, labels: np.ndarray) -> None:
        y = samples.ravel()
        lab = labels.ravel().astype(np.int64)
        self.max_abs = max(self.max_abs, min(float(np.max(np.abs(y))), CLIP))
        idx = np.clip(((y + CLIP) / _FINE_W).astype(np.int64), 0, FINE_BINS - 1)
        self.counts += np.bincount(lab * FINE_BINS + idx, minlength=2 * FINE_BINS).reshape(2, -1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def ami(self, bins: int = 100) -> AmiEstimate:
        """AMI on ``bins`` coarse bins over the smallest grid-aligned ``[-L, L]``
        covering every sample."""
        if self.total == 0:
            raise ValueError("empty histogram")
        # coarse width 2L/bins rounded up to a whole number of fine bins
        q = int(np.ceil(2.0 * self.max_abs / (bins * _FINE_W) - 1e-9))
        q = min(max(q, 1), FINE_BINS // bins)
        span = q * bins                      # fine bins covered by [-L, L]
        lo = (FINE_BINS - span) // 2
        c = self.counts[:, lo:lo + span].astype(np.float64)
        c[:, 0] += self.counts[:, :lo].sum(axis=1)
        c[:, -1] += self.counts[:, lo + span:].sum(axis=1)
        c = c.reshape(2, bins, q).sum(axis=2)
        return _mi_from_counts(c[0], c[1])


@dataclass(eq=False)
class LlrSampleSet:
    """Per-iteration message statistics gathered from ``frames`` decoded frames.

    ``vn[i]`` and ``cn[i]`` hold the histograms of the VN-to-CN and CN-to-VN
    messages of iteration ``i + 1``; ``raw_vn``/``raw_cn`` keep the samples
    and ``raw_labels`` the edge bits when collection was asked to keep them.
    """

    vn: list
    cn: list
    frames: int
    num_edges: int
    raw_vn: list | None = None
    raw_cn: list | None = None
    raw_labels: list | None = None

    @property
    def iterations(self) -> int:
        return len(self.vn)


def collect_llrs(code: LiftedCode, params: DecoderParams, snr_db: float, K: int, I: int,
                 rng: np.random.Generator, batch: int = 100, keep_samples: bool = False,
                 channel: str = "awgn") -> LlrSampleSet:
    """Decode ``K`` random codewords for exactly ``I`` iterations (no early
    termination) and histogram every edge message with its code bit."""
    if K < 1 or I < 1:
        raise ValueError("K and I must be at least 1")
    cfg = ChannelConfig(channel, snr_db, code.rate)
    vn_h = [LlrHistogram() for _ in range(I)]
    cn_h = [LlrHistogram() for _ in range(I)]
    raw = ([[] for _ in range(I)], [[] for _ in range(I)], []) if keep_samples else None
    for lo in range(0, K, batch):
        nb = min(batch, K - lo)
        x = code.encode(nb, rng)
        f = transmit_and_demap(x, code.tx_positions, cfg, rng)
        lab = x[:, code.edge_vn]
        if raw is not None:
            raw[2].append(lab)

        def hook(i, act, vn, cn, lab=lab):
            vn_h[i].add(vn, lab)
            cn_h[i].add(cn, lab)
            if raw is not None:
                raw[0][i].append(vn.copy())
                raw[1][i].append(cn.copy())

        decode(f, code, params, I, early_term=False, on_iteration=hook)
    sset = LlrSampleSet(vn=vn_h, cn=cn_h, frames=K, num_edges=code.num_edges)
    if raw is not None:
        sset.raw_vn = [np.concatenate(r) for r in raw[0]]
        sset.raw_cn = [np.concatenate(r) for r in raw[1]]
        sset.raw_labels = np.concatenate(raw[2])
    return sset


@dataclass(eq=False)
class ExitRecord:
    i_e_vn: np.ndarray
    i_e_cn: np.ndarray
    trajectory: np.ndarray          # (2I, 2) zigzag vertices
    curve_v: np.ndarray             # (I, 2)
    curve_c_inv: np.ndarray         # (I, 2)
    fixed_point: tuple | None
    flags: tuple = ()

    def write_csv(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, pts in (("trajectory", self.trajectory), ("curve_v", self.curve_v),
                          ("curve_cinv", self.curve_c_inv)):
            p = out / f"{name}.csv"
            p.write_text("x,y\n" + "".join(f"{a!r},{b!r}\n" for a, b in pts.tolist()))
            paths[name] = p
        ami = out / "ami.csv"
        ami.write_text("iteration,i_e_vn,i_e_cn\n" + "".join(
            f"{i + 1},{v!r},{c!r}\n" for i, (v, c) in enumerate(zip(self.i_e_vn.tolist(),
                                                                     self.i_e_cn.tolist()))))
        paths["ami"] = ami
        return paths

    def summary(self) -> str:
        if self.fixed_point is None:
            return "fixed_point,none"
        return f"fixed_point,{self.fixed_point[0]:.4f},{self.fixed_point[1]:.4f}"


def _segment_hits(p, q, r, s):
    """Intersection parameters of segments p->q and r->s, touching included."""
    d1, d2 = q - p, s - r
    den = d1[0] * d2[1] - d1[1] * d2[0]
    w = r - p
    if den == 0:
        # parallel; collinear overlaps report their leftmost common point
        if w[0] * d1[1] - w[1] * d1[0] != 0:
            return None
        seg = sorted([tuple(p), tuple(q)])
        other = sorted([tuple(r), tuple(s)])
        lo, hi = max(seg[0], other[0]), min(seg[1], other[1])
        return np.array(lo) if lo <= hi else None
    t = (w[0] * d2[1] - w[1] * d2[0]) / den
    u = (w[0] * d1[1] - w[1] * d1[0]) / den
    if -1e-12 <= t <= 1 + 1e-12 and -1e-12 <= u <= 1 + 1e-12:
        return p + t * d1
    return None


def curve_intersection(a: np.ndarray, b: np.ndarray):
    """Earliest (smallest abscissa) intersection of two polylines, or None."""
    if len(a) == 1 or len(b) == 1:
        pts = [np.asarray(v) for v in (a if len(a) == 1 else b)]
        other = b if len(a) == 1 else a
        for v in pts:
            for j in range(max(len(other) - 1, 1)):
                seg = other[j:j + 2] if len(other) > 1 else np.vstack([other[0], other[0]])
                hit = _segment_hits(v, v, seg[0], seg[-1])
                if hit is not None:
                    return tuple(float(c) for c in hit)
        return None
    hits = []
    for i in range(len(a) - 1):
        for j in range(len(b) - 1):
            h = _segment_hits(a[i], a[i + 1], b[j], b[j + 1])
            if h is not None:
                hits.append(h)
    if not hits:
        return None
    best = min(hits, key=lambda h: (h[0], h[1]))
    return float(best[0]), float(best[1])


def exit_from_ami(i_e_vn, i_e_cn, flags=()) -> ExitRecord:
    """Zigzag trajectory, the two transfer curves and their fixed point."""
    vn = np.asarray(i_e_vn, dtype=np.float64)
    cn = np.asarray(i_e_cn, dtype=np.float64)
    I = vn.size
    if I < 2 or cn.size != I:
        raise ValueError("need AMI values for at least 2 iterations")
    i_a_vn = np.concatenate(([0.0], cn[:-1]))
    curve_v = np.column_stack([i_a_vn, vn])
    curve_c_inv = np.column_stack([cn, vn])
    traj = np.empty((2 * I, 2))
    traj[0::2] = curve_v
    traj[1::2] = curve_c_inv
    fp = curve_intersection(curve_v, curve_c_inv)
    return ExitRecord(vn, cn, traj, curve_v, curve_c_inv, fp, tuple(flags))


def build_exit(samples: LlrSampleSet, bins: int = 100) -> ExitRecord:
    if samples.iterations < 2:
        raise ValueError("T-EXIT curves need at least 2 iterations")
    flags = []
    vn, cn = [], []
    for i in range(samples.iterations):
        a, b = samples.vn[i].ami(bins), samples.cn[i].ami(bins)
        if not (a.equiprobable and b.equiprobable):
            flags.append(f"iteration {i + 1}: single label class")
        vn.append(a.value)
        cn.append(b.value)
    return exit_from_ami(vn, cn, flags)
