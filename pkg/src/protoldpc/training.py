"""Loss, hand-written backpropagation, Adam and greedy layer-wise training.

The decoder is unrolled with early termination off.  Gradients flow from the
cross-entropy on the final soft output back through the last check layer
(greedy mode) or through every layer (full mode).  Sign factors are treated
as constants, the ReLU subgradient at 0 is 0, and a minimum shared by several
inputs splits its gradient equally among them.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .channel import ChannelConfig, transmit_and_demap
from .decoders import (ATANH_CLIP, PARAM_STRUCTURE, TANH_CLIP, DecoderKind, DecoderParams,
                       MessageTrace, _exclusive, _min_excl, decode, load_params, save_params)
from .protograph import LiftedCode

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
GAMMA_MAX = 1.0 - 1e-3
_LN2 = math.log(2.0)


class TrainingDivergence(FloatingPointError):
    """Loss became non-finite; carries the outer step and batch index."""


def bce_loss(probs, codeword) -> float:
    """Mean binary cross-entropy in bits; ``probs`` is P(x_v = 1).

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` first.
    """
    o = np.asarray(probs, dtype=np.float64)
    x = np.asarray(codeword, dtype=np.float64)
    if o.shape != x.shape:
        raise ValueError(f"probability shape {o.shape} does not match codeword shape {x.shape}")
    o = np.clip(o, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(x * np.log2(o) + (1.0 - x) * np.log2(1.0 - o)))


def soft_loss(soft, codeword) -> float:
    """Cross-entropy of a decoder soft output (LLR convention: s > 0 means bit 0)."""
    return bce_loss(expit(-np.asarray(soft)), codeword)


def _soft_grad(soft, codeword):
    """dLoss/ds for ``soft_loss``; zero where the clamp is active."""
    p1 = expit(-soft)
    g = (codeword - p1) / (soft.size * _LN2)
    g[(p1 < PROB_CLAMP) | (p1 > 1.0 - PROB_CLAMP)] = 0.0
    return g


@dataclass(eq=False)
class GradientSet:
    """Loss gradients with respect to alpha, beta and gamma.

    Arrays are ``(E_b,)`` for a single layer (``layer`` set) or
    ``(I, E_b)`` for all layers.  A tied parameter's gradient (the sum over
    its edge-types) is written to every slot of the row; fixed parameters
    get 0.
    """

    d_alpha: np.ndarray
    d_beta: np.ndarray
    d_gamma: np.ndarray
    layer: int | None = None

    def as_dict(self) -> dict:
        return {"alpha": self.d_alpha, "beta": self.d_beta, "gamma": self.d_gamma}


def _type_sum(edge_grad: np.ndarray, code: LiftedCode) -> np.ndarray:
    """Reduce a ``(B, E)`` per-edge gradient to its ``E_b`` edge-type slots."""
    per_bundle = edge_grad.reshape(edge_grad.shape[0], -1, code.Z).sum(axis=(0, 2))
    return np.bincount(code.bundle_types, weights=per_bundle, minlength=code.base.num_entries)


def _apply_structure(kind: DecoderKind, name: str, g: np.ndarray) -> np.ndarray:
    rule = PARAM_STRUCTURE[kind][name]
    if rule == "fixed":
        return np.zeros_like(g)
    if rule == "tied":
        return np.broadcast_to(g.sum(axis=-1, keepdims=True), g.shape).copy()
    return g


def _cn_backward(kind, x, types, g_out, alpha, beta, want_input):
    """Backward through one check-node degree group.

    Returns per-edge contributions to d_alpha, d_beta (``(B, m_d, d)``) and
    the gradient with respect to the inputs ``x`` (or None).
    """
    if kind.uses_tanh:
        t = np.tanh(np.clip(0.5 * x, -TANH_CLIP, TANH_CLIP))
        p = _exclusive(t, "prod")
        p_cl = np.clip(p, -ATANH_CLIP, ATANH_CLIP)
        phi = 2.0 * np.arctanh(p_cl)
        da, db = g_out * phi, g_out
        if not want_input:
            return da, db, None
        g_p = g_out * alpha[types] * 2.0 / (1.0 - p_cl * p_cl)
        g_p[p != p_cl] = 0.0
        d = x.shape[-1]
        # leave-two-out products: row e has t_e replaced by 1
        eye = np.eye(d, dtype=bool)
        rows = np.where(eye, 1.0, t[..., None, :])
        l2 = _exclusive(rows, "prod")
        g_t = np.einsum("...e,...ef->...f", g_p, np.where(eye, 0.0, l2))
        g_x = g_t * 0.5 * (1.0 - t * t)
        g_x[np.abs(0.5 * x) > TANH_CLIP] = 0.0
        return da, db, g_x

    neg = x < 0
    sgn = np.where(np.logical_xor.reduce(neg, axis=-1, keepdims=True) ^ neg, -1.0, 1.0)
    mag = np.abs(x)
    m = _min_excl(mag)
    on = (alpha[types] * m - beta[types]) > 0
    gs = np.where(on, g_out * sgn, 0.0)
    da, db = gs * m, -gs
    if not want_input:
        return da, db, None
    g_m = gs * alpha[types]
    d = x.shape[-1]
    # route each outgoing min to every tied minimiser among the other inputs
    hit = (mag[..., None, :] == m[..., :, None]) & ~np.eye(d, dtype=bool)
    share = g_m / hit.sum(axis=-1)
    g_mag = np.einsum("...e,...ef->...f", share, hit.astype(np.float64))
    return da, db, g_mag * np.sign(x)


def _cn_layer_backward(code, kind, vn, g_cn, alpha, beta, want_input):
    B, E = vn.shape
    da_e = np.zeros((B, E))
    db_e = np.zeros((B, E))
    g_vn = np.zeros((B, E)) if want_input else None
    for _, _, idx, types in code.cn_groups:
        da, db, gx = _cn_backward(kind, vn[:, idx], types, g_cn[:, idx], alpha, beta, want_input)
        da_e[:, idx] = da
        db_e[:, idx] = db
        if want_input:
            g_vn[:, idx] = gx
    return _type_sum(da_e, code), _type_sum(db_e, code), g_vn


def _vn_backward(code, g_vnt):
    """Gradient of the VN extrinsic sums with respect to the incoming CN messages."""
    g_cn = np.zeros_like(g_vnt)
    for d, _, idx, _ in code.vn_groups:
        if d > 1:
            g = g_vnt[:, idx]
            g_cn[:, idx] = g.sum(axis=-1, keepdims=True) - g
    return g_cn


def _marginal_backward(code, g_s):
    return g_s[:, code.edge_vn]


def _require_trace(trace):
    if trace is None or not isinstance(trace, MessageTrace) or trace.iterations == 0:
        raise ValueError("a message trace is required; decode with trace=True")
    return trace


def _final_soft(trace: MessageTrace, code: LiftedCode, i: int):
    s = trace.llr.copy()
    for _, nodes, idx, _ in code.vn_groups:
        s[:, nodes] += trace.cn[i][:, idx].sum(axis=-1)
    return s


def backward(trace: MessageTrace, code: LiftedCode, params: DecoderParams, codeword,
             mode: str = "full", multi_loss: bool = False) -> GradientSet:
    """Gradients of ``soft_loss`` through an unrolled decode.

    ``mode="last"`` differentiates with respect to the final layer's
    parameters only; ``mode="full"`` backpropagates through every layer.
    With ``multi_loss`` the loss is the sum of the per-iteration losses.
    """
    trace = _require_trace(trace)
    kind = params.kind
    if not kind.is_neural:
        raise ValueError(f"{kind.value} has no trainable parameters")
    x = np.atleast_2d(np.asarray(codeword, dtype=np.float64))
    I = trace.iterations
    if I > params.iterations:
        raise ValueError("trace has more iterations than the parameters")
    Eb = code.base.num_entries
    dA, dB, dG = np.zeros((I, Eb)), np.zeros((I, Eb)), np.zeros((I, Eb))
    g_cn = [None] * I
    for i in range(I):
        if multi_loss or i == I - 1:
            g_cn[i] = _marginal_backward(code, _soft_grad(_final_soft(trace, code, i), x))
    low = I - 1 if mode == "last" else 0
    carry = None
    for i in range(I - 1, low - 1, -1):
        if g_cn[i] is None:
            g_cn[i] = np.zeros_like(trace.cn[i])
        need_vn = i > low or (kind.is_damped and i > 0)
        dA[i], dB[i], g_vn = _cn_layer_backward(code, kind, trace.vn[i], g_cn[i],
                                                params.alpha[i], params.beta[i], need_vn)
        if not need_vn:
            break
        if carry is not None:
            g_vn += carry
        if kind.is_damped and i > 0:
            B = g_vn.shape[0]
            diff = trace.vn[i - 1] - trace.vnt[i]
            dG[i] = _type_sum(g_vn * diff, code)
            g3 = params.gamma[i][code.bundle_types, None]
            gv = g_vn.reshape(B, -1, code.Z)
            carry = (g3 * gv).reshape(B, -1)
            g_vnt = ((1.0 - g3) * gv).reshape(B, -1)
        else:
            carry = None
            g_vnt = g_vn
        if i > low:
            back = _vn_backward(code, g_vnt)
            g_cn[i - 1] = back if g_cn[i - 1] is None else g_cn[i - 1] + back
    for name, a in (("alpha", dA), ("beta", dB), ("gamma", dG)):
        a[:] = _apply_structure(kind, name, a)
    if mode == "last":
        return GradientSet(dA[I - 1], dB[I - 1], dG[I - 1], layer=I - 1)
    return GradientSet(dA, dB, dG)


def backward_last_layer(trace, code, params, codeword) -> GradientSet:
    """Greedy-mode gradient: only the newest layer's parameters are learnable."""
    return backward(trace, code, params, codeword, mode="last")


def backward_full(trace, code, params, codeword, multi_loss: bool = False) -> GradientSet:
    """Gradient with respect to every layer's parameters."""
    return backward(trace, code, params, codeword, mode="full", multi_loss=multi_loss)


# --- optimiser --------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, grads: GradientSet, params: DecoderParams) -> DecoderParams:
    """One Adam update of the trainable entries; gamma is projected into [0, 0.999]."""
    kind = params.kind
    state.step += 1
    t = state.step
    new = {}
    for name, g in grads.as_dict().items():
        cur = getattr(params, name)
        target = cur if grads.layer is None else cur[grads.layer]
        if g.shape != target.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {target.shape}")
        if PARAM_STRUCTURE[kind][name] == "fixed":
            continue
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        upd = target - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if name == "gamma":
            upd = np.clip(upd, 0.0, GAMMA_MAX)
        full = cur.copy()
        if grads.layer is None:
            full[:] = upd
        else:
            full[grads.layer] = upd
        new[name] = full
    return params.with_values(**new)


# --- training-SNR table -----------------------------------------------------

def ber_at(code: LiftedCode, params: DecoderParams, ebn0_db: float, info, noise, iters: int,
           batch: int = 1000) -> float:
    """Information-bit error rate for fixed codewords and unit-variance noise draws."""
    cfg = ChannelConfig("awgn", ebn0_db, code.rate)
    errs = 0
    for lo in range(0, info.shape[0], batch):
        x = code.encode(info[lo:lo + batch])
        f = transmit_and_demap(x, code.tx_positions, cfg, noise=noise[lo:lo + batch] * cfg.sigma)
        r = decode(f, code, params, iters)
        errs += int(np.count_nonzero(r.hard[:, :code.k] != x[:, :code.k]))
    return errs / info.size


def required_snr_ber(code: LiftedCode, target_ber: float = 1e-3, frames: int = 2000,
                     iters: int = 50, resolution: float = 0.05, bracket=(-2.0, 12.0),
                     seed: int = 0, params: DecoderParams | None = None) -> float:
    """Smallest SNR (within ``resolution``) whose BER is at most ``target_ber``.

    The same codewords and noise realisations are reused at every probe, which
    makes the estimated BER monotone in practice and the bisection stable.
    """
    if not 0 < target_ber < 0.5:
        raise ValueError("target BER must lie in (0, 0.5)")
    params = params or DecoderParams.classical("sp")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(code.Z, code.n_tx)))
    info = rng.integers(0, 2, size=(frames, code.k), dtype=np.uint8)
    noise = rng.standard_normal((frames, code.n_tx))
    lo, hi = bracket
    if ber_at(code, params, lo, info, noise, iters) <= target_ber:
        return lo
    if ber_at(code, params, hi, info, noise, iters) > target_ber:
        raise ValueError(f"BER never reaches {target_ber} within [{lo}, {hi}] dB")
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if ber_at(code, params, mid, info, noise, iters) <= target_ber:
            hi = mid
        else:
            lo = mid
    return hi


def build_snr_table(codes, target_ber: float = 1e-3, max_iterations: int = 25,
                    ref_iters: int = 50, frames: int = 2000, schedule=None, seed: int = 0,
                    resolution: float = 0.05) -> np.ndarray:
    """Training SNRs, shape ``(max_iterations, len(codes))``.

    Each code's column is its SP reference SNR for ``target_ber``, repeated
    over iterations and optionally shifted by a per-iteration ``schedule``.
    """
    base = np.array([required_snr_ber(c, target_ber, frames, ref_iters, resolution, seed=seed)
                     for c in codes])
    table = np.tile(base, (max_iterations, 1))
    if schedule is not None:
        schedule = np.asarray(schedule, dtype=np.float64)
        if schedule.shape != (max_iterations,):
            raise ValueError("schedule must give one offset per iteration")
        table = table + schedule[:, None]
    return table


# --- greedy training --------------------------------------------------------

@dataclass
class TrainingConfig:
    codes: list
    snr_table: np.ndarray
    batches_per_iteration: int = 50000
    batch_size: int = 50
    learning_rate: float = 1e-3
    max_iterations: int = 25
    seed: int = 0
    plateau_window: int = 1000
    plateau_tol: float = 1e-4
    random_init: bool = False
    multi_loss: bool = False

    def __post_init__(self):
        if not self.codes:
            raise ValueError("training needs at least one code")
        hashes = {c.base.hash for c in self.codes}
        if len(hashes) != 1:
            raise ValueError("all training codes must come from one base graph")
        self.snr_table = np.asarray(self.snr_table, dtype=np.float64)
        if self.snr_table.shape != (self.max_iterations, len(self.codes)):
            raise ValueError(f"SNR table must have shape ({self.max_iterations}, {len(self.codes)})")
        if self.batch_size < 1 or self.batches_per_iteration < 1:
            raise ValueError("batch size and batch budget must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    @property
    def base(self):
        return self.codes[0].base


def batch_rng(seed: int, k: int, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k, batch)))


def _sample_batch(cfg: TrainingConfig, k: int, batch: int):
    rng = batch_rng(cfg.seed, k, batch)
    j = int(rng.integers(len(cfg.codes)))
    code = cfg.codes[j]
    x = code.encode(cfg.batch_size, rng)
    ch = ChannelConfig("awgn", cfg.snr_table[k - 1, j], code.rate)
    return code, x, transmit_and_demap(x, code.tx_positions, ch, rng)


def _init_layer(params: DecoderParams, k: int, cfg: TrainingConfig) -> DecoderParams:
    kind = params.kind
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(k,)))
    Eb = params.num_types
    new = {}
    for name in ("alpha", "beta", "gamma"):
        rule = PARAM_STRUCTURE[kind][name]
        row = np.full(Eb, {"alpha": 1.0, "beta": 0.0, "gamma": 0.0}[name])
        if rule != "fixed" and (name == "gamma" or cfg.random_init):
            u = rng.random(1 if rule == "tied" else Eb)
            row = np.broadcast_to(0.5 * u if name == "gamma" else u, (Eb,)).astype(np.float64)
        a = getattr(params, name).copy()
        a[k - 1] = row
        new[name] = a
    return params.with_values(**new)


def checkpoint_path(out_dir, k: int) -> Path:
    return Path(out_dir) / f"checkpoint_{k:02d}.json"


def train_greedy(cfg: TrainingConfig, kind, out_dir=None, resume: bool = False,
                 progress=None) -> DecoderParams:
    """Iteration-by-iteration training.

    At outer step ``k`` layers ``1..k-1`` are frozen and only layer ``k`` is
    optimised on ``k``-iteration decodes.  Each batch draws one code from
    ``cfg.codes`` and fresh random codewords from its own seeded stream, so
    a run is reproducible from ``cfg.seed``.  With ``out_dir`` a checkpoint
    holding layers ``1..k`` is saved after each step and the training log is
    appended to ``train_log.csv``; ``resume`` restarts after the last saved
    checkpoint.
    """
    kind = DecoderKind.parse(kind)
    if not kind.is_neural:
        raise ValueError(f"{kind.value} has no trainable parameters")
    params = DecoderParams.neutral(kind, cfg.max_iterations, cfg.base)
    start = 1
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume and out is not None:
        done = [k for k in range(1, cfg.max_iterations + 1) if checkpoint_path(out, k).exists()]
        if done:
            last = max(done)
            ck = load_params(checkpoint_path(out, last))
            if ck.kind is not kind or ck.base_hash != cfg.base.hash:
                raise ValueError("checkpoint does not match the training configuration")
            arrays = {n: getattr(params, n).copy() for n in ("alpha", "beta", "gamma")}
            for n in arrays:
                arrays[n][:last] = getattr(ck, n)
            params = params.with_values(**arrays)
            start = last + 1
    log_file = None
    writer = None
    if out is not None:
        log_path = out / "train_log.csv"
        fresh = not (resume and log_path.exists())
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["outer_iter", "batch", "loss"])
    try:
        for k in range(start, cfg.max_iterations + 1):
            params = _init_layer(params, k, cfg)
            state = AdamState(lr=cfg.learning_rate)
            losses = []
            for b in range(cfg.batches_per_iteration):
                code, x, frame = _sample_batch(cfg, k, b)
                cur = params.truncated(k)
                res = decode(frame, code, cur, k, early_term=False, trace=True)
                loss = soft_loss(res.soft, x)
                if not math.isfinite(loss):
                    raise TrainingDivergence(
                        f"non-finite loss at outer step {k}, batch {b} "
                        f"(batch seed: SeedSequence({cfg.seed}, spawn_key=({k}, {b})))")
                if cfg.multi_loss:
                    g = backward_full(res.trace, code, cur, x, multi_loss=True)
                    g = GradientSet(g.d_alpha[k - 1], g.d_beta[k - 1], g.d_gamma[k - 1], layer=k - 1)
                else:
                    g = backward_last_layer(res.trace, code, cur, x)
                params = adam_step(state, g, params)
                losses.append(loss)
                if writer is not None:
                    writer.writerow([k, b, repr(loss)])
                if progress is not None:
                    progress(k, b, loss)
                w = cfg.plateau_window
                if w and len(losses) >= 2 * w and len(losses) % w == 0:
                    prev = np.mean(losses[-2 * w:-w])
                    last = np.mean(losses[-w:])
                    if prev - last < cfg.plateau_tol:
                        log.info("outer step %d: plateau after %d batches", k, b + 1)
                        break
            if out is not None:
                save_params(params.truncated(k), checkpoint_path(out, k))
                log_file.flush()
            log.info("outer step %d done, final loss %.5f", k, losses[-1] if losses else float("nan"))
    finally:
        if log_file is not None:
            log_file.close()
    return params


def held_out_loss(code: LiftedCode, params: DecoderParams, ebn0_db: float, frames: int,
                  iters: int, seed: int = 12345, batch: int = 1000) -> float:
    """Mean cross-entropy on fresh random codewords (early termination off)."""
    rng = np.random.default_rng(seed)
    cfg = ChannelConfig("awgn", ebn0_db, code.rate)
    total = 0.0
    for lo in range(0, frames, batch):
        nb = min(batch, frames - lo)
        x = code.encode(nb, rng)
        f = transmit_and_demap(x, code.tx_positions, cfg, rng)
        r = decode(f, code, params, iters, early_term=False)
        total += soft_loss(r.soft, x) * nb
    return total / frames
