"""Monte-Carlo BER/BLER sweeps and required-SNR search.

Frames are simulated in fixed-size chunks.  Chunk ``c`` at SNR point ``p``
draws its codewords and noise from ``SeedSequence(seed, spawn_key=(p, c))``
and every decoder sees the same frames.  Stop rules are evaluated in chunk
order, and chunks computed speculatively by parallel workers past a stop are
discarded, so counts do not depend on the worker count.
"""

from __future__ import annotations

import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, transmit_and_demap
from .decoders import DecoderParams, check_compatible, decode
from .protograph import LiftedCode

CSV_HEADER = "decoder,snr_db,frames,bit_errs,blk_errs,ber,bler,avg_iters"


@dataclass
class SweepSpec:
    """What to simulate.

    ``decoders`` maps a display name to ``DecoderParams``.  A decoder stops
    at an SNR point once it has ``min_block_errors`` block errors or
    ``max_frames`` frames.  With ``decide_below`` set (a target BLER), it
    also stops once ``2 * min_block_errors / decide_below`` frames produced
    fewer than ``min_block_errors`` errors, i.e. once the BLER is clearly
    below that target.
    """

    code: LiftedCode
    decoders: dict
    snr_db: list
    max_iter: int = 25
    early_term: bool = True
    min_block_errors: int = 100
    max_frames: int = 10_000_000
    seed: int = 0
    chunk: int = 1000
    channel: str = "awgn"
    all_zero: bool = False
    decide_below: float | None = None

    def __post_init__(self):
        self.snr_db = [float(s) for s in self.snr_db]
        if not self.snr_db:
            raise ValueError("need at least one SNR point")
        if any(b <= a for a, b in zip(self.snr_db, self.snr_db[1:])):
            raise ValueError("SNR points must be strictly increasing")
        if self.min_block_errors < 1 or self.max_frames < 1 or self.chunk < 1:
            raise ValueError("stop-rule counts and chunk size must be at least 1")
        if not self.decoders:
            raise ValueError("need at least one decoder")
        for p in self.decoders.values():
            check_compatible(p, self.code)


@dataclass
class PointResult:
    decoder: str
    snr_db: float
    frames: int = 0
    bit_errs: int = 0
    blk_errs: int = 0
    iters: int = 0

    @property
    def ber(self) -> float:
        return self.bit_errs / (self.frames * self.k) if self.frames else 0.0

    @property
    def bler(self) -> float:
        return self.blk_errs / self.frames if self.frames else 0.0

    @property
    def avg_iters(self) -> float:
        return self.iters / self.frames if self.frames else 0.0

    k: int = field(default=1, repr=False)


@dataclass
class SweepResult:
    points: list

    def get(self, decoder: str, snr_db: float) -> PointResult:
        for p in self.points:
            if p.decoder == decoder and p.snr_db == float(snr_db):
                return p
        raise KeyError((decoder, snr_db))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(CSV_HEADER + "\n")
        for p in self.points:
            out.write(f"{p.decoder},{p.snr_db!r},{p.frames},{p.bit_errs},{p.blk_errs},"
                      f"{p.ber!r},{p.bler!r},{p.avg_iters!r}\n")
        return out.getvalue()


def _chunk_frames(spec: SweepSpec, p: int, c: int, n: int):
    code = spec.code
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(p, c)))
    if spec.all_zero:
        x = np.zeros((n, code.n), dtype=np.uint8)
    else:
        x = code.encode(n, rng)
    cfg = ChannelConfig(spec.channel, spec.snr_db[p], code.rate)
    return x, transmit_and_demap(x, code.tx_positions, cfg, rng)


def _run_chunk(spec: SweepSpec, p: int, c: int, n: int, names: tuple):
    x, frame = _chunk_frames(spec, p, c, n)
    k = spec.code.k
    out = {}
    for name in names:
        r = decode(frame, spec.code, spec.decoders[name], spec.max_iter, spec.early_term)
        wrong = r.hard[:, :k] != x[:, :k]
        out[name] = (n, int(wrong.sum()), int(np.any(wrong, axis=1).sum()),
                     int(r.iterations_used.sum()))
    return out


_WORKER_SPEC = None


def _init_worker(spec):
    global _WORKER_SPEC
    _WORKER_SPEC = spec


def _worker_chunk(args):
    return _run_chunk(_WORKER_SPEC, *args)


def _done(spec: SweepSpec, r: PointResult) -> bool:
    if r.blk_errs >= spec.min_block_errors or r.frames >= spec.max_frames:
        return True
    if spec.decide_below is not None:
        return r.frames >= 2 * spec.min_block_errors / spec.decide_below
    return False


def run_sweep(spec: SweepSpec, workers: int = 1, progress=None) -> SweepResult:
    """Simulate every decoder at every SNR point of ``spec``."""
    points = []
    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                   initargs=(spec,))
    try:
        for p, snr in enumerate(spec.snr_db):
            res = {name: PointResult(name, snr, k=spec.code.k) for name in spec.decoders}
            active = [name for name in spec.decoders]
            c = 0
            while active:
                # chunk c always covers frames [c * chunk, (c + 1) * chunk)
                jobs = []
                for j in range(max(1, workers)):
                    start = (c + j) * spec.chunk
                    if start >= spec.max_frames:
                        break
                    jobs.append((p, c + j, min(spec.chunk, spec.max_frames - start), tuple(active)))
                if pool is None:
                    outs = [_run_chunk(spec, *job) for job in jobs]
                else:
                    outs = list(pool.map(_worker_chunk, jobs))
                for out in outs:
                    c += 1
                    for name in list(active):
                        if name not in out:
                            continue
                        n, be, ke, it = out[name]
                        r = res[name]
                        r.frames += n
                        r.bit_errs += be
                        r.blk_errs += ke
                        r.iters += it
                        if _done(spec, r):
                            active.remove(name)
                    if not active:
                        break
                if progress is not None:
                    progress(snr, res)
            points.extend(res[name] for name in spec.decoders)
    finally:
        if pool is not None:
            pool.shutdown()
    return SweepResult(points)


def required_snr(code: LiftedCode, params: DecoderParams, iters: int = 25,
                 target_bler: float = 1e-2, resolution: float = 0.05, bracket=(-2.0, 12.0),
                 min_block_errors: int = 100, max_frames: int = 1_000_000, seed: int = 0,
                 workers: int = 1, chunk: int = 1000) -> float:
    """Smallest SNR (to ``resolution``) with simulated BLER <= ``target_bler``.

    Every probe reuses the same seeded frames (common random numbers), so
    the bisection sees a consistent BLER-versus-SNR relation.
    """
    if not 0 < target_bler < 1:
        raise ValueError("target BLER must lie in (0, 1)")

    def bler(snr):
        spec = SweepSpec(code=code, decoders={"d": params}, snr_db=[snr], max_iter=iters,
                         min_block_errors=min_block_errors, max_frames=max_frames, seed=seed,
                         chunk=chunk, decide_below=target_bler)
        return run_sweep(spec, workers).points[0].bler

    lo, hi = bracket
    if bler(lo) <= target_bler:
        return lo
    if bler(hi) > target_bler:
        raise ValueError(f"BLER target {target_bler} not reached within [{lo}, {hi}] dB")
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if bler(mid) <= target_bler:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def default_workers() -> int:
    env = os.environ.get("PROTOLDPC_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else os.cpu_count() or 1)
