"""End-to-end acceptance checks, one test per criterion.

Each test records a single pass/fail line (see ``record_acceptance`` in
conftest); the lines are repeated in the terminal summary.  Thresholds are
the contractual ones; nothing here is tuned to make a check pass.

Run alone with ``pytest tests/test_acceptance.py -v``; criterion 6 trains a
decoder and takes about an hour on one core.
"""

import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance, toy_base
from gradcheck import REL_TOL, check_instance, instance_plan, random_params
from protoldpc.channel import ChannelConfig, transmit_and_demap
from protoldpc.cli import main as cli_main
from protoldpc.decoders import DecoderParams, decode, load_params
from protoldpc.protograph import count_short_cycles, lift
from protoldpc.sim import SweepSpec, run_sweep
from protoldpc.texit import build_exit, collect_llrs, estimate_ami
from protoldpc.training import TrainingConfig, build_snr_table, checkpoint_path, train_greedy
from test_texit import j_function

# reference short-cycle counts of the BG2 lifts, by cycle length then Z
CYCLE_TABLE = {4: {3: 428, 8: 224, 16: 176, 30: 0},
               6: {3: 11511, 8: 11800, 16: 10768, 30: 11460}}
EXIT_SP_Z3 = (0.6806, 0.9013)
EXIT_MS_Z16_ORDINATE = 0.5919


def _frames(code, ebn0, B, seed):
    rng = np.random.default_rng(seed)
    x = code.encode(B, rng)
    return x, transmit_and_demap(x, code.tx_positions, ChannelConfig("awgn", ebn0, code.rate), rng)


def _max_rel_diff(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, diff / scale, 0.0)
    return float(rel.max())


# --- 1 ----------------------------------------------------------------------

def test_criterion_1_oracle_equivalence(code3, code16):
    iters, frames, batch = 10, 1000, 200
    worst = {}
    for code in (code3, code16):
        base = code.base
        t3 = DecoderParams.neutral("type3", iters, base)
        t4 = DecoderParams.neutral("type4", iters, base)
        r1 = random_params("type1", iters, base, np.random.default_rng(21))
        damped = {k: DecoderParams(k, alpha=r1.alpha, beta=r1.beta, gamma=np.zeros_like(r1.alpha),
                                   base_name=base.name, base_hash=base.hash)
                  for k in ("type5", "type6")}
        pairs = {
            "type1=ms": (DecoderParams.neutral("type1", iters, base), DecoderParams.classical("ms")),
            "type3=nms": (t3.with_values(alpha=np.full(t3.alpha.shape, 0.8)),
                          DecoderParams.classical("nms", 0.8)),
            "type4=oms": (t4.with_values(beta=np.full(t4.beta.shape, 0.15)),
                          DecoderParams.classical("oms", 0.15)),
            "type5=type1": (damped["type5"], r1),
            "type6=type1": (damped["type6"], r1),
        }
        for lo in range(0, frames, batch):
            _, f = _frames(code, 1.0, batch, seed=1000 * code.Z + lo)
            for name, (p, q) in pairs.items():
                a = decode(f, code, p, iters, early_term=False, trace=True)
                b = decode(f, code, q, iters, early_term=False, trace=True)
                d = max(_max_rel_diff(u, v) for u, v in
                        zip(a.trace.vn + a.trace.cn + [a.soft], b.trace.vn + b.trace.cn + [b.soft]))
                key = f"{name}@Z{code.Z}"
                worst[key] = max(worst.get(key, 0.0), d)
    ok = all(v <= 1e-15 for v in worst.values())
    detail = f"{frames} frames x {iters} iterations per code; max relative message difference " + \
        ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert record_acceptance(1, "neural/classical message equivalence", ok, detail)


# --- 2 ----------------------------------------------------------------------

def test_criterion_2_gradient_check(code3):
    codes = {"toy": lift(toy_base(m_b=4, n_b=8, seed=5), 5), "bg2z3": code3}
    plan = instance_plan()
    worst, checked, kinks, bad = 0.0, 0, 0, []
    for code_key, kind, iters, mode, seed in plan:
        for p in check_instance(codes[code_key], kind, iters, mode, seed):
            if p.kink:
                kinks += 1
                continue
            checked += 1
            worst = max(worst, p.rel_err)
            if p.rel_err >= REL_TOL:
                bad.append((code_key, kind, mode, seed, p))
    ok = not bad and len(plan) == 50
    detail = (f"{len(plan)} instances, {checked} parameters checked, {kinks} kink-adjacent skipped, "
              f"worst relative error {worst:.2e} (limit {REL_TOL:g})")
    assert record_acceptance(2, "analytic vs finite-difference gradients", ok, detail), bad[:5]


# --- 3 ----------------------------------------------------------------------

def test_criterion_3_cycle_counts(bg2):
    got = {}
    for Z in (3, 8, 16, 30):
        got[Z] = count_short_cycles(lift(bg2, Z), 6).counts
    four = {Z: got[Z][4] for Z in got}
    six_notes = ", ".join(f"Z={Z}: {got[Z][6]} vs {CYCLE_TABLE[6][Z]}" for Z in got)
    ok = four[3] == CYCLE_TABLE[4][3] and four[30] == CYCLE_TABLE[4][30]
    detail = (f"4-cycles Z=3 {four[3]} (expected {CYCLE_TABLE[4][3]}), Z=30 {four[30]} "
              f"(expected 0), Z=8 {four[8]}, Z=16 {four[16]}; 6-cycles {six_notes}")
    assert record_acceptance(3, "short-cycle counts of BG2 lifts", ok, detail)


# --- 4 ----------------------------------------------------------------------

def test_criterion_4_classical_ordering(code3):
    decs = {"sp": DecoderParams.classical("sp"), "nms": DecoderParams.classical("nms", 0.8),
            "oms": DecoderParams.classical("oms", 0.15), "ms": DecoderParams.classical("ms")}
    spec = SweepSpec(code3, decs, [4.0], max_iter=25, min_block_errors=200, seed=2024, chunk=2000)
    res = run_sweep(spec)
    r = {k: res.get(k, 4.0) for k in decs}
    b = {k: v.bler for k, v in r.items()}
    enough = all(v.blk_errs >= 200 for v in r.values())
    ok = enough and b["sp"] < b["nms"] < b["ms"] and b["oms"] < b["ms"]
    detail = ", ".join(f"{k} BLER={v.bler:.4g} ({v.blk_errs}/{v.frames})" for k, v in r.items())
    assert record_acceptance(4, "SP < NMS < MS and OMS < MS at 4 dB, Z=3", ok, detail)


# --- 5 ----------------------------------------------------------------------

def test_criterion_5_texit_fixed_points(code3, code16):
    K, I = 5000, 25
    sp = build_exit(collect_llrs(code3, DecoderParams.classical("sp"), 4.0, K, I,
                                 np.random.default_rng(5), batch=500))
    ms = build_exit(collect_llrs(code16, DecoderParams.classical("ms"), 1.5, K, I,
                                 np.random.default_rng(6), batch=250))
    parts, ok = [], True
    if sp.fixed_point is None:
        ok = False
        parts.append("SP Z=3: no crossing")
    else:
        dx = abs(sp.fixed_point[0] - EXIT_SP_Z3[0])
        dy = abs(sp.fixed_point[1] - EXIT_SP_Z3[1])
        ok &= dx <= 0.02 and dy <= 0.02
        parts.append(f"SP Z=3 4 dB fixed point ({sp.fixed_point[0]:.4f}, {sp.fixed_point[1]:.4f}) "
                     f"vs {EXIT_SP_Z3} +-0.02")
    if ms.fixed_point is None:
        ok = False
        parts.append(f"MS Z=16 1.5 dB: curves do not cross within {I} iterations "
                     f"(final I_E,VN={ms.i_e_vn[-1]:.4f}, I_E,CN={ms.i_e_cn[-1]:.4f}; "
                     f"expected ordinate {EXIT_MS_Z16_ORDINATE} +-0.03)")
    else:
        dy = abs(ms.fixed_point[1] - EXIT_MS_Z16_ORDINATE)
        ok &= dy <= 0.03
        parts.append(f"MS Z=16 1.5 dB ordinate {ms.fixed_point[1]:.4f} vs "
                     f"{EXIT_MS_Z16_ORDINATE} +-0.03")
    assert record_acceptance(5, "T-EXIT fixed points", ok, "; ".join(parts))


# --- 6 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_training_efficacy(bg2, tmp_path):
    out = Path(os.environ.get("PROTOLDPC_ACCEPTANCE_DIR", tmp_path))
    out.mkdir(parents=True, exist_ok=True)
    I = 10
    codes = [lift(bg2, Z) for Z in (3, 6, 10, 16)]
    table = build_snr_table(codes, target_ber=1e-3, max_iterations=I, ref_iters=50, frames=2000)
    cfg = TrainingConfig(codes=codes, snr_table=table, batches_per_iteration=5000, batch_size=50,
                         learning_rate=1e-3, max_iterations=I, seed=0)
    trained = train_greedy(cfg, "type1", out_dir=out / "train")
    rows, ok = [], True
    for j, code in enumerate(codes):
        snr = float(table[0, j])
        decs = {"trained": trained, "ms": DecoderParams.classical("ms"),
                "sp": DecoderParams.classical("sp")}
        res = run_sweep(SweepSpec(code, decs, [snr], max_iter=I, min_block_errors=100,
                                  seed=600 + j, chunk=500))
        r = {k: res.get(k, snr) for k in decs}
        enough = all(v.blk_errs >= 100 for v in r.values())
        ok &= enough and r["trained"].bler <= r["ms"].bler
        row = (f"Z={code.Z} @{snr:.2f} dB: trained {r['trained'].bler:.4g}, "
               f"MS {r['ms'].bler:.4g}, SP {r['sp'].bler:.4g}")
        if code.Z == 16:
            gap_t = r["trained"].bler - r["sp"].bler
            gap_ms = r["ms"].bler - r["sp"].bler
            ok &= gap_t <= 0.5 * gap_ms
            row += f" (gap to SP {gap_t:.4g} vs 0.5 x {gap_ms:.4g})"
        rows.append(row)
    detail = f"I={I}, 5000 batches/iteration; " + "; ".join(rows)
    assert record_acceptance(6, "greedy-trained Type-I vs MS and SP", ok, detail)


# --- 7 ----------------------------------------------------------------------

def test_criterion_7_greedy_reuse(code3, tmp_path):
    cfg = TrainingConfig(codes=[code3], snr_table=np.full((10, 1), 2.0), batches_per_iteration=25,
                         batch_size=20, max_iterations=10, seed=7)
    final = train_greedy(cfg, "type1", out_dir=tmp_path)
    ck6 = load_params(checkpoint_path(tmp_path, 6))
    _, f = _frames(code3, 2.0, 500, seed=70)
    a = decode(f, code3, final.truncated(6), 6)
    b = decode(f, code3, ck6, 6)
    same = (np.array_equal(a.soft, b.soft) and np.array_equal(a.hard, b.hard)
            and np.array_equal(a.iterations_used, b.iterations_used))
    ok = same and final.truncated(6).equals(ck6)
    detail = f"500 frames, truncated stack vs checkpoint 6: outputs bitwise {'equal' if same else 'DIFFERENT'}"
    assert record_acceptance(7, "first 6 layers of a 10-layer stack reuse", ok, detail)


# --- 8 ----------------------------------------------------------------------

def test_criterion_8_ami_estimator():
    rng = np.random.default_rng(8)
    n, sigma2 = 1_000_000, 1.0
    mu = 2.0 / sigma2
    x = rng.integers(0, 2, n)
    y = (1 - 2.0 * x) * mu + rng.standard_normal(n) * np.sqrt(4.0 / sigma2)
    est, ref = estimate_ami(y, x), j_function(mu)
    lab = np.array([0, 1] * 500)
    zero = estimate_ami(np.zeros(lab.size), lab)
    one = estimate_ami(np.where(lab == 0, 60.0, -60.0), lab)
    ok = abs(est - ref) <= 0.01 and zero == 0.0 and one == 1.0
    detail = (f"Gaussian sigma^2=1: estimate {est:.5f} vs quadrature {ref:.5f}; "
              f"degenerate cases {zero!r} and {one!r}")
    assert record_acceptance(8, "histogram AMI estimator", ok, detail)


# --- 9 ----------------------------------------------------------------------

def test_criterion_9_manifest_rerun(tmp_path, capsys):
    cfg = tmp_path / "train.ini"
    cfg.write_text("[codes]\nlifting = 3, 6\n[training]\nkind = type6\nmax_iterations = 3\n"
                   "batches_per_iteration = 5\nbatch_size = 8\nseed = 9\n[snr]\ntable = 2.0 1.5\n")
    runs = {
        "simulate": ["simulate", "--z", "3", "--decoder", "ms", "--decoder", "oms:0.15",
                     "--snr", "1.0, 2.0", "--iters", "12", "--min-errors", "25", "--seed", "3",
                     "--workers", "2"],
        "texit": ["texit", "--decoder", "nms:0.8", "--z", "3", "--snr", "2.5", "--iters", "8",
                  "--frames", "200", "--seed", "4"],
        "cycles": ["cycles", "--z", "8", "--max-len", "6"],
        "train": ["train", str(cfg)],
    }
    compared, mismatched = 0, []
    for name, argv in runs.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert cli_main(argv + ["--out", str(a)]) == 0
        assert cli_main(["rerun", str(a / "manifest.json"), "--out", str(b)]) == 0
        for f in sorted(a.glob("*.csv")) + sorted(a.glob("*.json")):
            if f.name == "manifest.json":
                continue
            compared += 1
            if f.read_bytes() != (b / f.name).read_bytes():
                mismatched.append(f"{name}/{f.name}")
        m = json.loads((a / "manifest.json").read_text())
        assert m["command"] == name
    capsys.readouterr()
    ok = not mismatched and compared > 0
    detail = (f"{compared} output files over {len(runs)} commands re-run from manifests; "
              f"mismatches: {mismatched or 'none'}")
    assert record_acceptance(9, "manifest re-runs reproduce outputs bitwise", ok, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
