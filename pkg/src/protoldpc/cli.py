"""Command-line front end.

Every command that produces files first writes ``manifest.json`` into its
output directory; ``protoldpc rerun <manifest>`` repeats the run exactly.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .decoders import DecoderKind, DecoderParams, load_params, save_params
from .protograph import BaseGraphError, count_short_cycles, lift, load_base_graph, rate_match

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class DataError(click.ClickException):
    exit_code = EXIT_DATA


# --- helpers --------------------------------------------------------------

def _out_dir(out) -> Path:
    p = Path(out or os.environ.get("PROTOLDPC_OUT", "runs"))
    p.mkdir(parents=True, exist_ok=True)
    return p


def _workers(n):
    if n is not None:
        return n
    from .sim import default_workers
    return default_workers()


def _make_code(bg: str, z: int, n_tx=None, lifting_set=None):
    base = load_base_graph(bg)
    code = lift(base, z, lifting_set=lifting_set)
    if n_tx is not None and n_tx != code.n_tx:
        code = rate_match(code, n_tx=n_tx)
    return code


def write_manifest(out: Path, command: str, options: dict, code=None, config_text=None) -> Path:
    """Record everything needed to repeat a run; written before any heavy work."""
    m = {"command": command, "options": options, "seed": options.get("seed"),
         "output_dir": str(out), "version": __version__}
    if config_text is not None:
        m["config"] = config_text
    if code is not None:
        m["code"] = {"base": code.base.name, "base_hash": code.base.hash, "Z": code.Z,
                     "n_tx": code.n_tx, "k": code.k, "rate": code.rate}
    path = out / "manifest.json"
    path.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    return path


def parse_decoder(text: str) -> tuple[str, DecoderParams]:
    """``sp``, ``nms:0.75``, ``oms:0.2`` or ``type1@params.json``."""
    name = text
    path = None
    if "@" in text:
        text, path = text.split("@", 1)
    factor = None
    if ":" in text:
        text, f = text.split(":", 1)
        try:
            factor = float(f)
        except ValueError:
            raise click.BadParameter(f"bad decoder constant in {name!r}") from None
    try:
        kind = DecoderKind.parse(text)
    except ValueError as e:
        raise click.BadParameter(str(e)) from None
    if kind.is_neural:
        if path is None:
            raise click.BadParameter(f"{kind.value} needs a parameter file: {kind.value}@FILE")
        params = load_params(path)
        if params.kind is not kind:
            raise DataError(f"{path} holds {params.kind.value} parameters, not {kind.value}")
        return name, params
    return name, DecoderParams.classical(kind, factor)


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(",", " ").split()]


# --- commands -------------------------------------------------------------

@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Protograph LDPC decoding toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("lift")
@click.option("--bg", default="bg2", show_default=True, help="Base graph file or bundled name.")
@click.option("--z", "z", type=click.IntRange(min=1), required=True, help="Lifting size.")
@click.option("--lifting-set", type=int, default=None)
@click.option("--n-tx", type=click.IntRange(min=1), default=None, help="Rate-match to N bits.")
@click.option("--export-h", type=click.Path(dir_okay=False), default=None,
              help="Write H as 'row col' coordinate lines.")
def cmd_lift(bg, z, lifting_set, n_tx, export_h):
    """Lift a base graph and print the code summary."""
    code = _make_code(bg, z, n_tx, lifting_set)
    click.echo(code.summary())
    click.echo(f"n={code.n} k={code.k} n_tx={code.n_tx} m={code.m} E={code.num_edges} "
               f"R={code.rate:.4f} lifting_set={code.lifting_set}")
    if export_h:
        order = np.lexsort((code.edge_vn, code.edge_cn))
        lines = [f"{code.m} {code.n} {code.num_edges}"]
        lines += [f"{r} {c}" for r, c in zip(code.edge_cn[order], code.edge_vn[order])]
        Path(export_h).write_text("\n".join(lines) + "\n")


@cli.command("cycles")
@click.option("--bg", default="bg2", show_default=True)
@click.option("--z", "z", type=click.IntRange(min=1), required=True)
@click.option("--lifting-set", type=int, default=None)
@click.option("--max-len", type=click.Choice(["4", "6", "8", "10"]), default="6", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def cmd_cycles(bg, z, lifting_set, max_len, out):
    """Count short cycles; CSV 'length,count' on stdout (and in --out)."""
    code = _make_code(bg, z, lifting_set=lifting_set)
    if out:
        d = _out_dir(out)
        write_manifest(d, "cycles", {"bg": bg, "z": z, "lifting_set": lifting_set,
                                     "max_len": max_len}, code)
    csv_text = count_short_cycles(code, int(max_len)).to_csv()
    click.echo(csv_text, nl=False)
    if out:
        (d / "cycles.csv").write_text(csv_text)


@cli.command("encode")
@click.option("--bg", default="bg2", show_default=True)
@click.option("--z", "z", type=click.IntRange(min=1), required=True)
@click.option("--n-tx", type=click.IntRange(min=1), default=None)
@click.option("--count", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def cmd_encode(bg, z, n_tx, count, seed, out):
    """Encode random information words; one codeword per line as a bit string."""
    code = _make_code(bg, z, n_tx)
    d = _out_dir(out) if out else None
    if d:
        write_manifest(d, "encode", {"bg": bg, "z": z, "n_tx": n_tx, "count": count,
                                     "seed": seed}, code)
    x = code.encode(count, np.random.default_rng(seed))
    if not np.all(code.check_syndrome(x)):
        raise click.ClickException("internal error: encoder produced a non-codeword")
    text = "".join("".join(map(str, row)) + "\n" for row in x.tolist())
    if d:
        (d / "codewords.txt").write_text(text)
    else:
        click.echo(text, nl=False)


def _sweep_options(f):
    opts = [
        click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="INI file with a [sweep] section; flags override it."),
        click.option("--bg", default=None),
        click.option("--z", "z", type=click.IntRange(min=1), default=None),
        click.option("--n-tx", type=click.IntRange(min=1), default=None),
        click.option("--decoder", "decoders", multiple=True,
                     help="sp, ms, nms[:a], oms[:b], typeN@FILE, neural-sp@FILE (repeatable)."),
        click.option("--iters", type=click.IntRange(min=1), default=None),
        click.option("--seed", type=int, default=None),
        click.option("--workers", type=click.IntRange(min=1), default=None),
        click.option("--min-errors", type=click.IntRange(min=1), default=None),
        click.option("--max-frames", type=click.IntRange(min=1), default=None),
        click.option("--channel", type=click.Choice(["awgn", "rayleigh"]), default=None),
        click.option("--out", type=click.Path(file_okay=False), default=None),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _sweep_settings(config, **flags):
    """Merge a [sweep] INI section with command-line flags (flags win)."""
    s = {"bg": "bg2", "z": None, "n_tx": None, "decoders": (), "iters": 25, "seed": 0,
         "min_errors": 100, "max_frames": None, "channel": "awgn", "snr": None,
         "target": 1e-2, "resolution": 0.05}
    text = None
    if config:
        text = Path(config).read_text()
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise DataError(f"{config}: {e}") from None
        if "sweep" not in cp:
            raise DataError(f"{config}: missing [sweep] section")
        sec = cp["sweep"]
        conv = {"z": int, "n_tx": int, "iters": int, "seed": int, "min_errors": int,
                "max_frames": int, "target": float, "resolution": float}
        for key, raw in sec.items():
            key = key.replace("-", "_")
            if key not in s:
                raise DataError(f"{config}: unknown [sweep] key {key!r}")
            try:
                if key == "decoders":
                    s[key] = tuple(raw.split())
                elif key in conv:
                    s[key] = conv[key](raw)
                else:
                    s[key] = raw.strip()
            except ValueError:
                raise DataError(f"{config}: bad value for {key}: {raw!r}") from None
    for key, val in flags.items():
        if val is not None and val != ():
            s[key] = val
    if s["z"] is None:
        raise click.UsageError("--z is required (flag or [sweep] z)")
    if not s["decoders"]:
        raise click.UsageError("at least one --decoder is required")
    return s, text


@cli.command("simulate")
@_sweep_options
@click.option("--snr", type=str, default=None, help="Comma-separated Eb/N0 points in dB.")
def cmd_simulate(config, bg, z, n_tx, decoders, iters, seed, workers, min_errors, max_frames,
                 channel, out, snr):
    """Monte-Carlo BER/BLER sweep; writes results.csv."""
    from .sim import SweepSpec, run_sweep

    s, text = _sweep_settings(config, bg=bg, z=z, n_tx=n_tx, decoders=decoders, iters=iters,
                              seed=seed, min_errors=min_errors, max_frames=max_frames,
                              channel=channel, snr=snr)
    if s["snr"] is None:
        raise click.UsageError("--snr is required")
    if s["max_frames"] is None:
        s["max_frames"] = 10_000_000
    decs = dict(parse_decoder(d) for d in s["decoders"])
    code = _make_code(s["bg"], s["z"], s["n_tx"])
    d = _out_dir(out)
    workers = _workers(workers)
    write_manifest(d, "simulate", {**s, "decoders": list(s["decoders"]), "workers": workers},
                   code, text)
    try:
        spec = SweepSpec(code=code, decoders=decs, snr_db=_floats(s["snr"]), max_iter=s["iters"],
                         min_block_errors=s["min_errors"], max_frames=s["max_frames"],
                         seed=s["seed"], channel=s["channel"])
    except ValueError as e:
        raise DataError(str(e)) from None
    res = run_sweep(spec, workers)
    csv_text = res.to_csv()
    (d / "results.csv").write_text(csv_text)
    click.echo(csv_text, nl=False)


@cli.command("required-snr")
@_sweep_options
@click.option("--target", type=float, default=None, help="Target BLER (default 1e-2).")
@click.option("--resolution", type=float, default=None)
def cmd_required_snr(config, bg, z, n_tx, decoders, iters, seed, workers, min_errors,
                     max_frames, channel, out, target, resolution):
    """Bisection for the SNR reaching a target BLER; writes required_snr.csv."""
    from .sim import required_snr

    s, text = _sweep_settings(config, bg=bg, z=z, n_tx=n_tx, decoders=decoders, iters=iters,
                              seed=seed, min_errors=min_errors, max_frames=max_frames,
                              channel=channel, target=target, resolution=resolution)
    if s["max_frames"] is None:
        s["max_frames"] = 1_000_000
    decs = [parse_decoder(d) for d in s["decoders"]]
    code = _make_code(s["bg"], s["z"], s["n_tx"])
    d = _out_dir(out)
    workers = _workers(workers)
    write_manifest(d, "required-snr", {**s, "decoders": list(s["decoders"]),
                                       "workers": workers}, code, text)
    lines = ["decoder,iters,target_bler,snr_db"]
    for name, p in decs:
        try:
            v = required_snr(code, p, s["iters"], s["target"], s["resolution"],
                             min_block_errors=s["min_errors"], max_frames=s["max_frames"],
                             seed=s["seed"], workers=workers)
        except ValueError as e:
            raise DataError(f"{name}: {e}") from None
        lines.append(f"{name},{s['iters']},{s['target']!r},{v!r}")
    text_out = "\n".join(lines) + "\n"
    (d / "required_snr.csv").write_text(text_out)
    click.echo(text_out, nl=False)


def load_training_config(path):
    """Parse a training INI file into (TrainingConfig kwargs, kind, snr options)."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        codes_sec, tr, snr = cp["codes"], cp["training"], cp["snr"]
        base = load_base_graph(codes_sec.get("base", "bg2"))
        codes = []
        for item in codes_sec["lifting"].replace(",", " ").split():
            z, _, n = item.partition(":")
            c = lift(base, int(z))
            codes.append(rate_match(c, n_tx=int(n)) if n else c)
        kind = DecoderKind.parse(tr.get("kind", "type1"))
        kw = {"codes": codes,
              "max_iterations": tr.getint("max_iterations", 25),
              "batches_per_iteration": tr.getint("batches_per_iteration", 50000),
              "batch_size": tr.getint("batch_size", 50),
              "learning_rate": tr.getfloat("learning_rate", 1e-3),
              "seed": tr.getint("seed", 0),
              "plateau_window": tr.getint("plateau_window", 1000),
              "plateau_tol": tr.getfloat("plateau_tol", 1e-4),
              "random_init": tr.getboolean("random_init", False),
              "multi_loss": tr.getboolean("multi_loss", False)}
        snr_opts = {"table": snr.get("table", "auto").strip(),
                    "target_ber": snr.getfloat("target_ber", 1e-3),
                    "frames": snr.getint("frames", 2000),
                    "ref_iters": snr.getint("ref_iters", 50),
                    "schedule": snr.get("schedule", "").strip() or None}
    except (configparser.Error, KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None
    return kw, kind, snr_opts, text


@cli.command("train")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--resume", is_flag=True, help="Continue after the last checkpoint in --out.")
@click.option("--workers", type=click.IntRange(min=1), default=None,
              help="Accepted for interface symmetry; training runs in one process.")
def cmd_train(config, out, resume, workers):
    """Greedy iteration-by-iteration training from an INI config."""
    from .training import TrainingConfig, build_snr_table, train_greedy

    kw, kind, snr_opts, text = load_training_config(config)
    d = _out_dir(out)
    write_manifest(d, "train", {"config": str(config), "resume": resume, "seed": kw["seed"],
                                "workers": 1}, kw["codes"][0], text)
    I, ncodes = kw["max_iterations"], len(kw["codes"])
    table_path = d / "snr_table.csv"
    schedule = _floats(snr_opts["schedule"]) if snr_opts["schedule"] else None
    if snr_opts["table"].lower() == "auto":
        if resume and table_path.exists():
            table = np.loadtxt(table_path, delimiter=",", skiprows=1, ndmin=2)
        else:
            table = build_snr_table(kw["codes"], snr_opts["target_ber"], I, snr_opts["ref_iters"],
                                    snr_opts["frames"], schedule=schedule, seed=kw["seed"])
    else:
        vals = np.array(_floats(snr_opts["table"]))
        if vals.size == ncodes:
            table = np.tile(vals, (I, 1))
        elif vals.size == I * ncodes:
            table = vals.reshape(I, ncodes)
        else:
            raise DataError(f"[snr] table needs {ncodes} or {I * ncodes} values")
        if schedule is not None:
            table = table + np.asarray(schedule)[:, None]
    header = ",".join(c.label for c in kw["codes"])
    np.savetxt(table_path, table, delimiter=",", header=header, comments="", fmt="%.17g")
    try:
        cfg = TrainingConfig(snr_table=table, **kw)
    except ValueError as e:
        raise DataError(str(e)) from None
    params = train_greedy(cfg, kind, out_dir=d, resume=resume)
    save_params(params, d / "params.json")
    click.echo(f"trained {kind.value} for {I} iterations; parameters in {d / 'params.json'}")


@cli.command("texit")
@click.option("--decoder", "decoder", required=True)
@click.option("--bg", default="bg2", show_default=True)
@click.option("--z", "z", type=click.IntRange(min=1), required=True)
@click.option("--n-tx", type=click.IntRange(min=1), default=None)
@click.option("--snr", type=float, required=True)
@click.option("--iters", type=click.IntRange(min=2), default=25, show_default=True)
@click.option("--frames", type=click.IntRange(min=1), default=5000, show_default=True)
@click.option("--bins", type=click.IntRange(min=2), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def cmd_texit(decoder, bg, z, n_tx, snr, iters, frames, bins, seed, out):
    """T-EXIT trajectory, transfer curves and fixed point as CSV files."""
    from .texit import build_exit, collect_llrs

    name, params = parse_decoder(decoder)
    code = _make_code(bg, z, n_tx)
    d = _out_dir(out)
    write_manifest(d, "texit", {"decoder": decoder, "bg": bg, "z": z, "n_tx": n_tx, "snr": snr,
                                "iters": iters, "frames": frames, "bins": bins, "seed": seed},
                   code)
    samples = collect_llrs(code, params, snr, frames, iters, np.random.default_rng(seed))
    rec = build_exit(samples, bins)
    rec.write_csv(d)
    summary = rec.summary()
    (d / "summary.txt").write_text(summary + "\n")
    click.echo(summary)


@cli.group("params")
def cmd_params():
    """Parameter-file utilities."""


@cmd_params.command("inspect")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def cmd_params_inspect(path):
    """Print a parameter file's header and per-iteration summaries."""
    try:
        p = load_params(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: {e}") from None
    click.echo(f"kind={p.kind.value} iterations={p.iterations} E_b={p.num_types} "
               f"base={p.base_name or '-'} hash={p.base_hash or '-'}")
    if p.kind.is_neural:
        click.echo("iteration,alpha_mean,alpha_min,alpha_max,beta_mean,gamma_mean")
        for i in range(p.iterations):
            a, b, g = p.alpha[i], p.beta[i], p.gamma[i]
            click.echo(f"{i + 1},{a.mean():.4f},{a.min():.4f},{a.max():.4f},"
                       f"{b.mean():.4f},{g.mean():.4f}")
    elif p.factor is not None:
        click.echo(f"factor={p.factor}")


@cli.command("rerun")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_rerun(manifest, out):
    """Repeat the run recorded in MANIFEST with its options, writing into --out."""
    m = json.loads(Path(manifest).read_text())
    argv = manifest_argv(m, out)
    cli.main(args=argv, standalone_mode=False)


def manifest_argv(m: dict, out) -> list[str]:
    cmd, o = m["command"], dict(m["options"])
    if cmd == "train":
        cfg = Path(out) / "train_config.ini"
        Path(out).mkdir(parents=True, exist_ok=True)
        cfg.write_text(m["config"])
        return ["train", str(cfg), "--out", str(out)]
    argv = [cmd]
    if cmd in ("simulate", "required-snr"):
        for key in ("bg", "z", "n_tx", "iters", "seed", "workers", "min_errors", "max_frames",
                    "channel"):
            if o.get(key) is not None:
                argv += [f"--{key.replace('_', '-')}", str(o[key])]
        for dec in o["decoders"]:
            argv += ["--decoder", dec]
        if cmd == "simulate":
            argv += ["--snr", str(o["snr"])]
        else:
            argv += ["--target", repr(o["target"]), "--resolution", repr(o["resolution"])]
    else:
        for key, val in o.items():
            if val is not None:
                argv += [f"--{key.replace('_', '-')}", str(val)]
    return argv + ["--out", str(out)]


def main(argv=None):
    from .training import TrainingDivergence

    try:
        cli.main(args=argv, prog_name="protoldpc", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except (TrainingDivergence, FloatingPointError) as e:
        click.echo(f"numerical failure: {e}", err=True)
        return EXIT_NUMERIC
    except (BaseGraphError, ValueError, FileNotFoundError, OSError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
