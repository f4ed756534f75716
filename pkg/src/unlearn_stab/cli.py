"""Command-line driver.

One flat option table serves every mode; values resolve in three
layers: documented defaults, then a ``key=value`` config file
(``--config``), then explicit command-line flags.  The effective
configuration (mode, seed, and every option the mode consumes) is
echoed as ``# key=value`` comment lines at the top of the output, and
feeding those lines back as a config file reproduces the output
byte-for-byte.

Exit codes: 0 success, 2 configuration error (unknown key, bad value),
3 runtime failure; ``verify`` exits 1 when a criterion fails.  Output
files are written to a temporary sibling and renamed on success, so a
failed run never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import cnnmem, dynsim, stability
from .acceptance import AcceptanceSuite
from .coherence import (
    HessianEnsemble,
    UnlearnConfig,
    load_ensemble,
    mix_coherence,
    single_coherence,
)
from .errors import ConfigError, UnlearnStabError
from .synthetic import QConstructionSpec, build_q_construction

MODES = (
    "sweep",
    "simulate",
    "coherence",
    "cnn-train",
    "cnn-heatmap",
    "coherence-curve",
    "verify",
)

SEED_ENV_VAR = "UNLEARN_STAB_SEED"
DEFAULT_SEED = 42

SIMULATE_CSV_HEADER = "repeat,seed,norm_start,norm_end,ratio,diverged"


@dataclass(frozen=True)
class Option:
    name: str  # dashed flag name without leading --
    kind: str  # int | float | str | flag | int_list | float_list
    default: object
    help: str
    modes: tuple


OPTIONS = (
    Option("seed", "int", DEFAULT_SEED,
           f"master seed; falls back to ${SEED_ENV_VAR} when unset", MODES),
    Option("output", "str", None, "output path (default: <mode>.csv or <mode>.txt)",
           MODES[:-1]),
    Option("workers", "int", 1, "parallel worker processes (results independent of N)",
           ("sweep",)),
    Option("emit-plot-data", "flag", False,
           "also write gnuplot-ready columnar data next to the output",
           ("sweep", "cnn-heatmap")),
    Option("eta", "float", 0.5, "learning rate", ("sweep", "simulate", "coherence")),
    Option("alpha", "float", 0.1, "forget importance in [0,1]",
           ("sweep", "simulate", "coherence", "cnn-heatmap", "coherence-curve")),
    Option("n-r", "int", 50, "retain-set size", ("sweep",)),
    Option("n-f", "int", 50, "forget-set size", ("sweep",)),
    Option("q-list", "int_list", (1, 2, 5, 10, 25, 50),
           "aligned-sample counts for the construction grid", ("sweep",)),
    Option("b-list", "int_list", (2, 5, 10, 20, 40), "batch sizes for the grid",
           ("sweep",)),
    Option("steps", "int", 1000, "update steps per trajectory", ("sweep", "simulate")),
    Option("repeats", "int", 10, "trajectories per cell / point",
           ("sweep", "simulate", "cnn-heatmap", "coherence-curve")),
    Option("divergence-ratio", "float", 1000.0,
           "norm growth factor that flags divergence", ("sweep", "simulate")),
    Option("ensemble", "str", "", "ensemble file (empty = built-in demo construction)",
           ("simulate", "coherence")),
    Option("batch", "int", 5, "Bernoulli batch size",
           ("simulate", "coherence", "coherence-curve")),
    Option("single-set", "flag", False,
           "coherence of the retain list alone instead of the mixed measure",
           ("coherence",)),
    Option("n", "int", 50, "training-set size", ("cnn-train", "cnn-heatmap")),
    Option("d", "int", 500, "patch dimension", ("cnn-train", "coherence-curve")),
    Option("mu-norm", "float", 3.0, "signal strength ||mu||", ("cnn-train",)),
    Option("noise-sigma", "float", 1.0, "noise standard deviation",
           ("cnn-train", "cnn-heatmap", "coherence-curve")),
    Option("m", "int", 10, "filters per class", ("cnn-train", "cnn-heatmap",
                                                 "coherence-curve")),
    Option("lr", "float", 0.1, "training learning rate", ("cnn-train",)),
    Option("epochs", "int", 100, "full-batch training epochs",
           ("cnn-train", "cnn-heatmap", "coherence-curve")),
    Option("init-scale", "float", 0.01, "weight init standard deviation",
           ("cnn-train", "cnn-heatmap", "coherence-curve")),
    Option("n-test", "int", 1000, "fresh samples for the test error",
           ("cnn-train", "cnn-heatmap")),
    Option("signal-grid", "float_list", cnnmem.DEFAULT_SIGNAL_GRID,
           "signal strengths for the heatmap", ("cnn-heatmap",)),
    Option("d-grid", "int_list", cnnmem.DEFAULT_D_GRID,
           "dimensions for the heatmap", ("cnn-heatmap",)),
    Option("train-lr", "float", 0.1, "training learning rate",
           ("cnn-heatmap", "coherence-curve")),
    Option("unlearn-batch", "int", 5, "unlearning batch size", ("cnn-heatmap",)),
    Option("unlearn-lr", "float", 0.1, "unlearning learning rate", ("cnn-heatmap",)),
    Option("unlearn-steps", "int", 90, "unlearning steps", ("cnn-heatmap",)),
    Option("snr-list", "float_list", (0.05, 0.15, 0.3, 0.5),
           "SNR values for the ratio curve", ("coherence-curve",)),
    Option("n-r-curve", "int", 10, "retain samples for the ratio curve",
           ("coherence-curve",)),
    Option("n-f-curve", "int", 10, "forget samples for the ratio curve",
           ("coherence-curve",)),
    Option("quick", "flag", True, "reduced verification grids (about five minutes)",
           ("verify",)),
    Option("full", "flag", False, "full verification grids (overrides --quick)",
           ("verify",)),
    Option("criteria", "str", "",
           "comma-separated subset of criterion names to run", ("verify",)),
)

_BY_KEY = {opt.name.replace("-", "_"): opt for opt in OPTIONS}


def _parse_value(opt: Option, raw: str):
    try:
        if opt.kind == "int":
            return int(raw)
        if opt.kind == "float":
            return float(raw)
        if opt.kind == "str":
            return raw
        if opt.kind == "flag":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if opt.kind == "int_list":
            return tuple(int(x) for x in raw.split(",") if x != "")
        if opt.kind == "float_list":
            return tuple(float(x) for x in raw.split(",") if x != "")
    except ValueError as exc:
        raise ConfigError(f"bad value for {opt.name}: {exc}") from exc
    raise ConfigError(f"unhandled option kind {opt.kind}")


def _format_value(opt: Option, value) -> str:
    if opt.kind == "float":
        return f"{value:.17g}"
    if opt.kind == "flag":
        return "true" if value else "false"
    if opt.kind == "int_list":
        return ",".join(str(v) for v in value)
    if opt.kind == "float_list":
        return ",".join(f"{v:.17g}" for v in value)
    return str(value)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearn-stab",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("mode", nargs="?", choices=MODES,
                        help="experiment mode (default: simulate, or the config file's)")
    parser.add_argument("--config", help="flat key=value config file")
    for opt in OPTIONS:
        flag = f"--{opt.name}"
        helptext = f"{opt.help} (default: {_format_value(opt, opt.default) if opt.default is not None else 'per mode'})"
        if opt.kind == "flag":
            parser.add_argument(flag, action="store_const", const=True, default=None,
                                help=helptext)
        else:
            parser.add_argument(flag, default=None, metavar=opt.kind.upper(),
                                help=helptext)
    return parser


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        if key == "mode":
            if raw not in MODES:
                raise ConfigError(f"{path}:{lineno}: unknown mode {raw!r}")
            values["mode"] = raw
        elif key in _BY_KEY:
            values[key] = _parse_value(_BY_KEY[key], raw)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return values


def resolve_config(argv) -> dict:
    """Layer defaults <- config file <- command-line flags."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    resolved = {key: opt.default for key, opt in _BY_KEY.items()}
    resolved["mode"] = "simulate"
    if args.config:
        resolved.update(_read_config_file(args.config))
    if args.mode:
        resolved["mode"] = args.mode
    for key, opt in _BY_KEY.items():
        raw = getattr(args, key)
        if raw is None:
            continue
        resolved[key] = raw if opt.kind == "flag" else _parse_value(opt, str(raw))
    if getattr(args, "seed") is None and "seed" not in (
        _read_config_file(args.config) if args.config else {}
    ):
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            resolved["seed"] = _parse_value(_BY_KEY["seed"], env)
    return resolved


def _effective_lines(config: dict) -> list[str]:
    mode = config["mode"]
    lines = [f"mode={mode}"]
    for opt in OPTIONS:
        if mode not in opt.modes:
            continue
        key = opt.name.replace("-", "_")
        value = config[key]
        if opt.name == "output":
            value = _default_output(config) if value is None else value
        lines.append(f"{opt.name}={_format_value(opt, value)}")
    return lines


def _default_output(config: dict) -> str:
    mode = config["mode"]
    suffix = ".txt" if mode in ("coherence", "cnn-train") else ".csv"
    return mode.replace("-", "_") + suffix


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".part"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _demo_ensemble() -> HessianEnsemble:
    return build_q_construction(QConstructionSpec(n=10, q=5))


def _load_or_demo(path: str) -> HessianEnsemble:
    return load_ensemble(path) if path else _demo_ensemble()


def _comments(config: dict) -> list[str]:
    return _effective_lines(config)


def _run_sweep(config: dict) -> None:
    template = UnlearnConfig(
        eta=config["eta"], alpha=config["alpha"], batch=min(config["b_list"]),
        n_retain=config["n_r"], n_forget=config["n_f"],
    )
    cells = dynsim.boundary_sweep(
        config["q_list"], config["b_list"], template,
        steps=config["steps"], repeats=config["repeats"],
        master_seed=config["seed"], divergence_ratio=config["divergence_ratio"],
        workers=config["workers"],
    )
    out = config["output"] or _default_output(config)
    _write_atomic(out, dynsim.format_sweep_csv(cells, comments=_comments(config)))
    if config["emit_plot_data"]:
        lines = [f"# {c}" for c in _comments(config)]
        lines.append("# batch sigma_div sigma_conv_statement sigma_conv_proof")
        for batch in config["b_list"]:
            cell = next(c for c in cells if c.batch == batch)
            cfg_b = UnlearnConfig(
                eta=config["eta"], alpha=config["alpha"], batch=batch,
                n_retain=config["n_r"], n_forget=config["n_f"],
            )
            try:
                div = stability.divergence_sigma_curve(cfg_b, cell.lambda_max_d)
                stmt = stability.convergence_sigma_curve(cfg_b, cell.lambda_max_d, "statement")
                proof = stability.convergence_sigma_curve(cfg_b, cell.lambda_max_d, "proof")
                lines.append(f"{batch} {div:.12g} {stmt:.12g} {proof:.12g}")
            except UnlearnStabError:
                lines.append(f"{batch} nan nan nan")
        _write_atomic(out + ".plot", "\n".join(lines) + "\n")
    print(f"wrote {out} ({len(cells)} cells)")


def _run_simulate(config: dict) -> None:
    ensemble = _load_or_demo(config["ensemble"])
    ucfg = UnlearnConfig(
        eta=config["eta"], alpha=config["alpha"], batch=config["batch"],
        n_retain=ensemble.n_retain, n_forget=ensemble.n_forget,
    )
    rows = []
    for rep in range(config["repeats"]):
        seed = dynsim.derive_seed(config["seed"], rep)
        traj = dynsim.run_trajectory(
            ensemble, ucfg, config["steps"], seed,
            divergence_ratio=config["divergence_ratio"],
        )
        ratio = traj.norms[-1] / traj.norms[0]
        rows.append(
            f"{rep},{seed},{traj.norms[0]:.12g},{traj.norms[-1]:.12g},"
            f"{ratio:.12g},{int(traj.diverged)}"
        )
    out = config["output"] or _default_output(config)
    text = "\n".join(
        [f"# {c}" for c in _comments(config)] + [SIMULATE_CSV_HEADER] + rows
    ) + "\n"
    _write_atomic(out, text)
    print(f"wrote {out} ({len(rows)} trajectories)")


def _run_coherence(config: dict) -> None:
    ensemble = _load_or_demo(config["ensemble"])
    out = config["output"] or _default_output(config)
    header = "".join(f"# {c}\n" for c in _comments(config))
    if config["single_set"]:
        result = single_coherence(ensemble.retain)
        body = (
            f"sigma={result.sigma:.12g}\n"
            f"max_pair_lambda={result.max_pair_lambda:.12g}\n"
            f"lambda_max_D={result.lambda_max_d:.12g}\n"
        )
        _write_atomic(out, header + body)
    else:
        ucfg = UnlearnConfig(
            eta=config["eta"], alpha=config["alpha"], batch=config["batch"],
            n_retain=ensemble.n_retain, n_forget=ensemble.n_forget,
        )
        report = stability.build_report(ensemble, ucfg)
        _write_atomic(out, header + report.to_text())
    print(f"wrote {out}")


def _run_cnn_train(config: dict) -> None:
    rng = np.random.default_rng(config["seed"])
    data = cnnmem.generate_dataset(
        config["n"], config["d"], config["mu_norm"], config["noise_sigma"], rng
    )
    result = cnnmem.train_full_batch(
        data, config["m"], config["lr"], config["epochs"], config["init_scale"], rng
    )
    err = cnnmem.test_error(
        result.model, config["n_test"], config["d"], config["mu_norm"],
        config["noise_sigma"], rng,
    )
    out = config["output"] or _default_output(config)
    header = "".join(f"# {c}\n" for c in _comments(config))
    body = (
        f"train_loss={result.final_loss:.12g}\n"
        f"loss_warning={int(result.loss_warning)}\n"
        f"test_error={err:.12g}\n"
        f"snr={data.snr:.12g}\n"
    )
    _write_atomic(out, header + body)
    print(f"wrote {out}")


def _run_cnn_heatmap(config: dict) -> None:
    cells = cnnmem.snr_heatmap(
        config["signal_grid"], config["d_grid"], repeats=config["repeats"],
        master_seed=config["seed"], n=config["n"], noise_sigma=config["noise_sigma"],
        m=config["m"], train_lr=config["train_lr"], epochs=config["epochs"],
        init_scale=config["init_scale"], n_test=config["n_test"],
        unlearn_batch=config["unlearn_batch"], unlearn_lr=config["unlearn_lr"],
        alpha=config["alpha"], unlearn_steps=config["unlearn_steps"],
    )
    out = config["output"] or _default_output(config)
    _write_atomic(out, cnnmem.format_heatmap_csv(cells, comments=_comments(config)))
    if config["emit_plot_data"]:
        lines = [f"# {c}" for c in _comments(config)]
        lines.append("# signal_norm d snr train_loss test_error forget_loss")
        last_signal = None
        for c in cells:
            if last_signal is not None and c.signal_norm != last_signal:
                lines.append("")  # gnuplot grid scanline separator
            last_signal = c.signal_norm
            lines.append(
                f"{c.signal_norm:.12g} {c.d} {c.snr:.12g} {c.train_loss:.12g} "
                f"{c.test_error:.12g} {c.forget_loss:.12g}"
            )
        _write_atomic(out + ".plot", "\n".join(lines) + "\n")
    print(f"wrote {out} ({len(cells)} cells)")


def _run_coherence_curve(config: dict) -> None:
    points = cnnmem.coherence_ratio_curve(
        config["snr_list"], config["d"], repeats=config["repeats"],
        master_seed=config["seed"], n_r=config["n_r_curve"], n_f=config["n_f_curve"],
        noise_sigma=config["noise_sigma"], m=config["m"],
        train_lr=config["train_lr"], epochs=config["epochs"],
        init_scale=config["init_scale"], alpha=config["alpha"],
        batch=config["batch"],
    )
    out = config["output"] or _default_output(config)
    _write_atomic(out, cnnmem.format_curve_csv(points, comments=_comments(config)))
    print(f"wrote {out} ({len(points)} points)")


def _run_verify(config: dict) -> int:
    quick = not config["full"]
    suite = AcceptanceSuite(quick=quick, master_seed=config["seed"])
    names = None
    if config["criteria"]:
        names = []
        for token in config["criteria"].split(","):
            token = token.strip()
            name = token if token.startswith("criterion_") else f"criterion_{token}"
            if name not in AcceptanceSuite.CRITERIA:
                raise ConfigError(f"unknown criterion {token!r}")
            names.append(name)
    results = suite.run_all(emit=print, names=names)
    return 0 if all(r.passed for r in results) else 1


_RUNNERS = {
    "sweep": _run_sweep,
    "simulate": _run_simulate,
    "coherence": _run_coherence,
    "cnn-train": _run_cnn_train,
    "cnn-heatmap": _run_cnn_heatmap,
    "coherence-curve": _run_coherence_curve,
}


def main(argv=None) -> int:
    try:
        config = resolve_config(argv if argv is not None else sys.argv[1:])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    mode = config["mode"]
    try:
        if mode == "verify":
            return _run_verify(config)
        _RUNNERS[mode](config)
        return 0
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UnlearnStabError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
