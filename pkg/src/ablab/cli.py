"""``ablab`` command line: trajectories, ensembles, time-tag runs, fits, plans, sweeps.

Configuration is a flat ``key = value`` document.  Defaults are overridden
by ``--config FILE`` and then by per-key flags (``--n-pulses 200``).  Time
values need a unit suffix (``ns``, ``us``, ``ms``, ``s``).

Exit codes: 0 ok, 1 invalid configuration, 2 runtime failure, 3 threshold
breach.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import re
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .analytics import FitError, fit_efficiency_curve, invert_fit
from .dynamics import (DriveSchedule, SettingSchedule, integrate, random_history,
                       write_trajectory_csv)
from .ensemble import (InitialSpread, PhotonStreamParams, PulseEnsembleParams, distance_sweep,
                       ensemble_efficiency, generate_photon_stream, write_curve_csv,
                       write_sweep_csv)
from .hvcore import CHSH_SETTINGS, DetectionModel, ParameterError
from .timetag import (ExperimentPlan, FormatError, chsh_timeseries, efficiency_timeseries,
                      plan_check, plan_ok, read_run, read_timeseries_csv, write_run,
                      write_timeseries_csv)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3

_TIME_UNITS = {"ps": 1e-12, "ns": 1e-9, "us": 1e-6, "µs": 1e-6, "ms": 1e-3, "s": 1.0}
_TIME_RE = re.compile(r"^\s*([-+0-9.eE]+)\s*(ps|ns|us|µs|ms|s)\s*$")
_RATE_RE = re.compile(r"^\s*([-+0-9.eE]+)\s*/\s*(ps|ns|us|µs|ms|s)\s*$")


class ConfigError(ValueError):
    """Bad configuration key or value."""


def parse_time(text: str) -> float:
    m = _TIME_RE.match(text)
    if not m:
        raise ConfigError(f"{text!r} is not a time with a unit suffix (ns, us, ms, s)")
    return float(m.group(1)) * _TIME_UNITS[m.group(2)]


def parse_rate(text: str) -> float:
    """Rates such as ``1.2e-3/ns``; returned per second."""
    m = _RATE_RE.match(text)
    if not m:
        raise ConfigError(f"{text!r} is not a rate like 1.2e-3/ns")
    return float(m.group(1)) / _TIME_UNITS[m.group(2)]


def _opt(parse):
    def inner(text):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _list(parse):
    def inner(text):
        return [parse(x) for x in text.split(",") if x.strip()]
    return inner


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{text!r} is not a boolean")


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{text!r} is not an integer") from None


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{text!r} is not a number") from None


@dataclass(frozen=True)
class Key:
    default: str
    parse: Callable
    help: str


KEYS: dict[str, Key] = {
    # grid and dynamics
    "tau": Key("100ns", parse_time, "reaction delay tau = L/c"),
    "n_substeps": Key("500", _int, "grid steps per tau (even)"),
    "duration": Key("2us", parse_time, "simulated time per pulse, history included"),
    "gamma": Key("", _opt(_list(_float)),
                 "Gamma*tau values, comma separated (default: 0.1,1/e,1 for trajectory, 1/e otherwise)"),
    "t_on": Key("0s", parse_time, "pump switch-on time"),
    "pulse_duration": Key("none", _opt(parse_time), "pump pulse width (none: stays on)"),
    "rise_fall": Key("0s", parse_time, "pump ramp time"),
    "period": Key("none", _opt(parse_time), "pulse repetition time 1/R_p"),
    "setting_a": Key("0.7853981633974483", _float, "analyzer angle at A (rad)"),
    "setting_b": Key("0.39269908169872414", _float, "analyzer angle at B (rad)"),
    "history": Key("random", str, "trajectory history: random or constant"),
    "alpha_tau": Key("0.0", _opt(_float), "alpha(tau) for trajectory (none: keep the random draw)"),
    "beta_tau": Key("0.0", _opt(_float), "beta(tau) for trajectory (none: keep the random draw)"),
    # detection and ensemble
    "model": Key("gaussian", str, "detection model: gaussian or slit"),
    "delta": Key("0.31622776601683794", _float, "model width Delta (rad)"),
    "n_pulses": Key("1000", _int, "pulses per ensemble or run"),
    "seed": Key("1", _int, "master seed"),
    "initial_spread": Key("full_circle", str, "alpha(tau) distribution: full_circle or unit_interval"),
    "memory_tau_d": Key("none", _opt(parse_time), "decay time of the pulse-to-pulse memory"),
    "chunk_size": Key("64", _int, "pulses per work chunk"),
    "stride": Key("1", _int, "keep every stride-th grid point in curves"),
    "workers": Key("1", _int, "worker threads"),
    "station": Key("B", str, "station whose singles normalize eta"),
    "max_divergent_fraction": Key("1.0", _float, "ensemble: exit 3 above this divergent fraction"),
    # event generation and analysis
    "emission_prob": Key("0.05", _float, "pair emission probability per tau_res bin"),
    "tau_res": Key("10ns", parse_time, "time-tagger resolution (tick length)"),
    "chsh": Key("false", _bool, "generate: four runs at the CHSH settings; analyze: S(t)"),
    "input": Key("", _list(str), "input files, comma separated"),
    "window": Key("0s", parse_time, "coincidence half-window"),
    "bin_width": Key("10ns", parse_time, "analysis bin width"),
    "offset_windows": Key("0", _int, "offset windows for the accidental estimate"),
    "t0": Key("0s", parse_time, "time origin subtracted from bin centres"),
    # fit
    "eta0": Key("none", _opt(_float), "fit: measured efficiency at the origin"),
    "slope": Key("none", _opt(parse_rate), "fit: measured initial slope, e.g. 1.2e-3/ns"),
    "correction_factor": Key("1.0", _float, "fit: loss correction factor (>= 1)"),
    "expect_delta": Key("none", _opt(_float), "fit: exit 3 if Delta misses this by > rel_tol"),
    "expect_gamma": Key("none", _opt(parse_rate), "fit: exit 3 if Gamma misses this by > rel_tol"),
    "rel_tol": Key("0.15", _float, "fit: relative tolerance for the expectations"),
    # plan
    "tau_rf": Key("none", _opt(parse_time), "plan: pump rise/fall time"),
    "tau_pulse": Key("none", _opt(parse_time), "plan: pump pulse duration"),
    "rp_inverse": Key("none", _opt(parse_time), "plan: pulse repetition time"),
    "tau_d": Key("none", _opt(parse_time), "plan: assumed decay time"),
    # sweep
    "taus": Key("100ns,200ns", _list(parse_time), "sweep: tau values"),
    "hold": Key("gamma_tau", str, "sweep: keep gamma_tau or gamma fixed"),
}

COMMANDS = ("trajectory", "ensemble", "generate", "analyze", "fit", "plan", "sweep")
COMMAND_HELP = {
    "trajectory": "integrate one (alpha, beta) pair per Gamma*tau and write it as CSV",
    "ensemble": "average the efficiency over many pulses and write the curve",
    "generate": "simulate time-tagged detection runs (four CHSH settings with --chsh true)",
    "analyze": "bin runs into efficiency and CHSH time series",
    "fit": "recover (Delta, Gamma) from a time series or from --eta0/--slope",
    "plan": "check an experiment plan against the timing requirements",
    "sweep": "saturation time and oscillation period versus tau",
}


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {k!r}")
        out[k] = v
    return out


def resolve_config(file_values: dict, flag_values: dict) -> tuple[dict, dict]:
    """Merge the layers; returns parsed values and the raw strings."""
    raw = {k: spec.default for k, spec in KEYS.items()}
    raw.update(file_values)
    raw.update({k: v for k, v in flag_values.items() if v is not None})
    cfg = {}
    for k, text in raw.items():
        try:
            cfg[k] = KEYS[k].parse(text)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"{k}: {exc}") from None
    return cfg, raw


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def _gammas(cfg, default):
    return cfg["gamma"] if cfg["gamma"] else list(default)


def _drive(cfg, gamma_tau: float) -> DriveSchedule:
    return DriveSchedule(gamma_peak=gamma_tau / cfg["tau"], t_on=cfg["t_on"],
                         pulse_duration=cfg["pulse_duration"], rise_fall=cfg["rise_fall"],
                         period=cfg["period"])


def _ensemble_params(cfg, gamma_tau: float) -> PulseEnsembleParams:
    return PulseEnsembleParams(
        n_pulses=cfg["n_pulses"], tau=cfg["tau"], n_substeps=cfg["n_substeps"],
        model=DetectionModel(cfg["model"], cfg["delta"]), drive=_drive(cfg, gamma_tau),
        settings=SettingSchedule.constant(cfg["setting_a"], cfg["setting_b"]),
        master_seed=cfg["seed"], duration=cfg["duration"], memory_tau_d=cfg["memory_tau_d"],
        initial_spread=InitialSpread(cfg["initial_spread"]), chunk_size=cfg["chunk_size"],
        stride=cfg["stride"])


def _ticks(seconds: float, tau_res: float) -> int:
    return int(round(seconds / tau_res))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_trajectory(cfg, out: Path) -> tuple[list, int]:
    outputs = []
    settings = SettingSchedule.constant(cfg["setting_a"], cfg["setting_b"])
    n = cfg["n_substeps"]
    for i, gt in enumerate(_gammas(cfg, (0.1, math.exp(-1), 1.0))):
        drive = _drive(cfg, gt)
        hists = []
        for j, (center, start) in enumerate(((cfg["setting_a"], cfg["alpha_tau"]),
                                             (cfg["setting_b"], cfg["beta_tau"]))):
            if cfg["history"] == "constant":
                h = np.full(n + 1, start if start is not None else center)
            elif cfg["history"] == "random":
                h = random_history(n, np.random.default_rng([cfg["seed"], i, j]), center)
                if start is not None:
                    h[-1] = start
            else:
                raise ConfigError(f"history: expected random or constant, got {cfg['history']!r}")
            hists.append(h)
        ta = integrate(cfg["tau"], n, drive, settings, hists[0], cfg["duration"], "alpha", cfg["seed"])
        tb = integrate(cfg["tau"], n, drive, settings, hists[1], cfg["duration"], "beta", cfg["seed"])
        path = out / f"trajectory_gt{gt:.4g}.csv"
        write_trajectory_csv(path, ta, tb)
        outputs.append(path)
    return outputs, EXIT_OK


def cmd_ensemble(cfg, out: Path) -> tuple[list, int]:
    outputs, code = [], EXIT_OK
    for gt in _gammas(cfg, (math.exp(-1),)):
        curve = ensemble_efficiency(_ensemble_params(cfg, gt), station=cfg["station"],
                                    workers=cfg["workers"])
        path = out / f"ensemble_gt{gt:.4g}.csv"
        write_curve_csv(path, curve)
        outputs.append(path)
        print(f"gamma_tau={gt:.4g} divergent_fraction={curve.divergent_fraction:.3g}")
        if curve.divergent_fraction > cfg["max_divergent_fraction"]:
            print(f"divergent fraction above {cfg['max_divergent_fraction']}", file=sys.stderr)
            code = EXIT_THRESHOLD
    return outputs, code


def cmd_generate(cfg, out: Path) -> tuple[list, int]:
    gt = _gammas(cfg, (math.exp(-1),))[0]
    settings = CHSH_SETTINGS if cfg["chsh"] else ((cfg["setting_a"], cfg["setting_b"]),)
    outputs = []
    for i, (a, b) in enumerate(settings):
        c = dict(cfg, setting_a=a, setting_b=b, seed=cfg["seed"] + i)
        params = PhotonStreamParams(_ensemble_params(c, gt), cfg["emission_prob"], cfg["tau_res"])
        run = generate_photon_stream(params, workers=cfg["workers"])
        path = out / (f"run_{i}.txt" if cfg["chsh"] else "run.txt")
        write_run(path, run)
        outputs.append(path)
    return outputs, EXIT_OK


def cmd_analyze(cfg, out: Path) -> tuple[list, int]:
    if not cfg["input"]:
        raise ConfigError("input: at least one run file is required")
    runs = [read_run(p) for p in cfg["input"]]
    res = runs[0].header.tau_res
    kw = dict(window=_ticks(cfg["window"], res), bin_width=max(_ticks(cfg["bin_width"], res), 1),
              offset_windows=cfg["offset_windows"], t0=cfg["t0"], station=cfg["station"])
    ts = chsh_timeseries(runs, **kw) if cfg["chsh"] else efficiency_timeseries(runs, **kw)
    path = out / "timeseries.csv"
    write_timeseries_csv(path, ts)
    return [path], EXIT_OK


def cmd_fit(cfg, out: Path) -> tuple[list, int]:
    if cfg["input"]:
        ts = read_timeseries_csv(cfg["input"][0])
        res = fit_efficiency_curve(ts.bin_center, ts.eta, cfg["tau"], cfg["t_on"],
                                   cfg["correction_factor"]).result
    elif cfg["eta0"] is not None and cfg["slope"] is not None:
        res = invert_fit(cfg["eta0"], cfg["slope"], cfg["correction_factor"])
    else:
        raise ConfigError("fit needs input (a time-series CSV) or both eta0 and slope")
    path = out / "fit.csv"
    d = res.as_dict()
    path.write_text(",".join(d) + "\n" + ",".join(repr(float(v)) for v in d.values()) + "\n")
    print(f"delta={res.delta_est:.4g} gamma={res.gamma_est:.4g}/s ({res.gamma_est * 1e-9:.4g}/ns)")
    code = EXIT_OK
    for key, got in (("expect_delta", res.delta_est), ("expect_gamma", res.gamma_est)):
        want = cfg[key]
        if want is not None and abs(got - want) > cfg["rel_tol"] * abs(want):
            print(f"{key}: got {got:.4g}, expected {want:.4g}", file=sys.stderr)
            code = EXIT_THRESHOLD
    return [path], code


def cmd_plan(cfg, out: Path) -> tuple[list, int]:
    plan = ExperimentPlan(tau_res=cfg["tau_res"], tau=cfg["tau"], tau_rf=cfg["tau_rf"],
                          tau_pulse=cfg["tau_pulse"], rp_inverse=cfg["rp_inverse"],
                          tau_d_assumed=cfg["tau_d"])
    findings = plan_check(plan)
    text = "\n".join(str(f) for f in findings) + "\n"
    print(text, end="")
    path = out / "plan.txt"
    path.write_text(text)
    return [path], EXIT_OK if plan_ok(findings) else EXIT_THRESHOLD


def cmd_sweep(cfg, out: Path) -> tuple[list, int]:
    taus = cfg["taus"]
    base = _ensemble_params(dict(cfg, tau=taus[0]), _gammas(cfg, (math.exp(-1),))[0])
    # duration and drive times in the config refer to the first tau
    rows = distance_sweep(base, taus, hold=cfg["hold"], workers=cfg["workers"])
    path = out / "sweep.csv"
    write_sweep_csv(path, rows)
    for r in rows:
        print(f"tau={r.tau:.4g}s saturation={r.saturation_time} period={r.oscillation_period}")
    return [path], EXIT_OK


HANDLERS = {"trajectory": cmd_trajectory, "ensemble": cmd_ensemble, "generate": cmd_generate,
            "analyze": cmd_analyze, "fit": cmd_fit, "plan": cmd_plan, "sweep": cmd_sweep}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, raw: dict, outputs: list, code: int) -> Path:
    manifest = {"command": command, "version": __version__, "exit_code": code, "config": raw,
                "outputs": {p.name: _sha256(p) for p in outputs}}
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ablab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name])
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        for key, spec in KEYS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"{spec.help} [default: {spec.default or 'none'}]")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: getattr(args, k) for k in KEYS}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg, raw = resolve_config(file_values, flags)
        if cfg["n_substeps"] % 2 or cfg["n_substeps"] < 2:
            raise ConfigError(f"n_substeps: must be an even integer >= 2, got {cfg['n_substeps']}")
        args.out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            outputs, code = HANDLERS[args.command](cfg, args.out)
    except (ConfigError, ParameterError, FitError) as exc:
        print(f"ablab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"ablab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(args.out, args.command, raw, outputs, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
