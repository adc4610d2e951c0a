"""Command-line entry points: ``collect``, ``noise``, ``identify``, ``predict``, ``mpc``.

Every command reads a YAML run configuration, overlays it on the defaults
below, applies ``--seed`` and input-path options, and writes the fully
resolved configuration to ``<out>/config.yaml`` before doing any work.
Running the same command again with that file reproduces the outputs.
Wall-clock solve times are the only nondeterministic values written.
"""

from __future__ import annotations

import copy
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import plants
from .baseline import fit_arx
from .lifted_model import PredictionReport, evaluate_prediction
from .lifting import read_trials, write_trial_csv
from .mpc import ControllerConfig, make_reference, run_closed_loop, write_summary
from .qp import SolverSettings
from .regression import IdentifyConfig, identify, load_model, save_model, write_sweep_csv

log = logging.getLogger("koopmpc")

DEFAULTS: dict = {
    "seed": 0,
    "sample_period": 0.1,
    "plant": {"kind": "arm-surrogate", "noise_std": 0.4, "stiffness": 0.7,
              "hardening": 0.02, "force": 20.0, "gain_scale": 20.0, "h": 0.01},
    "collect": {"trials": 8, "duration": 300.0, "transition_period": [5.0, 10.0],
                "table_range": [0.0, 10.0]},
    "noise": {"periods": [6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], "periods_per_T": 30,
              "warmup_periods": 5},
    "identify": {"data": None, "max_degree": 3, "state_delays": 1, "input_delays": 1,
                 "lambdas": {"start": 0.0, "stop": 50.0, "step": 1.0},
                 "tol": 1e-6, "max_iter": 10000, "pinv_rtol": None,
                 "holdout_fraction": 0.1, "held_out": True, "horizon": 25, "stride": 25,
                 "scale": False, "arx": {"output_lags": 2, "input_lags": 2}},
    "predict": {"models": None, "data": None,
                "periods": [6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
                "periods_per_T": 5, "horizon": 2.5, "stride": 5, "projected": True},
    "mpc": {"models": None, "controllers": {"K-MPC": "koopman.json", "L-MPC": "linear.json"},
            "horizon": 25, "w_terminal": 100.0, "w_running": 0.1,
            "u_min": 0.0, "u_max": 10.0, "input_reg": 1e-6, "warm_start": True,
            "solver": {"tol": 1e-6, "max_iter": 4000, "rho": 1.0, "alpha": 1.6,
                       "sigma": 1e-6, "adaptive_rho": False, "check_every": 25,
                       "polish": True},
            "tasks": [{"name": "pacman", "shape": "pacman", "scale": 4.0, "duration": 90.0},
                      {"name": "star", "shape": "star", "scale": 4.0, "duration": 180.0},
                      {"name": "block-m", "shape": "block-m", "scale": 4.0,
                       "duration": 300.0}]},
}


class ConfigError(ValueError):
    pass


# --- configuration ---------------------------------------------------------

def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins, lists are replaced whole."""
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    # an echoed config records the command that wrote it
    raw.pop("command", None)
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return merge(DEFAULTS, raw)


def lambda_grid(spec) -> list[float]:
    """Either an explicit list or ``{start, stop, step}`` (stop inclusive)."""
    if isinstance(spec, dict):
        start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        if step <= 0:
            raise ConfigError("lambda step must be positive")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(count)]
    return [float(v) for v in spec]


def _plain(obj):
    """Convert numpy scalars/arrays so YAML/JSON dumps stay portable."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _prepare(command: str, config_path, out, seed, **paths) -> tuple[dict, Path]:
    cfg = load_config(config_path)
    if seed is not None:
        cfg["seed"] = int(seed)
    for dotted, value in paths.items():
        if value is not None:
            section, key = dotted.split(".")
            cfg[section][key] = str(Path(value).resolve())
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, **_plain(cfg)}
    (out / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=False))
    log.info("%s: resolved config written to %s", command, out / "config.yaml")
    return cfg, out


def _rng(cfg: dict, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg["seed"]), *stream])


def _require(cfg: dict, section: str, key: str) -> Path:
    val = cfg[section].get(key)
    if not val:
        raise ConfigError(f"{section}.{key} is not set (config file or --{key} option)")
    return Path(val)


# --- commands --------------------------------------------------------------

def run_collect(cfg: dict, out: Path) -> list[Path]:
    c = cfg["collect"]
    plant = plants.make_plant(cfg["plant"])
    T_s = float(cfg["sample_period"])
    lo_u, hi_u = c["transition_period"]
    lo, hi = c["table_range"]
    steps = int(round(float(c["duration"]) / T_s))
    t = T_s * np.arange(steps + 1)
    trial_dir = out / "trials"
    trial_dir.mkdir(exist_ok=True)
    paths = []
    for i in range(int(c["trials"])):
        rng = _rng(cfg, 1, i)
        T_u = float(rng.uniform(lo_u, hi_u))
        length = int(np.ceil(t[-1] / T_u)) + 2
        table = plants.random_ramp_table(rng, length, plant.input_dim, lo, hi)
        u = plants.ramp_inputs(table, T_u, t)
        trial = plants.simulate(plant, u, T_s, rng, name=f"trial{i:03d}", seed=int(cfg["seed"]))
        path = trial_dir / f"trial{i:03d}.csv"
        write_trial_csv(path, trial, {"seed": cfg["seed"], "stream": i, "T_u": repr(T_u)})
        paths.append(path)
    return paths


def run_noise(cfg: dict, out: Path) -> dict:
    c = cfg["noise"]
    plant = plants.make_plant(cfg["plant"])
    T_s = float(cfg["sample_period"])
    rep = plants.characterize_noise(plant, [float(T) for T in c["periods"]],
                                    int(c["periods_per_T"]), T_s, _rng(cfg, 2),
                                    int(c["warmup_periods"]))
    with open(out / "noise_mean.csv", "w") as fh:
        fh.write("T,phase,x1,x2\n")
        for T, mean in rep.mean_trajectories.items():
            for k, row in enumerate(mean):
                fh.write(f"{T!r},{k}," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(out / "noise_deviation.csv", "w") as fh:
        fh.write("T,dx1,dx2,distance\n")
        row = 0
        for T in rep.mean_trajectories:
            count = int(round(T / T_s)) * int(c["periods_per_T"])
            for dev, dist in zip(rep.deviations[row:row + count], rep.distances[row:row + count]):
                fh.write(f"{T!r},{float(dev[0])!r},{float(dev[1])!r},{float(dist)!r}\n")
            row += count
    summary = rep.summary()
    (out / "noise_summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def run_identify(cfg: dict, out: Path):
    c = cfg["identify"]
    trials = read_trials(_require(cfg, "identify", "data"))
    icfg = IdentifyConfig(
        max_degree=int(c["max_degree"]), state_delays=int(c["state_delays"]),
        input_delays=int(c["input_delays"]), sample_period=float(cfg["sample_period"]),
        lambdas=lambda_grid(c["lambdas"]), tol=float(c["tol"]), max_iter=int(c["max_iter"]),
        pinv_rtol=None if c["pinv_rtol"] is None else float(c["pinv_rtol"]),
        holdout_fraction=float(c["holdout_fraction"]), held_out=bool(c["held_out"]),
        horizon=int(c["horizon"]), stride=int(c["stride"]), scale=bool(c["scale"]))
    model, rows = identify(icfg, trials)
    train = [tr.split(icfg.holdout_fraction)[0] if icfg.holdout_fraction > 0 else tr
             for tr in trials]
    arx = fit_arx(train, int(c["arx"]["output_lags"]), int(c["arx"]["input_lags"]),
                  float(cfg["sample_period"]))
    save_model(model, out / "koopman.json")
    save_model(arx, out / "linear.json")
    write_sweep_csv(out / "lambda_sweep.csv", rows)
    chosen = next(r for r in rows if r.chosen)
    summary = {"lambda": chosen.lam, "density_A_hat": chosen.density,
               "zero_fraction_A_hat": 1.0 - chosen.density,
               "normalized_error": chosen.normalized_error,
               "lifted_dim": model.state_dim, "snapshots_per_trial": [len(t) for t in trials],
               "linear_state_dim": arx.state_dim}
    (out / "identify_summary.json").write_text(json.dumps(summary, indent=1))
    return model, arx, rows


def _model_paths(cfg: dict, section: str) -> dict[str, Path]:
    base = cfg[section].get("models")
    names = cfg["mpc"]["controllers"] if section == "mpc" else {
        "koopman": "koopman.json", "linear": "linear.json"}
    if base is None:
        raise ConfigError(f"{section}.models is not set (config file or --models option)")
    return {name: Path(base) / fname for name, fname in names.items()}


def sinusoid_trials(cfg: dict, periods, periods_per_T: int, plant=None):
    plant = plant or plants.make_plant(cfg["plant"])
    T_s = float(cfg["sample_period"])
    trials = []
    for j, T in enumerate(periods):
        steps = int(round(float(T) / T_s))
        u = plants.sinusoid_inputs(float(T), T_s, np.arange(steps * (periods_per_T + 1) + 1))
        tr = plants.simulate(plant, u, T_s, _rng(cfg, 3, j), name=f"sin_T{float(T):g}",
                             seed=int(cfg["seed"]))
        # drop the first period as a transient from rest
        trials.append(tr.slice(steps))
    return trials


def run_predict(cfg: dict, out: Path) -> dict:
    c = cfg["predict"]
    models = {name: load_model(path) for name, path in _model_paths(cfg, "predict").items()}
    horizon = int(round(float(c["horizon"]) / float(cfg["sample_period"])))
    if c.get("data"):
        trials = read_trials(c["data"])
    else:
        trials = sinusoid_trials(cfg, c["periods"], int(c["periods_per_T"]))
        data_dir = out / "sinusoid"
        data_dir.mkdir(exist_ok=True)
        for tr in trials:
            write_trial_csv(data_dir / f"{tr.name}.csv", tr, {"seed": cfg["seed"]})
    table = {name: [] for name in models}
    for tr in trials:
        for name, model in models.items():
            rep = evaluate_prediction(model, tr, horizon, int(c["stride"]), bool(c["projected"]))
            rep.to_csv(out / f"prediction_{name}_{tr.name}.csv")
            table[name].append(rep)
    names = list(models)
    with open(out / "table1.csv", "w") as fh:
        fh.write("data," + ",".join(names) + "\n")
        for i, tr in enumerate(trials):
            fh.write(tr.name + "," + ",".join(repr(table[n][i].mean_error) for n in names) + "\n")
        avg = {n: float(np.mean([r.mean_error for r in table[n]])) for n in names}
        fh.write("average," + ",".join(repr(avg[n]) for n in names) + "\n")
    summary = {"horizon_steps": horizon, "average_error": avg,
               "per_trial": {n: {tr.name: table[n][i].summary() for i, tr in enumerate(trials)}
                             for n in names}}
    (out / "predict_summary.json").write_text(json.dumps(summary, indent=1))
    return avg


def controller_config(cfg: dict) -> ControllerConfig:
    c = cfg["mpc"]
    return ControllerConfig(
        horizon=int(c["horizon"]), w_terminal=float(c["w_terminal"]),
        w_running=float(c["w_running"]), u_min=float(c["u_min"]), u_max=float(c["u_max"]),
        input_reg=float(c["input_reg"]), sample_period=float(cfg["sample_period"]),
        warm_start=bool(c["warm_start"]), solver=SolverSettings(**c["solver"]))


def run_mpc(cfg: dict, out: Path):
    c = cfg["mpc"]
    plant = plants.make_plant(cfg["plant"])
    ccfg = controller_config(cfg)
    models = {name: load_model(path) for name, path in _model_paths(cfg, "mpc").items()}
    T_s = float(cfg["sample_period"])
    logs = []
    for j, task_cfg in enumerate(c["tasks"]):
        task = make_reference(task_cfg["shape"], float(task_cfg["scale"]),
                              float(task_cfg["duration"]), T_s,
                              tuple(task_cfg.get("center", (0.0, 0.0))),
                              task_cfg.get("name"))
        task.to_csv(out / f"reference_{task.name}.csv")
        for name, model in models.items():
            lg = run_closed_loop(plant, ccfg, model, task, seed=[int(cfg["seed"]), 4, j],
                                 controller_name=name)
            lg.to_csv(out / f"log_{task.name}_{name}.csv")
            logs.append(lg)
    with open(out / "table2.csv", "w") as fh:
        fh.write("task,controller,mean_error,std_error,ticks,non_optimal_ticks,failure\n")
        for lg in logs:
            s = lg.summary(timing=False)
            fh.write(f"{lg.task},{lg.controller},{s['mean_error']!r},{s['std_error']!r},"
                     f"{s['ticks']},{s['non_optimal_ticks']},{lg.failure or ''}\n")
    write_summary(out / "mpc_summary.json", logs, timing=False)
    timing = {f"{lg.task}/{lg.controller}": {
        "solve_ms_p95": float(np.percentile(lg.solve_ms, 95)) if len(lg.t) else None,
        "solve_ms_max": float(np.max(lg.solve_ms)) if len(lg.t) else None}
        for lg in logs}
    (out / "timing.json").write_text(json.dumps(timing, indent=1))
    return logs


# --- click wiring ----------------------------------------------------------

def _common(f):
    f = click.option("--seed", type=click.IntRange(min=0), default=None,
                     help="Overrides the config seed.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), required=True,
                     help="Output directory.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="YAML run configuration.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True)
def cli(verbose):
    """Koopman lifted-model identification and MPC experiments."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@_common
def collect(config_path, out, seed):
    """Simulate randomized ramp-input trials and write trial CSVs."""
    cfg, out = _prepare("collect", config_path, out, seed)
    paths = run_collect(cfg, out)
    click.echo(f"wrote {len(paths)} trials to {out / 'trials'}")


@cli.command()
@_common
def noise(config_path, out, seed):
    """Characterise period-to-period output spread under sinusoidal inputs."""
    cfg, out = _prepare("noise", config_path, out, seed)
    summary = run_noise(cfg, out)
    click.echo(json.dumps(summary))


@cli.command(name="identify")
@_common
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of trial CSVs (overrides identify.data).")
def identify_cmd(config_path, out, seed, data):
    """Fit the Koopman model over the lambda grid and the ARX baseline."""
    cfg, out = _prepare("identify", config_path, out, seed, **{"identify.data": data})
    model, arx, rows = run_identify(cfg, out)
    chosen = next(r for r in rows if r.chosen)
    click.echo(f"chosen lambda={chosen.lam:g} density(A_hat)={chosen.density:.3f} "
               f"N={model.state_dim}")


@cli.command()
@_common
@click.option("--models", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory holding koopman.json and linear.json.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Evaluate on these trial CSVs instead of generated sinusoids.")
def predict(config_path, out, seed, models, data):
    """Compare 2.5 s prediction errors of the Koopman and ARX models."""
    cfg, out = _prepare("predict", config_path, out, seed,
                        **{"predict.models": models, "predict.data": data})
    avg = run_predict(cfg, out)
    click.echo(json.dumps(avg))


@cli.command()
@_common
@click.option("--models", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory holding the controller model files.")
def mpc(config_path, out, seed, models):
    """Run K-MPC and L-MPC on the shape-tracking tasks."""
    cfg, out = _prepare("mpc", config_path, out, seed, **{"mpc.models": models})
    logs = run_mpc(cfg, out)
    for lg in logs:
        click.echo(f"{lg.task:10s} {lg.controller:6s} mean error {lg.mean_error:.4f}")


def main(argv=None) -> int:
    """Console entry point; failures print one JSON line on stderr."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": exc.format_message(),
                                     "exit_code": 2}) + "\n")
        return 2
    except click.exceptions.Abort:
        sys.stderr.write(json.dumps({"error": "Abort", "message": "aborted",
                                     "exit_code": 1}) + "\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "exit_code": 1}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
