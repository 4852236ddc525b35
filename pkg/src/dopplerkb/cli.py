"""
Command-line front end.

Every command reads an optional JSON config (``--config``), applies
``--set key=value`` overrides (dotted keys reach into nested objects,
values are parsed as JSON when possible), writes ``<command>.json`` into
the output directory and prints it. Exit status: 0 on success, 1 on a
domain or configuration error, 2 on a numerical failure.

The output directory defaults to ``$DOPPLERKB_OUT`` or the current
directory.
"""

import argparse
import copy
import json
import math
import os
import sys

from . import __version__
from .budget import (
    TYPE_B,
    BudgetEntry,
    budget_table,
    combine_rss,
    corrections_from_json,
    default_budget,
    load_budget,
    run_kb_pipeline,
)
from .constants import KB_REFERENCE, NH3_SAQ63, doppler_width
from .errors import ConfigurationError, DomainError, NumericalError, StageError
from .fitting import (
    DEFAULT_FREE,
    PARAM_NAMES,
    FitConfig,
    SynthesisRecipe,
    bias_study,
    fit_spectrum,
    initial_guess,
)
from .lineshape import LineShapeParams, SpeedDependenceLaw
from .spectrum import (
    FrequencyGrid,
    TransmissionParams,
    add_noise,
    apply_modulation,
    load_hyperfine,
    read_spectrum,
    synth_multiplet,
    synth_transmission,
    write_spectrum,
)
from .thermometry import (
    REFERENCE_READING,
    REFERENCE_UNCERTAINTY,
    BridgeReading,
    BridgeUncertainty,
    temperature_contributions,
    temperature_from_bridge,
    temperature_series,
    temperature_uncertainty,
)

COMMANDS = ("synth", "fit", "bias", "temp", "budget", "kb")
OUT_ENV = "DOPPLERKB_OUT"

_LAW_SDVP = {"kind": "quadratic", "m_sd": 0.360, "n_sd": -3.8}

DEFAULTS = {
    "synth": {
        "grid": {"span": 500.0, "step": 0.5, "center": 0.0},
        "temperature": 273.15,
        "pressure": 1.5,
        "p0": 1.0, "p1": 0.0, "omega0": 0.0,
        "absorbance": None,
        "gamma_per_pa": 0.120, "delta_per_pa": 0.0012,
        "law": _LAW_SDVP,
        "profile": "auto",
        "snr": None,
        "modulation": None,
        "hyperfine": None,
    },
    "fit": {
        "spectrum": None,
        "profile": "voigt",
        "law": {"kind": "constant"},
        "free": [n for n, f in zip(PARAM_NAMES, DEFAULT_FREE) if f],
        "initial": None,
        "temperature": 273.15,
        "pressure": None,
        "max_iter": 100, "ftol": 1e-12, "xtol": 1e-10,
    },
    "bias": {
        "grid": {"span": 500.0, "step": 0.5, "center": 0.0},
        "temperature": 273.15,
        "pressure_range": [1.0, 2.0],
        "n_spectra": 5,
        "gamma_per_pa": 0.120, "delta_per_pa": 0.0012,
        "law": _LAW_SDVP,
        "fit_law": None,
        "free": [n for n, f in zip(PARAM_NAMES, DEFAULT_FREE) if f],
        "snr": None,
        "modulation": None,
        "hyperfine": None,
    },
    "temp": {
        "reading": None,
        "uncertainty": None,
    },
    "budget": {},
    "kb": {
        "spectra": [],
        "reading": None,
        "uncertainty": None,
        "fit": {"profile": "sdvp", "law": _LAW_SDVP,
                "free": [n for n, f in zip(PARAM_NAMES, DEFAULT_FREE) if f]},
        "corrections": [],
        "budget_file": None,
    },
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="dopplerkb", description="Doppler-broadening k_B toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "synthesize a transmission spectrum",
        "fit": "fit one spectrum",
        "bias": "line-shape bias study on synthetic spectra",
        "temp": "temperature from bridge readings",
        "budget": "combine an uncertainty budget",
        "kb": "end-to-end k_B determination",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory (default $%s or .)" % OUT_ENV)
        sp.add_argument("--seed", type=int, help="random seed (required when noise is added)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent fits")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                        help="override a config value (dotted keys, JSON values)")
        if name == "bias":
            sp.add_argument("--truth", choices=("voigt", "sdvp"), default="sdvp")
            sp.add_argument("--fit", choices=("voigt", "sdvp"), default="voigt")
        if name in ("budget", "temp"):
            sp.add_argument("--file", help="budget JSON (budget) or bridge log CSV (temp)")
        if name == "fit":
            sp.add_argument("--spectrum", help="spectrum CSV to fit")
    return p


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """Return a copy of ``cfg`` with ``key.sub=value`` overrides applied."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not key=value")
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = _parse_value(value)
    return cfg


def load_config(command, path, overrides):
    cfg = copy.deepcopy(DEFAULTS[command])
    if path:
        if not os.path.isfile(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg.update(user)
    return apply_overrides(cfg, overrides)


def _law(d):
    if not d:
        return SpeedDependenceLaw()
    return SpeedDependenceLaw(d.get("kind", "constant"), float(d.get("m_sd", 0.0)), float(d.get("n_sd", 0.0)))


def _grid(d):
    if "count" in d:
        return FrequencyGrid(float(d["start"]), float(d["step"]), int(d["count"]))
    return FrequencyGrid.centered(float(d["span"]), float(d["step"]), float(d.get("center", 0.0)))


def _free_mask(names):
    unknown = set(names) - set(PARAM_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown parameters in free list: {sorted(unknown)}")
    return tuple(n in names for n in PARAM_NAMES)


def _initial(d):
    if d is None:
        return None
    if isinstance(d, dict):
        missing = set(PARAM_NAMES) - set(d)
        if missing:
            raise ConfigurationError(f"initial values missing for {sorted(missing)}")
        return tuple(float(d[n]) for n in PARAM_NAMES)
    return tuple(float(v) for v in d)


def _fit_config(d, initial=None):
    return FitConfig(
        initial=initial,
        free_mask=_free_mask(d.get("free", [n for n, f in zip(PARAM_NAMES, DEFAULT_FREE) if f])),
        law=_law(d.get("law")),
        profile=d.get("profile", "voigt"),
        max_iter=int(d.get("max_iter", 100)),
        ftol=float(d.get("ftol", 1e-12)),
        xtol=float(d.get("xtol", 1e-10)),
    )


def _reading(d):
    return REFERENCE_READING if d is None else BridgeReading(**d)


def _uncertainty(d):
    return REFERENCE_UNCERTAINTY if d is None else BridgeUncertainty(**d)


def _need_seed(seed, what):
    if seed is None:
        raise ConfigurationError(f"--seed is required for {what}")
    return seed


def _finite_snr(snr):
    return snr is not None and math.isfinite(float(snr))


def _components(path):
    if path is None:
        return ()
    if not os.path.isfile(path):
        raise ConfigurationError(f"hyperfine file not found: {path}")
    return tuple(load_hyperfine(path))


# -- commands ----------------------------------------------------------------------

def cmd_synth(cfg, args, out):
    grid = _grid(cfg["grid"])
    dnuD = doppler_width(float(cfg["temperature"]), NH3_SAQ63, KB_REFERENCE)
    p = float(cfg["pressure"])
    recipe = SynthesisRecipe(grid, dnuD, _law(cfg["law"]))
    A = cfg["absorbance"]
    A = recipe.truth(p)[3] if A is None else float(A)
    tp = TransmissionParams(float(cfg["p0"]), float(cfg["p1"]), float(cfg["omega0"]), A)
    lp = LineShapeParams(dnuD, float(cfg["gamma_per_pa"]) * p, float(cfg["delta_per_pa"]) * p, _law(cfg["law"]))
    meta = {"pressure": p, "temperature_nominal": float(cfg["temperature"]), "label": "synthetic"}
    comps = _components(cfg["hyperfine"])
    if comps:
        rec = synth_multiplet(grid, tp, lp, list(comps), cfg["profile"], meta=meta)
    elif cfg["modulation"]:
        m = cfg["modulation"]
        rec = apply_modulation(grid, tp, lp, float(m["f1"]), float(m.get("index", 1.0)), cfg["profile"], meta=meta)
    else:
        rec = synth_transmission(grid, tp, lp, cfg["profile"], meta=meta)
    if _finite_snr(cfg["snr"]):
        rec = add_noise(rec, float(cfg["snr"]), _need_seed(args.seed, "noisy synthesis"), p0=tp.p0)
    path = os.path.join(out, "spectrum.csv")
    write_spectrum(path, rec)
    return {
        "spectrum_csv": "spectrum.csv",
        "n_points": grid.count,
        "truth": {"p0": tp.p0, "p1": tp.p1, "omega0": tp.omega0, "absorbance": A,
                  "dnuD": dnuD, "gamma": lp.gamma, "delta": lp.delta},
        "saturated": rec.saturated,
    }


def cmd_fit(cfg, args, out):
    path = args.spectrum or cfg["spectrum"]
    if not path or not os.path.isfile(path):
        raise ConfigurationError(f"spectrum file not found: {path}")
    rec = read_spectrum(path)
    initial = _initial(cfg["initial"])
    if initial is None:
        initial = initial_guess(rec, float(cfg["temperature"]), NH3_SAQ63, cfg["pressure"])
    fit_cfg = _fit_config(cfg, initial)
    res = fit_spectrum(rec, fit_cfg)
    with open(os.path.join(out, "residuals.csv"), "w") as fh:
        fh.write("frequency_mhz,residual\n")
        for f, r in zip(rec.frequencies, res.residuals):
            fh.write(f"{f:.17g},{r:.17g}\n")
    report = res.to_report(fit_cfg)
    report["residuals_csv"] = "residuals.csv"
    return report


def cmd_bias(cfg, args, out):
    law = _law(cfg["law"]) if args.truth == "sdvp" else SpeedDependenceLaw()
    fit_law = _law(cfg["fit_law"]) if cfg["fit_law"] else (law if args.fit == "sdvp" else SpeedDependenceLaw())
    dnuD = doppler_width(float(cfg["temperature"]), NH3_SAQ63, KB_REFERENCE)
    mod = cfg["modulation"]
    recipe = SynthesisRecipe(
        grid=_grid(cfg["grid"]),
        dnuD=dnuD,
        law=law,
        profile=args.truth,
        gamma_per_pa=float(cfg["gamma_per_pa"]),
        delta_per_pa=float(cfg["delta_per_pa"]),
        pressure_range=tuple(float(v) for v in cfg["pressure_range"]),
        snr=float(cfg["snr"]) if _finite_snr(cfg["snr"]) else math.inf,
        components=_components(cfg["hyperfine"]),
        modulation=(float(mod["f1"]), float(mod.get("index", 1.0))) if mod else (),
    )
    seed = _need_seed(args.seed, "noisy bias studies") if math.isfinite(recipe.snr) else (args.seed or 0)
    fit_cfg = FitConfig(free_mask=_free_mask(cfg["free"]), law=fit_law, profile=args.fit)
    res = bias_study(recipe, fit_cfg, int(cfg["n_spectra"]), seed=seed, threads=args.threads)
    report = res.to_report()
    report.update({"truth_profile": args.truth, "fit_profile": args.fit, "dnuD_true": dnuD})
    return report


def cmd_temp(cfg, args, out):
    reading = _reading(cfg["reading"])
    unc = _uncertainty(cfg["uncertainty"])
    report = {
        "temperature_k": temperature_from_bridge(reading),
        "temperature_u_k": temperature_uncertainty(reading, unc),
        "contributions_k": temperature_contributions(reading, unc),
    }
    if args.file:
        if not os.path.isfile(args.file):
            raise ConfigurationError(f"bridge log not found: {args.file}")
        with open(args.file) as fh:
            series = temperature_series(fh.read(), reading.s)
        with open(os.path.join(out, "temperature.csv"), "w") as fh:
            fh.write(series)
        report["series_csv"] = "temperature.csv"
        report["n_readings"] = series.count("\n") - 1
    return report


def cmd_budget(cfg, args, out):
    if args.file:
        if not os.path.isfile(args.file):
            raise ConfigurationError(f"budget file not found: {args.file}")
        entries = load_budget(args.file)
    else:
        entries = default_budget()
    total = combine_rss(entries)
    print(budget_table(entries, total), file=sys.stderr, end="")
    return {
        "entries": [{"name": e.name, "rel_u_ppm": e.rel_u_ppm, "kind": e.kind, "comment": e.comment}
                    for e in entries],
        "combined_ppm": total,
        "combined_ppm_rounded": float(f"{total:.2g}"),
    }


def cmd_kb(cfg, args, out):
    paths = cfg["spectra"]
    for p in paths:
        if not os.path.isfile(p):
            raise ConfigurationError(f"spectrum file not found: {p}")
    spectra = [read_spectrum(p) for p in paths]
    fit_cfg = _fit_config(cfg["fit"], _initial(cfg["fit"].get("initial")))
    corrections = corrections_from_json(json.dumps(cfg["corrections"]))
    declared = load_budget(cfg["budget_file"]) if cfg["budget_file"] else None
    rep = run_kb_pipeline(spectra, _reading(cfg["reading"]), _uncertainty(cfg["uncertainty"]),
                          fit_cfg, corrections, declared, threads=args.threads)
    with open(os.path.join(out, "kb_budget.txt"), "w") as fh:
        fh.write(rep.table())
    report = rep.to_dict()
    report["table_txt"] = "kb_budget.txt"
    return report


HANDLERS = {"synth": cmd_synth, "fit": cmd_fit, "bias": cmd_bias, "temp": cmd_temp,
            "budget": cmd_budget, "kb": cmd_kb}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def _exit_code(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    return 2 if isinstance(exc, NumericalError) else 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = args.out or os.environ.get(OUT_ENV, ".")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = load_config(args.command, args.config, args.overrides)
        os.makedirs(out, exist_ok=True)
        result = HANDLERS[args.command](cfg, args, out)
    except (NumericalError, DomainError, ConfigurationError, StageError) as exc:
        print(f"dopplerkb {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (KeyError, TypeError, ValueError) as exc:
        # malformed config values
        print(f"dopplerkb {args.command}: invalid configuration: {exc!r}", file=sys.stderr)
        return 1
    report = _jsonable({
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "config": cfg,
        "result": result,
    })
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    with open(os.path.join(out, f"{args.command}.json"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
