"""``cda`` command line: convergence tables, decay curves and the cavity twin run.

Configuration is a JSON object with flat dotted keys (for example
``"cavity.Ra": 1000``); command-line flags override file values.  Every run
writes ``manifest.json`` with the complete effective configuration, which can
be passed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .assembly import PhysicalParams

log = logging.getLogger("cda")

EXPERIMENTS = ("convergence", "decay", "cavity")

# Published errors (u, T, S) on the manufactured problem at dt = 1e-3, t = 1, used by --check.
REFERENCE_ERR_U_H8 = 2.7e-5
REFERENCE_ERRORS_VELOCITY_ONLY = {
    0.5: (1.7e-3, 1.2e-3, 1.9e-3),
    0.25: (2.1e-4, 1.6e-4, 2.0e-4),
    0.125: (2.6e-5, 2.15e-5, 2.9e-5),
    0.0625: (3.3e-6, 2.7e-6, 3.6e-6),
    0.03125: (4.14e-7, 3.46e-7, 4.79e-7),
}
RATE_BAND = (2.6, 3.4)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_nonneg(key, v):
    if not _number(v) or v < 0:
        raise ConfigError(key, f"must be a nonnegative number, got {v!r}")
    return float(v)


def _check_pos(key, v):
    if not _number(v) or not v > 0:
        raise ConfigError(key, f"must be a positive number, got {v!r}")
    return float(v)


def _check_opt_pos(key, v):
    return None if v is None else _check_pos(key, v)


def _check_int(key, v, low=0):
    if isinstance(v, bool) or not isinstance(v, int) or v < low:
        raise ConfigError(key, f"must be an integer >= {low}, got {v!r}")
    return v


def _check_backend(key, v):
    if v not in ("lu", "gmres"):
        raise ConfigError(key, f"must be 'lu' or 'gmres', got {v!r}")
    return v


def _check_pair(key, v):
    if v not in ("taylor-hood", "scott-vogelius"):
        raise ConfigError(key, f"must be 'taylor-hood' or 'scott-vogelius', got {v!r}")
    return v


def _check_tol(key, v):
    if not _number(v) or not 0 < v <= 1e-2:
        raise ConfigError(key, f"must lie in (0, 1e-2], got {v!r}")
    return float(v)


def _check_h_list(key, v):
    if not isinstance(v, list) or not v or not all(_number(h) and h > 0 for h in v):
        raise ConfigError(key, f"must be a nonempty list of positive numbers, got {v!r}")
    hs = [float(h) for h in v]
    for a, b in zip(hs, hs[1:]):
        if not math.isclose(a / b, 2.0, rel_tol=1e-9):
            raise ConfigError(key, "mesh sizes must decrease by halving")
    for h in hs:
        if not math.isclose(1.0 / h, round(1.0 / h), rel_tol=1e-9):
            raise ConfigError(key, f"mesh size {h} is not 1/n for an integer n")
    return hs


def _check_mu_list(key, v):
    if not isinstance(v, list) or not v:
        raise ConfigError(key, f"must be a nonempty list of [mu1, mu2, mu3], got {v!r}")
    out = []
    for m in v:
        if not isinstance(m, list) or len(m) != 3 or not all(_number(x) and x >= 0 for x in m):
            raise ConfigError(key, f"entries must be three nonnegative numbers, got {m!r}")
        out.append(tuple(float(x) for x in m))
    return out


def _check_window(key, v):
    if not isinstance(v, list) or len(v) != 2 or not all(_number(x) for x in v) or not 0 <= v[0] < v[1] <= 1:
        raise ConfigError(key, f"must be [start, end] fractions with 0 <= start < end <= 1, got {v!r}")
    return (float(v[0]), float(v[1]))


def _check_real(key, v):
    if not _number(v) or not math.isfinite(v):
        raise ConfigError(key, f"must be a finite number, got {v!r}")
    return float(v)


def _check_bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(key, f"must be true or false, got {v!r}")
    return v


_COMMON = {
    "dt": (None, _check_pos),
    "mu1": (None, _check_nonneg),
    "mu2": (None, _check_nonneg),
    "mu3": (None, _check_nonneg),
    "H": (None, _check_opt_pos),
    "pair": ("taylor-hood", _check_pair),
    "solver.backend": ("lu", _check_backend),
    "solver.tol": (None, _check_tol),
}

_PHYSICS = {
    "physics.nu": (1.0, _check_pos),
    "physics.kappa": (1.0, _check_pos),
    "physics.Dc": (1.0, _check_pos),
    "physics.beta_T": (1.0, _check_real),
    "physics.beta_C": (1.0, _check_real),
    "physics.inv_Da": (0.0, _check_nonneg),
}

SCHEMA = {
    "convergence": {
        **_COMMON, **_PHYSICS,
        "dt": (1e-3, _check_pos), "mu1": (100.0, _check_nonneg), "mu2": (100.0, _check_nonneg),
        "mu3": (100.0, _check_nonneg),
        "h_list": ([1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32], _check_h_list),
        "H_factor": (4.0, _check_pos),
        "t_final": (1.0, _check_pos),
    },
    "decay": {
        **_COMMON, **_PHYSICS,
        "dt": (1e-3, _check_pos),
        "h": (1 / 16, _check_pos),
        "t_final": (1.0, _check_pos),
        "mu_list": ([[1, 1, 1], [10, 10, 10], [100, 100, 100], [1000, 1000, 1000]], _check_mu_list),
        "window": ([0.2, 0.8], _check_window),
    },
    "cavity": {
        **_COMMON,
        "dt": (0.02, _check_pos),
        "h": (1 / 16, _check_pos),
        "mu_list": ([[1, 1, 1], [10, 10, 10], [10, 0, 0]], _check_mu_list),
        "cavity.Pr": (1.0, _check_pos),
        "cavity.Ra": (1e3, _check_pos),
        "cavity.Le": (2.0, _check_pos),
        "cavity.N": (0.8, _check_nonneg),
        "cavity.inv_Da": (0.0, _check_nonneg),
        "cavity.T_hot": (1.0, _check_real),
        "cavity.T_cold": (0.0, _check_real),
        "cavity.S_high": (1.0, _check_real),
        "cavity.S_low": (0.0, _check_real),
        "cavity.dns_steps": (4000, lambda k, v: _check_int(k, v, 0)),
        "cavity.twin_steps": (4000, lambda k, v: _check_int(k, v, 1)),
        "vtk": (True, _check_bool),
    },
}

# Values the source material leaves open; flagged in the manifest.
ASSUMED = {
    "convergence": ["H", "H_factor"],
    "decay": ["H"],
    "cavity": ["H", "h", "cavity.T_hot", "cavity.T_cold", "cavity.S_high", "cavity.S_low", "cavity.inv_Da"],
}

_META_KEYS = ("experiment", "version", "config", "assumed_defaults", "environment", "results")


@dataclass
class RunConfig:
    experiment: str
    values: dict
    out: Path
    check: bool = False
    explicit: set = field(default_factory=set)

    def __getitem__(self, key):
        return self.values[key]

    def mu(self) -> tuple:
        return self["mu1"], self["mu2"], self["mu3"]

    def physical_params(self) -> PhysicalParams:
        v = self.values
        return PhysicalParams(nu=v["physics.nu"], inv_Da=v["physics.inv_Da"], kappa=v["physics.kappa"],
                              Dc=v["physics.Dc"], beta_T=v["physics.beta_T"], beta_C=v["physics.beta_C"])

    def to_json(self) -> dict:
        def enc(v):
            if isinstance(v, tuple):
                return [enc(x) for x in v]
            if isinstance(v, list):
                return [enc(x) for x in v]
            return v
        return {k: enc(v) for k, v in sorted(self.values.items())}


def _load_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("--config", "top level must be an object")
    if "config" in raw and isinstance(raw["config"], dict):
        # a manifest written by a previous run
        return dict(raw["config"])
    return {k: v for k, v in raw.items() if k not in _META_KEYS}


def parse_config(experiment: str, path=None, overrides: dict | None = None, out=None,
                 check: bool = False) -> RunConfig:
    """Merge defaults, file values and overrides, then validate every key."""
    if experiment not in SCHEMA:
        raise ConfigError("experiment", f"must be one of {EXPERIMENTS}, got {experiment!r}")
    schema = SCHEMA[experiment]
    given = _load_file(path) if path else {}
    given.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key for '{experiment}'")
    values = {}
    for key, (default, check_fn) in schema.items():
        raw = given.get(key, default)
        values[key] = None if raw is None else check_fn(key, raw)
    for key in ("h",):
        if key in values and not math.isclose(1.0 / values[key], round(1.0 / values[key]), rel_tol=1e-9):
            raise ConfigError(key, f"mesh size {values[key]} is not 1/n for an integer n")
    out = Path(out if out is not None else f"cda-{experiment}")
    cfg = RunConfig(experiment, values, out, check, set(given))
    _apply_mu_flags(cfg)
    if experiment == "decay" and not all(m[0] > 0 for m in cfg["mu_list"]):
        raise ConfigError("mu1" if "mu1" in given else "mu_list", "every velocity nudging parameter must be positive")
    return cfg


def _apply_mu_flags(cfg: RunConfig) -> None:
    """For list-valued experiments, --muK replaces component K of every entry."""
    if "mu_list" not in cfg.values:
        return
    mus = [list(m) for m in cfg["mu_list"]]
    for i, key in enumerate(("mu1", "mu2", "mu3")):
        if cfg.values.get(key) is not None:
            for m in mus:
                m[i] = cfg.values[key]
    cfg.values["mu_list"] = [tuple(m) for m in mus]


def write_manifest(cfg: RunConfig, results: dict | None = None) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "experiment": cfg.experiment,
        "version": __version__,
        "config": cfg.to_json(),
        "assumed_defaults": [k for k in ASSUMED[cfg.experiment] if k not in cfg.explicit],
        "environment": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
    }
    if results is not None:
        manifest["results"] = results
    path = cfg.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return path


def _report(checks: list) -> bool:
    ok = True
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= bool(passed)
    return ok


def _run_convergence(cfg: RunConfig) -> tuple[dict, list]:
    from .verification import convergence_study

    table = convergence_study(cfg["h_list"], dt=cfg["dt"], mu=cfg.mu(), t_final=cfg["t_final"],
                              H_factor=cfg["H_factor"], H=cfg["H"], pair=cfg["pair"],
                              backend=cfg["solver.backend"], tol=cfg["solver.tol"], params=cfg.physical_params())
    table.write_csv(cfg.out / "rates.csv")
    print(table.format())
    checks = [("all runs completed", not table.failed, f"{len(table.rows)} of {len(cfg['h_list'])} levels")]
    hs = table.column("h")
    for name in ("u", "T", "S"):
        rates = table.column(f"rate_{name}")[1:][hs[1:] <= 0.25 + 1e-12]
        inside = bool(len(rates)) and bool(np.all((rates >= RATE_BAND[0]) & (rates <= RATE_BAND[1])))
        checks.append((f"rate_{name} in [2.6, 3.4] for h <= 1/4", inside, np.round(rates, 3).tolist()))
    mu = cfg.mu()
    if mu == (100.0, 100.0, 100.0) and np.any(np.isclose(hs, 0.125)):
        e = float(table.column("err_u")[np.isclose(hs, 0.125)][0])
        checks.append(("err_u(1/8) within 3x of 2.7e-5", REFERENCE_ERR_U_H8 / 3 <= e <= 3 * REFERENCE_ERR_U_H8,
                       f"{e:.3e}"))
    if mu == (100.0, 0.0, 0.0):
        for h, ref in REFERENCE_ERRORS_VELOCITY_ONLY.items():
            sel = np.isclose(hs, h)
            if np.any(sel):
                errs = [float(table.column(f"err_{n}")[sel][0]) for n in ("u", "T", "S")]
                good = all(r / 3 <= e <= 3 * r for e, r in zip(errs, ref))
                checks.append((f"errors at h={h:g} within 3x of reference", good,
                               " ".join(f"{e:.2e}/{r:.2e}" for e, r in zip(errs, ref))))
    rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in table.rows]
    results = {"failed": table.failed, "rows": rows}
    return results, checks


def _run_decay(cfg: RunConfig) -> tuple[dict, list]:
    from .verification import decay_study, is_eventually_monotone, write_decay_csv

    n = int(round(1.0 / cfg["h"]))
    curves = decay_study(n=n, dt=cfg["dt"], mu_list=cfg["mu_list"], t_final=cfg["t_final"], window=cfg["window"],
                         H=cfg["H"], pair=cfg["pair"], backend=cfg["solver.backend"], tol=cfg["solver.tol"],
                         params=cfg.physical_params())
    write_decay_csv(curves, cfg.out / "decay.csv")
    results = {"curves": []}
    checks = []
    for c in curves:
        rates = c.rates
        results["curves"].append({"mu": list(c.mu), "rates": rates,
                                  "final": {n_: float(c.series(n_)[-1]) for n_ in ("u", "T", "S")}})
        print(f"mu={c.mu}: lambda_u={rates['u']:.3f} lambda_T={rates['T']:.3f} lambda_S={rates['S']:.3f}")
        for name in ("u", "T", "S"):
            checks.append((f"mu={c.mu} err_{name} monotone after 10%", is_eventually_monotone(c.series(name)),
                           f"final {c.series(name)[-1]:.3e}"))
    lam = [c.rate("u") for c in curves]
    order = np.argsort([c.mu[0] for c in curves])
    checks.append(("lambda_u nondecreasing in mu", bool(np.all(np.diff(np.array(lam)[order]) >= 0)),
                   np.round(np.array(lam)[order], 3).tolist()))
    return results, checks


def _run_cavity(cfg: RunConfig) -> tuple[dict, list]:
    from .bench_cavity import CavityConfig, export_fields, final_relative_l2, max_pointwise_ratio, run_dns, run_twin

    cc = CavityConfig(Pr=cfg["cavity.Pr"], Ra=cfg["cavity.Ra"], Le=cfg["cavity.Le"], N=cfg["cavity.N"],
                      dt=cfg["dt"], dns_steps=cfg["cavity.dns_steps"], twin_steps=cfg["cavity.twin_steps"],
                      n=int(round(1.0 / cfg["h"])), H=cfg["H"], inv_Da=cfg["cavity.inv_Da"],
                      T_hot=cfg["cavity.T_hot"], T_cold=cfg["cavity.T_cold"], S_high=cfg["cavity.S_high"],
                      S_low=cfg["cavity.S_low"], pair=cfg["pair"])
    dns = run_dns(cc, backend=cfg["solver.backend"], tol=cfg["solver.tol"])
    dns.trajectory.write_csv(cfg.out / "dns_trajectory.csv")
    dns.stream.save(cfg.out / "dns_observations.bin")
    if cfg["vtk"]:
        export_fields(dns.disc, dns.final, cfg.out / "dns_final.vtk", title="DNS final state")
    results = {"dns": {"T_range": list(dns.T_range), "S_range": list(dns.S_range)}, "twins": []}
    lo_T, hi_T = sorted((cc.T_hot, cc.T_cold))
    lo_S, hi_S = sorted((cc.S_high, cc.S_low))
    checks = []
    twins = {}
    for mu in cfg["mu_list"]:
        tw = run_twin(cc, mu, dns.stream, dns, backend=cfg["solver.backend"], tol=cfg["solver.tol"])
        tag = "_".join(f"{m:g}" for m in mu)
        tw.write_csv(cfg.out / f"twin_mu_{tag}.csv")
        if cfg["vtk"]:
            export_fields(dns.disc, tw.final_cda, cfg.out / f"twin_mu_{tag}_final.vtk", title=f"CDA mu={mu}")
        twins[tuple(mu)] = tw
        rel = final_relative_l2(tw, dns.disc)
        drops = {n: float(tw.series(n)[-1] / tw.series(n)[0]) for n in ("u", "T", "S")}
        results["twins"].append({"mu": list(mu), "final_relative_l2": rel, "reduction": drops})
        print(f"mu={mu}: reduction u={drops['u']:.2e} T={drops['T']:.2e} S={drops['S']:.2e}; "
              f"final rel. L2 u={rel['u']:.2e} T={rel['T']:.2e} S={rel['S']:.2e}")
        start = int(np.ceil(0.1 * cfg["cavity.twin_steps"]))
        for n_ in ("u", "T", "S"):
            d = tw.series(n_)
            checks.append((f"mu={mu} diff_{n_} reduced 100x", drops[n_] <= 1e-2, f"{drops[n_]:.2e}"))
            checks.append((f"mu={mu} diff_{n_} below initial after 10%", bool(np.all(d[start:] < d[0])),
                           f"max {d[start:].max():.2e} vs {d[0]:.2e}"))
        checks.append((f"mu={mu} final fields within 1%", max(rel.values()) <= 1e-2,
                       " ".join(f"{k}={v:.1e}" for k, v in rel.items())))
        checks.append((f"mu={mu} T, S within wall range +- 0.05",
                       tw.T_range[0] >= lo_T - 0.05 and tw.T_range[1] <= hi_T + 0.05
                       and tw.S_range[0] >= lo_S - 0.05 and tw.S_range[1] <= hi_S + 0.05,
                       f"T {tw.T_range[0]:.3f}..{tw.T_range[1]:.3f} S {tw.S_range[0]:.3f}..{tw.S_range[1]:.3f}"))
    pair = [m for m in ((1.0, 1.0, 1.0), (10.0, 10.0, 10.0)) if m in twins]
    if len(pair) == 2:
        for n_ in ("u", "T", "S"):
            r = max_pointwise_ratio(twins[pair[0]].series(n_), twins[pair[1]].series(n_))
            checks.append((f"diff_{n_} curves for mu={pair[0]} and mu={pair[1]} within 2x after transient",
                           r <= 2.0, f"max ratio {r:.2e}"))
    checks.append(("DNS T, S within wall range +- 0.05",
                   dns.T_range[0] >= lo_T - 0.05 and dns.T_range[1] <= hi_T + 0.05
                   and dns.S_range[0] >= lo_S - 0.05 and dns.S_range[1] <= hi_S + 0.05,
                   f"T {dns.T_range[0]:.3f}..{dns.T_range[1]:.3f} S {dns.S_range[0]:.3f}..{dns.S_range[1]:.3f}"))
    return results, checks


DISPATCH = {"convergence": _run_convergence, "decay": _run_decay, "cavity": _run_cavity}


def dispatch(cfg: RunConfig) -> int:
    """Run the experiment and write its outputs; returns a process exit code."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg)
    try:
        results, checks = DISPATCH[cfg.experiment](cfg)
    except RuntimeError as exc:
        log.error("%s run failed: %s", cfg.experiment, exc)
        return 2
    write_manifest(cfg, results)
    if cfg.check:
        return 0 if _report(checks) else 1
    _report(checks)
    return 1 if results.get("failed") else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cda", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True)
    helps = {"convergence": "spatial convergence table on the manufactured problem",
             "decay": "error-versus-time curves for several nudging parameters",
             "cavity": "DNS reference run and nudged twin runs in the cavity"}
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON file with flat dotted keys (or a previous manifest.json)")
        p.add_argument("--check", action="store_true", help="exit nonzero if an acceptance threshold fails")
        p.add_argument("--out", help="output directory (default cda-<experiment>)")
        for k in ("mu1", "mu2", "mu3"):
            p.add_argument(f"--{k}", type=float, help="nudging parameter" + (
                "; replaces this component in every mu_list entry" if name != "convergence" else ""))
        p.add_argument("--H", type=float, help="coarse observation cell size (default 4h)")
        p.add_argument("--dt", type=float, help="time step")
        p.add_argument("--hmax", type=float,
                       help="mesh size h = 1/n; for convergence, the finest mesh of the h list")
        p.add_argument("--solver", choices=("lu", "gmres"), help="linear solver backend")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def _flag_overrides(args, experiment: str, file_values: dict) -> dict:
    over = {"mu1": args.mu1, "mu2": args.mu2, "mu3": args.mu3, "H": args.H, "dt": args.dt,
            "solver.backend": args.solver}
    if args.hmax is not None:
        if experiment == "convergence":
            base = file_values.get("h_list", SCHEMA["convergence"]["h_list"][0])
            hs = [h for h in base if h >= args.hmax * (1 - 1e-9)]
            if not hs:
                raise ConfigError("--hmax", f"no mesh in the h list is coarser than {args.hmax}")
            over["h_list"] = hs
        else:
            over["h"] = args.hmax
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        file_values = _load_file(args.config) if args.config else {}
        overrides = _flag_overrides(args, args.experiment, file_values)
        cfg = parse_config(args.experiment, args.config, overrides, args.out, args.check)
    except ConfigError as exc:
        print(f"cda: configuration error: {exc}", file=sys.stderr)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
