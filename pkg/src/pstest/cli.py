"""Command line front end.

Every command writes its results, a frozen ``config.json`` of the effective
settings and a ``manifest.json`` (file hashes, version and a timestamp) to
the output directory.  Exit status is 0 on success regardless of the
statistical decision, 2 for invalid input and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import secrets
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as _io
from . import rng as _rng
from .baselines import DEFAULT_B_PERM, PermutationScheme, aspu_test, rao_score_test, spu_test, sum_test
from .basis import (
    Basis,
    custom_basis,
    partition_basis,
    pca_basis,
    validate_basis,
    weighted_pca_from_scores,
)
from .errors import NumericalError, PSTError, ValidationError
from .model import Dataset, compute_scores, fit_null
from .posthoc import DEFAULT_B, MIN_B, posthoc_inference
from .pst import adaptive_pca_test, pst_exact_normal, pst_statistic
from .simulate import (
    RefinementScenario,
    Scenario,
    bundled_scenario,
    grid_refinement_study,
    parse_method,
    run_study,
)

COMMANDS = ("test", "exact", "adaptive", "posthoc", "simulate", "refine")
BASIS_KINDS = ("pca", "wpca", "partition", "custom", "adaptive")
DATA_COMMANDS = ("test", "exact", "adaptive", "posthoc")
P_FLOOR = 1e-300

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class RunConfig:
    command: str
    out: str = "pstest-out"
    y: str | None = None
    x: str | None = None
    g: str | None = None
    basis_file: str | None = None
    partition_file: str | None = None
    family: str = "gaussian"
    basis: str = "pca"
    r: int | None = None
    alpha: float = 0.05
    b: int = DEFAULT_B
    b_perm: int = DEFAULT_B_PERM
    seed: int | None = None
    center: bool = False
    intercept: bool = True
    chunks: list[int] = field(default_factory=lambda: [5])
    baselines: list[str] = field(default_factory=list)
    scenario: str | None = None
    replicates: int | None = None
    methods: list[str] | None = None
    # runtime only: never written to config.json, never affects results
    threads: int | None = field(default=None, metadata={"frozen": False})
    _data: dict = field(default_factory=dict, repr=False, metadata={"frozen": False})

    def frozen(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.metadata.get("frozen", True)}


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig) if f.metadata.get("frozen", True)) + ("threads",)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pstest", description="Projected score tests.")
    parser.add_argument("--version", action="version", version=f"pstest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=S, help="JSON file of settings; flags override it")
        p.add_argument("--out", default=S, help="output directory (default: pstest-out)")
        p.add_argument("--seed", type=int, default=S, help="RNG seed (generated and recorded if omitted)")
        p.add_argument("--alpha", type=float, default=S, help="significance level (default 0.05)")
        p.add_argument("--threads", type=int, default=S,
                       help=f"worker count (default: ${_rng.THREADS_ENV} or 1); results do not depend on it")

    def data(p):
        p.add_argument("--y", default=S, help="outcome CSV: one column with a header")
        p.add_argument("--g", default=S, help="predictor CSV: n rows, one column per variable")
        p.add_argument("--x", default=S, help="nuisance covariate CSV (optional)")
        p.add_argument("--family", choices=("gaussian", "binomial"), default=S)
        p.add_argument("--no-intercept", dest="intercept", action="store_false", default=S,
                       help="do not add an intercept column to x")
        p.add_argument("--center", dest="center", action="store_true", default=S,
                       help="centre every predictor column before analysis")

    def basis_opts(p, kinds=BASIS_KINDS[:4]):
        p.add_argument("--basis", choices=kinds, default=S, help="basis kind (default pca)")
        p.add_argument("--r", type=int, default=S, help="basis dimension for pca/wpca")
        p.add_argument("--basis-file", dest="basis_file", default=S, help="p x r CSV for --basis custom")
        p.add_argument("--partition-file", dest="partition_file", default=S,
                       help="CSV of index,group pairs (0-based indices) for --basis partition")

    p = sub.add_parser("test", help="projected score test with chi-squared p-value")
    common(p), data(p), basis_opts(p)
    p.add_argument("--baselines", type=_csv_list, default=S,
                   help="comma list of reference tests: sum, rao, spu:G, spu:inf, aspu")
    p.add_argument("--b-perm", dest="b_perm", type=int, default=S, help="permutations for SPU/aSPU")

    p = sub.add_parser("exact", help="exact test for the normal linear model")
    common(p), data(p), basis_opts(p)

    p = sub.add_parser("adaptive", help="adaptive weighted-PCA test")
    common(p), data(p)
    p.add_argument("--chunks", type=lambda s: [int(t) for t in _csv_list(s)], default=S,
                   help="leading chunk sizes, comma separated (default 5)")

    p = sub.add_parser("posthoc", help="maxT inference on standardized projected scores")
    common(p), data(p), basis_opts(p, BASIS_KINDS)
    p.add_argument("--b", type=int, default=S, help=f"Monte Carlo draws (default {DEFAULT_B})")
    p.add_argument("--chunks", type=lambda s: [int(t) for t in _csv_list(s)], default=S,
                   help="chunk sizes for --basis adaptive")

    p = sub.add_parser("simulate", help="power and error-rate study")
    common(p)
    p.add_argument("--scenario", default=S, help="bundled scenario name or JSON file (default desk)")
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--methods", type=_csv_list, default=S, help="comma list, e.g. apca,pca:10,aspu")
    p.add_argument("--b", type=int, default=S)
    p.add_argument("--b-perm", dest="b_perm", type=int, default=S)

    p = sub.add_parser("refine", help="grid refinement convergence study")
    common(p)
    p.add_argument("--scenario", default=S, help="JSON file with refinement settings")
    p.add_argument("--replicates", type=int, default=S)
    return parser


def _load_config_file(path: str) -> dict:
    d = _load_json(path, "config")
    if not isinstance(d, dict):
        raise ValidationError(f"config file {path!r} must contain a JSON object")
    unknown = sorted(set(d) - set(CONFIG_KEYS))
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown} in {path!r}; valid keys: {sorted(CONFIG_KEYS)}")
    return d


_INT_KEYS = ("r", "b", "b_perm", "seed", "replicates", "threads")
_BOOL_KEYS = ("center", "intercept")
_LIST_KEYS = {"chunks": int, "baselines": str, "methods": str}


def _coerce(settings: dict) -> dict:
    """Type-check values that may come from a JSON config file."""
    out = {}
    for k, v in settings.items():
        if v is None or k == "command":
            out[k] = v
        elif k in _INT_KEYS:
            _require(isinstance(v, int) and not isinstance(v, bool), f"{k} must be an integer, got {v!r}")
            out[k] = v
        elif k == "alpha":
            _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"alpha must be a number, got {v!r}")
            out[k] = float(v)
        elif k in _BOOL_KEYS:
            _require(isinstance(v, bool), f"{k} must be true or false, got {v!r}")
            out[k] = v
        elif k in _LIST_KEYS:
            _require(isinstance(v, list) and all(isinstance(t, _LIST_KEYS[k]) for t in v),
                     f"{k} must be a list of {_LIST_KEYS[k].__name__}, got {v!r}")
            out[k] = list(v)
        else:
            _require(isinstance(v, str), f"{k} must be a string, got {v!r}")
            out[k] = v
    return out


def parse_and_validate(argv: list[str] | None = None) -> RunConfig:
    """Resolve defaults, the optional config file and flags, then validate."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    settings = {}
    if "config" in ns:
        settings.update(_load_config_file(ns.pop("config")))
        if settings.get("command", command) != command:
            raise ValidationError(f"config file is for command {settings['command']!r}, not {command!r}")
    settings.update(ns)
    settings["command"] = command
    cfg = RunConfig(**_coerce(settings))
    _validate(cfg)
    return cfg


def _require(cond: bool, msg: str):
    if not cond:
        raise ValidationError(msg)


def _validate(cfg: RunConfig):
    _require(cfg.command in COMMANDS, f"command must be one of {COMMANDS}")
    _require(0.0 < cfg.alpha < 1.0, f"alpha must lie in (0, 1), got {cfg.alpha}")
    if cfg.threads is not None:
        _require(cfg.threads >= 1, "threads must be positive")
    if cfg.seed is None:
        cfg.seed = secrets.randbits(63)
    _require(0 <= cfg.seed < 2**63, "seed must be a non-negative 63-bit integer")
    if cfg.command in DATA_COMMANDS:
        _validate_data(cfg)
    elif cfg.command == "simulate":
        cfg._data["scenario"] = _simulation_scenario(cfg)
    else:
        cfg._data["scenario"] = _refinement_scenario(cfg)


def _validate_data(cfg: RunConfig):
    _require(cfg.y is not None and cfg.g is not None, f"{cfg.command} needs --y and --g")
    _require(cfg.family in ("gaussian", "binomial"), f"unknown family {cfg.family!r}")
    if cfg.command == "exact":
        _require(cfg.family == "gaussian", "the exact test is only available for --family gaussian")
    y, y_name = _io.read_vector(cfg.y, "outcome")
    g, g_names = _io.read_matrix(cfg.g, "predictor")
    if g.shape[0] != y.shape[0]:
        raise ValidationError(f"dimension mismatch: outcome {cfg.y!r} has {y.shape[0]} rows but "
                              f"predictor {cfg.g!r} has shape {g.shape}")
    if cfg.x is not None:
        x, x_names = _io.read_matrix(cfg.x, "covariate")
        if x.shape[0] != y.shape[0]:
            raise ValidationError(f"dimension mismatch: outcome {cfg.y!r} has {y.shape[0]} rows but "
                                  f"covariate {cfg.x!r} has shape {x.shape}")
    else:
        x, x_names = np.empty((y.shape[0], 0)), []
    has_constant = x.shape[1] > 0 and bool(np.any((np.ptp(x, axis=0) == 0) & (x[0] != 0)))
    added = False
    if cfg.intercept and not has_constant:
        x = np.column_stack([np.ones(y.shape[0]), x])
        x_names = ["(intercept)", *x_names]
        added = True
    if cfg.center:
        g = g - g.mean(axis=0)
    ds = Dataset(y, x, g, cfg.family)
    d = ds.n - ds.m
    cfg._data.update(dataset=ds, g_names=g_names, x_names=x_names, y_name=y_name, intercept_added=added)

    if cfg.command == "adaptive" or (cfg.command == "posthoc" and cfg.basis == "adaptive"):
        _require(all(c >= 1 for c in cfg.chunks) and cfg.chunks, "chunk sizes must be positive")
        _require(sum(cfg.chunks) <= d - 1, f"chunk sizes {cfg.chunks} need r < n - m = {d}")
    else:
        _require(cfg.basis in BASIS_KINDS, f"basis must be one of {BASIS_KINDS}")
        if cfg.basis in ("pca", "wpca"):
            _require(cfg.r is not None, f"--basis {cfg.basis} needs --r")
            _require(cfg.r >= 1, f"r must be positive, got {cfg.r}")
            _require(cfg.r < d, f"r = {cfg.r} violates the constraint r = dim(L) < n - m = {d}")
            _require(cfg.r <= ds.p, f"r = {cfg.r} exceeds the number of predictors p = {ds.p}")
        elif cfg.basis == "partition":
            _require(cfg.partition_file is not None, "--basis partition needs --partition-file")
            part = _io.read_partition(cfg.partition_file)
            top = max(max(grp) for grp in part.groups)
            _require(top < ds.p, f"partition file {cfg.partition_file!r} refers to predictor index "
                                 f"{top} but the predictor file has p = {ds.p} columns (indices are 0-based)")
            cfg._data["basis"] = partition_basis(part, ds.p)
        elif cfg.basis == "custom":
            _require(cfg.basis_file is not None, "--basis custom needs --basis-file")
            q, _ = _io.read_matrix(cfg.basis_file, "basis")
            _require(q.shape[0] == ds.p, f"dimension mismatch: basis {cfg.basis_file!r} has shape "
                                         f"{q.shape} but predictor {cfg.g!r} has p = {ds.p} columns")
            cfg._data["basis"] = custom_basis(q)
        if "basis" in cfg._data:
            r = cfg._data["basis"].r
            _require(r < d, f"{cfg.basis} basis has r = {r}, violating r = dim(L) < n - m = {d}")
            cfg.r = r
    if cfg.command == "posthoc":
        _require(cfg.b >= MIN_B, f"b must be at least {MIN_B}, got {cfg.b}")
    for spec in cfg.baselines:
        kind, _ = parse_method(spec)
        _require(kind in ("sum", "rao", "spu", "aspu"), f"{spec!r} is not a baseline test")
    _require(cfg.b_perm >= 1, "b_perm must be positive")


def _simulation_scenario(cfg: RunConfig) -> Scenario:
    name = cfg.scenario or "desk"
    sc = Scenario.from_json(name) if name.endswith(".json") or os.path.sep in name else bundled_scenario(name)
    cfg.scenario = name
    kw = {"seed": cfg.seed, "alpha": cfg.alpha, "b": cfg.b, "b_perm": cfg.b_perm}
    if cfg.replicates is not None:
        kw["replicates"] = cfg.replicates
    if cfg.methods is not None:
        kw["methods"] = tuple(cfg.methods)
    return replace(sc, **kw)


def _refinement_scenario(cfg: RunConfig) -> RefinementScenario:
    base = {}
    if cfg.scenario:
        base = _load_json(cfg.scenario, "refinement scenario")
    rs = RefinementScenario.from_dict(base)
    kw = {"seed": cfg.seed}
    if cfg.replicates is not None:
        kw["replicates"] = cfg.replicates
    return replace(rs, **kw)


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{what} file {path!r} does not exist") from None
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read {what} file {path!r}: {exc}") from None


# ------------------------------------------------------------------ run --

def _p_entry(d: dict) -> dict:
    p = d.get("p_value")
    if p is not None and p < P_FLOOR:
        d["p_value_note"] = f"<{P_FLOOR:g}"
    return d


def _report(cfg: RunConfig, **body) -> dict:
    return {"schema_version": _io.SCHEMA_VERSION, "command": cfg.command, **body}


def _data_summary(cfg: RunConfig) -> dict:
    ds = cfg._data["dataset"]
    return {"n": ds.n, "m": ds.m, "p": ds.p, "family": ds.family,
            "intercept_added": cfg._data["intercept_added"], "centered": cfg.center,
            "covariates": cfg._data["x_names"]}


def _null_fit_summary(fit) -> dict:
    return {"alpha_hat": fit.alpha_hat, "iterations": fit.iterations, "converged": fit.converged,
            "sigma2_hat": fit.sigma2_hat}


def _build_basis(cfg: RunConfig, sm) -> Basis:
    if "basis" in cfg._data:
        return cfg._data["basis"]
    ds = cfg._data["dataset"]
    if cfg.basis == "pca":
        return pca_basis(ds, cfg.r)
    return weighted_pca_from_scores(sm, cfg.r)


def _cmd_test(cfg: RunConfig, out: Path) -> list[Path]:
    ds = cfg._data["dataset"]
    fit = fit_null(ds)
    sm = compute_scores(ds, fit)
    basis = _build_basis(cfg, sm)
    res = pst_statistic(sm, basis)
    base = []
    scheme = PermutationScheme(cfg.b_perm, _rng.child_seed(cfg.seed, 0x7065), cfg.threads)
    for spec in cfg.baselines:
        kind, arg = parse_method(spec)
        if kind == "sum":
            r = sum_test(sm, np.ones(ds.p)).as_dict()
        elif kind == "rao":
            r = rao_score_test(sm).as_dict()
        elif kind == "spu":
            r = spu_test(sm, arg, scheme).as_dict()
        else:
            r = aspu_test(sm, scheme=scheme).as_dict()
        base.append(_p_entry(r))
    report = _report(cfg, data=_data_summary(cfg), null_fit=_null_fit_summary(fit),
                     result=_p_entry(res.as_dict()),
                     basis_diagnostics=validate_basis(basis, sm).as_dict(), baselines=base)
    files = [_io.write_json(out / "report.json", report)]
    files.append(_io.write_csv(out / "rotated_scores.csv", ["component", "rotated_score"],
                               enumerate(res.rotated_scores.tolist(), 1)))
    return files


def _cmd_exact(cfg: RunConfig, out: Path) -> list[Path]:
    ds = cfg._data["dataset"]
    fit = fit_null(ds)
    sm = compute_scores(ds, fit)
    basis = _build_basis(cfg, sm)
    res = pst_exact_normal(ds, basis)
    asym = pst_statistic(sm, basis)
    report = _report(cfg, data=_data_summary(cfg), null_fit=_null_fit_summary(fit),
                     result=_p_entry(res.as_dict()), chi2_approximation=_p_entry(asym.as_dict()))
    return [_io.write_json(out / "report.json", report)]


def _adaptive(cfg: RunConfig):
    ds = cfg._data["dataset"]
    fit = fit_null(ds)
    sm = compute_scores(ds, fit)
    return fit, sm, adaptive_pca_test(ds, fit, cfg.alpha, cfg.chunks, score_model=sm)


def _cmd_adaptive(cfg: RunConfig, out: Path) -> list[Path]:
    fit, _, res = _adaptive(cfg)
    d = res.as_dict()
    for s in d["steps"]:
        _p_entry(s)
    report = _report(cfg, data=_data_summary(cfg), null_fit=_null_fit_summary(fit), result=d)
    files = [_io.write_json(out / "report.json", report)]
    cols = ["start", "stop", "statistic", "df", "p_value", "rejected"]
    files.append(_io.write_csv(out / "steps.csv", cols,
                               ([getattr(s, c) for c in cols] for s in res.steps)))
    return files


def _cmd_posthoc(cfg: RunConfig, out: Path) -> list[Path]:
    extra = {}
    if cfg.basis == "adaptive":
        fit, sm, ad = _adaptive(cfg)
        basis = ad.selected_basis()
        if basis is None:
            basis = ad.basis.columns(cfg.chunks[0])
        extra["adaptive"] = ad.as_dict()
    else:
        ds = cfg._data["dataset"]
        fit = fit_null(ds)
        sm = compute_scores(ds, fit)
        basis = _build_basis(cfg, sm)
    test = pst_statistic(sm, basis)
    ph = posthoc_inference(sm, basis, cfg.alpha, cfg.b, cfg.seed, n_jobs=cfg.threads)
    report = _report(cfg, data=_data_summary(cfg), null_fit=_null_fit_summary(fit),
                     result=_p_entry(test.as_dict()), posthoc=ph.summary(), **extra)
    names = cfg._data["g_names"]
    files = [_io.write_json(out / "report.json", report)]
    files.append(_io.write_csv(out / "posthoc.csv",
                               ["index", "name", "projected", "standardized", "p_value", "rejected"],
                               ((j, names[j], *rest) for j, *rest in ph.rows())))
    files.append(_io.write_csv(out / "null_maxima.csv", ["draw", "max_abs_standardized"],
                               enumerate(ph.max_null_samples.tolist())))
    return files


def _cmd_simulate(cfg: RunConfig, out: Path) -> list[Path]:
    sc = cfg._data["scenario"]
    rep = run_study(sc, n_jobs=cfg.threads)
    files = [_io.write_json(out / "scenario.json", sc.to_dict())]
    for name, (cols, rows) in rep.tables().items():
        files.append(_io.write_csv(out / f"{name}.csv", cols, rows))
    report = _report(cfg, scenario=cfg.scenario, replicates=sc.replicates, betas=list(sc.betas),
                     methods=list(sc.methods), rows=list(rep.rows), failures=list(rep.failures))
    files.append(_io.write_json(out / "report.json", report))
    return files


def _cmd_refine(cfg: RunConfig, out: Path) -> list[Path]:
    rs = cfg._data["scenario"]
    rep = grid_refinement_study(rs, n_jobs=cfg.threads)
    cols, rows = rep.table()
    files = [_io.write_json(out / "scenario.json", rs.to_dict()),
             _io.write_csv(out / "convergence.csv", cols, rows),
             _io.write_csv(out / "statistics.csv", *rep.statistics_table())]
    report = _report(cfg, scenario=rs.to_dict(), convergence=[dict(zip(cols, r)) for r in rows])
    files.append(_io.write_json(out / "report.json", report))
    return files


_DISPATCH = {"test": _cmd_test, "exact": _cmd_exact, "adaptive": _cmd_adaptive,
             "posthoc": _cmd_posthoc, "simulate": _cmd_simulate, "refine": _cmd_refine}


def run(cfg: RunConfig) -> int:
    """Execute a validated configuration and write its artifacts."""
    if cfg.threads is None:
        cfg.threads = _rng.default_threads()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    config_text = _io.dumps(cfg.frozen())
    (out / "config.json").write_text(config_text, encoding="utf-8")
    files = _DISPATCH[cfg.command](cfg, out)
    manifest = {
        "schema_version": _io.SCHEMA_VERSION,
        "pstest_version": __version__,
        "command": cfg.command,
        "seed": cfg.seed,
        "config_sha256": _io.sha256_text(config_text),
        "files": {p.name: _io.sha256_file(p) for p in sorted(files, key=lambda p: p.name)},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    _io.write_json(out / "manifest.json", manifest)
    return EXIT_OK


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "pstest"
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", name)
        tb = tb.tb_next
    return name


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_and_validate(argv)
        return run(cfg)
    except NumericalError as exc:
        print(f"pstest: numerical error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PSTError as exc:
        print(f"pstest: invalid input [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"pstest: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
