"""Command-line front end: ``qiee simulate``, ``qiee estimate`` and ``qiee oracle``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime
instability, 4 data integrity error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .dataset import load_csv
from .errors import DataIntegrityError, InstabilityError, QieeError, SpecError
from .estimands import (
    COMPOSITES,
    build_problem,
    canonical_method,
    effect,
    estimand_parts,
    estimate,
    fit_nuisance,
    inverse_cdf_estimate,
)
from .inference import rearrange
from .nuisance import LearnerSpec, RoleBinding, outcome_grid

EXIT_OK, EXIT_USAGE, EXIT_INSTABILITY, EXIT_DATA = 0, 2, 3, 4
SEED_ENV = "QIEE_SEED"
CACHE_ENV = "QIEE_CACHE_DIR"
DGP_ALIASES = {"ex1": "example1", "ex2": "example2", "ex3": "example3", "ex4": "longitudinal2"}


def load_schema(name: str) -> dict:
    """One of the JSON schemas shipped in ``qiee/schemas``."""
    text = resources.files("qiee").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(document, name: str) -> None:
    """Raise :class:`SpecError` when ``document`` does not match schema ``name``."""
    try:
        jsonschema.validate(document, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SpecError(f"{name} at {where}: {exc.message}") from None


def _clean(value):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _dump(document) -> str:
    return json.dumps(_clean(document), indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration.

    Built from a JSON object (see ``schemas/config.schema.json``) with
    command-line flags layered on top. ``to_dict`` gives the canonical form:
    sorted keys, canonical method names, lists for sequences and unset
    optional fields left out.
    """

    command: str = "estimate"
    data: str | None = None
    schema: dict = field(default_factory=dict)
    estimand: str | None = None
    learners: dict = field(default_factory=dict)
    q: tuple[float, ...] = (0.5,)
    method: str = "debiased"
    k_folds: int | None = 5
    grid: int = 100
    level: float = 0.95
    rearrange: bool = False
    seed: int = 1
    out: str | None = None
    emit_plot_data: bool = True
    scenarios: tuple[str, ...] = ()
    reps: int | None = None
    n: int = 1000
    jobs: int = 1
    dgp: str | None = None
    cache_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        validate(raw, "config")
        kw = dict(raw)
        if "method" in kw:
            kw["method"] = canonical_method(kw["method"])
        if kw.get("k_folds") == 0:
            kw["k_folds"] = None
        for key in ("q", "scenarios"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "schema" in kw:
            kw["schema"] = {k: (list(v) if isinstance(v, list) else v) for k, v in kw["schema"].items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["q"] = list(self.q)
        d["scenarios"] = list(self.scenarios)
        # unset optional fields are omitted; k_folds=None is meaningful and kept
        return {k: d[k] for k in sorted(d) if d[k] is not None or k == "k_folds"}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def bindings(self) -> dict:
        """Learner specs per role as :class:`RoleBinding` objects."""
        out = {}
        for role, raw in self.learners.items():
            raw = dict(raw)
            feats = raw.pop("features", None)
            out[role] = RoleBinding(LearnerSpec(**raw), None if feats is None else tuple(feats))
        return out


def _parse_q(text: str) -> tuple[float, ...]:
    try:
        qs = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse quantile list {text!r}") from None
    if not qs or not all(0 < q < 1 for q in qs):
        raise argparse.ArgumentTypeError("quantile levels must lie in (0, 1)")
    return qs


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("expected a non-negative integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=_positive_int, help="worker processes (default: available cores)")
    common.add_argument("--seed", type=_nonneg_int, help=f"base seed (overrides ${SEED_ENV} and the config)")
    common.add_argument("--reps", type=_positive_int, help="Monte Carlo replications")
    common.add_argument("--q", type=_parse_q, help="comma-separated quantile levels")
    common.add_argument("--rearrange", action="store_true", default=None, help="monotone-rearrange the q curve")
    common.add_argument("--method", choices=["plugin", "debiased", "oracle", "inverse-cdf"])
    common.add_argument("--grid", type=_positive_int, metavar="R", help="outcome grid size")
    common.add_argument("--folds", type=_nonneg_int, metavar="K", help="cross-fitting folds (0: full-sample fit)")

    parser = argparse.ArgumentParser(prog="qiee", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="run Monte Carlo scenarios")
    sim.add_argument("scenarios", nargs="*", help="scenario ids, e.g. ex1/TT/q50/debiased")
    sim.add_argument("--n", type=_positive_int, help="sample size per replication")
    sim.add_argument("--no-plot-data", dest="emit_plot_data", action="store_false", default=None)

    est = sub.add_parser("estimate", parents=[common], help="analyse a CSV file")
    est.add_argument("--data", help="CSV file")
    est.add_argument("--estimand", help="e.g. qte:a=1, qte, mediation:1m0, sqce")
    est.add_argument("--level", type=float, help="confidence level")

    ora = sub.add_parser("oracle", parents=[common], help="true quantiles of a built-in DGP")
    ora.add_argument("--dgp", help="example1, example2, example3, longitudinal2 or null")
    ora.add_argument("--estimand", help="estimand string")
    ora.add_argument("--cache-dir", help=f"truth cache directory (default ${CACHE_ENV} or ~/.cache/qiee)")
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """Merge the config file, ``QIEE_SEED`` and flags (in increasing precedence)."""
    environ = os.environ if environ is None else environ
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise SpecError(f"cannot read config {args.config!r}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise SpecError(f"config {args.config!r} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise SpecError("config must be a JSON object")
        if raw.get("command", args.command) != args.command:
            raise SpecError(f"config is for {raw['command']!r}, not {args.command!r}")
    raw["command"] = args.command
    cfg = RunConfig.from_dict(raw)
    if SEED_ENV in environ:
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise SpecError(f"{SEED_ENV} must be an integer") from None
        if seed < 0:
            raise SpecError(f"{SEED_ENV} must be non-negative")
        cfg = cfg.replace(seed=seed)
    opt = vars(args)
    cfg = cfg.replace(
        out=opt.get("out"), jobs=opt.get("jobs"), seed=opt.get("seed"), reps=opt.get("reps"), q=opt.get("q"),
        rearrange=opt.get("rearrange"), grid=opt.get("grid"), data=opt.get("data"), estimand=opt.get("estimand"),
        level=opt.get("level"), n=opt.get("n"), dgp=opt.get("dgp"), cache_dir=opt.get("cache_dir"),
        emit_plot_data=opt.get("emit_plot_data"),
    )
    if opt.get("method"):
        cfg = cfg.replace(method=canonical_method(opt["method"]))
    if opt.get("folds") is not None:
        cfg = dataclasses.replace(cfg, k_folds=opt["folds"] or None)
    if opt.get("scenarios"):
        cfg = cfg.replace(scenarios=tuple(opt["scenarios"]))
    if opt.get("jobs") is None and "jobs" not in raw:
        from .simlab import default_jobs

        cfg = cfg.replace(jobs=default_jobs())
    # round-trip through the schema so flag values obey the same rules
    return RunConfig.from_dict(cfg.to_dict())


# ---------------------------------------------------------------------------
# simulate

RECORD_COLUMNS = ("scenario", "rep", "seed", "status", "estimate", "se", "lo", "hi", "hit", "error")
PLOT_COLUMNS = ("scenario", "estimator", "q", "metric", "value")


def _with_q(label: str, q: float) -> str:
    return re.sub(r"/q\d{2}/", f"/q{q * 100:02g}/", label, count=1)


def _scenarios(cfg: RunConfig, flags_given: dict) -> list:
    from .simlab import parse_scenario

    if not cfg.scenarios:
        raise SpecError("simulate needs at least one scenario id")
    pairs = [(lab, None) for lab in cfg.scenarios]
    if flags_given.get("q"):
        pairs = [(lab, q) for lab in cfg.scenarios for q in cfg.q]
    out = []
    for lab, q in dict.fromkeys(pairs):
        s = parse_scenario(lab, n=cfg.n, n_reps=cfg.reps or 200, base_seed=cfg.seed)
        changes = {} if q is None else {"q": q, "label": _with_q(s.label, q)}
        if flags_given.get("method"):
            changes["method"] = cfg.method
        if flags_given.get("grid"):
            changes["n_grid"] = cfg.grid
        if flags_given.get("folds"):
            changes["k_folds"] = cfg.k_folds
        out.append(dataclasses.replace(s, **changes) if changes else s)
    return out


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_simulation(results, out: Path, emit_plot_data: bool = True) -> list[Path]:
    """Write the per-replication CSV, the JSON summary and the long-format plot CSV."""
    from .simlab import LEARNER_NOTE

    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for res in results:
        label = res.scenario.label or res.scenario.estimand
        for r in res.records:
            w.writerow([label] + [_format_cell(r.get(c)) for c in RECORD_COLUMNS[1:]])
    records_path = out / "mc_records.csv"
    records_path.write_text(buf.getvalue(), encoding="utf-8")

    summary = {
        "learner_note": LEARNER_NOTE,
        "scenarios": [
            {"scenario": res.scenario.label or res.scenario.estimand, "spec": res.scenario.to_dict(),
             "summary": res.summary()}
            for res in results
        ],
    }
    summary = _clean(summary)
    validate(summary, "mc_summary")
    summary_path = out / "mc_summary.json"
    summary_path.write_text(_dump(summary), encoding="utf-8")
    paths = [records_path, summary_path]

    if emit_plot_data:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for res in results:
            for row in res.long_rows():
                w.writerow([_format_cell(row[c]) for c in PLOT_COLUMNS])
        plot_path = out / "plot_data.csv"
        plot_path.write_text(buf.getvalue(), encoding="utf-8")
        paths.append(plot_path)
    return paths


def cmd_simulate(cfg: RunConfig, flags_given: dict | None = None, stdout=None) -> int:
    from .simlab import run_campaign

    stdout = stdout or sys.stdout
    scenarios = _scenarios(cfg, flags_given or {})
    out = Path(cfg.out or "qiee-out")
    results = run_campaign(scenarios, n_jobs=cfg.jobs, raise_on_failure=False)
    paths = write_simulation(results, out, cfg.emit_plot_data)
    unstable = [r for r in results if r.n_failed > 0.1 * len(r.records)]
    for res in results:
        s = res.summary()
        stdout.write(
            f"{s['scenario']}: truth={s['truth']:.4f} bias={s.get('bias', float('nan')):.4f} "
            f"sd={s.get('sd', float('nan')):.4f} coverage={s.get('coverage', float('nan')):.3f} "
            f"failed={s['n_failed']}/{s['n_reps']}\n"
        )
    stdout.write("wrote " + ", ".join(str(p) for p in paths) + "\n")
    if unstable:
        raise InstabilityError(
            "more than 10% of replications failed in: "
            + ", ".join(r.scenario.label or r.scenario.estimand for r in unstable)
            + " (partial artifacts written)"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _estimate_rows(cfg: RunConfig, data) -> tuple[list[dict], dict]:
    """Report rows over ``cfg.q`` and the nuisance provenance per estimand part."""
    method = cfg.method
    if method == "oracle":
        raise SpecError("the oracle method needs the true nuisance functions of a known DGP; use it with simulate")
    parts = estimand_parts(cfg.estimand)
    bindings = cfg.bindings()
    problems = {p: build_problem(p, cfg.q[0], cfg.grid) for p in parts}
    known = set().union(*(pr.role_names for pr in problems.values()))
    unknown = set(bindings) - known
    if unknown:
        raise SpecError(f"learners given for role(s) not used by {cfg.estimand!r}: {sorted(unknown)}")
    fits, grids = {}, {}
    for part, problem in problems.items():
        own = {k: v for k, v in bindings.items() if k in problem.role_names}
        grids[part] = outcome_grid(data.defined_outcomes(), cfg.grid)
        fits[part] = fit_nuisance(problem, data, own, cfg.k_folds, cfg.seed, grid=grids[part])
    rows = []
    for q in cfg.q:
        reports = []
        for part in parts:
            problem = build_problem(part, q, cfg.grid)
            if method == "inverse-cdf":
                reports.append(inverse_cdf_estimate(problem, data, fits[part], grids[part], cfg.level))
            else:
                reports.append(estimate(problem, data, fits[part], method, cfg.level))
        if len(reports) == 2:
            eff = effect(reports[0], reports[1], name=cfg.estimand, level=cfg.level)
            rows.append({"q": q, "estimate": eff.estimate, "se": eff.se, "ci_lo": eff.ci[0], "ci_hi": eff.ci[1],
                         "B": None, "variance_method": eff.variance_method,
                         "components": [r.to_dict() for r in reports]})
        else:
            r = reports[0]
            rows.append({"q": q, "estimate": r.theta, "se": r.se, "ci_lo": r.ci[0], "ci_hi": r.ci[1], "B": r.B,
                         "variance_method": r.variance_method})
    return rows, {part: fit.provenance for part, fit in fits.items()}


def format_table(report: dict) -> str:
    """Fixed-width table of the estimate rows."""
    rearranged = report.get("rearranged", False)
    head = f"{'q':>6} {'estimate':>12} {'se':>10} {'ci_lo':>12} {'ci_hi':>12}"
    if rearranged:
        head += f" {'rearranged':>12}"
    lines = [f"{report['estimand']} ({report['method']}, {report['level']:.0%} Wald intervals)", head]
    for r in report["rows"]:
        line = f"{r['q']:>6.3f} {r['estimate']:>12.4f} {r['se']:>10.4f} {r['ci_lo']:>12.4f} {r['ci_hi']:>12.4f}"
        if rearranged:
            line += f" {r['rearranged']:>12.4f}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_estimate(cfg: RunConfig, stdout=None) -> int:
    stdout = stdout or sys.stdout
    if not cfg.data:
        raise SpecError("estimate needs a data file (--data or 'data' in the config)")
    if not cfg.estimand:
        raise SpecError("estimate needs an estimand (--estimand or 'estimand' in the config)")
    if not cfg.schema:
        raise SpecError("estimate needs a column schema ('schema' in the config)")
    if cfg.estimand not in COMPOSITES:
        estimand_parts(cfg.estimand)
    qs = tuple(sorted(set(cfg.q)))
    cfg = dataclasses.replace(cfg, q=qs)
    if not Path(cfg.data).is_file():
        raise DataIntegrityError(f"data file {cfg.data!r} not found")
    data = load_csv(cfg.data, cfg.schema)
    rows, provenance = _estimate_rows(cfg, data)
    report = {"estimand": cfg.estimand, "method": cfg.method, "level": cfg.level, "rows": rows,
              "config": cfg.to_dict(), "provenance": provenance, "rearranged": False}
    if cfg.rearrange and len(rows) >= 2:
        fixed = rearrange([r["q"] for r in rows], [r["estimate"] for r in rows])
        for r, v in zip(rows, fixed):
            r["rearranged"] = float(v)
        report["rearranged"] = True
    report = _clean(report)
    validate(report, "estimate_report")
    table = format_table(report)
    stdout.write(table)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "estimate_report.json").write_text(_dump(report), encoding="utf-8")
        (out / "estimate_table.txt").write_text(table, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle


def _cache_path(cfg: RunConfig) -> Path:
    base = cfg.cache_dir or os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "qiee"
    return Path(base) / "oracle_truth.json"


def oracle_table(cfg: RunConfig) -> dict:
    """Truth table for ``cfg.dgp``/``cfg.estimand`` over ``cfg.q``, with a JSON file cache."""
    from .simlab import FAMILIES, oracle_truth

    if not cfg.dgp:
        raise SpecError("oracle needs --dgp")
    family = DGP_ALIASES.get(cfg.dgp, cfg.dgp)
    if family not in FAMILIES:
        raise SpecError(f"unknown DGP {cfg.dgp!r}; choose from {', '.join(FAMILIES)}")
    estimand = cfg.estimand or {"example1": "qte", "example2": "mediation:1m0", "example3": "sqce",
                                "longitudinal2": "longitudinal:a=1,1", "null": "qte"}[family]
    estimand_parts(estimand)
    path = _cache_path(cfg)
    try:
        cache = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        cache = {}
    rows, hits = [], 0
    for q in cfg.q:
        key = f"{family}|{estimand}|{q!r}"
        if key in cache:
            hits += 1
            value = cache[key]
        else:
            value = float(oracle_truth(family, estimand, q))
            cache[key] = value
        rows.append({"q": q, "truth": value})
    if hits < len(cfg.q):
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(cache, indent=1, sort_keys=True), encoding="utf-8")
            tmp.replace(path)
        except OSError:
            pass
    table = {"dgp": family, "estimand": estimand, "rows": rows, "cached": hits == len(cfg.q)}
    validate(table, "oracle")
    return table


def cmd_oracle(cfg: RunConfig, stdout=None) -> int:
    stdout = stdout or sys.stdout
    table = oracle_table(cfg)
    text = _dump(table)
    stdout.write(text)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_truth.json").write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def main(argv=None, stdout=None, stderr=None) -> int:
    """Run the CLI and return its exit code."""
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            flags = {k: getattr(args, k) is not None for k in ("q", "method", "grid", "folds")}
            return cmd_simulate(cfg, flags, stdout)
        if args.command == "estimate":
            return cmd_estimate(cfg, stdout)
        return cmd_oracle(cfg, stdout)
    except QieeError as exc:
        stderr.write(f"qiee: {type(exc).__name__}: {exc}\n")
        return exc.exit_code if exc.exit_code in (EXIT_USAGE, EXIT_INSTABILITY, EXIT_DATA) else EXIT_INSTABILITY


if __name__ == "__main__":
    sys.exit(main())
