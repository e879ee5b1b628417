"""Command-line front end: audit, estimate, simulate, replicate.

Every command reads one JSON configuration file (see README). Reports are
JSON documents validated against ``schemas/report.schema.json`` and carry
provenance: a SHA-256 of the effective configuration, the seed, the package
version and a timestamp.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .controls import (
    ControlArm,
    EligibilityCriteria,
    MatchConfig,
    hybrid_match,
    power_prior_arm,
    select_historical,
    synthetic_control_arm,
    test_and_pool,
    virtual_control,
)
from .data import ColumnMapping, Dataset, export_csv, ingest_csv, pool
from .errors import ExtControlError, InvalidConfig
from .estimand import EstimandSpec, validate_estimand
from .estimators import fit_propensity, identifiability_diagnostics
from .estimators.models import OutcomeSpec
from .fitness import FitnessRules, fitness_report
from .replicate import ESTIMATORS, run_estimator, run_replicates
from .sensitivity import causal_gap_sweep, e_value
from .simulate import ScmConfig, generate, scenario_library, true_ate

__all__ = ["main", "cmd_audit", "cmd_estimate", "cmd_replicate", "cmd_simulate", "load_config", "config_hash"]

SCHEMA_VERSION = "1.0"
SCHEMA_PATH = Path(__file__).with_name("schemas") / "report.schema.json"
CONTROL_METHODS = ("internal", "historical", "synthetic", "test-and-pool", "power-prior", "matched", "virtual")


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ExtControlError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# configuration and provenance
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InvalidConfig("config must be a JSON object")
    cfg.setdefault("_base", str(path.resolve().parent))
    return cfg


def config_hash(cfg: Mapping[str, Any]) -> str:
    canon = json.dumps({k: v for k, v in cfg.items() if k != "_base"}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _require_seed(cfg: Mapping[str, Any]) -> int:
    seed = cfg.get("seed")
    if seed is None or isinstance(seed, bool) or not isinstance(seed, int):
        raise InvalidConfig("config needs an integer 'seed' (or pass --seed)")
    return seed


def _provenance(cfg: Mapping[str, Any], command: str) -> dict[str, Any]:
    return {
        "config_sha256": config_hash(cfg),
        "seed": cfg.get("seed"),
        "version": __version__,
        "command": command,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _finite(x):
    """JSON has no NaN/inf: map them to null."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, Mapping):
        return {str(k): _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, np.ndarray):
        return _finite(x.tolist())
    if isinstance(x, np.generic):
        return _finite(x.item())
    return x


def _dump(report: Mapping[str, Any], out: str | Path | None) -> str:
    text = json.dumps(_finite(report), indent=2)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    return text


def _resolve(cfg: Mapping[str, Any], p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else Path(cfg.get("_base", ".")) / path


def _load_sources(cfg: Mapping[str, Any]) -> list[tuple[dict[str, Any], Dataset]]:
    if not cfg.get("sources"):
        raise InvalidConfig("config declares no data sources")
    out = []
    for src in cfg["sources"]:
        path = _resolve(cfg, src["path"])
        if not path.exists():
            raise FileNotFoundError(f"data file not found: {path}")
        mapping = src["mapping"]
        if isinstance(mapping, str):
            # a path to a mapping JSON such as the one written by `simulate`
            mpath = _resolve(cfg, mapping)
            if not mpath.exists():
                raise FileNotFoundError(f"mapping file not found: {mpath}")
            mapping = json.loads(mpath.read_text())
        out.append((src, ingest_csv(path, ColumnMapping.from_dict(mapping))))
    return out


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


def cmd_audit(cfg: Mapping[str, Any]) -> dict[str, Any]:
    """Fitness report for each declared external source, in declaration order."""
    rules = _stage("config", FitnessRules.from_dict, cfg.get("fitness", {}))
    sources = _stage("ingest", _load_sources, cfg)
    sections = []
    for src, ds in sources:
        if src.get("role", "external") != "external":
            continue
        name = src.get("name") or ",".join(s.name for s in ds.provenance)
        rep = _stage("fitness", fitness_report, ds, rules, name)
        sections.append(rep.to_dict())
    return {"schema_version": SCHEMA_VERSION, "kind": "audit", "fitness": sections,
            "provenance": _provenance(cfg, "audit")}


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _build_control(method: str, params: Mapping[str, Any], ds: Dataset, seed: int) -> tuple[ControlArm, Any]:
    """Comparator from the pooled data: treated = internal A=1, candidates split by the internal flag."""
    treated = ds.subset((ds.treatment == 1) & ds.internal)
    controls = ds.treatment == 0
    internal = ds.subset(controls & ds.internal)
    external = ds.subset(controls & ~ds.internal)
    obs = ds.delta == 1
    if method == "historical":
        crit = EligibilityCriteria.from_dict(params["criteria"])
        return select_historical(external, crit), None
    if method == "synthetic":
        return synthetic_control_arm(external, treated, params.get("covariates"), params.get("V")), None
    if method == "test-and-pool":
        return test_and_pool(ds.subset(controls & ds.internal & obs), ds.subset(controls & ~ds.internal & obs),
                             float(params.get("alpha", 0.10))), None
    if method == "power-prior":
        return power_prior_arm(ds.subset(controls & ds.internal & obs), ds.subset(controls & ~ds.internal & obs),
                               float(params["a0"]), tuple(params.get("prior", (1.0, 1.0)))), None
    if method == "matched":
        mc = MatchConfig(ratio=int(params.get("ratio", 1)), caliper=float(params.get("caliper", 0.2)),
                         score=params.get("score", "propensity"), seed=int(params.get("seed", seed)),
                         covariates=tuple(params["covariates"]) if params.get("covariates") else None)
        return hybrid_match(treated, internal, external, mc), None
    if method == "virtual":
        spec = OutcomeSpec(covariates=tuple(params["covariates"]) if params.get("covariates") else None)
        res = virtual_control(external, treated, spec, seed=int(params.get("seed", seed)))
        return res.arm, res
    raise InvalidConfig(f"unknown control method {method!r}; known: {', '.join(CONTROL_METHODS)}")


def _analysis_set(ds: Dataset, method: str, arm: ControlArm | None) -> tuple[Dataset, np.ndarray]:
    treated = (ds.treatment == 1) & ds.internal
    if method == "internal":
        keep = treated | ((ds.treatment == 0) & ds.internal)
        rows = np.flatnonzero(keep)
        return ds.subset(rows), np.ones(len(rows))
    weight = dict(arm.members)
    rows = [i for i in range(len(ds)) if treated[i] or (ds.treatment[i] == 0 and ds.ids[i] in weight)]
    w = np.array([1.0 if treated[i] else weight[ds.ids[i]] for i in rows])
    return ds.subset(rows), w


def _grid(spec) -> list[float]:
    if spec is None:
        return [round(k * 0.01, 10) for k in range(-50, 51)]
    if isinstance(spec, Mapping):
        start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        k = int(round((stop - start) / step))
        return [round(start + i * step, 12) for i in range(k + 1)]
    return [float(v) for v in spec]


def cmd_estimate(cfg: Mapping[str, Any], threads: int = 1) -> dict[str, Any]:
    """ingest -> fitness -> control construction -> diagnostics -> estimators -> sensitivity."""
    seed = _require_seed(cfg)
    estimand = _stage("estimand", lambda: validate_estimand(EstimandSpec.from_dict(cfg["estimand"])))
    sources = _stage("ingest", _load_sources, cfg)
    ds = _stage("ingest", pool, [d for _, d in sources])

    fitness = []
    if "fitness" in cfg:
        rules = _stage("fitness", FitnessRules.from_dict, cfg["fitness"])
        for src, d in sources:
            if src.get("role", "external") == "external":
                name = src.get("name") or ",".join(s.name for s in d.provenance)
                fitness.append(_stage("fitness", fitness_report, d, rules, name).to_dict())

    ctrl = cfg.get("control", {"method": "internal"})
    method = ctrl.get("method", "internal")
    if method not in CONTROL_METHODS:
        raise StageError("control", InvalidConfig(f"unknown control method {method!r}"))
    arm, virtual = (None, None) if method == "internal" else _stage("control", _build_control, method, ctrl, ds, seed)
    control_section = {"method": method}
    if arm is not None:
        control_section.update(arm.to_dict())
        control_section["method"] = method

    est_cfg = cfg.get("estimators", {})
    methods = list(est_cfg.get("methods", ["g-computation", "ipw", "tmle"]))
    covariates = est_cfg.get("covariates")
    level = float(est_cfg.get("level", 0.95))
    trunc = tuple(est_cfg.get("trunc", (0.01, 0.99)))
    estimates: list[dict[str, Any]] = []
    results = []
    diagnostics: dict[str, Any] = {}

    if virtual is not None:
        estimates.append({"method": "virtual", "psi_hat": virtual.effect, "variance": None, "se": None, "ci": None,
                          "n_used": len(virtual.arm), "n_dropped": len(virtual.arm.excluded),
                          "arm_means": {"treated": virtual.observed_mean, "control": virtual.predicted_mean}})
    else:
        analysis, weights = _stage("control", _analysis_set, ds, method, arm)
        ps = _stage("diagnostics", fit_propensity, analysis, covariates, trunc, weights)
        diagnostics = _stage("diagnostics", identifiability_diagnostics, analysis, ps).to_dict()
        for name in methods:
            if name not in ESTIMATORS:
                raise StageError("estimate", InvalidConfig(f"unknown estimator {name!r}"))
            est = _stage("estimate", run_estimator, name, analysis, weights=weights, covariates=covariates,
                         level=level, n_boot=int(est_cfg.get("n_boot", 1000)), seed=seed, trunc=trunc,
                         threads=threads)
            results.append(est)
            estimates.append(est.to_dict())

    sens_cfg = cfg.get("sensitivity", {})
    grid = _grid(sens_cfg.get("grid"))
    sensitivity = []
    for est in results:
        entry: dict[str, Any] = {"method": est.method}
        if est.ci is not None:
            entry["causal_gap"] = _stage("sensitivity", causal_gap_sweep, est, grid).to_dict()
        rr = est.risk_ratio
        if ds.endpoint == "binary" and rr is not None and rr > 0:
            entry["e_value"] = _stage("sensitivity", e_value, rr, est.rr_ci).to_dict()
        sensitivity.append(entry)

    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "estimate",
        "estimand": estimand.to_dict(),
        "fitness": fitness,
        "control_arm": control_section,
        "diagnostics": diagnostics,
        "estimates": estimates,
        "sensitivity": sensitivity,
        "provenance": _provenance(cfg, "estimate"),
    }


def _estimate_table(report: Mapping[str, Any]) -> str:
    lines = [f"{'method':<16}{'estimate':>11}{'se':>10}{'ci_low':>10}{'ci_high':>10}{'n':>7}"]
    for e in report["estimates"]:
        se = "-" if e.get("se") is None else f"{e['se']:.4f}"
        lo = "-" if not e.get("ci") else f"{e['ci']['lo']:.4f}"
        hi = "-" if not e.get("ci") else f"{e['ci']['hi']:.4f}"
        lines.append(f"{e['method']:<16}{e['psi_hat']:>11.4f}{se:>10}{lo:>10}{hi:>10}{e['n_used']:>7}")
    for s in report["sensitivity"]:
        gap = s.get("causal_gap")
        if gap is not None:
            lines.append(f"{s['method']}: tipping causal gap = {gap['tipping_eta']}")
        if "e_value" in s:
            ev = s["e_value"]
            ci = "-" if ev["evalue_ci"] is None else f"{ev['evalue_ci']:.3f}"
            lines.append(f"{s['method']}: E-value {ev['evalue_point']:.3f} (CI bound {ci})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# simulate / replicate
# ---------------------------------------------------------------------------


def _scenario(spec: Mapping[str, Any]) -> ScmConfig:
    lib = scenario_library()
    if "config" in spec:
        return ScmConfig.from_dict(spec["config"])
    name = spec.get("scenario")
    if name not in lib:
        raise InvalidConfig(f"unknown scenario {name!r}; known scenarios: {', '.join(sorted(lib))}")
    return lib[name]


def cmd_simulate(cfg: Mapping[str, Any], out: str | Path | None = None) -> dict[str, Any]:
    """Write the generated CSV, a column-mapping JSON and a truth sidecar."""
    seed = _require_seed(cfg)
    spec = cfg.get("simulate", {})
    scm = _stage("config", _scenario, spec).with_seed(seed)
    n = int(spec.get("n", 1000))
    ds, _ = _stage("simulate", generate, scm, n)
    truth = _stage("truth", true_ate, scm, int(spec.get("truth_draws", 1_000_000)))
    target = Path(out or _resolve(cfg, cfg.get("output", "simulated.csv")))
    target.parent.mkdir(parents=True, exist_ok=True)
    mapping = export_csv(ds, target)
    mapping_path = target.with_suffix(".mapping.json")
    truth_path = target.with_suffix(".truth.json")
    mapping_path.write_text(json.dumps(mapping.to_dict(), indent=2) + "\n")
    truth_path.write_text(json.dumps({"scenario": scm.name, "seed": seed, "n": n, **truth.to_dict()}, indent=2) + "\n")
    return {"kind": "simulate", "csv": str(target), "mapping": str(mapping_path), "truth": str(truth_path),
            "n": n, "psi_true": truth.psi_true, "mc_standard_error": truth.mc_standard_error}


def cmd_replicate(cfg: Mapping[str, Any], R: int | None = None, threads: int = 1) -> dict[str, Any]:
    seed = _require_seed(cfg)
    spec = cfg.get("replicate", {})
    scm = _stage("config", _scenario, spec)
    reps = int(R if R is not None else spec.get("R", 1000))
    table = _stage(
        "replicate", run_replicates, scm, int(spec.get("n", 500)), reps,
        tuple(spec.get("estimators", ESTIMATORS)),
        design=spec.get("design", "all"), seed=seed, threads=threads, truth=spec.get("truth"),
        truth_draws=int(spec.get("truth_draws", 1_000_000)), level=float(spec.get("level", 0.95)),
        n_boot=int(spec.get("n_boot", 0)), covariates=spec.get("covariates"),
    )
    return {"schema_version": SCHEMA_VERSION, "kind": "replicate", "table": table.to_dict(),
            "provenance": _provenance(cfg, "replicate"), "_text": table.format()}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("audit", "fit-for-use report for each external source"),
                            ("estimate", "full analysis: controls, diagnostics, estimates, sensitivity"),
                            ("simulate", "generate a dataset from a scenario plus its truth sidecar"),
                            ("replicate", "operating characteristics over seeded replicates")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path (report JSON, or CSV for simulate)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for replicates/bootstrap")
        if name == "replicate":
            p.add_argument("--replicates", "-R", type=int, help="number of replicates (>= 100)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = args.out or (_resolve(cfg, cfg["output"]) if cfg.get("output") and args.command != "simulate" else None)
        if args.command == "audit":
            report = cmd_audit(cfg)
            text = _dump(report, out)
            if out is None:
                print(text)
            else:
                print(f"wrote {out}")
        elif args.command == "estimate":
            report = cmd_estimate(cfg, threads=args.threads)
            _dump(report, out)
            print(_estimate_table(report))
            if out is not None:
                print(f"wrote {out}")
        elif args.command == "simulate":
            res = cmd_simulate(cfg, args.out)
            print(f"wrote {res['csv']} ({res['n']} rows); truth psi = {res['psi_true']:.6g} "
                  f"(MC SE {res['mc_standard_error']:.2g}) in {res['truth']}")
        else:
            report = cmd_replicate(cfg, args.replicates, threads=args.threads)
            text = report.pop("_text")
            _dump(report, out)
            print(text)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ExtControlError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
