"""Command line interface: run, resume, report and compare campaigns.

Campaign configuration is a sectioned key-value file::

    [campaign]
    id = demo
    seed = 42
    max_iterations = 10
    batch_size = 16
    coefficients = optimal        ; or unit
    qoi = q                       ; steering QoI (default: first model QoI)

    [mode]
    tolerance = 0.05              ; or budget = 1e6

    [hierarchy]
    levels = 4                    ; number of levels, L + 1
    base_work = 1.0
    rate = 4                      ; W_l = base_work * 2**(rate * l)
    ; work = 1, 16, 256, 4096     ; explicit per-level work instead
    work_source = nominal         ; nominal | model | wallclock

    [model]
    name = synthetic              ; synthetic | surrogate
    failure_rate = 0.0
    decay = 1.0                   ; any other key is a model parameter
    cloud.num_bubbles = 32        ; dotted keys nest (cloud parameters)

    [statistics]
    kurtosis_inflation = 0
    decay_fit = true
    products = estimates, speedup, pdf, bands, correlation, joint
    smooth_width = 0              ; Gaussian smoothing of series, grid units

Exit codes: 0 tolerance met or budget spent, 1 configuration or storage
error, 2 campaign aborted (a level without valid samples), 3 stopped early
(iteration cap) without meeting the tolerance or spending the budget.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .controller import CampaignConfig, build_report, run_campaign
from .exceptions import BudgetError, CampaignAbort, ConfigError, OFMLMCError, StoreError
from .levels import LevelHierarchy
from .models import build_model
from .statistics import (
    confidence_bands,
    correlation_matrix,
    export_bands,
    export_correlation,
    export_density,
    export_joint,
    gaussian_smooth,
    kde_2d,
    multilevel_kde,
)
from .store import CampaignStore, store_root

log = logging.getLogger(__name__)

PRODUCTS = ("estimates", "speedup", "pdf", "bands", "correlation", "joint")
SECTIONS = {
    "campaign": {"id", "seed", "max_iterations", "batch_size", "coefficients", "qoi"},
    "mode": {"tolerance", "budget"},
    "hierarchy": {"levels", "base_work", "rate", "work", "work_source"},
    "model": None,  # open: model parameters
    "statistics": {"kurtosis_inflation", "decay_fit", "products", "smooth_width"},
}
# minimum samples for a level to be used for correlations and joint densities
CORRELATION_MIN_SAMPLES = 10


# ---------------------------------------------------------------- configuration


def _scalar(text: str):
    if "," in text:
        return [_scalar(part) for part in text.split(",")]
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def _number(section, key, text, cast=float):
    try:
        value = cast(float(text)) if cast is int else cast(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"expected a number, got {text!r}") from None
    if cast is int and float(text) != value:
        raise ConfigError(f"{section}.{key}", f"expected an integer, got {text!r}")
    return value


def load_config(path) -> tuple[str, CampaignConfig, dict]:
    """Parse a campaign file into ``(campaign id, config, statistics options)``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError("file", f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        allowed = SECTIONS[section]
        if allowed is not None:
            for key in parser[section]:
                if key not in allowed:
                    raise ConfigError(f"{section}.{key}", "unknown key")
    get = lambda s, k, d=None: parser.get(s, k, fallback=d) if parser.has_section(s) else d

    cid = get("campaign", "id")
    if not cid:
        raise ConfigError("campaign.id", "missing")
    seed_text = get("campaign", "seed")
    if seed_text is None:
        raise ConfigError("campaign.seed", "missing; every campaign needs an explicit seed")
    try:
        seed = int(seed_text, 0)
    except ValueError:
        raise ConfigError("campaign.seed", f"expected an integer, got {seed_text!r}") from None

    tol, budget = get("mode", "tolerance"), get("mode", "budget")
    tol = None if tol is None else _number("mode", "tolerance", tol)
    budget = None if budget is None else _number("mode", "budget", budget)

    work = get("hierarchy", "work")
    if work is not None:
        try:
            values = tuple(float(v) for v in work.split(","))
        except ValueError:
            raise ConfigError("hierarchy.work", f"expected a comma separated list, got {work!r}") from None
        try:
            hierarchy = LevelHierarchy(work=values)
        except (ValueError, OFMLMCError) as exc:
            raise ConfigError("hierarchy.work", str(exc)) from None
    else:
        levels = _number("hierarchy", "levels", get("hierarchy", "levels", "4"), int)
        base = _number("hierarchy", "base_work", get("hierarchy", "base_work", "1.0"))
        rate = _number("hierarchy", "rate", get("hierarchy", "rate", "4"))
        try:
            hierarchy = LevelHierarchy.geometric(levels, base, rate)
        except (ValueError, OFMLMCError) as exc:
            raise ConfigError("hierarchy", str(exc)) from None

    model_name, failure_rate, params = "synthetic", 0.0, {}
    if parser.has_section("model"):
        for key, text in parser["model"].items():
            if key == "name":
                model_name = text.strip()
            elif key == "failure_rate":
                failure_rate = _number("model", key, text)
            elif "." in key:
                head, tail = key.split(".", 1)
                params.setdefault(head, {})[tail] = _scalar(text)
            else:
                params[key] = _scalar(text)

    decay_fit = _scalar(get("statistics", "decay_fit", "true"))
    if not isinstance(decay_fit, bool):
        raise ConfigError("statistics.decay_fit", "expected true or false")
    products = [p.strip() for p in get("statistics", "products", ",".join(PRODUCTS)).split(",") if p.strip()]
    for p in products:
        if p not in PRODUCTS:
            raise ConfigError("statistics.products", f"unknown product {p!r}; choose from {PRODUCTS}")
    stats = {
        "products": products,
        "smooth_width": _number("statistics", "smooth_width", get("statistics", "smooth_width", "0")),
    }

    config = CampaignConfig(
        hierarchy=hierarchy,
        campaign_seed=seed,
        tolerance=tol,
        budget=budget,
        model=model_name,
        model_params=params,
        failure_rate=failure_rate,
        max_iterations=_number("campaign", "max_iterations", get("campaign", "max_iterations", "10"), int),
        kurtosis_inflation=_number(
            "statistics", "kurtosis_inflation", get("statistics", "kurtosis_inflation", "0")
        ),
        decay_fit=decay_fit,
        coefficients=get("campaign", "coefficients", "optimal"),
        qoi=get("campaign", "qoi"),
        work_source=get("hierarchy", "work_source", "nominal"),
        batch_size=_number("campaign", "batch_size", get("campaign", "batch_size", "16"), int),
        name=cid,
    )
    return cid, config, stats


# ---------------------------------------------------------------- products


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def format_comparison(rows: dict) -> str:
    """Three-row OF-MLMC / MLMC / MC table."""
    head = f"{'method':<8} {'samples per level':<32} {'cost':>12} {'error':>10} {'speedup':>9} {'speedup*':>9}"
    lines = [head, "-" * len(head)]
    for name in ("OF-MLMC", "MLMC", "MC"):
        r = rows[name]
        lines.append(
            f"{name:<8} {str(r['samples']):<32} {r['cost']:>12.6g} {r['error']:>10.4g} "
            f"{r['speedup']:>9.3g} {r['speedup_as_published']:>9.3g}"
        )
    mc = rows["MC"]
    lines.append(
        f"* speedup against MC with the as-published count ceil(sigma/eps) = "
        f"{mc['samples_as_published']} samples (cost {mc['cost_as_published']:.6g}); "
        f"the speedup column uses ceil(sigma^2/eps^2) = {mc['samples'][0]}."
    )
    return "\n".join(lines)


def _series_samples(ledger, name, L):
    samples, grid = [], None
    for level in range(L):
        g, fine, coarse = ledger.valid_series(level, name)
        if fine.size == 0:
            return None, None
        grid = g if grid is None else grid
        samples.append(fine if level == 0 else (fine, coarse))
    return np.asarray(grid), samples


def _correlation_level(ledger, L):
    counts = [ledger.counts(l)[0] for l in range(L)]
    for level in range(L - 1, -1, -1):
        if counts[level] >= CORRELATION_MIN_SAMPLES:
            return level
    return int(np.argmax(counts))


def _fine_values(ledger, level, name):
    vals = ledger.valid_samples(level, name)
    return vals if level == 0 else vals[:, 0]


def write_products(store: CampaignStore, config: CampaignConfig, report, products, smooth_width=0.0) -> list:
    """Write the requested statistics products; returns the written paths."""
    ledger = store.load_ledger()
    out = store.report_dir
    out.mkdir(parents=True, exist_ok=True)
    L = config.hierarchy.num_levels
    qoi = report.qoi
    written = []
    index = {"qoi": qoi, "products": {}}

    if "estimates" in products:
        _write_json(out / "report.json", report.to_dict())
        written.append(out / "report.json")
    if "speedup" in products and report.comparison:
        _write_json(out / "comparison.json", report.comparison)
        (out / "comparison.txt").write_text(format_comparison(report.comparison) + "\n")
        written += [out / "comparison.json", out / "comparison.txt"]
    names = ledger.qoi_names()
    if "pdf" in products:
        for name, est in report.estimates.items():
            samples = [ledger.valid_samples(l, name) for l in range(L)]
            dens = multilevel_kde(samples, est["alpha"])
            export_density(dens, out / f"pdf_{name}")
            written.append(out / f"pdf_{name}.csv")
    if "bands" in products and qoi in report.estimates:
        alpha = report.estimates[qoi]["alpha"]
        for series in ledger.series_names():
            grid, samples = _series_samples(ledger, series, L)
            if samples is None:
                continue
            if smooth_width > 0:
                samples = [
                    gaussian_smooth(s, smooth_width)
                    if l == 0
                    else (gaussian_smooth(s[0], smooth_width), gaussian_smooth(s[1], smooth_width))
                    for l, s in enumerate(samples)
                ]
            bands = confidence_bands(samples, alpha)
            export_bands(bands, grid, out / f"bands_{series}")
            written.append(out / f"bands_{series}.csv")
    if ("correlation" in products or "joint" in products) and names:
        level = _correlation_level(ledger, L)
        values = {n: _fine_values(ledger, level, n) for n in names}
        index["products"]["correlation_level"] = level
        if "correlation" in products and len(values[names[0]]) >= 2:
            export_correlation(correlation_matrix(values), out / "correlation")
            written.append(out / "correlation.csv")
        if "joint" in products and qoi in values:
            for other in names:
                if other == qoi or np.ptp(values[other]) == 0 or np.ptp(values[qoi]) == 0:
                    continue
                export_joint(kde_2d(values[other], values[qoi], points=64), out / f"joint_{other}_{qoi}")
                written.append(out / f"joint_{other}_{qoi}.csv")
    index["products"]["files"] = sorted(p.name for p in written)
    _write_json(out / "index.json", index)
    return written


# ---------------------------------------------------------------- commands


def _print(text=""):
    print(text, flush=True)


def _finish(report, config: CampaignConfig) -> int:
    _print(f"status: {report.status}")
    _print(f"estimate[{report.qoi}] = {report.estimate:.8g}  error = {report.error:.4g}  cost = {report.cost:.6g}")
    _print(f"alpha = {[round(a, 6) for a in report.alpha]}  M = {report.counts}")
    if report.status in ("converged", "budget_spent") or (config.budget is not None and report.status == "stalled"):
        return 0
    _print("tolerance not met" if config.tolerance is not None else "stopped before the budget was spent")
    return 3


def _run(config, store, stats, workers, budget_override=None) -> int:
    try:
        report = run_campaign(config, workers=workers, store=store, progress=_print, budget_override=budget_override)
    except CampaignAbort as exc:
        _print(f"aborted: {exc}")
        return 2
    write_products(store, config, report, stats["products"], stats["smooth_width"])
    _write_json(store.path / "statistics.json", stats)
    return _finish(report, config)


def cmd_run(args) -> int:
    cid, config, stats = load_config(args.config)
    # reject bad model settings and infeasible budgets before touching the store
    build_model(config.model, config.model_params, config.failure_rate)
    if config.budget is not None:
        minimum = float(np.sum(config.hierarchy.pair_costs()))
        if config.budget < minimum:
            raise BudgetError(config.budget, minimum)
    store = CampaignStore(store_root(args.store), cid)
    if store.exists():
        raise StoreError(f"campaign {cid!r} already exists under {store.root}; use 'resume {cid}'")
    store.create()
    return _run(config, store, stats, args.workers)


def _open(args) -> tuple[CampaignStore, CampaignConfig, dict]:
    store = CampaignStore(store_root(args.store), args.campaign)
    if not store.exists():
        raise StoreError(f"no campaign {args.campaign!r} under {store.root}")
    config = CampaignConfig.from_dict(store.load_config())
    stats_path = store.path / "statistics.json"
    stats = json.loads(stats_path.read_text()) if stats_path.exists() else {"products": list(PRODUCTS), "smooth_width": 0.0}
    return store, config, stats


def cmd_resume(args) -> int:
    store, config, stats = _open(args)
    state = store.load_state()
    raised = args.budget is not None and config.budget is not None and args.budget > config.budget
    if args.budget is not None and config.budget is None:
        raise ConfigError("mode.budget", "budget override needs a budget-mode campaign")
    if state is not None and state.get("finished") and not raised:
        _print(f"campaign {args.campaign!r} is already complete ({state.get('status')}); nothing to do")
        return 0
    return _run(config, store, stats, args.workers, budget_override=args.budget)


def _report_for(store, config, qoi):
    ledger = store.load_ledger()
    state = store.load_state() or {"history": [], "status": "running"}
    names = ledger.qoi_names()
    if qoi is None:
        qoi = config.qoi or (names[0] if names else None)
    if qoi not in names:
        raise ConfigError("qoi", f"unknown QoI {qoi!r}; available: {', '.join(names)}")
    return build_report(config, ledger, state, qoi)


def cmd_report(args) -> int:
    store, config, stats = _open(args)
    products = stats["products"] if args.products is None else [p.strip() for p in args.products.split(",") if p.strip()]
    for p in products:
        if p not in PRODUCTS:
            raise ConfigError("products", f"unknown product {p!r}; choose from {', '.join(PRODUCTS)}")
    report = _report_for(store, config, args.qoi)
    written = write_products(store, config, report, products, stats.get("smooth_width", 0.0))
    _print(f"estimate[{report.qoi}] = {report.estimate:.8g}  error = {report.error:.4g}")
    for path in written:
        _print(f"wrote {path}")
    return 0


def cmd_compare(args) -> int:
    store, config, _ = _open(args)
    report = _report_for(store, config, args.qoi)
    if not report.comparison:
        _print("no comparison available: the campaign has no complete indicator set")
        return 1
    text = format_comparison(report.comparison)
    store.report_dir.mkdir(parents=True, exist_ok=True)
    (store.report_dir / "comparison.txt").write_text(text + "\n")
    _write_json(store.report_dir / "comparison.json", report.comparison)
    _print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofmlmc", description="Adaptive optimal-fidelity multilevel Monte Carlo campaigns")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--store", help="store root (default: $OFMLMC_STORE or ./ofmlmc-store)")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="concurrent sample workers")

    p = sub.add_parser("run", help="start a campaign from a config file")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted or budget-raised campaign")
    p.add_argument("campaign")
    p.add_argument("--budget", type=float, help="raise the budget of a budget-mode campaign")
    common(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="regenerate statistics products from the ledger")
    p.add_argument("campaign")
    p.add_argument("--qoi", help="QoI for estimates, bands and joint densities")
    p.add_argument("--products", help=f"comma separated subset of {','.join(PRODUCTS)}")
    common(p, workers=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="print the OF-MLMC / MLMC / MC comparison table")
    p.add_argument("campaign")
    p.add_argument("--qoi")
    common(p, workers=False)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (BudgetError, ConfigError, StoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
