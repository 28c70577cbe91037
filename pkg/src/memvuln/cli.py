"""Command-line front end tying the analysis stages together.

Subcommands:

* ``trace`` — run the solver once and record its memory access trace.
* ``metrics`` — replay a trace through the cache hierarchy and report
  per-structure vulnerability metrics.
* ``inject campaign`` — run a bit-flip campaign against one structure.
* ``faultmodel check`` — compare the analytic consume-probability
  estimates against a Monte-Carlo sampler for a given timeline.
* ``pipeline`` — the full validation loop: simulate, compute metrics,
  run one campaign per structure, and join everything into a validation
  report with rank correlations and bound checks.

The pipeline exits 0 only when every stage completed and no structure's
measured un-ACE probability undercuts its metric bounds; that makes the
toolkit's central claim (the metrics upper-bound the measured failure
probability) directly scriptable.

Scratch artifacts (cached simulations, campaign logs) live under the
directory named by ``--scratch`` or the ``MEMVULN_SCRATCH`` environment
variable; campaign logs are append-only and safely resumable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _stats

from .cachesim import CacheConfig, CacheSimulator, SimResult
from .cg import default_structure_map, default_tol, generate_poisson27, solve, spmv
from .faultmodel import (
    AccessTimeline,
    FaultModelParams,
    monte_carlo_consume,
    p_consume_exact,
    p_consume_linear,
    p_consume_product,
)
from .inject import (
    PAD_STRUCTURE,
    build_context,
    measure_baseline,
    run_campaign,
)
from .trace import TraceReader, TraceWriter
from .vulnmetrics import analyze

log = logging.getLogger(__name__)

SCRATCH_ENV = "MEMVULN_SCRATCH"

#: Metrics joined against campaign outcomes in the validation report.
_METRIC_COLUMNS = ("mvf", "fea", "ld_st_normalized", "dvf")

GNUPLOT_SCRIPT = """\
# Render the validation figure emitted by `memvuln pipeline`.
# Usage: gnuplot -e "datafile='figure.dat'" figure.gp
# Bars: measured un-ACE probability with its 99% confidence interval.
# Lines: the vulnerability metrics, each in [0, 1] (dvf is rescaled by
# its maximum, since it is unbounded).
if (!exists("datafile")) datafile = 'figure.dat'
set terminal pngcairo size 900,540
set output 'figure.png'
set style fill solid 0.35 border -1
set boxwidth 0.55
set yrange [0:1.05]
set ylabel 'probability / metric value'
set xlabel 'structure (sorted by measured un-ACE probability)'
set key outside top center horizontal
plot datafile using 1:3:xtic(2) with boxes title 'p(un-ACE)', \\
     datafile using 1:3:4:5 with yerrorbars notitle lc rgb 'black' pt 0, \\
     datafile using 1:6 with linespoints title 'MVF', \\
     datafile using 1:7 with linespoints title 'FEA', \\
     datafile using 1:8 with linespoints title 'LD/(LD+ST)', \\
     datafile using 1:9 with linespoints title 'DVF (rescaled)'
"""


def default_scratch() -> str:
    env = os.environ.get(SCRATCH_ENV)
    if env:
        return env
    return os.path.join(tempfile.gettempdir(), "memvuln-scratch")


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Shared plumbing


def build_problem(side: int, tol_factor: float):
    A = generate_poisson27(side)
    b = np.zeros(A.n_rows)
    spmv(A, np.ones(A.n_rows), out=b)
    tol = default_tol(b, factor=tol_factor)
    return A, b, tol


def replay_trace(path: str, cfg: CacheConfig):
    """Feed a recorded trace through the hierarchy; returns (result, smap)."""
    with TraceReader(path) as rd:
        sim = CacheSimulator(cfg)
        sim.register_structures(rd.structures)
        begin, end = rd.roi.roi_start, rd.roi.roi_end
        pos = 0
        for block in rd.iter_blocks():
            n = len(block)
            cuts = sorted(
                {0, n, min(max(begin - pos, 0), n), min(max(end - pos, 0), n)}
            )
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                if pos + lo == begin:
                    sim.roi_begin()
                if pos + lo == end:
                    sim.roi_end()
                sim.emit(
                    block["kind"][lo:hi],
                    block["addr"][lo:hi],
                    block["sid"][lo:hi],
                )
            pos += n
        if begin == pos:
            sim.roi_begin()
        if end == pos:
            sim.roi_end()
        return sim.finish(), rd.structures


def _config_digest(cfg: CacheConfig) -> str:
    raw = json.dumps(
        {
            name: (lv.shared, lv.assoc, lv.size, lv.latency, lv.mshrs)
            for name, lv in (("l1", cfg.l1), ("l2", cfg.l2), ("l3", cfg.l3))
        }
        | {"line": cfg.line_size, "mem": cfg.memory_latency},
        sort_keys=True,
    )
    return hashlib.sha256(raw.encode()).hexdigest()[:12]


def simulate_problem(
    side: int,
    tol_factor: float,
    cfg: CacheConfig,
    scratch: str,
    progress=None,
):
    """Solve once under the cache model, caching the result in scratch.

    The cache key covers everything the simulation depends on, so a hit
    is byte-identical to a fresh run.
    """
    A, b, tol = build_problem(side, tol_factor)
    key = f"sim-side{side}-tf{tol_factor:.3e}-{_config_digest(cfg)}.npz"
    cache_path = os.path.join(_ensure_dir(scratch), key)
    if os.path.exists(cache_path):
        try:
            return A, b, tol, SimResult.load(cache_path)
        except Exception as exc:  # pragma: no cover - corrupt cache
            log.warning("ignoring unreadable cache %s: %s", cache_path, exc)
    if progress:
        progress(f"simulating side={side} (no cached run)")
    sim = CacheSimulator(cfg)
    rec = solve(A, b, tol=tol, observer=sim)
    if not (rec.converged and rec.verified):
        raise RuntimeError("reference solve did not converge and verify")
    result = sim.finish()
    # Write-then-rename so an interrupted run never leaves a bad cache;
    # the temp name keeps the .npz suffix the writer insists on.
    tmp = cache_path[: -len(".npz")] + ".tmp.npz"
    result.save(tmp)
    os.replace(tmp, cache_path)
    return A, b, tol, result


# ---------------------------------------------------------------------------
# Validation report


@dataclass
class StructureValidation:
    """One structure's metric row joined with its campaign estimate."""

    name: str
    mvf: float
    fea: float
    safe_ratio: float
    ld_st_normalized: float
    dvf: float
    n_runs: int = 0
    p_unace: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    tally: dict = field(default_factory=dict)

    def metric(self, key: str) -> float:
        return getattr(self, key)


@dataclass
class ValidationReport:
    side: int
    tol_factor: float
    seed: int
    runs_per_structure: int
    T: int
    baseline_iterations: int | None
    rows: list  # sorted by increasing p_unace when campaigns ran
    correlations: dict
    bound_violations: list

    @property
    def ok(self) -> bool:
        return not self.bound_violations

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "side": self.side,
            "tol_factor": self.tol_factor,
            "seed": self.seed,
            "runs_per_structure": self.runs_per_structure,
            "window_cycles": self.T,
            "baseline_iterations": self.baseline_iterations,
            "structures": [
                {
                    "name": r.name,
                    "n_runs": r.n_runs,
                    "p_unace": r.p_unace,
                    "ci99": (
                        None
                        if r.p_unace is None
                        else [r.ci_low, r.ci_high]
                    ),
                    "mvf": r.mvf,
                    "fea": r.fea,
                    "safe_ratio": r.safe_ratio,
                    "ld_st_normalized": r.ld_st_normalized,
                    "dvf": r.dvf,
                    "tally": dict(r.tally),
                }
                for r in self.rows
            ],
            "correlations": self.correlations,
            "bound_violations": list(self.bound_violations),
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def write_csv(self, path: str) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["# schema", "1"])
            w.writerow(["# side", str(self.side)])
            w.writerow(["# seed", str(self.seed)])
            w.writerow(["# window_cycles", str(self.T)])
            w.writerow(
                [
                    "structure",
                    "n_runs",
                    "p_unace",
                    "ci_low",
                    "ci_high",
                    "mvf",
                    "fea",
                    "safe_ratio",
                    "ld_st_normalized",
                    "dvf",
                ]
            )
            for r in self.rows:
                has = r.p_unace is not None
                w.writerow(
                    [
                        r.name,
                        r.n_runs,
                        f"{r.p_unace:.6f}" if has else "",
                        f"{r.ci_low:.6f}" if has else "",
                        f"{r.ci_high:.6f}" if has else "",
                        f"{r.mvf:.6f}",
                        f"{r.fea:.6f}",
                        f"{r.safe_ratio:.6f}",
                        f"{r.ld_st_normalized:.6f}",
                        f"{r.dvf:.6e}",
                    ]
                )

    def write_plot_data(self, path: str) -> None:
        """Bar+line figure data: measured probability vs. the metrics."""
        dvf_max = max((r.dvf for r in self.rows), default=0.0) or 1.0
        with open(path, "w") as fh:
            fh.write("# memvuln figure data v1\n")
            fh.write(
                "# index structure p_unace ci_low ci_high "
                "mvf fea ld_norm dvf_rescaled\n"
            )
            for i, r in enumerate(self.rows):
                p = 0.0 if r.p_unace is None else r.p_unace
                lo = 0.0 if r.ci_low is None else r.ci_low
                hi = 0.0 if r.ci_high is None else r.ci_high
                fh.write(
                    f"{i} {r.name} {p:.6f} {lo:.6f} {hi:.6f} "
                    f"{r.mvf:.6f} {r.fea:.6f} {r.ld_st_normalized:.6f} "
                    f"{r.dvf / dvf_max:.6f}\n"
                )


def build_validation_report(
    analysis,
    campaigns: dict,
    *,
    side: int,
    tol_factor: float,
    seed: int,
    runs: int,
    baseline_iterations: int | None,
) -> ValidationReport:
    """Join metric rows with campaign estimates and rank the metrics."""
    rows = []
    for rep in analysis.structures:
        row = StructureValidation(
            name=rep.name,
            mvf=rep.mvf,
            fea=rep.fea,
            safe_ratio=rep.safe_ratio,
            ld_st_normalized=rep.ld_ratio,
            dvf=rep.dvf,
        )
        res = campaigns.get(rep.name)
        if res is not None:
            row.n_runs = res.n_runs
            row.p_unace = res.p_unace
            row.ci_low, row.ci_high = res.ci99
            row.tally = dict(res.tally)
        rows.append(row)

    have_campaigns = any(r.p_unace is not None for r in rows)
    if have_campaigns:
        rows.sort(key=lambda r: (r.p_unace, r.name))

    correlations: dict = {}
    if have_campaigns and len(rows) > 2:
        p = np.array([r.p_unace for r in rows])
        correlations = {"spearman": {}, "pearson": {}}
        for key in _METRIC_COLUMNS:
            vals = np.array([r.metric(key) for r in rows])
            correlations["spearman"][key] = float(
                _stats.spearmanr(vals, p).statistic
            )
            correlations["pearson"][key] = float(
                _stats.pearsonr(vals, p).statistic
            )

    violations = []
    for r in rows:
        if r.p_unace is None:
            continue
        for key in ("mvf", "fea"):
            if r.metric(key) < r.ci_low:
                violations.append(
                    f"{r.name}: {key}={r.metric(key):.6f} below "
                    f"p_unace 99% CI lower bound {r.ci_low:.6f}"
                )

    return ValidationReport(
        side=side,
        tol_factor=tol_factor,
        seed=seed,
        runs_per_structure=runs,
        T=analysis.T,
        baseline_iterations=baseline_iterations,
        rows=rows,
        correlations=correlations,
        bound_violations=violations,
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_trace(args) -> int:
    A, b, tol = build_problem(args.side, args.tol_factor)
    writer = TraceWriter(args.out)
    rec = solve(A, b, tol=tol, observer=writer)
    writer.close()
    print(
        f"wrote {args.out}: side={args.side} iterations={rec.iterations} "
        f"converged={rec.converged}"
    )
    return 0


def cmd_metrics(args) -> int:
    cfg = CacheConfig.load(args.config) if args.config else CacheConfig()
    result, smap = replay_trace(args.trace, cfg)
    report = analyze(result, smap, fit_rate=args.fit_rate)
    report.write_csv(args.csv)
    if args.json:
        report.write_json(args.json)
    return 0


def cmd_inject(args) -> int:
    cfg = (
        CacheConfig.load(args.config)
        if args.config
        else CacheConfig.desk_scaled(args.side)
    )
    scratch = _ensure_dir(args.scratch)
    A, b, tol, result = simulate_problem(
        args.side, args.tol_factor, cfg, scratch,
        progress=lambda msg: print(msg, file=sys.stderr),
    )
    ctx = build_context(A, b, tol, result)
    measure_baseline(ctx)
    log_path = args.log or os.path.join(
        scratch,
        f"campaign-side{args.side}-tf{args.tol_factor:.3e}-"
        f"{args.structure}-seed{args.seed}.csv",
    )
    res = run_campaign(
        ctx,
        args.structure,
        args.runs,
        args.seed,
        log_path=log_path,
        parallel=args.parallel,
    )
    doc = res.to_dict()
    doc["log"] = log_path
    text = json.dumps(doc, indent=1)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_faultmodel(args) -> int:
    params = FaultModelParams(rate=args.rate, T=args.window)
    params.validate()
    timeline = AccessTimeline.load(args.timeline)
    exact = p_consume_exact(params, timeline)
    linear = p_consume_linear(params, timeline)
    product = p_consume_product(params, timeline)
    est = monte_carlo_consume(
        params, timeline, trials=args.trials, seed=args.seed
    )
    doc = {
        "rate": params.rate,
        "window": params.T,
        "expected_faults": params.expected_faults,
        "rare_regime": params.is_rare,
        "accesses": len(timeline),
        "vulnerable_time": timeline.vulnerable_time(),
        "exact_sum": exact,
        "linear": linear,
        "poisson_product": product,
        "monte_carlo": {
            "frequency": est.frequency,
            "ci99": [est.ci_low, est.ci_high],
            "trials": est.trials,
            "consumed": est.consumed,
        },
    }
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    print(f"{'estimate':<18} {'value':>14}")
    print(f"{'exact-sum':<18} {exact:>14.8f}")
    print(f"{'linear':<18} {linear:>14.8f}")
    print(f"{'poisson-product':<18} {product:>14.8f}")
    print(
        f"{'monte-carlo':<18} {est.frequency:>14.8f}  "
        f"[{est.ci_low:.8f}, {est.ci_high:.8f}] @ {est.trials} trials"
    )
    if not params.is_rare:
        print(
            "note: expected faults per window exceed the rare-fault "
            "threshold; the linear estimate is not trustworthy"
        )
    return 0


def cmd_pipeline(args) -> int:
    out_dir = _ensure_dir(args.out)
    scratch = _ensure_dir(args.scratch)
    t0 = _time.perf_counter()

    def note(msg: str) -> None:
        print(f"[{_time.perf_counter() - t0:8.1f}s] {msg}", file=sys.stderr)

    try:
        cfg = (
            CacheConfig.load(args.config)
            if args.config
            else CacheConfig.desk_scaled(args.side)
        )
    except Exception as exc:
        raise StageError("configuration", exc) from exc

    try:
        A, b, tol, result = simulate_problem(
            args.side, args.tol_factor, cfg, scratch, progress=note
        )
    except Exception as exc:
        raise StageError("simulation", exc) from exc

    try:
        analysis = analyze(result, default_structure_map(A))
    except Exception as exc:
        raise StageError("metrics", exc) from exc
    note(f"metrics ready: T={analysis.T} cycles")

    campaigns: dict = {}
    baseline_iterations = None
    if args.runs > 0:
        try:
            ctx = build_context(A, b, tol, result)
            measure_baseline(ctx)
            baseline_iterations = ctx.baseline.iterations
            names = [r.name for r in analysis.structures]
            for i, name in enumerate(names):
                log_path = os.path.join(
                    scratch,
                    f"campaign-side{args.side}-tf{args.tol_factor:.3e}-"
                    f"{name}-seed{args.seed + i}.csv",
                )
                campaigns[name] = run_campaign(
                    ctx,
                    name,
                    args.runs,
                    args.seed + i,
                    log_path=log_path,
                    parallel=args.parallel,
                )
                note(
                    f"campaign {name}: p_unace="
                    f"{campaigns[name].p_unace:.4f} over {args.runs} runs"
                )
        except Exception as exc:
            raise StageError("campaign", exc) from exc

    try:
        report = build_validation_report(
            analysis,
            campaigns,
            side=args.side,
            tol_factor=args.tol_factor,
            seed=args.seed,
            runs=args.runs,
            baseline_iterations=baseline_iterations,
        )
        report.write_json(os.path.join(out_dir, "report.json"))
        report.write_csv(os.path.join(out_dir, "report.csv"))
        report.write_plot_data(os.path.join(out_dir, "figure.dat"))
        with open(os.path.join(out_dir, "figure.gp"), "w") as fh:
            fh.write(GNUPLOT_SCRIPT)
    except Exception as exc:
        raise StageError("report", exc) from exc

    for r in report.rows:
        p = "-" if r.p_unace is None else f"{r.p_unace:.4f}"
        print(
            f"{r.name:<4} p_unace={p:<8} mvf={r.mvf:.4f} fea={r.fea:.4f} "
            f"ld={r.ld_st_normalized:.4f} dvf={r.dvf:.3e}"
        )
    if report.correlations:
        sp = report.correlations["spearman"]
        print(
            "spearman vs p_unace: "
            + "  ".join(f"{k}={sp[k]:+.3f}" for k in _METRIC_COLUMNS)
        )
    if report.bound_violations:
        print("bound violations:")
        for v in report.bound_violations:
            print(f"  {v}")
        return 1
    print(f"report written to {out_dir}; no bound violations")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="memvuln",
        description=(
            "Trace-driven memory vulnerability analysis for an iterative "
            "sparse solver."
        ),
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_problem_flags(sp, with_config=True):
        sp.add_argument("--side", type=int, default=32,
                        help="grid side length of the generated problem")
        sp.add_argument("--tol-factor", type=float, default=1e-8,
                        help="convergence tolerance factor")
        if with_config:
            sp.add_argument("--config", default=None,
                            help="cache configuration file")

    tp = sub.add_parser("trace", help="record a solver access trace")
    add_problem_flags(tp, with_config=False)
    tp.add_argument("--out", required=True, help="trace file to write")
    tp.set_defaults(func=cmd_trace)

    mp = sub.add_parser(
        "metrics", help="vulnerability metrics for a recorded trace"
    )
    mp.add_argument("--trace", required=True, help="trace file to replay")
    mp.add_argument("--config", default=None, help="cache configuration file")
    mp.add_argument("--fit-rate", type=float, default=1e-9,
                    help="per-bit fault rate used by the dvf column")
    mp.add_argument("--csv", default="/dev/stdout",
                    help="CSV output path (default: standard output)")
    mp.add_argument("--json", default=None, help="also write a JSON report")
    mp.set_defaults(func=cmd_metrics)

    ip = sub.add_parser("inject", help="bit-flip injection campaigns")
    isub = ip.add_subparsers(dest="action", required=True)
    ic = isub.add_parser("campaign", help="run or resume one campaign")
    add_problem_flags(ic)
    ic.add_argument("--structure", required=True,
                    help=f"structure name (or '{PAD_STRUCTURE}')")
    ic.add_argument("--runs", type=int, default=1000)
    ic.add_argument("--seed", type=int, default=0)
    ic.add_argument("--parallel", type=int, default=1)
    ic.add_argument("--log", default=None,
                    help="campaign log (default: derived, in scratch)")
    ic.add_argument("--json", default=None, help="write the result here too")
    ic.add_argument("--scratch", default=default_scratch(),
                    help=f"scratch directory (or ${SCRATCH_ENV})")
    ic.set_defaults(func=cmd_inject)

    fp = sub.add_parser("faultmodel", help="analytic fault-model checks")
    fsub = fp.add_subparsers(dest="action", required=True)
    fc = fsub.add_parser("check", help="compare the consume estimators")
    fc.add_argument("--lambda", dest="rate", type=float, required=True,
                    help="fault rate per cycle")
    fc.add_argument("--window", type=float, required=True,
                    help="observation window length in cycles")
    fc.add_argument("--timeline", required=True,
                    help="JSON access timeline file")
    fc.add_argument("--trials", type=int, default=100_000)
    fc.add_argument("--seed", type=int, default=0)
    fc.add_argument("--json", default=None, help="machine-readable output")
    fc.set_defaults(func=cmd_faultmodel)

    pp = sub.add_parser(
        "pipeline", help="simulate, measure, campaign, and validate"
    )
    add_problem_flags(pp)
    pp.add_argument("--runs-per-structure", dest="runs", type=int, default=1000,
                    help="injections per structure (0: metrics only)")
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--parallel", type=int, default=1)
    pp.add_argument("--out", default="memvuln-report",
                    help="output directory for the report files")
    pp.add_argument("--scratch", default=default_scratch(),
                    help=f"scratch directory (or ${SCRATCH_ENV})")
    pp.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
