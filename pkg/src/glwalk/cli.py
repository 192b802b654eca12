"""Command line runner: glwalk <command> --config FILE [--seed N] [--workers K] [--out DIR].

The config is a JSON object with an ``ensemble`` block, a ``seed`` and one
block per command (``lyapunov``, ``variance``, ``be_curve``, ``rate_fit``,
``depcoef``, ``blocks``, ``gap``, ``plot``).  Every failure is reported as a
single stderr line ``glwalk-error: <tag>: <message>`` with a distinct exit
code.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .blocking import (BlockLayout, block_moment_growth, conditional_variance_concentration, decompose_many,
                       r1_moment_scaling, structural_checks)
from .depcoef import PairStrategy, decay_check, estimate_delta
from .ensemble import EnsembleSpec
from .estimators import (BATCH_GRID, DegenerateVariance, KolmogorovReport, NoiseDominated, bougerol_gap,
                         ks_distance, long_run, lyapunov, rate_fit, rate_ratio, variance, worst_start_ks)
from .io import read_csv, write_csv, write_manifest
from .plot import plot
from .projective import StationarySampler
from .rng import RngStream
from .walk import BudgetExceeded, run_stationary_batch

COMMANDS = ("lyapunov", "variance", "be-curve", "rate-fit", "depcoef", "blocks", "gap", "plot")
EXIT = {"ok": 0, "error": 1, "config": 2, "budget": 3, "degenerate": 4, "noise": 5}


class ConfigError(ValueError):
    pass


class Failure(Exception):
    """Outputs were written but the run ends with a nonzero status."""

    def __init__(self, tag: str, message: str):
        super().__init__(message)
        self.tag = tag


# ----------------------------------------------------------------------
# config handling


def load_config(path, seed=None, workers=None, out=None) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        cfg["seed"] = seed
    if workers is not None:
        cfg["workers"] = workers
    if out is not None:
        cfg["output_dir"] = str(out)
    return cfg


def _seed(cfg: dict) -> int:
    if "seed" not in cfg or cfg["seed"] is None:
        raise ConfigError("seed is mandatory")
    s = cfg["seed"]
    if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    return s


def _block(cfg: dict, name: str) -> dict:
    b = cfg.get(name)
    if not isinstance(b, dict):
        raise ConfigError(f"missing {name!r} block")
    return b


def _req(block: dict, key: str, kind=int, minimum=None):
    if key not in block:
        raise ConfigError(f"missing required key {key!r}")
    return _num(block, key, kind, minimum)


def _num(block: dict, key: str, kind=int, minimum=None, default=None):
    v = block.get(key, default)
    if v is None:
        return None
    try:
        v = kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key!r} must be {kind.__name__}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{key!r} must be >= {minimum}")
    return v


def _grid(block: dict, key: str, minimum: int = 1) -> list[int]:
    g = block.get(key)
    if not isinstance(g, list) or not g:
        raise ConfigError(f"{key!r} must be a non-empty list")
    try:
        g = [int(x) for x in g]
    except (TypeError, ValueError):
        raise ConfigError(f"{key!r} must hold integers")
    if any(x < minimum for x in g) or any(b <= a for a, b in zip(g, g[1:])):
        raise ConfigError(f"{key!r} must be increasing integers >= {minimum}")
    return g


def _spec(cfg: dict) -> EnsembleSpec:
    try:
        return EnsembleSpec.from_dict(_block(cfg, "ensemble"))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad ensemble block: {e}")


def _budget(cfg: dict):
    # GLWALK_BUDGET, when set, takes precedence inside check_budget
    import os
    if os.environ.get("GLWALK_BUDGET"):
        return None
    return _num(cfg, "budget", int, 1)


def _sampler(spec: EnsembleSpec, cfg: dict) -> StationarySampler:
    return StationarySampler(spec, burn_in=_num(cfg, "burn_in", int, 1, 200))


class Sink:
    """Output directory that records every file written during a run."""

    def __init__(self, directory: Path):
        self.dir = Path(directory)
        self.files: list[Path] = []

    def add(self, path) -> Path:
        self.files.append(Path(path))
        return Path(path)

    def csv(self, name: str, schema: str, rows) -> Path:
        return self.add(write_csv(self.dir / name, schema, rows))


# ----------------------------------------------------------------------
# commands; each returns the list of files written


def cmd_lyapunov(cfg, out: "Sink") -> list[Path]:
    b = _block(cfg, "lyapunov")
    spec = _spec(cfg)
    est = lyapunov(spec, _req(b, "n", int, 1), _req(b, "paths", int, 1), _sampler(spec, cfg), _seed(cfg),
                   _num(b, "burn", int, 0), cfg["workers"], _budget(cfg))
    return [out.csv("lyapunov.csv", "lyapunov",
                      [(est.n, est.paths, est.value, est.se, est.burn, est.burn_discarded,
                        est.burn_discarded_se)])]


def cmd_variance(cfg, out: "Sink") -> list[Path]:
    b = dict(_block(cfg, "variance"))
    spec = _spec(cfg)
    method = b.pop("method", "batch_means")
    methods = ("batch_means", "covariance_series") if method == "both" else (method,)
    sampler = _sampler(spec, cfg)
    ests = [variance(spec, m, b, sampler, _seed(cfg), cfg["workers"], _budget(cfg)) for m in methods]
    path = out.csv("variance.csv", "variance",
                     [(e.method, e.value, e.se, e.truncation_lag, e.degenerate) for e in ests])
    bad = [e.method for e in ests if e.degenerate]
    if bad:
        raise Failure("degenerate", f"variance estimate indistinguishable from 0 ({', '.join(bad)})")
    return [path]


def _batch_sizes(n: int) -> tuple[int, ...]:
    """Largest run of powers of two with at least 8 blocks of the biggest size."""
    if n >= 8 * BATCH_GRID[-1]:
        return BATCH_GRID
    top = max(1, int(2 ** math.floor(math.log2(max(n // 8, 1)))))
    sizes = [top >> i for i in range(6) if top >> i >= 1]
    return tuple(sorted(sizes))


def _be_curve(cfg, out: "Sink"):
    """Returns (files, {observable: KolmogorovReport})."""
    b = _block(cfg, "be_curve")
    spec = _spec(cfg)
    seed = _seed(cfg)
    grid = _grid(b, "n_grid")
    paths = _req(b, "paths", int, 1)
    lam_b = b.get("lambda", {}) or {}
    lam_n = _num(lam_b, "n", int, 1, 10 * grid[-1])
    if lam_n < 10 * grid[-1]:
        raise ConfigError(f"lambda run length {lam_n} is below 10 x max(n_grid) = {10 * grid[-1]}")
    lam_paths = _num(lam_b, "paths", int, 2, 1000)
    sizes = tuple(lam_b["sizes"]) if "sizes" in lam_b else _batch_sizes(lam_n)
    lam_n = -(-lam_n // max(sizes)) * max(sizes)
    observables = b.get("observables", ["vec_norm"])
    for o in observables:
        if o not in ("vec_norm", "mat_norm", "spec_radius", "vec_norm_worst_start"):
            raise ConfigError(f"unknown observable {o!r}")
    workers, budget = cfg["workers"], _budget(cfg)
    sampler = _sampler(spec, cfg)

    lam, s2 = long_run(spec, lam_n, lam_paths, sampler, seed, sizes, workers, budget)
    vmethod = b.get("variance_method", "batch_means")
    if vmethod == "covariance_series":
        s2 = variance(spec, "covariance_series", {**b.get("variance", {}), "lambda_hat": lam.value}, sampler,
                      seed, workers, budget)
    elif vmethod != "batch_means":
        raise ConfigError(f"unknown variance method {vmethod!r}")
    s_hat = math.sqrt(s2.value)
    shift = 0.4 * lam.se * math.sqrt(grid[-1]) / s_hat if s_hat > 0 else float("inf")
    files = [out.csv("estimates.csv", "estimates",
                       [(lam.value, lam.se, lam.n, lam.paths, s2.value, s2.se, s2.method, s2.degenerate, shift)])]
    if s2.degenerate or s_hat <= 0:
        raise Failure("degenerate", f"s^2 = {s2.value:.3g} +/- {s2.se:.3g} is indistinguishable from 0")

    reports = {}
    plain = [o for o in observables if o != "vec_norm_worst_start"]
    if plain:
        sm = run_stationary_batch(spec, grid, paths, sampler, seed, workers, budget)
        if b.get("write_samples", True):
            rows = [(int(sm.path_ids[p]), int(n), sm.log_vec_norm[p, i], sm.log_mat_norm[p, i],
                     sm.log_spec_radius[p, i]) for p in range(sm.paths) for i, n in enumerate(grid)]
            files.append(out.csv("walk.csv", "walk", rows))
        for o in plain:
            reports[o] = ks_distance(sm, o, lam.value, s_hat, seed)
    if "vec_norm_worst_start" in observables:
        wpaths = _num(b, "worst_start_paths", int, 1, paths)
        rep, table = worst_start_ks(spec, grid, wpaths, sampler, seed, lam.value, s_hat, workers, budget)
        reports[rep.observable] = rep
        files.append(out.csv("worst_start.csv", "worst_start",
                               [(j, int(n), table[j, i]) for j in range(len(table)) for i, n in enumerate(grid)]))
    files.append(out.csv("be_curve.csv", "be_curve", [r for o in observables for r in reports[o].rows()]))
    return files, reports


def _fit_rows(cfg, fb: dict, reports: dict) -> list[tuple]:
    model = fb.get("model", "power_law")
    q = _num(fb, "q", float, None, cfg.get("q"))
    boot = _num(fb, "boot", int, 200, 400)
    fseed = _num(fb, "seed", int, 0, _seed(cfg))
    rows = []
    for o in fb.get("observables", list(reports)):
        if o not in reports:
            raise ConfigError(f"no be_curve rows for observable {o!r}")
        rep = reports[o]
        fit = rate_fit(rep, model, q, boot, fseed)
        ratio = rate_ratio(rep, q) if q is not None else float("nan")
        rows.append((o, fit.model, q if q is not None else float("nan"), fit.slope, fit.ci[0], fit.ci[1], fit.r2,
                     fit.slope_se, fit.intercept, fit.free_slope, fit.free_ci[0], fit.free_ci[1],
                     fit.free_slope_se, ratio))
    return rows


def cmd_be_curve(cfg, out: "Sink") -> list[Path]:
    files, reports = _be_curve(cfg, out)
    fb = cfg["be_curve"].get("rate_fit")
    if fb is not None:
        try:
            rows = _fit_rows(cfg, fb, reports)
        except NoiseDominated as e:
            raise Failure("noise", str(e)) from e
        files.append(out.csv("rate_fit.csv", "rate_fit", rows))
    return files


def reports_from_csv(path) -> dict:
    _, rows = read_csv(path, "be_curve")
    if not rows:
        raise ConfigError(f"{path} has no rows")
    reports = {}
    for o in dict.fromkeys(r["observable"] for r in rows):
        sel = [r for r in rows if r["observable"] == o]
        reports[o] = KolmogorovReport(o, [int(r["n"]) for r in sel], [float(r["D_n"]) for r in sel],
                                      int(sel[0]["paths"]), float(sel[0]["lambda_hat"]), float(sel[0]["s_hat"]),
                                      int(sel[0]["seed"]))
    return reports


def cmd_rate_fit(cfg, out: "Sink") -> list[Path]:
    fb = _block(cfg, "rate_fit")
    src = fb.get("input")
    if not src:
        raise ConfigError("rate_fit needs an 'input' be_curve CSV")
    src = Path(src)
    if not src.is_absolute() and not src.exists():
        src = out.dir / src
    try:
        rows = _fit_rows(cfg, fb, reports_from_csv(src))
    except NoiseDominated as e:
        raise Failure("noise", str(e)) from e
    return [out.csv("rate_fit.csv", "rate_fit", rows)]


def cmd_depcoef(cfg, out: "Sink") -> list[Path]:
    b = _block(cfg, "depcoef")
    spec = _spec(cfg)
    ps = b.get("pair_strategy", {}) or {}
    try:
        strategy = PairStrategy(ps.get("kind", "both"), int(ps.get("count", 32)),
                                tuple(tuple(map(tuple, pr)) for pr in ps.get("pinned", ())))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))
    p = _num(b, "p", float, 1.0, 1.0)
    curve = estimate_delta(spec, p, _grid(b, "k_grid"), strategy, _num(b, "replicates", int, 100, 10_000),
                           RngStream.from_seed(_seed(cfg), "depcoef"), _sampler(spec, cfg), _budget(cfg))
    files = [out.csv("depcoef.csv", "depcoef", curve.rows())]
    q = _num(b, "q", float, None, spec.declared_q)
    if q is not None:
        rep = decay_check(curve, q, _num(b, "factor", float, 1.0, 4.0), seed=_seed(cfg) % 2 ** 32)
        files.append(out.csv("decay.csv", "decay",
                               [(p, q, rep.slope, rep.slope_se, rep.ratio, rep.flagged, rep.nonincreasing,
                                 rep.worst_increase_z)]))
    return files


def cmd_gap(cfg, out: "Sink") -> list[Path]:
    b = _block(cfg, "gap")
    spec = _spec(cfg)
    if "n_grid" in b:
        grid = _grid(b, "n_grid")
    else:
        n_max = _req(b, "n_max", int, 10)
        want = _num(b, "points", int, 10, 20)
        if want > n_max:
            raise ConfigError("gap grid needs n_max >= points")
        # geometric spacing; small n collide after rounding, so widen until enough survive
        count = want
        while True:
            grid = np.unique(np.geomspace(1, n_max, count).astype(int)).tolist()
            if len(grid) >= want:
                break
            count += 1
    rep = bougerol_gap(spec, grid, _req(b, "paths", int, 1), _sampler(spec, cfg), _num(b, "J_nu", int, 16, 16),
                       _seed(cfg), cfg["workers"], _budget(cfg))
    return [out.csv("gap.csv", "gap", rep.rows()),
            out.csv("gap_summary.csv", "gap_summary",
                      [(rep.min_gap, rep.trend_ratio, rep.paths, rep.J_nu, rep.nonnegative)])]


def _scaling_rows(rep, paths, J_nu, J_c) -> list[tuple]:
    return [r + (rep.slope_se, rep.passed, paths, J_nu, J_c) for r in rep.rows()]


def cmd_blocks(cfg, out: "Sink") -> list[Path]:
    b = _block(cfg, "blocks")
    spec = _spec(cfg)
    seed, workers, budget = _seed(cfg), cfg["workers"], _budget(cfg)
    sampler = _sampler(spec, cfg)
    J_nu = _num(b, "J_nu", int, 1, 64)
    J_c = _num(b, "J_c", int, 16, 64)
    lam = _num(b, "lambda_hat", float, None, 0.0)
    reports = b.get("reports", ["decompose"])
    files = []
    for name in reports:
        rb = b.get(name, {}) or {}
        if name in ("decompose", "structure"):
            lay = b.get("layout") or {}
            n = _req(lay, "n", int, 8)
            layout = BlockLayout.from_m(n, _req(lay, "m", int, 2)) if "m" in lay else \
                BlockLayout.from_kappa(n, _num(lay, "kappa", float, 0.0, 4.0))
            meta = (layout.m, layout.N, J_nu)
        if name == "decompose":
            paths = _num(rb, "paths", int, 1, 16)
            bb = decompose_many(spec, layout, paths, sampler, J_nu, J_c, lam, seed, workers, budget)
            files.append(out.csv("blocks.csv", "blocks",
                                   [(p, layout.n, layout.m, layout.N, J_nu, J_c, bb.S_n[p], bb.S_nm[p], bb.S1[p],
                                     bb.S2[p], bb.residual[p]) for p in range(paths)]))
            files.append(out.csv("block_sums.csv", "block_sums",
                                   [(p, j + 1, bb.U[p, j], bb.R[p, j], layout.m, layout.N, J_nu, J_c)
                                    for p in range(paths) for j in range(layout.N)]))
        elif name == "structure":
            reps = _num(rb, "replicates", int, 100, 1000)
            outer = _num(rb, "outer", int, 10, 1000)
            inner = _num(rb, "inner", int, 2, 64)
            r = structural_checks(spec, layout, reps, outer, inner, J_nu, _num(rb, "t", float, None, 1.0),
                                  seed=seed, sampler=sampler, workers=workers, lambda_hat=lam, budget=budget)
            common = meta + (reps, outer, inner)
            files.append(out.csv("structure.csv", "structure", [
                ("a_corr_Y_z", r.z_max_a, 3.0, r.passed_a) + common,
                ("b_corr_Z_z", r.z_max_b, 3.0, r.passed_b) + common,
                ("c_phi_abs_max", r.phi_abs_max, 1.0, r.passed_c) + common,
                ("c_phi_at_zero", r.phi_at_zero, 1.0, r.passed_c) + common,
            ]))
        elif name == "r1":
            paths = _req(rb, "paths", int, 2)
            rep = r1_moment_scaling(spec, _num(rb, "p", int, 2, 3), _grid(rb, "m_grid", 2), paths, J_nu, J_c, seed,
                                    _num(rb, "q", float, None, None), sampler, workers, budget=budget)
            files.append(out.csv("scaling_r1.csv", "scaling", _scaling_rows(rep, paths, J_nu, J_c)))
        elif name == "block_moment":
            paths = _req(rb, "paths", int, 2)
            q = _num(rb, "q", float, 1.0, spec.declared_q or 4.0)
            rep = block_moment_growth(spec, q, _grid(rb, "m_grid", 2), paths, lambda_hat=lam, seed=seed,
                                      sampler=sampler, workers=workers, budget=budget)
            files.append(out.csv("scaling_block_moment.csv", "scaling", _scaling_rows(rep, paths, 0, 0)))
        elif name == "conditional_variance":
            outer = _num(rb, "outer", int, 64, 128)
            rep = conditional_variance_concentration(spec, _grid(rb, "m_grid", 2), outer,
                                                     _num(rb, "inner", int, 64, 64), J_nu, seed, sampler,
                                                     bool(rb.get("scale_inner", True)), workers, budget=budget)
            files.append(out.csv("scaling_conditional_variance.csv", "scaling",
                                   _scaling_rows(rep, outer, J_nu, 0)))
        else:
            raise ConfigError(f"unknown blocks report {name!r}")
    return files


def cmd_plot(cfg, out: "Sink") -> list[Path]:
    b = _block(cfg, "plot")
    src = b.get("input")
    kind = b.get("kind")
    if not src or not kind:
        raise ConfigError("plot needs 'input' and 'kind'")
    target = out.dir / b.get("output", f"{kind}.svg")
    return [out.add(plot(src, kind, target, _num(b, "q", float, None, cfg.get("q")), b.get("observable")))]


HANDLERS = {"lyapunov": cmd_lyapunov, "variance": cmd_variance, "be-curve": cmd_be_curve,
            "rate-fit": cmd_rate_fit, "depcoef": cmd_depcoef, "blocks": cmd_blocks, "gap": cmd_gap,
            "plot": cmd_plot}


# ----------------------------------------------------------------------


def run(command: str, cfg: dict) -> int:
    """Execute one command; raises on error, returns 0 on success."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = dict(cfg)
    cfg["workers"] = _num(cfg, "workers", int, 1, 1)
    if command != "plot":
        _seed(cfg)
    sink = Sink(Path(cfg.get("output_dir") or "."))
    started = time.time()
    try:
        HANDLERS[command](cfg, sink)
    finally:
        # partial runs still list what they wrote
        if sink.files:
            write_manifest(sink.dir, cfg, command, __version__, started, time.time(), sink.files)
    return 0


def _fail(tag: str, message: str) -> int:
    line = " ".join(str(message).split())
    print(f"glwalk-error: {tag}: {line}", file=sys.stderr)
    return EXIT[tag]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="glwalk", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.workers, args.out)
        return run(args.command, cfg)
    except Failure as e:
        return _fail(e.tag, str(e))
    except BudgetExceeded as e:
        return _fail("budget", str(e))
    except DegenerateVariance as e:
        return _fail("degenerate", str(e))
    except NoiseDominated as e:
        return _fail("noise", str(e))
    except (ConfigError, ValueError, KeyError) as e:
        return _fail("config", str(e))
    except Exception as e:  # noqa: BLE001
        return _fail("error", f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
