"""Command-line front end: JSON config in, CSV tables and JSON reports out.

Exit codes: 0 success, 1 a verification check failed, 2 configuration or
parse error, 3 runtime evaluation error.  Outputs are byte-stable for a
fixed (config, seed); wall-clock metadata goes to a separate run_meta.json.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import coeffexpr, localtime, pde, verify
from .coeffexpr import CoeffExprError, ConfigError, build_coefficient_set, parse as parse_expr
from .feynman_kac import FKProblem, fk_estimate, fk_vs_pde
from .network import NetworkError, SamplingPlan, validate_coefficients
from .pde import PdeError, PdeGrid, PdeProblem, residual as pde_residual, solve as pde_solve
from .simulator import SimConfig, SimulationError, SpiderState, simulate_batch

SUBCOMMANDS = (
    "simulate", "localtime", "scatter", "exitstats", "atom", "martingale",
    "ito", "markov", "pde", "fk", "fk-compare", "validate",
)


class CliConfigError(ValueError):
    pass


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _require_keys(d: dict, allowed: set[str], where: str):
    unknown = set(d) - allowed
    if unknown:
        raise CliConfigError(f"unknown keys {sorted(unknown)} in {where}")


def _num(d: dict, key: str, where: str, default=None, lo=None, hi=None, integer=False):
    if key not in d:
        if default is None:
            raise CliConfigError(f"missing {where}.{key}")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise CliConfigError(f"{where}.{key} must be a number")
    if integer and int(v) != v:
        raise CliConfigError(f"{where}.{key} must be an integer")
    if lo is not None and v < lo:
        raise CliConfigError(f"{where}.{key} must be >= {lo}")
    if hi is not None and v > hi:
        raise CliConfigError(f"{where}.{key} must be <= {hi}")
    return int(v) if integer else float(v)


def config_hash(cfg: dict) -> str:
    payload = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def _load_config(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise CliConfigError(f"{path}: top level must be an object")
    return cfg


def _sim_config(cfg: dict, seed_override: int | None) -> SimConfig:
    sim = cfg.get("sim")
    if sim is None:
        raise CliConfigError("missing 'sim' block")
    _require_keys(sim, {"h", "T", "delta_shell", "policy", "n_paths", "seed",
                        "store_paths"}, "sim")
    policy = sim.get("policy", "reflection")
    if policy not in ("reflection", "shell"):
        raise CliConfigError("sim.policy must be 'reflection' or 'shell'")
    seed = _num(sim, "seed", "sim", default=0, lo=0, integer=True)
    if seed_override is not None:
        seed = seed_override
    return SimConfig(
        h=_num(sim, "h", "sim", lo=1e-12),
        T=_num(sim, "T", "sim", lo=1e-12),
        delta_shell=_num(sim, "delta_shell", "sim", default=1e-3, lo=1e-12),
        policy=policy,
        n_paths=_num(sim, "n_paths", "sim", default=1, lo=0, integer=True),
        seed=seed,
        store_paths=bool(sim.get("store_paths", False)),
    )


def _init_state(cfg: dict) -> SpiderState:
    init = cfg.get("init") or {}
    _require_keys(init, {"t", "x", "edge", "l"}, "init")
    return SpiderState(
        t=_num(init, "t", "init", default=0.0, lo=0.0),
        x=_num(init, "x", "init", default=0.0, lo=0.0),
        i=_num(init, "edge", "init", default=1, lo=1, integer=True),
        l=_num(init, "l", "init", default=0.0, lo=0.0),
    )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list], chash: str):
    lines = [",".join(header + ["config_hash"])]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row) + f",{chash}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_report(path: Path, name: str, params: dict, report: dict, chash: str, seed: int):
    doc = {
        "name": name,
        "params": params,
        "estimates": report.get("estimates", {}),
        "stderr": report.get("stderr", {}),
        "pass": report.get("pass"),
        "seed": seed,
        "config_hash": chash,
    }
    extra = {k: v for k, v in report.items() if k not in ("estimates", "stderr", "pass")}
    if extra:
        doc["details"] = extra
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _expr_fn(src: str, where: str, variables: tuple[str, ...]):
    try:
        ast = parse_expr(src)
    except CoeffExprError as exc:
        raise CliConfigError(f"in {where}: {exc}") from exc
    extra = coeffexpr.variables(ast) - set(variables)
    if extra:
        raise CliConfigError(f"{where} may use only {variables}, found {sorted(extra)}")
    return ast


def _edge_exprs(block, key: str, I: int, variables: tuple[str, ...]):
    raw = block.get(key)
    if raw is None:
        return None
    if isinstance(raw, str):
        raw = [raw] * I
    if len(raw) != I:
        raise CliConfigError(f"{key} needs {I} expressions")
    return [_expr_fn(s, f"{key}[{i}]", variables) for i, s in enumerate(raw)]


def _fk_problem(cfg: dict, I: int) -> FKProblem:
    block = cfg.get("fk")
    if block is None:
        raise CliConfigError("missing 'fk' block")
    _require_keys(block, {"g", "h", "h0", "h_bound", "queries", "n_paths"}, "fk")
    g_asts = _edge_exprs(block, "g", I, ("x", "l"))
    if g_asts is None:
        raise CliConfigError("fk.g is required")
    h_asts = _edge_exprs(block, "h", I, ("t", "x", "l"))
    h0_ast = _expr_fn(block["h0"], "fk.h0", ("t", "l")) if "h0" in block else None

    def g_fn(ast):
        return lambda x, l, _a=ast: coeffexpr.evaluate(_a, 0.0, x, l)

    def h_fn(ast):
        return lambda t, x, l, _a=ast: coeffexpr.evaluate(_a, t, x, l)

    return FKProblem(
        g_edge=tuple(g_fn(a) for a in g_asts),
        h_edge=None if h_asts is None else tuple(h_fn(a) for a in h_asts),
        h0=None if h0_ast is None else (lambda t, l, _a=h0_ast: coeffexpr.evaluate(_a, t, 0.0, l)),
        h_bound=_num(block, "h_bound", "fk", default=10.0, lo=0.0),
    )


def _queries(block, where: str) -> list[tuple]:
    qs = block.get("queries")
    if not qs:
        raise CliConfigError(f"missing {where}.queries")
    out = []
    for q in qs:
        if len(q) != 4:
            raise CliConfigError(f"{where}.queries entries are [t, x, edge, l]")
        out.append((float(q[0]), float(q[1]), int(q[2]), float(q[3])))
    return out


def _pde_problem(cfg: dict, c, chash: str) -> tuple[PdeProblem, PdeGrid]:
    block = cfg.get("pde")
    if block is None:
        raise CliConfigError("missing 'pde' block")
    _require_keys(block, {"direction", "R", "K", "grid", "g", "h", "h0", "c",
                          "psi"}, "pde")
    I = c.I
    grid_cfg = block.get("grid") or {}
    _require_keys(grid_cfg, {"M", "J", "P"}, "pde.grid")
    grid = PdeGrid(
        M=_num(grid_cfg, "M", "pde.grid", lo=2, integer=True),
        J=_num(grid_cfg, "J", "pde.grid", lo=2, integer=True),
        P=_num(grid_cfg, "P", "pde.grid", lo=2, integer=True),
    )
    g_asts = _edge_exprs(block, "g", I, ("x", "l"))
    if g_asts is None:
        raise CliConfigError("pde.g is required")
    h_asts = _edge_exprs(block, "h", I, ("t", "x", "l"))
    c_asts = _edge_exprs(block, "c", I, ("t", "x", "l"))
    psi_asts = _edge_exprs(block, "psi", I, ("t", "x"))
    h0_ast = _expr_fn(block["h0"], "pde.h0", ("t", "l")) if "h0" in block else None
    T = _num({"T": cfg["sim"]["T"]}, "T", "sim", lo=1e-12) if "sim" in cfg else None
    if T is None:
        raise CliConfigError("pde runs take the horizon from sim.T")

    def tri(ast):
        return lambda t, x, l, _a=ast: coeffexpr.evaluate(_a, t, x, l)

    problem = PdeProblem(
        coefficients=c,
        T=T,
        R=_num(block, "R", "pde", lo=1e-12),
        K=_num(block, "K", "pde", lo=1e-12),
        g_edge=tuple((lambda x, l, _a=a: coeffexpr.evaluate(_a, 0.0, x, l)) for a in g_asts),
        h_edge=None if h_asts is None else tuple(tri(a) for a in h_asts),
        h0=None if h0_ast is None else (lambda t, l, _a=h0_ast: coeffexpr.evaluate(_a, t, 0.0, l)),
        c_edge=None if c_asts is None else tuple(tri(a) for a in c_asts),
        psi_edge=None if psi_asts is None else tuple(
            (lambda t, x, _a=a: coeffexpr.evaluate(_a, t, x, 0.0)) for a in psi_asts),
        direction=block.get("direction", "backward"),
    )
    return problem, grid


# ---------------------------------------------------------------------------
# subcommand bodies: each returns (exit_code, csv_payload, report_payload)
# ---------------------------------------------------------------------------


def _run_validate(cfg, c, sim, out, chash, workers):
    plan = SamplingPlan.default(T=sim.T if sim else 1.0)
    report = validate_coefficients(c, plan)
    rows = [[cl.name, cl.passed, cl.worst, cl.limit] for cl in report.clauses]
    _write_csv(out / "validate.csv", ["clause", "pass", "worst", "limit"], rows, chash)
    _write_report(out / "validate.json", "validate", {"clauses": len(rows)},
                  {"estimates": {cl.name: cl.worst for cl in report.clauses},
                   "pass": report.passed}, chash, sim.seed if sim else 0)
    return 0 if report.passed else 1


def _run_simulate(cfg, c, sim, out, chash, workers):
    init = _init_state(cfg)
    res = simulate_batch(c, init, sim, workers=workers)
    rows = [[i, res.t[i], res.x[i], int(res.edge[i]), res.l[i]] for i in range(res.n)]
    _write_csv(out / "simulate.csv", ["path", "t", "x", "edge", "l"], rows, chash)
    summary = {
        "estimates": {"mean_x": float(res.x.mean()) if res.n else 0.0,
                      "mean_l": float(res.l.mean()) if res.n else 0.0},
        "stderr": {"mean_x": float(res.x.std(ddof=1) / np.sqrt(res.n)) if res.n > 1 else 0.0},
        "pass": None,
    }
    _write_report(out / "simulate.json", "simulate", {"n_paths": res.n}, summary, chash, sim.seed)
    return 0


def _run_scatter(cfg, c, sim, out, chash, workers):
    block = cfg.get("scatter") or {}
    _require_keys(block, {"t", "ell", "delta", "n"}, "scatter")
    rep = verify.scattering_distribution(
        c, _num(block, "t", "scatter", default=0.0, lo=0.0),
        _num(block, "ell", "scatter", default=0.0, lo=0.0),
        _num(block, "delta", "scatter", lo=1e-12),
        _num(block, "n", "scatter", lo=1, integer=True),
        sim, workers=workers)
    freq = rep.estimates["freq"]
    target = rep.estimates["target"]
    stderr = rep.stderr["freq"]
    ok = rep.details["per_edge_pass"]
    rows = [[e + 1, freq[e], stderr[e], target[e], ok[e]] for e in range(c.I)]
    _write_csv(out / "scatter.csv", ["edge", "freq", "stderr", "alpha_target", "pass"],
               rows, chash)
    _write_report(out / "scatter.json", "scatter", dict(block), rep.to_json(), chash, rep.seed)
    return 0 if rep.passed else 1


def _run_exitstats(cfg, c, sim, out, chash, workers):
    block = cfg.get("exitstats") or {}
    _require_keys(block, {"t", "ell", "deltas", "n"}, "exitstats")
    deltas = [float(d) for d in block.get("deltas", [])]
    if not deltas:
        raise CliConfigError("exitstats.deltas must be nonempty")
    rep = verify.mean_exit_stats(
        c, _num(block, "t", "exitstats", default=0.0, lo=0.0),
        _num(block, "ell", "exitstats", default=0.0, lo=0.0),
        deltas, _num(block, "n", "exitstats", lo=1, integer=True),
        sim, workers=workers)
    rows = [[r["delta"], r["l_ratio"], r["l_ratio_stderr"], r["theta_ratio"],
             r["theta_ratio_stderr"], r["censored"]] for r in rep.estimates["rows"]]
    _write_csv(out / "exitstats.csv",
               ["delta", "l_ratio", "l_ratio_stderr", "theta_ratio",
                "theta_ratio_stderr", "censored"], rows, chash)
    _write_report(out / "exitstats.json", "exitstats", dict(block), rep.to_json(), chash, rep.seed)
    return 0 if rep.passed else 1


def _run_atom(cfg, c, sim, out, chash, workers):
    block = cfg.get("atom") or {}
    _require_keys(block, {"deltas", "oracle"}, "atom")
    deltas = [float(d) for d in block.get("deltas", [])]
    if not deltas:
        raise CliConfigError("atom.deltas must be nonempty")
    init = _init_state(cfg)
    res = simulate_batch(c, init, sim, workers=workers)
    oracle = None
    if block.get("oracle") == "half_normal":
        span = sim.T - init.t
        oracle = lambda d: 2.0 * verify.normal_cdf(d / np.sqrt(span)) - 1.0
    rep = verify.atom_test(res.x, deltas, oracle=oracle, seed=sim.seed)
    phat = rep.estimates["p_hat"]
    stderr = rep.stderr["p_hat"]
    rows = [[d, phat[i], stderr[i], rep.details["slopes"][i]]
            for i, d in enumerate(rep.details["deltas"])]
    _write_csv(out / "atom.csv", ["delta", "p_hat", "stderr", "slope"], rows, chash)
    _write_report(out / "atom.json", "atom", dict(block), rep.to_json(), chash, rep.seed)
    return 0 if rep.passed else 1


def _run_martingale(cfg, c, sim, out, chash, workers):
    block = cfg.get("martingale") or {}
    _require_keys(block, {"s", "s_prime"}, "martingale")
    init = _init_state(cfg)
    s = _num(block, "s", "martingale", default=init.t, lo=0.0)
    s_prime = _num(block, "s_prime", "martingale", default=sim.T, lo=0.0)
    battery = verify.make_battery(c.I)
    rep = verify.martingale_residual(c, init, sim, battery, s, s_prime, workers=workers)
    rows = [[q, rep.estimates["mean"][q], rep.stderr["mean"][q],
             rep.estimates["budget"][q], rep.details["per_function_pass"][q]]
            for q in range(len(battery))]
    _write_csv(out / "martingale.csv",
               ["function", "mean_residual", "stderr", "bias_budget", "pass"], rows, chash)
    _write_report(out / "martingale.json", "martingale", dict(block), rep.to_json(), chash, rep.seed)
    return 0 if rep.passed else 1


def _run_ito(cfg, c, sim, out, chash, workers):
    block = cfg.get("ito") or {}
    _require_keys(block, {"h_list", "n_paths"}, "ito")
    hs = [float(h) for h in block.get("h_list", [])]
    if not hs:
        raise CliConfigError("ito.h_list must be nonempty")
    init = _init_state(cfg)
    f = verify.make_battery(c.I)[0]
    rep = verify.ito_convergence(
        c, init, f, hs, sim.T,
        _num(block, "n_paths", "ito", default=4, lo=1, integer=True), sim.seed)
    rows = list(zip(rep.estimates["h"], rep.estimates["mean_max_residual"]))
    _write_csv(out / "ito.csv", ["h", "mean_max_residual"], [list(r) for r in rows], chash)
    _write_report(out / "ito.json", "ito", dict(block), rep.to_json(), chash, rep.seed)
    return 0 if rep.passed else 1


def _run_markov(cfg, c, sim, out, chash, workers):
    block = cfg.get("markov") or {}
    _require_keys(block, {"spec", "functional", "lag", "n"}, "markov")
    spec_cfg = block.get("spec") or {}
    _require_keys(spec_cfg, {"kind", "level", "time"}, "markov.spec")
    spec = verify.StoppingSpec(
        kind=spec_cfg.get("kind", "hitting"),
        level=spec_cfg.get("level"),
        time=spec_cfg.get("time"),
    )
    init = _init_state(cfg)
    rep = verify.strong_markov_test(
        c, spec, block.get("functional", "x"),
        _num(block, "lag", "markov", lo=1e-12),
        _num(block, "n", "markov", lo=2, integer=True),
        sim, init, workers=workers)
    rows = [[rep.estimates["ks_distance"], rep.estimates["p_value"],
             rep.details["censored_frac"], rep.passed]]
    _write_csv(out / "markov.csv", ["ks_distance", "p_value", "censored_frac", "pass"],
               rows, chash)
    _write_report(out / "markov.json", "markov", dict(block), rep.to_json(), chash, rep.seed)
    return 0 if rep.passed else 1


def _run_localtime(cfg, c, sim, out, chash, workers):
    block = cfg.get("localtime") or {}
    _require_keys(block, {"eps_list", "n_paths"}, "localtime")
    eps_list = [float(e) for e in block.get("eps_list", [])]
    if not eps_list:
        raise CliConfigError("localtime.eps_list must be nonempty")
    n = _num(block, "n_paths", "localtime", default=200, lo=1, integer=True)
    sums = {e: [0.0, 0.0] for e in eps_list}
    for pid in range(n):
        path, l_exact = localtime.oracle_path(sim.seed, pid, sim.h, sim.T)
        for e in eps_list:
            dc = localtime.downcrossing_estimate(path, e, sim.T).value
            oc = localtime.occupation_estimate(path, c, e, sim.T).value
            sums[e][0] += abs(dc - l_exact[-1])
            sums[e][1] += abs(oc - l_exact[-1])
    rows = [[e, sums[e][0] / n, sums[e][1] / n] for e in sorted(eps_list, reverse=True)]
    l1_down = [r[1] for r in rows]
    l1_occ = [r[2] for r in rows]
    ok = all(a > b for a, b in zip(l1_down, l1_down[1:])) and all(
        a > b for a, b in zip(l1_occ, l1_occ[1:]))
    _write_csv(out / "localtime.csv",
               ["eps", "l1_downcrossing", "l1_occupation"], rows, chash)
    _write_report(out / "localtime.json", "localtime", dict(block),
                  {"estimates": {"rows": rows}, "pass": ok}, chash, sim.seed)
    return 0 if ok else 1


def _run_pde(cfg, c, sim, out, chash, workers):
    problem, grid = _pde_problem(cfg, c, chash)
    sol = pde_solve(problem, grid)
    res = pde_residual(sol)
    ok = res["interior_max"] <= 1e-8 and res["vertex_max"] <= 1e-8
    rows = [[k, v] for k, v in sorted(res.items())]
    _write_csv(out / "pde.csv", ["metric", "value"], rows, chash)
    _write_report(out / "pde.json", "pde",
                  {"grid": [grid.M, grid.J, grid.P]},
                  {"estimates": res, "pass": ok, "warnings": sol.warnings},
                  chash, sim.seed if sim else 0)
    return 0 if ok else 1


def _run_fk(cfg, c, sim, out, chash, workers):
    prob = _fk_problem(cfg, c.I)
    queries = _queries(cfg.get("fk") or {}, "fk")
    rows = []
    for q in queries:
        est = fk_estimate(prob, c, q, sim, workers=workers)
        rows.append([q[0], q[1], q[2], q[3], est.mean, est.stderr, est.n_paths])
    _write_csv(out / "fk.csv", ["t", "x", "edge", "l", "mean", "stderr", "n_paths"],
               rows, chash)
    _write_report(out / "fk.json", "fk", {"queries": len(queries)},
                  {"estimates": {"values": [r[4] for r in rows]},
                   "stderr": {"values": [r[5] for r in rows]}, "pass": None},
                  chash, sim.seed)
    return 0


def _run_fk_compare(cfg, c, sim, out, chash, workers):
    prob = _fk_problem(cfg, c.I)
    block = cfg.get("fk_compare") or {}
    _require_keys(block, {"R", "K", "grid"}, "fk_compare")
    grid_cfg = block.get("grid") or {}
    _require_keys(grid_cfg, {"M", "J", "P"}, "fk_compare.grid")
    grid = PdeGrid(M=int(grid_cfg["M"]), J=int(grid_cfg["J"]), P=int(grid_cfg["P"]))
    queries = _queries(cfg.get("fk") or {}, "fk")
    rows_out, _ = fk_vs_pde(
        prob, c, queries, sim, grid,
        R=_num(block, "R", "fk_compare", lo=1e-12),
        K=_num(block, "K", "fk_compare", lo=1e-12),
        workers=workers)
    rows = [[r.query[0], r.query[1], r.query[2], r.query[3], r.mc_mean, r.mc_stderr,
             r.pde_value, r.diff, r.tolerance, r.passed] for r in rows_out]
    _write_csv(out / "fk_compare.csv",
               ["t", "x", "edge", "l", "mc_mean", "mc_stderr", "pde_value",
                "abs_diff", "tolerance", "pass"], rows, chash)
    ok = all(r.passed for r in rows_out)
    _write_report(out / "fk_compare.json", "fk-compare", {"queries": len(rows)},
                  {"estimates": {"diffs": [r.diff for r in rows_out]}, "pass": ok},
                  chash, sim.seed)
    return 0 if ok else 1


_RUNNERS = {
    "validate": _run_validate,
    "simulate": _run_simulate,
    "scatter": _run_scatter,
    "exitstats": _run_exitstats,
    "atom": _run_atom,
    "martingale": _run_martingale,
    "ito": _run_ito,
    "markov": _run_markov,
    "localtime": _run_localtime,
    "pde": _run_pde,
    "fk": _run_fk,
    "fk-compare": _run_fk_compare,
}

_TOP_KEYS = {"network", "sim", "init", "scatter", "exitstats", "atom", "martingale",
             "ito", "markov", "localtime", "pde", "fk", "fk_compare"}


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="spidersim")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="out")
    args = ap.parse_args(argv)

    started = time.time()
    try:
        cfg = _load_config(args.config)
        _require_keys(cfg, _TOP_KEYS, "config")
        net = cfg.get("network")
        if net is None:
            raise CliConfigError("missing 'network' block")
        c = build_coefficient_set(net)
        sim = _sim_config(cfg, args.seed) if "sim" in cfg else None
        if sim is None and args.subcommand != "validate":
            raise CliConfigError("missing 'sim' block")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        chash = config_hash(cfg) + (f"-s{args.seed}" if args.seed is not None else "")
        code = _RUNNERS[args.subcommand](cfg, c, sim, out, chash, max(1, args.workers))
        meta = {"elapsed_seconds": time.time() - started, "written_at": time.time()}
        (out / "run_meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
        return code
    except coeffexpr.EvalError as exc:
        return _fail(str(exc), 3)
    except (CliConfigError, ConfigError, CoeffExprError, NetworkError, FileNotFoundError) as exc:
        return _fail(str(exc), 2)
    except (SimulationError, PdeError, ValueError) as exc:
        return _fail(str(exc), 3)


if __name__ == "__main__":
    sys.exit(main())
