"""Command-line front end: ``indiff {price,corrector,audit,simulate,converge,verify}``.

One TOML file drives every subcommand. Every field is validated before any
computation starts and all violations are reported together. Reports are CSV
files with a ``#`` metadata header (version, config hash, seed), so the same
config and seed reproduce byte-identical files.

Exit codes: 0 success, 1 validation failure, 2 verification failure,
3 divergence refusal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .blackscholes import BSField, bs_pde_residual, bs_pde_scale
from .corrector import FORMS, CorrectorSolution, audit_assumptions
from .expansion import DivergenceError, GridSpec, price_expansion, solve_u_tilde_fd, u_tilde_mc
from .frictions import Portfolio, liquidation_gap, liquidation_limit
from .market import PAYOFF_KINDS, CostStructure, MarketParams, ModelError, PayoffSpec, Preferences
from .merton import MertonSolution
from .simulator import SimSetup, convergence_study, simulate_many

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_DIVERGENT = 0, 1, 2, 3
COMMANDS = ("price", "corrector", "audit", "simulate", "converge", "verify")


class ConfigError(ValueError):
    """All violations found in a config, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


# section -> key -> default; None marks an optional key without a default
DEFAULTS = {
    "market": {"mu": 0.1, "sigma": 0.2, "r": 0.02, "T": 1.0},
    "preferences": {"gamma": 1.0, "kappa": 0},
    "costs": {"sell": 1.0, "buy": 1.0, "lambda": None},
    "payoff": {"kind": "call", "strike": 100.0, "exponent": 1.5, "table": None},
    "command": {
        "t": 0.0,
        "s": 100.0,
        "z": None,  # initial wealth for simulations; defaults to s
        "epsilon": [0.0, 0.05, 0.1, 0.2],
        "seed": 2024,
        "paths": 20000,
        "out": "reports",
        "n_space": 400,
        "n_time": 400,
        "form": "validated",
        "dt": None,
    },
}


@dataclass(frozen=True)
class CommandBlock:
    t: float
    s: float
    z: float
    epsilon: tuple
    seed: int
    paths: int
    out: str
    n_space: int
    n_time: int
    form: str
    dt: float | None


@dataclass(frozen=True)
class RunConfig:
    market: MarketParams
    prefs: Preferences
    costs: CostStructure
    payoff: PayoffSpec
    command: CommandBlock
    raw: dict

    @property
    def digest(self) -> str:
        # the output directory does not change the numbers, so it is left out
        raw = {k: dict(v) for k, v in self.raw.items()}
        raw.get("command", {}).pop("out", None)
        blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def corrector(self, eps: float = 0.0) -> CorrectorSolution:
        return CorrectorSolution.build(self.market, self.prefs, self.payoff,
                                       self.costs.with_epsilon(eps), self.command.form)

    def grid(self) -> GridSpec:
        c = self.command
        return GridSpec(n_space=c.n_space, n_time=c.n_time, t0=c.t, s_center=c.s)


# -- parsing ------------------------------------------------------------------------
def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _num(problems, name, x, lo=None, lo_open=False, integer=False):
    if integer and not (isinstance(x, int) and not isinstance(x, bool)):
        problems.append(f"{name}: expected an integer, got {x!r}")
        return None
    if not _is_num(x) or not math.isfinite(x):
        problems.append(f"{name}: expected a finite number, got {x!r}")
        return None
    if lo is not None and (x <= lo if lo_open else x < lo):
        problems.append(f"{name}: must be {'>' if lo_open else '>='} {lo}, got {x!r}")
        return None
    return x


def parse_config(source: str | Path | dict, overrides: dict | None = None) -> RunConfig:
    """Validate a TOML config (path, text or parsed dict).

    Raises :class:`ConfigError` listing every violation.
    """
    if isinstance(source, dict):
        data = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and source.strip() and "\n" not in source
                                        and "=" not in source and "[" not in source):
            p = Path(source)
            if not p.is_file():
                raise ConfigError([f"config file not found: {p}"])
            text = p.read_text()
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config is not valid TOML: {exc}"]) from None

    problems: list[str] = []
    merged: dict = {}
    for sec, keys in data.items():
        if sec not in DEFAULTS:
            problems.append(f"unknown section [{sec}]")
        elif not isinstance(keys, dict):
            problems.append(f"[{sec}] must be a table")
        else:
            problems += [f"{sec}.{k}: unknown key" for k in keys if k not in DEFAULTS[sec]]
    for sec, keys in DEFAULTS.items():
        given = data.get(sec, {}) if isinstance(data.get(sec, {}), dict) else {}
        merged[sec] = {k: given.get(k, v) for k, v in keys.items()}
    for k, v in (overrides or {}).items():
        if v is not None:
            merged["command"][k] = v

    market = _market(problems, merged["market"])
    prefs = _prefs(problems, merged["preferences"])
    costs = _costs(problems, merged["costs"], market)
    payoff = _payoff(problems, merged["payoff"])
    command = _command(problems, merged["command"], market)
    if problems:
        raise ConfigError(problems)
    raw = {sec: {k: v for k, v in keys.items() if v is not None} for sec, keys in merged.items()}
    return RunConfig(market, prefs, costs, payoff, command, raw)


def _market(problems, m):
    ok = True
    mu, sig = m["mu"], m["sigma"]
    mu_arr = np.atleast_1d(np.asarray(mu, dtype=object))
    if not all(_is_num(x) for x in mu_arr.ravel()):
        problems.append(f"market.mu: expected a number or a list of numbers, got {mu!r}")
        ok = False
    sig_arr = np.atleast_2d(np.asarray(sig, dtype=object))
    if not all(_is_num(x) for x in sig_arr.ravel()):
        problems.append(f"market.sigma: expected a number or a matrix of numbers, got {sig!r}")
        ok = False
    r = _num(problems, "market.r", m["r"])
    T = _num(problems, "market.T", m["T"], 0.0, lo_open=True)
    if not ok or r is None or T is None:
        return None
    try:
        return MarketParams(mu_arr.astype(float), sig_arr.astype(float), r, T)
    except ModelError as exc:
        problems.append(f"market: {exc}")
        return None


def _prefs(problems, p):
    g = _num(problems, "preferences.gamma", p["gamma"], 0.0, lo_open=True)
    k = p["kappa"]
    if k not in (0, 1) or isinstance(k, bool):
        problems.append(f"preferences.kappa: must be 0 or 1, got {k!r}")
        return None
    if g is None:
        return None
    return Preferences(float(g), int(k))


def _cost_entry(problems, name, x):
    if isinstance(x, str) and x.strip().lower() in ("inf", "+inf", "infinity", "forbidden"):
        return "inf"
    if _is_num(x) and math.isinf(x) and x > 0:
        return "inf"
    return _num(problems, name, x, 0.0)


def _costs(problems, c, market):
    if c["lambda"] is not None:
        lam = c["lambda"]
        if not (isinstance(lam, list) and all(isinstance(row, list) for row in lam)):
            problems.append("costs.lambda: expected a square matrix (list of rows)")
            return None
        rows = [[_cost_entry(problems, f"costs.lambda[{i}][{j}]", x) for j, x in enumerate(row)]
                for i, row in enumerate(lam)]
        if any(x is None for row in rows for x in row):
            return None
    else:
        sell = _cost_entry(problems, "costs.sell", c["sell"])
        buy = _cost_entry(problems, "costs.buy", c["buy"])
        for name, v in (("costs.sell", sell), ("costs.buy", buy)):
            if v == "inf":
                problems.append(f"{name}: cash legs must have finite cost")
        if sell is None or buy is None or "inf" in (sell, buy):
            return None
        rows = [[0.0, buy], [sell, 0.0]]
    try:
        costs = CostStructure(rows, 0.0)
    except ModelError as exc:
        problems.append(f"costs.lambda: {exc}")
        return None
    if market is not None and costs.d != market.d:
        problems.append(f"costs: lambda is for d = {costs.d} but the market has d = {market.d}")
        return None
    return costs


def _payoff(problems, p):
    kind = p["kind"]
    if kind not in PAYOFF_KINDS:
        problems.append(f"payoff.kind: must be one of {PAYOFF_KINDS}, got {kind!r}")
        return None
    strike = _num(problems, "payoff.strike", p["strike"], 0.0, lo_open=True)
    expo = _num(problems, "payoff.exponent", p["exponent"], 1.0)
    if strike is None or expo is None:
        return None
    try:
        if kind == "custom":
            tab = p["table"]
            if not (isinstance(tab, list) and len(tab) == 2):
                problems.append("payoff.table: expected [[s...], [g...]] for a custom payoff")
                return None
            return PayoffSpec.custom(tab[0], tab[1])
        if kind == "power_call":
            return PayoffSpec.power_call(strike, expo)
        if kind in ("call", "put", "digital"):
            return PayoffSpec(kind, strike=strike)
        return PayoffSpec(kind)
    except (ModelError, TypeError, ValueError) as exc:
        problems.append(f"payoff: {exc}")
        return None


def _command(problems, c, market):
    t = _num(problems, "command.t", c["t"], 0.0)
    s = _num(problems, "command.s", c["s"], 0.0, lo_open=True)
    z = s if c["z"] is None else _num(problems, "command.z", c["z"])
    if t is not None and market is not None and not t < market.T:
        problems.append(f"command.t: must be below T = {market.T}, got {t}")
    eps = c["epsilon"]
    if _is_num(eps):
        eps = [eps]
    if not isinstance(eps, list) or not eps:
        problems.append(f"command.epsilon: expected a nonempty list of numbers, got {eps!r}")
        eps_ok = None
    else:
        eps_ok = [_num(problems, f"command.epsilon[{i}]", e, 0.0) for i, e in enumerate(eps)]
        if any(e is None for e in eps_ok):
            eps_ok = None
    seed = _num(problems, "command.seed", c["seed"], 0, integer=True)
    paths = _num(problems, "command.paths", c["paths"], 100, integer=True)
    n_space = _num(problems, "command.n_space", c["n_space"], 50, integer=True)
    n_time = _num(problems, "command.n_time", c["n_time"], 50, integer=True)
    out = c["out"]
    if not isinstance(out, str) or not out:
        problems.append(f"command.out: expected a directory name, got {out!r}")
    form = c["form"]
    if form not in FORMS:
        problems.append(f"command.form: must be one of {FORMS}, got {form!r}")
    dt = None if c["dt"] is None else _num(problems, "command.dt", c["dt"], 0.0, lo_open=True)
    vals = (t, s, z, eps_ok, seed, paths, n_space, n_time)
    if any(v is None for v in vals) or not isinstance(out, str) or form not in FORMS:
        return None
    return CommandBlock(float(t), float(s), float(z), tuple(float(e) for e in eps_ok), int(seed),
                        int(paths), out, int(n_space), int(n_time), form,
                        None if dt is None else float(dt))


# -- reports --------------------------------------------------------------------------
def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, cfg: RunConfig, command: str, header: list[str], rows, notes=()) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# indiff {__version__}",
        f"# command: {command}",
        f"# config_sha256: {cfg.digest}",
        f"# seed: {cfg.command.seed}",
        *(f"# {n}" for n in notes),
        ",".join(header),
        *(",".join(_fmt(v) for v in row) for row in rows),
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


# -- commands --------------------------------------------------------------------------
def cmd_price(cfg: RunConfig, out: Path, say) -> int:
    c = cfg.command
    corr = cfg.corrector()
    try:
        rep = price_expansion(corr, c.t, c.s, c.epsilon, grid=cfg.grid())
    except DivergenceError as exc:
        say(f"price refused: {exc}. Run `indiff audit` for the assumption report.", err=True)
        return EXIT_DIVERGENT
    header = ["epsilon", "V", "h", "p_eps", "u_tilde_g", "u_tilde_0", "stderr", "divergence_flag", "h_alt"]
    rows = [[r.epsilon, r.V, r.h, r.p_eps, r.u_tilde_g, r.u_tilde_0, r.stderr, r.divergence_flag, r.h_alt]
            for r in rep.rows]
    notes = [f"t={c.t} s={c.s} audit={rep.audit.verdict}", f"u_tilde_g source: {rep.provenance['u_tilde_g']}"]
    p = write_csv(out / "price.csv", cfg, "price", header, rows, notes)
    say(f"wrote {p} (audit verdict: {rep.audit.verdict})")
    return EXIT_OK


def cmd_corrector(cfg: RunConfig, out: Path, say) -> int:
    c = cfg.command
    corr = cfg.corrector()
    t, s = c.t, c.s
    _, vz, _ = corr.merton.merton_value(t, s, c.z)
    xi0 = float(corr.xi0(t, s))
    a = float(corr.a(t, s, c.z))
    xs = np.linspace(-2.0, 2.0, 401) * xi0 if xi0 > 0 else np.linspace(-1.0, 1.0, 401)
    rows, worst = [], {"pde_rel": 0.0, "slack": 0.0}
    for xi in xs:
        w = corr.w_explicit(t, s, c.z, xi)
        res = corr.corrector_residual(t, s, c.z, xi)
        rows.append([xi, float(w.w), float(w.w_xi), w.branch, float(res.pde_part),
                     float(res.slack_10), float(res.slack_01)])
        if w.branch == "interior" and a != 0:
            worst["pde_rel"] = max(worst["pde_rel"], abs(float(res.pde_part) / a))
        else:
            worst["slack"] = max(worst["slack"], min(abs(float(res.slack_10)), abs(float(res.slack_01))))
    write_csv(out / "corrector.csv", cfg, "corrector",
              ["xi", "w", "w_xi", "branch", "pde_part", "slack_10", "slack_01"], rows)
    summ = [
        ["xi0", xi0], ["rho0", float(corr.rho0(t, s))], ["a", a], ["a_bar", float(corr.a_bar(t, s))],
        ["a_bar_display", float(corr.a_bar_display(t, s))], ["v_z", float(vz)],
        ["max_interior_pde_over_a", worst["pde_rel"]], ["max_exterior_active_slack", worst["slack"]],
        ["form", corr.form],
    ]
    p = write_csv(out / "corrector_summary.csv", cfg, "corrector", ["quantity", "value"], summ,
                  [f"t={t} s={s} z={c.z}"])
    say(f"wrote {out / 'corrector.csv'} and {p}")
    return EXIT_OK


def cmd_audit(cfg: RunConfig, out: Path, say) -> int:
    rep = audit_assumptions(cfg.market, cfg.prefs, cfg.payoff, form=cfg.command.form)
    rows = [line.split(",", 1) for line in rep.lines()]
    p = write_csv(out / "audit.csv", cfg, "audit", ["check", "value"], rows)
    say(f"wrote {p} (verdict: {rep.verdict})")
    return EXIT_OK


def _setup(cfg: RunConfig) -> SimSetup:
    c = cfg.command
    return SimSetup(cfg.market, cfg.prefs, cfg.payoff, cfg.costs, c.t, c.s, c.z, dt_rule=c.dt)


SIM_HEADER = ["epsilon", "delta", "delta_over_eps2", "stderr", "mean_cost", "insolvent_paths"]


def cmd_simulate(cfg: RunConfig, out: Path, say) -> int:
    c = cfg.command
    results = simulate_many(_setup(cfg), c.epsilon, c.paths, c.seed)
    rows = []
    for r in results:
        e2 = r.epsilon**2
        rows.append([r.epsilon, r.delta, r.delta / e2 if e2 else float("nan"),
                     r.delta_stderr, r.mean_cost, r.insolvent_paths])
    notes = [f"paths={c.paths} steps={results[0].n_steps} v_g={results[0].v_g!r}"]
    p = write_csv(out / "simulate.csv", cfg, "simulate", SIM_HEADER, rows, notes)
    say(f"wrote {p}")
    return EXIT_OK


def cmd_converge(cfg: RunConfig, out: Path, say) -> int:
    c = cfg.command
    try:
        st = convergence_study(_setup(cfg), c.epsilon, c.paths, c.seed)
    except ModelError as exc:
        say(f"converge: {exc}", err=True)
        return EXIT_INVALID
    rows = [[r.epsilon, r.delta, r.delta_over_eps2, r.stderr, r.mean_cost, r.insolvent_paths, r.usable]
            for r in st.rows]
    notes = [f"slope={st.slope!r} verdict={st.verdict}"]
    p = write_csv(out / "converge.csv", cfg, "converge", SIM_HEADER + ["usable"], rows, notes)
    say(f"wrote {p} (slope {st.slope:.3f}, {st.verdict})")
    return EXIT_OK


def verify_checks(cfg: RunConfig) -> list[tuple[str, float, float, bool]]:
    """Residual suite on the configured model: ``(name, value, tolerance, passed)``."""
    c = cfg.command
    m, pr, g = cfg.market, cfg.prefs, cfg.payoff
    T = m.T
    checks = []

    def add(name, value, tol):
        checks.append((name, float(value), float(tol), bool(value <= tol)))

    ts = np.linspace(c.t, T - 0.05, 6)
    ss = c.s * np.exp(np.linspace(-0.5, 0.5, 7))
    tt, sg = np.meshgrid(ts, ss, indexing="ij")
    field = BSField(g, m)
    # Black-Scholes PDE, scaled by the size of its terms
    res = np.abs(bs_pde_residual(field, tt, sg))
    scale = bs_pde_scale(field, tt, sg)
    add("bs_pde_residual", float(np.max(np.where(scale > 0, res / np.where(scale > 0, scale, 1), res))), 1e-6)
    if g.kind in ("call", "put"):
        K = g.strike
        C = BSField(PayoffSpec.call(K), m).value(tt, sg)
        P = BSField(PayoffSpec.put(K), m).value(tt, sg)
        add("put_call_parity", float(np.max(np.abs(C - P - sg + K * np.exp(-m.r * (T - tt))))), 1e-10)
    # Merton HJB
    if pr.kappa == 0 or m.r != 0:
        mert = MertonSolution(m, pr, g)
        eta = float(mert.eta(c.t))
        zs = mert._V(tt, sg)[..., None] + np.linspace(-5, 5, 5) * eta
        v = mert.value(tt[..., None], sg[..., None], zs)
        hjb = mert.hjb_residual(tt[..., None], sg[..., None], zs)
        add("hjb_relative_residual", float(np.max(np.abs(hjb / v))), 1e-6)
    # corrector complementarity
    corr = cfg.corrector()
    if corr.lam_sum > 0:
        worst_pde, worst_slack = 0.0, 0.0
        for t in ts[::2]:
            for s in ss[::3]:
                xi0 = float(corr.xi0(t, s))
                a = abs(float(corr.a(t, s, c.z)))
                for xi in np.linspace(-1.9, 1.9, 39) * xi0:
                    r = corr.corrector_residual(t, s, c.z, xi)
                    if abs(xi) < xi0:
                        worst_pde = max(worst_pde, abs(float(r.pde_part)) / a)
                    else:
                        worst_slack = max(worst_slack, min(abs(float(r.slack_10)), abs(float(r.slack_01))))
        add("corrector_interior_pde_over_a", worst_pde, 1e-6)
        add("corrector_exterior_active_slack", worst_slack, 1e-10)
        xb, ab, _ = corr.brute_force(c.t, c.s)
        add("ergodic_xi0_relative_error", abs(xb / float(corr.xi0(c.t, c.s)) - 1.0), 5e-3)
        add("ergodic_abar_relative_error", abs(ab / float(corr.a_bar(c.t, c.s)) - 1.0), 5e-3)
        # finite differences against Monte Carlo for u_tilde
        if g.kind not in ("digital",):
            fd = solve_u_tilde_fd(corr, cfg.grid()).at(c.t, c.s)
            mc, se = u_tilde_mc(corr, c.t, c.s, c.paths, c.seed)
            fd = float(np.asarray(fd).reshape(-1)[0])
            add("u_tilde_fd_vs_mc_excess", abs(fd - mc) - max(3 * se, 0.01 * abs(fd)), 0.0)
    # liquidation limit
    worst = 0.0
    rng = np.random.default_rng(c.seed)
    lam_max = cfg.costs.lam_max
    for eps in (1e-1, 1e-2, 1e-3):
        ce = cfg.costs.with_epsilon(eps)
        for _ in range(20):
            p = Portfolio(rng.uniform(-1, 1), rng.uniform(-1, 1, cfg.costs.d))
            L = liquidation_limit(p, ce)
            bound = np.sum(np.abs(p.y)) * lam_max**2 * eps**3 + 8 * np.spacing(max(L, 1.0))
            worst = max(worst, abs(liquidation_gap(p, ce) / eps**3 - L) / bound)
    add("liquidation_limit_ratio", worst, 1.0)
    return checks


def cmd_verify(cfg: RunConfig, out: Path, say) -> int:
    checks = verify_checks(cfg)
    rows = [[n, v, tol, "pass" if ok else "fail"] for n, v, tol, ok in checks]
    p = write_csv(out / "verify.csv", cfg, "verify", ["check", "value", "tolerance", "status"], rows)
    for n, v, tol, ok in checks:
        say(f"{'PASS' if ok else 'FAIL'} {n}: {v:.3e} (tol {tol:.1e})")
    failed = [n for n, *_, ok in checks if not ok]
    say(f"wrote {p}; {len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


HANDLERS = {
    "price": cmd_price,
    "corrector": cmd_corrector,
    "audit": cmd_audit,
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "verify": cmd_verify,
}


def run_command(cfg: RunConfig, cmd: str, out: Path | None = None, quiet: bool = False) -> int:
    def say(msg, err=False):
        if err:
            print(msg, file=sys.stderr)
        elif not quiet:
            print(msg)

    out = Path(out if out is not None else cfg.command.out)
    return HANDLERS[cmd](cfg, out, say)


def _epsilons(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="indiff", description="Indifference prices under small proportional costs.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="TOML config; defaults are used when omitted")
    ap.add_argument("--out", help="output directory (overrides command.out)")
    ap.add_argument("--seed", type=int, help="random seed (overrides command.seed)")
    ap.add_argument("--paths", type=int, help="Monte Carlo paths (overrides command.paths)")
    ap.add_argument("--epsilon", type=_epsilons, help="comma-separated epsilon list")
    ap.add_argument("--quiet", action="store_true", help="only print errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"out": args.out, "seed": args.seed, "paths": args.paths, "epsilon": args.epsilon}
    try:
        cfg = parse_config(args.config if args.config is not None else {}, overrides)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return run_command(cfg, args.command, quiet=args.quiet)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
