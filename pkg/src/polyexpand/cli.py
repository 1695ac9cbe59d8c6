"""Command-line front end.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure
(including a not-retrievable implied volatility at the final order).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import click
import numpy as np
from scipy import optimize

from . import __version__
from .auxdensity import CACHE_ENV, default_auxiliary, lloyd_quantizer
from .benchmarks import NOT_RETRIEVABLE, heston_fourier, mc_conditional_call
from .coefficients import PayoffSpec
from .errors import InvalidParameterError, PolyExpandError
from .greeks import delta_gamma, loss_gradient
from .models import MODEL_KINDS, ModelSpec, example_model
from .pricing import ExpansionPricer, l2_divergence

log = logging.getLogger("polyexpand")

SCHEMA = 1


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- #
# output helpers
# --------------------------------------------------------------------------- #

def _fmt(v) -> str:
    if v is None:
        return NOT_RETRIEVABLE
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _render(command: str, columns: list[str], rows: list[list], fmt: str, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    if fmt == "json":
        payload = {"schema": SCHEMA, "version": __version__, "command": command, "meta": meta,
                   "columns": columns,
                   "rows": [[NOT_RETRIEVABLE if v is None else (float(v) if isinstance(v, (float, np.floating)) else v)
                             for v in r] for r in rows]}
        return json.dumps(payload, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write(f"# polyexpand {__version__} schema={SCHEMA} command={command}\n")
    for k, v in meta.items():
        buf.write(f"# {k}={_fmt(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _emit(text: str, out: str | None):
    if out is None:
        click.echo(text, nl=False)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #

def _parse_overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"override {item!r} needs a numeric value") from None
    return out


def _load_model(model_path, preset, overrides) -> ModelSpec:
    try:
        if model_path is not None:
            if not Path(model_path).exists():
                raise ConfigError(f"model file not found: {model_path}")
            with open(model_path) as fh:
                data = json.load(fh)
            data.update(_parse_overrides(overrides))
            return ModelSpec.from_dict(data)
        if preset is None:
            raise ConfigError("give --model FILE or --preset KIND")
        return example_model(preset, **_parse_overrides(overrides))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse model file {model_path}: {exc}") from None
    except (InvalidParameterError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def _load_payoff(payoff_path, strike: float, model: ModelSpec) -> PayoffSpec:
    if payoff_path is not None:
        if not Path(payoff_path).exists():
            raise ConfigError(f"payoff file not found: {payoff_path}")
        try:
            with open(payoff_path) as fh:
                d = json.load(fh)
            d.setdefault("r", model.r)
            d.setdefault("T", model.T)
            return PayoffSpec(**d)
        except (json.JSONDecodeError, TypeError, InvalidParameterError) as exc:
            raise ConfigError(f"cannot parse payoff file {payoff_path}: {exc}") from None
    kind = "call_level" if model.kind == "garch_variance" else "call"
    return PayoffSpec(kind, strike, model.r, model.T)


def _pricer(model, order, components, match_moment, steps, seed) -> ExpansionPricer:
    aux = default_auxiliary(model, components, match_moment, steps, seed)
    return ExpansionPricer(model, aux, order)


def _model_options(f):
    opts = [
        click.option("--model", "model_path", type=click.Path(dir_okay=False), help="Model JSON file."),
        click.option("--preset", type=click.Choice(sorted(MODEL_KINDS)), help="Built-in parameter set."),
        click.option("--set", "overrides", multiple=True, help="Override a model field, key=value."),
        click.option("--order", "-N", default=20, show_default=True, type=click.IntRange(0)),
        click.option("--components", "-K", type=click.IntRange(1), help="Mixture components."),
        click.option("--match-moment", type=click.IntRange(2), help="Fit an extra component to this moment."),
        click.option("--steps", default=1, show_default=True, type=click.IntRange(1)),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option("--out", type=click.Path(dir_okay=False), help="Output file (stdout if omitted)."),
        click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #

@click.group()
@click.version_option(__version__, prog_name="polyexpand")
@click.option("-v", "--verbose", count=True)
def cli(verbose):
    """Option prices and Greeks by polynomial expansions."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(message)s")


@cli.command()
@_model_options
@click.option("--payoff", "payoff_path", type=click.Path(dir_okay=False), help="Payoff JSON file.")
@click.option("--strike", default=0.0, show_default=True, help="Log-strike (level strike for variance).")
@click.option("--eps0", default=1e-6, show_default=True, help="Tail probability in the error bound.")
def price(model_path, preset, overrides, order, components, match_moment, steps, seed, out, fmt,
          payoff_path, strike, eps0):
    """Price series pi^(0..N) with implied volatilities."""
    model = _load_model(model_path, preset, overrides)
    payoff = _load_payoff(payoff_path, strike, model)
    pricer = _pricer(model, max(order, 1), components, match_moment, steps, seed)
    series = pricer.series(payoff)
    div = l2_divergence(pricer.ell)
    rows, last_vol = [], None
    for n in range(order + 1):
        vol = pricer.implied_vol(series.partial_sums[n], payoff.strike) if payoff.kind == "call" else None
        rows.append([n, series.terms[n], series.partial_sums[n], vol, div[n]])
        last_vol = vol
    meta = {"model": model.kind, "payoff": payoff.kind, "strike": payoff.strike, "aux": pricer.aux.kind,
            "components": len(pricer.aux)}
    if order >= 1:
        try:
            diag = pricer.diagnostics(payoff, eps0)
            meta["cs_bound"] = diag.cauchy_schwarz_bound
            meta["growth_flag"] = int(diag.growth_flag)
        except PolyExpandError as exc:
            meta["cs_bound"] = f"unavailable ({exc})"
    _emit(_render("price", ["N", "term", "partial_sum", "implied_vol", "l2_divergence"], rows, fmt, meta), out)
    if payoff.kind == "call" and last_vol is None:
        log.error("implied volatility not retrievable at N=%d", order)
        raise SystemExit(2)


TABLE_ORDERS = {1: (2, 10, 20, 50), 2: tuple(range(1, 31)), 3: tuple(range(1, 31))}


@cli.command()
@click.argument("table_id", type=int)
@click.option("--n-max", type=click.IntRange(1), help="Largest order to report.")
@click.option("--paths", default=1_000_000, show_default=True, help="Monte Carlo paths for the benchmark.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
def table(table_id, n_max, paths, seed, out, fmt):
    """Implied-volatility tables: 1 Jacobi errors, 2 Stein-Stein errors, 3 Hull-White levels."""
    if table_id not in TABLE_ORDERS:
        raise ConfigError(f"unknown table {table_id}; choose 1, 2 or 3")
    orders = [n for n in TABLE_ORDERS[table_id] if n_max is None or n <= n_max]
    columns, data, meta = ["N"], [], {"table": table_id}
    if table_id == 1:
        model = example_model("jacobi")
        ref_order = 100
        meta["reference_order"] = ref_order
        pricers = {K: ExpansionPricer(model, default_auxiliary(model, K), ref_order) for K in (1, 2)}
        for k in (-0.1, 0.0, 0.1):
            for K, P in pricers.items():
                ps = P.series(k).partial_sums
                ref = P.implied_vol(ps[ref_order], k)
                col = []
                for n in orders:
                    v = P.implied_vol(ps[n], k)
                    col.append(None if v is None or ref is None else round(100 * abs(v - ref), 2))
                columns.append(f"k={k:g} K={K}")
                data.append(col)
    else:
        kind = "stein_stein" if table_id == 2 else "hull_white"
        model = example_model(kind)
        top = max(orders)
        ref = None
        if table_id == 2:
            mc = mc_conditional_call(model, [0.0], paths=paths, seed=seed)[0]
            meta["mc_price"], meta["mc_stderr"] = mc.estimate, mc.stderr
        for K in (3, 10, 50):
            for label, nstar in (("GM", None), ("GM+", 20)):
                P = ExpansionPricer(model, default_auxiliary(model, K, nstar), top)
                if table_id == 2 and ref is None:
                    ref = P.implied_vol(mc.estimate, 0.0)
                ps = P.series(0.0).partial_sums
                col = []
                for n in orders:
                    v = P.implied_vol(ps[n], 0.0)
                    if v is None:
                        col.append(None)
                    elif table_id == 2:
                        col.append(None if ref is None else round(100 * abs(v - ref), 2))
                    else:
                        col.append(round(100 * v, 2))
                columns.append(f"K={K} {label}")
                data.append(col)
    rows = [[n] + [c[i] for c in data] for i, n in enumerate(orders)]
    _emit(_render("table", columns, rows, fmt, meta), out)


def _strike_grid(strikes, moneyness):
    if strikes:
        return [float(s) for s in strikes.split(",")]
    lo, hi, n = moneyness.split(",")
    return [math.log(m) for m in np.linspace(float(lo), float(hi), int(n))]


@cli.command()
@_model_options
@click.option("--strikes", help="Comma-separated log-strikes.")
@click.option("--moneyness", default="0.9,1.1,21", show_default=True, help="lo,hi,count of e^k.")
def greeks(model_path, preset, overrides, order, components, match_moment, steps, seed, out, fmt,
           strikes, moneyness):
    """Price, Delta and Gamma across strikes (with Fourier columns for Heston)."""
    model = _load_model(model_path, preset, overrides)
    try:
        ks = _strike_grid(strikes, moneyness)
    except ValueError:
        raise ConfigError("cannot parse strikes") from None
    pricer = _pricer(model, max(order, 1), components, match_moment, steps, seed)
    columns = ["log_strike", "price", "delta", "gamma"]
    fourier = model.kind == "heston"
    if fourier:
        columns += ["fourier_price", "fourier_delta", "fourier_gamma"]
    rows = []
    for k in ks:
        g = delta_gamma(pricer, k)
        row = [k, g.price, g.delta, g.gamma]
        if fourier:
            q = heston_fourier(model, k, greeks=True)
            row += [q.price, q.delta, q.gamma]
        rows.append(row)
    _emit(_render("greeks", columns, rows, fmt, {"model": model.kind, "order": order}), out)


@cli.command()
@_model_options
@click.option("--quotes", required=True, type=click.Path(dir_okay=False), help="CSV of log_strike,price.")
@click.option("--params", default=None, help="Comma-separated parameters to fit.")
@click.option("--max-iter", default=200, show_default=True)
def calibrate(model_path, preset, overrides, order, components, match_moment, steps, seed, out, fmt,
              quotes, params, max_iter):
    """Least-squares fit of model parameters to quotes with analytic gradients."""
    model = _load_model(model_path, preset, overrides)
    if not Path(quotes).exists():
        raise ConfigError(f"quotes file not found: {quotes}")
    try:
        q = np.loadtxt(quotes, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"cannot parse quotes: {exc}") from None
    if q.shape[1] != 2:
        raise ConfigError("quotes need two columns: log_strike,price")
    names = params.split(",") if params else None
    aux = default_auxiliary(model, components, match_moment, steps, seed)
    base = ExpansionPricer(model, aux, max(order, 1))
    names = names or _default_fit(model)
    x0 = np.array([getattr(model, p) for p in names], dtype=float)
    history = []

    def objective(x):
        m = model.replace(**dict(zip(names, map(float, x))))
        P = ExpansionPricer(m, aux, base.order, y_scale=base.y_scale)
        loss, grad = loss_gradient(P, q, names)
        return loss, grad

    def callback(xk):
        loss = objective(xk)[0]
        history.append([len(history) + 1, loss] + list(xk))
        log.info("iter %d loss %.3e", len(history), loss)

    bounds = [(-0.999, 0.999) if p == "rho" else (1e-6, None) for p in names]
    try:
        res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                callback=callback, options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-14})
    except (ValueError, PolyExpandError) as exc:
        raise NumericalFailure(str(exc)) from exc
    if not history:
        history.append([0, float(res.fun)] + list(res.x))
    _emit(_render("calibrate", ["iter", "loss"] + names, history, fmt,
                  {"model": model.kind, "final_loss": float(res.fun)}), out)


def _default_fit(model: ModelSpec) -> list[str]:
    if model.kind in ("hull_white", "garch_variance"):
        return ["kappa", "theta", "nu", "gamma"]
    return ["kappa", "theta", "sigma", "rho"]


@cli.command()
@_model_options
@click.option("--grid", default=None, help="lo,hi,count (default mean +/- 6 sd, 201 points).")
def density(model_path, preset, overrides, order, components, match_moment, steps, seed, out, fmt, grid):
    """Auxiliary density and its order-N correction on a grid."""
    model = _load_model(model_path, preset, overrides)
    pricer = _pricer(model, max(order, 1), components, match_moment, steps, seed)
    if grid:
        try:
            lo, hi, n = grid.split(",")
            xs = np.linspace(float(lo), float(hi), int(n))
        except ValueError:
            raise ConfigError("grid must be lo,hi,count") from None
    else:
        m, s = pricer.aux.mean, math.sqrt(pricer.aux.variance)
        lo, hi = pricer.aux.support()
        xs = np.linspace(max(m - 6 * s, lo), min(m + 6 * s, hi), 201)
    w = pricer.aux.pdf(xs)
    g = pricer.density(xs, order)
    rows = [[x, a, b] for x, a, b in zip(xs, w, g)]
    _emit(_render("density", ["x", "auxiliary", "approximation"], rows, fmt,
                  {"model": model.kind, "order": order}), out)


@cli.command()
@click.argument("K", type=click.IntRange(1))
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
def quantize(k, out, fmt):
    """Optimal K-point quantizer of the standard normal (cached under $POLYEXPAND_CACHE_DIR)."""
    grid = lloyd_quantizer(k)
    rows = [[p, w] for p, w in zip(grid.points, grid.weights)]
    meta = {"K": k, "residual": grid.residual, "cache": os.environ.get(CACHE_ENV, "")}
    _emit(_render("quantize", ["point", "weight"], rows, fmt, meta), out)


class NumericalFailure(Exception):
    pass


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="polyexpand", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (PolyExpandError, NumericalFailure, FloatingPointError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
