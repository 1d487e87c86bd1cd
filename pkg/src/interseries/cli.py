"""Command-line entry point: ``isf generate|train|forecast|backtest|attention``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .backtest import backtest, export_attention, write_attention, write_forecasts, write_report
from .config import RunConfig, describe_keys, load_config
from .data import format_month, generate_synthetic, load_panel, make_windows, parse_month
from .errors import CompatibilityError, ConfigError, ForecastError
from .network import load_state, save_state
from .training import forecast_unscaled, train

log = logging.getLogger("interseries")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("ISF_LOG", "warning").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"ISF_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s: %(message)s", stream=sys.stderr)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.set("train.seed", seed)
        cfg.set("synth.seed", seed)
    return cfg


def _out(args, what: str) -> Path:
    out = getattr(args, "out", None)
    if not out:
        raise ConfigError(f"--out is required for {what}")
    return Path(out)


def _month(text: str) -> int:
    try:
        return parse_month(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _echo(cfg: RunConfig) -> None:
    print("# effective config")
    print(cfg.dump(), end="")


def cmd_generate(args) -> int:
    cfg = _config(args)
    cfg.require("synth.m")
    synth = cfg.synth()
    out = _out(args, "generate")
    panel = generate_synthetic(synth)
    panel.to_csv(out)
    print(f"seed={synth.seed} series={panel.m} months={panel.T} "
          f"range={format_month(panel.start)}..{format_month(panel.end)} -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "train")
    panel = load_panel(args.data)
    net, tc = cfg.network(), cfg.training()
    state, history = train(panel, net, tc, cfg.train_end)
    save_state(state, out)
    with open(f"{out}.loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "val_loss"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.lr), "" if r.val_loss is None else repr(r.val_loss)])
    Path(f"{out}.config").write_text(cfg.dump(), encoding="utf-8")
    _echo(cfg)
    final = history[-1].loss if history else float("nan")
    print(f"trained {len(history)} epochs, {state.num_parameters()} parameters, "
          f"final loss {final:.6g} -> {out}")
    return 0


def _check_schema(state, panel) -> None:
    if list(panel.covariate_names) != list(state.spec.covariate_names):
        raise CompatibilityError(
            f"panel covariates {list(panel.covariate_names)} do not match the checkpoint's "
            f"{list(state.spec.covariate_names)}"
        )


def cmd_forecast(args) -> int:
    cfg = _config(args)
    out = _out(args, "forecast")
    state = load_state(args.checkpoint)
    panel = load_panel(args.data)
    _check_schema(state, panel)
    origin = _month(args.origin) if args.origin else panel.end + 1
    c = state.config
    windows = make_windows(panel, state.scaler, c.context_length, c.horizon,
                           origins=[origin], require_labels=False)
    unseen = sorted({w.product_id for w in windows if w.product_id not in state.spec.product_vocab})
    unseen_loc = sorted({w.location_id for w in windows if w.location_id not in state.spec.location_vocab})
    if unseen or unseen_loc:
        log.warning("unseen ids mapped to the reserved embedding: products %s, locations %s",
                    unseen or "-", unseen_loc or "-")
    if not windows:
        log.warning("no series has context before %s; nothing to forecast", format_month(origin))
        values = []
    else:
        values, _ = forecast_unscaled(windows, state, cfg.clip_nonnegative)
    n = write_forecasts(out, windows, values)
    print(f"{len(windows)} series x {c.horizon} steps from {format_month(origin)}: {n} rows -> {out}")
    return 0


def cmd_backtest(args) -> int:
    cfg = _config(args)
    out = _out(args, "backtest")
    panel = load_panel(args.data)
    origins = cfg.origins
    if not origins:
        raise ConfigError("backtest needs 'backtest.origins'")
    net, tc = cfg.network(), cfg.training()
    result = backtest(panel, net, tc, origins, cfg.buckets(net.horizon), cfg.clip_nonnegative)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    for origin, reason in result.skipped:
        print(f"notice: origin {format_month(origin)} skipped: {reason}")
    for r in result.reports:
        write_report(out / f"report_{r.label}.csv", r)
        windows, values = result.forecasts[r.origin]
        write_forecasts(out / f"forecast_{r.label}.csv", windows, values)
    if result.average is not None:
        write_report(out / "report_average.csv", result.average)
        if result.average.attention is not None:
            write_attention(out / "attention_average.csv", panel.series_ids, result.average.attention)
    print(f"{len(result.reports)} origins scored, {len(result.skipped)} skipped -> {out}")
    return 0


def cmd_attention(args) -> int:
    out = _out(args, "attention")
    state = load_state(args.checkpoint)
    panel = load_panel(args.data)
    _check_schema(state, panel)
    origin = _month(args.origin) if args.origin else panel.end + 1
    matrix = export_attention(state, panel, origin)
    n = write_attention(out, panel.series_ids, matrix)
    print(f"{n} rows of inter-series weights at {format_month(origin)} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides train.seed and synth.seed")
    common.add_argument("--out", help="output path (file or directory)")

    parser = argparse.ArgumentParser(
        prog="isf", parents=[common],
        description="Inter-series attention transformer for monthly demand panels.",
        epilog="Config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic panel CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p.add_argument("--data", required=True, help="panel CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", parents=[common], help="h-step forecasts from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--origin", help="first forecast month YYYY-MM (default: month after the data)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("backtest", parents=[common], help="retrain and score at each configured origin")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("attention", parents=[common], help="export the m x m inter-series weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--origin", help="origin YYYY-MM (default: month after the data)")
    p.set_defaults(func=cmd_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ForecastError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
