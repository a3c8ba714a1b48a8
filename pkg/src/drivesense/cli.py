"""Command-line batch pipeline: synth, ingest, fit, scan, predict, evaluate, dte.

Every artifact embeds the producing configuration (a `config` key in JSON
documents, a leading `# config ...` comment line in CSV tables), and every
command is deterministic given its flags and the DRIVESENSE_SEED fallback.
Exit codes: 1 validation, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence
from urllib.parse import quote

import numpy as np

from . import predictor, synth_oracle
from .collab_filter import MFParams
from .energy_model import (
    DEFAULT_RIDGE,
    FitSample,
    ModelOrder,
    aic_scan_grouped,
    fit,
    load_model,
    save_model,
)
from .errors import DataError, DrivesenseError, UnderdeterminedError, ValidationError
from .features import FeatureDefaults
from .predictor import PredictParams, PredictionReport
from .store import SegmentStore
from .trip_data import ingest_trip

ENV_SEED = "DRIVESENSE_SEED"


def main() -> None:
    sys.exit(run(sys.argv[1:]))


def run(argv: Sequence[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except DrivesenseError as exc:
        _report_error(exc, getattr(args, "json_errors", False))
        return exc.exit_code


def _report_error(exc: DrivesenseError, as_json: bool) -> None:
    print(f"error: {exc}", file=sys.stderr)
    if as_json:
        payload = {
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"{ENV_SEED}={env!r} is not an integer") from None
    return 0


def _config_echo(args) -> dict:
    options = {
        key: value
        for key, value in sorted(vars(args).items())
        if key != "func" and not callable(value)
    }
    return {"command": args.command, "options": options}


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], config: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("# config " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload: dict, config: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": config, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_order(text: str) -> ModelOrder:
    try:
        r, k, m = (int(p) for p in text.split(","))
    except ValueError:
        raise ValidationError(f"--order expects 'r,k,m', got {text!r}") from None
    return ModelOrder(r, k, m)


def _parse_order_grid(text: str) -> list[ModelOrder]:
    """Parse 'r1..r2,k1..k2,m1..m2' into the full cartesian grid."""

    def span(part: str) -> range:
        if ".." in part:
            lo, hi = part.split("..")
            return range(int(lo), int(hi) + 1)
        value = int(part)
        return range(value, value + 1)

    try:
        r_span, k_span, m_span = (span(p) for p in text.split(","))
    except (ValueError, TypeError):
        raise ValidationError(f"--orders expects 'r1..r2,k1..k2,m1..m2', got {text!r}") from None
    grid = [ModelOrder(r, k, m) for r in r_span for k in k_span for m in m_span]
    if not grid:
        raise ValidationError(f"--orders {text!r} produced an empty grid")
    return grid


def _defaults_from(args) -> FeatureDefaults:
    return FeatureDefaults(idle_load_kw=args.idle_load_kw, temp_c=args.temp_c)


def _load_models(models_dir: str, pairs) -> dict:
    models = {}
    for pair in pairs:
        path = Path(models_dir) / _model_filename(pair)
        if path.exists():
            models[pair] = load_model(path)
    if not models:
        raise DataError(f"no model files found under {models_dir}")
    return models


def _model_filename(pair) -> str:
    return f"{quote(pair[0], safe='')}__{quote(pair[1], safe='')}.json"


def _fit_samples(store: SegmentStore, pair, exclude=frozenset()) -> list[FitSample]:
    samples = []
    for seg in store.segments_of(pair):
        if seg in exclude:
            continue
        record = store.get(pair, seg)
        if record.energy_mv is None or record.energy_id is None:
            continue
        samples.append((record.features, record.energy_mv, record.energy_id))
    return samples


def _mf_params(args, seed: int) -> MFParams:
    return MFParams(
        k=args.rank,
        lambda_p=args.reg_lambda,
        lambda_q=args.reg_lambda,
        learning_rate=args.lr,
        max_epochs=args.mf_epochs,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    spec = synth_oracle.default_fleet(
        n_pairs=args.pairs,
        n_segments=args.segments,
        density=args.density,
        noise=args.noise,
        seed=seed,
        order=_parse_order(args.order),
        misspec_v3=args.misspec_v3,
        twin_of=args.twin_of,
    )
    fleet = synth_oracle.generate(spec)
    out = Path(args.out)
    synth_oracle.write_fleet(fleet, out)
    config = _config_echo(args)
    config["options"]["seed"] = seed
    meta = json.loads((out / "planted_manifest.json").read_text(encoding="utf-8"))
    _write_json(out / "planted_manifest.json", meta, config)
    print(f"synth: {len(fleet.trips)} trips, {len(fleet.store)} segment records -> {out}")
    return 0


def _cmd_ingest(args) -> int:
    defaults = _defaults_from(args)
    store = SegmentStore()
    if args.traces:
        manifest_path = Path(args.traces) / "trips_manifest.json"
        if not manifest_path.exists():
            raise DataError(f"{manifest_path} not found")
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
        for entry in entries:
            trip = ingest_trip(
                Path(args.traces) / entry["file"],
                driver=entry["driver"],
                vehicle=entry["vehicle"],
                ambient_temp=entry.get("ambient_temp"),
            )
            store.add_trip(trip, segment_ids=entry.get("segment_ids"), defaults=defaults)
    elif args.trace:
        if not (args.driver and args.vehicle):
            raise ValidationError("--trace requires --driver and --vehicle")
        trip = ingest_trip(
            args.trace, driver=args.driver, vehicle=args.vehicle, ambient_temp=args.ambient_temp
        )
        store.add_trip(trip, defaults=defaults)
    else:
        raise ValidationError("ingest needs --traces DIR or --trace FILE")
    store.save(args.out, config=_config_echo(args))
    print(f"ingest: {len(store)} segment records -> {args.out}")
    return 0


def _cmd_fit(args) -> int:
    store = SegmentStore.load(args.store)
    order = _parse_order(args.order)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _config_echo(args)
    rows = []
    for pair in store.pairs():
        samples = _fit_samples(store, pair)
        if not samples:
            raise DataError(f"pair {pair} has no measured energies to fit")
        model, report = fit(samples, order, ridge=args.ridge)
        save_model(
            model,
            out / _model_filename(pair),
            provenance={
                "config": config,
                "pair": list(pair),
                "ridge": args.ridge,
                "n_segments": report.n,
                "sse": report.sse,
                "aic": report.aic,
            },
        )
        errors = np.asarray(report.per_segment_errors)
        rows.append(
            [
                pair[0], pair[1], report.n, report.coefficient_count,
                _fmt(report.sse), _fmt(report.aic),
                _fmt(float(errors.mean())), _fmt(float(errors.std())),
            ]
        )
    _write_csv(
        out / "fit_summary.csv",
        ["driver", "vehicle", "n", "K", "sse", "aic", "mean_eps", "std_eps"],
        rows,
        config,
    )
    print(f"fit: {len(rows)} pairs -> {out}")
    return 0


def _cmd_aic_scan(args) -> int:
    store = SegmentStore.load(args.store)
    orders = _parse_order_grid(args.orders)
    config = _config_echo(args)

    groups = {pair: _fit_samples(store, pair) for pair in store.pairs()}
    entries = aic_scan_grouped(groups, orders, ridge=args.ridge)
    rows = []
    rank = 0
    for entry in entries:
        if math.isnan(entry.mean_aic):
            rows.append(["", entry.order.r, entry.order.k, entry.order.m,
                         "", "", entry.groups_fitted])
        else:
            rank += 1
            rows.append([rank, entry.order.r, entry.order.k, entry.order.m,
                         _fmt(entry.mean_aic), _fmt(entry.mean_aic_normalized),
                         entry.groups_fitted])
    _write_csv(
        Path(args.out),
        ["rank", "r", "k", "m", "mean_aic", "mean_aic_norm", "n_pairs"],
        rows,
        config,
    )
    print(f"aic-scan: best order {entries[0].order.label()} over {len(groups)} pairs -> {args.out}")
    return 0


def _predict_report(args, store: SegmentStore, models, seed: int) -> PredictionReport:
    target = (args.driver, args.vehicle)
    if args.route == "all":
        route = store.segment_ids()
    else:
        route = [part for part in args.route.split(",") if part]
    params = PredictParams(
        k=args.k,
        weighting=args.weighting,
        mf=_mf_params(args, seed),
        defaults=_defaults_from(args),
    )
    return predictor.predict(target, route, args.approach, store, models, params)


def _cmd_predict(args) -> int:
    store = SegmentStore.load(args.store)
    models = _load_models(args.models, store.pairs())
    seed = _resolve_seed(args)
    report = _predict_report(args, store, models, seed)
    config = _config_echo(args)
    config["options"]["seed"] = seed
    out = Path(args.out)
    _write_json(Path(str(out) + ".json"), predictor.report_to_dict(report), config)
    rows = [
        [row["segment_id"], row["approach"], _fmt(row["E_hat_kwh"]),
         _fmt(row["E_true_kwh"]), _fmt(row["eps_i"])]
        for row in predictor.report_rows(report)
    ]
    _write_csv(
        Path(str(out) + ".csv"),
        ["segment_id", "approach", "E_hat_kwh", "E_true_kwh", "eps_i"],
        rows,
        config,
    )
    print(
        f"predict: {args.approach} total {report.total_kwh:.3f} kWh over "
        f"{len(report.route) - len(report.flagged)}/{len(report.route)} segments -> {out}.csv"
    )
    return 0


def _split_route(store: SegmentStore, seed: int, fraction: float) -> list[str]:
    """Held-out route: the first `fraction` of a seeded shuffle of segments."""
    segments = store.segment_ids()
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(np.asarray(segments, dtype=object)))
    n_route = max(1, int(round(fraction * len(segments))))
    return sorted(str(s) for s in shuffled[:n_route])


def _cmd_evaluate(args) -> int:
    store = SegmentStore.load(args.store)
    seed = _resolve_seed(args)
    order = _parse_order(args.order)
    approaches = [a.strip() for a in args.approaches.split(",") if a.strip()]
    for approach in approaches:
        if approach not in predictor.APPROACHES:
            raise ValidationError(f"unknown approach {approach!r}")

    route = _split_route(store, seed, args.split)
    route_set = frozenset(route)

    models: dict = {}
    for pair in store.pairs():
        samples = _fit_samples(store, pair, exclude=route_set)
        try:
            model, _ = fit(samples, order, ridge=args.ridge)
        except UnderdeterminedError as exc:
            raise UnderdeterminedError(
                f"pair {pair} cannot be trained on the in-sample split: {exc}"
            ) from exc
        models[pair] = model

    params = PredictParams(
        k=args.k,
        weighting=args.weighting,
        mf=_mf_params(args, seed),
        defaults=_defaults_from(args),
    )
    context = predictor.PredictContext(store, frozenset(route), params)
    rows = []
    sums = {a: [] for a in approaches}
    for pair in store.pairs():
        row = [pair[0], pair[1]]
        for approach in approaches:
            try:
                report = predictor.predict(
                    pair, route, approach, store, models, params, context=context
                )
                value = report.rmse_acc
            except DataError as exc:
                print(f"note: {approach} skipped for {pair}: {exc}", file=sys.stderr)
                value = None
            row.append(_fmt(value))
            if value is not None:
                sums[approach].append(value)
        rows.append(row)
    mean_row = ["MEAN", ""]
    for approach in approaches:
        vals = sums[approach]
        mean_row.append(_fmt(sum(vals) / len(vals)) if vals else "")
    rows.append(mean_row)

    config = _config_echo(args)
    config["options"]["seed"] = seed
    config["route"] = route
    _write_csv(
        Path(args.out),
        ["driver", "vehicle"] + [f"rmse_acc_{a}" for a in approaches],
        rows,
        config,
    )
    print(f"evaluate: {len(store.pairs())} pairs x {len(approaches)} approaches -> {args.out}")
    return 0


def _cmd_dte(args) -> int:
    store = SegmentStore.load(args.store)
    models = _load_models(args.models, store.pairs())
    seed = _resolve_seed(args)
    battery = predictor.BatteryState(
        soc=args.soc, capacity_ah=args.capacity_ah, pack_voltage=args.pack_voltage
    )
    remaining = predictor.remaining_energy(battery)
    approaches = (
        list(predictor.APPROACHES) if args.approach == "all" else [args.approach]
    )
    target = (args.driver, args.vehicle)
    rows = []
    config = _config_echo(args)
    config["options"]["seed"] = seed
    for approach in approaches:
        ns = argparse.Namespace(**{**vars(args), "approach": approach})
        try:
            report = _predict_report(ns, store, models, seed)
        except DataError as exc:
            print(f"note: {approach} skipped: {exc}", file=sys.stderr)
            rows.append([approach, _fmt(remaining), "", "", "", ""])
            continue
        intensity = predictor.route_intensity(report, store)
        estimated = predictor.dte(battery, intensity)
        true_dte = delta = None
        truth_pairs = [
            (t, store.get(target, seg).distance_km)
            for seg, p, t in zip(report.route, report.predicted, report.truth)
            if p is not None and t is not None
        ]
        if truth_pairs:
            true_intensity = sum(t for t, _ in truth_pairs) / sum(d for _, d in truth_pairs)
            if true_intensity > 0:
                true_dte = predictor.dte(battery, true_intensity)
                delta = true_dte - estimated
        rows.append(
            [approach, _fmt(remaining), _fmt(intensity), _fmt(estimated),
             _fmt(true_dte), _fmt(delta)]
        )
    _write_csv(
        Path(args.out),
        ["approach", "remaining_kwh", "intensity_kwh_per_km", "dte_km",
         "dte_true_km", "delta_dte_km"],
        rows,
        config,
    )
    print(f"dte: {remaining:.2f} kWh remaining, {len(rows)} approaches -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help=f"RNG seed (falls back to ${ENV_SEED}, then 0)")
    p.add_argument("--json-errors", action="store_true",
                   help="also emit a machine-readable JSON error line on stderr")
    p.add_argument("--idle-load-kw", type=float, default=0.5,
                   help="default auxiliary load when the channel is absent")
    p.add_argument("--temp-c", type=float, default=25.0,
                   help="default outdoor temperature when unknown")


def _add_mf(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=int, default=3, help="latent rank for matrix factorization")
    p.add_argument("--lr", type=float, default=0.01, help="SGD learning rate")
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=0.02,
                   help="factor regularization strength")
    p.add_argument("--mf-epochs", type=int, default=800, help="SGD epoch cap")


def _add_approach(p: argparse.ArgumentParser, with_all: bool = False) -> None:
    choices = list(predictor.APPROACHES) + (["all"] if with_all else [])
    p.add_argument("--approach", required=True, choices=choices)
    p.add_argument("--k", type=int, default=3, help="neighbours for spm/dhm")
    p.add_argument("--weighting", choices=["mean", "inverse-distance"], default="mean")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drivesense",
        description="Personalized vehicle-energy prediction from participatory traces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fleet with planted truth")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--segments", type=int, default=40)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--order", default="2,2,2", help="planted model order r,k,m")
    p.add_argument("--misspec-v3", type=float, default=0.0,
                   help="cubic speed term added to the truth only")
    p.add_argument("--twin-of", type=int, default=None,
                   help="add a twin driver of pair index i (0-based)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="build a segment store from trace CSVs")
    p.add_argument("--traces", help="directory containing trips_manifest.json")
    p.add_argument("--trace", help="a single trace CSV")
    p.add_argument("--driver")
    p.add_argument("--vehicle")
    p.add_argument("--ambient-temp", type=float, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("fit", help="train per-pair energy models")
    p.add_argument("--store", required=True)
    p.add_argument("--order", default="2,2,2")
    p.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("aic-scan", help="rank model orders by mean AIC across pairs")
    p.add_argument("--store", required=True)
    p.add_argument("--orders", default="1..3,1..3,1..3")
    p.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_aic_scan)

    p = sub.add_parser("predict", help="predict route energy for one pair")
    p.add_argument("--store", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--driver", required=True)
    p.add_argument("--vehicle", required=True)
    p.add_argument("--route", required=True, help="comma-separated segment ids, or 'all'")
    _add_approach(p)
    _add_mf(p)
    p.add_argument("--out", required=True, help="output prefix (.json and .csv)")
    _add_common(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="compare approaches on a held-out route")
    p.add_argument("--store", required=True)
    p.add_argument("--approaches", default="self,spm,dhm,mf,avg,adj")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--weighting", choices=["mean", "inverse-distance"], default="mean")
    p.add_argument("--order", default="2,2,2")
    p.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)
    p.add_argument("--split", type=float, default=0.2, help="held-out fraction")
    _add_mf(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("dte", help="distance-to-empty from predicted route intensity")
    p.add_argument("--store", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--driver", required=True)
    p.add_argument("--vehicle", required=True)
    p.add_argument("--route", required=True)
    _add_approach(p, with_all=True)
    _add_mf(p)
    p.add_argument("--soc", type=float, required=True)
    p.add_argument("--capacity-ah", type=float, required=True)
    p.add_argument("--pack-voltage", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_dte)

    return parser


if __name__ == "__main__":
    main()
