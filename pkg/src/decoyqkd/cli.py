"""Command-line entry point.

Exit codes: 0 secure, 2 insecure (a valid answer, not a failure),
3 attack detected, 1 usage or data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict
from importlib import resources

from .bounds import key_rate_lower_one_decoy, key_yield
from .channel import ChannelModel, FitError, Protocol, fit_channel
from .core import (
    IntensitySetting,
    Label,
    ObservedStatistics,
    ProtocolParams,
    confidence_from_u_alpha,
    confidence_tail,
)
from .optimize import OptimizationRequest, optimize_intensities, sweep_distance
from .sim import AttackKind, AttackModel, SessionConfig, calibrate_stealth_pns, detect_attack, simulate_session

SCHEMA_VERSION = 1
CONFIG_ENV = "DECOYQKD_CONFIG"

EXIT_SECURE, EXIT_ERROR, EXIT_INSECURE, EXIT_ATTACK = 0, 1, 2, 3

RECORD_COLUMNS = ("label", "mean_photons", "n_sent", "n_detected", "n_error")


class DataError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def bundled_path(name: str) -> str:
    return str(resources.files("decoyqkd") / "data" / name)


# -- input ------------------------------------------------------------------

def read_records(path: str) -> dict[Label, ObservedStatistics]:
    """Parse a measurement record CSV into one ObservedStatistics per label."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        if tuple(header) != RECORD_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(RECORD_COLUMNS)}, got {','.join(header)}")
        rows = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(RECORD_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(RECORD_COLUMNS)} fields, got {len(row)}")
            try:
                label = Label.parse(row[0])
                mean = float(row[1])
                counts = [_parse_count(c) for c in row[2:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if label in seen:
                raise DataError(f"{path}:{lineno}: duplicate {label.value} row")
            seen.add(label)
            rows.append((label, mean, counts, lineno))

    out: dict[Label, ObservedStatistics] = {}
    total = sum(r[2][0] for r in rows)
    for label, mean, (n_sent, n_det, n_err), lineno in rows:
        try:
            frac = n_sent / total if total else 1.0
            out[label] = ObservedStatistics(IntensitySetting(label, mean, frac), n_sent, n_det, n_err)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def _parse_count(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"count {text!r} is not an integer") from None
        return int(value)


def _load_json_arg(value: str) -> dict:
    if value.lstrip().startswith("{"):
        return json.loads(value)
    with open(value, encoding="utf-8") as fh:
        return json.load(fh)


def _channel_from_json(value: str) -> ChannelModel:
    data = _load_json_arg(value)
    if "channel" in data and isinstance(data["channel"], dict):
        data = data["channel"]
    return ChannelModel.from_dict(data)


def _params(args) -> ProtocolParams:
    return ProtocolParams(q=args.q, f_ec=args.f_ec, u_alpha=args.u_alpha)


# -- output -----------------------------------------------------------------

def _clean(obj):
    """Replace non-finite floats (not representable in JSON) with None."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dump_json(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _stats_dict(s: ObservedStatistics) -> dict:
    return {
        "label": s.intensity.label.value,
        "mean_photons": s.mean_photons,
        "send_fraction": s.intensity.send_fraction,
        "n_sent": s.n_sent,
        "n_detected": s.n_detected,
        "n_error": s.n_error,
        "gain": s.gain,
        "qber": s.qber,
    }


def analysis_report(signal, decoy, params: ProtocolParams, n_total: int, session_seconds: float | None) -> dict:
    bounds = key_rate_lower_one_decoy(signal, decoy, params)
    warnings = []
    if not bounds.secure:
        warnings.append("insecure: the one-decoy lower bound on the key rate is not positive")
    if bounds.q1_lower <= 0:
        warnings.append("single-photon gain lower bound is not positive; e1_upper undefined")
    report = {
        "schema_version": SCHEMA_VERSION,
        "inputs": {
            "signal": _stats_dict(signal),
            "decoy": _stats_dict(decoy),
            "params": asdict(params),
            "n_total": n_total,
            "session_seconds": session_seconds,
        },
        "bounds": asdict(bounds),
        "key_yield": None,
        "confidence_level": confidence_from_u_alpha(params.u_alpha),
        "confidence_tail": confidence_tail(params.u_alpha),
        "warnings": warnings,
    }
    if session_seconds is not None:
        report["key_yield"] = asdict(key_yield(bounds, n_total, session_seconds))
    else:
        report["key_yield"] = {
            "rate_per_pulse": bounds.rate_lower,
            "key_length_bits": bounds.rate_lower * n_total,
            "rate_per_second": None,
        }
    return report


def _write_csv(path: str | None, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    text = buf.getvalue()
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


# -- commands ---------------------------------------------------------------

def cmd_analyze(args) -> int:
    records = read_records(args.input)
    if Label.SIGNAL not in records or Label.DECOY not in records or len(records) != 2:
        raise DataError(f"{args.input}: exactly one signal row and one decoy row are required")
    signal, decoy = records[Label.SIGNAL], records[Label.DECOY]
    if not 0 < decoy.mean_photons < signal.mean_photons:
        raise DataError(f"{args.input}: need 0 < nu < mu (nu={decoy.mean_photons}, mu={signal.mean_photons})")
    if decoy.n_detected == 0:
        raise DataError(f"{args.input}: decoy row has zero detections")
    n_total = args.n_total or signal.n_sent + decoy.n_sent
    report = analysis_report(signal, decoy, _params(args), n_total, args.session_seconds)
    report = {"schema_version": SCHEMA_VERSION, "command": "analyze", **report}
    sys.stdout.write(dump_json(report))
    return EXIT_SECURE if report["bounds"]["secure"] else EXIT_INSECURE


def cmd_fit(args) -> int:
    records = read_records(args.input)
    if Label.SIGNAL not in records or Label.DECOY not in records:
        raise DataError(f"{args.input}: a signal row and a decoy row are required")
    fit = fit_channel(records[Label.SIGNAL], records[Label.DECOY], args.distance, args.alpha)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "channel": fit.channel.to_dict(),
        "eta_total": fit.eta_total,
        "decoy_qber_predicted": fit.decoy_qber_predicted,
        "decoy_qber_residual": fit.decoy_qber_residual,
    }
    sys.stdout.write(dump_json(report))
    return EXIT_SECURE


def session_from_config(data: dict, seed: int | None) -> tuple[SessionConfig, ProtocolParams, dict]:
    known = {"n_pulses", "intensities", "channel", "attack", "rng_seed", "basis_match_prob", "params", "session_seconds"}
    unknown = set(data) - known
    if unknown:
        raise DataError(f"unknown config fields: {sorted(unknown)}")
    try:
        n_pulses = int(data["n_pulses"])
        intensities = tuple(
            IntensitySetting(Label.parse(d["label"]), float(d["mean_photons"]), float(d["send_fraction"]))
            for d in data["intensities"]
        )
        channel = ChannelModel.from_dict(data["channel"])
    except KeyError as exc:
        raise DataError(f"config is missing field {exc}") from None
    params = ProtocolParams(**data.get("params", {}))

    attack = None
    attack_cfg = data.get("attack")
    if attack_cfg:
        attack_cfg = dict(attack_cfg)
        calibrate = attack_cfg.pop("calibrate", None)
        kind = AttackKind(attack_cfg.get("kind", "pns"))
        if calibrate == "stealth" and kind is AttackKind.PNS:
            signal = next((s for s in intensities if s.label is Label.SIGNAL), None)
            if signal is None:
                raise DataError("stealth calibration needs a signal intensity")
            attack = calibrate_stealth_pns(channel, signal.mean_photons, bool(attack_cfg.get("lossless_forward", True)))
        elif calibrate is not None:
            raise DataError(f"unknown attack calibration {calibrate!r}")
        else:
            attack = AttackModel(**attack_cfg)
        if not attack.active:
            attack = None

    cfg = SessionConfig(
        n_pulses=n_pulses,
        intensities=intensities,
        channel=channel,
        attack=attack,
        rng_seed=int(seed if seed is not None else data.get("rng_seed", 0)),
        basis_match_prob=float(data.get("basis_match_prob", 0.5)),
    )
    return cfg, params, data


def cmd_simulate(args) -> int:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise DataError(f"no config given (use --config or set {CONFIG_ENV})")
    cfg, params, raw = session_from_config(_load_json_arg(path), args.seed)
    tally = simulate_session(cfg, n_workers=args.workers)

    _write_csv(
        args.out,
        ("label", "mean_photons", "n_sent", "n_detected", "n_error", "gain", "qber", "n_sifted", "n_sifted_error"),
        [
            (s.intensity.label.value, s.mean_photons, s.n_sent, s.n_detected, s.n_error, s.gain, s.qber, ls, le)
            for s, ls, le in zip(tally.stats, tally.sifted_lengths, tally.sifted_errors)
        ],
    )

    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "seed": cfg.rng_seed,
        "attack": None if cfg.attack is None else {**asdict(cfg.attack), "kind": cfg.attack.kind.value},
        "tally": {
            "intensities": [_stats_dict(s) for s in tally.stats],
            "double_click_count": tally.double_click_count,
            "double_click_errors": tally.double_click_errors,
            "sifted_lengths": list(tally.sifted_lengths),
            "sifted_errors": list(tally.sifted_errors),
        },
        "analysis": None,
        "verdict": None,
    }
    code = EXIT_SECURE
    labels = {s.intensity.label for s in tally.stats}
    if {Label.SIGNAL, Label.DECOY} <= labels:
        sig, dec = tally.by_label(Label.SIGNAL), tally.by_label(Label.DECOY)
        if dec.n_detected == 0:
            report["analysis"] = {"secure": False, "reason": "no decoy detections"}
            code = EXIT_INSECURE
        else:
            analysis = analysis_report(sig, dec, params, cfg.n_pulses, raw.get("session_seconds"))
            report["analysis"] = analysis
            code = EXIT_SECURE if analysis["bounds"]["secure"] else EXIT_INSECURE
    if cfg.attack is not None or args.check_attack:
        verdict = detect_attack(tally, cfg.channel, args.detect_u_alpha)
        report["verdict"] = {"label": verdict.label, "u_alpha": args.detect_u_alpha,
                             "z_gain": verdict.z_gain, "z_qber": verdict.z_qber}
        if verdict.anomalous:
            code = EXIT_ATTACK
    sys.stdout.write(dump_json(report))
    return code


def _request(args, channel) -> OptimizationRequest:
    return OptimizationRequest(
        channel=channel,
        n_total=args.n_total,
        params=_params(args),
        mu_range=tuple(args.mu_range),
        nu_range=tuple(args.nu_range),
        fraction_range=tuple(args.fraction_range),
        grid=tuple(args.grid),
    )


def cmd_optimize(args) -> int:
    req = _request(args, _channel_from_json(args.channel))
    res = optimize_intensities(req)
    text = _write_csv(args.out, ("mu", "nu", "fraction", "rate", "rate_lower"), [tuple(res)])
    if not args.out:
        sys.stdout.write(text)
    return EXIT_SECURE if res.rate > 0 else EXIT_INSECURE


def cmd_sweep(args) -> int:
    req = _request(args, _channel_from_json(args.channel))
    protocol = Protocol(args.protocol)
    if args.reoptimize:
        point = None
    elif protocol is Protocol.ONE_DECOY:
        point = (args.mu, args.nu, args.fraction)
    else:
        point = (args.mu,)
    rows = sweep_distance(req, args.d_min, args.d_max, args.step, protocol, point)
    text = _write_csv(args.out, ("distance_km", "rate_per_pulse"), rows)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_SECURE


# -- parser -----------------------------------------------------------------

def _add_params(p):
    d = ProtocolParams()
    p.add_argument("--q", type=float, default=d.q, help="protocol duty factor (default %(default)s)")
    p.add_argument("--f-ec", type=float, default=d.f_ec, help="error correction inefficiency (default %(default)s)")
    p.add_argument("--u-alpha", type=float, default=d.u_alpha, help="standard deviations of the fluctuation band (default %(default)s)")


def _add_search(p):
    d = OptimizationRequest(ChannelModel(), 1)
    p.add_argument("--channel", required=True, help="channel JSON file or inline JSON object")
    p.add_argument("--n-total", type=int, default=105_000_000, help="total pulses sent (default %(default)s)")
    p.add_argument("--mu-range", type=float, nargs=2, default=d.mu_range, metavar=("LO", "HI"))
    p.add_argument("--nu-range", type=float, nargs=2, default=d.nu_range, metavar=("LO", "HI"))
    p.add_argument("--fraction-range", type=float, nargs=2, default=d.fraction_range, metavar=("LO", "HI"))
    p.add_argument("--grid", type=int, nargs=3, default=d.grid, metavar=("NMU", "NNU", "NFRAC"))
    _add_params(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decoyqkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="one-decoy key-rate bound from measured counts")
    p.add_argument("input", help="measurement record CSV (label,mean_photons,n_sent,n_detected,n_error)")
    p.add_argument("--session-seconds", type=float, default=None, help="session duration, for bits per second")
    p.add_argument("--n-total", type=int, default=None, help="total pulses (default: sum of n_sent)")
    _add_params(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="fit the channel model to measured counts")
    p.add_argument("input")
    p.add_argument("--distance", type=float, required=True, help="fiber length in km")
    p.add_argument("--alpha", type=float, default=0.21, help="fiber loss in dB/km (default %(default)s)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="Monte Carlo session followed by analysis")
    p.add_argument("--config", default=None, help=f"session JSON (default: ${CONFIG_ENV})")
    p.add_argument("--seed", type=int, default=None, help="overrides rng_seed from the config")
    p.add_argument("--out", default=None, help="write the per-intensity tally CSV here")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--detect-u-alpha", type=float, default=5.0, help="z threshold for attack detection (default %(default)s)")
    p.add_argument("--check-attack", action="store_true", help="run attack detection even without a configured attack")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="best (mu, nu, decoy fraction) for a channel")
    _add_search(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", help="key rate versus distance")
    _add_search(p)
    p.add_argument("--protocol", choices=[x.value for x in Protocol], default=Protocol.ONE_DECOY.value)
    p.add_argument("--d-min", type=float, default=0.0)
    p.add_argument("--d-max", type=float, default=60.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=0.80)
    p.add_argument("--nu", type=float, default=0.12)
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--reoptimize", action="store_true", help="re-optimize source parameters at every distance")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FitError, ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"decoyqkd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
