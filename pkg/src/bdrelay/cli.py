"""Command-line front end: calibrate, simulate, sweep, and compare.

Configuration lives in a small TOML file with flat sections; a few
flags override single values.  Powers are given in dB and converted to
linear exactly once, at parse time.  All outputs are comma-separated
tables with a '#'-prefixed metadata header, deterministic byte for byte
so identical configs produce identical files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from .benchmarks import PRESETS, normalize_subset
from .buffers_delay import DelaySizingError, size_buffers_for_delay
from .channel import FadingConfig
from .fixed_power_protocol import FixedWeights, NodePowers, calibrate_fixed
from .joint_power_protocol import CalibrationError, JointWeights, calibrate_joint
from .region_builder import chebyshev_grid, sweep_region
from .simulator import ProtocolHandle, run_sim

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration; powers already linear."""

    channel: FadingConfig
    power_kind: str
    power_budget: float | None
    node_powers: NodePowers | None
    eta: float
    eta_grid: tuple
    n_slots: int
    sample_size: int
    subset: tuple
    delay_target: float | None
    raw: dict


def _get(section, key, kind, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing required config field {key!r}")
        return default
    value = section[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"config field {key!r} must be {kind.__name__}, got {value!r}")
    return value


def parse_eta_spec(spec) -> tuple:
    """A weight grid: single value, comma list, or chebyshevN."""
    if isinstance(spec, (int, float)):
        return (float(spec),)
    text = str(spec).strip()
    if text.startswith("chebyshev"):
        tail = text[len("chebyshev"):].lstrip(":")
        n = int(tail) if tail else 21
        return tuple(chebyshev_grid(n))
    try:
        values = tuple(float(tok) for tok in text.split(","))
    except ValueError as err:
        raise ConfigError(f"cannot parse eta grid {spec!r}") from err
    return values


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Read a TOML config and apply flag overrides."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path!r}: {err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config {path!r} is not valid TOML: {err}") from err

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    channel = raw.get("channel", {})
    power = raw.get("power", {})
    run = raw.get("run", {})
    for name, section in (("channel", channel), ("power", power), ("run", run)):
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a table")

    omega1 = _get(channel, "omega1", float, required=True)
    omega2 = _get(channel, "omega2", float, required=True)
    seed = int(overrides.get("seed", _get(channel, "seed", int, default=1)))
    try:
        fading = FadingConfig(omega1, omega2, seed=seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err

    kind = _get(power, "kind", str, required=True)
    budget = None
    node_powers = None
    if kind == "joint":
        budget = db_to_linear(_get(power, "total_db", float, required=True))
    elif kind == "fixed":
        try:
            node_powers = NodePowers(
                p1=db_to_linear(_get(power, "p1_db", float, required=True)),
                p2=db_to_linear(_get(power, "p2_db", float, required=True)),
                pr=db_to_linear(_get(power, "pr_db", float, required=True)),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err
    else:
        raise ConfigError(f"power.kind must be 'joint' or 'fixed', got {kind!r}")

    eta_spec = overrides.get("eta", run.get("eta"))
    if eta_spec is None:
        eta_grid = ()  # commands fall back to their own default
    else:
        try:
            eta_grid = parse_eta_spec(eta_spec)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if not eta_grid or not all(0.0 < e < 1.0 for e in eta_grid):
            raise ConfigError("every eta must lie strictly inside (0, 1)")

    n_slots = int(overrides.get("slots", _get(run, "slots", int, default=1_000_000)))
    if n_slots < 1:
        raise ConfigError("run.slots must be positive")
    sample_size = _get(run, "sample_size", int, default=100_000)
    if sample_size < 1_000:
        raise ConfigError("run.sample_size below 1000 cannot balance flows")

    subset_spec = overrides.get("subset", run.get("subset", "all"))
    if isinstance(subset_spec, str) and subset_spec not in PRESETS:
        subset_spec = [int(tok) for tok in subset_spec.split(",")] if "," in subset_spec else subset_spec
    try:
        subset = normalize_subset(subset_spec)
    except ValueError as err:
        raise ConfigError(str(err)) from err

    delay = overrides.get("delay", run.get("delay"))
    if delay is not None:
        delay = float(delay)
        if not delay > 1.0:
            raise ConfigError("run.delay target must exceed one slot")

    raw_with_overrides = {"config": raw, "overrides": overrides}
    return RunConfig(
        channel=fading,
        power_kind=kind,
        power_budget=budget,
        node_powers=node_powers,
        eta=eta_grid[0] if eta_grid else 0.5,
        eta_grid=eta_grid,
        n_slots=n_slots,
        sample_size=sample_size,
        subset=subset,
        delay_target=delay,
        raw=raw_with_overrides,
    )


def _canonical_hash(doc: dict) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def config_hash(cfg: RunConfig) -> str:
    return _canonical_hash(cfg.raw)


def weights_document(cfg: RunConfig, eta: float, weights) -> dict:
    """JSON-serializable calibration record, inputs included."""
    doc = {
        "eta": eta,
        "channel": {
            "omega1": cfg.channel.omega1,
            "omega2": cfg.channel.omega2,
            "seed": cfg.channel.seed,
        },
        "sample_size": cfg.sample_size,
    }
    if isinstance(weights, JointWeights):
        doc["kind"] = "joint"
        doc["power_budget"] = cfg.power_budget
        doc["weights"] = {
            "mu1": weights.mu1,
            "mu2": weights.mu2,
            "gamma": weights.gamma,
            "p1": weights.p1,
            "p2": weights.p2,
            "p3": weights.p3,
            "p4": weights.p4,
            "region": weights.region,
            "residuals": list(weights.residuals),
        }
    else:
        doc["kind"] = "fixed"
        doc["node_powers"] = {
            "p1": cfg.node_powers.p1,
            "p2": cfg.node_powers.p2,
            "pr": cfg.node_powers.pr,
        }
        doc["weights"] = {
            "mu1": weights.mu1,
            "mu2": weights.mu2,
            "p1": weights.p1,
            "p2": weights.p2,
            "p3": weights.p3,
            "p4": weights.p4,
            "p5": weights.p5,
            "p6": weights.p6,
            "region": weights.region,
            "case_tag": weights.case_tag,
            "residuals": list(weights.residuals),
        }
    return doc


def weights_from_document(doc: dict):
    """Rebuild (eta, FadingConfig, weights, powers_or_budget) from a document."""
    w = doc["weights"]
    ch = doc["channel"]
    fading = FadingConfig(ch["omega1"], ch["omega2"], seed=ch["seed"])
    if doc["kind"] == "joint":
        weights = JointWeights(
            mu1=w["mu1"], mu2=w["mu2"], gamma=w["gamma"],
            p1=w["p1"], p2=w["p2"], p3=w["p3"], p4=w["p4"],
            region=w["region"], residuals=tuple(w["residuals"]),
        )
        return doc["eta"], fading, weights, doc["power_budget"]
    weights = FixedWeights(
        mu1=w["mu1"], mu2=w["mu2"],
        p1=w["p1"], p2=w["p2"], p3=w["p3"], p4=w["p4"], p5=w["p5"], p6=w["p6"],
        region=w["region"], case_tag=w["case_tag"], residuals=tuple(w["residuals"]),
    )
    np_ = doc["node_powers"]
    return doc["eta"], fading, weights, NodePowers(np_["p1"], np_["p2"], np_["pr"])


def _calibrate(cfg: RunConfig, eta: float):
    if cfg.power_kind == "joint":
        return calibrate_joint(cfg.channel, eta, cfg.power_budget, sample_size=cfg.sample_size)
    return calibrate_fixed(cfg.channel, eta, cfg.node_powers, sample_size=cfg.sample_size)


def _ams_handle(cfg: RunConfig, eta: float, weights) -> ProtocolHandle:
    kind = "JointAMS" if cfg.power_kind == "joint" else "FixedAMS"
    return ProtocolHandle(kind=kind, eta=eta, weights=weights, powers=cfg.node_powers)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _emit(lines, out_path):
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _header(cfg: RunConfig, command: str) -> list:
    return [
        f"# tool: bdrelay {__version__} {command}",
        f"# config-hash: {config_hash(cfg)}",
    ]


def cmd_calibrate(cfg: RunConfig, out_path) -> int:
    weights = _calibrate(cfg, cfg.eta)
    doc = weights_document(cfg, cfg.eta, weights)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    tag = getattr(weights, "case_tag", None)
    residuals = ", ".join(f"{r:.2e}" for r in weights.residuals)
    label = weights.region if tag is None else f"{weights.region}/{tag}"
    print(f"calibrated {doc['kind']} eta={cfg.eta:g}: {label}, residuals [{residuals}]", file=sys.stderr)
    return EXIT_OK


REGION_COLUMNS = (
    "eta,r12,r21,mode_freq_1,mode_freq_2,mode_freq_3,mode_freq_4,mode_freq_5,"
    "mode_freq_6,pbar_total,delay1,delay2,residual_c1,residual_c2,seed,calibration_hash"
)


def cmd_simulate(cfg: RunConfig, out_path, weights_path=None) -> int:
    channel = cfg.channel
    if weights_path:
        with open(weights_path) as fh:
            doc = json.load(fh)
        eta, fading, weights, powers_or_budget = weights_from_document(doc)
        if (fading.omega1, fading.omega2) != (channel.omega1, channel.omega2):
            raise ConfigError("weights document was calibrated for a different channel")
        if doc["kind"] == "joint":
            handle = ProtocolHandle(kind="JointAMS", eta=eta, weights=weights)
        else:
            handle = ProtocolHandle(kind="FixedAMS", eta=eta, weights=weights, powers=powers_or_budget)
        calib = _canonical_hash(doc)
    else:
        eta = cfg.eta
        weights = _calibrate(cfg, eta)
        handle = _ams_handle(cfg, eta, weights)
        calib = _canonical_hash(weights_document(cfg, eta, weights))

    if cfg.delay_target is not None:
        q1max, q2max = size_buffers_for_delay(handle, cfg.delay_target, channel)
        handle = ProtocolHandle(
            kind=handle.kind + "-DelayConstrained", eta=handle.eta,
            weights=handle.weights, powers=handle.powers, q1max=q1max, q2max=q2max,
        )

    stats = run_sim(handle, channel, cfg.n_slots, seed=channel.seed)
    lines = _header(cfg, "simulate")
    lines.append(
        "kind,eta,n_slots,r12,r21,r1r,r2r,rr1,rr2,"
        "mode_freq_1,mode_freq_2,mode_freq_3,mode_freq_4,mode_freq_5,mode_freq_6,"
        "pbar1,pbar2,pbarr,pbar_total,mean_q1,mean_q2,delay1,delay2,seed,calibration_hash"
    )
    cells = [
        handle.kind, _fmt(eta), _fmt(stats.n_slots),
        _fmt(stats.r12), _fmt(stats.r21), _fmt(stats.r1r), _fmt(stats.r2r),
        _fmt(stats.rr1), _fmt(stats.rr2),
        *(_fmt(f) for f in stats.mode_freq),
        _fmt(stats.pbar1), _fmt(stats.pbar2), _fmt(stats.pbarr),
        _fmt(stats.pbar1 + stats.pbar2 + stats.pbarr),
        _fmt(stats.mean_q1), _fmt(stats.mean_q2),
        _fmt(stats.delay1), _fmt(stats.delay2),
        _fmt(channel.seed), calib,
    ]
    lines.append(",".join(cells))
    _emit(lines, out_path)
    return EXIT_OK


def cmd_region(cfg: RunConfig, out_path) -> int:
    grid = cfg.eta_grid or chebyshev_grid(21)
    hashes = {}

    def factory(eta):
        weights = _calibrate(cfg, eta)
        hashes[eta] = (_canonical_hash(weights_document(cfg, eta, weights)), weights)
        return _ams_handle(cfg, eta, weights)

    sweep = sweep_region(factory, grid, cfg.channel, n_slots=cfg.n_slots, seed=cfg.channel.seed)
    lines = _header(cfg, "region")
    for eta, message in sweep.failures:
        lines.append(f"# failed eta={eta!r}: {message}")
    lines.append(REGION_COLUMNS)
    for point in sweep.points:
        calib, weights = hashes[point.eta]
        stats = point.meta["stats"]
        res = weights.residuals
        cells = [
            _fmt(point.eta), _fmt(point.r12), _fmt(point.r21),
            *(_fmt(f) for f in stats.mode_freq),
            _fmt(stats.pbar1 + stats.pbar2 + stats.pbarr),
            _fmt(stats.delay1), _fmt(stats.delay2),
            _fmt(res[0]), _fmt(res[1]),
            _fmt(cfg.channel.seed), calib,
        ]
        lines.append(",".join(cells))
    _emit(lines, out_path)
    return EXIT_OK if not sweep.failures else EXIT_CALIBRATION


def cmd_benchmark(cfg: RunConfig, out_path) -> int:
    if cfg.node_powers is None:
        raise ConfigError("benchmark needs power.kind = 'fixed' with per-node powers")
    grid = cfg.eta_grid or chebyshev_grid(21)
    chash = config_hash(cfg)
    lines = _header(cfg, "benchmark")
    lines.append(
        "subset,eta,r12,r21,mode_freq_1,mode_freq_2,mode_freq_3,mode_freq_4,"
        "mode_freq_5,mode_freq_6,pbar_total,seed,calibration_hash"
    )
    subset = cfg.subset
    for eta in grid:
        handle = ProtocolHandle(kind="ConvLongTermLP", eta=eta, powers=cfg.node_powers, subset=subset)
        stats = run_sim(handle, cfg.channel, cfg.n_slots, seed=cfg.channel.seed)
        cells = [
            "+".join(str(m) for m in subset), _fmt(eta),
            _fmt(stats.r12), _fmt(stats.r21),
            *(_fmt(f) for f in stats.mode_freq),
            _fmt(stats.pbar1 + stats.pbar2 + stats.pbarr),
            _fmt(cfg.channel.seed), chash,
        ]
        lines.append(",".join(cells))
    _emit(lines, out_path)
    return EXIT_OK


def cmd_delay_sweep(cfg: RunConfig, out_path, targets) -> int:
    weights = _calibrate(cfg, cfg.eta)
    handle = _ams_handle(cfg, cfg.eta, weights)
    calib = _canonical_hash(weights_document(cfg, cfg.eta, weights))
    free = run_sim(handle, cfg.channel, cfg.n_slots, seed=cfg.channel.seed)
    free_sum = free.r12 + free.r21
    lines = _header(cfg, "delay-sweep")
    lines.append(
        "target_delay,q1max,q2max,r12,r21,sum_rate,sum_rate_ratio,delay1,delay2,seed,calibration_hash"
    )
    for target in targets:
        q1max, q2max = size_buffers_for_delay(handle, target, cfg.channel)
        bounded = ProtocolHandle(
            kind=handle.kind + "-DelayConstrained", eta=cfg.eta,
            weights=weights, powers=cfg.node_powers, q1max=q1max, q2max=q2max,
        )
        stats = run_sim(bounded, cfg.channel, cfg.n_slots, seed=cfg.channel.seed)
        total = stats.r12 + stats.r21
        cells = [
            _fmt(target), _fmt(q1max), _fmt(q2max),
            _fmt(stats.r12), _fmt(stats.r21), _fmt(total), _fmt(total / free_sum),
            _fmt(stats.delay1), _fmt(stats.delay2),
            _fmt(cfg.channel.seed), calib,
        ]
        lines.append(",".join(cells))
    _emit(lines, out_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdrelay",
        description="Buffer-aided two-way relay: calibration, simulation, regions, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("calibrate", "simulate", "region", "benchmark", "delay-sweep"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="TOML run configuration")
        cmd.add_argument("--out", default=None, help="output path (default stdout)")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--slots", type=int, default=None)
        cmd.add_argument("--eta", default=None, help="weight, comma list, or chebyshevN")
        cmd.add_argument("--subset", default=None, help="mode preset or comma list")
        cmd.add_argument("--delay", default=None, help="average delay target(s) in slots")
        if name == "simulate":
            cmd.add_argument("--weights", default=None, help="calibrated weights JSON to reuse")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "slots": args.slots,
        "eta": args.eta,
        "subset": args.subset,
        "delay": None,
    }
    delay_list = None
    if args.delay is not None:
        try:
            delay_list = [float(tok) for tok in str(args.delay).split(",")]
        except ValueError:
            print(f"error: cannot parse --delay {args.delay!r}", file=sys.stderr)
            return EXIT_CONFIG
        if args.command != "delay-sweep":
            overrides["delay"] = delay_list[0]
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out, weights_path=args.weights)
        if args.command == "region":
            return cmd_region(cfg, args.out)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, args.out)
        targets = delay_list or ([cfg.delay_target] if cfg.delay_target else None)
        if not targets:
            print("error: delay-sweep needs --delay or run.delay", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_delay_sweep(cfg, args.out, targets)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationError, DelaySizingError) as err:
        print(f"calibration failed: {err}", file=sys.stderr)
        report = getattr(err, "report", None)
        if report:
            print(f"residual report: {report}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
