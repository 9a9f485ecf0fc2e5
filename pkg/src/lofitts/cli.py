"""``lofitts`` command line.

Every subcommand resolves its parameters as built-in defaults, then an
optional ``--config`` JSON file, then explicit flags, and writes that
resolved config next to its outputs as ``<output>.config.json``.  Relative
output paths are placed under ``$LOFITTS_OUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from scipy.io import wavfile

from . import bfp, cost, dataflow, repro
from .assignment import AssignmentError, PrecisionAssignment
from .fidelity import FidelityError, FidelityLevel, Tile, fidelity_matmul, lofi_error_bound, reference_matmul
from .metrics import MetricError
from .pipeline import PipelineConfig, PipelineError, init_pipeline, run_e2e
from .sensitivity import SearchError, search

OUT_DIR_ENV = "LOFITTS_OUT_DIR"


class ConfigError(Exception):
    """Invalid user configuration; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"invalid {field}: {message}")
        self.field = field


class CheckFailed(Exception):
    pass


# --- output plumbing -----------------------------------------------------

def out_path(p: str | Path) -> Path:
    p = Path(p)
    base = os.environ.get(OUT_DIR_ENV)
    return p if p.is_absolute() or not base else Path(base) / p


def write_atomic(path: Path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_with_config(path: Path, data: bytes | str, resolved: dict) -> None:
    write_atomic(path, data)
    write_atomic(path.with_name(path.name + ".config.json"), _dumps(resolved))


def _read_json(field: str, path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(field, f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(field, f"{path} is not valid JSON ({exc})") from None


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _read_json("config", args.config)
        if not isinstance(file_cfg, dict):
            raise ConfigError("config", "top level must be a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown setting in config file")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(k, "is required")


def _positive(cfg: dict, key: str, kind=float) -> Any:
    try:
        v = kind(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {cfg[key]!r}") from None
    if not v > 0:
        raise ConfigError(key, f"must be positive, got {v}")
    return v


# --- subcommands ---------------------------------------------------------

def cmd_bfp_roundtrip(args) -> None:
    cfg = resolve(args, {"input": None, "preset": "bfp8", "out": "bfp_roundtrip.json", "dump": None})
    _require(cfg, "input")
    try:
        config = bfp.BfpConfig.preset(cfg["preset"])
    except bfp.BfpError as exc:
        raise ConfigError("preset", str(exc)) from None
    try:
        x = np.loadtxt(cfg["input"], delimiter=",", ndmin=1, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ConfigError("input", str(exc)) from None
    tensor = bfp.quantize_tensor(x, config)
    y = bfp.dequantize_tensor(tensor)
    err = np.abs(x - y)
    peak = float(np.abs(x).max()) if x.size else 0.0
    report = {
        "shape": list(x.shape),
        "blocks": tensor.n_blocks,
        "pad_count": tensor.pad_count,
        "storage_bits": bfp.storage_bits(config, x.size),
        "bits_per_value": bfp.storage_bits(config, x.size) / x.size if x.size else 0.0,
        "max_abs_err": float(err.max()) if x.size else 0.0,
        "max_rel_err": float(err.max() / peak) if peak else 0.0,
        "rms_err": float(np.sqrt(np.mean(err**2))) if x.size else 0.0,
    }
    if cfg["dump"]:
        write_atomic(out_path(cfg["dump"]), bfp.encode(tensor))
    write_with_config(out_path(cfg["out"]), _dumps(report), cfg)


def cmd_matmul(args) -> None:
    cfg = resolve(args, {"fidelity": "LoFi", "seed": 0, "pairs": 16, "chunk_bits": 2, "out": "matmul.csv"})
    try:
        level = FidelityLevel.parse(cfg["fidelity"])
    except FidelityError as exc:
        raise ConfigError("fidelity", str(exc)) from None
    pairs = _positive(cfg, "pairs", int)
    chunk = _positive(cfg, "chunk_bits", int)
    rng = np.random.default_rng(int(cfg["seed"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "fidelity", "max_abs_err", "max_rel_err", "max_bound", "bound_violations"])
    for i in range(pairs):
        a = Tile(bfp.round_scalar(rng.standard_normal((32, 32)), "BF16"), "BF16")
        b = Tile(bfp.round_scalar(rng.standard_normal((32, 32)), "BF16"), "BF16")
        ref = reference_matmul(a.elements, b.elements)
        got = fidelity_matmul(a.elements, b.elements, level, chunk)
        err = np.abs(got - ref)
        bound = lofi_error_bound(a.elements, b.elements, level, chunk)
        w.writerow([i, level.name, repr(float(err.max())), repr(float(err.max() / np.abs(ref).max())),
                    repr(float(bound.max())), int(np.count_nonzero(err > bound))])
    write_with_config(out_path(cfg["out"]), buf.getvalue(), cfg)


def _pipeline_config(cfg: dict) -> PipelineConfig:
    fields = {k: cfg[k] for k in ("seed",) if cfg.get(k) is not None}
    fields.update(cfg.get("pipeline") or {})
    try:
        return PipelineConfig.from_dict(fields)
    except (PipelineError, TypeError) as exc:
        raise ConfigError("pipeline", str(exc)) from None


def _load_assignment(field: str, path: str) -> PrecisionAssignment:
    try:
        return PrecisionAssignment.from_dict(_read_json(field, path))
    except (AssignmentError, FidelityError, KeyError, AttributeError, TypeError, ValueError) as exc:
        raise ConfigError(field, str(exc)) from None


def cmd_pipeline_run(args) -> None:
    cfg = resolve(args, {"seed": 0, "assignment": None, "wav": "pipeline.wav", "csv": None, "pipeline": None})
    pipe = init_pipeline(_pipeline_config(cfg))
    if cfg["assignment"]:
        assignment = _load_assignment("assignment", cfg["assignment"])
        try:
            assignment.check_covers(pipe.layer_ids)
        except AssignmentError as exc:
            raise ConfigError("assignment", str(exc)) from None
    else:
        assignment = pipe.baseline_assignment()
    wave = run_e2e(pipe, assignment)
    buf = io.BytesIO()
    wavfile.write(buf, wave.sample_rate, wave.samples.astype(np.float32))
    path = out_path(cfg["wav"])
    meta = {"samples": int(wave.samples.size), "sample_rate": wave.sample_rate,
            "checksum_f64": wave.checksum(), "wav_sha256": hashlib.sha256(buf.getvalue()).hexdigest(),
            "coverage_bfp8": assignment.coverage_bfp8(), "coverage_lofi": assignment.coverage_lofi()}
    write_with_config(path, buf.getvalue(), cfg | {"pipeline_resolved": json.loads(pipe.config.to_json())})
    write_atomic(path.with_name(path.name + ".json"), _dumps(meta))
    if cfg["csv"]:
        write_atomic(out_path(cfg["csv"]), "sample\n" + "".join(f"{v!r}\n" for v in wave.samples.tolist()))


def cmd_sensitivity_search(args) -> None:
    cfg = resolve(args, {"seed": 0, "budget_db": 1.0, "out": "sensitivity.json", "pipeline": None})
    budget = _positive(cfg, "budget_db")
    pipe = init_pipeline(_pipeline_config(cfg))
    report = search(pipe, budget)
    path = out_path(cfg["out"])
    write_with_config(path, report.to_json() + "\n", cfg)
    write_atomic(path.with_name(path.stem + ".assignment.json"), report.assignment.to_json() + "\n")


def cmd_sim_run(args) -> None:
    cfg = resolve(args, {"graph": None, "grid": None, "assignment": None, "delivery": None,
                         "trace": None, "out": "sim_report.json"})
    _require(cfg, "graph", "assignment")
    try:
        graph = [dataflow.LayerSpec.from_dict(d) for d in _read_json("graph", cfg["graph"])["layers"]]
    except (dataflow.SimError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("graph", str(exc)) from None
    try:
        grid = dataflow.GridConfig.from_dict(_read_json("grid", cfg["grid"])) if cfg["grid"] else dataflow.GridConfig()
    except (dataflow.SimError, TypeError) as exc:
        raise ConfigError("grid", str(exc)) from None
    assignment = _load_assignment("assignment", cfg["assignment"])
    try:
        delivery = dataflow.Delivery.parse(cfg["delivery"]) if cfg["delivery"] else None
    except dataflow.SimError as exc:
        raise ConfigError("delivery", str(exc)) from None
    try:
        report = dataflow.simulate(graph, grid, assignment, delivery, trace=bool(cfg["trace"]))
    except dataflow.SimError as exc:
        raise ConfigError("graph", str(exc)) from None
    write_with_config(out_path(cfg["out"]), report.to_json() + "\n", cfg | {"grid_resolved": grid.to_dict()})
    if cfg["trace"]:
        write_atomic(out_path(cfg["trace"]), report.events_csv())


def cmd_cost_table(args) -> None:
    cfg = resolve(args, {"devices": None, "baseline": "L40S", "out": "cost_table.csv"})
    devices = list(cost.DEVICES)
    if cfg["devices"]:
        try:
            devices = cost.load_devices(Path(cfg["devices"]).read_text())
        except (OSError, ValueError, KeyError, cost.CostError) as exc:
            raise ConfigError("devices", str(exc)) from None
    base = next((d for d in devices if d.name == cfg["baseline"]), None)
    if base is None:
        raise ConfigError("baseline", f"no device named {cfg['baseline']!r}")
    text = cost.cost_table_csv(devices, base)
    _emit(cfg["out"], text, cfg)


def cmd_cost_fleet(args) -> None:
    cfg = resolve(args, {"scenario": None, "rounding": None, "out": "fleet.csv"})
    data = _read_json("scenario", cfg["scenario"]) if cfg["scenario"] else {}
    if cfg["rounding"]:
        data["rounding"] = cfg["rounding"]
    try:
        scenario = cost.CostScenario.from_dict(data)
    except cost.CostError as exc:
        raise ConfigError("scenario", str(exc)) from None
    cfg["scenario_resolved"] = scenario.to_dict()
    _emit(cfg["out"], cost.fleet_csv(scenario), cfg)


def _emit(out: Optional[str], text: str, cfg: dict) -> None:
    if out == "-":
        sys.stdout.write(text)
    else:
        write_with_config(out_path(out), text, cfg)


def cmd_repro_all(args) -> None:
    cfg = resolve(args, {"out": "repro"})
    root = out_path(cfg["out"])
    results = repro.run_all(lambda line: print(line, file=sys.stderr))
    for crit in results:
        for name, text in crit.artifacts.items():
            write_atomic(root / name, text)
    write_atomic(root / "acceptance.json", repro.summary(results))
    # the output directory itself is left out so that two trees compare equal
    settings = {"pipeline": json.loads(PipelineConfig().to_json()), "budget_db": 1.0,
                "random_graphs": 100, "bfp_blocks": 100_000, "tile_pairs": 1000}
    write_atomic(root / "resolved_config.json", _dumps(settings))
    failed = [c.number for c in results if not c.passed]
    if failed:
        raise CheckFailed(f"acceptance criteria failed: {failed}")


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lofitts", description="Low-precision TTS co-design laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def leaf(parent, name: str, fn: Callable, help_: str) -> argparse.ArgumentParser:
        p = parent.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.set_defaults(func=fn)
        return p

    g = sub.add_parser("bfp", help="block floating point tools").add_subparsers(dest="action", required=True)
    p = leaf(g, "roundtrip", cmd_bfp_roundtrip, "quantize and dequantize a CSV tensor")
    p.add_argument("--in", dest="input")
    p.add_argument("--preset")
    p.add_argument("--out")
    p.add_argument("--dump", help="also write the encoded tensor")

    p = leaf(sub, "matmul", cmd_matmul, "random-tile matmul error table")
    p.add_argument("--fidelity")
    p.add_argument("--seed", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--chunk-bits", type=int)
    p.add_argument("--out")

    g = sub.add_parser("pipeline", help="toy synthesis pipeline").add_subparsers(dest="action", required=True)
    p = leaf(g, "run", cmd_pipeline_run, "synthesize a waveform")
    p.add_argument("--seed", type=int)
    p.add_argument("--assignment")
    p.add_argument("--wav")
    p.add_argument("--csv", help="also write the samples as CSV")

    g = sub.add_parser("sensitivity", help="precision sensitivity").add_subparsers(dest="action", required=True)
    p = leaf(g, "search", cmd_sensitivity_search, "greedy demotion search")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget-db", type=float)
    p.add_argument("--out")

    g = sub.add_parser("sim", help="dataflow simulator").add_subparsers(dest="action", required=True)
    p = leaf(g, "run", cmd_sim_run, "simulate a graph")
    p.add_argument("--graph")
    p.add_argument("--grid")
    p.add_argument("--assignment")
    p.add_argument("--delivery", choices=["multicast", "unicast"])
    p.add_argument("--trace", help="write the event trace CSV here")
    p.add_argument("--out")

    g = sub.add_parser("cost", help="device economics").add_subparsers(dest="action", required=True)
    p = leaf(g, "table", cmd_cost_table, "per-device cost table")
    p.add_argument("--devices")
    p.add_argument("--baseline")
    p.add_argument("--out", help="'-' for stdout")
    p = leaf(g, "fleet", cmd_cost_fleet, "fleet sizing")
    p.add_argument("--scenario")
    p.add_argument("--rounding", choices=["ceil", "paper"])
    p.add_argument("--out", help="'-' for stdout")

    g = sub.add_parser("repro", help="acceptance experiments").add_subparsers(dest="action", required=True)
    p = leaf(g, "all", cmd_repro_all, "run every acceptance experiment")
    p.add_argument("--out")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"lofitts: error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"lofitts: {exc}", file=sys.stderr)
        return 1
    except (bfp.BfpError, FidelityError, MetricError, SearchError, dataflow.SimError, cost.CostError) as exc:
        print(f"lofitts: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
