"""Command-line frontend: ``kansae <synth|train|compare|steer> --config cfg.json``.

Exit codes: 0 success, 2 config/validation, 3 IO/format, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import data as datamod
from . import metrics, steer as steermod
from .errors import FormatError, KansaeError, NumericalAbort
from .train import TrainConfig, final_alive, train

log = logging.getLogger("kansae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

_num = {"type": "number"}
_int = {"type": "integer"}
_str = {"type": "string"}
_region = {
    "type": "object",
    "additionalProperties": False,
    "required": ["lat_min", "lat_max", "lon_min", "lon_max"],
    "properties": {k: _num for k in ("lat_min", "lat_max", "lon_min", "lon_max")},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": _str,
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_true": {"type": "integer", "minimum": 1},
                "d": {"type": "integer", "minimum": 2},
                "N": {"type": "integer", "minimum": 1},
                "N_eval": {"type": "integer", "minimum": 0},
                "p_active": {"type": "number", "minimum": 0, "maximum": 1},
                "gates": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                "theta": {"type": "number", "minimum": 0},
                "saturation": {"type": "number", "exclusiveMinimum": 0},
                "noise_sigma": {"type": "number", "minimum": 0},
                "bias_scale": {"type": "number", "minimum": 0},
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["H", "W"],
                    "properties": {"H": {"type": "integer", "minimum": 1}, "W": {"type": "integer", "minimum": 1},
                                   "lat0": _num, "dlat": _num, "lon0": _num, "dlon": _num},
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": _str,
                "data": _str,
                "eval": _str,
                "resume": _str,
                "d": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["kan", "relu"]},
                "M": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "lambda0": {"type": "number", "minimum": 0},
                "lambdaE": {"type": "number", "minimum": 0},
                "K": {"type": "integer", "minimum": 2},
                "p": {"type": "integer", "minimum": 1},
                "calib_n": {"type": "integer", "minimum": 1},
                "percentiles": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "tau": {"oneOf": [{"type": "number", "minimum": 0}, {"const": "auto"}]},
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "activation_eps": {"type": "number", "minimum": 0},
            },
        },
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "required": ["a", "b", "eval"],
            "properties": {
                "a": _str,
                "b": _str,
                "eval": _str,
                "labels": {"type": "array", "items": _str, "minItems": 2, "maxItems": 2},
                "name": _str,
                "truth": _str,
                "threshold": {"type": "number", "minimum": 0, "maximum": 1},
                "region": _region,
                "n_blocks": {"type": "integer", "minimum": 3},
            },
        },
        "steer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["checkpoint", "feature", "eval"],
            "properties": {
                "checkpoint": _str,
                "feature": {"type": "integer", "minimum": 0},
                "eval": _str,
                "name": _str,
                "alphas": {"type": "array", "items": _num, "minItems": 3},
                "downstream": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"kind": {"enum": ["linear", "quadratic"]}, "per_cell": {"type": "boolean"},
                                   "offset": _num, "region": _region},
                },
                "anomaly_map": {"type": "boolean"},
                "max_tokens": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class Context:
    def __init__(self, cfg: dict, base: Path, out: Path, seed: int, force: bool):
        self.cfg, self.base, self.out, self.seed, self.force = cfg, base, out, seed, force

    def path(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def section(self, name: str) -> dict:
        if name not in self.cfg:
            raise CliError(EXIT_CONFIG, f"config has no {name!r} section")
        return self.cfg[name]


def load_config(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from exc
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise CliError(EXIT_CONFIG, "invalid config:\n" + "\n".join(lines))
    return cfg


def _write_text(path: Path, text: str) -> None:
    datamod._atomic_write(path, [text.encode("utf-8")])


def cmd_synth(ctx: Context) -> int:
    sec = dict(ctx.section("synth"))
    n_eval = sec.pop("N_eval", 0)
    scfg = datamod.SynthConfig(seed=ctx.seed, **sec)
    train_store, truth = datamod.synth_generate(scfg, "train")
    datamod.write_activations(train_store, ctx.out / "train.kact")
    if n_eval:
        ecfg = datamod.SynthConfig(**{**scfg.__dict__, "N": n_eval})
        eval_store, _ = datamod.synth_generate(ecfg, "eval")
        datamod.write_activations(eval_store, ctx.out / "eval.kact")
    datamod.write_ground_truth(truth, ctx.out / "truth.json", ctx.out / "truth_codes.kcod",
                               extra={"seed": ctx.seed, "config": {k: v for k, v in scfg.__dict__.items()}})
    print(f"wrote {train_store.N} tokens (d={train_store.d}) to {ctx.out}")
    return EXIT_OK


def cmd_train(ctx: Context) -> int:
    sec = dict(ctx.section("train"))
    name = sec.pop("name", sec.get("mode", "kan"))
    data_path = ctx.path(sec.pop("data", "train.kact"))
    eval_path = sec.pop("eval", None)
    resume_path = sec.pop("resume", None)
    want_d = sec.pop("d", None)
    if "percentiles" in sec:
        sec["percentiles"] = tuple(sec["percentiles"])
    cfg = TrainConfig(seed=ctx.seed, **sec)
    cfg.validate()
    store = datamod.read_activations(data_path)
    if want_d is not None and want_d != store.d:
        raise CliError(EXIT_CONFIG, f"data has d={store.d}, config expects d={want_d}")
    eval_store = datamod.read_activations(ctx.path(eval_path)) if eval_path else None
    if eval_store is not None and eval_store.d != store.d:
        raise CliError(EXIT_CONFIG, f"eval data has d={eval_store.d}, training data has d={store.d}")
    resume = datamod.load_checkpoint(ctx.path(resume_path)) if resume_path else None
    ckpt = ctx.out / f"{name}.ksck"
    try:
        res = train(cfg, store, eval_store=eval_store, resume=resume, checkpoint_path=ckpt,
                    log_path=ctx.out / f"{name}_log.jsonl")
    except NumericalAbort as exc:
        if exc.last_good is not None:
            datamod.save_checkpoint(exc.last_good, exc.last_good_adam, ckpt, config=cfg.to_dict(),
                                    epochs_done=exc.epochs_done)
        raise
    datamod.save_checkpoint(res.params, res.adam, ckpt, tau=res.tau, config=cfg.to_dict(),
                            epochs_done=res.epochs_done)
    doc = {"mode": cfg.mode, "M": cfg.M, "tau": res.tau, "n_alive": len(res.alive), "alive": sorted(res.alive)}
    _write_text(ctx.out / f"{name}_alive.json", json.dumps(doc, sort_keys=True) + "\n")
    print(f"{name}: {len(res.alive)}/{cfg.M} alive after {res.epochs_done} epochs")
    return EXIT_OK


def _alive_for(ck: datamod.Checkpoint, store) -> set:
    cfg = ck.header.get("config") or {}
    tcfg = TrainConfig(mode=ck.params.mode, M=ck.params.M, activation_eps=cfg.get("activation_eps", 0.0),
                       tau=cfg.get("tau", TrainConfig.tau))
    alive, _ = final_alive(ck.params, tcfg, store, tau=ck.tau)
    return alive


def _region(spec):
    return None if spec is None else metrics.RegionSpec(**spec)


def cmd_compare(ctx: Context) -> int:
    sec = ctx.section("compare")
    store = datamod.read_activations(ctx.path(sec["eval"]))
    ckpts = [datamod.load_checkpoint(ctx.path(sec[k])) for k in ("a", "b")]
    labels = sec.get("labels") or [Path(sec["a"]).stem, Path(sec["b"]).stem]
    if labels[0] == labels[1]:
        labels = [labels[0] + "_a", labels[1] + "_b"]
    truth_D = None
    if "truth" in sec:
        with open(ctx.path(sec["truth"]), "r", encoding="utf-8") as fh:
            truth_D = np.array(json.load(fh)["dictionary"])
    reports = {}
    for label, ck in zip(labels, ckpts):
        if ck.params.d != store.d:
            raise CliError(EXIT_CONFIG, f"checkpoint {label} has d={ck.params.d}, eval data has d={store.d}")
        alive = _alive_for(ck, store)
        reports[label] = metrics.evaluate(ck.params, store, alive, threshold=sec.get("threshold", 0.3),
                                          region=_region(sec.get("region")),
                                          n_blocks=sec.get("n_blocks", metrics.DEFAULT_BLOCKS), truth_D=truth_D)
    name = sec.get("name", "compare")
    _write_text(ctx.out / f"{name}.json", metrics.reports_json(reports))
    _write_text(ctx.out / f"{name}.csv", metrics.reports_csv(reports))
    print(metrics.reports_csv(reports), end="")
    return EXIT_OK


def cmd_steer(ctx: Context) -> int:
    sec = ctx.section("steer")
    ck = datamod.load_checkpoint(ctx.path(sec["checkpoint"]))
    store = datamod.read_activations(ctx.path(sec["eval"]))
    j = sec["feature"]
    if j >= ck.params.M:
        raise CliError(EXIT_CONFIG, f"feature {j} out of range for M={ck.params.M}")
    if ck.params.d != store.d:
        raise CliError(EXIT_CONFIG, f"checkpoint has d={ck.params.d}, eval data has d={store.d}")
    if j not in _alive_for(ck, store) and not ctx.force:
        raise CliError(EXIT_CONFIG, f"feature {j} is dead; pass --force to steer it anyway")
    dspec = dict(sec.get("downstream", {}))
    region = _region(dspec.pop("region", None))
    down = steermod.make_downstream(dspec, store.d, ctx.seed, store.meta, region)
    alphas = sec.get("alphas", list(steermod.DEFAULT_ALPHAS))
    X = store.X[: sec.get("max_tokens", store.N)]
    dr = steermod.dose_response(down, ck.params, j, alphas, X, store.meta)
    name = sec.get("name", f"steer_{j}")
    _write_text(ctx.out / f"{name}.json", json.dumps(dr.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_text(ctx.out / f"{name}.csv", dr.to_csv())
    if sec.get("anomaly_map", False):
        if not down.per_cell:
            raise CliError(EXIT_CONFIG, "anomaly maps need a per-cell downstream")
        maps = {a: steermod.regional_response_map(down, ck.params, j, a, store) for a in alphas}
        _write_text(ctx.out / f"{name}_anomaly.csv", steermod.anomaly_csv(maps, store.meta))
    print(f"feature {j}: slope={dr.slope:.6g} r2={dr.r_squared:.6f}{' (zero response)' if dr.zero_response else ''}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "compare": cmd_compare, "steer": cmd_steer}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kansae", description="KAN sparse autoencoder experiments")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    ap.add_argument("--out", type=Path, help="output directory (default: config 'out', else the config's directory)")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--force", action="store_true", help="steer a feature even if it is dead")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        base = args.config.resolve().parent
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not 0 <= seed < 2**64:
            raise CliError(EXIT_CONFIG, "seed must be a u64")
        out = args.out if args.out is not None else base / cfg.get("out", ".")
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](Context(cfg, base, out, seed, args.force))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KansaeError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
