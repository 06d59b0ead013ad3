"""``pimforge`` command line: compress, map, simulate, report, verify."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .admm import AdmmError, AdmmSchedule, compress, quantize_model, layer_quant_specs
from .bitserial import BitConvTrace
from .cost import CostError, CostParams, CostReport, compare, estimate
from .datasets import load_dataset
from .mapper import LayoutError, PimLayout, build_layout, simulate
from .model import ModelError, QuantSpec, build_network, dump_json, load_json, load_model, save_model, sparsity_report
from .sparsity import ConstraintError, parse_constraints

TRACE_FORMAT = "pimforge-trace/1"
OUTPUTS_FORMAT = "pimforge-outputs/1"
CONFIG_DIR_ENV = "PIMFORGE_CONFIG_DIR"


class JobError(Exception):
    pass


class Logger:
    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stderr

    def __call__(self, entry: dict) -> None:
        if self.as_json:
            print(json.dumps(entry, sort_keys=True), file=self.stream)
            return
        phase = entry.get("phase", "info")
        if phase == "admm":
            res = " ".join(f"{r:.3g}" for r in entry.get("residuals", []))
            acc = f" acc {entry['accuracy']:.4f}" if "accuracy" in entry else ""
            print(f"[admm] round {entry['round']:3d} loss {entry['loss']:.4f}{acc} residuals {res}", file=self.stream)
        elif phase in ("train", "retrain", "dense"):
            print(f"[{phase}] epoch {entry['epoch']:3d} loss {entry['loss']:.4f}", file=self.stream)
        elif phase == "final":
            print(f"[final] {json.dumps(entry, sort_keys=True)}", file=self.stream)
        else:
            msg = entry.get("message")
            print(f"[{phase}] {msg if msg is not None else json.dumps(entry, sort_keys=True)}", file=self.stream)


def resolve_config(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and (Path(base) / path).exists():
        return Path(base) / path
    raise JobError(f"config {path!r} not found (also looked in ${CONFIG_DIR_ENV})")


def _path(cfg_dir: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else cfg_dir / p


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise JobError(f"config is missing {key!r}")
    return cfg[key]


def _dataset(cfg: dict, cfg_dir: Path, seed: int):
    spec = dict(_require(cfg, "dataset"))
    spec.setdefault("seed", seed)
    return load_dataset(spec, cfg_dir)


def _quant(spec) -> QuantSpec | None:
    if spec is None:
        return None
    spec = dict(spec)
    frac = spec.get("frac_bits", "auto")
    return QuantSpec(
        int(spec.get("weight_bits", 8)), int(spec.get("input_bits", 8)),
        0 if frac == "auto" else int(frac), bool(spec.get("signed", True)),
        int(spec.get("input_frac_bits", 5)),
    ), frac == "auto"


def cmd_compress(cfg: dict, cfg_dir: Path, seed: int, log: Logger) -> int:
    Xtr, ytr, Xte, yte = _dataset(cfg, cfg_dir, seed)
    if "model_in" in cfg:
        model = load_model(_path(cfg_dir, cfg["model_in"]))
    else:
        dense = cfg.get("dense", {})
        model = build_network(
            Xtr.shape[1:], [tuple(c) for c in dense.get("conv", [[16, 3], [32, 3]])],
            int(ytr.max()) + 1, hidden=dense.get("hidden", []), seed=seed,
        )
        trainer.train(
            model, Xtr, ytr, epochs=int(dense.get("epochs", 30)),
            learning_rate=float(dense.get("learning_rate", 0.02)),
            batch_size=int(dense.get("batch_size", 32)), momentum=float(dense.get("momentum", 0.9)),
            lr_decay=float(dense.get("lr_decay", 0.93)), seed=seed,
            log=lambda e: log({**e, "phase": "dense"}),
        )
    model.seed = seed
    dense_acc = trainer.evaluate(model, Xte, yte)
    log({"phase": "dense-eval", "message": f"dense test accuracy {dense_acc:.4f}", "accuracy": dense_acc})
    if "dense_out" in cfg:
        save_model(model, _path(cfg_dir, cfg["dense_out"]))

    constraints = parse_constraints(cfg.get("constraints", []), model)
    q = _quant(cfg.get("quant"))
    quant, auto = q if q else (None, True)
    sched = AdmmSchedule.from_dict({**cfg.get("schedule", {}), "seed": seed})
    out = compress(
        model, constraints, quant, (Xtr, ytr), sched, auto_frac=auto,
        propagate=bool(cfg.get("propagate", True)), eval_data=(Xte, yte), log=log,
    )
    rep = sparsity_report(out)
    acc = trainer.evaluate(out, Xte, yte)
    out.meta = {"dense_accuracy": dense_acc, "accuracy": acc,
                "conv_compression_rate": round(rep.compression_rate, 1)}
    save_model(out, _path(cfg_dir, _require(cfg, "model_out")))
    log({"phase": "summary", "message": f"compression {rep.compression_rate:.1f}x, test accuracy {acc:.4f} "
         f"(dense {dense_acc:.4f})"})
    print(rep)
    return 0


def cmd_map(cfg: dict, cfg_dir: Path, seed: int, log: Logger) -> int:
    model = load_model(_path(cfg_dir, _require(cfg, "model")))
    if not model.is_quantized:
        q = _quant(cfg.get("quant"))
        if q is None:
            raise JobError("model is not quantized and the config gives no 'quant' block")
        quant, auto = q
        model = quantize_model(model, layer_quant_specs(model, quant, auto_frac=auto))
    layout = build_layout(model, cfg.get("mode", "physical"))
    dump_json(layout.to_dict(), _path(cfg_dir, _require(cfg, "layout_out")))
    stats = layout.to_dict()["stats"]
    log({"phase": "map", "message": f"{stats['pes']} PEs, {stats['weight_subarrays']} weight sub-arrays "
         f"({stats['weight_subarrays_effective']} active), mode {layout.mode}"})
    return 0


def load_layout(path) -> PimLayout:
    return PimLayout.from_dict(load_json(path))


def cmd_simulate(cfg: dict, cfg_dir: Path, seed: int, log: Logger) -> int:
    layout = load_layout(_path(cfg_dir, _require(cfg, "layout")))
    _, _, Xte, yte = _dataset(cfg, cfg_dir, seed)
    n = int(cfg.get("samples", 100))
    X, y = Xte[:n], yte[:n]
    result = simulate(layout, X)
    reference = trainer.quantized_forward(layout.model, X)
    exact = bool(np.array_equal(result.logits, reference))
    acc = float(np.mean(result.predictions == y))
    ref_acc = float(np.mean(reference.argmax(axis=1) == y))
    dump_json(
        {"format": TRACE_FORMAT, "seed": layout.model.seed, "mode": layout.mode, "samples": len(X),
         "layers": [t.to_dict() for t in result.traces], "total": result.total.to_dict()},
        _path(cfg_dir, _require(cfg, "trace_out")),
    )
    if "outputs_out" in cfg:
        dump_json(
            {"format": OUTPUTS_FORMAT, "seed": layout.model.seed, "predictions": result.predictions.tolist(),
             "labels": y.tolist(), "accuracy": acc, "bit_exact": exact,
             "logits": [[float(v) for v in row] for row in result.logits]},
            _path(cfg_dir, cfg["outputs_out"]),
        )
    log({"phase": "simulate", "message": f"{len(X)} samples, accuracy {acc:.4f} "
         f"(reference {ref_acc:.4f}), bit-exact: {exact}", "accuracy": acc, "bit_exact": exact})
    print(f"accuracy {acc:.4f} bit_exact {exact}")
    if not exact:
        log({"phase": "error", "message": "PIM simulation disagrees with the reference forward pass"})
        return 1
    return 0


def _cost_params(value, cfg_dir: Path) -> CostParams:
    if value is None:
        base = os.environ.get(CONFIG_DIR_ENV)
        if base and (Path(base) / "cost_params.json").exists():
            return CostParams.from_dict(load_json(Path(base) / "cost_params.json"))
        return CostParams.default()
    if isinstance(value, dict):
        return CostParams.from_dict(value)
    return CostParams.from_dict(load_json(_path(cfg_dir, value)))


def load_trace(path):
    doc = load_json(path)
    if doc.get("format") != TRACE_FORMAT:
        raise JobError(f"{path}: not a trace file")
    return [BitConvTrace.from_dict(t) for t in doc["layers"]]


def cmd_report(cfg: dict, cfg_dir: Path, seed: int, log: Logger, compare_path=None) -> int:
    layout = load_layout(_path(cfg_dir, _require(cfg, "layout")))
    traces = load_trace(_path(cfg_dir, _require(cfg, "trace")))
    report = estimate(layout, traces, _cost_params(cfg.get("cost_params"), cfg_dir))
    baseline_path = compare_path or cfg.get("baseline")
    if baseline_path:
        baseline = CostReport.from_dict(load_json(_path(cfg_dir, baseline_path)))
        report.ratios = compare(report, baseline)
    doc = report.to_dict()
    doc["seed"] = layout.model.seed
    dump_json(doc, _path(cfg_dir, _require(cfg, "report_out")))
    if "csv_out" in cfg:
        _path(cfg_dir, cfg["csv_out"]).write_text(report.to_csv())
    print(report.to_table())
    return 0


def cmd_verify(cfg: dict, cfg_dir: Path, seed: int, log: Logger) -> int:
    from .verify import run_all

    results = run_all(seed=seed, quick=bool(cfg.get("quick", True)))
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


COMMANDS = {
    "compress": cmd_compress,
    "map": cmd_map,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "verify", help="JSON job config")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
        p.add_argument("--log-json", action="store_true", help="line-oriented JSON logs on stderr")
        if name == "report":
            p.add_argument("--compare", metavar="BASELINE", help="baseline report JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = Logger(args.log_json)
    try:
        if args.config:
            cfg_path = resolve_config(args.config)
            cfg = load_json(cfg_path)
            cfg_dir = cfg_path.parent
        else:
            cfg, cfg_dir = {}, Path.cwd()
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        kwargs = {"compare_path": args.compare} if args.command == "report" else {}
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return COMMANDS[args.command](cfg, cfg_dir, seed, log, **kwargs)
        return COMMANDS[args.command](cfg, cfg_dir, seed, log, **kwargs)
    except (JobError, ModelError, ConstraintError, AdmmError, LayoutError, CostError, ValueError,
            KeyError, OSError) as exc:
        log({"phase": "error", "message": f"{type(exc).__name__}: {exc}"})
        return 2


if __name__ == "__main__":
    sys.exit(main())
