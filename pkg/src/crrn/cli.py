"""Command line entry point: ``crrn <subcommand> [options]``.

Every subcommand writes its resolved configuration to ``<out>/config.json``.
Failures print one JSON line to stderr and exit with::

    2  missing input file or directory
    3  config or input schema violation
    4  non-finite training loss
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import evaluation as ev
from . import pipeline, spt, synth
from .gradcheck import grad_check_detail
from .model import ConfigError, CrrnConfig, CrrnModel, FeedPolicy, jitter_parameters
from .spt import SptFormatError
from .tensor import Tensor
from . import tensor as T
from .training import NonFiniteLossError, TrainConfig, train, write_history

log = logging.getLogger("crrn")

EXIT_MISSING, EXIT_SCHEMA, EXIT_NAN = 2, 3, 4
SECTIONS = ("generate", "model", "train", "eval", "gradcheck")


class CliError(Exception):
    def __init__(self, code: int, kind: str, detail: str):
        super().__init__(detail)
        self.code, self.kind, self.detail = code, kind, detail


@dataclass
class EvalConfig:
    n_thresholds: int = 200
    window: str = "board"
    pool_k: int = 4
    batch_size: int = 16
    pgm_scale: float = 5.0

    def __post_init__(self):
        if self.window not in ("board", "sequence"):
            raise ConfigError(f"window must be 'board' or 'sequence', got {self.window!r}")
        if self.n_thresholds < 2 or self.pool_k < 1 or self.batch_size < 1 or self.pgm_scale <= 0:
            raise ConfigError("n_thresholds >= 2, pool_k >= 1, batch_size >= 1, pgm_scale > 0 required")


@dataclass
class GradcheckConfig:
    hidden: int = 8
    kernel: int = 3
    height: int = 8
    width: int = 8
    T: int = 3
    st_depth: int = 2
    spatial_depth: int = 1
    cell: str = "cstm"
    attention: bool = True
    samples: int = 25
    eps: float = 1e-5
    tolerance: float = 1e-4
    jitter: bool = True


def _section(cls, raw: dict, name: str):
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ------------------------------------------------------------------ helpers

def _read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise CliError(EXIT_MISSING, "missing_file", f"{what} not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_SCHEMA, "schema", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})")
    if not isinstance(data, dict):
        raise CliError(EXIT_SCHEMA, "schema", f"{path}: expected a JSON object")
    return data


def load_config(path: Optional[str]) -> Dict[str, dict]:
    if path is None:
        return {}
    data = _read_json(Path(path), "config")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise CliError(EXIT_SCHEMA, "schema", f"unknown config sections: {sorted(unknown)}")
    for k, v in data.items():
        if not isinstance(v, dict):
            raise CliError(EXIT_SCHEMA, "schema", f"config section {k!r} must be an object")
    return data


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError(EXIT_SCHEMA, "schema", "--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_dir(path: Optional[str], what: str) -> Path:
    if path is None:
        raise CliError(EXIT_SCHEMA, "schema", f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, "missing_file", f"{what} not found: {p}")
    return p


def _load_dataset(path: Optional[str]):
    d = _need_dir(path, "data")
    if not (d / "dataset.json").is_file():
        raise CliError(EXIT_MISSING, "missing_file", f"no dataset.json in {d}")
    seqs = synth.load_dataset(d)
    return seqs, synth.dataset_config(d)


def _load_model(args) -> CrrnModel:
    p = _need_dir(args.model, "model")
    model = CrrnModel.load(p)
    if args.cell is not None and args.cell != model.config.cell:
        raise ConfigError(f"--cell {args.cell} does not match checkpoint cell {model.config.cell}")
    if args.no_attention and model.attention is not None:
        # same as zero attention kernels
        model.attention = None
        model.config.attention = False
    return model


def _model_config(cfg: Dict[str, dict], args, data_cfg: Optional[dict] = None) -> CrrnConfig:
    raw = dict(cfg.get("model", {}))
    if data_cfg:
        for k in ("T", "height", "width"):
            raw.setdefault(k, data_cfg.get(k, getattr(CrrnConfig, k)))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.cell is not None:
        raw["cell"] = args.cell
    if args.no_attention:
        raw["attention"] = False
    return CrrnConfig.from_dict(raw)


def _eval_config(cfg: Dict[str, dict]) -> EvalConfig:
    return _section(EvalConfig, cfg.get("eval", {}), "eval")


def _thresholds(path: Optional[str]) -> Optional[Dict[str, float]]:
    """theta* per polarity from an earlier report (a validation run)."""
    if path is None:
        return None
    rep = _read_json(Path(path), "threshold report")
    try:
        return {pol: float(v["threshold"]) for pol, v in rep["best"].items()}
    except (KeyError, TypeError, ValueError):
        raise CliError(EXIT_SCHEMA, "schema", f"{path}: no best thresholds in report") from None


def write_curves(path: Path, curves: Dict[str, Dict[str, ev.PRCurve]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "polarity", "threshold", "precision", "recall", "tp", "fp", "fn"])
        for method, per in curves.items():
            for pol, c in per.items():
                for i in range(len(c.threshold)):
                    w.writerow([method, pol, repr(float(c.threshold[i])), repr(float(c.precision[i])),
                                repr(float(c.recall[i])), int(c.tp[i]), int(c.fp[i]), int(c.fn[i])])


def write_pgm(path: Path, eps: np.ndarray, scale: float) -> None:
    """8-bit binary PGM; 128 is zero error, +-scale maps to 255 / 1."""
    img = np.clip(np.rint(128.0 + eps * (127.0 / scale)), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def export_maps(directory: Path, maps: np.ndarray, scale: float) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        spt.save(directory / f"seq_{i:05d}.spt1", m.astype(np.float32))
        for t, frame in enumerate(m):
            write_pgm(directory / f"seq_{i:05d}_t{t:02d}.pgm", frame, scale)


def _report(scores: ev.PadScores, per_board: ev.PadScores, ecfg: EvalConfig, thresholds, config) -> dict:
    rep = ev.evaluate_scores(scores, ecfg.n_thresholds, config=config)
    if thresholds:
        rep.recall_profile = {pol: ev.recall_profile(per_board, th) for pol, th in thresholds.items()}
    d = rep.to_dict()
    d["thresholds_applied"] = thresholds
    d["n_sequences"] = config.get("n_sequences")
    return d


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg) -> int:
    raw = dict(cfg.get("generate", {}))
    if args.seed is not None:
        raw["seed"] = args.seed
    gcfg = pipeline.GeneratorConfig.from_dict(raw)
    out = _out_dir(args)
    seqs = pipeline.generate(gcfg)
    synth.save_dataset(out, seqs, gcfg.to_dict())
    _write_json(out / "config.json", {"generate": gcfg.to_dict()})
    print(f"wrote {len(seqs)} sequences to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    seqs, data_cfg = _load_dataset(args.data)
    mcfg = _model_config(cfg, args, data_cfg)
    raw = dict(cfg.get("train", {}))
    if args.seed is not None:
        raw["seed"] = args.seed
    tcfg = TrainConfig.from_dict(raw)
    out = _out_dir(args)
    X = pipeline.stack(seqs)
    if X.shape[1] != mcfg.T or X.shape[3:] != (mcfg.height, mcfg.width):
        raise ConfigError(f"data shape {X.shape[1:]} does not match model T/height/width")
    resolved = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": str(args.data)}
    _write_json(out / "config.json", resolved)
    model = CrrnModel(mcfg)
    t0 = time.perf_counter()
    history = train(model, X, tcfg, callback=lambda r: log.info(
        "epoch %d eps %.3f loss %.6f (%.0fs)", r["epoch"], r["epsilon"], r["loss"], time.perf_counter() - t0))
    model.save(out / "model.json", {"train": tcfg.to_dict()})
    write_history(out / "loss.csv", history)
    print(f"final loss {history[-1]['loss']:.6g}; checkpoint {out / 'model.json'}")
    return 0


def cmd_detect(args, cfg) -> int:
    model = _load_model(args)
    seqs, data_cfg = _load_dataset(args.data)
    ecfg = _eval_config(cfg)
    out = _out_dir(args)
    _write_json(out / "config.json", {"model": model.config.to_dict(), "eval": asdict(ecfg),
                                      "data": str(args.data), "checkpoint": str(args.model)})
    maps = pipeline.anomaly_maps(model, seqs, ecfg.batch_size)
    export_maps(out / "maps", maps, ecfg.pgm_scale)
    thresholds = _thresholds(args.thresholds)
    if thresholds:
        masks = np.stack([ev.binarize_channels(m, thresholds.get("excessive", np.inf), ecfg.pool_k)
                          for m in maps])
        if "insufficient" in thresholds:
            ins = np.stack([ev.binarize_channels(m, thresholds["insufficient"], ecfg.pool_k) for m in maps])
            masks[:, :, 1] = ins[:, :, 1]
        for i, m in enumerate(masks):
            spt.save(out / "maps" / f"seq_{i:05d}_masks.spt1", m.astype(np.float32))
    print(f"wrote {len(maps)} anomaly maps to {out / 'maps'}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    model = _load_model(args)
    seqs, data_cfg = _load_dataset(args.data)
    ecfg = _eval_config(cfg)
    thresholds = _thresholds(args.thresholds)
    out = _out_dir(args)
    config = {"model": model.config.to_dict(), "eval": asdict(ecfg), "data": str(args.data),
              "data_config": data_cfg, "checkpoint": str(args.model), "n_sequences": len(seqs)}
    _write_json(out / "config.json", config)
    maps = pipeline.anomaly_maps(model, seqs, ecfg.batch_size)
    if args.maps:
        export_maps(Path(args.maps), maps, ecfg.pgm_scale)
    scores = pipeline.crrn_pad_scores(maps, seqs)
    report = _report(scores, pipeline.per_board(maps, seqs), ecfg, thresholds, config)
    _write_json(out / "report.json", report)
    write_curves(out / "curves.csv", {"crrn": ev.evaluate_scores(scores, ecfg.n_thresholds).curves})
    _print_best(report)
    return 0


def cmd_baseline(args, cfg) -> int:
    seqs, data_cfg = _load_dataset(args.data)
    ecfg = _eval_config(cfg)
    thresholds = _thresholds(args.thresholds)
    out = _out_dir(args)
    config = {"eval": asdict(ecfg), "data": str(args.data), "data_config": data_cfg,
              "n_sequences": len(seqs), "method": "statistical"}
    _write_json(out / "config.json", config)
    scores = pipeline.baseline_pad_scores(seqs, ecfg.window)
    report = _report(scores, pipeline.per_board(None, seqs, ecfg.window), ecfg, thresholds, config)
    _write_json(out / "report.json", report)
    write_curves(out / "curves.csv", {"baseline": ev.evaluate_scores(scores, ecfg.n_thresholds).curves})
    _print_best(report)
    return 0


def _print_best(report: dict) -> None:
    for pol, b in sorted(report["best"].items()):
        print(f"{pol}: best F1 {b['f1']:.4f} at threshold {b['threshold']:.4f}")


def gradcheck_table(gcfg: GradcheckConfig, seed: int) -> Dict[str, float]:
    """Max relative gradient error per parameter group of a small float64 model."""
    mcfg = CrrnConfig(hidden=gcfg.hidden, kernel=gcfg.kernel, height=gcfg.height, width=gcfg.width,
                      T=gcfg.T, st_depth=gcfg.st_depth, spatial_depth=gcfg.spatial_depth,
                      cell=gcfg.cell, attention=gcfg.attention, dtype="float64", seed=seed)
    model = CrrnModel(mcfg)
    rng = np.random.default_rng(seed)
    if gcfg.jitter:
        jitter_parameters(model, rng)
    X = rng.standard_normal((2, gcfg.T, 2, gcfg.height, gcfg.width))
    frames = [Tensor(X[:, t]) for t in range(gcfg.T)]
    target = Tensor(np.concatenate([f.data for f in frames]))

    def loss():
        outs = model.forward(frames, FeedPolicy.teacher())
        return T.mean_all(T.square(T.sub(T.concat(outs, 0), target)))

    return grad_check_detail(loss, model.groups(), eps=gcfg.eps, samples=gcfg.samples, seed=seed)


def cmd_gradcheck(args, cfg) -> int:
    raw = dict(cfg.get("gradcheck", {}))
    if args.cell is not None:
        raw["cell"] = args.cell
    if args.no_attention:
        raw["attention"] = False
    gcfg = _section(GradcheckConfig, raw, "gradcheck")
    seed = args.seed if args.seed is not None else 0
    detail = gradcheck_table(gcfg, seed)
    worst = max(detail.values())
    width = max(len(k) for k in detail)
    for name, err in detail.items():
        print(f"{name:<{width}}  {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {gcfg.tolerance:g})")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "config.json", {"gradcheck": asdict(gcfg), "seed": seed})
        _write_json(out / "gradcheck.json", {"groups": detail, "max": worst, "passed": worst < gcfg.tolerance})
    return 0 if worst < gcfg.tolerance else 1


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crrn", description="Spatiotemporal anomaly detection for SPI data.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write a synthetic SPI dataset",
        "train": "train a model on normal sequences",
        "detect": "export anomaly maps (SPT1 and PGM)",
        "evaluate": "PR curves and best F1 of a trained model",
        "baseline": "PR curves and best F1 of the z-score baseline",
        "gradcheck": "finite-difference check of a small model",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config with generate/model/train/eval/gradcheck sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--model", help="checkpoint manifest (model.json)")
        p.add_argument("--no-attention", action="store_true", help="drop the attention shortcut")
        p.add_argument("--cell", choices=("convlstm", "cstm"))
        p.add_argument("--thresholds", help="report.json whose best thresholds are applied")
        p.add_argument("--maps", help="also export anomaly maps here (evaluate)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, kind: str, detail: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "detail": detail}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        return _fail(exc.code, exc.kind, exc.detail)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except (ConfigError, SptFormatError) as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except NonFiniteLossError as exc:
        return _fail(EXIT_NAN, "non_finite_loss", str(exc))


if __name__ == "__main__":
    sys.exit(main())
