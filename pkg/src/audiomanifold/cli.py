"""``audiomanifold`` command line: preprocess, gen-synth, train-*, infer, evaluate.

Every command validates its whole configuration first, writes its artifact
into ``--out`` atomically, and drops a ``run-log.json`` next to it. Failures
print one JSON line on stderr and exit with a code from ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import typing
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, config as cfgmod, dsp, plotting, tensorio
from .atnet import (
    AtNetConfig, CompatibilityError, E2ENet, check_compatible, finalize_output, infer_e2e,
    infer_spectrograms, load_atnet, save_atnet, train_atnet, train_e2e,
)
from .core.checkpoint import CheckpointError, atomic_directory, load_optimizer, load_state, read_metadata
from .core.training import TrainingDivergedError
from .data import io
from .data.manifest import DanglingPathError, ManifestError, load_manifest
from .data.store import load_split, sha256_files, write_dataset
from .data.synth import SynthConfig, SynthConfigError
from .metrics import (
    TAU_GRID, MetricInputError, crr_curve, depth_metrics, miou, per_class_iou, resize_nearest,
)
from .vq import TrainConfig, VqConfig, build_manifold, load_manifold, save_manifold, train_vqvae

log = logging.getLogger("audiomanifold")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "config": 2,
    "missing-input": 3,
    "incompatible": 4,
    "bad-data": 5,
    "diverged": 6,
}

RUN_LOG = "run-log.json"


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, (cfgmod.ConfigError, SynthConfigError)):
        return "config"
    if isinstance(exc, (FileNotFoundError, DanglingPathError)):
        return "missing-input"
    if isinstance(exc, (CompatibilityError, CheckpointError)):
        return "incompatible"
    if isinstance(exc, (ManifestError, dsp.InvalidInputError, tensorio.TensorFormatError, MetricInputError)):
        return "bad-data"
    if isinstance(exc, TrainingDivergedError):
        return "diverged"
    return "internal"


# ----------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("config", f"{self.prog}: {message}")


FLAG_HELP = {
    "in_dir": "directory of WAV files (searched recursively)",
    "out": "output directory (replaced atomically)",
    "manifest": "dataset manifest.jsonl",
    "manifold": "manifold checkpoint directory from train-vqvae",
    "model": "AT-net or E2E checkpoint directory",
    "predictions": "one or more infer output directories",
    "preset": "synthetic preset: toy (32x32, fast) or full (128x128)",
    "variant": "latent model: vq (quantized) or vae (Gaussian ablation)",
    "eigen_denominator": "divide relative depth errors by ground truth instead of prediction",
    "latent_size": "latent grid side; train-atnet checks it against the manifold",
}


def _add_flags(sub: argparse.ArgumentParser, cls) -> None:
    sub.add_argument("--config", help="YAML or JSON file with values for this command; flags win")
    for name, tp in cfgmod.field_types(cls).items():
        flag = "--in" if name == "in_dir" else "--" + name.replace("_", "-")
        base = cfgmod._base_type(tp)
        kw = {"dest": name, "default": None, "help": FLAG_HELP.get(name)}
        if base is bool:
            sub.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif base is list:
            sub.add_argument(flag, nargs="+", **kw)
        else:
            sub.add_argument(flag, type={int: int, float: float}.get(base, str), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="audiomanifold", description="Audio to depth/segmentation via a learnt visual manifold.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, cls in cfgmod.COMMANDS.items():
        _add_flags(subs.add_parser(name, help=(HANDLERS[name].__doc__ or "").strip().splitlines()[0]), cls)
    return parser


def parse_config(argv: list[str]) -> tuple[str, object, bool]:
    args = build_parser().parse_args(argv)
    values = vars(args)
    command, verbose, cfg_file = values.pop("command"), values.pop("verbose"), values.pop("config")
    file_values = cfgmod.read_config_file(cfg_file) if cfg_file else {}
    return command, cfgmod.build(command, file_values, values), verbose


# ----------------------------------------------------------------- helpers

def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_log(command: str, cfg, inputs: list[Path], started: float, **extra) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": getattr(cfg, "seed", None),
        "config": asdict(cfg),
        "config_hash": cfgmod.config_hash(cfg),
        "input_hash": sha256_files(inputs) if inputs else None,
        "wall_seconds": round(time.perf_counter() - started, 3),
        **extra,
    }


def _tree_files(root: Path) -> list[Path]:
    return sorted(p for p in Path(root).rglob("*") if p.is_file() and p.name != RUN_LOG)


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, max_steps=cfg.max_steps, lr=cfg.lr, seed=cfg.seed,
                       eval_every=cfg.eval_every, patience=cfg.patience, rel_threshold=cfg.rel_threshold)


def _manifest_inputs(manifest, entries) -> list[Path]:
    files = {manifest.root / "manifest.jsonl"}
    for e in entries:
        files.add(manifest.resolve(e.audio_path))
        files.add(manifest.resolve(e.visual_path))
    return sorted(f for f in files if f.is_file())


# ----------------------------------------------------------------- commands

def cmd_preprocess(cfg: cfgmod.PreprocessConfig, started: float) -> dict:
    """Turn WAV files into cached spectrogram tensors (.vtsr), one per window."""
    src = _require_dir(cfg.in_dir, "input directory")
    wavs = sorted(src.rglob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {src}")
    params = cfg.dsp_params()
    index = []
    with atomic_directory(cfg.out) as tmp:
        for wav in wavs:
            rel = wav.relative_to(src)
            windows = dsp.spectrogram_pipeline(io.read_wav(wav), **params)
            for k, spec in enumerate(windows):
                name = f"{str(rel.with_suffix('')).replace(os.sep, '__')}_{k:04d}.vtsr"
                tensorio.save(tmp / name, spec)
                index.append({"source": str(rel), "window": k, "file": name, "shape": list(spec.shape)})
        _write_json(tmp / "index.json", {"dsp": params, "tensors": index})
        _write_json(tmp / RUN_LOG, _run_log("preprocess", cfg, wavs, started, n_tensors=len(index)))
    return {"tensors": len(index)}


def cmd_gen_synth(cfg: cfgmod.GenSynthConfig, started: float) -> dict:
    """Generate a synthetic audio/depth/segmentation dataset with a manifest."""
    factory = SynthConfig.toy if cfg.preset == "toy" else SynthConfig
    synth = factory(**cfg.overrides())
    with atomic_directory(cfg.out) as tmp:
        manifest = write_dataset(synth, cfg.seed, tmp)
        digest = sha256_files(_tree_files(tmp))
        _write_json(tmp / RUN_LOG, _run_log("gen-synth", cfg, [], started, dataset_hash=digest,
                                            n_entries=len(manifest.entries)))
    return {"dataset_hash": digest, "entries": len(manifest.entries)}


def cmd_train_vqvae(cfg: cfgmod.TrainVqConfig, started: float) -> dict:
    """Train the visual manifold (VQ-VAE, or the Gaussian VAE ablation)."""
    manifest = load_manifest(cfg.manifest)
    entries = manifest.select("train", cfg.modality)
    _, _, visuals, _ = load_split(manifest, "train", cfg.modality, cfg.image_size, with_audio=False)
    channels = 1 if cfg.modality == "depth" else visuals.shape[1]
    vq_cfg = VqConfig(modality=cfg.modality, in_channels=channels, image_size=cfg.image_size,
                      latent_size=cfg.latent_size, num_codes=cfg.num_codes, code_dim=cfg.code_dim,
                      variant=cfg.variant)
    model, optimizer, start = None, None, 0
    if cfg.resume and (Path(cfg.out) / "metadata.json").is_file():
        meta = read_metadata(cfg.out)
        if VqConfig(**meta["config"]) != vq_cfg:
            raise CompatibilityError("--resume checkpoint was trained with a different model configuration")
        model = build_manifold(vq_cfg)
        load_state(cfg.out, model)
        optimizer, start = load_optimizer(cfg.out, meta), meta["global_step"]
    torch.manual_seed(cfg.seed)
    model, result = train_vqvae(visuals, vq_cfg, _train_config(cfg), model, start, optimizer)
    bounds = manifest.depth_bounds if cfg.modality == "depth" else None
    runlog = _run_log("train-vqvae", cfg, _manifest_inputs(manifest, entries), started,
                      steps=result.steps, final_loss=result.evaluations[-1] if result.evaluations else None,
                      stopped_early=result.stopped_early)
    save_manifold(cfg.out, model, bounds, step=result.steps, seed=cfg.seed, optimizer=result.optimizer,
                  extra={"losses": result.evaluations}, extra_files={RUN_LOG: runlog})
    return {"steps": result.steps, "final_loss": runlog["final_loss"]}


def _load_manifold_checked(path: str, latent_size: int | None = None):
    _require_dir(path, "manifold checkpoint")
    manifold, meta = load_manifold(path)
    if latent_size is not None and latent_size != manifold.cfg.latent_size:
        raise CompatibilityError(f"AT-net latent size {latent_size}x{latent_size} does not match the manifold's "
                                 f"{manifold.cfg.latent_size}x{manifold.cfg.latent_size}")
    return manifold, meta


def cmd_train_atnet(cfg: cfgmod.TrainAtConfig, started: float) -> dict:
    """Train the audio transformation network against a frozen manifold."""
    manifold, mmeta = _load_manifold_checked(cfg.manifold, cfg.latent_size)
    modality = manifold.cfg.modality
    manifest = load_manifest(cfg.manifest)
    entries = manifest.select("train", modality)
    params = cfg.dsp_params()
    _, specs, visuals, _ = load_split(manifest, "train", modality, manifold.cfg.image_size, params)
    at_cfg = AtNetConfig(input_channels=specs.shape[1], input_size=cfg.size, latent_size=manifold.cfg.latent_size,
                         code_dim=manifold.cfg.code_dim, dropout_p=cfg.dropout, encoder_width=cfg.encoder_width)
    check_compatible(at_cfg, manifold.cfg)
    model, optimizer, start = None, None, 0
    if cfg.resume and (Path(cfg.out) / "metadata.json").is_file():
        model, meta = load_atnet(cfg.out)
        if model.cfg != at_cfg:
            raise CompatibilityError("--resume checkpoint was trained with a different AT-net configuration")
        optimizer, start = load_optimizer(cfg.out, meta), meta["global_step"]
    model, result = train_atnet(specs, visuals, manifold, at_cfg, _train_config(cfg), model, start, optimizer)
    inputs = _manifest_inputs(manifest, entries) + _tree_files(Path(cfg.manifold))
    runlog = _run_log("train-atnet", cfg, inputs, started, steps=result.steps,
                      final_loss=result.evaluations[-1] if result.evaluations else None)
    save_atnet(cfg.out, model, mmeta, step=result.steps, seed=cfg.seed, dsp_params=params,
               optimizer=result.optimizer, extra={"losses": result.evaluations,
                                                  "manifold_path": str(Path(cfg.manifold).resolve())},
               extra_files={RUN_LOG: runlog})
    return {"steps": result.steps, "final_loss": runlog["final_loss"]}


def cmd_train_e2e(cfg: cfgmod.TrainE2EConfig, started: float) -> dict:
    """Train the single-stage ablation (audio straight to pixels, no manifold)."""
    manifest = load_manifest(cfg.manifest)
    entries = manifest.select("train", cfg.modality)
    params = cfg.dsp_params()
    _, specs, visuals, _ = load_split(manifest, "train", cfg.modality, cfg.image_size, params)
    channels = 1 if cfg.modality == "depth" else visuals.shape[1]
    visual_cfg = VqConfig(modality=cfg.modality, in_channels=channels, image_size=cfg.image_size,
                          latent_size=cfg.latent_size)
    at_cfg = AtNetConfig(input_channels=specs.shape[1], input_size=cfg.size, latent_size=cfg.latent_size,
                         dropout_p=cfg.dropout, encoder_width=cfg.encoder_width)
    model, result = train_e2e(specs, visuals, at_cfg, visual_cfg, _train_config(cfg))
    bounds = manifest.depth_bounds if cfg.modality == "depth" else None
    info = {"manifold_info": {"modality": cfg.modality, "depth_bounds": list(bounds) if bounds else None,
                              "num_classes": channels if cfg.modality == "segmentation" else None}}
    runlog = _run_log("train-e2e", cfg, _manifest_inputs(manifest, entries), started, steps=result.steps,
                      final_loss=result.evaluations[-1] if result.evaluations else None)
    save_atnet(cfg.out, model, info, step=result.steps, seed=cfg.seed, dsp_params=params,
               optimizer=result.optimizer, extra={"losses": result.evaluations}, extra_files={RUN_LOG: runlog})
    return {"steps": result.steps, "final_loss": runlog["final_loss"]}


def cmd_infer(cfg: cfgmod.InferConfig, started: float) -> dict:
    """Predict depth or segmentation maps for one manifest split."""
    _require_dir(cfg.model, "model checkpoint")
    model, meta = load_atnet(cfg.model)
    if isinstance(model, E2ENet):
        modality = model.visual_cfg.modality
        bounds = (meta.get("manifold_info") or {}).get("depth_bounds")
        manifold = None
        inputs = _tree_files(Path(cfg.model))
    else:
        if not cfg.manifold:
            raise cfgmod.ConfigError("--manifold is required for a two-stage AT-net checkpoint")
        manifold, mmeta = _load_manifold_checked(cfg.manifold)
        check_compatible(model.cfg, manifold.cfg)
        if meta.get("manifold_info") != mmeta.get("manifold_info"):
            raise CompatibilityError("AT-net was trained against a different manifold "
                                     f"({meta.get('manifold_info')} vs {mmeta.get('manifold_info')})")
        modality = manifold.cfg.modality
        bounds = mmeta["manifold_info"].get("depth_bounds")
        inputs = _tree_files(Path(cfg.model)) + _tree_files(Path(cfg.manifold))
    manifest = load_manifest(cfg.manifest)
    entries = manifest.select(cfg.split, modality)
    params = meta.get("dsp") or {}
    ids, specs, _, raw = load_split(manifest, cfg.split, modality, 1, params)
    if specs.shape[1] != model.cfg.input_channels:
        raise CompatibilityError(f"audio has {specs.shape[1]} channels, model expects {model.cfg.input_channels}")
    if manifold is None:
        preds = infer_e2e(model, specs, bounds)
    else:
        preds = infer_spectrograms(model, manifold, specs, bounds)
    with atomic_directory(cfg.out) as tmp:
        records = []
        for sid, pred, gt in zip(ids, preds, raw):
            h, w = (cfg.output_size, cfg.output_size) if cfg.output_size else gt.shape
            pred = resize_nearest(pred, h, w)
            if modality == "depth":
                io.write_depth_png(tmp / f"{sid}.png", pred)
            else:
                io.write_seg_png(tmp / f"{sid}.png", pred, manifest.palette or None)
            tensorio.save(tmp / f"{sid}.vtsr", pred.astype(np.float32))
            records.append({"id": sid, "png": f"{sid}.png", "tensor": f"{sid}.vtsr"})
        _write_json(tmp / "predictions.json", {
            "modality": modality, "split": cfg.split, "model_kind": meta["kind"],
            "units": "metres" if modality == "depth" else "class id", "items": records,
        })
        _write_json(tmp / RUN_LOG, _run_log("infer", cfg, inputs + _manifest_inputs(manifest, entries), started,
                                            n_predictions=len(records)))
    return {"predictions": len(records), "modality": modality}


def _load_predictions(folder: Path) -> tuple[dict, dict[str, np.ndarray]]:
    index_path = folder / "predictions.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"{folder} is not an infer output (no predictions.json)")
    index = json.loads(index_path.read_text())
    return index, {r["id"]: tensorio.load(folder / r["tensor"]) for r in index["items"]}


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.6f}"


def cmd_evaluate(cfg: cfgmod.EvaluateConfig, started: float) -> dict:
    """Score predictions against ground truth; writes metrics.json, metrics.tsv and figures."""
    manifest = load_manifest(cfg.manifest)
    runs = {}
    for p in cfg.predictions:
        folder = _require_dir(p, "predictions directory")
        name = folder.name if folder.name not in runs else f"{folder.name}-{len(runs)}"
        runs[name] = _load_predictions(folder)
    modalities = {idx["modality"] for idx, _ in runs.values()}
    splits = {idx["split"] for idx, _ in runs.values()}
    if len(modalities) != 1 or len(splits) != 1:
        raise MetricInputError("all prediction sets must share one modality and one split")
    modality, split = modalities.pop(), splits.pop()
    entries = manifest.select(split, modality)
    reader = io.read_depth_png if modality == "depth" else io.read_seg_png
    ids = [e.id for e in entries]
    gts = [reader(manifest.resolve(e.visual_path)) for e in entries]
    preds = {}
    for name, (_, by_id) in runs.items():
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise MetricInputError(f"{name}: no prediction for {len(missing)} ground-truth items, e.g. {missing[0]}")
        # predictions are resized to the ground-truth grid with nearest neighbour before scoring
        preds[name] = [resize_nearest(by_id[i], *g.shape).astype(np.float64 if modality == "depth" else np.int64)
                       for i, g in zip(ids, gts)]

    report = {"modality": modality, "split": split, "n_images": len(ids), "methods": {}}
    rows = []
    if modality == "depth":
        header = ["method", "abs_rel", "sqr_rel", "rmse_lin", "rmse_log", "auc_crr"]
        curves = {}
        for name, p in preds.items():
            r = depth_metrics(p, gts, eigen_denominator=cfg.eigen_denominator)
            curves[name] = (TAU_GRID, crr_curve(p, gts))
            report["methods"][name] = {**r.to_dict(), "crr_curve": [float(v) for v in curves[name][1]]}
            rows.append([name] + [_fmt(getattr(r, k)) for k in header[1:]])
    else:
        classes = list(range(max(manifest.num_classes, 1 + max(int(g.max()) for g in gts))))
        tables = {name: per_class_iou(p, gts, classes) for name, p in preds.items()}
        header = ["method", "miou"] + [f"iou_{c}" for c in classes]
        for name, p in preds.items():
            r = miou(p, gts, classes, exclusion={k: v for k, v in tables.items() if k != name})
            report["methods"][name] = r.to_dict()
            rows.append([name, _fmt(r.miou)] + [_fmt(r.per_class_iou[c]) for c in classes])

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report)
    table = "\n".join("\t".join(r) for r in [header] + rows) + "\n"
    (out / "metrics.tsv").write_text(table)
    figures = []
    if cfg.figures:
        first = next(iter(preds))
        if modality == "depth":
            figures.append(plotting.plot_crr_curves(curves, out / "crr_curve.png"))
            lo, hi = manifest.depth_bounds or (None, None)
            figures.append(plotting.plot_examples(gts, preds[first], out / "examples.png", vmin=lo, vmax=hi))
        else:
            names = manifest.class_names or [str(c) for c in classes]
            figures.append(plotting.plot_class_iou({k: tables[k] for k in preds}, names, out / "class_iou.png"))
            figures.append(plotting.plot_examples(gts, preds[first], out / "examples.png", cmap="tab10",
                                                  vmin=0, vmax=9))
    inputs = [manifest.root / "manifest.jsonl"] + [f for p in cfg.predictions for f in _tree_files(Path(p))]
    _write_json(out / RUN_LOG, _run_log("evaluate", cfg, inputs, started,
                                        figures=[f.name for f in figures]))
    sys.stdout.write(table)
    return {"metrics": str(out / "metrics.json")}


HANDLERS: dict[str, typing.Callable] = {
    "preprocess": cmd_preprocess,
    "gen-synth": cmd_gen_synth,
    "train-vqvae": cmd_train_vqvae,
    "train-atnet": cmd_train_atnet,
    "train-e2e": cmd_train_e2e,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.perf_counter()
    command = None
    try:
        command, cfg, verbose = parse_config(argv)
        logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, stream=sys.stderr,
                            format="%(name)s %(levelname)s %(message)s")
        torch.use_deterministic_algorithms(True, warn_only=True)
        summary = HANDLERS[command](cfg, started)
        log.info("%s done: %s", command, summary)
        return EXIT_CODES["ok"]
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except BaseException as exc:  # noqa: BLE001 - every failure becomes one JSON line
        if isinstance(exc, KeyboardInterrupt):
            kind = "internal"
        else:
            kind = _classify(exc)
        line = {"error": kind, "code": EXIT_CODES[kind], "type": type(exc).__name__,
                "message": " ".join(str(exc).split()), "command": command}
        sys.stderr.write(json.dumps(line, sort_keys=True) + "\n")
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
