import argparse
import json
import os
import sys
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, cast

import numpy as np
import numpy.typing as npt
from skimage.segmentation import mark_boundaries

from gnn_seg import __version__
from gnn_seg.artifacts import atomic_write_json, register_artifact, sha256_file
from gnn_seg.config import AppConfig, load_config, load_config_file
from gnn_seg.contracts import RunState, Step, StepFn, StepResult
from gnn_seg.engine import run_steps_result
from gnn_seg.exceptions import ConfigError, GnnSegError, ImageIOError, ValidationError
from gnn_seg.exporters import EXPORT_FORMATS, export_metrics, write_loss_trace
from gnn_seg.graphbuild import build_graph, write_graph
from gnn_seg.imagecore import (
    BACKGROUND,
    CSF,
    GM,
    WM,
    LabelMask,
    PhantomSpec,
    Slice,
    find_modality_files,
    generate_phantom,
    generate_phantom_set,
    list_sample_dirs,
    load_phantom_spec,
    normalize,
    read_mask,
    read_sample_dir,
    read_slice_dir,
    write_mask,
    write_raw_image,
    write_rgb_image,
    write_sample_dir,
)
from gnn_seg.logger import JsonlLogger
from gnn_seg.metrics import evaluate
from gnn_seg.pipeline import (
    GnnSegConfig,
    GnnSegModel,
    Segmentation,
    TrainResult,
    TrainSettings,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    segment,
    train,
)
from gnn_seg.run_context import RunContext, iso_utc_from_ms, now_ms
from gnn_seg.superpixel import SnicParams, read_labeling, snic_segment, write_labeling

MANIFEST_FILENAME = "manifest.json"
EXIT_UNEXPECTED = 1

# RGB per class id
PALETTE: dict[int, tuple[int, int, int]] = {
    BACKGROUND: (0, 0, 0),
    CSF: (0, 0, 255),
    GM: (0, 255, 0),
    WM: (255, 0, 0),
}
BOUNDARY_COLOR = (1.0, 1.0, 0.0)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_field_flags(parser: argparse.ArgumentParser, cls: type, *, skip: Sequence[str] = ()) -> None:
    """One `--field-name` flag per dataclass field; unset flags stay None."""
    for f in fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, tuple):
            elem = float if default and isinstance(default[0], float) else int
            parser.add_argument(flag, dest=f.name, nargs="+", type=elem, default=None)
        elif isinstance(default, bool) or not isinstance(default, (int, float)):
            parser.add_argument(flag, dest=f.name, type=str, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=type(default), default=None)


def _overrides(args: argparse.Namespace, cls: type) -> dict[str, Any]:
    return {
        f.name: getattr(args, f.name)
        for f in fields(cls)
        if getattr(args, f.name, None) is not None
    }


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON/YAML file with optional 'model' and 'train' sections")
    parser.add_argument("--preset", choices=["default", "tiny"], default="default")
    _add_field_flags(parser, GnnSegConfig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnnseg", description="Superpixel graph attention tissue segmentation")
    p.add_argument("--version", action="version", version=f"gnnseg {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    phantom = sub.add_parser("phantom", help="Write one synthetic phantom slice and its mask")
    phantom.add_argument("--spec", help="PhantomSpec JSON document")
    _add_field_flags(phantom, PhantomSpec)
    phantom.add_argument("--out", required=True, help="Output directory")

    dataset = sub.add_parser("dataset", help="Write a train/test phantom dataset")
    dataset.add_argument("--spec", help="PhantomSpec JSON document")
    _add_field_flags(dataset, PhantomSpec)
    dataset.add_argument("--count", type=int, default=20, help="Training samples")
    dataset.add_argument("--test-count", type=int, default=5, help="Held-out samples")
    dataset.add_argument("--radius-jitter", type=float, default=0.0)
    dataset.add_argument("--out", required=True, help="Output directory")

    sp = sub.add_parser("superpixels", help="SNIC labeling of a slice")
    sp.add_argument("--slice", required=True, help="Directory holding slice_<idx>_<name> files")
    sp.add_argument("--config", help="JSON/YAML file with SnicParams fields")
    _add_field_flags(sp, SnicParams)
    sp.add_argument("--out", required=True, help="Output directory")

    graph = sub.add_parser("graph", help="Region adjacency graph of a labeling")
    graph.add_argument("--labeling", required=True, help="Labeling PNG (with .json sidecar)")
    graph.add_argument("--slice", required=True, help="Directory holding slice_<idx>_<name> files")
    graph.add_argument("--out", required=True, help="Output directory")

    tr = sub.add_parser("train", help="Train a model on a phantom dataset")
    tr.add_argument("--dataset", required=True, help="Dataset directory (uses <dir>/train when present)")
    _add_model_flags(tr)
    _add_field_flags(tr, TrainSettings)
    tr.add_argument("--out", required=True, help="Output directory")

    inf = sub.add_parser("infer", help="Segment one slice or a directory of sample directories")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--slice", required=True, help="Slice directory or directory of slice directories")
    inf.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    inf.add_argument("--out", required=True, help="Output directory")

    ev = sub.add_parser("evaluate", help="Per-class Dice/TP/APD of a predicted mask")
    ev.add_argument("--pred", required=True, help="Predicted mask PNG")
    ev.add_argument("--truth", required=True, help="Reference mask PNG")
    ev.add_argument("--format", choices=[*EXPORT_FORMATS, "both"], default="both")
    ev.add_argument("--out", required=True, help="Output directory")

    rd = sub.add_parser("render", help="PNG overlay of superpixel boundaries or class colors")
    rd.add_argument("--slice", required=True, help="Directory holding slice_<idx>_<name> files")
    group = rd.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask", help="Class mask PNG")
    group.add_argument("--labeling", help="Labeling PNG (with .json sidecar)")
    rd.add_argument("--modality-index", type=int, default=0)
    rd.add_argument("--out", required=True, help="Output directory")

    cfg = sub.add_parser("config", help="Print resolved application, model and training config")
    cfg.add_argument("--profile", choices=["local", "dev", "prod"], help="Override GNNSEG_PROFILE")
    _add_model_flags(cfg)
    _add_field_flags(cfg, TrainSettings)

    params = sub.add_parser("params", help="Print trainable parameter counts")
    _add_model_flags(params)

    replay = sub.add_parser("replay", help="Re-run the command recorded in a manifest")
    replay.add_argument("manifest", help="Path to a manifest.json")
    replay.add_argument("--out", help="Output directory (defaults to the recorded one)")

    return p


# ---------------------------------------------------------------------------
# Command execution
# ---------------------------------------------------------------------------


@dataclass
class CommandPlan:
    name: str
    out_dir: Path
    steps: list[Step]
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    inputs: list[Path] = field(default_factory=list)


@dataclass(frozen=True)
class CommandOutcome:
    run_id: str
    out_dir: Path
    manifest: dict[str, Any]


def _app_config() -> AppConfig:
    return load_config()


def _record(ctx: RunContext, state: RunState, path: Path, *, name: str, type: str) -> None:
    register_artifact(ctx, name=name, path=path, type=type)
    state.add_output(path)


def _load_slice(directory: Path, ctx: RunContext, log: JsonlLogger) -> Slice:
    slc = normalize(read_slice_dir(directory))
    for warning in slc.warnings:
        log.warning("slice_warning", run_id=ctx.run_id, slice=directory.as_posix(), warning=warning)
    return slc


def _input_digests(paths: Sequence[Path]) -> dict[str, str]:
    digests: dict[str, str] = {}
    for p in paths:
        if p.is_dir():
            for f in sorted(x for x in p.rglob("*") if x.is_file()):
                digests[f.as_posix()] = sha256_file(f)
        elif p.is_file():
            digests[p.as_posix()] = sha256_file(p)
    return digests


def _manifest_step(plan: CommandPlan, argv: Sequence[str], started_ms: int) -> Step:
    def write_manifest(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        outputs: dict[str, str] = {}
        for path in state.output_paths():
            outputs[path.relative_to(plan.out_dir).as_posix()] = sha256_file(path)
        manifest = {
            "command": plan.name,
            "argv": list(argv),
            "config": plan.config,
            "seed": plan.seed,
            "inputs": _input_digests(plan.inputs),
            "outputs": outputs,
            "version": __version__,
            "run_id": ctx.run_id,
            "started_at": iso_utc_from_ms(started_ms),
            "finished_at": iso_utc_from_ms(now_ms()),
        }
        path = plan.out_dir / MANIFEST_FILENAME
        atomic_write_json(path, manifest)
        register_artifact(ctx, name="manifest", path=path, type="json")
        log.info("manifest_written", run_id=ctx.run_id, outputs=len(outputs))
        return StepResult(ok=True, outputs={"outputs": len(outputs)})

    return Step(name="write_manifest", fn=write_manifest)


class CommandFailed(GnnSegError):
    exit_code = EXIT_UNEXPECTED


def execute_plan(plan: CommandPlan, argv: Sequence[str]) -> CommandOutcome:
    app = _app_config()
    started = now_ms()
    steps = [*plan.steps, _manifest_step(plan, argv, started)]
    ctx, result = run_steps_result(
        runs_dir=app.runs_dir, steps=steps, name=plan.name, log_level=app.log_level
    )
    if not result.ok:
        exc = result.exception
        if isinstance(exc, GnnSegError):
            exc.details.setdefault("run_id", ctx.run_id)
            raise exc
        raise CommandFailed(
            result.error or "command failed", run_id=ctx.run_id, step=result.failed_step
        )
    manifest = json.loads((plan.out_dir / MANIFEST_FILENAME).read_text(encoding="utf-8"))
    return CommandOutcome(run_id=ctx.run_id, out_dir=plan.out_dir, manifest=manifest)


def _step(name: str, fn: StepFn) -> Step:
    return Step(name=name, fn=fn)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _resolve_phantom_spec(args: argparse.Namespace) -> PhantomSpec:
    base = load_phantom_spec(Path(args.spec)).to_dict() if args.spec else PhantomSpec().to_dict()
    base.update(_overrides(args, PhantomSpec))
    return PhantomSpec.from_dict(base)


def _resolve_snic(args: argparse.Namespace) -> SnicParams:
    base = SnicParams().to_dict()
    if args.config:
        raw = load_config_file(Path(args.config))
        section = raw.get("superpixel", raw)
        if not isinstance(section, dict):
            raise ConfigError("superpixel section must be a mapping")
        base.update(section)
    base.update(_overrides(args, SnicParams))
    try:
        return SnicParams.from_dict(base)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"malformed superpixel config: {e}") from e


def _resolve_model(
    args: argparse.Namespace, *, modalities_hint: int | None = None
) -> tuple[GnnSegConfig, TrainSettings]:
    raw: dict[str, Any] = load_config_file(Path(args.config)) if args.config else {}
    unknown = sorted(set(raw) - {"model", "train"})
    if unknown:
        raise ConfigError("unknown config sections", sections=unknown)
    model_raw = raw.get("model") or {}
    train_raw = raw.get("train") or {}
    if not isinstance(model_raw, dict) or not isinstance(train_raw, dict):
        raise ConfigError("'model' and 'train' sections must be mappings")

    preset = GnnSegConfig.tiny() if args.preset == "tiny" else GnnSegConfig()
    model_values = preset.to_dict()
    model_values.update(cast(dict[str, Any], model_raw))
    flags = _overrides(args, GnnSegConfig)
    model_values.update(flags)
    if modalities_hint is not None and "modalities" not in model_raw and "modalities" not in flags:
        model_values["modalities"] = modalities_hint
    config = GnnSegConfig.from_dict(model_values)

    train_values = TrainSettings().to_dict()
    train_values.update(cast(dict[str, Any], train_raw))
    train_values.update(_overrides(args, TrainSettings))
    settings = TrainSettings.from_dict(train_values)
    return config, settings


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_phantom(args: argparse.Namespace) -> CommandPlan:
    spec = _resolve_phantom_spec(args)
    out_dir = Path(args.out)

    def generate(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        slc, mask = generate_phantom(spec)
        for path in write_sample_dir(out_dir, slc, mask, spec=spec):
            _record(ctx, state, path, name=path.stem, type=path.suffix.lstrip("."))
        log.info("phantom_written", run_id=ctx.run_id, size=spec.size, seed=spec.seed)
        return StepResult(ok=True, outputs={"histogram": mask.histogram()})

    inputs = [Path(args.spec)] if args.spec else []
    return CommandPlan("phantom", out_dir, [_step("generate", generate)], spec.to_dict(), spec.seed, inputs)


def cmd_dataset(args: argparse.Namespace) -> CommandPlan:
    spec = _resolve_phantom_spec(args)
    if args.count < 1 or args.test_count < 0:
        raise ValidationError("count must be >= 1 and test-count >= 0", count=args.count, test_count=args.test_count)
    out_dir = Path(args.out)

    def generate(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        samples = generate_phantom_set(
            args.count + args.test_count, spec, radius_jitter=args.radius_jitter
        )
        for i, sample in enumerate(samples):
            split = "train" if i < args.count else "test"
            index = i if split == "train" else i - args.count
            sample_dir = out_dir / split / f"sample_{index:03d}"
            for path in write_sample_dir(sample_dir, sample.slice, sample.mask, spec=sample.spec):
                _record(ctx, state, path, name=f"{split}/{sample_dir.name}/{path.stem}", type=path.suffix.lstrip("."))
        log.info("dataset_written", run_id=ctx.run_id, train=args.count, test=args.test_count)
        return StepResult(ok=True, outputs={"train": args.count, "test": args.test_count})

    config = {
        "spec": spec.to_dict(),
        "count": args.count,
        "test_count": args.test_count,
        "radius_jitter": args.radius_jitter,
    }
    inputs = [Path(args.spec)] if args.spec else []
    return CommandPlan("dataset", out_dir, [_step("generate", generate)], config, spec.seed, inputs)


def cmd_superpixels(args: argparse.Namespace) -> CommandPlan:
    params = _resolve_snic(args)
    slice_dir = Path(args.slice)
    out_dir = Path(args.out)

    def run(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        slc = _load_slice(slice_dir, ctx, log)
        labeling = snic_segment(slc, params)
        for path in write_labeling(labeling, out_dir / "labeling.png", params=params):
            _record(ctx, state, path, name=path.name, type=path.suffix.lstrip("."))
        log.info("labeling_written", run_id=ctx.run_id, regions=labeling.n)
        return StepResult(ok=True, outputs={"regions": labeling.n})

    return CommandPlan("superpixels", out_dir, [_step("segment", run)], params.to_dict(), None, [slice_dir])


def cmd_graph(args: argparse.Namespace) -> CommandPlan:
    labeling_path = Path(args.labeling)
    slice_dir = Path(args.slice)
    out_dir = Path(args.out)

    def run(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        labeling, _ = read_labeling(labeling_path)
        slc = _load_slice(slice_dir, ctx, log)
        graph = build_graph(labeling, slc)
        path = out_dir / "graph.json"
        write_graph(graph, path)
        _record(ctx, state, path, name="graph", type="json")
        log.info("graph_written", run_id=ctx.run_id, nodes=graph.n, edges=graph.edge_count)
        return StepResult(ok=True, outputs={"nodes": graph.n, "edges": graph.edge_count})

    inputs = [labeling_path, labeling_path.with_suffix(".json"), slice_dir]
    return CommandPlan("graph", out_dir, [_step("build_graph", run)], {}, None, inputs)


def _training_dirs(dataset_dir: Path) -> list[Path]:
    root = dataset_dir / "train" if (dataset_dir / "train").is_dir() else dataset_dir
    return list_sample_dirs(root)


def cmd_train(args: argparse.Namespace) -> CommandPlan:
    dataset_dir = Path(args.dataset)
    sample_dirs = _training_dirs(dataset_dir)
    first = read_slice_dir(sample_dirs[0])
    config, settings = _resolve_model(args, modalities_hint=first.modalities)
    out_dir = Path(args.out)

    def load(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        state.objects["dataset"] = [read_sample_dir(d) for d in sample_dirs]
        log.info("dataset_loaded", run_id=ctx.run_id, samples=len(sample_dirs))
        return StepResult(ok=True, outputs={"samples": len(sample_dirs)})

    def fit(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        model = GnnSegModel.build(config)
        train_log = log.child("train", run_id=ctx.run_id)
        result = train(model, state.require("dataset", list), settings, logger=train_log)
        state.objects["train_result"] = result
        return StepResult(
            ok=True, outputs={"final_loss": result.loss_trace[-1], "steps": result.steps}
        )

    def write(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        result = state.require("train_result", TrainResult)
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(result.model, ckpt, extra={"train": settings.to_dict(), "steps": result.steps})
        _record(ctx, state, ckpt, name="checkpoint", type="ckpt")
        trace = write_loss_trace(result.loss_trace, out_dir / "loss.csv")
        _record(ctx, state, trace, name="loss_trace", type="csv")
        return StepResult(ok=True, outputs={"checkpoint": ckpt.as_posix()})

    plan_config = {"model": config.to_dict(), "train": settings.to_dict()}
    steps = [_step("load_dataset", load), _step("train", fit), _step("write_outputs", write)]
    return CommandPlan("train", out_dir, steps, plan_config, settings.seed, [dataset_dir])


def _infer_targets(root: Path) -> list[tuple[str, Path]]:
    try:
        find_modality_files(root)
        return [("", root)]
    except ImageIOError:
        pass
    targets: list[tuple[str, Path]] = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            find_modality_files(d)
        except ImageIOError:
            continue
        targets.append((d.name, d))
    if not targets:
        raise ImageIOError(f"no slices found under {root}")
    return targets


def _write_segmentation(seg: Segmentation, out_dir: Path) -> list[Path]:
    mask_path = out_dir / "pred_mask.png"
    write_mask(seg.mask, mask_path)
    structure_path = out_dir / "structure.png"
    feature = np.rint(np.clip(seg.feature_map, 0.0, 1.0) * 65535).astype(np.uint16)
    write_raw_image(structure_path, feature, bit_depth=16)
    labeling_paths = write_labeling(seg.sample.labeling, out_dir / "labeling.png")
    return [mask_path, structure_path, *labeling_paths]


def cmd_infer(args: argparse.Namespace) -> CommandPlan:
    ckpt_path = Path(args.checkpoint)
    root = Path(args.slice)
    out_dir = Path(args.out)
    if args.workers < 1:
        raise ValidationError("workers must be >= 1", workers=args.workers)

    def load(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        model, _ = load_checkpoint(ckpt_path)
        state.objects["model"] = model
        state.objects["targets"] = _infer_targets(root)
        return StepResult(ok=True, outputs={"slices": len(state.objects["targets"])})

    def run(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        model = state.require("model", GnnSegModel)
        targets: list[tuple[str, Path]] = state.require("targets", list)

        def one(target: tuple[str, Path]) -> list[Path]:
            name, path = target
            seg = segment(model, read_slice_dir(path))
            return _write_segmentation(seg, out_dir / name if name else out_dir)

        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            written = list(pool.map(one, targets))
        for paths in written:
            for p in paths:
                _record(ctx, state, p, name=p.relative_to(out_dir).as_posix(), type=p.suffix.lstrip("."))
        log.info("inference_done", run_id=ctx.run_id, slices=len(targets), workers=args.workers)
        return StepResult(ok=True, outputs={"slices": len(targets)})

    steps = [_step("load_model", load), _step("segment", run)]
    return CommandPlan("infer", out_dir, steps, {"workers": args.workers}, None, [ckpt_path, root])


def cmd_evaluate(args: argparse.Namespace) -> CommandPlan:
    pred_path = Path(args.pred)
    truth_path = Path(args.truth)
    out_dir = Path(args.out)
    formats = list(EXPORT_FORMATS) if args.format == "both" else [args.format]

    def run(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        report = evaluate(read_mask(pred_path), read_mask(truth_path), slice_id=pred_path.parent.name or "slice")
        for fmt in formats:
            path = export_metrics([report], fmt, out_dir / f"metrics.{fmt}")
            _record(ctx, state, path, name=f"metrics_{fmt}", type=fmt)
        dice_by_class = {c.name: c.dice for c in report.classes}
        log.info("metrics_written", run_id=ctx.run_id, dice=dice_by_class)
        return StepResult(ok=True, outputs={"dice": dice_by_class})

    return CommandPlan("evaluate", out_dir, [_step("evaluate", run)], {"formats": formats}, None, [pred_path, truth_path])


def class_color_image(mask: LabelMask) -> npt.NDArray[np.uint8]:
    lut = np.zeros((256, 3), dtype=np.uint8)
    for class_id, rgb in PALETTE.items():
        lut[class_id] = rgb
    return lut[mask.labels]


def boundary_image(
    slc: Slice, region_of: npt.NDArray[np.int64], modality_index: int
) -> npt.NDArray[np.uint8]:
    gray = slc.modality(modality_index)
    overlay = mark_boundaries(np.dstack([gray, gray, gray]), region_of, color=BOUNDARY_COLOR)
    return np.rint(np.clip(overlay, 0.0, 1.0) * 255).astype(np.uint8)


def cmd_render(args: argparse.Namespace) -> CommandPlan:
    slice_dir = Path(args.slice)
    out_dir = Path(args.out)
    source = Path(args.mask or args.labeling)

    def run(ctx: RunContext, state: RunState, log: JsonlLogger) -> StepResult:
        slc = _load_slice(slice_dir, ctx, log)
        if args.mask:
            mask = read_mask(source)
            if mask.shape != slc.shape:
                raise ValidationError("mask does not match slice", mask=list(mask.shape), slice=list(slc.shape))
            rgb = class_color_image(mask)
        else:
            labeling, _ = read_labeling(source)
            if labeling.shape != slc.shape:
                raise ValidationError("labeling does not match slice")
            rgb = boundary_image(slc, labeling.region_of, args.modality_index)
        path = out_dir / "overlay.png"
        write_rgb_image(path, rgb)
        _record(ctx, state, path, name="overlay", type="png")
        return StepResult(ok=True, outputs={"overlay": path.as_posix()})

    inputs = [slice_dir, source]
    config = {"kind": "mask" if args.mask else "labeling", "modality_index": args.modality_index}
    return CommandPlan("render", out_dir, [_step("render", run)], config, None, inputs)


COMMANDS: dict[str, Callable[[argparse.Namespace], CommandPlan]] = {
    "phantom": cmd_phantom,
    "dataset": cmd_dataset,
    "superpixels": cmd_superpixels,
    "graph": cmd_graph,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def run_recorded(argv: Sequence[str]) -> CommandOutcome:
    args = build_parser().parse_args(list(argv))
    if args.cmd not in COMMANDS:
        raise ValidationError("command does not produce outputs", command=args.cmd)
    return execute_plan(COMMANDS[args.cmd](args), argv)


def _with_out(argv: Sequence[str], out: str) -> list[str]:
    result = list(argv)
    for i, token in enumerate(result):
        if token == "--out" and i + 1 < len(result):
            result[i + 1] = out
            return result
        if token.startswith("--out="):
            result[i] = f"--out={out}"
            return result
    return [*result, "--out", out]


def replay_manifest(manifest_path: Path, *, out: str | None = None) -> dict[str, Any]:
    try:
        recorded = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ImageIOError(f"manifest not found: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise ImageIOError(f"manifest is not valid JSON: {e}", path=str(manifest_path)) from e
    argv = recorded.get("argv")
    if not isinstance(argv, list) or not argv:
        raise ValidationError("manifest has no recorded argv", path=str(manifest_path))

    outcome = run_recorded(_with_out(argv, out) if out else argv)
    expected: dict[str, str] = recorded.get("outputs", {})
    actual: dict[str, str] = outcome.manifest["outputs"]
    mismatched = sorted(k for k in set(expected) | set(actual) if expected.get(k) != actual.get(k))
    report = {
        "ok": not mismatched,
        "command": recorded.get("command"),
        "run_id": outcome.run_id,
        "out": outcome.out_dir.as_posix(),
        "compared": len(expected),
        "mismatched": mismatched,
    }
    if mismatched:
        raise ValidationError("replayed outputs differ from the manifest", mismatched=mismatched, run_id=outcome.run_id)
    return report


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


def _fail(cmd: str | None, exc: BaseException) -> None:
    if isinstance(exc, GnnSegError):
        payload = {"ok": False, "command": cmd, **exc.to_dict()}
        code = exc.exit_code
    else:
        payload = {
            "ok": False,
            "command": cmd,
            "error_type": type(exc).__name__,
            "message": str(exc),
            "exit_code": EXIT_UNEXPECTED,
        }
        code = EXIT_UNEXPECTED
    # single line on stderr for machine consumption
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    raise SystemExit(code)


def main(argv: Sequence[str] | None = None) -> None:
    raw_argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(raw_argv)

    try:
        if args.cmd == "config":
            if args.profile:
                os.environ["GNNSEG_PROFILE"] = args.profile
            app = _app_config()
            config, settings = _resolve_model(args)
            _emit({"app": app.to_safe_dict(), "model": config.to_dict(), "train": settings.to_dict()})
            return

        if args.cmd == "params":
            config, _ = _resolve_model(args)
            counts = count_parameters(GnnSegModel.build(config))
            _emit({"modalities": config.modalities, "gnn_kind": config.gnn_kind, **counts.to_dict()})
            return

        if args.cmd == "replay":
            _emit(replay_manifest(Path(args.manifest), out=args.out))
            return

        outcome = execute_plan(COMMANDS[args.cmd](args), raw_argv)
        _emit(
            {
                "ok": True,
                "command": args.cmd,
                "run_id": outcome.run_id,
                "out": outcome.out_dir.as_posix(),
                "outputs": sorted(outcome.manifest["outputs"]),
            }
        )
    except Exception as e:  # noqa: BLE001 (mapped to exit codes)
        _fail(args.cmd, e)
