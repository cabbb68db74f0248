# src/cli.py

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import ModelConfig, RunConfig, load_run_config, log_dir_name, model_config_with_preset
from src.data import atomic_write, generate_synthetic_dataset, read_image, render_overlay, write_image
from src.data_loader import load_annotations, load_dataset
from src.errors import AffkitError, UsageError
from src.evaluation import (
    ReportFormatter,
    evaluate_dataset,
    load_groundtruth_dir,
    load_prediction_dir,
    prediction_record,
    write_predictions,
)
from src.executor import ImageJobExecutor
from src.gradcheck import DEFAULT_SEEDS, resolve_ops, run_gradcheck
from src.logger import status, write_to_log_file
from src.maskops import AffordancePriority
from src.model import AffordanceDetector, LossReport, default_priority, fit

TRAIN_LOG_NAME = "train.jsonl"
DEFAULT_MASK_SIZES = "14,28,56,112,244"


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="affkit",
        description="Joint object detection and affordance segmentation on numpy.",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    gen = commands.add_parser("gen-data", help="write a synthetic dataset")
    gen.add_argument("--config", type=Path, help="key = value config file")
    gen.add_argument("--count", type=int, default=10, help="number of scenes")
    gen.add_argument("--out", type=Path, required=True, help="dataset directory")
    gen.add_argument("--seed", type=int, help="overrides scene.seed")

    train = commands.add_parser("train", help="train a detector and write a checkpoint")
    train.add_argument("--config", type=Path)
    train.add_argument("--data", type=Path, help="dataset directory or manifest (default paths.data)")
    train.add_argument("--iters", type=int, help="overrides model.train.iterations")
    train.add_argument("--out-checkpoint", type=Path, required=True)
    train.add_argument("--seed", type=int, help="overrides seed")

    infer = commands.add_parser("infer", help="detect and segment images")
    infer.add_argument("--checkpoint", type=Path, required=True)
    source = infer.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", type=Path, help="a single PPM image")
    source.add_argument("--data", type=Path, help="every image of a dataset")
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--config", type=Path, help="read eval.priority from this file")

    evaluate = commands.add_parser("eval", help="score predictions against groundtruth")
    evaluate.add_argument("--pred", type=Path, required=True, help="infer output or dataset directory")
    evaluate.add_argument("--gt", type=Path, required=True, help="dataset directory")
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--config", type=Path)

    ablate = commands.add_parser("ablate", help="train and score one model per mask-head size")
    ablate.add_argument("--config", type=Path)
    ablate.add_argument("--data", type=Path, help="training dataset (default paths.data)")
    ablate.add_argument("--test-data", type=Path, help="evaluation dataset (default: --data)")
    ablate.add_argument("--mask-sizes", default=DEFAULT_MASK_SIZES, help="comma-separated presets")
    ablate.add_argument("--iters", type=int)
    ablate.add_argument("--out", type=Path, help="default paths.out")
    ablate.add_argument("--seed", type=int)

    grad = commands.add_parser("gradcheck", help="finite-difference check of every backward pass")
    grad.add_argument("--op", default="all")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--seeds", type=int, default=DEFAULT_SEEDS, help="random cases per op")
    return parser


def _with_iterations(model: ModelConfig, iterations: Optional[int]) -> ModelConfig:
    if iterations is None:
        return model
    if iterations < 0:
        raise UsageError(f"--iters must be non-negative, got {iterations}")
    train = model.train.model_copy(update={"iterations": iterations})
    return model.model_copy(update={"train": train})


def _required_path(flag: Optional[Path], fallback: Optional[str], name: str) -> Path:
    if flag is not None:
        return flag
    if fallback:
        return Path(fallback)
    raise UsageError(f"{name} is required (flag or config paths entry)")


def train_detector(
    model: ModelConfig, data: Path, seed: int, log_dir: Path, run_id: str
) -> Tuple[AffordanceDetector, pd.DataFrame]:
    """Train from scratch; one JSONL record per iteration under log_dir."""
    examples = load_dataset(data, model.num_object_classes, model.num_affordance_classes)
    log_file = log_dir / TRAIN_LOG_NAME
    log_file.unlink(missing_ok=True)
    detector = AffordanceDetector(model, seed=seed)
    total = model.train.iterations

    def on_step(report: LossReport) -> None:
        write_to_log_file(report, TRAIN_LOG_NAME, run_id=run_id, jsonlines_flag=True, log_dir=str(log_dir))
        if report.num_positive_rois == 0:
            status(f"iteration {report.iteration}: no positive RoIs sampled")
        if (report.iteration + 1) % 50 == 0 or report.iteration + 1 == total:
            status(f"iteration {report.iteration + 1}/{total} loss {report.total:.4f}")

    reports = fit(detector, examples, on_step=on_step)
    losses = pd.DataFrame([r.as_row() for r in reports], columns=["iter", "total", "cls", "loc", "aff", "rpn", "lr"])
    return detector, losses


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    text = frame.to_csv(index=False, float_format="%.8g")
    atomic_write(path, lambda handle: handle.write(text.encode("utf-8")))


def run_inference(
    detector: AffordanceDetector,
    images: Sequence,
    out_dir: Path,
    priority: Optional[AffordancePriority] = None,
    overlays: bool = True,
) -> List[dict]:
    """
    Infer every (image_id, image array) pair on the worker pool and write
    detections.jsonl, <id>_mask.pgm and <id>_overlay.ppm under out_dir.
    """
    executor = ImageJobExecutor(lambda image_id, image: detector.infer(image, priority))
    results = executor.run_or_raise(images)
    records, masks = [], {}
    for image_id, image in sorted(images, key=lambda pair: pair[0]):
        result = results[image_id]
        records.append(
            prediction_record(
                image_id,
                [d.box for d in result.detections],
                [d.label for d in result.detections],
                [d.score for d in result.detections],
            )
        )
        masks[image_id] = result.merged
        if overlays:
            write_image(out_dir / f"{image_id}_overlay.ppm", render_overlay(image, result.merged))
    write_predictions(out_dir, records, masks)
    return records


class CommandCoordinator:
    """
    Routes a parsed command line to its handler and turns errors into
    `error: <message>` lines and exit codes.
    """

    def __init__(self, stdout=None, stderr=None):
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.formatter = ReportFormatter()
        self.handlers = {
            "gen-data": self._handle_gen_data,
            "train": self._handle_train,
            "infer": self._handle_infer,
            "eval": self._handle_eval,
            "ablate": self._handle_ablate,
            "gradcheck": self._handle_gradcheck,
        }

    def run(self, argv: Sequence[str]) -> int:
        """
        Main entry point: parse, dispatch, map failures to exit codes.

        Returns:
            0 on success, 1 on validation errors, 2 on runtime failures
        """
        try:
            args = build_parser().parse_args(list(argv))
            return self.handlers[args.command](args)
        except Exception as e:
            return self._handle_error(e)

    def _print(self, text: str) -> None:
        print(text, file=self.stdout)

    def _load_config(self, path: Optional[Path]) -> RunConfig:
        return load_run_config(path)

    def _handle_gen_data(self, args) -> int:
        config = self._load_config(args.config)
        scene = config.scene if args.seed is None else config.scene.model_copy(update={"seed": args.seed})
        manifest = generate_synthetic_dataset(scene, args.count, args.out)
        self._print(f"wrote {args.count} scene(s) to {manifest}")
        return 0

    def _handle_train(self, args) -> int:
        config = self._load_config(args.config)
        data = _required_path(args.data, config.paths.data, "--data")
        seed = config.seed if args.seed is None else args.seed
        model = _with_iterations(config.model, args.iters)
        checkpoint = Path(args.out_checkpoint)

        detector, losses = train_detector(
            model, data, seed, checkpoint.parent / log_dir_name(), run_id=checkpoint.stem
        )
        save_checkpoint(detector, checkpoint)
        loss_csv = checkpoint.parent / f"{checkpoint.stem}.loss.csv"
        _write_csv(losses, loss_csv)
        final = f", final loss {losses['total'].iloc[-1]:.6f}" if len(losses) else ""
        self._print(f"trained {len(losses)} iteration(s){final}; wrote {checkpoint} and {loss_csv}")
        return 0

    def _handle_infer(self, args) -> int:
        detector = load_checkpoint(args.checkpoint)
        priority = None
        if args.config is not None:
            config = self._load_config(args.config)
            priority = AffordancePriority.from_names(config.eval.priority, config.eval.class_names)
        priority = priority or default_priority(detector.config.num_affordance_classes)

        if args.image is not None:
            images = [(args.image.stem, read_image(args.image))]
        else:
            annotations = load_annotations(args.data, validate_masks=False)
            images = [(a.image_id, read_image(a.image)) for a in annotations]
        records = run_inference(detector, images, Path(args.out), priority)
        count = sum(len(r["detections"]) for r in records)
        self._print(f"{count} detection(s) in {len(records)} image(s); wrote {args.out}")
        return 0

    def _handle_eval(self, args) -> int:
        config = self._load_config(args.config)
        num_classes = config.model.num_affordance_classes
        groundtruth = load_groundtruth_dir(args.gt, num_classes)
        predictions = load_prediction_dir(args.pred, num_classes)
        report = evaluate_dataset(predictions, groundtruth, config.eval)
        self.formatter.write_report_csv(report, Path(args.out) / "report.csv")
        self._print(self.formatter.format_report(report))
        return 0

    def _handle_ablate(self, args) -> int:
        config = self._load_config(args.config)
        data = _required_path(args.data, config.paths.data, "--data")
        test_data = args.test_data or data
        out = _required_path(args.out, config.paths.out, "--out")
        seed = config.seed if args.seed is None else args.seed
        presets = [p.strip() for p in args.mask_sizes.split(",") if p.strip()]
        if not presets:
            raise UsageError("--mask-sizes lists no preset")

        test_images = [(a.image_id, read_image(a.image)) for a in load_annotations(test_data, validate_masks=False)]
        groundtruth = load_groundtruth_dir(test_data, config.model.num_affordance_classes)
        rows: List[Dict] = []
        for preset in presets:
            model = _with_iterations(model_config_with_preset(config.model, preset), args.iters)
            variant_dir = Path(out) / model.mask_label
            status(f"ablation variant {model.mask_label}: mask sizes {model.mask_sizes()}")
            detector, losses = train_detector(
                model, data, seed, variant_dir / log_dir_name(), run_id=model.mask_label
            )
            save_checkpoint(detector, variant_dir / "model.ckpt")
            _write_csv(losses, variant_dir / "model.loss.csv")
            run_inference(detector, test_images, variant_dir, overlays=False)
            report = evaluate_dataset(
                load_prediction_dir(variant_dir, model.num_affordance_classes), groundtruth, config.eval
            )
            self.formatter.write_report_csv(report, variant_dir / "report.csv")
            rows.append(
                {
                    "variant": model.mask_label,
                    "mask_size": model.mask_size,
                    "f_beta": report.average.f_beta,
                    "detection_recall": report.detection_recall,
                }
            )

        table = self.formatter.ablation_table(rows)
        self.formatter.write_ablation_csv(table, Path(out) / "ablation.csv")
        self._print(self.formatter.format_ablation(table))
        return 0

    def _handle_gradcheck(self, args) -> int:
        if args.seeds < 1:
            raise UsageError(f"--seeds must be positive, got {args.seeds}")
        results = run_gradcheck(resolve_ops(args.op), seed=args.seed, num_seeds=args.seeds)
        width = max(len(r.op) for r in results)
        for r in results:
            verdict = "PASS" if r.passed else "FAIL"
            self._print(f"{r.op:<{width}}  max_rel_err={r.max_rel_error:.3e}  seeds={r.seeds}  {verdict}")
        return 0 if all(r.passed for r in results) else 2

    def _handle_error(self, error: Exception) -> int:
        """Single `error:` line on stderr; the exit code follows the error type."""
        if isinstance(error, AffkitError):
            code = error.exit_code
        elif isinstance(error, FileNotFoundError):
            code = 1
        else:
            code = 2
        message = " ".join(str(error).split()) or type(error).__name__
        print(f"error: {message}", file=self.stderr)
        return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    return CommandCoordinator().run(sys.argv[1:] if argv is None else argv)
