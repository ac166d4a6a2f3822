#!/usr/bin/env python3
"""
Plate Nutrient Tracker - CLI
Usage:
  python main.py gen-data                 # Render the synthetic study into data/
  python main.py train-ae                 # Train the convolutional autoencoder
  python main.py train-meal               # Train one classification head per meal
  python main.py evaluate                 # Intake + nutrient evaluation reports
  python main.py report                   # Summary tables and agreement plots
  python main.py timing                   # Per-stage wall-clock report
"""

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional

from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from autoencoder import build_training_corpus, load_feature_extractor, save_autoencoder, train_autoencoder
from config import PipelineConfig, apply_overrides, config_hash, load_config
from errors import TrackerError, UnknownMeal
from meal_classifier import head_summary, save_meal_head, train_meal_head
from model_store import HeadRegistry
from nutrients import NUTRIENT_UNITS, clamp_for_display, sum_plate
from pipeline import EvaluationResult, IntakeEvaluator
from plate_dataset import generate_study, load_manifest, load_study_plan, read_manifest_records, write_manifest
from reporting import (
    metadata_header,
    plot_agreement,
    read_report,
    write_evaluation_reports,
    write_summaries,
    write_timing,
)

console = Console()
logger = logging.getLogger("plate_tracker")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def create_parser():
    """Argument parser with one subcommand per pipeline stage"""
    parser = _Parser(
        description="🍽️ Plate Nutrient Tracker",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data                         # Synthetic plates from data/study_plan.json
  %(prog)s --seed 7 train-ae                # Autoencoder with another seed
  %(prog)s train-meal --meal breakfast      # One meal head only
  %(prog)s train-ae --manifest m.jsonl --out ae.pntw
  %(prog)s gen-data --seed 3 --noise-sigma 0.05
  %(prog)s --threads 4 evaluate             # Series evaluated on 4 workers
  %(prog)s report                           # Summary tables + plots/<nutrient>.svg
        """
    )
    parser.add_argument('--config', metavar='PATH', help='Config file (default: app_config.json)')
    parser.add_argument('--seed', type=int, help='Override the configured seed')
    parser.add_argument('--threads', type=int, help='Worker threads for evaluation')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')

    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    gen = commands.add_parser('gen-data', help='Render synthetic plate series and a manifest')
    gen.add_argument('--plan', metavar='PATH', help='Study plan JSON (default: paths.study_plan)')
    gen.add_argument('--out', metavar='DIR', help='Output directory (default: paths.data_dir)')
    gen.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Same as the global --seed')
    gen.add_argument('--noise-sigma', type=float, metavar='CM', help='Depth noise SD (default: generator.noise_sigma_cm)')

    ae = commands.add_parser('train-ae', help='Train the autoencoder on the manifest plates')
    ae.add_argument('--manifest', metavar='PATH', help='Plate manifest (default: paths.manifest)')
    ae.add_argument('--config', metavar='PATH', default=argparse.SUPPRESS, help='Same as the global --config')
    ae.add_argument('--out', dest='ae_out', metavar='PATH', help='Weight file (default: paths.autoencoder)')

    meal = commands.add_parser('train-meal', help='Train per-meal classification heads')
    meal.add_argument('--meal', action='append', metavar='MEAL_ID',
                      help='Meal to train (repeatable, default: every meal in the manifest)')
    meal.add_argument('--manifest', metavar='PATH', help='Plate manifest (default: paths.manifest)')
    meal.add_argument('--ae', metavar='PATH', help='Autoencoder weights (default: paths.autoencoder)')
    meal.add_argument('--out', dest='heads_out', metavar='DIR', help='Head weight directory (default: paths.weights_dir)')

    commands.add_parser('evaluate', help='Evaluate intake and nutrient agreement')
    commands.add_parser('report', help='Summary tables and plots from evaluation output')
    commands.add_parser('timing', help='Per-stage timing of an evaluation run')
    return parser


def setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=verbose)],
    )
    for noisy in ("matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def command_paths(args) -> Dict[str, Optional[str]]:
    """Subcommand file flags mapped onto config paths"""
    return {
        "study_plan": getattr(args, 'plan', None),
        "manifest": getattr(args, 'manifest', None),
        "autoencoder": getattr(args, 'ae', None) or getattr(args, 'ae_out', None),
        "weights_dir": getattr(args, 'heads_out', None),
    }


def _header(config: PipelineConfig) -> str:
    return metadata_header(config_hash(config), config.seed)


# --- commands ---

def cmd_gen_data(config: PipelineConfig, args) -> int:
    plan_path = config.paths.study_plan
    out_dir = Path(args.out or config.paths.data_dir)
    console.print(f"[yellow]🔄 Rendering study {plan_path} (seed {config.seed})...[/yellow]")

    studies = load_study_plan(plan_path)
    series = generate_study(studies, config.seed, config.calibration, config.generator)
    manifest = write_manifest(series, out_dir, Path(config.paths.manifest).name)

    table = Table(show_header=True, header_style="bold magenta", box=box.SIMPLE)
    table.add_column("Meal", style="cyan")
    table.add_column("Classes", justify="right")
    table.add_column("Series", justify="right")
    table.add_column("Plates", justify="right")
    for study in studies:
        n_series = study.series_count
        table.add_row(study.plan.meal_id, str(study.plan.n_classes), str(n_series),
                      str(n_series * len(config.generator.levels)))
    console.print(Panel(table, title="🍽️ Synthetic study", padding=(1, 2)))
    console.print(f"[green]✅ Wrote {manifest}[/green]")
    return 0


def cmd_train_ae(config: PipelineConfig, args) -> int:
    series = load_manifest(config.paths.manifest)
    base = [(plate.color, plate.food_mask) for s in series for plate in s.plates if plate.food_mask.any()]
    console.print(f"[yellow]🔄 Augmenting {len(base)} plates to {config.augmentation.n_images} images...[/yellow]")

    ae_config = config.seeded_autoencoder()
    corpus = build_training_corpus(base, config.augmentation, ae_config.seed)
    result = train_autoencoder(corpus, ae_config)
    path = save_autoencoder(config.paths.autoencoder, result)

    stats = Table(show_header=False, box=box.SIMPLE, border_style="cyan")
    stats.add_column("", style="cyan")
    stats.add_column("", justify="right")
    stats.add_row("Parameters", f"{result.model.parameter_count():,}")
    stats.add_row("Stop epoch", str(result.training.stop_epoch))
    stats.add_row("Best epoch", str(result.training.best_epoch))
    stats.add_row("Best val loss", f"{result.final_val_loss:.6g}")
    stats.add_row("Early stop", "yes" if result.training.stopped_early else "no")
    console.print(Panel(stats, title="🧠 Autoencoder", border_style="cyan"))
    console.print(f"[green]✅ Saved {path}[/green]")
    return 0


def cmd_train_meal(config: PipelineConfig, args) -> int:
    plans = {study.plan.meal_id: study.plan for study in load_study_plan(config.paths.study_plan)}
    by_meal: Dict[str, List] = defaultdict(list)
    for s in load_manifest(config.paths.manifest):
        by_meal[s.meal_id].extend(s.plates)

    meal_ids = args.meal or sorted(by_meal)
    unknown = [m for m in meal_ids if m not in plans or m not in by_meal]
    if unknown:
        raise UnknownMeal(f"no study plan or plates for meals {unknown}")

    extractor = load_feature_extractor(config.paths.autoencoder)
    registry = HeadRegistry(config.paths.head_registry)
    head_config = config.seeded_meal_head()
    heads = {}
    for meal_id in meal_ids:
        console.print(f"[yellow]🔄 Training head for {meal_id}...[/yellow]")
        head = train_meal_head(extractor, by_meal[meal_id], plans[meal_id], head_config, config.augmentation)
        path = save_meal_head(Path(config.paths.weights_dir) / f"head_{meal_id}.pntw", head)
        registry.register(meal_id, path)
        heads[meal_id] = head

    table = Table(show_header=True, header_style="bold magenta", box=box.SIMPLE)
    table.add_column("Meal", style="cyan")
    table.add_column("Classes", justify="right")
    table.add_column("Parameters", justify="right")
    for row in head_summary(heads):
        table.add_row(row["meal_id"], str(row["classes"]), str(row["parameters"]))
    console.print(Panel(table, title="🧠 Meal heads", padding=(1, 2)))
    console.print(f"[green]✅ Registered {len(heads)} heads in {config.paths.head_registry}[/green]")
    return 0


def run_evaluation(config: PipelineConfig) -> EvaluationResult:
    records = read_manifest_records(config.paths.manifest)
    if not records:
        logger.warning("Manifest %s has no plates", config.paths.manifest)
        return EvaluationResult()
    evaluator = IntakeEvaluator.from_config(config, sorted({r.meal_id for r in records}))
    return evaluator.evaluate_records(records)


def show_evaluation(evaluation: EvaluationResult):
    after = evaluation.after_plates()
    stats = Table(show_header=False, box=box.SIMPLE, border_style="cyan")
    stats.add_column("", style="cyan")
    stats.add_column("", justify="right")
    stats.add_row("Series", str(evaluation.series_count))
    stats.add_row("Plates", str(len(evaluation.plates)))
    stats.add_row("Failed plates", str(len(evaluation.errors)))
    stats.add_row("Low-IOU flags", str(sum(p.flagged for p in evaluation.plates)))
    console.print(Panel(stats, title="📊 Evaluation", border_style="cyan"))

    if not after:
        return
    volume = clamp_for_display(sum_plate([p.volume_nutrients for p in after]))
    mass = clamp_for_display(sum_plate([p.mass_nutrients for p in after]))
    table = Table(show_header=True, header_style="bold magenta", box=box.SIMPLE)
    table.add_column("Nutrient", style="cyan")
    table.add_column("Volume method", justify="right")
    table.add_column("Weighed", justify="right")
    for nutrient, value in volume.as_dict().items():
        weighed = mass.get(nutrient)
        if value is None or weighed is None:
            continue
        unit = NUTRIENT_UNITS[nutrient]
        table.add_row(nutrient, f"{value:,.2f} {unit}", f"{weighed:,.2f} {unit}")
    console.print(Panel(table, title=f"🥗 Total intake over {len(after)} plates", padding=(1, 2)))


def cmd_evaluate(config: PipelineConfig, args) -> int:
    console.print(f"[yellow]🔄 Evaluating {config.paths.manifest} "
                  f"({config.evaluation.mask_source} masks)...[/yellow]")
    evaluation = run_evaluation(config)
    written = write_evaluation_reports(evaluation, config.paths.report_dir, _header(config))
    show_evaluation(evaluation)

    if not evaluation.success:
        for error in evaluation.errors:
            console.print(f"[red]❌ {error['series_id']}/{error['intake_index']}: {error['message']}[/red]")
        console.print(f"[yellow]💡 Details in {written['errors']}[/yellow]")
        return 2
    console.print(f"[green]✅ Reports in {config.paths.report_dir}[/green]")
    return 0


def cmd_report(config: PipelineConfig, args) -> int:
    report_dir = Path(config.paths.report_dir)
    written = write_summaries(report_dir)
    plots = plot_agreement(report_dir)

    _, summary = read_report(written["summary_bulk_intake"])
    table = Table(box=box.DOUBLE_EDGE)
    table.add_column("Dataset", style="cyan")
    table.add_column("Meal")
    table.add_column("Images", justify="right")
    table.add_column("Intake error (mL)", justify="right")
    table.add_column("3D % error", justify="right")
    for row in summary.to_dict("records"):
        meal = row["meal_id"] if row["row_type"] == "meal" else f"[bold]{row['row_type']}[/bold]"
        table.add_row(str(row["dataset"]), str(meal), str(row["n_images"]),
                      f"{row['intake_error_signed_mean']:.1f} ± {row['intake_error_signed_sd']:.1f}",
                      f"{row['pct3d_signed_mean']:.1f} ± {row['pct3d_signed_sd']:.1f}")
    console.print(Panel(table, title="📈 Bulk intake accuracy", padding=(1, 2)))
    console.print(f"[green]✅ {len(written)} summary tables, {len(plots)} plots in {report_dir}[/green]")
    return 0


def cmd_timing(config: PipelineConfig, args) -> int:
    evaluation = run_evaluation(config)
    path = write_timing(evaluation, Path(config.paths.report_dir) / "timing.csv", _header(config))

    table = Table(show_header=True, header_style="bold magenta", box=box.SIMPLE)
    table.add_column("Stage", style="cyan")
    table.add_column("Seconds / plate", justify="right")
    for stage, seconds in evaluation.stage_means().items():
        table.add_row(stage, f"{seconds:.4f}")
    console.print(Panel(table, title=f"⏱️ Timing over {len(evaluation.plates)} plates", padding=(1, 2)))
    console.print(f"[green]✅ Wrote {path}[/green]")
    return 0


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train-ae': cmd_train_ae,
    'train-meal': cmd_train_meal,
    'evaluate': cmd_evaluate,
    'report': cmd_report,
    'timing': cmd_timing,
}


def main(argv=None) -> int:
    """Entry point; returns the process exit code"""
    parser = create_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = apply_overrides(load_config(args.config), seed=args.seed, threads=args.threads,
                                 paths=command_paths(args), noise_sigma_cm=getattr(args, 'noise_sigma', None))
        return COMMANDS[args.command](config, args)
    except TrackerError as e:
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n[yellow]👋 Interrupted[/yellow]")
        return 1


if __name__ == "__main__":
    sys.exit(main())
