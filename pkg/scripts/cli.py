#!/usr/bin/env python3

import json
from functools import wraps
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
from dotenv import load_dotenv

from config import settings
from epsr.config_loader import build_config, deep_merge, load_train_config, parse_override, write_effective_config
from epsr.image import (
    bicubic_downsample, bicubic_upsample, crop_to_multiple, load_dataset, load_png,
    read_manifest, rgb_to_y, save_png,
)
from epsr.logger import logger, EPSRError, FittingError, UsageError
from epsr.metrics import evaluate_dataset, load_ma_scores, write_report
from epsr.models import GeneratorConfig, PerceptualMetric, REGION_WEIGHTS, RunConfig, TrainConfig, weight_preset
from epsr.networks import load_pretrained_generator, super_resolve
from epsr.niqe import DEFAULT_PATCH, NiqeModel, niqe_fit
from epsr.checkpoint import read_manifest as read_archive_manifest
from epsr.tradeoff import (
    FIXTURE_DATASET, FIXTURE_PATH, export_plane, fit_curve, load_points, rank, read_sweep,
    sweep as run_sweep, write_plane, write_sweep,
)
from epsr.trainer import pretrain_generator, prepare_run_dirs, resume as resume_training, train_gan

load_dotenv()

PRETRAIN_WEIGHTS = {"weights": {"lambda1": 0.0, "lambda2": 1.0, "lambda3": 0.0}}


def handle_errors(func):
    """Turn domain errors into a logged error and a non-zero exit."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except EPSRError as e:
            logger.error(f"Command {func.__name__} failed", error=e)
            raise click.ClickException(str(e)) from e
    return wrapper


def run_options(func):
    """--config/--seed/--out/--override/--preset/--desk shared by the training commands."""
    options = [
        click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     help='JSON training config'),
        click.option('--seed', type=int, default=None, help='Random seed (overrides the config)'),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                     help='Output directory (default: $EPSR_OUTPUT_DIR/<command>)'),
        click.option('--override', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Dotted config override, repeatable (e.g. weights.lambda3=0.6)'),
        click.option('--preset', default=None,
                     type=click.Choice([f"{m}-region{r}" for m in REGION_WEIGHTS for r in REGION_WEIGHTS[m]]),
                     help='Loss-weight preset for a region'),
        click.option('--desk/--no-desk', default=None, help='Force the desk-scale preset on or off'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _resolve_run(command: str, config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
                 overrides: Tuple[str, ...], preset: Optional[str], desk: Optional[bool],
                 base: Optional[Dict] = None):
    items = list(overrides)
    if preset:
        weights = weight_preset(preset)
        items = [f"weights.{k}={v}" for k, v in weights.model_dump().items()] + items
    config = load_train_config(config_path, items, seed=seed, desk=desk, base=base)
    out = Path(out_dir or Path(settings.OUTPUT_DIR) / command)
    run = RunConfig(
        command=command,
        config_path=config_path,
        overrides=dict(item.split("=", 1) for item in items),
        seed=seed,
        out_dir=str(out),
    )
    echoed = write_effective_config(out, config, run)
    click.echo(f"Effective config written to {echoed}")
    return config, out


@click.group()
def cli():
    """Perceptual super-resolution laboratory CLI"""
    pass


@cli.command()
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--scale', default=4, show_default=True, help='Downsampling factor')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True, help='Output directory')
@handle_errors
def degrade(manifest: str, scale: int, out_dir: str):
    """Bicubic-downsample every HR image in MANIFEST to <stem>_x4.png"""
    paths = read_manifest(manifest)
    if not paths:
        raise UsageError(f"Manifest {manifest} lists no images", argument="manifest")
    target = prepare_run_dirs(out_dir)["images"]
    failures = []
    for path in paths:
        try:
            hr = crop_to_multiple(load_png(path), scale)
            save_png(bicubic_downsample(hr, scale), target / f"{path.stem}_x{scale}.png")
        except EPSRError as e:
            logger.error("Could not degrade image", error=e, path=str(path))
            failures.append(str(path))
    click.echo(f"Wrote {len(paths) - len(failures)} LR images to {target}")
    if failures:
        raise click.ClickException(f"{len(failures)} image(s) failed: {', '.join(failures)}")


@cli.command()
@run_options
@handle_errors
def pretrain(config_path, seed, out_dir, overrides, preset, desk):
    """MSE-only generator pretraining"""
    config, out = _resolve_run("pretrain", config_path, seed, out_dir, overrides, preset, desk,
                               base=PRETRAIN_WEIGHTS)
    outcome = pretrain_generator(config, out)
    click.echo(f"Generator checkpoint: {outcome.generator_checkpoint}")
    click.echo(f"Training log: {outcome.log_path}")


@cli.command()
@run_options
@click.option('--pretrained', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Generator checkpoint used as initialization')
@handle_errors
def train(config_path, seed, out_dir, overrides, preset, desk, pretrained):
    """GAN training on the composite loss"""
    config, out = _resolve_run("train", config_path, seed, out_dir, overrides, preset, desk)
    outcome = train_gan(config, out, pretrained=pretrained)
    click.echo(f"Generator checkpoint: {outcome.generator_checkpoint}")
    click.echo(f"State checkpoint: {outcome.state_checkpoint}")
    click.echo(f"Discriminator steps: {outcome.discriminator_steps}, generator steps: {outcome.generator_steps}")


@cli.command()
@click.argument('state', type=click.Path(exists=True, dir_okay=False))
@click.option('--override', 'overrides', multiple=True, metavar='KEY=VALUE',
              help='Change e.g. max_iterations or epochs; the batch size must stay the same')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
              help='Output directory (default: the run the state belongs to)')
@handle_errors
def resume(state: str, overrides: Tuple[str, ...], out_dir: Optional[str]):
    """Continue training from a state checkpoint"""
    config = None
    if overrides:
        document = read_archive_manifest(state)["metadata"]["config"]
        for item in overrides:
            document = deep_merge(document, parse_override(item))
        config = build_config(TrainConfig, document)
    trainer = resume_training(state, out_dir=out_dir, config=config)
    outcome = trainer.run()
    click.echo(f"Resumed to iteration {outcome.iterations}; state: {outcome.state_checkpoint}")


@cli.command()
@click.argument('input_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Generator checkpoint')
@click.option('--bicubic', is_flag=True, help='Write bicubic-upsampled baselines instead')
@click.option('--scale', default=4, show_default=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@handle_errors
def infer(input_dir: str, checkpoint: Optional[str], bicubic: bool, scale: int, out_dir: str):
    """Super-resolve every PNG in INPUT_DIR"""
    if not bicubic and checkpoint is None:
        raise UsageError("Pass --checkpoint or --bicubic", argument="checkpoint")
    generator = None
    if not bicubic:
        metadata = read_archive_manifest(checkpoint).get("metadata", {})
        generator = load_pretrained_generator(checkpoint, GeneratorConfig(**metadata.get("config", {})))
    target = prepare_run_dirs(out_dir)["images"]
    paths = sorted(Path(input_dir).glob("*.png"))
    if not paths:
        raise UsageError(f"No PNG images in {input_dir}", argument="input_dir")
    for path in paths:
        lr = load_png(path)
        sr = bicubic_upsample(lr, scale) if bicubic else super_resolve(generator, lr)
        save_png(sr, target / f"{path.stem}.png")
    click.echo(f"Wrote {len(paths)} SR images to {target}")


@cli.command(name='eval')
@click.argument('est_dir', type=click.Path(exists=True, file_okay=False))
@click.argument('ref_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--out', 'out_csv', type=click.Path(dir_okay=False), required=True, help='Report CSV path')
@click.option('--niqe-model', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--ma-scores', type=click.Path(exists=True, dir_okay=False), default=None,
              help='CSV with image_id, ma columns')
@click.option('--workers', default=settings.NUM_WORKERS, show_default=True)
@handle_errors
def eval_cmd(est_dir: str, ref_dir: str, out_csv: str, niqe_model: Optional[str],
             ma_scores: Optional[str], workers: int):
    """Score estimates against references (luma, 4-pixel border crop)"""
    model = NiqeModel.load(niqe_model) if niqe_model else None
    scores = load_ma_scores(ma_scores) if ma_scores else None
    report = evaluate_dataset(est_dir, ref_dir, niqe_model=model, ma_scores=scores,
                              workers=workers, niqe_model_source=niqe_model)
    csv_path, json_path = write_report(report, out_csv)
    click.echo(f"\nEvaluated {len(report.rows)} images:")
    click.echo("-" * 80)
    for name, value in report.means.items():
        click.echo(f"{name.upper():6s} {'n/a' if value is None else f'{value:.4f}'}")
    click.echo("-" * 80)
    click.echo(f"Report saved to {csv_path} and {json_path}")


@cli.command(name='niqe-fit')
@click.argument('manifest', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True, help='Model archive path')
@click.option('--patch-size', default=DEFAULT_PATCH, show_default=True)
@handle_errors
def niqe_fit_cmd(manifest: str, out_path: str, patch_size: int):
    """Fit a pristine NIQE model on the HR images of MANIFEST"""
    images = [rgb_to_y(im) if im.channels == 3 else im
              for im in load_dataset(read_manifest(manifest), scale=1, workers=settings.NUM_WORKERS)]
    model = niqe_fit(images, patch_size=patch_size)
    path = model.save(out_path)
    click.echo(f"NIQE model saved to {path}")


@cli.command(name='rank')
@click.argument('scores', type=click.Path(exists=True, dir_okay=False), required=False)
@click.option('--dataset', default=None,
              help=f'Dataset rows to rank (default: {FIXTURE_DATASET} for the bundled scores, every row otherwise)')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None, help='Ranking JSON path')
@click.option('--format', 'output_format', type=click.Choice(['json', 'table']), default='table')
@handle_errors
def rank_cmd(scores: Optional[str], dataset: Optional[str], out_path: Optional[str], output_format: str):
    """Region-wise ranking by lowest perceptual score (defaults to the bundled published scores)"""
    if scores is None:
        table = rank(load_points(FIXTURE_PATH, dataset=dataset or FIXTURE_DATASET))
    else:
        table = rank(load_points(scores, dataset=dataset))
    document = table.model_dump(mode="json")
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(document, indent=2))
        click.echo(f"Ranking saved to {out_path}")

    if output_format == 'json':
        click.echo(json.dumps(document, indent=2))
        return
    if not table.regions and not table.out_of_range:
        click.echo("No rankable points.")
        return
    for ranking in table.regions:
        click.echo(f"\n{ranking.region.describe()}")
        click.echo("-" * 80)
        for position, entry in enumerate(ranking.entries, start=1):
            marker = " (winner)" if position == 1 else ""
            click.echo(f"{position:2d}. {entry.label:12s} {table.metric.value.upper()} {entry.pi:.4f}"
                       f"  RMSE {entry.rmse:.4f}{marker}")
    if table.out_of_range:
        click.echo("\nOut of range (RMSE > 16):")
        for entry in table.out_of_range:
            click.echo(f"    {entry.label:12s} {table.metric.value.upper()} {entry.pi:.4f}  RMSE {entry.rmse:.4f}")


def _parse_grid(grid: Tuple[str, ...], grid_preset: Optional[str]) -> List[Tuple[float, ...]]:
    entries: List[Tuple[float, ...]] = []
    if grid_preset:
        entries += [w.as_tuple() for _, w in sorted(REGION_WEIGHTS[grid_preset].items())]
    for item in grid:
        try:
            entries.append(tuple(float(v) for v in item.split(",")))
        except ValueError:
            raise UsageError(f"Grid entry must be comma-separated numbers, got {item!r}", argument="grid") from None
    if not entries:
        raise UsageError("Sweep needs at least one --grid entry or --grid-preset", argument="grid")
    return entries


@cli.command()
@run_options
@click.option('--grid', multiple=True, metavar='L2,L3 | L1,L2,L3', help='Weight grid entry, repeatable')
@click.option('--grid-preset', type=click.Choice(sorted(REGION_WEIGHTS)), default=None,
              help='Add the three region weight settings of a model')
@click.option('--pretrained', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--eval-manifest', type=click.Path(exists=True, dir_okay=False), required=True,
              help='HR images used to place each point on the plane')
@click.option('--niqe-model', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--ma-scores', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--workers', default=settings.NUM_WORKERS, show_default=True)
@handle_errors
def sweep(config_path, seed, out_dir, overrides, preset, desk, grid, grid_preset, pretrained,
          eval_manifest, niqe_model, ma_scores, workers):
    """Train one model per weight setting and report its (RMSE, PI) point"""
    entries = _parse_grid(grid, grid_preset)
    config, out = _resolve_run("sweep", config_path, seed, out_dir, overrides, preset, desk)
    eval_images = load_dataset(read_manifest(eval_manifest), scale=config.scale, workers=settings.NUM_WORKERS)
    points = run_sweep(
        config, entries, eval_images, out,
        pretrained=pretrained,
        niqe_model=NiqeModel.load(niqe_model) if niqe_model else None,
        ma_scores=load_ma_scores(ma_scores) if ma_scores else None,
        workers=workers,
    )
    path = write_sweep(points, out / "reports" / "sweep.csv")
    click.echo(f"Sweep results saved to {path}")
    try:
        fit = fit_curve(points)
        curve_path = out / "reports" / "curve.json"
        curve_path.write_text(json.dumps(fit.model_dump(), indent=2))
        click.echo(f"Curve {fit.family}: a={fit.a:.4f} b={fit.b:.4f} c={fit.c:.4f} -> {curve_path}")
    except FittingError as e:
        logger.warning("Sweep curve not fitted", reason=str(e))
    failed = [p.label for p in points if p.failed]
    if failed:
        raise click.ClickException(f"{len(failed)} sweep point(s) failed: {', '.join(failed)}")


@cli.command(name='export-plane')
@click.argument('sweep_csv', type=click.Path(exists=True, dir_okay=False))
@click.option('--metric', type=click.Choice([m.value for m in PerceptualMetric]), default='pi',
              help='Perceptual score held in the pi_or_niqe column')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True)
@handle_errors
def export_plane_cmd(sweep_csv: str, metric: str, out_path: str):
    """Bundle sweep points, regions, ranking and the fitted curve into one JSON file"""
    points = read_sweep(sweep_csv, metric=PerceptualMetric(metric))
    document = export_plane(points)
    path = write_plane(document, out_path)
    if document["curve"]:
        curve = document["curve"]
        click.echo(f"Curve {curve['family']}: a={curve['a']:.4f} b={curve['b']:.4f} c={curve['c']:.4f}")
    click.echo(f"Plane data saved to {path}")


if __name__ == '__main__':
    cli()
