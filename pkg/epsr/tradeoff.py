"""Perception-distortion plane: regions, region-wise ranking, sweeps and curve fits."""

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from .image import Image, bicubic_downsample
from .logger import logger, log_execution_time, EPSRError, FittingError, UsageError
from .metrics import evaluate_pair, report_means
from .models import (
    CurveFit, LossWeights, PerceptualMetric, RankEntry, RankingTable, Region, RegionRanking,
    TradeoffPoint, TrainConfig,
)
from .networks import load_pretrained_generator, super_resolve
from .niqe import NiqeModel
from .trainer import train_gan

REGIONS: Tuple[Region, ...] = (
    Region(index=1, lower=None, upper=11.5),
    Region(index=2, lower=11.5, upper=12.5),
    Region(index=3, lower=12.5, upper=16.0),
)
FIXTURE_PATH = Path(__file__).parent / "data" / "pirm_fixture.csv"
FIXTURE_DATASET = "PIRM-self"
POINT_COLUMNS = ("label", "rmse", "pi")
SWEEP_COLUMNS = ["label", "lambda1", "lambda2", "lambda3", "rmse", "pi_or_niqe", "checkpoint_path"]
CURVE_FAMILY = "pi = a + b * exp(-c * rmse)"
CURVE_STARTS = (0.01, 0.1, 0.5, 1.0, 2.0)
MIN_CURVE_POINTS = 4
MIN_DISTINCT_RMSE = 3

GridEntry = Union[Tuple[float, float], Tuple[float, float, float]]


def assign_region(rmse: float) -> Optional[Region]:
    """Region whose bounds hold ``rmse``; None above the last bound."""
    if rmse < 0:
        raise UsageError(f"RMSE must be non-negative, got {rmse}", argument="rmse")
    for region in REGIONS:
        if region.contains(rmse):
            return region
    return None


def _rankable(point: TradeoffPoint) -> bool:
    return not point.failed and point.rmse is not None and point.pi is not None


def rank(points: Sequence[TradeoffPoint]) -> RankingTable:
    """Bucket points by region; lowest perceptual score first, then lower RMSE, then label."""
    metrics = {p.metric for p in points if _rankable(p)}
    if len(metrics) > 1:
        raise UsageError("Cannot rank PI and NIQE points together", argument="points")
    metric = metrics.pop() if metrics else PerceptualMetric.PI

    buckets: Dict[int, List[RankEntry]] = {region.index: [] for region in REGIONS}
    out_of_range: List[RankEntry] = []
    skipped = 0
    for point in points:
        if not _rankable(point):
            skipped += 1
            continue
        entry = RankEntry(label=point.label, pi=point.pi, rmse=point.rmse)
        region = assign_region(point.rmse)
        if region is None:
            out_of_range.append(entry)
        else:
            buckets[region.index].append(entry)
    if skipped:
        logger.warning("Points without RMSE or perceptual score left out of the ranking", skipped=skipped)

    def order(entry: RankEntry):
        return (entry.pi, entry.rmse, entry.label)

    regions = [
        RegionRanking(region=region, entries=sorted(buckets[region.index], key=order))
        for region in REGIONS if buckets[region.index]
    ]
    return RankingTable(regions=regions, out_of_range=sorted(out_of_range, key=order), metric=metric)


def _optional(value: Any) -> Optional[float]:
    return None if value is None or pd.isna(value) else float(value)


def load_points(path: Union[str, Path], dataset: Optional[str] = None) -> List[TradeoffPoint]:
    """Read trade-off points from a scores CSV with at least label, rmse and pi columns."""
    frame = pd.read_csv(path)
    missing = [column for column in POINT_COLUMNS if column not in frame.columns]
    if missing:
        raise UsageError(f"Scores CSV {path} is missing column(s): {', '.join(missing)}", argument=missing[0])
    if dataset is not None and "dataset" in frame.columns:
        available = sorted(str(d) for d in frame["dataset"].dropna().unique())
        if dataset not in available:
            raise UsageError(
                f"Scores CSV {path} has no rows for dataset {dataset!r}; available: {', '.join(available)}",
                argument="dataset",
            )
        frame = frame[frame["dataset"] == dataset]

    points = []
    for row in frame.to_dict(orient="records"):
        points.append(TradeoffPoint(
            label=str(row["label"]),
            rmse=_optional(row["rmse"]),
            pi=_optional(row["pi"]),
            dataset=row.get("dataset") if isinstance(row.get("dataset"), str) else None,
            psnr=_optional(row.get("psnr")),
            ssim=_optional(row.get("ssim")),
        ))
    without_rmse = sum(1 for p in points if p.rmse is None)
    if without_rmse:
        logger.warning("Rows without RMSE cannot be placed in a region", rows=without_rmse, dataset=dataset)
    return points


def load_fixture(dataset: str = FIXTURE_DATASET) -> List[TradeoffPoint]:
    """Published scores bundled with the package."""
    return load_points(FIXTURE_PATH, dataset=dataset)


def _curve_data(points: Sequence[TradeoffPoint]) -> Tuple[np.ndarray, np.ndarray]:
    usable = sorted((p.rmse, p.pi) for p in points if _rankable(p))
    data = np.asarray(usable, dtype=np.float64).reshape(-1, 2)
    return data[:, 0], data[:, 1]


def fit_curve(points: Sequence[TradeoffPoint]) -> CurveFit:
    """Least-squares fit of pi = a + b * exp(-c * rmse), c >= 0, from several starts."""
    r, y = _curve_data(points)
    counts = {"points": int(r.size), "distinct_rmse": int(np.unique(r).size)}
    if r.size < MIN_CURVE_POINTS or counts["distinct_rmse"] < MIN_DISTINCT_RMSE:
        raise FittingError(
            f"Curve fit needs >= {MIN_CURVE_POINTS} points with >= {MIN_DISTINCT_RMSE} distinct RMSE values",
            counts=counts,
        )

    def residuals(params):
        a, b, c = params
        return a + b * np.exp(-c * r) - y

    best = None
    for c0 in CURVE_STARTS:
        design = np.column_stack([np.ones_like(r), np.exp(-c0 * r)])
        (a0, b0), *_ = np.linalg.lstsq(design, y, rcond=None)
        result = least_squares(
            residuals, x0=[a0, b0, c0], bounds=([-np.inf, -np.inf, 0.0], [np.inf, np.inf, np.inf]),
            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=10000,
        )
        if best is None or result.cost < best.cost:
            best = result
    a, b, c = (float(v) for v in best.x)
    fit = CurveFit(a=a, b=b, c=c, residual_norm=float(np.linalg.norm(best.fun)), n_points=int(r.size),
                   family=CURVE_FAMILY)
    logger.debug("Trade-off curve fitted", a=a, b=b, c=c, residual_norm=fit.residual_norm)
    return fit


def _grid_weights(entry: GridEntry, base: LossWeights) -> LossWeights:
    """Full triple, or (lambda2, lambda3) with lambda1 from ``base``.

    A (lambda2, 0) pair is a reconstruction-only point: lambda1 is 0 as well.
    """
    values = tuple(float(v) for v in entry)
    if len(values) == 2:
        lambda2, lambda3 = values
        lambda1 = 0.0 if lambda3 == 0.0 and lambda2 > 0.0 else base.lambda1
        return LossWeights.of(lambda1, lambda2, lambda3)
    if len(values) == 3:
        return LossWeights.of(*values)
    raise UsageError(f"Grid entries are (lambda2, lambda3) or full triples, got {entry!r}", argument="grid")


def derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate_generator_point(
    label: str,
    checkpoint: Union[str, Path],
    config: TrainConfig,
    eval_images: Sequence[Image],
    niqe_model: Optional[NiqeModel] = None,
    ma_scores: Optional[Dict[str, float]] = None,
) -> TradeoffPoint:
    """Dataset-mean RMSE and PI (NIQE when Ma-scores are missing) of one generator."""
    generator = load_pretrained_generator(checkpoint, config.generator)
    ma_scores = ma_scores or {}
    rows = []
    for i, hr in enumerate(eval_images):
        image_id = hr.stem if hr.source else f"image{i:03d}"
        sr = super_resolve(generator, bicubic_downsample(hr, config.scale))
        rows.append(evaluate_pair(sr, hr, image_id, niqe_model=niqe_model, ma=ma_scores.get(image_id)))
    means = report_means(rows)
    if all(row.pi is not None for row in rows):
        metric, score = PerceptualMetric.PI, means["pi"]
    else:
        metric, score = PerceptualMetric.NIQE, means["niqe"]
    return TradeoffPoint(
        label=label, rmse=means["rmse"], pi=score, metric=metric,
        psnr=means["psnr"], ssim=means["ssim"], weights=config.weights, checkpoint_path=str(checkpoint),
    )


@log_execution_time
def sweep(
    base_config: TrainConfig,
    grid: Sequence[GridEntry],
    eval_images: Sequence[Image],
    out_dir: Union[str, Path],
    pretrained: Optional[Union[str, Path]] = None,
    train_images: Optional[Sequence[Image]] = None,
    niqe_model: Optional[NiqeModel] = None,
    ma_scores: Optional[Dict[str, float]] = None,
    workers: int = 1,
) -> List[TradeoffPoint]:
    """Train one GAN per grid entry from the shared init and place it on the plane."""
    out_dir = Path(out_dir)
    jobs = []
    for index, entry in enumerate(grid):
        weights = _grid_weights(entry, base_config.weights)
        config = base_config.model_copy(update={"weights": weights, "seed": derived_seed(base_config.seed, index)})
        label = f"sweep{index:02d}_l1={weights.lambda1:g}_l2={weights.lambda2:g}_l3={weights.lambda3:g}"
        jobs.append((index, label, config))

    def _run(job) -> TradeoffPoint:
        index, label, config = job
        try:
            outcome = train_gan(config, out_dir / f"point{index:02d}", pretrained=pretrained, images=train_images)
            return evaluate_generator_point(
                label, outcome.generator_checkpoint, config, eval_images, niqe_model, ma_scores
            )
        except EPSRError as e:
            logger.error("Sweep point failed", error=e, label=label)
            return TradeoffPoint(label=label, weights=config.weights, failed=True, error=str(e))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_run, jobs))
    else:
        points = [_run(job) for job in jobs]
    logger.info("Sweep finished", points=len(points), failed=sum(p.failed for p in points))
    return points


def sweep_frame(points: Sequence[TradeoffPoint]) -> pd.DataFrame:
    records = []
    for point in points:
        weights = point.weights.as_tuple() if point.weights else (None, None, None)
        records.append({
            "label": point.label,
            "lambda1": weights[0],
            "lambda2": weights[1],
            "lambda3": weights[2],
            "rmse": point.rmse,
            "pi_or_niqe": point.pi,
            "checkpoint_path": point.checkpoint_path,
        })
    return pd.DataFrame(records, columns=SWEEP_COLUMNS)


def write_sweep(points: Sequence[TradeoffPoint], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sweep_frame(points).to_csv(path, index=False)
    return path


def read_sweep(path: Union[str, Path], metric: PerceptualMetric = PerceptualMetric.PI) -> List[TradeoffPoint]:
    frame = pd.read_csv(path)
    missing = [column for column in SWEEP_COLUMNS if column not in frame.columns]
    if missing:
        raise UsageError(f"Sweep CSV {path} is missing column(s): {', '.join(missing)}", argument=missing[0])
    points = []
    for row in frame.to_dict(orient="records"):
        lambdas = [_optional(row[k]) for k in ("lambda1", "lambda2", "lambda3")]
        rmse, score = _optional(row["rmse"]), _optional(row["pi_or_niqe"])
        points.append(TradeoffPoint(
            label=str(row["label"]),
            rmse=rmse,
            pi=score,
            metric=metric,
            weights=LossWeights.of(*lambdas) if None not in lambdas else None,
            checkpoint_path=row["checkpoint_path"] if isinstance(row["checkpoint_path"], str) else None,
            failed=rmse is None or score is None,
        ))
    return points


def export_plane(points: Sequence[TradeoffPoint], fit: Optional[CurveFit] = None,
                 samples: int = 50) -> Dict[str, Any]:
    """Points, region bounds, ranking and (when possible) the fitted curve as one document."""
    table = rank(points)
    if fit is None and sum(_rankable(p) for p in points) >= MIN_CURVE_POINTS:
        try:
            fit = fit_curve(points)
        except FittingError as e:
            logger.warning("No curve exported", reason=str(e))
    curve = None
    if fit is not None:
        r, _ = _curve_data(points)
        grid = np.linspace(r.min(), r.max(), samples) if r.size else np.array([])
        curve = fit.model_dump()
        curve["samples"] = [{"rmse": float(x), "pi": fit.evaluate(float(x))} for x in grid]
    return {
        "metric": table.metric.value,
        "regions": [region.model_dump() for region in REGIONS],
        "points": [point.model_dump(mode="json") for point in points],
        "ranking": table.model_dump(mode="json"),
        "curve": curve,
    }


def write_plane(document: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2))
    return path
