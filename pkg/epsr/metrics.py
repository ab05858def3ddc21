"""Full-reference distortion metrics, the Perceptual Index and dataset reports."""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .image import Image, load_png, rgb_to_y
from .logger import logger, log_execution_time, FittingError, UsageError
from .models import MetricReport, MetricRow
from .niqe import NiqeModel, niqe_score

PSNR_CAP = 99.0
BORDER = 4
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DYNAMIC_RANGE = 255.0
REPORT_COLUMNS = ["image_id", "rmse", "psnr", "ssim", "identical", "niqe", "ma", "pi"]
MEAN_COLUMNS = ["rmse", "psnr", "ssim", "niqe", "ma", "pi"]

LumaLike = Union[Image, np.ndarray]


def _plane255(image: LumaLike) -> np.ndarray:
    if isinstance(image, Image):
        if image.channels != 1:
            raise UsageError("Distortion metrics take luma images; apply rgb_to_y first", argument="image")
        values = image.pixels[:, :, 0]
    else:
        values = np.asarray(image, dtype=np.float64)
        if values.ndim != 2:
            raise UsageError(f"Expected a 2-d luma plane, got shape {values.shape}", argument="image")
    return values * DYNAMIC_RANGE


def _pair(a: LumaLike, b: LumaLike) -> Tuple[np.ndarray, np.ndarray]:
    pa, pb = _plane255(a), _plane255(b)
    if pa.shape != pb.shape:
        raise UsageError(f"Shape mismatch {pa.shape} vs {pb.shape}", argument="b")
    return pa, pb


def eval_luma_crop(est: Image, ref: Image, border: int = BORDER) -> Tuple[Image, Image]:
    """Luma of both images with ``border`` pixels removed from every side."""
    if (est.height, est.width) != (ref.height, ref.width):
        raise UsageError(
            f"Extent mismatch: estimate {est.height}x{est.width} vs reference {ref.height}x{ref.width}",
            argument="est",
        )
    if min(est.height, est.width) <= 2 * border:
        raise UsageError(
            f"Image {est.height}x{est.width} too small for a {border}-pixel border crop", argument="est"
        )
    crops = []
    for image in (est, ref):
        luma = rgb_to_y(image) if image.channels == 3 else image
        crops.append(Image(pixels=luma.pixels[border:-border, border:-border], source=image.source))
    return crops[0], crops[1]


def rmse(a: LumaLike, b: LumaLike) -> float:
    pa, pb = _pair(a, b)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def psnr_from_rmse(value: float) -> float:
    if value == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(DYNAMIC_RANGE / value))


def psnr(a: LumaLike, b: LumaLike) -> float:
    """PSNR in dB; identical inputs report ``PSNR_CAP``."""
    return psnr_from_rmse(rmse(a, b))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    axis = np.arange(size) - (size - 1) / 2.0
    taps = np.exp(-(axis ** 2) / (2.0 * sigma ** 2))
    window = np.outer(taps, taps)
    return window / window.sum()


def ssim(a: LumaLike, b: LumaLike) -> float:
    """Mean SSIM over all fully-contained Gaussian windows."""
    pa, pb = _pair(a, b)
    if min(pa.shape) < SSIM_WINDOW:
        raise UsageError(f"Image {pa.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
                         argument="a")
    window = gaussian_window()
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2

    def local(values):
        return np.einsum("ijkl,kl->ij", sliding_window_view(values, window.shape), window)

    mu_a, mu_b = local(pa), local(pb)
    var_a = local(pa * pa) - mu_a ** 2
    var_b = local(pb * pb) - mu_b ** 2
    cov = local(pa * pb) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def perceptual_index(ma: float, niqe: float) -> float:
    if not (math.isfinite(ma) and math.isfinite(niqe)):
        raise UsageError("perceptual_index needs finite Ma and NIQE scores", argument="ma")
    return 0.5 * ((10.0 - ma) + niqe)


def load_ma_scores(path: Union[str, Path]) -> Dict[str, float]:
    """Externally computed Ma-scores from a CSV with columns image_id, ma."""
    frame = pd.read_csv(path, dtype={"image_id": str})
    missing = [column for column in ("image_id", "ma") if column not in frame.columns]
    if missing:
        raise UsageError(f"Ma-score CSV {path} is missing column(s): {', '.join(missing)}", argument="ma_scores")
    return {str(row.image_id): float(row.ma) for row in frame.itertuples(index=False)}


def evaluate_pair(
    est: Image,
    ref: Image,
    image_id: str,
    niqe_model: Optional[NiqeModel] = None,
    ma: Optional[float] = None,
) -> MetricRow:
    est_y, ref_y = eval_luma_crop(est, ref)
    error = rmse(est_y, ref_y)
    niqe = None
    if niqe_model is not None:
        try:
            niqe = niqe_score(est_y, niqe_model)
        except (FittingError, UsageError) as e:
            logger.warning("NIQE unavailable for image", image_id=image_id, reason=str(e))
    pi = perceptual_index(ma, niqe) if ma is not None and niqe is not None else None
    return MetricRow(
        image_id=image_id,
        rmse=error,
        psnr=psnr_from_rmse(error),
        ssim=ssim(est_y, ref_y),
        identical=error == 0.0,
        niqe=niqe,
        ma=ma,
        pi=pi,
    )


def report_means(rows: List[MetricRow]) -> Dict[str, Optional[float]]:
    """Column means in row order; a column with no values has mean None."""
    means: Dict[str, Optional[float]] = {}
    for column in MEAN_COLUMNS:
        values = [getattr(row, column) for row in rows if getattr(row, column) is not None]
        means[column] = math.fsum(values) / len(values) if values else None
    return means


def list_pngs(directory: Union[str, Path]) -> Dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"Not a directory: {directory}", argument=str(directory))
    return {path.stem: path for path in sorted(directory.glob("*.png"))}


@log_execution_time
def evaluate_dataset(
    est_dir: Union[str, Path],
    ref_dir: Union[str, Path],
    niqe_model: Optional[NiqeModel] = None,
    ma_scores: Optional[Dict[str, float]] = None,
    workers: int = 1,
    niqe_model_source: Optional[str] = None,
) -> MetricReport:
    """Score every estimate against the reference with the same file stem."""
    estimates, references = list_pngs(est_dir), list_pngs(ref_dir)
    unmatched = sorted(set(estimates) ^ set(references))
    if unmatched:
        raise UsageError(f"Unmatched image stems: {', '.join(unmatched)}", argument="est_dir")
    if not estimates:
        raise UsageError(f"No PNG images in {est_dir}", argument="est_dir")

    ma_scores = ma_scores or {}
    if niqe_model is not None and not ma_scores:
        logger.warning("No Ma-scores supplied; reporting NIQE alone, PI unavailable")

    def _score(stem: str) -> MetricRow:
        return evaluate_pair(
            load_png(estimates[stem]), load_png(references[stem]), stem,
            niqe_model=niqe_model, ma=ma_scores.get(stem),
        )

    stems = sorted(estimates)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_score, stems))
    else:
        rows = [_score(stem) for stem in stems]

    report = MetricReport(rows=rows, means=report_means(rows), niqe_model=niqe_model_source)
    logger.info("Dataset evaluated", images=len(rows), **{k: v for k, v in report.means.items() if v is not None})
    return report


def report_frame(report: MetricReport) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in report.rows], columns=REPORT_COLUMNS)


def write_report(report: MetricReport, csv_path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the per-image CSV and a JSON document with rows and means next to it."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(report).to_csv(csv_path, index=False)
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2))
    return csv_path, json_path
