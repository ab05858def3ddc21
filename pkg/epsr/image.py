"""Image I/O, colour conversion, bicubic degradation and patch sampling."""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from pydantic import BaseModel, ConfigDict, field_validator

from .logger import logger, ImageIOError, UsageError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PNG_GRAY, PNG_RGB = 0, 2
BT601_Y = (65.481, 128.553, 24.966)
KEYS_A = -0.5


class Image(BaseModel):
    """Decoded raster, (height, width, channels) float64 values in [0, 1]."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pixels: np.ndarray
    source: Optional[str] = None

    @field_validator("pixels", mode="before")
    @classmethod
    def _as_hwc(cls, value: Any) -> np.ndarray:
        values = np.asarray(value, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or values.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {values.shape}")
        return values

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def stem(self) -> str:
        return Path(self.source).stem if self.source else "image"

    @classmethod
    def from_array(cls, values: np.ndarray, source: Optional[str] = None) -> "Image":
        """Build an image, clamping values into [0, 1]."""
        return cls(pixels=np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0), source=source)

    def luma_array(self) -> np.ndarray:
        if self.channels != 1:
            raise UsageError("luma_array() needs a single-channel image", argument="image")
        return self.pixels[:, :, 0]


class PatchPair(BaseModel):
    hr: Image
    lr: Image
    scale: int = 4


def _png_header(path: Path) -> Tuple[int, int]:
    with open(path, "rb") as handle:
        head = handle.read(26)
    if len(head) < 26 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageIOError(f"Not a PNG file: {path}", path=str(path))
    return head[24], head[25]


def load_png(path: Union[str, Path]) -> Image:
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"Image not found: {path}", path=str(path))
    bit_depth, color_type = _png_header(path)
    if bit_depth != 8 or color_type not in (PNG_GRAY, PNG_RGB):
        raise ImageIOError(
            f"Unsupported PNG format (bit depth {bit_depth}, colour type {color_type}); "
            "only 8-bit RGB or grayscale is accepted",
            path=str(path),
        )
    with PILImage.open(path) as handle:
        raw = np.asarray(handle, dtype=np.uint8)
    return Image(pixels=raw.astype(np.float64) / 255.0, source=str(path))


def to_bytes(image: Image) -> np.ndarray:
    """Quantise to 8 bits with round-half-up."""
    return np.floor(np.clip(image.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(image: Image, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = to_bytes(image)
    try:
        PILImage.fromarray(raw[:, :, 0] if image.channels == 1 else raw).save(path, format="PNG")
    except OSError as e:
        raise ImageIOError(f"Could not write image: {e}", path=str(path)) from e
    return path


def cubic_kernel(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    inner = (a + 2) * ax3 - (a + 3) * ax2 + 1
    outer = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, inner, np.where(ax < 2, outer, 0.0))


def resize_taps(in_len: int, out_len: int, antialias: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Tap indices (edge-replicated) and normalised weights for each output sample."""
    scale = out_len / in_len
    width = 4.0
    stretch = 1.0
    if scale < 1 and antialias:
        width /= scale
        stretch = scale

    centers = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2)
    taps = int(np.ceil(width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = stretch * cubic_kernel(stretch * (centers[:, None] - indices))
    weights = weights / weights.sum(axis=1, keepdims=True)
    indices = np.clip(indices, 0, in_len - 1).astype(np.int64)
    return indices, weights


def resize_matrix(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    indices, weights = resize_taps(in_len, out_len, antialias)
    matrix = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), indices.shape[1])
    np.add.at(matrix, (rows, indices.reshape(-1)), weights.reshape(-1))
    return matrix


def resize_array(values: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable bicubic resampling of an HxW or HxWxC array, no clamping."""
    squeeze = values.ndim == 2
    if squeeze:
        values = values[:, :, None]
    rows = resize_matrix(values.shape[0], out_h, antialias)
    cols = resize_matrix(values.shape[1], out_w, antialias)
    out = np.einsum("oh,hwc,pw->opc", rows, values, cols)
    return out[:, :, 0] if squeeze else out


def bicubic_downsample(image: Image, scale: int) -> Image:
    if scale < 1:
        raise UsageError(f"scale must be a positive integer, got {scale}", argument="scale")
    if image.height % scale or image.width % scale:
        raise UsageError(
            f"image extent {image.height}x{image.width} is not divisible by {scale}",
            argument="image",
        )
    out = resize_array(image.pixels, image.height // scale, image.width // scale, antialias=True)
    return Image.from_array(out, source=image.source)


def bicubic_upsample(image: Image, scale: int) -> Image:
    if scale < 1:
        raise UsageError(f"scale must be a positive integer, got {scale}", argument="scale")
    out = resize_array(image.pixels, image.height * scale, image.width * scale, antialias=False)
    return Image.from_array(out, source=image.source)


def upsample_batch(batch: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic upsampling of an N x C x h x w array, no clamping."""
    rows = resize_matrix(batch.shape[2], batch.shape[2] * scale, antialias=False)
    cols = resize_matrix(batch.shape[3], batch.shape[3] * scale, antialias=False)
    return np.einsum("oh,nchw,pw->ncop", rows, batch, cols)


def rgb_to_y(image: Image) -> Image:
    """Studio-swing BT.601 luma, stored as Y/255."""
    if image.channels != 3:
        raise UsageError("rgb_to_y needs a 3-channel image", argument="image")
    r, g, b = (image.pixels[:, :, i] for i in range(3))
    y255 = 16.0 + BT601_Y[0] * r + BT601_Y[1] * g + BT601_Y[2] * b
    return Image(pixels=y255 / 255.0, source=image.source)


def crop_to_multiple(image: Image, scale: int) -> Image:
    """Center-crop so both extents are divisible by ``scale``."""
    height = image.height - image.height % scale
    width = image.width - image.width % scale
    if (height, width) == (image.height, image.width):
        return image
    top = (image.height - height) // 2
    left = (image.width - width) // 2
    return Image(pixels=image.pixels[top:top + height, left:left + width], source=image.source)


def read_manifest(path: Union[str, Path]) -> List[Path]:
    """Dataset manifest: one image path per line; relative paths resolve next to the manifest."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"Manifest not found: {path}", path=str(path))
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = Path(line)
        entries.append(entry if entry.is_absolute() else path.parent / entry)
    return entries


def load_dataset(paths: Sequence[Union[str, Path]], scale: int = 4, workers: int = 1) -> List[Image]:
    """Load and center-crop every image; order always follows ``paths``."""
    def _load(p):
        return crop_to_multiple(load_png(p), scale)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_load, paths))
    return [_load(p) for p in paths]


def images_to_batch(images: Sequence[Image], dtype=np.float32) -> np.ndarray:
    return np.stack([im.pixels.transpose(2, 0, 1) for im in images]).astype(dtype)


def batch_to_images(batch: np.ndarray, sources: Optional[Sequence[Optional[str]]] = None) -> List[Image]:
    sources = sources or [None] * batch.shape[0]
    return [Image.from_array(item.transpose(1, 2, 0), source=src) for item, src in zip(batch, sources)]


class PatchSampler:
    """Seeded stream of aligned HR/LR patch pairs.

    The stream is a pure function of (dataset, patch, seed); its position is
    the generator state, which ``get_state``/``set_state`` expose for resume.
    """

    def __init__(self, images: Sequence[Image], patch: int = 192, scale: int = 4,
                 seed: int = 0, augment: bool = False):
        if not images:
            raise UsageError("Dataset is empty", argument="dataset")
        if patch % scale:
            raise UsageError(f"patch {patch} not divisible by scale {scale}", argument="patch")
        usable = []
        for image in images:
            if image.height < patch or image.width < patch:
                logger.warning(
                    "Skipping image smaller than the patch size",
                    source=image.source, height=image.height, width=image.width, patch=patch,
                )
                continue
            usable.append(image)
        if not usable:
            raise UsageError(f"No image is at least {patch}x{patch}", argument="dataset")
        self.images = usable
        self.patch = patch
        self.scale = scale
        self.augment = augment
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.images)

    def get_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state

    def next_pair(self) -> PatchPair:
        image = self.images[int(self.rng.integers(len(self.images)))]
        top = int(self.rng.integers(image.height - self.patch + 1))
        left = int(self.rng.integers(image.width - self.patch + 1))
        crop = image.pixels[top:top + self.patch, left:left + self.patch]
        if self.augment:
            if self.rng.integers(2):
                crop = crop[:, ::-1]
            crop = np.rot90(crop, k=int(self.rng.integers(4)))
        hr = Image(pixels=np.ascontiguousarray(crop), source=image.source)
        return PatchPair(hr=hr, lr=bicubic_downsample(hr, self.scale), scale=self.scale)

    def next_batch(self, size: int) -> Tuple[np.ndarray, np.ndarray]:
        """(lr, hr) as NCHW float32 arrays."""
        pairs = [self.next_pair() for _ in range(size)]
        return images_to_batch([p.lr for p in pairs]), images_to_batch([p.hr for p in pairs])

    def __iter__(self) -> Iterator[PatchPair]:
        while True:
            yield self.next_pair()


def sample_patch_pairs(dataset: Sequence[Image], patch: int = 192, seed: int = 0,
                       scale: int = 4, augment: bool = False) -> Iterator[PatchPair]:
    return iter(PatchSampler(dataset, patch=patch, scale=scale, seed=seed, augment=augment))
