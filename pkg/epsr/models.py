import math
from typing import List, Optional, Dict, Any, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from enum import Enum

CONFIG_VERSION = 1
DIV2K_RGB_MEAN = (0.4488, 0.4371, 0.4040)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LossWeights(StrictModel):
    lambda1: float = Field(1.0, ge=0.0, description="perceptual (VGG) weight")
    lambda2: float = Field(0.05, ge=0.0, description="reconstruction (MSE) weight")
    lambda3: float = Field(0.4, ge=0.0, description="adversarial weight")

    @model_validator(mode="after")
    def _at_least_one_positive(self) -> "LossWeights":
        if max(self.lambda1, self.lambda2, self.lambda3) <= 0.0:
            raise ValueError("at least one loss weight must be strictly positive")
        return self

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @classmethod
    def of(cls, lambda1: float, lambda2: float, lambda3: float) -> "LossWeights":
        return cls(lambda1=lambda1, lambda2=lambda2, lambda3=lambda3)


class GeneratorConfig(StrictModel):
    num_blocks: int = Field(32, ge=1)
    num_features: int = Field(256, ge=1)
    residual_scale: float = Field(0.1, gt=0.0, le=1.0)
    scale: int = 4
    kernel_size: int = 3
    mean_shift: bool = False
    rgb_mean: Tuple[float, float, float] = DIV2K_RGB_MEAN
    upsample_skip: bool = Field(False, description="add the bicubic upsample of the input to the output")

    @field_validator("scale")
    @classmethod
    def _only_x4(cls, value: int) -> int:
        if value != 4:
            raise ValueError("only x4 super-resolution is supported")
        return value

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        return value

    @classmethod
    def epsr(cls) -> "GeneratorConfig":
        return cls(num_blocks=32, num_features=256, residual_scale=0.1)

    @classmethod
    def bnet(cls) -> "GeneratorConfig":
        return cls(num_blocks=32, num_features=64, residual_scale=1.0)


class DiscriminatorConfig(StrictModel):
    channels: List[int] = Field(default_factory=lambda: [64, 64, 128, 128, 256, 256, 512, 512])
    strides: List[int] = Field(default_factory=lambda: [1, 2, 1, 2, 1, 2, 1, 2])
    fc_width: int = Field(1024, ge=1)
    slope: float = Field(0.2, ge=0.0)
    input_size: int = Field(192, ge=1)
    in_channels: int = 3

    @model_validator(mode="after")
    def _ten_layers(self) -> "DiscriminatorConfig":
        if len(self.channels) != 8 or len(self.strides) != 8:
            raise ValueError("discriminator needs exactly 8 conv layers (plus 2 fully connected)")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError("discriminator strides must be 1 or 2")
        if self.input_size % self.downsampling:
            raise ValueError(
                f"input_size {self.input_size} not divisible by total stride {self.downsampling}"
            )
        return self

    @property
    def downsampling(self) -> int:
        total = 1
        for stride in self.strides:
            total *= stride
        return total

    @property
    def flat_features(self) -> int:
        side = self.input_size // self.downsampling
        return self.channels[-1] * side * side


class FeatureExtractorConfig(StrictModel):
    stage_channels: List[int] = Field(default_factory=lambda: [64, 128, 256, 512, 512])
    convs_per_stage: List[int] = Field(default_factory=lambda: [2, 2, 4, 4, 4])
    tap: str = "54"
    seed: int = 1234

    @model_validator(mode="after")
    def _tap_exists(self) -> "FeatureExtractorConfig":
        if len(self.stage_channels) != len(self.convs_per_stage):
            raise ValueError("stage_channels and convs_per_stage must have equal length")
        if len(self.tap) != 2 or not self.tap.isdigit():
            raise ValueError("tap must be two digits: stage then convolution, e.g. '54'")
        stage, conv = int(self.tap[0]), int(self.tap[1])
        if not 1 <= stage <= len(self.stage_channels) or not 1 <= conv <= self.convs_per_stage[stage - 1]:
            raise ValueError(f"tap {self.tap} does not exist in the extractor topology")
        return self

    @property
    def tap_stage(self) -> int:
        return int(self.tap[0])

    @property
    def tap_conv(self) -> int:
        return int(self.tap[1])


class TrainConfig(StrictModel):
    config_version: int = CONFIG_VERSION
    weights: LossWeights = Field(default_factory=LossWeights)
    epochs: int = Field(300, ge=1)
    batch: int = Field(4, ge=1)
    lr: float = Field(5e-5, gt=0.0)
    lr_halve_epoch: int = Field(150, ge=0)
    d_steps_per_g: int = Field(2, ge=0)
    patch: int = Field(192, ge=4)
    scale: int = 4
    seed: int = 0
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    checkpoint_every: int = Field(500, ge=1, description="iterations between state checkpoints")
    log_every: int = Field(10, ge=1)
    max_iterations: Optional[int] = Field(None, ge=1)
    desk_scale: bool = False
    augment: bool = False
    dataset_manifest: Optional[str] = None
    vgg_weights: Optional[str] = None
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    extractor: FeatureExtractorConfig = Field(default_factory=FeatureExtractorConfig)

    @model_validator(mode="after")
    def _consistent_geometry(self) -> "TrainConfig":
        if self.patch % self.scale:
            raise ValueError(f"patch {self.patch} must be divisible by scale {self.scale}")
        if self.discriminator.input_size != self.patch:
            raise ValueError(
                f"discriminator input_size {self.discriminator.input_size} must equal patch {self.patch}"
            )
        return self

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        from .config_loader import deep_merge
        return cls.model_validate(deep_merge(desk_preset(), overrides))


def desk_preset() -> Dict[str, Any]:
    """Small CPU-sized networks trained on a short schedule.

    Runs last a few hundred iterations, so lr0 is 5e-4 instead of 5e-5 and
    the single halving stays at the midpoint of the run (125 of 250 epochs,
    as 150 of 300 at full scale). The generator learns the residual over
    bicubic upsampling. Batch, betas and the D:G schedule are unchanged.
    """
    return {
        "desk_scale": True,
        "patch": 96,
        "lr": 5e-4,
        "epochs": 250,
        "lr_halve_epoch": 125,
        "checkpoint_every": 100,
        "generator": {"num_blocks": 4, "num_features": 16, "upsample_skip": True},
        "discriminator": {
            "channels": [16, 16, 32, 32, 64, 64, 64, 64],
            "input_size": 96,
            "fc_width": 256,
        },
        "extractor": {"stage_channels": [16, 32, 64, 128, 128]},
    }


class LossBreakdown(BaseModel):
    l_vgg: Optional[float] = None
    l_e: Optional[float] = None
    l_adv: Optional[float] = None
    l_total: float


class TrainRecord(BaseModel):
    iter: int
    epoch: int
    lr: float
    l_vgg: Optional[float] = None
    l_e: Optional[float] = None
    l_adv: Optional[float] = None
    l_total: float
    d_real_mean: Optional[float] = None
    d_fake_mean: Optional[float] = None


class MetricRow(BaseModel):
    image_id: str
    rmse: float = Field(ge=0.0)
    psnr: float
    ssim: float = Field(ge=-1.0, le=1.0)
    identical: bool = False
    niqe: Optional[float] = None
    ma: Optional[float] = None
    pi: Optional[float] = None

    @model_validator(mode="after")
    def _pi_needs_both(self) -> "MetricRow":
        has_both = self.ma is not None and self.niqe is not None
        if (self.pi is not None) != has_both:
            raise ValueError("pi is present exactly when both ma and niqe are present")
        return self


class MetricReport(BaseModel):
    rows: List[MetricRow] = Field(default_factory=list)
    means: Dict[str, Optional[float]] = Field(default_factory=dict)
    niqe_model: Optional[str] = None


class Region(BaseModel):
    index: int
    lower: Optional[float] = None  # exclusive; None means unbounded
    upper: float  # inclusive

    def contains(self, rmse: float) -> bool:
        above = self.lower is None or rmse > self.lower
        return above and rmse <= self.upper

    def describe(self) -> str:
        if self.lower is None:
            return f"Region {self.index} (RMSE <= {self.upper:g})"
        return f"Region {self.index} ({self.lower:g} < RMSE <= {self.upper:g})"


class PerceptualMetric(str, Enum):
    PI = "pi"
    NIQE = "niqe"


class TradeoffPoint(BaseModel):
    label: str
    rmse: Optional[float] = Field(None, ge=0.0)
    pi: Optional[float] = Field(None, ge=0.0)
    metric: PerceptualMetric = PerceptualMetric.PI
    dataset: Optional[str] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    weights: Optional[LossWeights] = None
    checkpoint_path: Optional[str] = None
    failed: bool = False
    error: Optional[str] = None


class RankEntry(BaseModel):
    label: str
    pi: float
    rmse: float


class RegionRanking(BaseModel):
    region: Region
    entries: List[RankEntry] = Field(default_factory=list)

    @property
    def winner(self) -> Optional[RankEntry]:
        return self.entries[0] if self.entries else None


class RankingTable(BaseModel):
    regions: List[RegionRanking] = Field(default_factory=list)
    out_of_range: List[RankEntry] = Field(default_factory=list)
    metric: PerceptualMetric = PerceptualMetric.PI

    def region(self, index: int) -> Optional[RegionRanking]:
        for ranking in self.regions:
            if ranking.region.index == index:
                return ranking
        return None

    def winners(self) -> Dict[int, str]:
        return {r.region.index: r.winner.label for r in self.regions if r.winner is not None}


class CurveFit(BaseModel):
    a: float
    b: float
    c: float
    residual_norm: float
    n_points: int
    family: str = "pi = a + b * exp(-c * rmse)"

    def evaluate(self, rmse: float) -> float:
        return self.a + self.b * math.exp(-self.c * rmse)


class RunConfig(StrictModel):
    command: str
    config_path: Optional[str] = None
    overrides: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None
    out_dir: str


class TrainState(BaseModel):
    """Counters and generator state stored in a training-state archive's metadata."""

    version: int
    phase: str
    iteration: int = 0
    epoch: int = 1
    generator_steps: int = 0
    discriminator_steps: int = 0
    sampler_state: Dict[str, Any] = Field(default_factory=dict)
    adam_steps: Dict[str, int] = Field(default_factory=dict)
    config: TrainConfig


class TrainOutcome(BaseModel):
    phase: str
    iterations: int
    generator_steps: int
    discriminator_steps: int
    generator_checkpoint: str
    state_checkpoint: Optional[str] = None
    log_path: str
    final: Optional[TrainRecord] = None


REGION_WEIGHTS: Dict[str, Dict[int, LossWeights]] = {
    "bnet": {
        1: LossWeights.of(1.0, 0.1, 0.4),
        2: LossWeights.of(1.0, 0.05, 0.4),
        3: LossWeights.of(1.0, 0.0005, 0.6),
    },
    "epsr": {
        1: LossWeights.of(1.0, 0.05, 0.4),
        2: LossWeights.of(1.0, 0.02, 0.4),
        3: LossWeights.of(1.0, 0.0005, 0.6),
    },
}


def weight_preset(name: str) -> LossWeights:
    """Resolve ``epsr-region2`` style names against ``REGION_WEIGHTS``."""
    model, _, region = name.lower().partition("-region")
    if model not in REGION_WEIGHTS or not region.isdigit() or int(region) not in REGION_WEIGHTS[model]:
        choices = ", ".join(f"{m}-region{r}" for m in REGION_WEIGHTS for r in REGION_WEIGHTS[m])
        raise ValueError(f"unknown weight preset {name!r}; choose one of {choices}")
    return REGION_WEIGHTS[model][int(region)]
