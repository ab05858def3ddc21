"""Loss terms of the composite training objective and the frozen feature extractor."""

from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .checkpoint import load_archive
from .logger import logger, NumericError, UsageError
from .models import FeatureExtractorConfig, LossBreakdown, LossWeights
from .networks import Network
from .tensor import Tensor, clip, log, max_pool2d, mean, mean_square, no_grad, relu

LOG_EPS = 1e-7


class FeatureExtractor(Network):
    """VGG-topology conv stack, frozen, tapped after a chosen conv-activation.

    The default tap "54" returns the activation of the 4th convolution of the
    5th stage, before the 5th pooling. Weights are either drawn from a fixed
    seed or read from an archive whose entries are named
    ``features.stage{s}.conv{k}.weight``/``.bias``; an archive's metadata may
    carry ``mean`` and ``std`` lists applied per channel to the input.
    """

    prefix = "features"

    def __init__(self, config: Optional[FeatureExtractorConfig] = None, dtype=np.float32):
        super().__init__(dtype)
        self.config = config or FeatureExtractorConfig()
        self.mean: Optional[Tensor] = None
        self.std_inv: Optional[Tensor] = None
        self.source = "random"

        rng = np.random.default_rng(self.config.seed)
        in_ch = 3
        for s, (channels, convs) in enumerate(
            zip(self.config.stage_channels, self.config.convs_per_stage), start=1
        ):
            for k in range(1, convs + 1):
                self._add_conv(f"stage{s}.conv{k}", in_ch, channels, 3, rng)
                in_ch = channels
        self.freeze()

    def freeze(self) -> None:
        for param in self.params.values():
            param.requires_grad = False

    @classmethod
    def load(cls, config: Optional[FeatureExtractorConfig] = None,
             weights: Optional[Union[str, Path]] = None, dtype=np.float32) -> "FeatureExtractor":
        extractor = cls(config, dtype=dtype)
        if weights is None:
            return extractor
        path = Path(weights)
        if not path.exists():
            logger.warning(
                "Feature extractor weights not found; using fixed-seed random weights",
                path=str(path), seed=extractor.config.seed,
            )
            return extractor
        tensors, metadata = load_archive(path)
        extractor.load_state_dict(tensors, source=str(path))
        extractor.freeze()
        if "mean" in metadata and "std" in metadata:
            shape = (1, 3, 1, 1)
            extractor.mean = Tensor(np.asarray(metadata["mean"]).reshape(shape), dtype=extractor.dtype)
            extractor.std_inv = Tensor(1.0 / np.asarray(metadata["std"]).reshape(shape), dtype=extractor.dtype)
        extractor.source = str(path)
        logger.info("Loaded feature extractor weights", path=str(path), tap=extractor.config.tap)
        return extractor

    def forward(self, x: Tensor) -> Tensor:
        if self.mean is not None:
            x = (x - self.mean) * self.std_inv
        tap_stage, tap_conv = self.config.tap_stage, self.config.tap_conv
        for s, convs in enumerate(self.config.convs_per_stage, start=1):
            for k in range(1, convs + 1):
                with self.layer(f"stage{s}.conv{k}"):
                    x = relu(self.conv(f"stage{s}.conv{k}", x))
                if (s, k) == (tap_stage, tap_conv):
                    return x
            x = max_pool2d(x)
        return x

    __call__ = forward


def _same_shape(est: Tensor, hr: Tensor, op: str) -> None:
    if est.shape != hr.shape:
        raise UsageError(f"{op}: shape mismatch {est.shape} vs {hr.shape}", argument="est")


def _check_probabilities(values: Tensor, op: str) -> None:
    data = values.data
    if not np.all(np.isfinite(data)) or np.any(data < 0.0) or np.any(data > 1.0):
        raise NumericError(f"{op}: discriminator output outside [0, 1]", op=op)


def mse_loss(est: Tensor, hr: Tensor) -> Tensor:
    _same_shape(est, hr, "mse_loss")
    return mean_square(est - hr)


def perceptual_loss(est: Tensor, hr: Tensor, extractor: FeatureExtractor) -> Tensor:
    _same_shape(est, hr, "perceptual_loss")
    with no_grad():
        target = extractor(hr.detach())
    return mean_square(extractor(est) - target)


def adversarial_gen_loss(d_out: Tensor) -> Tensor:
    _check_probabilities(d_out, "adversarial_gen_loss")
    return -mean(log(clip(d_out, LOG_EPS, 1.0 - LOG_EPS)))


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    if d_real.shape != d_fake.shape:
        raise UsageError(
            f"discriminator_loss: batch mismatch {d_real.shape} vs {d_fake.shape}", argument="d_fake"
        )
    _check_probabilities(d_real, "discriminator_loss")
    _check_probabilities(d_fake, "discriminator_loss")
    real_term = log(clip(d_real, LOG_EPS, 1.0 - LOG_EPS))
    fake_term = log(1.0 - clip(d_fake, LOG_EPS, 1.0 - LOG_EPS))
    return -mean(real_term + fake_term)


def composite_loss(
    est: Tensor,
    hr: Tensor,
    d_out: Optional[Tensor],
    weights: LossWeights,
    extractor: Optional[FeatureExtractor] = None,
) -> Tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three terms; terms with zero weight are not evaluated."""
    lambda1, lambda2, lambda3 = weights.as_tuple()
    terms = []
    breakdown = {}

    if lambda1 > 0:
        if extractor is None:
            raise UsageError("composite_loss: lambda1 > 0 needs a feature extractor", argument="extractor")
        l_vgg = perceptual_loss(est, hr, extractor)
        breakdown["l_vgg"] = l_vgg.item()
        terms.append(l_vgg * lambda1)
    if lambda2 > 0:
        l_e = mse_loss(est, hr)
        breakdown["l_e"] = l_e.item()
        terms.append(l_e * lambda2)
    if lambda3 > 0:
        if d_out is None:
            raise UsageError("composite_loss: lambda3 > 0 needs discriminator output", argument="d_out")
        l_adv = adversarial_gen_loss(d_out)
        breakdown["l_adv"] = l_adv.item()
        terms.append(l_adv * lambda3)

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total, LossBreakdown(l_total=total.item(), **breakdown)
