"""MSE pretraining and GAN training with the D:G update schedule."""

import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from config import settings
from .checkpoint import load_archive, save_archive
from .image import Image, PatchSampler, load_dataset, read_manifest
from .logger import (
    logger, log_execution_time, CheckpointError, ConfigurationError, NumericError,
    TrainingAborted, UsageError,
)
from .losses import FeatureExtractor, composite_loss, discriminator_loss
from .models import TrainConfig, TrainOutcome, TrainRecord, TrainState
from .networks import Discriminator, Generator, load_pretrained_generator
from .optim import Adam
from .tensor import Tensor, no_grad

STATE_VERSION = 1
RUN_SUBDIRS = ("checkpoints", "logs", "reports", "images")
PHASES = ("pretrain", "gan")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """lr0, halved once the epoch index passes ``lr_halve_epoch``."""
    return config.lr * (0.5 if epoch > config.lr_halve_epoch else 1.0)


def iterations_per_epoch(num_images: int, batch: int) -> int:
    return max(1, math.ceil(num_images / batch))


def prepare_run_dirs(out_dir: Union[str, Path]) -> Dict[str, Path]:
    root = Path(out_dir)
    dirs = {name: root / name for name in RUN_SUBDIRS}
    for path in dirs.values():
        path.mkdir(parents=True, exist_ok=True)
    return dirs


def resolve_dataset(config: TrainConfig, images: Optional[Sequence[Image]] = None) -> List[Image]:
    if images is not None:
        images = list(images)
    else:
        if config.dataset_manifest is None:
            raise UsageError("No training data: set dataset_manifest in the config", argument="dataset_manifest")
        paths = read_manifest(config.dataset_manifest)
        images = load_dataset(paths, scale=config.scale, workers=settings.NUM_WORKERS) if paths else []
    if not images:
        raise UsageError("Dataset is empty", argument="dataset")
    return images


def _progress_disabled() -> bool:
    return not settings.PROGRESS or not sys.stdout.isatty()


class Trainer:
    """Owns the networks, optimizers and patch stream of one training run."""

    def __init__(
        self,
        config: TrainConfig,
        images: Sequence[Image],
        out_dir: Union[str, Path],
        phase: str = "gan",
        generator: Optional[Generator] = None,
    ):
        if phase not in PHASES:
            raise UsageError(f"Unknown training phase {phase!r}", argument="phase")
        self.config = config
        self.phase = phase
        self.dirs = prepare_run_dirs(out_dir)

        self.sampler = PatchSampler(
            images, patch=config.patch, scale=config.scale, seed=config.seed, augment=config.augment
        )
        self.iters_per_epoch = iterations_per_epoch(len(self.sampler), config.batch)
        self.total_iterations = config.epochs * self.iters_per_epoch
        if config.max_iterations is not None:
            self.total_iterations = min(self.total_iterations, config.max_iterations)

        self.generator = generator or Generator(config.generator, seed=config.seed)
        self.discriminator = (
            Discriminator(config.discriminator, seed=config.seed) if phase == "gan" else None
        )
        self.extractor = (
            FeatureExtractor.load(config.extractor, config.vgg_weights)
            if config.weights.lambda1 > 0 else None
        )

        opt_args = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        self.g_opt = Adam(self.generator.parameters(), **opt_args)
        self.d_opt = Adam(self.discriminator.parameters(), **opt_args) if self.discriminator else None

        self.iteration = 0
        self.generator_steps = 0
        self.discriminator_steps = 0
        self.history: List[TrainRecord] = []
        self.last_checkpoint: Optional[Path] = None

    @property
    def d_steps_per_g(self) -> int:
        return self.config.d_steps_per_g if self.discriminator is not None else 0

    @property
    def log_path(self) -> Path:
        return self.dirs["logs"] / "train.jsonl"

    def epoch(self) -> int:
        return self.iteration // self.iters_per_epoch + 1

    def discriminator_step(self) -> Tuple[float, float, float]:
        """One D update on a fresh batch; returns (loss, mean D(real), mean D(fake))."""
        lr_batch, hr_batch = self.sampler.next_batch(self.config.batch)
        with no_grad():
            fake = self.generator(Tensor(lr_batch))
        d_real = self.discriminator(Tensor(hr_batch))
        d_fake = self.discriminator(fake)
        loss = discriminator_loss(d_real, d_fake)
        self.d_opt.zero_grad()
        loss.backward()
        self.d_opt.step()
        self.discriminator_steps += 1
        return loss.item(), float(d_real.data.mean()), float(d_fake.data.mean())

    def generator_step(self):
        lr_batch, hr_batch = self.sampler.next_batch(self.config.batch)
        weights = self.config.weights
        self.g_opt.zero_grad()
        est = self.generator(Tensor(lr_batch))
        hr = Tensor(hr_batch)
        if self.discriminator is not None:
            with self.discriminator.frozen():
                d_out = self.discriminator(est) if weights.lambda3 > 0 else None
                total, breakdown = composite_loss(est, hr, d_out, weights, self.extractor)
                total.backward()
        else:
            total, breakdown = composite_loss(est, hr, None, weights, self.extractor)
            total.backward()
        if not np.isfinite(breakdown.l_total):
            raise NumericError("Non-finite generator loss", op="composite_loss")
        self.g_opt.step()
        self.generator_steps += 1
        return breakdown

    def step(self) -> TrainRecord:
        epoch = self.epoch()
        lr = learning_rate(self.config, epoch)
        self.g_opt.lr = lr
        if self.d_opt is not None:
            self.d_opt.lr = lr

        real_means, fake_means = [], []
        for _ in range(self.d_steps_per_g):
            loss_d, real_mean, fake_mean = self.discriminator_step()
            if not np.isfinite(loss_d):
                raise NumericError("Non-finite discriminator loss", op="discriminator_loss")
            real_means.append(real_mean)
            fake_means.append(fake_mean)

        breakdown = self.generator_step()
        self.iteration += 1
        record = TrainRecord(
            iter=self.iteration,
            epoch=epoch,
            lr=lr,
            l_vgg=breakdown.l_vgg,
            l_e=breakdown.l_e,
            l_adv=breakdown.l_adv,
            l_total=breakdown.l_total,
            d_real_mean=float(np.mean(real_means)) if real_means else None,
            d_fake_mean=float(np.mean(fake_means)) if fake_means else None,
        )
        self.history.append(record)
        return record

    def state(self) -> TrainState:
        return TrainState(
            version=STATE_VERSION,
            phase=self.phase,
            iteration=self.iteration,
            epoch=self.epoch(),
            generator_steps=self.generator_steps,
            discriminator_steps=self.discriminator_steps,
            sampler_state=self.sampler.get_state(),
            adam_steps={p.name: p.step for p in self._all_params()},
            config=self.config,
        )

    def _all_params(self):
        params = list(self.generator.parameters())
        if self.discriminator is not None:
            params += self.discriminator.parameters()
        return params

    def save_state(self) -> Path:
        tensors = {}
        for param in self._all_params():
            tensors[param.name] = param.data
            tensors[f"adam.m.{param.name}"] = param.m
            tensors[f"adam.v.{param.name}"] = param.v
        path = self.dirs["checkpoints"] / f"state_{self.iteration:06d}"
        save_archive(path, tensors, self.state().model_dump(mode="json"))
        self.last_checkpoint = path
        logger.debug("Training state saved", path=str(path), iteration=self.iteration)
        return path

    def restore(self, tensors: Dict[str, np.ndarray], state: TrainState, source: Optional[str] = None) -> None:
        self.generator.load_state_dict(tensors, source=source)
        if self.discriminator is not None:
            self.discriminator.load_state_dict(tensors, source=source)
        for param in self._all_params():
            for slot in ("m", "v"):
                key = f"adam.{slot}.{param.name}"
                if key not in tensors:
                    raise CheckpointError(f"State is missing optimizer entry {key}", path=source, entry=key)
                setattr(param, slot, np.array(tensors[key], dtype=param.dtype, copy=True))
            param.step = state.adam_steps.get(param.name, 0)
        self.sampler.set_state(state.sampler_state)
        self.iteration = state.iteration
        self.generator_steps = state.generator_steps
        self.discriminator_steps = state.discriminator_steps

    def save_generator(self) -> Path:
        path = self.dirs["checkpoints"] / f"generator_{self.phase}"
        self.generator.save(path, {
            "config": self.config.generator.model_dump(mode="json"),
            "iteration": self.iteration,
            "phase": self.phase,
        })
        return path

    @log_execution_time
    def run(self) -> TrainOutcome:
        logger.info(
            "Training started",
            phase=self.phase,
            start_iteration=self.iteration,
            total_iterations=self.total_iterations,
            weights=self.config.weights.as_tuple(),
            d_steps_per_g=self.d_steps_per_g,
        )
        progress = tqdm(
            total=self.total_iterations, initial=self.iteration,
            desc=self.phase, disable=_progress_disabled(),
        )
        with open(self.log_path, "a") as log_file, progress:
            while self.iteration < self.total_iterations:
                try:
                    record = self.step()
                except NumericError as e:
                    checkpoint = str(self.last_checkpoint) if self.last_checkpoint else None
                    logger.error(
                        "Training aborted on a non-finite value",
                        error=e, iteration=self.iteration, layer=e.layer, checkpoint=checkpoint,
                    )
                    raise TrainingAborted(
                        f"Training aborted at iteration {self.iteration}: {e}",
                        iteration=self.iteration, checkpoint=checkpoint,
                    ) from e
                log_file.write(record.model_dump_json() + "\n")
                if self.iteration % self.config.log_every == 0:
                    logger.info("Training progress", **record.model_dump(exclude_none=True))
                if self.iteration % self.config.checkpoint_every == 0:
                    self.save_state()
                progress.update(1)

        if self.last_checkpoint is None or not self.last_checkpoint.name.endswith(f"{self.iteration:06d}"):
            self.save_state()
        generator_path = self.save_generator()
        logger.info(
            "Training finished",
            phase=self.phase,
            iterations=self.iteration,
            generator_steps=self.generator_steps,
            discriminator_steps=self.discriminator_steps,
            checkpoint=str(generator_path),
        )
        return TrainOutcome(
            phase=self.phase,
            iterations=self.iteration,
            generator_steps=self.generator_steps,
            discriminator_steps=self.discriminator_steps,
            generator_checkpoint=str(generator_path),
            state_checkpoint=str(self.last_checkpoint),
            log_path=str(self.log_path),
            final=self.history[-1] if self.history else None,
        )


def pretrain_generator(
    config: TrainConfig,
    out_dir: Union[str, Path],
    images: Optional[Sequence[Image]] = None,
) -> TrainOutcome:
    """MSE-only training of the generator; the result initializes GAN training."""
    weights = config.weights
    if weights.lambda1 != 0 or weights.lambda3 != 0:
        raise ConfigurationError(
            f"Pretraining uses the reconstruction loss only; got weights {weights.as_tuple()}",
            field="weights", value=weights.as_tuple(),
        )
    dataset = resolve_dataset(config, images)
    return Trainer(config, dataset, out_dir, phase="pretrain").run()


def train_gan(
    config: TrainConfig,
    out_dir: Union[str, Path],
    pretrained: Optional[Union[str, Path]] = None,
    images: Optional[Sequence[Image]] = None,
) -> TrainOutcome:
    dataset = resolve_dataset(config, images)
    generator = None
    if pretrained is not None:
        generator = load_pretrained_generator(pretrained, config.generator)
    else:
        logger.warning("No pretrained generator given; GAN training starts from random init", seed=config.seed)
    return Trainer(config, dataset, out_dir, phase="gan", generator=generator).run()


def resume(
    state_path: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    images: Optional[Sequence[Image]] = None,
    config: Optional[TrainConfig] = None,
) -> Trainer:
    """Rebuild a trainer from a state archive; ``run()`` continues where it stopped.

    ``config`` may extend the run (epochs, max_iterations) but must keep the
    batch size of the saved run.
    """
    state_path = Path(state_path)
    tensors, metadata = load_archive(state_path)
    version = metadata.get("version")
    if version != STATE_VERSION:
        raise CheckpointError(
            f"State version {version} does not match supported version {STATE_VERSION}",
            path=str(state_path),
        )
    state = TrainState.model_validate(metadata)
    if config is None:
        config = state.config
    elif config.batch != state.config.batch:
        raise ConfigurationError(
            f"Cannot resume with batch {config.batch}; the saved run used batch {state.config.batch}",
            field="batch", value=config.batch,
        )
    out_dir = out_dir or state_path.parent.parent
    trainer = Trainer(config, resolve_dataset(config, images), out_dir, phase=state.phase)
    trainer.restore(tensors, state, source=str(state_path))
    trainer.last_checkpoint = state_path
    logger.info("Training state restored", path=str(state_path), iteration=state.iteration, phase=state.phase)
    return trainer
