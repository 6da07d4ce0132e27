"""
Joint training of the proposal network F and the discriminator D, the
feature-network pre-training, and one-to-many inference.

Each iteration generates ``xhat = F(y, z)`` once, then

1. updates D on (x, xhat) with the binary cross-entropy, F fixed;
2. updates F on the combined loss, with D frozen (parameters and BN stats).

During the first epoch step 1 is skipped and the naturalness term is
dropped, so D is neither trained nor used.
"""

from __future__ import annotations

import logging
import math
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core.optim import Adam
from .core.rng import make_rng
from .core.tensor import Tensor, log_softmax, mean, no_grad
from .data import ImageBuffer, PatchRecord, Sample, bundled_root, extract_patches, load_dataset
from .errors import ChannelMismatchError, CheckpointError, TrainingDivergedError
from .jpeg import QuantTable, dct2_blocks, pad_to_blocks, quant_table
from .losses import LossReport, LossWeights, TrainingLog, combined_loss, discriminator_loss
from .networks import DiscriminatorNet, FeatureNet, ProposalNet, sample_z, to_model_range, to_pixel_range
from .nn import frozen_stats

log = logging.getLogger(__name__)

BUNDLED_SETS = ("toy", "eval")


@dataclass
class TrainConfig:
    quality: int = 5
    epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 0.1
    lambda2_aligned: float = 0.1
    lambda2_misaligned: float = 0.0
    seed: int = 0
    checkpoint_interval: int = 100  # iterations; a final checkpoint is always written
    dataset_root: str = "toy"  # a directory with gt/, or the name of a bundled set
    channels: int = 1
    patch_size: int = 64
    patch_stride: int = 32
    iterations: int = 0  # > 0: run exactly this many iterations, looping epochs as needed
    d_steps: int = 1  # discriminator updates per generator update
    misaligned_fraction: float = 0.5
    fe_checkpoint: Optional[str] = None  # trained on the dataset and saved to out_dir when absent
    fe_steps: int = 300
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not 1 <= self.quality <= 100:
            raise ValueError(f"quality must be in [1, 100], got {self.quality}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.batch_size < 1 or self.epochs < 1 or self.d_steps < 1:
            raise ValueError("batch_size, epochs and d_steps must be >= 1")
        if self.patch_size % 16:
            raise ValueError(f"patch_size must be a multiple of 16, got {self.patch_size}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.misaligned_fraction <= 1.0:
            raise ValueError("misaligned_fraction must lie in [0, 1]")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2_aligned, self.lambda2_misaligned)


def _coerce(raw: str, kind) -> object:
    args = typing.get_args(kind)
    if args and type(None) in args:
        if raw.lower() in ("", "none"):
            return None
        kind = next(a for a in args if a is not type(None))
    if kind is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return kind(raw)


def parse_config(text: str, base_dir: str | Path | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a :class:`TrainConfig`.

    Relative paths are resolved against ``base_dir`` when given.
    """
    hints = typing.get_type_hints(TrainConfig)
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {raw!r}") from exc
    if base_dir is not None:
        base = Path(base_dir)
        for key in ("out_dir", "fe_checkpoint"):
            if values.get(key):
                values[key] = os.path.normpath(base / str(values[key]))
        root = values.get("dataset_root")
        if root and root not in BUNDLED_SETS:
            values["dataset_root"] = os.path.normpath(base / str(root))
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def resolve_dataset(root: str) -> Path:
    if root in BUNDLED_SETS and not Path(root).is_dir():
        return bundled_root(root)
    return Path(root)


# -- batches -------------------------------------------------------------------
@dataclass
class Batch:
    x: np.ndarray  # ground truth, model range [n, c, h, w]
    y: np.ndarray  # degraded, model range
    y_dct: np.ndarray  # [n, c, h/8, w/8, 8, 8]; zeros for misaligned patches
    aligned: np.ndarray  # bool [n]

    def __len__(self) -> int:
        return self.x.shape[0]


def make_batch(records: Sequence[PatchRecord]) -> Batch:
    x = np.stack([to_model_range(r.gt.planes()) for r in records])
    y = np.stack([to_model_range(r.degraded.planes()) for r in records])
    n, c, h, w = x.shape
    y_dct = np.zeros((n, c, h // 8, w // 8, 8, 8), dtype=np.float32)
    aligned = np.array([r.aligned and r.y_dct is not None for r in records])
    for i, r in enumerate(records):
        if aligned[i]:
            y_dct[i] = r.y_dct
    return Batch(x, y, y_dct, aligned)


def epoch_batches(samples: Sequence[Sample], cfg: TrainConfig, epoch: int) -> Iterator[Batch]:
    """Shuffled full batches of one epoch; the trailing partial batch is dropped."""
    rng = make_rng(cfg.seed, "epoch", epoch)
    records: list[PatchRecord] = []
    for s in samples:
        records.extend(
            extract_patches(
                s.gt,
                s.degraded,
                cfg.patch_size,
                cfg.patch_stride,
                seed=int(rng.integers(2**31)),
                misaligned_fraction=cfg.misaligned_fraction,
                y_dct=s.y_dct,
                source=s.name,
            )
        )
    order = rng.permutation(len(records))
    for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
        yield make_batch([records[k] for k in order[start : start + cfg.batch_size]])


# -- one iteration -------------------------------------------------------------
def _finite(value: float, step: int, what: str) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(step, f"{what} is {value}")
    return value


class Trainer:
    """Owns F, D, the frozen feature network and both optimizers."""

    def __init__(
        self,
        cfg: TrainConfig,
        fe: FeatureNet,
        proposal: ProposalNet | None = None,
        discriminator: DiscriminatorNet | None = None,
    ):
        self.cfg = cfg
        self.F = proposal if proposal is not None else ProposalNet(cfg.channels, seed=cfg.seed)
        self.D = (
            discriminator
            if discriminator is not None
            else DiscriminatorNet(cfg.channels, input_size=cfg.patch_size, seed=cfg.seed)
        )
        self.fe = fe.eval().requires_grad_(False)
        self.Q: QuantTable = quant_table(cfg.quality)
        self.opt_F = Adam(self.F.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        self.opt_D = Adam(self.D.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        self.F.train()
        self.D.train()

    def step(self, batch: Batch, step: int, use_discriminator: bool) -> LossReport:
        cfg = self.cfg
        n, c, h, w = batch.y.shape
        x = Tensor(batch.x)
        z = sample_z((h, w), cfg.seed, batch=n, draw=step)
        xhat = self.F(Tensor(batch.y), z)

        l_D = None
        if use_discriminator:
            for _ in range(cfg.d_steps):
                self.opt_D.zero_grad()
                loss_D = discriminator_loss(x, xhat, self.D)
                l_D = _finite(loss_D.item(), step, "discriminator loss")
                loss_D.backward()
                self.opt_D.step()

        self.D.requires_grad_(False)
        try:
            with frozen_stats(self.D):
                total, report = combined_loss(
                    xhat,
                    x,
                    batch.y_dct,
                    self.Q,
                    batch.aligned,
                    cfg.weights,
                    self.fe,
                    self.D if use_discriminator else None,
                )
            _finite(report.l_total, step, "combined loss")
            self.opt_F.zero_grad()
            total.backward()
        finally:
            self.D.requires_grad_(True)
        self.opt_F.step()
        report.l_D = l_D
        report.step = step
        return report


def save_networks(trainer: Trainer, out_dir: Path, tag: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"proposal_{tag}.ckpt", out_dir / f"discriminator_{tag}.ckpt"]
    save_checkpoint(trainer.F.state_dict(), paths[0])
    save_checkpoint(trainer.D.state_dict(), paths[1])
    return paths


@dataclass
class TrainResult:
    reports: list[LossReport]
    checkpoints: list[Path] = field(default_factory=list)
    log_path: Optional[Path] = None
    trainer: Optional[Trainer] = None


def train(
    cfg: TrainConfig,
    fe: FeatureNet | None = None,
    samples: Sequence[Sample] | None = None,
    proposal: ProposalNet | None = None,
    discriminator: DiscriminatorNet | None = None,
) -> TrainResult:
    """Run the joint training loop, writing the log and checkpoints to ``cfg.out_dir``.

    ``fe``, ``samples`` and the two networks default to what ``cfg`` describes;
    passing them in lets callers train reduced networks.
    """
    if cfg.out_dir is None:
        raise ValueError("out_dir must be set")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = load_dataset(resolve_dataset(cfg.dataset_root), cfg.quality, cfg.channels)
    if fe is None:
        fe = obtain_feature_net(cfg, samples, out)
    trainer = Trainer(cfg, fe, proposal, discriminator)
    train_log = TrainingLog(out / "train_log.csv")
    result = TrainResult([], log_path=train_log.path, trainer=trainer)

    per_epoch = sum(1 for _ in epoch_batches(samples, replace(cfg, misaligned_fraction=0.0), 1))
    if per_epoch == 0:
        raise ValueError(f"dataset yields fewer than {cfg.batch_size} patches per epoch")
    total = cfg.iterations if cfg.iterations > 0 else cfg.epochs * per_epoch
    log.info("training %d iterations, %d per epoch", total, per_epoch)

    step = 0
    epoch = 1
    while step < total:
        for batch in epoch_batches(samples, cfg, epoch):
            step += 1
            report = trainer.step(batch, step, use_discriminator=epoch > 1)
            train_log.append(report)
            result.reports.append(report)
            if step % cfg.checkpoint_interval == 0 and step < total:
                result.checkpoints += save_networks(trainer, out, f"step{step:06d}")
            if step >= total:
                break
        epoch += 1
    result.checkpoints += save_networks(trainer, out, "final")
    return result


# -- feature network -----------------------------------------------------------
def rotation_set(samples: Sequence[Sample], size: int = 64, stride: int = 32, seed: int = 0):
    """Ground-truth patches in four orientations labelled 0..3 (quarter turns)."""
    patches = []
    for s in samples:
        for r in extract_patches(s.gt, s.gt, size, stride, seed=seed, source=s.name):
            patches.append(to_model_range(r.gt.planes()))
    images, labels = [], []
    for p in patches:
        for k in range(4):
            images.append(np.rot90(p, k, axes=(1, 2)))
            labels.append(k)
    return np.ascontiguousarray(np.stack(images)), np.asarray(labels)


def train_feature_extractor(
    images: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
    held_out: float = 0.2,
) -> tuple[FeatureNet, float]:
    """Train :class:`FeatureNet` as a classifier, freeze it, and return it with held-out accuracy.

    ``images`` are model-range [n, c, h, w]; ``labels`` integer classes.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes to train the feature network, got {len(classes)}")
    if classes.min() < 0:
        raise ValueError("labels must be non-negative")
    rng = make_rng(seed, "feature-train")
    order = rng.permutation(len(labels))
    n_test = max(1, int(round(held_out * len(labels))))
    test, fit = order[:n_test], order[n_test:]
    net = FeatureNet(images.shape[1], num_classes=int(classes.max()) + 1, seed=seed)
    opt = Adam(net.parameters(), lr=lr, beta1=0.9)
    for _ in range(steps):
        idx = rng.choice(fit, size=min(batch_size, len(fit)), replace=False)
        logits = net(Tensor(images[idx].astype(np.float32)))
        onehot = np.eye(net.num_classes, dtype=np.float32)[labels[idx]]
        loss = -mean((log_softmax(logits, axis=1) * Tensor(onehot)).sum(axis=1))
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval().requires_grad_(False)
    return net, classifier_accuracy(net, images[test], labels[test])


def classifier_accuracy(net: FeatureNet, images: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        pred = np.argmax(net(Tensor(images.astype(np.float32))).data, axis=1)
    return float(np.mean(pred == labels))


def load_feature_net(path: str | Path) -> FeatureNet:
    state = load_checkpoint(path)
    try:
        channels = state["stages.0.weight"].shape[1]
        classes = state["head_weight"].shape[1]
    except KeyError as exc:
        raise CheckpointError(f"{path}: not a feature-network checkpoint (missing {exc})") from exc
    net = FeatureNet(channels, num_classes=classes)
    net.load_state_dict(state)
    return net.eval().requires_grad_(False)


def obtain_feature_net(cfg: TrainConfig, samples: Sequence[Sample], out: Path) -> FeatureNet:
    if cfg.fe_checkpoint and Path(cfg.fe_checkpoint).exists():
        fe = load_feature_net(cfg.fe_checkpoint)
        if fe.channels != cfg.channels:
            raise ChannelMismatchError(f"feature network has {fe.channels} channels, config says {cfg.channels}")
        return fe
    images, labels = rotation_set(samples, cfg.patch_size, cfg.patch_stride, cfg.seed)
    fe, acc = train_feature_extractor(images, labels, seed=cfg.seed, steps=cfg.fe_steps)
    log.info("feature network held-out rotation accuracy %.3f", acc)
    path = Path(cfg.fe_checkpoint) if cfg.fe_checkpoint else out / "feature.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(fe.state_dict(), path)
    return fe


# -- inference -----------------------------------------------------------------
def load_proposal(path: str | Path) -> ProposalNet:
    state = load_checkpoint(path)
    if "y_down.weight" not in state:
        raise CheckpointError(f"{path}: not a proposal-network checkpoint")
    net = ProposalNet(int(state["y_down.weight"].shape[1]))
    net.load_state_dict(state)
    return net


def infer(net: ProposalNet | str | Path, y: ImageBuffer, num_candidates: int = 2, seed: int = 0) -> list[ImageBuffer]:
    """Reconstruct ``num_candidates`` images from one degraded input, one noise draw each."""
    if not isinstance(net, ProposalNet):
        net = load_proposal(net)
    if num_candidates < 1:
        raise ValueError("num_candidates must be >= 1")
    if y.channels != net.channels:
        raise ChannelMismatchError(f"checkpoint expects {net.channels} channels, image has {y.channels}")
    net.eval()
    h, w = y.height, y.width
    planes = to_model_range(y.planes())
    planes = np.pad(planes, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")[None]
    out = []
    with no_grad():
        for k in range(num_candidates):
            z = sample_z(planes.shape[2:], seed, draw=k)
            xhat = net(Tensor(planes), z).data[0, :, :h, :w]
            pixels = np.clip(np.floor(to_pixel_range(xhat) + 0.5), 0, 255).astype(np.uint8)
            out.append(ImageBuffer(np.ascontiguousarray(pixels.transpose(1, 2, 0)), y.color))
    return out


def range_excess(candidate: ImageBuffer, y_coeffs: np.ndarray, Q: QuantTable) -> np.ndarray:
    """Per-coefficient overshoot ``|X - Y| - Q/2`` (negative inside the band)."""
    x = dct2_blocks(pad_to_blocks(candidate.planes().astype(np.float64)) - 128.0)
    return np.abs(x - y_coeffs) - Q.q / 2.0
