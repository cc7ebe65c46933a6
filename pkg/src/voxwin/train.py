"""Toy pretext training: per-voxel semantic segmentation on synthetic scenes.

Scene colors encode the class, so the task is linearly separable from the raw
signal and a correctly wired encoder/decoder reaches high accuracy in a few
dozen epochs.  Everything is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tape, softmax_cross_entropy
from .backbone import (
    BackboneParams,
    DecoderParams,
    PreparedScene,
    decode_segmentation,
    encode_prepared,
    named_parameters,
    prepare_scene,
)
from .config import BackboneConfig
from .pointcloud import PointCloud
from .streams import substream_rng, substream_seed


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class LabeledScene:
    cloud: PointCloud
    point_classes: np.ndarray  # (P,) int64


@dataclass
class PreparedLabeledScene:
    prep: PreparedScene
    voxel_labels: np.ndarray  # finest-level labels from the representative point


def make_toy_dataset(
    num_scenes: int,
    points_per_scene: int,
    seed: int,
    num_classes: int = 2,
    m: int = 6,
    extent: float = 1.0,
) -> list[LabeledScene]:
    """Scenes whose point colors are offset per class (linearly separable)."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(num_scenes):
        pos = rng.uniform(0.0, extent, size=(points_per_scene, 3))
        classes = rng.integers(0, num_classes, size=points_per_scene)
        # class 0 colors near +0.6, class 1 near -0.6, etc.; noise keeps them inside [-1, 1]
        base = np.linspace(0.6, -0.6, num_classes)[classes]
        color = np.clip(base[:, None] + rng.normal(0.0, 0.12, size=(points_per_scene, 3)), -1.0, 1.0)
        sig = [pos, color]
        if m == 9:
            normal = rng.normal(size=(points_per_scene, 3))
            normal /= np.linalg.norm(normal, axis=1, keepdims=True)
            sig.append(normal)
        scenes.append(LabeledScene(PointCloud(np.concatenate(sig, axis=1)), classes.astype(np.int64)))
    return scenes


def prepare_labeled(scene: LabeledScene, config: BackboneConfig, seed: int) -> PreparedLabeledScene:
    prep = prepare_scene(scene.cloud, config, seed)
    labels = scene.point_classes[prep.hierarchy.levels[0].rep_indices]
    return PreparedLabeledScene(prep, labels)


@dataclass
class Hyperparams:
    epochs: int = 50
    learning_rate: float = 0.01
    optimizer: str = "adam"  # or "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)  # per-epoch mean loss
    accuracy: float = 0.0
    epochs_run: int = 0


class Optimizer:
    """Plain SGD (optional momentum) or Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Parameter], hp: Hyperparams):
        self.params = params
        self.hp = hp
        self.step_count = 0
        self.state: dict[str, np.ndarray] = {}
        if hp.optimizer == "adam":
            for name, p in params.items():
                self.state[f"opt.m.{name}"] = np.zeros_like(p.data)
                self.state[f"opt.v.{name}"] = np.zeros_like(p.data)
        elif hp.optimizer == "sgd":
            if hp.momentum != 0.0:
                for name, p in params.items():
                    self.state[f"opt.mom.{name}"] = np.zeros_like(p.data)
        else:
            raise ValueError(f"unknown optimizer {hp.optimizer!r}")

    def step(self):
        hp = self.hp
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad
            if hp.optimizer == "adam":
                m = self.state[f"opt.m.{name}"]
                v = self.state[f"opt.v.{name}"]
                m[...] = hp.adam_beta1 * m + (1 - hp.adam_beta1) * g
                v[...] = hp.adam_beta2 * v + (1 - hp.adam_beta2) * g * g
                mhat = m / (1 - hp.adam_beta1 ** self.step_count)
                vhat = v / (1 - hp.adam_beta2 ** self.step_count)
                p.data -= hp.learning_rate * mhat / (np.sqrt(vhat) + hp.adam_eps)
            else:
                if hp.momentum != 0.0:
                    buf = self.state[f"opt.mom.{name}"]
                    buf[...] = hp.momentum * buf + g
                    p.data -= hp.learning_rate * buf
                else:
                    p.data -= hp.learning_rate * g

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def state_blobs(self) -> dict[str, np.ndarray]:
        blobs = dict(self.state)
        blobs["opt.step_count"] = np.array(float(self.step_count))
        return blobs

    def load_state_blobs(self, blobs: dict[str, np.ndarray]) -> None:
        if "opt.step_count" in blobs:
            self.step_count = int(blobs["opt.step_count"])
        for name in self.state:
            if name in blobs:
                self.state[name][...] = blobs[name]


def scene_loss(
    prep_scene: PreparedLabeledScene,
    backbone: BackboneParams,
    decoder: DecoderParams,
    engine: str = "streaming",
    threads: int = 1,
    training: bool = True,
):
    tape = Tape()
    states = encode_prepared(tape, prep_scene.prep, backbone, engine=engine,
                             threads=threads, training=training)
    logits = decode_segmentation(tape, states, decoder, backbone.config.strides)
    loss = softmax_cross_entropy(tape, logits, prep_scene.voxel_labels)
    return tape, loss, logits


def evaluate_accuracy(
    prepared: list[PreparedLabeledScene],
    backbone: BackboneParams,
    decoder: DecoderParams,
    engine: str = "streaming",
    threads: int = 1,
) -> float:
    correct = 0
    total = 0
    for scene in prepared:
        _, _, logits = scene_loss(scene, backbone, decoder, engine=engine,
                                  threads=threads, training=False)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == scene.voxel_labels).sum())
        total += scene.voxel_labels.size
    return correct / total if total else 0.0


def train_toy(
    dataset: list[LabeledScene],
    config: BackboneConfig,
    hp: Hyperparams,
    seed: int,
    backbone: BackboneParams | None = None,
    decoder: DecoderParams | None = None,
    optimizer: Optimizer | None = None,
    start_epoch: int = 0,
    num_classes: int = 2,
    engine: str = "streaming",
    threads: int = 1,
    on_epoch=None,
):
    """Run the pretext loop; returns (result, backbone, decoder, optimizer).

    Scenes are visited in a fixed order each epoch, so resuming from a
    checkpoint at epoch k reproduces the uninterrupted run exactly.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if (backbone is None) != (decoder is None):
        raise ValueError("provide both backbone and decoder, or neither")
    m = dataset[0].cloud.num_channels
    if backbone is None:
        from .backbone import build_backbone_params, build_decoder_params

        rng = substream_rng(seed, "init")
        backbone = build_backbone_params(config, m, rng)
        decoder = build_decoder_params(config, num_classes, rng)
    params = named_parameters(backbone, decoder)
    if optimizer is None:
        optimizer = Optimizer(params, hp)
    voxel_seed = substream_seed(seed, "voxelize")
    prepared = [prepare_labeled(s, config, voxel_seed) for s in dataset]

    result = TrainResult()
    for epoch in range(start_epoch, hp.epochs):
        epoch_losses = []
        for scene in prepared:
            optimizer.zero_grads()
            tape, loss, _ = scene_loss(scene, backbone, decoder, engine=engine, threads=threads)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}")
            tape.backward(loss)
            optimizer.step()
            epoch_losses.append(value)
        mean_loss = float(np.mean(epoch_losses))
        result.losses.append(mean_loss)
        result.epochs_run = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    result.accuracy = evaluate_accuracy(prepared, backbone, decoder, engine=engine, threads=threads)
    return result, backbone, decoder, optimizer
