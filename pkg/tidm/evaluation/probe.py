"""Small convolutional classifier used as the identity/background oracle.

Three heads read the flattened feature map: left identity, right identity,
background.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from tqdm import tqdm

from ..errors import InputError
from ..models.schemas import ProbeConfig
from ..numerics import Adam, ParamStore, Rng, Tensor, add, backpropagate, cross_entropy, no_grad, reshape, silu
from ..diffusion.layers import Conv2d, GroupNorm, Layer, Linear, ParamSpec, ResBlock, init_specs
from ..diffusion.training import TrainingLog, check_loss, divergence_guard, minibatches
from ..data.scenes import SceneDataset

logger = logging.getLogger(__name__)

PREFIX = "probe"
HEADS = ("left", "right", "background")


def scene_labels(dataset: SceneDataset) -> Dict[str, np.ndarray]:
    return {
        "left": np.array([s.identity_a for s in dataset.specs], dtype=np.int64),
        "right": np.array([s.identity_b for s in dataset.specs], dtype=np.int64),
        "background": np.array([s.background for s in dataset.specs], dtype=np.int64),
    }


class ProbeClassifier:
    def __init__(self, config: ProbeConfig, n_identities: int, n_backgrounds: int, image_size: int):
        self.config = config
        self.n_identities = n_identities
        self.n_backgrounds = n_backgrounds
        widths = list(config.channels)
        self.conv_in = Conv2d(f"{PREFIX}/conv_in", 3, widths[0])
        self.blocks: List[ResBlock] = []
        self.down: List[Conv2d] = []
        prev = widths[0]
        size = image_size
        for level, width in enumerate(widths):
            self.blocks.append(ResBlock(f"{PREFIX}/level{level}/res", prev, width, min(8, width)))
            self.down.append(Conv2d(f"{PREFIX}/level{level}/down", width, width, stride=2))
            prev = width
            size = (size + 1) // 2
        self.norm = GroupNorm(f"{PREFIX}/norm_out", prev, min(8, prev))
        self.features = prev * size * size
        self.heads = {
            "left": Linear(f"{PREFIX}/head_left", self.features, n_identities),
            "right": Linear(f"{PREFIX}/head_right", self.features, n_identities),
            "background": Linear(f"{PREFIX}/head_background", self.features, n_backgrounds),
        }

    def layers(self) -> List[Layer]:
        return [self.conv_in, *self.blocks, *self.down, self.norm, *self.heads.values()]

    def specs(self) -> List[ParamSpec]:
        return [spec for layer in self.layers() for spec in layer.specs()]

    def init_params(self, rng: Rng) -> ParamStore:
        store = ParamStore()
        init_specs(self.specs(), store, rng)
        return store

    def logits(self, params: ParamStore, images: np.ndarray) -> Dict[str, Tensor]:
        h = self.conv_in(params, Tensor(images))
        for block, down in zip(self.blocks, self.down):
            h = down(params, block(params, h))
        flat = reshape(silu(self.norm(params, h)), (h.shape[0], self.features))
        return {head: layer(params, flat) for head, layer in self.heads.items()}

    def predict(self, params: ParamStore, images: np.ndarray, chunk: int = 128) -> Dict[str, np.ndarray]:
        images = np.asarray(images, dtype=np.float32)
        out: Dict[str, List[np.ndarray]] = {head: [] for head in HEADS}
        with no_grad():
            for start in range(0, images.shape[0], chunk):
                for head, logits in self.logits(params, images[start : start + chunk]).items():
                    out[head].append(logits.data.argmax(axis=1))
        return {head: np.concatenate(parts) if parts else np.zeros(0, np.int64) for head, parts in out.items()}


@dataclass
class ProbeResult:
    params: ParamStore
    holdout_accuracy: Dict[str, float] = field(default_factory=dict)
    train_accuracy: Dict[str, float] = field(default_factory=dict)
    log: TrainingLog = field(default_factory=lambda: TrainingLog("Probe"))

    @property
    def identity_accuracy(self) -> float:
        return 0.5 * (self.holdout_accuracy["left"] + self.holdout_accuracy["right"])


def _accuracy(probe: ProbeClassifier, params: ParamStore, images: np.ndarray, labels: Dict[str, np.ndarray]) -> Dict[str, float]:
    predicted = probe.predict(params, images)
    return {head: float(np.mean(predicted[head] == labels[head])) for head in HEADS}


def train_probe_classifier(
    dataset: SceneDataset,
    config: ProbeConfig,
    n_identities: int,
    n_backgrounds: int,
    progress: bool = False,
) -> Tuple[ProbeClassifier, ProbeResult]:
    """Cross-entropy on all three heads; accuracy measured on a seeded holdout."""
    n = len(dataset)
    if n < 2:
        raise InputError("train_probe_classifier: need at least 2 labelled scenes")
    labels = scene_labels(dataset)
    if np.unique(np.concatenate([labels["left"], labels["right"]])).size < 2:
        raise InputError("train_probe_classifier: identity labels have a single class")

    probe = ProbeClassifier(config, n_identities, n_backgrounds, dataset.images.shape[-1])
    root = Rng(config.seed)
    params = probe.init_params(root.fork("probe/init"))
    order = root.fork("probe/split").permutation(n)
    n_holdout = max(1, int(round(config.holdout_fraction * n)))
    holdout, train = np.sort(order[:n_holdout]), order[n_holdout:]
    if train.size == 0:
        raise InputError("train_probe_classifier: holdout fraction leaves no training scenes")

    optimizer = Adam(config.learning_rate)
    shuffle_rng = root.fork("probe/shuffle")
    log = TrainingLog("Probe")
    step = 0
    for epoch in tqdm(range(config.epochs), desc="probe", disable=not progress):
        losses = []
        for batch in minibatches(train.size, config.batch_size, shuffle_rng):
            idx = train[batch]
            with divergence_guard("Probe", epoch, step):
                logits = probe.logits(params, dataset.images[idx])
                loss = add(
                    add(cross_entropy(logits["left"], labels["left"][idx]), cross_entropy(logits["right"], labels["right"][idx])),
                    cross_entropy(logits["background"], labels["background"][idx]),
                )
                optimizer.step(params, backpropagate(loss, params))
            step += 1
            losses.append(check_loss("Probe", loss.item(), epoch, step))
        log.epoch(epoch, float(np.mean(losses)))

    held = {head: values[holdout] for head, values in labels.items()}
    seen = {head: values[train] for head, values in labels.items()}
    result = ProbeResult(
        params=params,
        holdout_accuracy=_accuracy(probe, params, dataset.images[holdout], held),
        train_accuracy=_accuracy(probe, params, dataset.images[train], seen),
        log=log,
    )
    logger.info(
        "Probe: holdout accuracy left=%.3f right=%.3f background=%.3f",
        result.holdout_accuracy["left"],
        result.holdout_accuracy["right"],
        result.holdout_accuracy["background"],
    )
    return probe, result
