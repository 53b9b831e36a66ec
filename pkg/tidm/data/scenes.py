"""Procedural two-sprite scenes with captions and background masks.

Each identity is a shape plus a two-colour palette; each background is a
pattern plus a colour pair. Scenes put one sprite on the left and one on the
right, optionally joined by a contact bar ("shakes"; otherwise "meets").
Everything is drawn with OpenCV integer primitives, so renders are exact.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from ..errors import DatasetError, InputError
from ..models.schemas import DatasetConfig, SceneSpec
from ..numerics import Rng
from .imageio import from_uint8, read_ppm, write_ppm

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
PATTERNS = ("hstripes", "vstripes", "checker", "dots")
SPRITE_RADIUS = 4
CONTACT_COLOR = (255, 255, 255)

Color = Tuple[int, int, int]


def _hsv_color(hue: float, saturation: int, value: int) -> Color:
    hsv = np.array([[[int(hue) % 180, saturation, value]]], dtype=np.uint8)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0]
    return int(rgb[0]), int(rgb[1]), int(rgb[2])


def identity_palette(identity: int, n_identities: int) -> Tuple[str, Color, Color]:
    shape = SHAPES[identity % len(SHAPES)]
    hue = identity * 180.0 / n_identities
    return shape, _hsv_color(hue, 230, 235), _hsv_color(hue + 90, 200, 120)


def background_palette(background: int, n_backgrounds: int) -> Tuple[str, Color, Color]:
    pattern = PATTERNS[background % len(PATTERNS)]
    hue = 15 + background * 180.0 / n_backgrounds
    return pattern, _hsv_color(hue, 70, 90), _hsv_color(hue + 30, 50, 150)


def _draw_background(canvas: np.ndarray, background: int, n_backgrounds: int) -> None:
    pattern, base, alt = background_palette(background, n_backgrounds)
    size = canvas.shape[0]
    canvas[:] = base
    step = 4
    for k in range(0, size, step):
        if pattern == "hstripes":
            cv2.rectangle(canvas, (0, k), (size - 1, k + 1), alt, -1, cv2.LINE_8)
        elif pattern == "vstripes":
            cv2.rectangle(canvas, (k, 0), (k + 1, size - 1), alt, -1, cv2.LINE_8)
        elif pattern == "checker":
            for j in range(0, size, step):
                if (k // step + j // step) % 2 == 0:
                    cv2.rectangle(canvas, (k, j), (k + step - 1, j + step - 1), alt, -1, cv2.LINE_8)
        else:
            for j in range(0, size, step):
                cv2.circle(canvas, (k + 1, j + 1), 1, alt, -1, cv2.LINE_8)


def _draw_sprite(canvas: np.ndarray, shape: str, center: Tuple[int, int], body: Color, accent: Color) -> None:
    cx, cy = center
    r = SPRITE_RADIUS
    if shape == "circle":
        cv2.circle(canvas, center, r, body, -1, cv2.LINE_8)
        cv2.circle(canvas, center, 1, accent, -1, cv2.LINE_8)
    elif shape == "square":
        cv2.rectangle(canvas, (cx - r, cy - r), (cx + r, cy + r), body, -1, cv2.LINE_8)
        cv2.rectangle(canvas, (cx - 1, cy - 1), (cx + 1, cy + 1), accent, -1, cv2.LINE_8)
    elif shape == "triangle":
        points = np.array([[cx, cy - r], [cx - r, cy + r], [cx + r, cy + r]], dtype=np.int32)
        cv2.fillPoly(canvas, [points], body, cv2.LINE_8)
        cv2.rectangle(canvas, (cx - 1, cy + 1), (cx + 1, cy + 2), accent, -1, cv2.LINE_8)
    elif shape == "diamond":
        points = np.array([[cx, cy - r], [cx + r, cy], [cx, cy + r], [cx - r, cy]], dtype=np.int32)
        cv2.fillPoly(canvas, [points], body, cv2.LINE_8)
        cv2.circle(canvas, center, 1, accent, -1, cv2.LINE_8)
    elif shape == "cross":
        cv2.rectangle(canvas, (cx - r, cy - 1), (cx + r, cy + 1), body, -1, cv2.LINE_8)
        cv2.rectangle(canvas, (cx - 1, cy - r), (cx + 1, cy + r), accent, -1, cv2.LINE_8)
    else:
        cv2.circle(canvas, center, r, body, 2, cv2.LINE_8)
        cv2.circle(canvas, center, 1, accent, -1, cv2.LINE_8)


def _draw_contact(canvas: np.ndarray, spec: SceneSpec, color: Color) -> None:
    (ax, ay), (bx, by) = spec.position_a, spec.position_b
    y = (ay + by) // 2
    cv2.rectangle(canvas, (ax + SPRITE_RADIUS - 1, y - 1), (bx - SPRITE_RADIUS + 1, y), color, -1, cv2.LINE_8)


def render_scene(spec: SceneSpec, config: DatasetConfig) -> Tuple[np.ndarray, np.ndarray]:
    """One scene as ((3, S, S) float image in [-1, 1], (S, S) bool background mask)."""
    size = config.image_size
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    foreground = np.zeros((size, size, 3), dtype=np.uint8)
    _draw_background(canvas, spec.background, config.n_backgrounds)
    white = (255, 255, 255)
    for identity, position in ((spec.identity_a, spec.position_a), (spec.identity_b, spec.position_b)):
        shape, body, accent = identity_palette(identity, config.n_identities)
        _draw_sprite(canvas, shape, tuple(position), body, accent)
        _draw_sprite(foreground, shape, tuple(position), white, white)
    if spec.contact:
        _draw_contact(canvas, spec, CONTACT_COLOR)
        _draw_contact(foreground, spec, white)
    return from_uint8(canvas), foreground[:, :, 0] == 0


def render_scenes(specs: Sequence[SceneSpec], config: DatasetConfig) -> Tuple[np.ndarray, np.ndarray]:
    size = config.image_size
    images = np.zeros((len(specs), 3, size, size), dtype=np.float32)
    masks = np.zeros((len(specs), size, size), dtype=bool)
    for i, spec in enumerate(specs):
        images[i], masks[i] = render_scene(spec, config)
    return images, masks


def _sample_spec(rng: Rng, identities: Sequence[int], config: DatasetConfig, first: Optional[int] = None) -> SceneSpec:
    size = config.image_size
    r = SPRITE_RADIUS
    draws = rng.integers(1 << 30, 7)
    if first is None:
        a = identities[draws[0] % len(identities)]
    else:
        a = first
    others = [i for i in identities if i != a]
    b = others[draws[1] % len(others)]
    background = int(draws[2] % config.n_backgrounds)
    lo, hi = r + 1, size // 2 - r - 2
    ax = lo + int(draws[3] % max(hi - lo + 1, 1))
    bx = size - 1 - (lo + int(draws[4] % max(hi - lo + 1, 1)))
    y_lo, y_hi = r + 1, size - r - 2
    ay = y_lo + int(draws[5] % (y_hi - y_lo + 1))
    contact = bool(rng.uniform(1)[0] < config.contact_prob)
    by = ay if contact else y_lo + int(draws[6] % (y_hi - y_lo + 1))
    return SceneSpec(
        identity_a=int(a),
        identity_b=int(b),
        background=background,
        position_a=(ax, ay),
        position_b=(bx, by),
        contact=contact,
    )


def instance_caption(spec: SceneSpec, placeholder: str) -> str:
    """Caption with the left identity replaced by the placeholder token."""
    return spec.caption.replace(f"ident{spec.identity_a}", placeholder, 1)


def parse_caption(caption: str, aliases: Optional[Dict[str, int]] = None) -> Tuple[int, int, int]:
    """(left identity, right identity, background) from ``<a> [sprite] <rel> <b> [sprite] in bg<m>``."""
    aliases = aliases or {}
    words = [w for w in caption.lower().split() if w != "sprite"]
    if len(words) != 5 or words[3] != "in" or not words[4].startswith("bg"):
        raise InputError(f"caption {caption!r} does not follow '<a> <relation> <b> in bg<m>'")

    def identity(word: str) -> int:
        if word in aliases:
            return aliases[word]
        if word.startswith("ident") and word[5:].isdigit():
            return int(word[5:])
        raise InputError(f"caption {caption!r}: {word!r} is not an identity")

    return identity(words[0]), identity(words[2]), int(words[4][2:])


@dataclass
class SceneDataset:
    images: np.ndarray
    masks: np.ndarray
    specs: List[SceneSpec]
    captions: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.captions:
            self.captions = [spec.caption for spec in self.specs]

    def __len__(self) -> int:
        return len(self.specs)


@dataclass
class DatasetBundle:
    train: SceneDataset
    probe: SceneDataset
    instances: SceneDataset


def make_dataset(config: DatasetConfig, seed: int, placeholder: str = "sks") -> DatasetBundle:
    """Training scenes without the held-out identity, a probe split with every
    identity, and instance renders of the held-out identity."""
    if config.n_identities < 3:
        raise InputError(f"make_dataset: need at least 3 identities, got {config.n_identities}")
    if config.n_backgrounds < 2:
        raise InputError(f"make_dataset: need at least 2 backgrounds, got {config.n_backgrounds}")
    held_out = config.held_out
    seen = [i for i in range(config.n_identities) if i != held_out]
    everyone = list(range(config.n_identities))
    root = Rng(seed)

    train_rng = root.fork("scenes/train")
    train_specs = [_sample_spec(train_rng, seen, config) for _ in range(config.n_scenes)]
    probe_rng = root.fork("scenes/probe")
    probe_specs = [_sample_spec(probe_rng, everyone, config) for _ in range(config.n_probe_scenes)]
    instance_rng = root.fork("scenes/instances")
    instance_specs = [_sample_spec(instance_rng, everyone, config, first=held_out) for _ in range(config.n_instances)]

    bundle = DatasetBundle(
        train=SceneDataset(*render_scenes(train_specs, config), train_specs),
        probe=SceneDataset(*render_scenes(probe_specs, config), probe_specs),
        instances=SceneDataset(
            *render_scenes(instance_specs, config),
            instance_specs,
            [instance_caption(spec, placeholder) for spec in instance_specs],
        ),
    )
    logger.info(
        "Scenes: rendered %d training, %d probe and %d instance scenes (held-out identity %d)",
        len(train_specs),
        len(probe_specs),
        len(instance_specs),
        held_out,
    )
    return bundle


# ------------------------------------------------------------------
# On-disk layout
# ------------------------------------------------------------------


def save_split(directory: str, dataset: SceneDataset) -> None:
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    records = []
    for i, (spec, caption) in enumerate(zip(dataset.specs, dataset.captions)):
        name = f"images/scene_{i:05d}.ppm"
        write_ppm(os.path.join(directory, name), dataset.images[i])
        records.append(json.dumps({"file": name, "caption": caption, **spec.model_dump()}, sort_keys=True))
    with open(os.path.join(directory, "scenes.jsonl"), "w", encoding="utf-8") as handle:
        handle.write("".join(record + "\n" for record in records))
    with open(os.path.join(directory, "captions.txt"), "w", encoding="utf-8") as handle:
        handle.write("".join(caption + "\n" for caption in dataset.captions))
    np.save(os.path.join(directory, "masks.npy"), dataset.masks)


def _read_record(directory: str, line: str, number: int) -> Tuple[str, np.ndarray, SceneSpec]:
    try:
        record = json.loads(line)
        caption = record.pop("caption")
        image = read_ppm(os.path.join(directory, record.pop("file")))
        return caption, image, SceneSpec(**record)
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{directory}/scenes.jsonl line {number}: {exc}") from exc


def load_split(directory: str) -> SceneDataset:
    path = os.path.join(directory, "scenes.jsonl")
    if not os.path.exists(path):
        raise InputError(f"no dataset split at {directory} (missing scenes.jsonl)")
    specs, captions, images = [], [], []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            caption, image, spec = _read_record(directory, line, number)
            captions.append(caption)
            images.append(image)
            specs.append(spec)
    if not specs:
        raise InputError(f"dataset split at {directory} is empty")
    try:
        masks = np.load(os.path.join(directory, "masks.npy"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{directory}: cannot read masks.npy: {exc}") from exc
    stacked = np.stack(images)
    if masks.shape != (stacked.shape[0],) + stacked.shape[2:]:
        raise DatasetError(f"{directory}: masks {masks.shape} do not match {stacked.shape[0]} images")
    return SceneDataset(stacked, masks.astype(bool), specs, captions)


def save_dataset(out_dir: str, bundle: DatasetBundle) -> None:
    save_split(os.path.join(out_dir, "train"), bundle.train)
    save_split(os.path.join(out_dir, "probe"), bundle.probe)
    save_split(os.path.join(out_dir, "instances"), bundle.instances)
