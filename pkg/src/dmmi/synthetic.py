"""Synthetic zero/one/many referring-segmentation benchmark.

Scenes are coloured geometric shapes placed on a grid, one object per cell.
Expressions come from a small template table, so target sets, masks and
entity-phrase spans are exact by construction.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SETTINGS = ("one_to_zero", "one_to_one", "one_to_many")

PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles"}

# 8-bit RGB so PNG storage is lossless
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
}
BACKGROUND = (128, 128, 128)

# {0}, {1} are entity phrases ("red circle" / "red circles")
SINGULAR_TEMPLATES = (
    "the {0}",
    "find the {0}",
    "the {0} in the picture",
    "a {0}",
)
PLURAL_TEMPLATES = (
    "the {0}",
    "all {0}",
    "the {0} in the image",
    "every one of the {0}",
)
PAIR_TEMPLATES = (
    "the {0} and the {1}",
    "both the {0} and the {1}",
)


class UnsatisfiableSetting(ValueError):
    """The requested setting cannot be realised in the given scene."""


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    size: int
    anchor: tuple[int, int]
    # pixel offset of the bounding box inside its cell
    offset: tuple[int, int] = (0, 0)

    def bbox(self, cell: tuple[int, int]) -> tuple[int, int, int, int]:
        """(top, left, bottom, right), half-open."""
        top = self.anchor[0] * cell[0] + self.offset[0]
        left = self.anchor[1] * cell[1] + self.offset[1]
        return top, left, top + self.size, left + self.size


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    grid: tuple[int, int]
    image_size: tuple[int, int]

    @property
    def cell(self) -> tuple[int, int]:
        return self.image_size[0] // self.grid[0], self.image_size[1] // self.grid[1]

    def matching(self, color: str, shape: str) -> set[int]:
        return {o.id for o in self.objects if o.color == color and o.shape == shape}


@dataclass
class Sample:
    image: np.ndarray
    expression: str
    entity_spans: list[tuple[int, int]]
    target_ids: set[int]
    mask: np.ndarray
    setting: str
    delta: int
    sample_id: str = ""


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_test: int = 400
    mix: dict = field(
        default_factory=lambda: {"one_to_one": 0.4, "one_to_many": 0.4, "one_to_zero": 0.2}
    )
    seed: int = 0
    grid: tuple[int, int] = (3, 3)
    image_size: tuple[int, int] = (64, 64)
    min_objects: int = 2
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 19

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("grid", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if set(self.mix) - set(SETTINGS):
            raise ValueError(f"mix: unknown settings {sorted(set(self.mix) - set(SETTINGS))}")
        if any(v < 0 for v in self.mix.values()) or sum(self.mix.values()) <= 0:
            raise ValueError("mix: proportions must be non-negative with positive sum")
        for name in ("n_train", "n_test", "min_objects", "max_objects", "min_size", "max_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects: exceeds max_objects")
        if self.max_objects > self.grid[0] * self.grid[1]:
            raise ValueError("max_objects: exceeds grid capacity")
        cell = min(self.image_size[0] // self.grid[0], self.image_size[1] // self.grid[1])
        if not 1 <= self.min_size <= self.max_size <= cell:
            raise ValueError(f"min_size/max_size: must satisfy 1 <= min <= max <= cell ({cell})")


def generate_scene(rng_seed: int, grid: tuple[int, int], n_objects: int,
                   image_size: tuple[int, int] = (64, 64),
                   size_range: tuple[int, int] | None = None) -> SceneSpec:
    """Draw a random scene with at most one object per grid cell."""
    rows, cols = grid
    if n_objects > rows * cols:
        raise ValueError(f"n_objects={n_objects} exceeds grid capacity {rows * cols}")
    if n_objects < 0:
        raise ValueError("n_objects must be non-negative")
    cell = (image_size[0] // rows, image_size[1] // cols)
    if size_range is None:
        size_range = (max(1, min(cell) // 2), min(cell))
    lo, hi = size_range
    if not 1 <= lo <= hi <= min(cell):
        raise ValueError(f"size_range {size_range} does not fit cell {cell}")

    rng = np.random.default_rng(rng_seed)
    cells = rng.permutation(rows * cols)[:n_objects]
    objects = []
    for i, c in enumerate(cells):
        size = int(rng.integers(lo, hi + 1))
        offset = (int(rng.integers(0, cell[0] - size + 1)),
                  int(rng.integers(0, cell[1] - size + 1)))
        objects.append(SceneObject(
            id=i,
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=size,
            anchor=(int(c) // cols, int(c) % cols),
            offset=offset,
        ))
    return SceneSpec(tuple(objects), (rows, cols), tuple(image_size))


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size stencil of a shape."""
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    # pixel centres
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base on the bottom row
        half_width = (yy / size) * (size / 2)
        return np.abs(xx - size / 2) <= half_width
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: SceneSpec) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Rasterise a scene; returns an HxWx3 image in [0, 1] and per-object masks."""
    h, w = scene.image_size
    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    masks = {}
    for obj in scene.objects:
        top, left, bottom, right = obj.bbox(scene.cell)
        m = np.zeros((h, w), dtype=bool)
        m[top:bottom, left:right] = shape_mask(obj.shape, obj.size)
        image[m] = PALETTE[obj.color]
        masks[obj.id] = m
    return image.astype(np.float64) / 255.0, masks


def _phrase(color: str, shape: str, plural: bool) -> list[str]:
    return [color, PLURALS[shape] if plural else shape]


def _fill(template: str, phrases: list[list[str]]) -> tuple[str, list[tuple[int, int]]]:
    """Fill a template and return the token spans the phrases occupy."""
    words = []
    spans = []
    pieces = template.split()
    for piece in pieces:
        if piece.startswith("{") and piece.endswith("}"):
            p = phrases[int(piece[1:-1])]
            spans.append((len(words), len(words) + len(p)))
            words.extend(p)
        else:
            words.append(piece)
    return " ".join(words), spans


def compose_expression(scene: SceneSpec, setting: str, rng_seed: int):
    """Pick a templated expression realising ``setting`` in ``scene``.

    Returns ``(expression, target_ids, entity_spans)``. Raises
    UnsatisfiableSetting when the scene cannot support the setting.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    rng = np.random.default_rng(rng_seed)
    combos = [(c, s) for c in COLORS for s in SHAPES]
    counts = {k: len(scene.matching(*k)) for k in combos}

    if setting == "one_to_zero":
        absent = [k for k in combos if counts[k] == 0]
        if not absent:
            raise UnsatisfiableSetting("every attribute combination is present")
        kind = rng.integers(3)
        if kind == 2 and len(absent) >= 2:
            i, j = rng.choice(len(absent), size=2, replace=False)
            phrases = [_phrase(*absent[i], plural=False), _phrase(*absent[j], plural=False)]
            template = PAIR_TEMPLATES[rng.integers(len(PAIR_TEMPLATES))]
        else:
            plural = kind == 1
            phrases = [_phrase(*absent[rng.integers(len(absent))], plural=plural)]
            table = PLURAL_TEMPLATES if plural else SINGULAR_TEMPLATES
            template = table[rng.integers(len(table))]
        text, spans = _fill(template, phrases)
        return text, set(), spans

    unique = [k for k in combos if counts[k] == 1]
    if setting == "one_to_one":
        if not unique:
            raise UnsatisfiableSetting("no attribute combination is unique")
        key = unique[rng.integers(len(unique))]
        template = SINGULAR_TEMPLATES[rng.integers(len(SINGULAR_TEMPLATES))]
        text, spans = _fill(template, [_phrase(*key, plural=False)])
        return text, scene.matching(*key), spans

    repeated = [k for k in combos if counts[k] >= 2]
    options = []
    if repeated:
        options.append("plural")
    if len(unique) >= 2:
        options.append("pair")
    if not options:
        raise UnsatisfiableSetting("no repeated combination and fewer than two unique ones")
    if options[rng.integers(len(options))] == "plural":
        key = repeated[rng.integers(len(repeated))]
        template = PLURAL_TEMPLATES[rng.integers(len(PLURAL_TEMPLATES))]
        text, spans = _fill(template, [_phrase(*key, plural=True)])
        return text, scene.matching(*key), spans
    i, j = rng.choice(len(unique), size=2, replace=False)
    a, b = unique[i], unique[j]
    template = PAIR_TEMPLATES[rng.integers(len(PAIR_TEMPLATES))]
    text, spans = _fill(template, [_phrase(*a, plural=False), _phrase(*b, plural=False)])
    return text, scene.matching(*a) | scene.matching(*b), spans


# ---------------------------------------------------------------------------
# run-length encoding

def encode_mask_rle(mask) -> list[tuple[int, int]]:
    """Row-major maximal runs of foreground pixels as (start, length)."""
    flat = np.asarray(mask).astype(bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[::2], edges[1::2]
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def decode_mask_rle(runs, image_size) -> np.ndarray:
    h, w = image_size
    flat = np.zeros(h * w, dtype=bool)
    prev_end = -1
    for start, length in runs:
        if length <= 0 or start < 0:
            raise ValueError(f"malformed run ({start}, {length})")
        if start + length > h * w:
            raise ValueError(f"run ({start}, {length}) exceeds {h}x{w} pixels")
        if start <= prev_end:
            raise ValueError("runs must be sorted, non-overlapping and non-adjacent")
        flat[start:start + length] = True
        prev_end = start + length
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# dataset assembly

def allocate(n: int, mix: dict) -> dict[str, int]:
    """Split ``n`` into per-setting counts by largest remainder."""
    total = sum(mix.get(s, 0.0) for s in SETTINGS)
    quotas = {s: n * mix.get(s, 0.0) / total for s in SETTINGS}
    counts = {s: int(np.floor(q)) for s, q in quotas.items()}
    left = n - sum(counts.values())
    order = sorted(SETTINGS, key=lambda s: (-(quotas[s] - counts[s]), SETTINGS.index(s)))
    for s in order[:left]:
        counts[s] += 1
    return counts


def realise_scene(seed_key, setting: str, cfg: DatasetConfig, max_attempts: int = 1000):
    """First (scene, expression, target_ids, spans) for ``seed_key`` that realises ``setting``."""
    for attempt in range(max_attempts):
        ss = np.random.SeedSequence([*seed_key, attempt])
        scene_seed, text_seed, count_seed = (int(x) for x in ss.generate_state(3))
        n_obj = int(np.random.default_rng(count_seed).integers(cfg.min_objects, cfg.max_objects + 1))
        scene = generate_scene(scene_seed, cfg.grid, n_obj, cfg.image_size,
                               (cfg.min_size, cfg.max_size))
        try:
            text, targets, spans = compose_expression(scene, setting, text_seed)
        except UnsatisfiableSetting:
            continue
        return scene, text, targets, spans
    raise UnsatisfiableSetting(f"no scene realised {setting} after {max_attempts} attempts")


def make_sample(seed_key, setting: str, cfg: DatasetConfig) -> Sample:
    """Generate one sample of ``setting`` deterministically from ``seed_key``."""
    scene, text, targets, spans = realise_scene(seed_key, setting, cfg)
    image, masks = render(scene)
    mask = np.zeros(cfg.image_size, dtype=bool)
    for t in targets:
        mask |= masks[t]
    return Sample(image=image, expression=text, entity_spans=spans, target_ids=targets,
                  mask=mask, setting=setting, delta=int(setting != "one_to_zero"))


SPLIT_IDS = {"train": 0, "test": 1}


def generate_split(cfg: DatasetConfig, split: str) -> list[Sample]:
    n = cfg.n_train if split == "train" else cfg.n_test
    counts = allocate(n, cfg.mix)
    settings = [s for s in SETTINGS for _ in range(counts[s])]
    order = np.random.default_rng([cfg.seed, SPLIT_IDS[split]]).permutation(len(settings))
    samples = []
    for idx, k in enumerate(order):
        s = make_sample((cfg.seed, SPLIT_IDS[split], idx), settings[k], cfg)
        s.sample_id = f"{split}-{idx:05d}"
        samples.append(s)
    return samples


def to_record(sample: Sample, image_path: str) -> dict:
    return {
        "sample_id": sample.sample_id,
        "image_path": image_path,
        "expression": sample.expression,
        "entity_spans": [list(s) for s in sample.entity_spans],
        "setting": sample.setting,
        "delta": sample.delta,
        "mask_rle": [list(r) for r in encode_mask_rle(sample.mask)],
        "image_size": list(sample.mask.shape),
    }


def build_dataset(cfg: DatasetConfig, out_dir) -> dict[str, Path]:
    """Write ``images/*.png`` plus ``train.jsonl`` / ``test.jsonl`` manifests."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {img_dir}: {e}") from e
    manifests = {}
    for split in ("train", "test"):
        path = out_dir / f"{split}.jsonl"
        lines = []
        for sample in generate_split(cfg, split):
            rel = f"images/{sample.sample_id}.png"
            pixels = np.round(sample.image * 255).astype(np.uint8)
            try:
                Image.fromarray(pixels, mode="RGB").save(out_dir / rel)
            except OSError as e:
                raise OSError(f"cannot write {out_dir / rel}: {e}") from e
            lines.append(json.dumps(to_record(sample, rel), sort_keys=True))
        try:
            path.write_text("".join(line + "\n" for line in lines))
        except OSError as e:
            raise OSError(f"cannot write {path}: {e}") from e
        manifests[split] = path
    with open(out_dir / "dataset_config.json", "w") as f:
        json.dump(_config_dict(cfg), f, indent=2, sort_keys=True)
    return manifests


def _config_dict(cfg: DatasetConfig) -> dict:
    d = dict(cfg.__dict__)
    d["grid"] = list(cfg.grid)
    d["image_size"] = list(cfg.image_size)
    return d


def load_manifest(path) -> list[dict]:
    path = Path(path)
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
            rec["entity_spans"] = [tuple(s) for s in rec["entity_spans"]]
            rec["mask_rle"] = [tuple(r) for r in rec["mask_rle"]]
            rec["image_size"] = tuple(rec["image_size"])
            records.append(rec)
    return records


def load_samples(manifest_path) -> list[Sample]:
    """Load samples (images decoded, masks expanded) listed in a manifest."""
    root = Path(manifest_path).parent
    samples = []
    for rec in load_manifest(manifest_path):
        img_path = os.path.join(root, rec["image_path"])
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        mask = decode_mask_rle(rec["mask_rle"], rec["image_size"])
        samples.append(Sample(image=image, expression=rec["expression"],
                              entity_spans=list(rec["entity_spans"]), target_ids=set(),
                              mask=mask, setting=rec["setting"], delta=int(rec["delta"]),
                              sample_id=rec["sample_id"]))
    return samples
