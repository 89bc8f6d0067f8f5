"""Procedural referring-segmentation scenes and seen/unseen splits.

Scenes are drawn on a grid of 4x4-pixel cells (the stride of the finest
feature map), so ground-truth masks are exactly representable at the
resolution the model predicts. Each expression is four words
(shape, colour, size, position) naming exactly one object in the scene.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ConfigError, Vocabulary
from .rng import Rng

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
SIZES = ("small", "large")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")
ATTRIBUTES = ("shape", "color", "size", "position")
CELL = 4
EXPR_LEN = 4


class GenerationError(RuntimeError):
    pass


def vocabulary() -> Vocabulary:
    return Vocabulary(list(SHAPES) + list(COLORS) + list(SIZES) + list(POSITIONS))


def shape_cells(shape: str, k: int) -> np.ndarray:
    """k x k boolean cell mask of a shape."""
    i, j = np.mgrid[0:k, 0:k]
    if shape == "square":
        m = np.ones((k, k), bool)
    elif shape == "circle":
        c = k / 2
        m = (i + 0.5 - c) ** 2 + (j + 0.5 - c) ** 2 <= c ** 2
    elif shape == "triangle":
        m = j <= i
    elif shape == "cross":
        m = (i == j) | (i == k - 1 - j)
    elif shape == "ring":
        m = (i == 0) | (j == 0) | (i == k - 1) | (j == k - 1)
    elif shape == "bar":
        m = i >= k - k // 2
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    position: str
    row: int
    col: int
    k: int
    intensity: float

    def attributes(self) -> tuple:
        return (self.shape, self.color, self.size, self.position)

    def cell_mask(self, grid: int) -> np.ndarray:
        m = np.zeros((grid, grid), bool)
        m[self.row:self.row + self.k, self.col:self.col + self.k] = shape_cells(self.shape, self.k)
        return m


@dataclass
class SyntheticSample:
    image: np.ndarray          # H x W x 3 in [0, 1]
    expression: np.ndarray     # token ids, length EXPR_LEN
    gt_mask: np.ndarray        # H x W bool
    referent_category: int     # index into SHAPES
    objects: list[SceneObject] = field(repr=False, default_factory=list)
    uid: str = ""

    @property
    def words(self) -> list[str]:
        return vocabulary().decode(self.expression)


def size_cells(size: str, grid: int) -> int:
    return grid // 4 if size == "small" else (3 * grid) // 8


def _center_ok(pos: str, r: int, c: int, k: int, grid: int) -> bool:
    # centre must sit at least one cell away from the midlines
    cr, cc = r + k / 2, c + k / 2
    mid = grid / 2
    top, left = pos.startswith("top"), pos.endswith("left")
    ok_r = cr <= mid - 1 if top else cr >= mid + 1
    ok_c = cc <= mid - 1 if left else cc >= mid + 1
    return ok_r and ok_c


def _place(rng: Rng, obj_attrs, occupied: np.ndarray, grid: int, tries: int = 40):
    shape, color, size, pos = obj_attrs
    k = size_cells(size, grid)
    cand = [(r, c) for r in range(grid - k + 1) for c in range(grid - k + 1) if _center_ok(pos, r, c, k, grid)]
    if not cand:
        return None
    for _ in range(tries):
        r, c = cand[int(rng.integers(len(cand)))]
        # one-cell gap between objects
        if not occupied[max(r - 1, 0):r + k + 1, max(c - 1, 0):c + k + 1].any():
            return r, c, k
    return None


def _random_attrs(rng: Rng, shapes) -> list:
    return [shapes[int(rng.integers(len(shapes)))], list(COLORS)[int(rng.integers(len(COLORS)))],
            SIZES[int(rng.integers(2))], POSITIONS[int(rng.integers(4))]]


def render(objects: list[SceneObject], image_size: int) -> np.ndarray:
    grid = image_size // CELL
    img = np.zeros((image_size, image_size, 3))
    block = np.ones((CELL, CELL), bool)
    for o in objects:
        pix = np.kron(o.cell_mask(grid), block)
        img[pix] = np.array(COLORS[o.color]) * o.intensity
    return img


def generate_scene(rng: Rng, categories, image_size: int = 64, min_objects: int = 2, max_objects: int = 5,
                   copy_prob: float = 0.85, max_retries: int = 50) -> SyntheticSample:
    if image_size % 32:
        raise ConfigError(f"image size {image_size} must be divisible by 32")
    grid = image_size // CELL
    cats = sorted(categories)
    if not cats:
        raise ConfigError("need at least one referent category")
    for _ in range(max_retries):
        occupied = np.zeros((grid, grid), bool)
        ref_attrs = _random_attrs(rng, [SHAPES[c] for c in cats])
        spot = _place(rng, ref_attrs, occupied, grid)
        if spot is None:
            continue
        objects = [SceneObject(*ref_attrs, *spot, intensity=float(rng.uniform((), 0.7, 1.0)))]
        occupied |= objects[0].cell_mask(grid)
        n_obj = int(rng.integers(min_objects, max_objects + 1))
        for _ in range(n_obj - 1):
            for _attempt in range(20):
                attrs = _random_attrs(rng, SHAPES)
                if rng.random() < copy_prob:
                    n_copy = int(rng.integers(1, len(ATTRIBUTES)))
                    for a in rng.choice(len(ATTRIBUTES), size=n_copy, replace=False):
                        attrs[int(a)] = ref_attrs[int(a)]
                if tuple(attrs) == tuple(ref_attrs):
                    continue
                spot = _place(rng, attrs, occupied, grid)
                if spot is not None:
                    o = SceneObject(*attrs, *spot, intensity=float(rng.uniform((), 0.7, 1.0)))
                    objects.append(o)
                    occupied |= o.cell_mask(grid)
                    break
        if len(objects) < min_objects:
            continue
        vocab = vocabulary()
        ref = objects[0]
        gt = np.kron(ref.cell_mask(grid), np.ones((CELL, CELL), bool))
        return SyntheticSample(render(objects, image_size), np.array(vocab.encode(ref.attributes())),
                               gt, SHAPES.index(ref.shape), objects)
    raise GenerationError(f"could not build a valid scene after {max_retries} attempts")


def generate_dataset(seed: int, n_samples: int, categories=None, image_size: int = 64,
                     stream: str = "data", min_objects: int = 2, max_objects: int = 5) -> list[SyntheticSample]:
    """Deterministic per (seed, stream); sample i depends only on its own sub-stream."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    cats = set(range(len(SHAPES))) if categories is None else {_cat_id(c) for c in categories}
    base = Rng(seed, stream)
    out = []
    for i in range(n_samples):
        s = generate_scene(base.child(f"sample{i}"), cats, image_size, min_objects, max_objects)
        s.uid = f"{stream}:{seed}:{i}"
        out.append(s)
    return out


def _cat_id(c) -> int:
    if isinstance(c, str):
        if c not in SHAPES:
            raise ConfigError(f"unknown shape category {c!r}")
        return SHAPES.index(c)
    return int(c)


def matching_objects(sample: SyntheticSample) -> list[int]:
    """Brute-force: indices of scene objects whose attributes match the expression."""
    words = tuple(vocabulary().decode(sample.expression))
    return [i for i, o in enumerate(sample.objects) if o.attributes() == words]


@dataclass
class SplitSpec:
    seen_categories: set
    unseen_categories: set
    splits: dict[str, list[int]]
    excluded: list[int] = field(default_factory=list)


SPLIT_NAMES = ("train", "val-seen", "val-unseen", "test-seen", "test-unseen")


def make_generalization_split(data: list[SyntheticSample], unseen, fractions=(0.7, 0.15, 0.15),
                              seed: int = 0) -> SplitSpec:
    """Pool-level train/val/test split, then drop unseen-referent samples from train."""
    unseen = {_cat_id(c) for c in unseen}
    all_cats = set(range(len(SHAPES)))
    if not unseen <= all_cats:
        raise ConfigError(f"unseen categories {sorted(unseen)} not all known")
    present = {s.referent_category for s in data}
    if not (present - unseen):
        raise ConfigError("unseen categories cover every referent category; nothing left to train on")
    n = len(data)
    order = Rng(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pools = {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}
    splits = {name: [] for name in SPLIT_NAMES}
    excluded = []
    for i in sorted(pools["train"]):
        (excluded if data[i].referent_category in unseen else splits["train"]).append(int(i))
    for pool in ("val", "test"):
        for i in sorted(pools[pool]):
            tag = "unseen" if data[i].referent_category in unseen else "seen"
            splits[f"{pool}-{tag}"].append(int(i))
    return SplitSpec(all_cats - unseen, unseen, splits, excluded)


_CHANNEL_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


def _color_of(rgb) -> str:
    for name, c in COLORS.items():
        if tuple(c) == tuple(rgb):
            return name
    raise KeyError(rgb)


def augment(image: np.ndarray, expression: np.ndarray, gt: np.ndarray, rng: Rng):
    """Random h/v flip and RGB channel permutation, with the expression rewritten to match.

    Channel permutations map the palette onto itself, so every colour word
    still names exactly the colour that is drawn.
    """
    vocab = vocabulary()
    words = vocab.decode(expression)
    shape, color, size, pos = words
    vert, horiz = pos.split("-")
    if rng.random() < 0.5:
        image, gt = image[:, ::-1], gt[:, ::-1]
        horiz = "right" if horiz == "left" else "left"
    if rng.random() < 0.5:
        image, gt = image[::-1], gt[::-1]
        vert = "bottom" if vert == "top" else "top"
    perm = _CHANNEL_PERMS[int(rng.integers(len(_CHANNEL_PERMS)))]
    image = image[..., list(perm)]
    color = _color_of(np.array(COLORS[color])[list(perm)])
    expr = np.array(vocab.encode([shape, color, size, f"{vert}-{horiz}"]))
    return np.ascontiguousarray(image), expr, np.ascontiguousarray(gt)
