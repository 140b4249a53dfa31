"""Synthetic composed-retrieval triplets with background clutter and target-swap noise.

A scene is a single coloured shape described by four categorical attributes
(shape, colour, size, quadrant). A modification "text" is a short sequence of
tokens, each token encoding one ``field := value`` edit. Target images are
canonical renderings of their attribute vector and double as the retrieval
gallery.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .fourier import round_half_up
from .pnm import read_pnm, write_pnm

FIELDS = ("shape_id", "color_id", "size_id", "position_id")
SHAPES = ("square", "circle", "triangle", "cross")
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ]
)
BACKGROUND = 0.5
CLUTTER_CONTRAST = 0.15


@dataclass(frozen=True)
class Cardinalities:
    shape: int = 4
    color: int = 6
    size: int = 3
    position: int = 4

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.shape, self.color, self.size, self.position)

    @property
    def vocab_size(self) -> int:
        return sum(self.as_tuple())

    def offsets(self) -> tuple[int, ...]:
        sizes = self.as_tuple()
        return tuple(int(sum(sizes[:i])) for i in range(len(sizes)))


DEFAULT_CARDS = Cardinalities()


@dataclass(frozen=True, order=True)
class AttributeVector:
    shape_id: int
    color_id: int
    size_id: int
    position_id: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.shape_id, self.color_id, self.size_id, self.position_id)

    def validate(self, cards: Cardinalities = DEFAULT_CARDS) -> "AttributeVector":
        for name, v, n in zip(FIELDS, self.as_tuple(), cards.as_tuple()):
            if not 0 <= v < n:
                raise ValueError(f"{name}={v} outside [0, {n})")
        return self

    def hamming(self, other: "AttributeVector") -> int:
        return sum(a != b for a, b in zip(self.as_tuple(), other.as_tuple()))


def encode_edit(field_idx: int, value: int, cards: Cardinalities = DEFAULT_CARDS) -> int:
    if not 0 <= value < cards.as_tuple()[field_idx]:
        raise ValueError(f"value {value} invalid for {FIELDS[field_idx]}")
    return cards.offsets()[field_idx] + value


def decode_token(token: int, cards: Cardinalities = DEFAULT_CARDS) -> tuple[int, int]:
    """Token -> (field index, value)."""
    offsets = cards.offsets()
    for f in reversed(range(len(FIELDS))):
        if token >= offsets[f]:
            value = token - offsets[f]
            if value >= cards.as_tuple()[f]:
                break
            return f, value
    raise ValueError(f"token {token} outside vocabulary of size {cards.vocab_size}")


def validate_modification(tokens, cards: Cardinalities = DEFAULT_CARDS) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    fields = [decode_token(t, cards)[0] for t in tokens]
    if len(set(fields)) != len(fields):
        raise ValueError(f"duplicate field edits in {tokens}")
    return tokens


def apply_modification(attrs: AttributeVector, tokens, cards: Cardinalities = DEFAULT_CARDS) -> AttributeVector:
    values = list(attrs.as_tuple())
    for f, v in (decode_token(t, cards) for t in validate_modification(tokens, cards)):
        values[f] = v
    return AttributeVector(*values)


def random_attrs(rng: np.random.Generator, cards: Cardinalities = DEFAULT_CARDS) -> AttributeVector:
    return AttributeVector(*(int(rng.integers(n)) for n in cards.as_tuple()))


def random_modification(
    attrs: AttributeVector, rng: np.random.Generator, cards: Cardinalities = DEFAULT_CARDS, max_edits: int = 3
) -> tuple[int, ...]:
    n_edits = int(rng.integers(1, max_edits + 1))
    fields = sorted(int(f) for f in rng.choice(len(FIELDS), size=n_edits, replace=False))
    tokens = []
    for f in fields:
        current = attrs.as_tuple()[f]
        choices = [v for v in range(cards.as_tuple()[f]) if v != current]
        tokens.append(encode_edit(f, int(rng.choice(choices)), cards))
    return tuple(tokens)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def shape_geometry(attrs: AttributeVector, image_size: int) -> tuple[int, int, int]:
    """(centre row, centre col, radius) of the foreground shape."""
    q = image_size // 4
    cy = q if attrs.position_id in (0, 1) else 3 * q
    cx = q if attrs.position_id in (0, 2) else 3 * q
    radius = round_half_up(q * (0.375, 0.625, 0.875)[attrs.size_id])
    return cy, cx, max(radius, 1)


def shape_mask(shape_id: int, radius: int, cy: int, cx: int, image_size: int) -> np.ndarray:
    yy, xx = np.mgrid[:image_size, :image_size]
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape_id == 0:
        return inside
    if shape_id == 1:
        return dy * dy + dx * dx <= radius * radius
    if shape_id == 2:
        return inside & (2 * np.abs(dx) <= dy + radius)
    bar = radius // 3
    return inside & ((np.abs(dx) <= bar) | (np.abs(dy) <= bar))


def foreground_mask(attrs: AttributeVector, image_size: int) -> np.ndarray:
    cy, cx, r = shape_geometry(attrs, image_size)
    return shape_mask(attrs.shape_id, r, cy, cx, image_size)


def render_image(attrs: AttributeVector, clutter_level: float, seed: int, image_size: int = 32) -> np.ndarray:
    """Draw the attribute's shape over a seeded low-contrast clutter background.

    Clutter rectangles are accepted only while their union stays within
    ``clutter_level`` of the image area; the shape is painted last so it is
    never occluded.
    """
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    if not 0.0 <= clutter_level <= 1.0:
        raise ValueError(f"clutter_level must lie in [0, 1], got {clutter_level}")
    img = np.full((image_size, image_size, 3), BACKGROUND)
    if clutter_level > 0:
        rng = np.random.default_rng(seed)
        covered = np.zeros((image_size, image_size), dtype=bool)
        budget = clutter_level * image_size * image_size
        max_side = max(2, image_size // 3)
        for _ in range(64):
            h, w = (int(v) for v in rng.integers(2, max_side + 1, size=2))
            r0 = int(rng.integers(0, image_size - h + 1))
            c0 = int(rng.integers(0, image_size - w + 1))
            tint = BACKGROUND + rng.uniform(-CLUTTER_CONTRAST, CLUTTER_CONTRAST, size=3)
            trial = covered.copy()
            trial[r0:r0 + h, c0:c0 + w] = True
            if trial.sum() > budget:
                continue
            covered = trial
            img[r0:r0 + h, c0:c0 + w] = tint
    img[foreground_mask(attrs, image_size)] = PALETTE[attrs.color_id]
    return img


def decode_image(image: np.ndarray, cards: Cardinalities = DEFAULT_CARDS) -> AttributeVector:
    """Rule-based attribute recovery from a clutter-free rendering."""
    size = image.shape[0]
    mask = np.any(np.abs(image - BACKGROUND) > 1e-9, axis=2)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("no foreground found")
    colour = image[rows, cols].mean(axis=0)
    color_id = int(np.argmin(np.linalg.norm(PALETTE - colour, axis=1)))
    cy = (rows.min() + rows.max()) // 2
    cx = (cols.min() + cols.max()) // 2
    position_id = 2 * int(cy >= size // 2) + int(cx >= size // 2)
    radius = (rows.max() - rows.min()) // 2
    size_id = None
    for s in range(cards.size):
        if shape_geometry(AttributeVector(0, 0, s, position_id), size)[2] == radius:
            size_id = s
    if size_id is None:
        raise ValueError(f"radius {radius} matches no size class")
    ref_cy, ref_cx, _ = shape_geometry(AttributeVector(0, 0, size_id, position_id), size)
    for shape_id in range(cards.shape):
        if np.array_equal(shape_mask(shape_id, radius, ref_cy, ref_cx, size), mask):
            return AttributeVector(shape_id, color_id, size_id, position_id)
    raise ValueError("foreground matches no shape template")


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    n_triplets: int = 500
    noise_ratio: float = 0.2
    clutter_level: float = 0.3
    image_size: int = 32
    seed: int = 0
    val_fraction: float = 0.2
    target_clutter: float = 0.0
    cards: Cardinalities = field(default_factory=Cardinalities)

    def __post_init__(self):
        if self.n_triplets < 1:
            raise ValueError("n_triplets must be positive")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ValueError(f"noise_ratio must lie in [0, 1], got {self.noise_ratio}")
        if self.n_triplets < 2 and self.noise_ratio > 0:
            raise ValueError("noise injection needs at least two triplets (no swap partner)")

    @property
    def n_noisy(self) -> int:
        return round_half_up(self.noise_ratio * self.n_triplets)

    @property
    def n_val(self) -> int:
        return round_half_up(self.val_fraction * self.n_triplets)


@dataclass
class Triplet:
    reference: np.ndarray
    tokens: tuple[int, ...]
    target: np.ndarray
    ref_attrs: AttributeVector
    target_attrs: AttributeVector
    is_noisy: bool
    true_target_attrs: AttributeVector
    target_index: int  # gallery index of the (possibly swapped) target
    true_target_index: int  # gallery index of the correct target


@dataclass
class TripletDataset:
    config: DatasetConfig
    triplets: list[Triplet]
    validation: list[Triplet]
    gallery: np.ndarray  # (G, H, W, C)
    gallery_attrs: list[AttributeVector]

    @property
    def noisy_count(self) -> int:
        return sum(t.is_noisy for t in self.triplets)


def _target_seed(dataset_seed: int, attrs: AttributeVector) -> int:
    return int(np.random.SeedSequence([dataset_seed, *attrs.as_tuple()]).generate_state(1)[0])


def generate_dataset(config: DatasetConfig) -> TripletDataset:
    cards = config.cards
    rng = np.random.default_rng(config.seed)
    n_total = config.n_triplets + config.n_val
    records = []
    for _ in range(n_total):
        ref = random_attrs(rng, cards)
        tokens = random_modification(ref, rng, cards)
        ref_seed = int(rng.integers(2**31))
        records.append((ref, tokens, apply_modification(ref, tokens, cards), ref_seed))

    # validation is split off before any corruption
    train_true = [r[2] for r in records[: config.n_triplets]]
    swapped = list(train_true)
    noisy = np.zeros(config.n_triplets, dtype=bool)
    if config.n_noisy:
        for i in sorted(int(k) for k in rng.choice(config.n_triplets, size=config.n_noisy, replace=False)):
            partners = [j for j in range(config.n_triplets) if j != i and train_true[j] != train_true[i]]
            if not partners:
                raise ValueError(f"triplet {i} has no swap partner with different attributes")
            swapped[i] = train_true[int(rng.choice(partners))]
            noisy[i] = True

    gallery_attrs = sorted(set(r[2] for r in records))
    index_of = {a: k for k, a in enumerate(gallery_attrs)}
    gallery = np.stack(
        [render_image(a, config.target_clutter, _target_seed(config.seed, a), config.image_size) for a in gallery_attrs]
    )

    def build(k: int, target_attrs: AttributeVector, is_noisy: bool) -> Triplet:
        ref, tokens, true_attrs, ref_seed = records[k]
        return Triplet(
            reference=render_image(ref, config.clutter_level, ref_seed, config.image_size),
            tokens=tokens,
            target=gallery[index_of[target_attrs]],
            ref_attrs=ref,
            target_attrs=target_attrs,
            is_noisy=is_noisy,
            true_target_attrs=true_attrs,
            target_index=index_of[target_attrs],
            true_target_index=index_of[true_attrs],
        )

    triplets = [build(k, swapped[k], bool(noisy[k])) for k in range(config.n_triplets)]
    validation = [build(k, records[k][2], False) for k in range(config.n_triplets, n_total)]
    return TripletDataset(config, triplets, validation, gallery, gallery_attrs)


def subset_candidates(dataset: TripletDataset, subset_size: int, seed: int = 0, queries: str = "validation") -> list[list[int]]:
    """Per-query candidate lists: the true target plus its Hamming-nearest gallery entries.

    Ties are broken by ascending gallery index, so ``seed`` does not change the
    result; it is accepted so callers can pass one uniformly.
    """
    items = dataset.validation if queries == "validation" else dataset.triplets
    return [hamming_subset(dataset.gallery_attrs, t.true_target_index, subset_size) for t in items]


def hamming_subset(gallery_attrs: list[AttributeVector], truth: int, subset_size: int) -> list[int]:
    if not 2 <= subset_size <= len(gallery_attrs):
        raise ValueError(f"subset_size must lie in [2, {len(gallery_attrs)}], got {subset_size}")
    anchor = gallery_attrs[truth]
    others = sorted((anchor.hamming(a), k) for k, a in enumerate(gallery_attrs) if k != truth)
    return [truth] + [k for _, k in others[: subset_size - 1]]


# ---------------------------------------------------------------------------
# Manifest export / import
# ---------------------------------------------------------------------------


def _record(t: Triplet, idx: int, split: str, ref_path: str, gallery_paths: list[str]) -> dict:
    return {
        "id": idx,
        "split": split,
        "tokens": list(t.tokens),
        "is_noisy": t.is_noisy,
        "ref_attrs": list(t.ref_attrs.as_tuple()),
        "target_attrs": list(t.target_attrs.as_tuple()),
        "true_target_attrs": list(t.true_target_attrs.as_tuple()),
        "target_index": t.target_index,
        "true_target_index": t.true_target_index,
        "ref_path": ref_path,
        "target_path": gallery_paths[t.target_index],
    }


def export_dataset(dataset: TripletDataset, out_dir: str | Path) -> Path:
    """Write ``triplets.jsonl``, ``gallery.jsonl``, ``dataset.json`` and PPM images."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gallery").mkdir(parents=True, exist_ok=True)
    gallery_paths = []
    with open(out / "gallery.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for k, (img, attrs) in enumerate(zip(dataset.gallery, dataset.gallery_attrs)):
            rel = f"gallery/g{k:05d}.ppm"
            write_pnm(out / rel, img)
            gallery_paths.append(rel)
            fh.write(json.dumps({"index": k, "attrs": list(attrs.as_tuple()), "path": rel}, sort_keys=True) + "\n")
    with open(out / "triplets.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        idx = 0
        for split, items in (("train", dataset.triplets), ("val", dataset.validation)):
            for t in items:
                rel = f"images/r{idx:05d}.ppm"
                write_pnm(out / rel, t.reference)
                fh.write(json.dumps(_record(t, idx, split, rel, gallery_paths), sort_keys=True) + "\n")
                idx += 1
    cfg = asdict(dataset.config)
    (out / "dataset.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out


def load_dataset(in_dir: str | Path) -> TripletDataset:
    src = Path(in_dir)
    if not (src / "triplets.jsonl").exists():
        raise FileNotFoundError(f"no dataset manifest at {src / 'triplets.jsonl'}")
    cfg = json.loads((src / "dataset.json").read_text(encoding="utf-8"))
    cfg["cards"] = Cardinalities(**cfg["cards"])
    config = DatasetConfig(**cfg)
    gallery_rows = [json.loads(line) for line in (src / "gallery.jsonl").read_text(encoding="utf-8").splitlines()]
    gallery = np.stack([read_pnm(src / r["path"]) for r in gallery_rows])
    gallery_attrs = [AttributeVector(*r["attrs"]) for r in gallery_rows]
    train, val = [], []
    for line in (src / "triplets.jsonl").read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        t = Triplet(
            reference=read_pnm(src / r["ref_path"]),
            tokens=tuple(r["tokens"]),
            target=gallery[r["target_index"]],
            ref_attrs=AttributeVector(*r["ref_attrs"]),
            target_attrs=AttributeVector(*r["target_attrs"]),
            is_noisy=r["is_noisy"],
            true_target_attrs=AttributeVector(*r["true_target_attrs"]),
            target_index=r["target_index"],
            true_target_index=r["true_target_index"],
        )
        (train if r["split"] == "train" else val).append(t)
    return TripletDataset(config, train, val, gallery, gallery_attrs)


def quantize(dataset: TripletDataset) -> TripletDataset:
    """8-bit round trip of every image, matching what ``load_dataset`` sees."""
    q = lambda im: np.floor(np.clip(im, 0, 1) * 255.0 + 0.5) / 255.0  # noqa: E731
    gallery = q(dataset.gallery)
    fix = lambda t: replace(t, reference=q(t.reference), target=gallery[t.target_index])  # noqa: E731
    return TripletDataset(
        dataset.config, [fix(t) for t in dataset.triplets], [fix(t) for t in dataset.validation], gallery, dataset.gallery_attrs
    )
