"""Triplet datasets on disk, batching, and a synthetic referring-shapes generator."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (ConfigError, ImageFormatError, ManifestError, MissingFileError,
                     SpecError)

IMAGE_EXTS = (".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass
class SampleTriplet:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    text: str
    mask: np.ndarray  # H x W uint8 in {0, 1}
    id: str
    category: str | None = None
    objects: list["SynthObject"] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"{self.id}: mask {self.mask.shape} does not match image "
                             f"{self.image.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask values must be 0 or 1")


# ---------------------------------------------------------------- image IO

def read_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """RGB float32 in [0, 1]; ``size`` is ``(H, W)`` for bilinear resizing."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise MissingFileError(str(path)) from None
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from None
    return arr


def read_mask(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Single-channel mask; any nonzero value is foreground.  Nearest resizing."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.NEAREST)
            arr = np.asarray(im)
    except FileNotFoundError:
        raise MissingFileError(str(path)) from None
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from None
    return (arr > 0).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask as 1-bit PNG, or 8-bit 0/255 PGM when the suffix is ``.pgm``."""
    m = np.asarray(mask).astype(bool)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, m.astype(np.uint8) * 255)
    else:
        Image.fromarray(m).convert("1").save(path)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def heatmap_to_gray(values: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    v = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def _find_file(folder: Path, sample_id: str) -> Path | None:
    for ext in IMAGE_EXTS:
        p = folder / f"{sample_id}{ext}"
        if p.exists():
            return p
    return None


# ---------------------------------------------------------------- datasets

@dataclass
class IndexEntry:
    id: str
    image_path: Path
    mask_path: Path
    text: str
    category: str | None = None


class TripletDataset(Sequence[SampleTriplet]):
    """Lazy view of ``root/{images,masks}/<id>.<ext>`` listed by ``root/<split>.tsv``."""

    def __init__(self, root: str | Path, split: str, index: list[IndexEntry],
                 size: tuple[int, int] | None = None):
        self.root = Path(root)
        self.split = split
        self.index = index
        self.size = size
        self._cache: dict[int, SampleTriplet] = {}

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if i not in self._cache:
            e = self.index[i]
            self._cache[i] = SampleTriplet(read_image(e.image_path, self.size), e.text,
                                           read_mask(e.mask_path, self.size), e.id, e.category)
        return self._cache[i]

    @property
    def categories(self) -> dict[str, str]:
        return {e.id: e.category for e in self.index if e.category}


def parse_manifest(path: Path) -> list[tuple[str, str, str | None]]:
    rows = []
    seen = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.rstrip("\r\n").split("\t")
        if len(parts) < 2 or not parts[0].strip():
            raise ManifestError(path, lineno, "expected id<TAB>text[<TAB>category]")
        if len(parts) > 3:
            raise ManifestError(path, lineno, f"too many fields ({len(parts)})")
        sid, text = parts[0].strip(), parts[1].strip()
        if not text:
            raise ManifestError(path, lineno, "empty referring text")
        if sid in seen:
            raise ManifestError(path, lineno, f"duplicate id {sid!r}")
        seen.add(sid)
        cat = parts[2].strip() or None if len(parts) == 3 else None
        rows.append((sid, text, cat))
    return rows


def load_dataset(root: str | Path, split: str,
                 size: tuple[int, int] | None = None) -> TripletDataset:
    root = Path(root)
    manifest = root / f"{split}.tsv"
    if not manifest.exists():
        raise MissingFileError(str(manifest))
    index = []
    for sid, text, cat in parse_manifest(manifest):
        img = _find_file(root / "images", sid)
        msk = _find_file(root / "masks", sid)
        if img is None:
            raise MissingFileError(f"no image for {sid!r} under {root / 'images'}")
        if msk is None:
            raise MissingFileError(f"no mask for {sid!r} under {root / 'masks'}")
        index.append(IndexEntry(sid, img, msk, text, cat))
    return TripletDataset(root, split, index, size)


def save_dataset(samples: Sequence[SampleTriplet], root: str | Path, split: str) -> Path:
    """Write samples in the loader's layout; the split manifest is overwritten."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)
        lines.append("\t".join([s.id, s.text] + ([s.category] if s.category else [])))
    manifest = root / f"{split}.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------- batching

def make_batches(ds: Sequence[SampleTriplet], batch_size: int, shuffle_seed: int | None,
                 epoch: int = 0) -> Iterator[list[SampleTriplet]]:
    """Shuffled (per ``(seed, epoch)``) batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        yield [ds[int(i)] for i in order[start:start + batch_size]]


def collate(batch: Sequence[SampleTriplet]) -> tuple[torch.Tensor, list[str], torch.Tensor]:
    """``(images B x 3 x H x W, texts, masks B x H x W)``."""
    images = torch.from_numpy(np.stack([s.image for s in batch])).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.stack([s.mask for s in batch]).astype(np.float32))
    return images.contiguous().float(), [s.text for s in batch], masks


# ---------------------------------------------------------------- synthetic data

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "gray": (0.55, 0.55, 0.55),
}
SHAPES = ("circle", "square", "triangle")
POSITIONS = ("top-left", "top", "top-right", "left", "center", "right",
             "bottom-left", "bottom", "bottom-right")
RELATIONS = ("left of", "right of", "above", "below")


@dataclass(frozen=True)
class SynthObject:
    shape: str
    color: str
    cell: int  # index into POSITIONS (row-major 3 x 3 grid)
    cx: float
    cy: float
    size: float

    @property
    def row(self) -> int:
        return self.cell // 3

    @property
    def col(self) -> int:
        return self.cell % 3

    @property
    def position(self) -> str:
        return POSITIONS[self.cell]


@dataclass(frozen=True)
class SynthSpec:
    height: int = 128
    width: int = 128
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    positions: tuple[str, ...] = POSITIONS
    min_objects: int = 2
    max_objects: int = 5
    relation_frac: float = 0.3
    noise: float = 0.02
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if not self.shapes or not self.colors or not self.positions:
            raise SpecError("shape, color and position inventories must be nonempty")
        bad = [s for s in self.shapes if s not in SHAPES] + \
              [c for c in self.colors if c not in COLORS] + \
              [p for p in self.positions if p not in POSITIONS]
        if bad:
            raise SpecError(f"unknown inventory items: {bad}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise SpecError("need 1 <= min_objects <= max_objects")
        if self.max_objects > len(self.positions):
            raise SpecError(f"{self.max_objects} objects cannot take distinct positions "
                            f"from {len(self.positions)}; referents would not be unique")
        if self.height < 24 or self.width < 24:
            raise SpecError("canvas too small")
        if not 0.0 <= self.relation_frac <= 1.0:
            raise SpecError("relation_frac must lie in [0, 1]")
        return self


def parse_synth_spec(text: str) -> SynthSpec:
    """``key=value`` lines; list values are comma separated."""
    known = {f.name: f for f in fields(SynthSpec)}
    vals = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(SynthSpec, key)
        try:
            if isinstance(default, tuple):
                vals[key] = tuple(x.strip() for x in raw.split(",") if x.strip())
            else:
                vals[key] = type(default)(raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse {key}={raw!r}") from None
    return SynthSpec(**vals).validate()


def render_object(obj: SynthObject, height: int, width: int) -> np.ndarray:
    """Binary mask of one object, sampled at pixel centres."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx, dy = xs - obj.cx, ys - obj.cy
    r = obj.size
    if obj.shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif obj.shape == "square":
        s = 0.85 * r
        inside = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif obj.shape == "triangle":
        # apex up, base at +0.8r; inside when under both slanted edges
        top, base = -r, 0.8 * r
        t = (dy - top) / (base - top)
        inside = (dy >= top) & (dy <= base) & (np.abs(dx) <= t * r)
    else:
        raise SpecError(f"unknown shape {obj.shape!r}")
    return inside.astype(np.uint8)


def _satisfies(a: SynthObject, rel: str, b: SynthObject) -> bool:
    if rel == "left of":
        return a.row == b.row and a.col < b.col
    if rel == "right of":
        return a.row == b.row and a.col > b.col
    if rel == "above":
        return a.col == b.col and a.row < b.row
    if rel == "below":
        return a.col == b.col and a.row > b.row
    raise ValueError(rel)


def _relational_matches(objects, color, shape, rel, color2, shape2):
    return [o for o in objects if o.color == color and o.shape == shape
            and any(a is not o and a.color == color2 and a.shape == shape2
                    and _satisfies(o, rel, a) for a in objects)]


def _place_objects(spec: SynthSpec, rng: np.random.Generator) -> list[SynthObject]:
    H, W = spec.height, spec.width
    unit = min(H, W) / 128.0
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cells = [POSITIONS.index(p) for p in spec.positions]
    chosen = rng.choice(len(cells), size=n, replace=False)
    objects = []
    for k in chosen:
        cell = cells[int(k)]
        r = float(rng.uniform(10.0, 15.0)) * unit
        cx = (cell % 3 + 0.5) * W / 3 + float(rng.uniform(-4, 4)) * unit
        cy = (cell // 3 + 0.5) * H / 3 + float(rng.uniform(-4, 4)) * unit
        objects.append(SynthObject(str(rng.choice(spec.shapes)), str(rng.choice(spec.colors)),
                                   cell, cx, cy, r))
    return objects


def _relational_texts(objects: list[SynthObject]) -> list[tuple[int, str]]:
    """Every (target, text) pair whose relation singles out exactly one object."""
    out = []
    for ti, t in enumerate(objects):
        for a in objects:
            if a is t:
                continue
            for rel in RELATIONS:
                if not _satisfies(t, rel, a):
                    continue
                hits = _relational_matches(objects, t.color, t.shape, rel, a.color, a.shape)
                if len(hits) == 1 and hits[0] is t:
                    out.append((ti, f"the {t.color} {t.shape} {rel} the {a.color} {a.shape}"))
    return out


def _plain_text(obj: SynthObject) -> str:
    return f"the {obj.color} {obj.shape} at the {obj.position}"


def _compose(spec: SynthSpec, rng: np.random.Generator) -> tuple[list[SynthObject], int, str]:
    """Objects, target index and text; a relational sample redraws the scene
    until some object can be singled out by a relation."""
    if rng.random() < spec.relation_frac:
        for _ in range(200):
            objects = _place_objects(spec, rng)
            options = _relational_texts(objects)
            if options:
                target, text = options[int(rng.integers(len(options)))]
                return objects, target, text
    objects = _place_objects(spec, rng)
    target = int(rng.integers(len(objects)))
    return objects, target, _plain_text(objects[target])


def render_scene(objects: list[SynthObject], spec: SynthSpec,
                 rng: np.random.Generator) -> np.ndarray:
    H, W = spec.height, spec.width
    image = np.empty((H, W, 3), dtype=np.float64)
    image[:] = (0.08, 0.08, 0.10)
    if spec.noise:
        image += rng.normal(0.0, spec.noise, size=(H, W, 3))
    for o in objects:
        m = render_object(o, H, W).astype(bool)
        image[m] = COLORS[o.color]
    # quantise so PNG round trips are exact
    return (np.clip(np.rint(image * 255.0), 0, 255) / 255.0).astype(np.float32)


def synthesize(spec: SynthSpec, n: int) -> list[SampleTriplet]:
    """``n`` deterministic triplets; each text designates exactly one object."""
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(n):
        objects, target, text = _compose(spec, rng)
        image = render_scene(objects, spec, rng)
        mask = render_object(objects[target], spec.height, spec.width)
        if not mask.any():
            raise SpecError("rendered referent is empty")
        out.append(SampleTriplet(image, text, mask, f"synth{spec.seed}_{i:05d}",
                                 objects[target].shape, objects))
    return out


def synthetic_splits(n_train: int, n_val: int, seed: int = 0, **spec_kw):
    """Disjoint train/validation sets drawn from different generator seeds."""
    spec = SynthSpec(seed=seed, **spec_kw)
    train = synthesize(spec, n_train)
    val = synthesize(replace(spec, seed=seed + 10_000), n_val)
    return train, val


def iter_chunks(seq: Sequence, size: int):
    it = iter(seq)
    while chunk := list(itertools.islice(it, size)):
        yield chunk
