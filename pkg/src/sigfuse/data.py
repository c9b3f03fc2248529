"""Dataset ingestion and feature extraction.

Covers the CelebA-style attribute list format, the FBNK binary feature
bank container, a uniform-LBP extractor, a P5 PGM reader for fixtures,
and the seeded synthetic multi-view generator used for desk-scale
experiments.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import make_rng

BANK_MAGIC = b"FBNK"
BANK_VERSION = 1

# rng stream tags for synthetic generation
_TAG_LATENT = 10
_TAG_ATTR_PROJ = 11
_TAG_MIXING = 12
_TAG_NOISE = 13
_TAG_SPLIT = 14

SPLIT_NAMES = ("train", "val", "test")


class DataFormatError(ValueError):
    """Raised on malformed attribute, bank or image files."""


# ---------------------------------------------------------------------------
# attribute tables
# ---------------------------------------------------------------------------

@dataclass
class AttributeTable:
    names: list[str]
    rows: dict[str, np.ndarray]               # image id -> uint8 labels, length L
    splits: dict[str, str] = field(default_factory=dict)  # image id -> split name

    @property
    def n_attributes(self) -> int:
        return len(self.names)

    def ids_for(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return [i for i in self.rows if self.splits.get(i) == split]


def parse_attr_file(text: str) -> AttributeTable:
    """Parse the CelebA attribute list convention.

    Line 1: image count; line 2: the L attribute names; then one row per
    image: id followed by L values in {-1, 1}, mapped to {0, 1}.
    """
    lines = [l for l in text.splitlines() if l.strip()]
    if len(lines) < 2:
        raise DataFormatError("attribute file needs a count line and a name line")
    try:
        count = int(lines[0].split()[0])
    except ValueError:
        raise DataFormatError(f"line 1: expected an image count, got {lines[0]!r}")
    names = lines[1].split()
    if not names:
        raise DataFormatError("line 2: no attribute names")
    rows = {}
    for lineno, line in enumerate(lines[2:], start=3):
        tokens = line.split()
        if len(tokens) != len(names) + 1:
            raise DataFormatError(f"line {lineno}: expected id plus {len(names)} values, "
                                  f"got {len(tokens)} tokens")
        img_id = tokens[0]
        vals = np.empty(len(names), dtype=np.uint8)
        for j, tok in enumerate(tokens[1:]):
            if tok == "1":
                vals[j] = 1
            elif tok == "-1":
                vals[j] = 0
            else:
                raise DataFormatError(f"line {lineno}: label must be -1 or 1, got {tok!r}")
        rows[img_id] = vals
    if len(rows) != count:
        raise DataFormatError(f"header declares {count} images but file has {len(rows)} rows")
    return AttributeTable(names, rows)


def format_attr_file(table: AttributeTable) -> str:
    lines = [str(len(table.rows)), " ".join(table.names)]
    for img_id, vals in table.rows.items():
        lines.append(img_id + " " + " ".join("1" if v else "-1" for v in vals))
    return "\n".join(lines) + "\n"


def parse_split_file(text: str) -> dict[str, str]:
    """CelebA partition convention: one `id 0|1|2` pair per line."""
    splits = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 2 or tokens[1] not in ("0", "1", "2"):
            raise DataFormatError(f"line {lineno}: expected 'id 0|1|2', got {line!r}")
        splits[tokens[0]] = SPLIT_NAMES[int(tokens[1])]
    return splits


def format_split_file(splits: dict[str, str]) -> str:
    idx = {name: i for i, name in enumerate(SPLIT_NAMES)}
    return "\n".join(f"{img_id} {idx[s]}" for img_id, s in splits.items()) + "\n"


def split_dataset(table: AttributeTable, ratios: tuple[float, float, float],
                  seed: int) -> AttributeTable:
    """Assign a seed-deterministic disjoint train/val/test partition."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    ids = sorted(table.rows)
    perm = make_rng(seed, _TAG_SPLIT).permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    for pos, idx in enumerate(perm):
        if pos < n_train:
            table.splits[ids[idx]] = "train"
        elif pos < n_train + n_val:
            table.splits[ids[idx]] = "val"
        else:
            table.splits[ids[idx]] = "test"
    for split in SPLIT_NAMES:
        if ratios[SPLIT_NAMES.index(split)] > 0 and not table.ids_for(split):
            raise ValueError(f"split {split!r} came out empty")
    return table


# ---------------------------------------------------------------------------
# feature banks (FBNK binary container)
# ---------------------------------------------------------------------------

@dataclass
class FeatureBank:
    kind_name: str
    dim: int
    entries: dict[str, np.ndarray]  # image id -> float32 vector of length dim

    def add(self, img_id: str, values: np.ndarray):
        values = np.asarray(values, dtype=np.float32)
        if values.shape != (self.dim,):
            raise ValueError(f"entry {img_id!r} has shape {values.shape}, "
                             f"bank dim is {self.dim}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"entry {img_id!r} contains non-finite values")
        self.entries[img_id] = values


def _write_str32(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise DataFormatError("truncated bank file")
    return data


def _read_str32(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def bank_to_bytes(bank: FeatureBank) -> bytes:
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    buf.write(struct.pack("<H", BANK_VERSION))
    _write_str32(buf, bank.kind_name)
    buf.write(struct.pack("<IQ", bank.dim, len(bank.entries)))
    for img_id, values in bank.entries.items():
        _write_str32(buf, img_id)
        buf.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return buf.getvalue()


def bank_from_bytes(data: bytes) -> FeatureBank:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != BANK_MAGIC:
        raise DataFormatError("bad bank magic")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != BANK_VERSION:
        raise DataFormatError(f"unsupported bank version {version}")
    kind_name = _read_str32(buf)
    dim, count = struct.unpack("<IQ", _read_exact(buf, 12))
    if dim > 1 << 24:
        raise DataFormatError(f"bank dim {dim} exceeds size limit")
    entries = {}
    for _ in range(count):
        img_id = _read_str32(buf)
        vals = np.frombuffer(_read_exact(buf, 4 * dim), dtype="<f4")
        entries[img_id] = vals.copy()
    if buf.read(1):
        raise DataFormatError("trailing bytes after bank data")
    return FeatureBank(kind_name, dim, entries)


def save_bank(bank: FeatureBank, path):
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def load_bank(path) -> FeatureBank:
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# uniform LBP extraction
# ---------------------------------------------------------------------------

def _uniform_lbp_table() -> np.ndarray:
    """Map each 8-bit code to one of 58 bins.

    Bins 0..55: the 56 uniform non-constant patterns; bin 56: the two
    constant patterns; bin 57: everything non-uniform.
    """
    table = np.full(256, 57, dtype=np.int32)
    nxt = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions == 0:
            table[code] = 56
        elif transitions == 2:
            table[code] = nxt
            nxt += 1
    assert nxt == 56
    return table


_LBP_TABLE = _uniform_lbp_table()
LBP_BINS = 58

# 8 neighbors at radius 1, clockwise from the east pixel: (dy, dx)
_NEIGHBORS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


def lbp_dim(height: int, width: int, cell_size: int) -> int:
    return (height // cell_size) * (width // cell_size) * LBP_BINS


def lbp_extract(img: np.ndarray, cell_size: int) -> np.ndarray:
    """Uniform LBP descriptor over non-overlapping cells.

    Codes use the pixel-aligned 3x3 neighborhood (neighbor >= center, no
    interpolation); border pixels without a full neighborhood are skipped.
    Cells tile from the top-left, trailing partial cells are dropped, and
    each cell's 58-bin histogram is L1-normalized before concatenation
    (row-major over cells).
    """
    img = np.asarray(img)
    if img.ndim == 3:
        img = rgb_to_gray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if cell_size < 1:
        raise ValueError(f"cell size must be positive, got {cell_size}")
    if h < cell_size or w < cell_size:
        raise ValueError(f"image {h}x{w} smaller than one {cell_size}-pixel cell")

    # additive shifts that avoid clipping cannot change these comparisons
    px = img.astype(np.int32)
    center = px[1:-1, 1:-1]
    codes = np.zeros_like(center)
    for bit, (dy, dx) in enumerate(_NEIGHBORS):
        neigh = px[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (neigh >= center).astype(np.int32) << bit
    bins = _LBP_TABLE[codes]

    rows, cols = h // cell_size, w // cell_size
    desc = np.zeros((rows, cols, LBP_BINS), dtype=np.float64)
    # bins[i, j] describes original pixel (i + 1, j + 1)
    yy, xx = np.indices(bins.shape)
    cy, cx = (yy + 1) // cell_size, (xx + 1) // cell_size
    valid = (cy < rows) & (cx < cols)
    flat_idx = (cy[valid] * cols + cx[valid]) * LBP_BINS + bins[valid]
    np.add.at(desc.reshape(-1), flat_idx, 1.0)
    sums = desc.sum(axis=2, keepdims=True)
    np.divide(desc, sums, out=desc, where=sums > 0)
    return desc.reshape(-1)


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Integer luma: round(0.299 R + 0.587 G + 0.114 B)."""
    img = np.asarray(img, dtype=np.float64)
    gray = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.rint(gray).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM (P5) fixtures
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Minimal binary PGM reader: P5, maxval <= 255, '#' comments allowed."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DataFormatError(f"not a binary PGM file (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval <= 255:
        raise DataFormatError(f"unsupported PGM maxval {maxval}")
    pos += 1  # the single whitespace byte after maxval
    pixels = data[pos:pos + width * height]
    if len(pixels) != width * height:
        raise DataFormatError("PGM pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# synthetic multi-view generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewSpec:
    name: str
    dim: int
    noise: float


@dataclass(frozen=True)
class SyntheticSpec:
    latent_dim: int
    views: tuple[ViewSpec, ...]
    n_attributes: int
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim <= 0 or self.n_attributes <= 0:
            raise ValueError("latent dim and attribute count must be positive")
        for v in self.views:
            if v.dim <= 0:
                raise ValueError(f"view {v.name!r} dim must be positive")
            if v.noise < 0:
                raise ValueError(f"view {v.name!r} noise must be >= 0")


def synth_generate(spec: SyntheticSpec) -> tuple[AttributeTable, dict[str, FeatureBank]]:
    """Latent z ~ N(0, I); labels = 1[z . p_a > 0]; view_k = z M_k + sigma_k eps.

    A pure function of the spec: identical specs yield identical tables
    and banks.
    """
    n = spec.n_train + spec.n_val + spec.n_test
    z = make_rng(spec.seed, _TAG_LATENT).standard_normal((n, spec.latent_dim))
    proj = make_rng(spec.seed, _TAG_ATTR_PROJ).standard_normal(
        (spec.latent_dim, spec.n_attributes))
    labels = (z @ proj > 0).astype(np.uint8)

    ids = [f"synth_{i:06d}" for i in range(n)]
    names = [f"attr_{j:02d}" for j in range(spec.n_attributes)]
    table = AttributeTable(names, {i: labels[k] for k, i in enumerate(ids)})
    for k, img_id in enumerate(ids):
        if k < spec.n_train:
            table.splits[img_id] = "train"
        elif k < spec.n_train + spec.n_val:
            table.splits[img_id] = "val"
        else:
            table.splits[img_id] = "test"

    banks = {}
    for vi, view in enumerate(spec.views):
        mixing = make_rng(spec.seed, _TAG_MIXING, vi).standard_normal(
            (spec.latent_dim, view.dim)) / np.sqrt(spec.latent_dim)
        obs = z @ mixing
        if view.noise > 0:
            obs = obs + view.noise * make_rng(spec.seed, _TAG_NOISE, vi).standard_normal(obs.shape)
        bank = FeatureBank(view.name, view.dim, {})
        for k, img_id in enumerate(ids):
            bank.add(img_id, obs[k])
        banks[view.name] = bank
    return table, banks


# ---------------------------------------------------------------------------
# assembled dataset views for training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    table: AttributeTable
    banks: dict[str, FeatureBank]

    def kind_dims(self) -> list[tuple[str, int]]:
        return [(name, bank.dim) for name, bank in self.banks.items()]

    def arrays(self, split: str, kinds=None) -> tuple[list[str], dict[str, np.ndarray], np.ndarray]:
        """Dense (ids, {kind: X}, Y) matrices for one split, in sorted id order."""
        kinds = list(kinds) if kinds is not None else list(self.banks)
        ids = sorted(self.table.ids_for(split))
        if not ids:
            raise ValueError(f"split {split!r} has no examples")
        for kind in kinds:
            if kind not in self.banks:
                raise ValueError(f"no feature bank for kind {kind!r}")
            missing = [i for i in ids if i not in self.banks[kind].entries]
            if missing:
                raise ValueError(f"bank {kind!r} missing features for {len(missing)} "
                                 f"images (first: {missing[0]!r})")
        xs = {k: np.stack([self.banks[k].entries[i] for i in ids]).astype(np.float64)
              for k in kinds}
        y = np.stack([self.table.rows[i] for i in ids]).astype(np.float64)
        return ids, xs, y
