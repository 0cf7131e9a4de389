"""ChestX-ray14-style ingestion, patient-wise splitting, batching and a synthetic stand-in.

Class order is alphabetical (see ``CLASS_NAMES``); every label vector and
every per-class output column uses it.

Shuffling (splits and batch order) uses SplitMix64 seeded with the user seed
and Fisher-Yates with rejection-sampled bounded draws, so manifests depend
only on ``(records, seed, train_frac)`` and not on numpy's generator versions.
"""
from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

CLASS_NAMES = (
    "Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Effusion", "Emphysema",
    "Fibrosis", "Hernia", "Infiltration", "Mass", "Nodule", "Pleural_Thickening",
    "Pneumonia", "Pneumothorax",
)
NUM_CLASSES = len(CLASS_NAMES)
NO_FINDING = "No Finding"

IMAGE_COL, LABEL_COL, PATIENT_COL = "Image Index", "Finding Labels", "Patient ID"


class DataError(Exception):
    """Malformed or inconsistent dataset input."""


def class_index(name: str) -> int:
    key = name.strip().replace(" ", "_").lower()
    for i, c in enumerate(CLASS_NAMES):
        if c.lower() == key:
            return i
    raise DataError(f"unknown label {name.strip()!r}")


# ---------------------------------------------------------------------------
# PRNG


_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        limit = (1 << 64) - (1 << 64) % n
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


# ---------------------------------------------------------------------------
# records and splits


@dataclass(frozen=True)
class PatientRecord:
    image_id: str
    patient_id: str
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.labels) != NUM_CLASSES or any(v not in (0, 1) for v in self.labels):
            raise DataError(f"{self.image_id}: labels must be {NUM_CLASSES} binary values")


def encode_labels(text: str) -> tuple[int, ...]:
    """Pipe-separated finding names -> multi-hot tuple in canonical order."""
    vec = [0] * NUM_CLASSES
    if text.strip() == NO_FINDING:
        return tuple(vec)
    for token in text.split("|"):
        if not token.strip():
            raise DataError(f"empty label in {text!r}")
        vec[class_index(token)] = 1
    return tuple(vec)


def decode_labels(labels: Sequence[int]) -> str:
    names = [c for c, v in zip(CLASS_NAMES, labels) if v]
    return "|".join(names) if names else NO_FINDING


def _norm_col(name: str) -> str:
    return name.strip().lower().replace("_", " ").replace("-", " ")


def parse_label_csv(path) -> list[PatientRecord]:
    """Read a ``Data_Entry_2017.csv``-format metadata table."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        cols = {_norm_col(h): i for i, h in enumerate(header)}
        idx = {}
        for want in (IMAGE_COL, LABEL_COL, PATIENT_COL):
            if _norm_col(want) not in cols:
                raise DataError(f"{path}: missing column {want!r}")
            idx[want] = cols[_norm_col(want)]
        records, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            try:
                image_id = row[idx[IMAGE_COL]].strip()
                patient = row[idx[PATIENT_COL]].strip()
                text = row[idx[LABEL_COL]]
            except IndexError:
                raise DataError(f"{path}:{lineno}: short row") from None
            if image_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            seen.add(image_id)
            try:
                labels = encode_labels(text)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            records.append(PatientRecord(image_id, patient, labels))
    return records


def write_label_csv(records: Sequence[PatientRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([IMAGE_COL, LABEL_COL, PATIENT_COL])
        for r in records:
            writer.writerow([r.image_id, decode_labels(r.labels), r.patient_id])


def read_image_list(path) -> list[str]:
    """One filename per line, as in ``train_val_list.txt`` / ``test_list.txt``."""
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def filter_records(records: Sequence[PatientRecord], image_ids) -> list[PatientRecord]:
    keep = set(image_ids)
    return [r for r in records if r.image_id in keep]


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    seed: int
    train_frac: float

    def to_text(self) -> str:
        lines = [f"seed={self.seed}", f"train_frac={self.train_frac!r}"]
        lines += [f"train {i}" for i in self.train]
        lines += [f"val {i}" for i in self.val]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> SplitManifest:
        meta, train, val = {}, [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if "=" in line and not line.startswith(("train ", "val ")):
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
                continue
            side, _, image_id = line.partition(" ")
            if side == "train":
                train.append(image_id)
            elif side == "val":
                val.append(image_id)
            else:
                raise DataError(f"manifest line {lineno}: unrecognised entry {line!r}")
        try:
            return cls(train, val, int(meta["seed"]), float(meta["train_frac"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"manifest header incomplete or invalid: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> SplitManifest:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def patient_split(records: Sequence[PatientRecord], train_frac: float = 0.8, seed: int = 0) -> SplitManifest:
    """Shuffle unique patients, send the first ``floor(train_frac * n)`` to train.

    Images follow their patient and keep input order within each side.
    """
    if not records:
        raise DataError("cannot split an empty record list")
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    patients = SplitMix64(seed).shuffle(sorted({r.patient_id for r in records}))
    n_train = int(np.floor(train_frac * len(patients)))
    train_patients = set(patients[:n_train])
    train = [r.image_id for r in records if r.patient_id in train_patients]
    val = [r.image_id for r in records if r.patient_id not in train_patients]
    return SplitManifest(train, val, seed, train_frac)


# ---------------------------------------------------------------------------
# images


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic bilinear weights with half-pixel centres and edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    mat[rows, lo] += 1.0 - frac
    mat[rows, hi] += frac
    return mat


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``(H, W)`` or ``(H, W, C)`` arrays."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(arr, dtype=np.float64)
    rh, rw = _interp_matrix(out_h, h), _interp_matrix(out_w, w)
    out = np.tensordot(rh, arr, axes=(1, 0))
    out = np.tensordot(rw, out, axes=(1, 1)).swapaxes(0, 1)
    return out


def load_image(path, target_size: int = 224) -> np.ndarray:
    """8-bit grayscale/RGB image -> ``(target, target, 3)`` float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if mode == "L":
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif mode != "RGB":
        raise DataError(f"{path}: unsupported image mode {mode!r} (need 8-bit L or RGB)")
    arr = arr.astype(np.float64) / 255.0
    return np.clip(bilinear_resize(arr, target_size, target_size), 0.0, 1.0)


class ImageFolder(Mapping):
    """Lazily loaded, cached images keyed by image id."""

    def __init__(self, root, target_size: int = 224, ids: Sequence[str] | None = None):
        self.root = Path(root)
        self.target_size = target_size
        self._ids = list(ids) if ids is not None else None
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, image_id: str) -> np.ndarray:
        if image_id not in self._cache:
            path = self.root / image_id
            if not path.exists():
                raise DataError(f"image not found: {path}")
            self._cache[image_id] = load_image(path, self.target_size)
        return self._cache[image_id]

    def __iter__(self):
        if self._ids is None:
            return iter(sorted(p.name for p in self.root.iterdir() if p.is_file()))
        return iter(self._ids)

    def __len__(self) -> int:
        return len(list(iter(self)))


def make_batches(
    records: Sequence[PatientRecord],
    images: Mapping[str, np.ndarray],
    batch_size: int = 32,
    seed: int = 0,
    shuffle: bool = True,
) -> list[tuple[Tensor, Tensor]]:
    """Group records into ``(images (B,H,W,3), labels (B,14))`` pairs; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = list(range(len(records)))
    if shuffle:
        SplitMix64(seed).shuffle(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        x = np.stack([images[r.image_id] for r in chunk])
        y = np.array([r.labels for r in chunk], dtype=np.float64)
        batches.append((Tensor(x), Tensor(y)))
    return batches


def records_for(records: Sequence[PatientRecord], image_ids: Sequence[str]) -> list[PatientRecord]:
    """Records for ``image_ids`` in that order."""
    by_id = {r.image_id: r for r in records}
    missing = [i for i in image_ids if i not in by_id]
    if missing:
        raise DataError(f"{len(missing)} manifest ids have no record, e.g. {missing[0]!r}")
    return [by_id[i] for i in image_ids]


# ---------------------------------------------------------------------------
# synthetic stand-in


def _templates() -> np.ndarray:
    t = np.zeros((NUM_CLASSES, 8, 8))
    ii, jj = np.indices((8, 8))
    t[0, 1:7, 1:7] = 1                                           # solid block
    t[1, 1:7, 1:7] = 1
    t[1, 2:6, 2:6] = 0                                           # ring
    t[2, ::2, :] = 1                                             # horizontal stripes
    t[3, :, ::2] = 1                                             # vertical stripes
    t[4] = (ii + jj) % 2 == 0                                    # fine checkerboard
    t[5] = (ii // 2 + jj // 2) % 2 == 0                          # coarse checkerboard
    t[6] = ii == jj                                             # diagonal
    t[7] = ii + jj == 7                                          # anti-diagonal
    t[8, 3:5, :] = 1
    t[8, :, 3:5] = 1                                             # plus
    t[9] = (ii == jj) | (ii + jj == 7)                           # cross
    t[10, 3:5, 3:5] = 1                                          # dot
    t[11, :4, :] = 1                                             # top half
    t[12, :, :4] = 1                                             # left half
    for r in (0, 6):
        for c in (0, 6):
            t[13, r:r + 2, c:c + 2] = 1                          # corner dots
    return t


PATTERN_TEMPLATES = _templates()


def class_cell(k: int) -> tuple[int, int]:
    """Fixed-layout grid cell (row, col) of class ``k`` on the 4x4 layout."""
    return divmod(k, 4)


def cell_quadrant(cell: tuple[int, int]) -> int:
    """Quadrant index (0 TL, 1 TR, 2 BL, 3 BR) of a 4x4-layout cell."""
    r, c = cell
    return (r // 2) * 2 + c // 2


def synthetic_image(labels: Sequence[int], size: int, rng: np.random.Generator,
                    cells: dict[int, tuple[int, int]] | None = None,
                    noise: float = 0.05, intensity: float = 0.75) -> np.ndarray:
    """Noise background with one texture per present class, each in its own cell.

    ``cells`` maps class index to (row, col) on the 4x4 layout; by default each
    class uses its fixed cell from :func:`class_cell`.
    """
    if size % 32:
        raise ValueError(f"synthetic image size must be a multiple of 32, got {size}")
    cell = size // 4
    img = rng.uniform(0.0, noise, size=(size, size))
    for k, present in enumerate(labels):
        if not present:
            continue
        r, c = cells[k] if cells is not None else class_cell(k)
        pat = np.kron(PATTERN_TEMPLATES[k], np.ones((cell // 8, cell // 8)))
        region = img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell]
        region[pat > 0] = intensity + rng.uniform(0.0, 1.0 - intensity, size=int((pat > 0).sum()))
    return np.repeat(img[:, :, None], 3, axis=2)


def random_cells(labels: Sequence[int], rng: np.random.Generator) -> dict[int, tuple[int, int]]:
    """Distinct random cells for the present classes."""
    present = [k for k, v in enumerate(labels) if v]
    picks = rng.permutation(16)[:len(present)]
    return {k: divmod(int(p), 4) for k, p in zip(present, picks)}


def make_synthetic(n_images: int, image_size: int = 32, n_patients: int | None = None,
                   prevalence: float = 0.3, seed: int = 0, placement: str = "random",
                   noise: float = 0.05, prefix: str = "syn") -> tuple[list[PatientRecord], dict[str, np.ndarray]]:
    """Synthetic multi-label dataset; patients are assigned round-robin.

    ``placement="random"`` puts each present texture in a random free cell;
    ``"fixed"`` pins class ``k`` to :func:`class_cell`.
    """
    if placement not in ("random", "fixed"):
        raise ValueError(f"placement must be 'random' or 'fixed', got {placement!r}")
    rng = np.random.default_rng(seed)
    n_patients = n_patients or max(1, n_images // 2)
    records, images = [], {}
    for i in range(n_images):
        labels = (rng.random(NUM_CLASSES) < prevalence).astype(int).tolist()
        cells = random_cells(labels, rng) if placement == "random" else None
        image_id = f"{prefix}_{i:05d}.png"
        records.append(PatientRecord(image_id, f"P{i % n_patients:05d}", tuple(labels)))
        images[image_id] = synthetic_image(labels, image_size, rng, cells, noise=noise)
    return records, images


def make_localization_set(n_images: int, class_idx: int = 0, image_size: int = 32,
                          seed: int = 0, noise: float = 0.05) -> list[tuple[np.ndarray, int]]:
    """Single-finding images of ``class_idx`` in a random cell, with the quadrant holding it.

    Class 0's texture is a solid bright square.
    """
    rng = np.random.default_rng(seed)
    labels = [0] * NUM_CLASSES
    labels[class_idx] = 1
    out = []
    for _ in range(n_images):
        cell = divmod(int(rng.integers(16)), 4)
        out.append((synthetic_image(labels, image_size, rng, {class_idx: cell}, noise=noise),
                    cell_quadrant(cell)))
    return out


def write_synthetic(root, n_images: int, image_size: int = 32, **kwargs) -> list[PatientRecord]:
    """Write a synthetic set as ``Data_Entry_2017.csv`` plus 8-bit PNGs under ``images/``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records, images = make_synthetic(n_images, image_size, **kwargs)
    for r in records:
        px = np.round(images[r.image_id][:, :, 0] * 255).astype(np.uint8)
        Image.fromarray(px, mode="L").save(root / "images" / r.image_id)
    write_label_csv(records, root / "Data_Entry_2017.csv")
    return records
