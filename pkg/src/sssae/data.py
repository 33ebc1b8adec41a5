"""Frame-table ingestion, speaker normalization, context stacking, label splits.

Frame table files are comma-separated with header
``utt,spk,idx,label,f0,...,f{d-1}``; an empty label cell means the frame is
unlabeled.  Rows of one utterance must be contiguous with ``idx`` counting
0, 1, 2, ...
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CardinalityError, CompletenessError, ConfigError, IntegrityError, ParseError
from .tensor import DTYPE, STREAM_SPLIT, STREAM_SYNTH, make_rng

FIXED_COLUMNS = ("utt", "spk", "idx", "label")
PUBLISHED_FRAME_COUNTS = {
    "train": (1068816, 1068818),  # two published figures; either is accepted
    "valid": (56005,),
    "test": (57919,),
}
FEATURE_CLIP = 4.0


# ---------------------------------------------------------------------------
# phone inventories


@dataclass(frozen=True)
class CollapseMap:
    sources: tuple[str, ...]
    targets: tuple[str, ...]
    index: np.ndarray  # index[i] = position in ``targets`` of sources[i]'s image

    def source_index(self, phone: str) -> int:
        try:
            return self.sources.index(phone)
        except ValueError:
            raise ParseError(f"unknown phone {phone!r}") from None

    def collapse(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.sources)):
            raise IntegrityError(f"label outside 0..{len(self.sources) - 1}")
        return self.index[labels]


def default_collapse_map_path() -> Path:
    return Path(str(resources.files("sssae") / "resources" / "phones.48-39.map"))


def load_collapse_map(path: str | Path | None = None, num_sources: int = 48,
                      num_targets: int = 39) -> CollapseMap:
    path = default_collapse_map_path() if path is None else Path(path)
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected '<source> <target>', got {line!r}")
            src, dst = parts
            if src in pairs:
                raise ParseError(f"{path}:{lineno}: duplicate source phone {src!r}")
            pairs[src] = dst
    if len(pairs) != num_sources:
        raise CompletenessError(f"{path}: maps {len(pairs)} source phones, expected {num_sources}")
    targets: list[str] = []
    for dst in pairs.values():
        if dst not in targets:
            targets.append(dst)
    if len(targets) != num_targets:
        raise CardinalityError(f"{path}: image has {len(targets)} phones, expected {num_targets}")
    index = np.array([targets.index(d) for d in pairs.values()], dtype=np.int64)
    return CollapseMap(tuple(pairs), tuple(targets), index)


# ---------------------------------------------------------------------------
# frame tables


@dataclass
class FrameTable:
    utt: list[str]
    spk: list[str]
    idx: np.ndarray
    features: np.ndarray
    labels: np.ndarray  # -1 where absent
    phones: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.utt)

    @property
    def frame_dim(self) -> int:
        return self.features.shape[1]

    def utterance_runs(self) -> list[tuple[int, int]]:
        """(start, stop) row ranges of consecutive utterances."""
        runs, start = [], 0
        for i in range(1, len(self.utt) + 1):
            if i == len(self.utt) or self.utt[i] != self.utt[start]:
                runs.append((start, i))
                start = i
        return runs


def _check_integrity(table: FrameTable) -> None:
    seen = set()
    for start, stop in table.utterance_runs():
        name = table.utt[start]
        if name in seen:
            raise IntegrityError(f"utterance {name!r} is split across non-adjacent rows")
        seen.add(name)
        expected = np.arange(stop - start)
        if not np.array_equal(table.idx[start:stop], expected):
            bad = start + int(np.argmax(table.idx[start:stop] != expected))
            raise IntegrityError(
                f"utterance {name!r}: frame index {table.idx[bad]} at row {bad}, expected {bad - start}"
            )
        if len(set(table.spk[start:stop])) != 1:
            raise IntegrityError(f"utterance {name!r} has more than one speaker")


def load_frame_table(path: str | Path, phones: tuple[str, ...] | None = None) -> FrameTable:
    """Parse and validate a frame table; labels are indexed into ``phones``
    (default: the 48-phone inventory of the shipped collapse map)."""
    if phones is None:
        phones = load_collapse_map().sources
    lookup = {p: i for i, p in enumerate(phones)}
    utt, spk, idx, labels, feats = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: missing header")
        header = [h.strip() for h in header]
        if tuple(header[:4]) != FIXED_COLUMNS or len(header) < 5:
            raise ParseError(f"{path}:1: header must start with utt,spk,idx,label followed by feature columns")
        dim = len(header) - 4
        if header[4:] != [f"f{k}" for k in range(dim)]:
            raise ParseError(f"{path}:1: feature columns must be f0..f{dim - 1}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {dim} features, got {len(row) - 4}"
                )
            try:
                frame = int(row[2])
                values = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(f"{path}:{lineno}: non-finite feature value")
            sym = row[3].strip()
            if sym and sym not in lookup:
                raise ParseError(f"{path}:{lineno}: unknown phone {sym!r}")
            utt.append(row[0])
            spk.append(row[1])
            idx.append(frame)
            labels.append(lookup[sym] if sym else -1)
            feats.append(values)
    table = FrameTable(
        utt=utt,
        spk=spk,
        idx=np.array(idx, dtype=np.int64),
        features=np.array(feats, dtype=DTYPE).reshape(len(feats), dim),
        labels=np.array(labels, dtype=np.int64),
        phones=tuple(phones),
    )
    _check_integrity(table)
    return table


def write_frame_table(table: FrameTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(FIXED_COLUMNS) + [f"f{k}" for k in range(table.frame_dim)])
        for i in range(len(table)):
            lab = table.phones[table.labels[i]] if table.labels[i] >= 0 else ""
            w.writerow([table.utt[i], table.spk[i], int(table.idx[i]), lab]
                       + [repr(float(v)) for v in table.features[i]])


def normalize_per_speaker(table: FrameTable) -> FrameTable:
    """Zero mean, unit population variance per speaker and coordinate.

    Constant coordinates are only centered (which makes them exactly zero).
    """
    if len(table) == 0:
        raise ConfigError("cannot normalize an empty table")
    speakers, inverse = np.unique(np.asarray(table.spk), return_inverse=True)
    out = np.empty_like(table.features)
    for s in range(len(speakers)):
        rows = inverse == s
        block = table.features[rows]
        mean = block.mean(axis=0)
        std = block.std(axis=0)
        centered = block - mean
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        scaled = centered / np.where(flat, 1.0, std)
        scaled[:, flat] = 0.0
        out[rows] = scaled
    return replace(table, features=out)


def clip_and_scale(table: FrameTable, clip: float = FEATURE_CLIP) -> FrameTable:
    """Clamp to [-clip, clip] then map linearly onto [-1, 1] (the tanh decoder's range)."""
    return replace(table, features=np.clip(table.features, -clip, clip) / clip)


# ---------------------------------------------------------------------------
# stacked datasets


@dataclass
class Provenance:
    source_digest: str = ""
    split_seed: int | None = None
    labeled_fraction: float = 1.0


@dataclass
class StackedDataset:
    """Context-stacked examples.

    ``labels`` holds the reference label of every row (-1 if the source had
    none).  Training code must go through :attr:`train_labels`, which hides
    the label of every row whose ``labeled`` flag is off; only evaluation
    calls :meth:`eval_labels`.
    """

    inputs: np.ndarray
    labels: np.ndarray = field(repr=False)
    labeled: np.ndarray
    frame_dim: int
    context: tuple[int, int] = (0, 0)
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2 or self.labels.shape != (n,) or self.labeled.shape != (n,):
            raise IntegrityError("inconsistent dataset array shapes")
        left, right = self.context
        if self.inputs.shape[1] != (left + right + 1) * self.frame_dim:
            raise IntegrityError(
                f"input width {self.inputs.shape[1]} != {left + right + 1} x {self.frame_dim}"
            )
        if np.any(self.labeled & (self.labels < 0)):
            raise IntegrityError("row flagged labeled without a label")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_labeled(self) -> int:
        return int(self.labeled.sum())

    @property
    def train_labels(self) -> np.ndarray:
        return np.where(self.labeled, self.labels, -1)

    def eval_labels(self) -> np.ndarray:
        return self.labels.copy()

    def subset(self, rows: np.ndarray) -> "StackedDataset":
        return replace(self, inputs=self.inputs[rows], labels=self.labels[rows],
                       labeled=self.labeled[rows])

    def labeled_subset(self) -> "StackedDataset":
        return self.subset(np.flatnonzero(self.labeled))


def stack_context(table: FrameTable, left: int = 5, right: int = 5) -> StackedDataset:
    """One example per frame: frames t-left .. t+right of the same utterance,
    concatenated oldest first; edge frames are repeated to fill the window."""
    if left < 0 or right < 0:
        raise ConfigError("context widths must be >= 0")
    n, d = table.features.shape
    run_start = np.empty(n, dtype=np.int64)
    run_len = np.empty(n, dtype=np.int64)
    for start, stop in table.utterance_runs():
        run_start[start:stop] = start
        run_len[start:stop] = stop - start
    pos = np.arange(n) - run_start
    offsets = np.arange(-left, right + 1)
    gather = run_start[:, None] + np.clip(pos[:, None] + offsets[None, :], 0, run_len[:, None] - 1)
    inputs = table.features[gather].reshape(n, (left + right + 1) * d)
    return StackedDataset(
        inputs=np.ascontiguousarray(inputs),
        labels=table.labels.copy(),
        labeled=table.labels >= 0,
        frame_dim=d,
        context=(left, right),
    )


def labeled_count(n: int, fraction: float) -> int:
    """round(fraction * n), halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def split_labels(ds: StackedDataset, fraction: float, seed: int) -> StackedDataset:
    """Keep the label flag on round(fraction * N) uniformly chosen rows.

    Draws for different fractions are independent, so the labeled set of a
    smaller fraction is not in general a subset of a larger one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction must lie in (0, 1], got {fraction}")
    candidates = np.flatnonzero(ds.labeled)
    k = labeled_count(len(candidates), fraction)
    if k == 0:
        raise ConfigError(f"fraction {fraction} of {len(candidates)} rows leaves no labeled examples")
    if k == len(candidates):
        chosen = candidates
    else:
        rng = make_rng(seed, STREAM_SPLIT)
        chosen = candidates[rng.choice(len(candidates), size=k, replace=False)]
    mask = np.zeros(len(ds), dtype=bool)
    mask[chosen] = True
    prov = replace(ds.provenance, split_seed=seed, labeled_fraction=fraction)
    return replace(ds, labeled=mask, provenance=prov)


# Dataset cache layout (little-endian):
#   4s "SSDS" | B version | Q rows | Q input_dim | Q frame_dim | Q left | Q right
#   d labeled fraction | q split seed (-1: none) | 32s sha256 of the source
#   rows*input_dim float64 inputs | rows int32 labels (-1: absent) | rows uint8 labeled flags
CACHE_MAGIC = b"SSDS"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sBQQQQQdq32s")


def save_dataset(ds: StackedDataset, path: str | Path) -> None:
    digest = bytes.fromhex(ds.provenance.source_digest) if ds.provenance.source_digest else b""
    seed = -1 if ds.provenance.split_seed is None else ds.provenance.split_seed
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(ds), ds.input_dim, ds.frame_dim,
                                ds.context[0], ds.context[1], ds.provenance.labeled_fraction,
                                seed, digest.ljust(32, b"\0"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())
        fh.write(ds.labeled.astype(np.uint8).tobytes())


def load_dataset(path: str | Path) -> StackedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise ParseError(f"{path}: truncated dataset header")
    magic, version, n, dim, fdim, left, right, frac, seed, digest = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise ParseError(f"{path}: unsupported dataset version {version}")
    expected = _CACHE_HEADER.size + n * dim * 8 + n * 4 + n
    if len(raw) != expected:
        raise ParseError(f"{path}: size {len(raw)} bytes, expected {expected}")
    off = _CACHE_HEADER.size
    inputs = np.frombuffer(raw, "<f8", n * dim, off).astype(DTYPE).reshape(n, dim)
    off += n * dim * 8
    labels = np.frombuffer(raw, "<i4", n, off).astype(np.int64)
    off += n * 4
    labeled = np.frombuffer(raw, np.uint8, n, off).astype(bool)
    prov = Provenance(
        source_digest=digest.hex() if digest.strip(b"\0") else "",
        split_seed=None if seed < 0 else seed,
        labeled_fraction=frac,
    )
    return StackedDataset(inputs, labels, labeled, fdim, (left, right), prov)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare(table: FrameTable, left: int = 5, right: int = 5, digest: str = "") -> StackedDataset:
    """Normalize per speaker, map into [-1, 1] and stack context windows."""
    ds = stack_context(clip_and_scale(normalize_per_speaker(table)), left, right)
    ds.provenance = Provenance(source_digest=digest)
    return ds


def check_published_counts(split: str, count: int) -> int | None:
    """Return the published frame count matched by ``count``, if any."""
    for expected in PUBLISHED_FRAME_COUNTS.get(split, ()):
        if count == expected:
            return expected
    return None


# ---------------------------------------------------------------------------
# synthetic data


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(num_classes: int, dim: int, per_class: int, noise: float, seed: int,
                       radius: float = 0.5) -> StackedDataset:
    """Gaussian blobs around random points on a sphere of ``radius``, clamped to [-1, 1]."""
    if num_classes < 2 or dim < 2:
        raise ConfigError("need num_classes >= 2 and dim >= 2")
    rng = make_rng(seed, STREAM_SYNTH)
    means = radius * _unit_rows(rng, num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + noise * rng.standard_normal((labels.size, dim))
    return StackedDataset(
        inputs=np.clip(x, -1.0, 1.0),
        labels=labels.astype(np.int64),
        labeled=np.ones(labels.size, dtype=bool),
        frame_dim=dim,
        provenance=Provenance(source_digest=hashlib.sha256(
            repr(("blobs", num_classes, dim, per_class, noise, seed, radius)).encode()).hexdigest()),
    )


def synthetic_phones(num_classes: int, cmap: CollapseMap | None = None) -> list[int]:
    """Indices of the first ``num_classes`` training phones whose collapsed
    images are pairwise distinct."""
    cmap = cmap or load_collapse_map()
    chosen, images = [], set()
    for i, t in enumerate(cmap.index):
        if t not in images:
            chosen.append(i)
            images.add(t)
        if len(chosen) == num_classes:
            return chosen
    raise ConfigError(f"only {len(chosen)} distinct collapsed phones available")


@dataclass
class SyntheticCorpus:
    """Parameters of a synthetic frame corpus.

    Utterances are runs of phone segments; each frame is the segment's class
    mean plus isotropic noise, then distorted by a per-speaker affine map so
    that speaker normalization has something to undo.
    """

    num_classes: int = 10
    frame_dim: int = 39
    num_frames: int = 20000
    num_speakers: int = 20
    noise: float = 1.0
    min_segment: int = 3
    max_segment: int = 12
    frames_per_utterance: int = 200
    speaker_shift: float = 1.0
    seed: int = 0


def generate_synthetic_frames(cfg: SyntheticCorpus, means_seed: int | None = None,
                              prefix: str = "") -> FrameTable:
    """Build a :class:`FrameTable` per ``cfg``.

    Class means come from ``means_seed`` (default ``cfg.seed``) so that train,
    validation and test corpora can share classes while drawing different
    speakers and noise.
    """
    if cfg.num_classes < 2 or cfg.frame_dim < 2:
        raise ConfigError("need num_classes >= 2 and frame_dim >= 2")
    if not 1 <= cfg.min_segment <= cfg.max_segment:
        raise ConfigError("need 1 <= min_segment <= max_segment")
    cmap = load_collapse_map()
    phone_ids = np.array(synthetic_phones(cfg.num_classes, cmap))
    mrng = make_rng(cfg.seed if means_seed is None else means_seed, STREAM_SYNTH, 0)
    means = 2.0 * _unit_rows(mrng, cfg.num_classes, cfg.frame_dim)
    rng = make_rng(cfg.seed, STREAM_SYNTH, 1)
    shifts = cfg.speaker_shift * rng.standard_normal((cfg.num_speakers, cfg.frame_dim))
    gains = rng.uniform(0.5, 2.0, size=(cfg.num_speakers, cfg.frame_dim))

    utt, spk, idx, labels, feats = [], [], [], [], []
    remaining, u = cfg.num_frames, 0
    while remaining > 0:
        length = min(cfg.frames_per_utterance, remaining)
        s = u % cfg.num_speakers
        classes = []
        while len(classes) < length:
            seg = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
            classes.extend([int(rng.integers(cfg.num_classes))] * seg)
        classes = np.array(classes[:length])
        x = means[classes] + cfg.noise * rng.standard_normal((length, cfg.frame_dim))
        feats.append(gains[s] * x + shifts[s])
        name = f"{prefix}u{u:05d}"
        utt.extend([name] * length)
        spk.extend([f"{prefix}s{s:03d}"] * length)
        idx.append(np.arange(length))
        labels.append(phone_ids[classes])
        remaining -= length
        u += 1
    return FrameTable(
        utt=utt,
        spk=spk,
        idx=np.concatenate(idx),
        features=np.concatenate(feats).astype(DTYPE),
        labels=np.concatenate(labels).astype(np.int64),
        phones=cmap.sources,
    )
