"""Embedding files, metadata records, manifests and padded batching.

MEMB layout (little-endian)::

    offset  size  field
    0       4     magic b"MEMB"
    4       2     version (u16) = 1
    6       1     modality (u8): 0 video, 1 audio, 2 text
    7       1     dtype (u8): 0 = float32
    8       4     L, number of rows (u32)
    12      4     d, row width (u32)
    16      4*L*d payload, row-major float32
    ...     4     CRC-32 of every preceding byte (u32)

Manifests are line-delimited JSON. A line carrying ``"dataset"`` and no
``"id"`` is the header; every other line is one sample::

    {"dataset": "synthetic", "split": "train"}
    {"id": "s0001", "embeddings": {"video": "emb/s0001.video.memb", ...},
     "label": 0.62, "metadata": "meta/s0001.json", "candidates": ["c1", "c2"]}

Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ChecksumError, DataError, FormatError, TruncationError, VersionError

MODALITIES = ("video", "audio", "text")
SPLITS = ("train", "validation", "test")
MEMB_MAGIC = b"MEMB"
MEMB_VERSION = 1
_MEMB_HEADER = struct.Struct("<4sHBBII")


def canonical_modalities(mods: Iterable[str]) -> tuple[str, ...]:
    mods = set(mods)
    unknown = mods - set(MODALITIES)
    if unknown:
        raise DataError(f"unknown modalities {sorted(unknown)}; expected a subset of {MODALITIES}")
    return tuple(m for m in MODALITIES if m in mods)


@dataclass(frozen=True)
class EmbeddingSequence:
    modality: str
    rows: np.ndarray  # (L, d) float64

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DataError(f"{self.modality} sequence must be L x d with L, d >= 1; got shape {rows.shape}")
        if not np.isfinite(rows).all():
            raise DataError(f"{self.modality} sequence contains non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class MetaRecord:
    brand: str = ""
    orientation: str = "unknown"
    pace: str = "unknown"
    sentiment: str = ""
    scene_count: int = 0
    distinct_emotion_count: int = 0
    color_theme_count: int = 0
    duration_seconds: float = 0.0  # 0 means not reported

    def to_dict(self) -> dict:
        return {
            "brand": self.brand,
            "orientation": self.orientation,
            "pace": self.pace,
            "sentiment": self.sentiment,
            "scene_count": self.scene_count,
            "distinct_emotion_count": self.distinct_emotion_count,
            "color_theme_count": self.color_theme_count,
            "duration_seconds": self.duration_seconds,
        }


@dataclass(frozen=True)
class Sample:
    id: str
    sequences: dict[str, EmbeddingSequence]
    label: float | None = None
    metadata: MetaRecord | None = None
    candidates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.label is not None:
            lab = float(self.label)
            if not (0.0 <= lab <= 1.0):
                raise DataError(f"sample {self.id!r}: label {lab} outside [0, 1]")
            object.__setattr__(self, "label", lab)


# ------------------------------------------------------------------ MEMB

def encode_embedding(seq: EmbeddingSequence) -> bytes:
    rows32 = np.ascontiguousarray(seq.rows, dtype="<f4")
    head = _MEMB_HEADER.pack(MEMB_MAGIC, MEMB_VERSION, MODALITIES.index(seq.modality), 0, *rows32.shape)
    body = head + rows32.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_embedding(blob: bytes) -> EmbeddingSequence:
    if len(blob) < _MEMB_HEADER.size + 4:
        raise TruncationError(f"MEMB blob of {len(blob)} bytes is shorter than the header")
    magic, version, modality, dtype, n_rows, dim = _MEMB_HEADER.unpack_from(blob)
    if magic != MEMB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MEMB_MAGIC!r}")
    if version != MEMB_VERSION:
        raise VersionError(f"MEMB version {version} unsupported (expected {MEMB_VERSION})")
    if dtype != 0:
        raise FormatError(f"MEMB dtype code {dtype} unsupported (only 0 = float32)")
    if modality >= len(MODALITIES):
        raise FormatError(f"MEMB modality code {modality} unknown")
    if n_rows == 0 or dim == 0:
        raise DataError(f"MEMB header declares an empty matrix ({n_rows} x {dim})")
    need = _MEMB_HEADER.size + 4 * n_rows * dim + 4
    if len(blob) < need:
        raise TruncationError(f"MEMB payload truncated: header claims {need} bytes, got {len(blob)}")
    if len(blob) > need:
        raise FormatError(f"MEMB blob has {len(blob) - need} trailing bytes")
    (crc,) = struct.unpack_from("<I", blob, need - 4)
    if zlib.crc32(blob[: need - 4]) != crc:
        raise ChecksumError("MEMB CRC-32 mismatch")
    rows = np.frombuffer(blob, dtype="<f4", count=n_rows * dim, offset=_MEMB_HEADER.size)
    rows = rows.reshape(n_rows, dim).astype(np.float64)
    if not np.isfinite(rows).all():
        raise DataError("MEMB payload contains non-finite values")
    return EmbeddingSequence(MODALITIES[modality], rows)


def write_embedding(seq: EmbeddingSequence, path: str | Path) -> None:
    Path(path).write_bytes(encode_embedding(seq))


def read_embedding(path: str | Path) -> EmbeddingSequence:
    return decode_embedding(Path(path).read_bytes())


# -------------------------------------------------------------- metadata

def _norm_items(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        parts = value.split(",")
    elif isinstance(value, (list, tuple)):
        parts = [p for v in value if isinstance(v, str) for p in v.split(",")]
    else:
        return []
    return [p.strip().lower() for p in parts if p.strip()]


def _enum(value, table: dict[str, str]) -> str:
    if not isinstance(value, str):
        return "unknown"
    v = value.strip().lower()
    for key, canon in table.items():
        if key in v:
            return canon
    return "unknown"


_ORIENTATIONS = {"landscape": "landscape", "horizontal": "landscape", "portrait": "portrait", "vertical": "portrait"}
_PACES = {"slow": "slow", "medium": "medium", "moderate": "medium", "fast": "fast", "quick": "fast"}


def _duration(value) -> float:
    if isinstance(value, str):
        try:
            value = float(value.strip().rstrip("s"))
        except ValueError:
            return 0.0
    if isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value):
        return max(float(value), 0.0)
    return 0.0


def parse_metadata(json_text: str) -> MetaRecord:
    """Parse a video-analysis JSON document ("General Video Information" + "Scene Analysis").

    Missing or empty fields map to ``unknown`` / 0. Emotions and colors are
    counted as distinct lowercased, trimmed, comma-split entries across scenes.
    """
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as e:
        raise DataError(f"malformed metadata JSON: {e}") from e
    if not isinstance(doc, dict):
        raise DataError("metadata JSON must be an object")
    info = doc.get("General Video Information") or {}
    if not isinstance(info, dict):
        info = {}
    scenes = doc.get("Scene Analysis") or []
    if not isinstance(scenes, list):
        scenes = []
    scenes = [s for s in scenes if isinstance(s, dict)]
    emotions = {e for s in scenes for e in _norm_items(s.get("Emotions or Mood"))}
    colors = {c for s in scenes for c in _norm_items(s.get("Colors"))}
    brand = info.get("Brand")
    sentiment = info.get("Sentiment")
    return MetaRecord(
        brand=brand.strip() if isinstance(brand, str) else "",
        orientation=_enum(info.get("Orientation"), _ORIENTATIONS),
        pace=_enum(info.get("Pace"), _PACES),
        sentiment=sentiment.strip().lower() if isinstance(sentiment, str) else "",
        scene_count=len(scenes),
        distinct_emotion_count=len(emotions),
        color_theme_count=len(colors),
        duration_seconds=_duration(info.get("Duration")),
    )


# -------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    embeddings: dict[str, str]
    label: float | None = None
    metadata: str | None = None
    candidates: tuple[str, ...] = ()

    def to_json(self) -> dict:
        rec: dict = {"id": self.id, "embeddings": dict(self.embeddings), "label": self.label}
        if self.metadata is not None:
            rec["metadata"] = self.metadata
        if self.candidates:
            rec["candidates"] = list(self.candidates)
        return rec


@dataclass
class Manifest:
    dataset: str
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def dumps(self) -> str:
        lines = [json.dumps({"dataset": self.dataset, "split": self.split}, sort_keys=True)]
        lines += [json.dumps(e.to_json(), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    dataset, split = path.stem, "test"
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: malformed JSON ({e})") from e
        if "id" not in rec:
            dataset = str(rec.get("dataset", dataset))
            split = str(rec.get("split", split))
            continue
        sid = str(rec["id"])
        if sid in seen:
            raise DataError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        label = rec.get("label")
        if label is not None:
            label = float(label)
            if not 0.0 <= label <= 1.0:
                raise DataError(f"sample {sid!r}: label {label} outside [0, 1]")
        emb = rec.get("embeddings") or {}
        canonical_modalities(emb)
        entries.append(ManifestEntry(sid, {k: str(v) for k, v in emb.items()}, label,
                                     rec.get("metadata"), tuple(str(c) for c in rec.get("candidates") or ())))
    if split not in SPLITS:
        raise DataError(f"{path}: split {split!r} not one of {SPLITS}")
    return Manifest(dataset, split, entries, path.parent)


def load_dataset(manifest: Manifest | str | Path, modalities: Sequence[str] | None = None) -> list[Sample]:
    """Read every entry's embeddings (restricted to ``modalities`` if given) and metadata."""
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    out = []
    for e in manifest.entries:
        wanted = e.embeddings if modalities is None else {m: e.embeddings[m] for m in modalities if m in e.embeddings}
        seqs = {}
        for mod, rel in wanted.items():
            p = manifest.resolve(rel)
            if not p.exists():
                raise DataError(f"sample {e.id!r}: embedding file missing: {p}")
            seq = read_embedding(p)
            if seq.modality != mod:
                raise DataError(f"sample {e.id!r}: {p} holds {seq.modality}, manifest says {mod}")
            seqs[mod] = seq
        meta = None
        if e.metadata is not None:
            p = manifest.resolve(e.metadata)
            if not p.exists():
                raise DataError(f"sample {e.id!r}: metadata file missing: {p}")
            meta = parse_metadata(p.read_text())
        out.append(Sample(e.id, seqs, e.label, meta, e.candidates))
    return out


# --------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: list[str]
    x: dict[str, np.ndarray]  # modality -> (B, L, d), zero padded
    mask: dict[str, np.ndarray]  # modality -> (B, L) bool, True for real rows
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[Sample], modalities: Sequence[str], pad_to: dict[str, int] | None = None) -> Batch:
    """Stack samples into zero-padded arrays with row masks."""
    if not samples:
        raise DataError("cannot collate an empty batch")
    xs, masks = {}, {}
    for mod in modalities:
        seqs = []
        for s in samples:
            if mod not in s.sequences:
                raise DataError(f"sample {s.id!r} has no {mod} embedding")
            seqs.append(s.sequences[mod].rows)
        dims = {r.shape[1] for r in seqs}
        if len(dims) != 1:
            raise DataError(f"{mod} embeddings have inconsistent widths {sorted(dims)}")
        length = max(r.shape[0] for r in seqs)
        if pad_to and mod in pad_to:
            length = max(length, pad_to[mod])
        arr = np.zeros((len(seqs), length, dims.pop()))
        m = np.zeros((len(seqs), length), dtype=bool)
        for i, r in enumerate(seqs):
            arr[i, : r.shape[0]] = r
            m[i, : r.shape[0]] = True
        xs[mod], masks[mod] = arr, m
    labels = None
    if all(s.label is not None for s in samples):
        labels = np.array([s.label for s in samples], dtype=np.float64)
    return Batch([s.id for s in samples], xs, masks, labels)


def iter_batches(samples: Sequence[Sample], batch_size: int, modalities: Sequence[str],
                 shuffle_seed: int | None = None) -> Iterable[Batch]:
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield collate([samples[i] for i in order[start:start + batch_size]], modalities)
