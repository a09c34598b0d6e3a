"""Synthetic embedding datasets with a planted, cross-modal label signal.

Each sample draws latent factors ``z_video, z_audio, z_text ~ N(0, 1)`` and
gets the label::

    label = sigmoid(a_v*z_v + a_a*z_a + a_t*z_t + a_x*z_v*z_t)

Every modality has a fixed random unit "signal" direction ``u`` and a
"salience marker" direction ``s`` orthogonal to it. A sequence of length L
mixes two kinds of rows:

* salient rows:    z*u + marker_scale*s + noise_perp
* distractor rows: (z + distractor_scale*noise_level*e)*u + noise_perp

where ``noise_perp ~ N(0, noise_level^2)`` restricted to the complement of
``u`` and ``e ~ N(0, 1)``. With ``noise_level == 0`` every row carries z
exactly; with noise, only the marked rows do, which is what content-based
attention pooling can exploit and plain averaging cannot.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (MODALITIES, EmbeddingSequence, Manifest, ManifestEntry, MetaRecord, Sample, parse_metadata,
                   write_embedding)
from .errors import ConfigError

EMOTIONS = ("happy", "tense", "calm", "excited", "nostalgic", "sad", "playful", "inspired", "curious", "warm")
COLORS = ("red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink", "gray")


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 250
    dims: dict[str, int] = field(default_factory=lambda: {"video": 16, "audio": 12, "text": 20})
    min_len: int = 2
    max_len: int = 8
    noise_level: float = 1.0
    seed: int = 7
    alpha_video: float = 0.9
    alpha_audio: float = 0.8
    alpha_text: float = 1.0
    alpha_interaction: float = 0.5
    salient_fraction: float = 0.5
    marker_scale: float = 2.0
    distractor_scale: float = 3.0
    n_candidates: int = 0

    def validate(self) -> "SyntheticSpec":
        errs = []
        if self.noise_level < 0:
            errs.append(f"noise_level must be >= 0, got {self.noise_level}")
        for m in MODALITIES:
            d = self.dims.get(m)
            if d is None or d < 4:
                errs.append(f"dims[{m}] must be >= 4, got {d}")
        if set(self.dims) - set(MODALITIES):
            errs.append(f"unknown modalities in dims: {sorted(set(self.dims) - set(MODALITIES))}")
        if self.n_train < 1 or self.n_val < 1 or self.n_test < 1:
            errs.append("split sizes must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            errs.append(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if not 0.0 < self.salient_fraction <= 1.0:
            errs.append("salient_fraction must be in (0, 1]")
        if self.n_candidates < 0:
            errs.append("n_candidates must be >= 0")
        if errs:
            raise ConfigError(errs)
        return self

    @property
    def alphas(self) -> dict[str, float]:
        return {"video": self.alpha_video, "audio": self.alpha_audio, "text": self.alpha_text}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSplit:
    samples: list[Sample]
    factors: np.ndarray  # (n, 3) latent z in MODALITIES order
    logits: np.ndarray


def _directions(spec: SyntheticSpec) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng([spec.seed, 1_000_003])
    out = {}
    for m in MODALITIES:
        q, _ = np.linalg.qr(rng.standard_normal((spec.dims[m], 2)))
        out[m] = (q[:, 0], q[:, 1])
    return out


def _label_logit(spec: SyntheticSpec, z: np.ndarray) -> np.ndarray:
    zv, za, zt = z[..., 0], z[..., 1], z[..., 2]
    return spec.alpha_video * zv + spec.alpha_audio * za + spec.alpha_text * zt + spec.alpha_interaction * zv * zt


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _sequence(rng: np.random.Generator, spec: SyntheticSpec, u: np.ndarray, s: np.ndarray, z: float) -> np.ndarray:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    salient = rng.random(n) < spec.salient_fraction
    if not salient.any():
        salient[rng.integers(n)] = True
    d = u.shape[0]
    noise = rng.standard_normal((n, d)) * spec.noise_level
    noise -= np.outer(noise @ u, u)
    coef = np.where(salient, z, z + spec.distractor_scale * spec.noise_level * rng.standard_normal(n))
    rows = coef[:, None] * u[None, :] + noise + np.where(salient, spec.marker_scale, 0.0)[:, None] * s[None, :]
    # stored files are float32; keep the in-memory copy identical to what a reload yields
    return rows.astype(np.float32).astype(np.float64)


def _metadata_doc(rng: np.random.Generator, logit: float, brand: str) -> dict:
    paced = logit + rng.standard_normal()
    pace = "Fast" if paced > 0.6 else "Slow" if paced < -0.6 else "Medium"
    scenes = int(np.clip(np.round(4 + 1.2 * logit + rng.normal(0, 1.5)), 1, 12))
    n_emotions = int(np.clip(np.round(2.5 + 0.9 * logit + rng.normal(0, 1.0)), 1, len(EMOTIONS)))
    emotions = list(rng.choice(EMOTIONS, size=n_emotions, replace=False))
    n_colors = int(rng.integers(1, 6))
    colors = list(rng.choice(COLORS, size=n_colors, replace=False))
    scene_docs = []
    for i in range(scenes):
        moods = [emotions[i % n_emotions]]
        cols = [colors[i % n_colors]]
        if i == scenes - 1:
            # the last scene carries whatever the earlier ones did not mention
            moods += emotions[scenes:]
            cols += colors[scenes:]
        mood = ", ".join(moods)
        scene_docs.append({
            "Scene Number": i + 1,
            "Description": f"scene {i + 1}",
            "Emotions or Mood": mood.capitalize() if rng.random() < 0.5 else mood,
            "Tags": [],
            "Colors": [c.title() for c in cols],
            "Photography Style": "",
            "Text Shown": "",
            "Tone": "",
        })
    return {
        "General Video Information": {
            "Brand": brand,
            "Orientation": "Landscape" if rng.random() < 0.5 else "Portrait",
            "Pace": pace,
            "Audio": "",
            "Sentiment": str(rng.choice(["positive", "neutral", "negative"])),
            "Duration": f"{rng.uniform(15, 60):.1f}",
        },
        "Scene Analysis": scene_docs,
    }


def _split_rng(spec: SyntheticSpec, split: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, ("train", "validation", "test").index(split), stream])


def generate_split(spec: SyntheticSpec, split: str, n: int, with_metadata: bool = True) -> SyntheticSplit:
    dirs = _directions(spec)
    rng = _split_rng(spec, split, 0)
    meta_rng = _split_rng(spec, split, 1)
    z = rng.standard_normal((n, 3))
    logits = _label_logit(spec, z)
    labels = _sigmoid(logits)
    samples = []
    prefix = {"train": "tr", "validation": "va", "test": "te"}[split]
    for i in range(n):
        sid = f"{prefix}{i:05d}"
        seqs = {m: EmbeddingSequence(m, _sequence(rng, spec, *dirs[m], z[i, j])) for j, m in enumerate(MODALITIES)}
        meta = None
        if with_metadata:
            meta = parse_metadata(json.dumps(_metadata_doc(meta_rng, float(logits[i]), f"brand-{i % 17:02d}")))
        samples.append(Sample(sid, seqs, float(labels[i]), meta))
    return SyntheticSplit(samples, z, logits)


def generate_candidates(spec: SyntheticSpec, split: SyntheticSplit) -> list[tuple[Sample, list[Sample]]]:
    """Per original sample, ``n_candidates`` variants with redrawn text and video factors."""
    dirs = _directions(spec)
    rng = np.random.default_rng([spec.seed, 7, 7])
    items = []
    for s, z in zip(split.samples, split.factors):
        cands = []
        for j in range(spec.n_candidates):
            zc = z.copy()
            zc[0] += rng.normal(0.0, 0.75)
            zc[2] += rng.normal(0.0, 0.75)
            seqs = dict(s.sequences)
            for k in (0, 2):
                m = MODALITIES[k]
                seqs[m] = EmbeddingSequence(m, _sequence(rng, spec, *dirs[m], zc[k]))
            cands.append(Sample(f"{s.id}.c{j}", seqs, float(_sigmoid(_label_logit(spec, zc)))))
        items.append((s, cands))
    return items


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path | None = None) -> dict[str, SyntheticSplit]:
    """Generate train/validation/test splits; write files under ``out_dir`` when given."""
    spec.validate()
    splits = {
        "train": generate_split(spec, "train", spec.n_train),
        "validation": generate_split(spec, "validation", spec.n_val),
        "test": generate_split(spec, "test", spec.n_test),
    }
    if out_dir is not None:
        write_dataset(spec, splits, Path(out_dir))
    return splits


def _write_sample(s: Sample, out: Path, meta_doc: dict | None) -> ManifestEntry:
    emb = {}
    for m, seq in s.sequences.items():
        rel = f"emb/{s.id}.{m}.memb"
        write_embedding(seq, out / rel)
        emb[m] = rel
    meta_rel = None
    if meta_doc is not None:
        meta_rel = f"meta/{s.id}.json"
        (out / meta_rel).write_text(json.dumps(meta_doc, indent=2, sort_keys=True) + "\n")
    return ManifestEntry(s.id, emb, s.label, meta_rel, s.candidates)


def write_dataset(spec: SyntheticSpec, splits: dict[str, SyntheticSplit], out: Path) -> dict[str, Path]:
    (out / "emb").mkdir(parents=True, exist_ok=True)
    (out / "meta").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, data in splits.items():
        # regenerate the raw metadata documents from the same stream used in generate_split
        meta_rng = _split_rng(spec, split, 1)
        entries = []
        for i, (s, logit) in enumerate(zip(data.samples, data.logits)):
            doc = _metadata_doc(meta_rng, float(logit), f"brand-{i % 17:02d}")
            entries.append(_write_sample(s, out, doc))
        man = Manifest("synthetic", split, entries, out)
        paths[split] = out / f"{split}.jsonl"
        man.save(paths[split])
    if spec.n_candidates > 0:
        entries = []
        for orig, cands in generate_candidates(spec, splits["test"]):
            for c in cands:
                entries.append(_write_sample(c, out, None))
            linked = Sample(orig.id, orig.sequences, orig.label, orig.metadata, tuple(c.id for c in cands))
            entries.append(_write_sample(linked, out, None))
        paths["rerank"] = out / "rerank.jsonl"
        Manifest("synthetic", "test", entries, out).save(paths["rerank"])
    (out / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths


def summarize(splits: dict[str, SyntheticSplit]) -> dict:
    out = {}
    for name, data in splits.items():
        labels = np.array([s.label for s in data.samples])
        out[name] = {"n": len(labels), "label_min": float(labels.min()), "label_max": float(labels.max()),
                     "label_mean": float(labels.mean())}
    return out
