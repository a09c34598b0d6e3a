from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from memfuse import stats
from memfuse.data import load_dataset, read_manifest
from memfuse.errors import ConfigError
from memfuse.synthetic import SyntheticSpec, generate_split, generate_synthetic


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def mean_rows(samples, modality):
    return np.array([s.sequences[modality].rows.mean(axis=0) for s in samples])


def test_planted_coefficients_are_ordered():
    spec = SyntheticSpec()
    assert spec.alpha_text > spec.alpha_video > spec.alpha_audio and spec.alpha_interaction > 0


def test_noise_free_text_probe():
    # The text factor is linearly recoverable; when the label depends on text alone the probe ranks labels.
    spec = SyntheticSpec(n_train=400, n_val=10, n_test=10, noise_level=0.0, alpha_audio=0.0,
                         alpha_interaction=0.0, alpha_video=0.0)
    split = generate_split(spec, "train", 400)
    X = np.hstack([mean_rows(split.samples, "text"), np.ones((400, 1))])
    labels = np.array([s.label for s in split.samples])
    coef, *_ = np.linalg.lstsq(X, labels, rcond=None)
    assert stats.spearman(X @ coef, labels) > 0.99
    coef_z, *_ = np.linalg.lstsq(X, split.factors[:, 2], rcond=None)
    assert stats.spearman(X @ coef_z, split.factors[:, 2]) > 0.99


def test_same_seed_same_files(tmp_path):
    spec = SyntheticSpec(n_train=30, n_val=5, n_test=5, seed=1, n_candidates=2)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    other = SyntheticSpec(n_train=30, n_val=5, n_test=5, seed=2, n_candidates=2)
    generate_synthetic(other, tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_labels_strictly_inside_unit_interval():
    splits = generate_synthetic(SyntheticSpec(n_train=2000, n_val=50, n_test=50))
    labels = np.array([s.label for s in splits["train"].samples])
    assert 0.0 < labels.min() and labels.max() < 1.0


def test_text_factor_beats_audio_factor():
    split = generate_split(SyntheticSpec(), "train", 600)
    labels = [s.label for s in split.samples]
    assert stats.spearman(split.factors[:, 2], labels) > stats.spearman(split.factors[:, 1], labels)


def test_written_dataset_reloads_identically(tmp_path):
    spec = SyntheticSpec(n_train=12, n_val=4, n_test=4, n_candidates=2)
    splits = generate_synthetic(spec, tmp_path)
    loaded = load_dataset(read_manifest(tmp_path / "train.jsonl"))
    for a, b in zip(splits["train"].samples, loaded):
        assert a.id == b.id and a.label == b.label and a.metadata == b.metadata
        for m in a.sequences:
            assert np.array_equal(a.sequences[m].rows, b.sequences[m].rows)
    rerank = load_dataset(read_manifest(tmp_path / "rerank.jsonl"))
    originals = [s for s in rerank if s.candidates]
    assert len(originals) == 4 and all(len(s.candidates) == 2 for s in originals)
    assert len(rerank) == 4 * 3


def test_ids_disjoint_across_splits():
    splits = generate_synthetic(SyntheticSpec(n_train=20, n_val=5, n_test=5))
    ids = [s.id for sp in splits.values() for s in sp.samples]
    assert len(ids) == len(set(ids))


def test_metadata_pace_tracks_label():
    split = generate_split(SyntheticSpec(), "train", 800)
    fast = [s.label for s in split.samples if s.metadata.pace == "fast"]
    slow = [s.label for s in split.samples if s.metadata.pace == "slow"]
    assert np.mean(fast) > np.mean(slow) + 0.1


@pytest.mark.parametrize("bad", [
    {"dims": {"video": 0, "audio": 8, "text": 8}},
    {"dims": {"video": 3, "audio": 8, "text": 8}},
    {"noise_level": -1.0},
    {"min_len": 0},
])
def test_degenerate_specs_rejected(bad):
    with pytest.raises(ConfigError):
        SyntheticSpec(**bad).validate()
