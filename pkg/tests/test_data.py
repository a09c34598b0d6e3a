from __future__ import annotations

import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memfuse.data import (
    MODALITIES,
    EmbeddingSequence,
    Manifest,
    ManifestEntry,
    Sample,
    collate,
    decode_embedding,
    encode_embedding,
    iter_batches,
    load_dataset,
    parse_metadata,
    read_embedding,
    read_manifest,
    write_embedding,
)
from memfuse.errors import ChecksumError, DataError, FormatError, TruncationError, VersionError


def f32(rng, shape):
    return rng.standard_normal(shape).astype(np.float32).astype(np.float64)


def _reseal(blob: bytearray) -> bytes:
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    return bytes(blob)


# ------------------------------------------------------------------- MEMB

def test_memb_round_trip_7x16(tmp_path):
    rows = f32(np.random.default_rng(0), (7, 16))
    write_embedding(EmbeddingSequence("audio", rows), tmp_path / "a.memb")
    back = read_embedding(tmp_path / "a.memb")
    assert back.modality == "audio" and back.rows.dtype == np.float64
    assert np.array_equal(back.rows, rows)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), d=st.integers(1, 24),
       modality=st.sampled_from(MODALITIES))
def test_memb_round_trip_random(seed, n, d, modality):
    seq = EmbeddingSequence(modality, f32(np.random.default_rng(seed), (n, d)))
    blob = encode_embedding(seq)
    back = decode_embedding(blob)
    assert back.modality == modality and np.array_equal(back.rows, seq.rows)
    assert zlib.crc32(encode_embedding(back)) == zlib.crc32(blob)


def test_memb_header_layout():
    blob = encode_embedding(EmbeddingSequence("text", np.ones((3, 2))))
    assert blob[:4] == b"MEMB"
    assert struct.unpack_from("<HBBII", blob, 4) == (1, 2, 0, 3, 2)
    assert len(blob) == 16 + 3 * 2 * 4 + 4


def test_memb_rejections():
    blob = bytearray(encode_embedding(EmbeddingSequence("video", np.ones((3, 4)))))
    with pytest.raises(TruncationError):
        decode_embedding(bytes(blob[:-9]))
    with pytest.raises(FormatError):
        decode_embedding(b"XXXX" + bytes(blob[4:]))
    bad = bytearray(blob)
    bad[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionError):
        decode_embedding(_reseal(bad))
    bad = bytearray(blob)
    bad[7] = 1
    with pytest.raises(FormatError):
        decode_embedding(_reseal(bad))
    bad = bytearray(blob)
    bad[8:12] = struct.pack("<I", 0)
    with pytest.raises(DataError):
        decode_embedding(_reseal(bad))
    bad = bytearray(blob)
    bad[20] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_embedding(bytes(bad))
    bad = bytearray(blob)
    bad[16:20] = struct.pack("<f", float("nan"))
    with pytest.raises(DataError):
        decode_embedding(_reseal(bad))
    with pytest.raises(FormatError):
        decode_embedding(bytes(blob) + b"\0")


def test_sequence_invariants():
    with pytest.raises(DataError):
        EmbeddingSequence("video", np.zeros((0, 4)))
    with pytest.raises(DataError):
        EmbeddingSequence("smell", np.zeros((1, 4)))
    with pytest.raises(DataError):
        EmbeddingSequence("video", np.array([[np.inf]]))
    src = np.ones((2, 2))
    seq = EmbeddingSequence("video", src)
    src[0, 0] = 5.0
    assert seq.rows[0, 0] == 1.0 and not seq.rows.flags.writeable


# --------------------------------------------------------------- metadata

def _doc(**info):
    return {"General Video Information": info, "Scene Analysis": []}


def test_metadata_empty_scene_list():
    rec = parse_metadata(json.dumps(_doc()))
    assert (rec.scene_count, rec.distinct_emotion_count, rec.color_theme_count) == (0, 0, 0)


def test_metadata_emotion_normalization():
    doc = _doc()
    doc["Scene Analysis"] = [{"Emotions or Mood": "Happy"}, {"Emotions or Mood": "happy, tense"}]
    rec = parse_metadata(json.dumps(doc))
    assert rec.scene_count == 2 and rec.distinct_emotion_count == 2


def test_metadata_empty_strings_are_unknown():
    rec = parse_metadata(json.dumps(_doc(Pace="", Orientation="", Brand="", Sentiment="")))
    assert rec.pace == "unknown" and rec.orientation == "unknown" and rec.brand == ""


def test_metadata_fields():
    doc = _doc(Brand=" Acme ", Orientation="Portrait (9:16)", Pace="Fast-paced", Sentiment="Positive",
               Duration="30s")
    doc["Scene Analysis"] = [{"Colors": "Red, blue"}, {"Colors": ["BLUE", " green "]}, {"Colors": ""}]
    rec = parse_metadata(json.dumps(doc))
    assert (rec.brand, rec.orientation, rec.pace, rec.sentiment) == ("Acme", "portrait", "fast", "positive")
    assert rec.color_theme_count == 3 and rec.scene_count == 3 and rec.duration_seconds == 30.0


def test_metadata_malformed_json_is_the_only_error():
    with pytest.raises(DataError):
        parse_metadata("{not json")
    assert parse_metadata("{}").scene_count == 0


_text = st.one_of(st.just(""), st.text(max_size=12))
_scene = st.fixed_dictionaries({}, optional={"Emotions or Mood": _text, "Colors": _text, "Description": _text})


@settings(max_examples=200, deadline=None)
@given(info=st.fixed_dictionaries({}, optional={k: _text for k in ("Brand", "Orientation", "Pace", "Sentiment",
                                                                     "Duration")}),
       scenes=st.lists(_scene, max_size=6))
def test_metadata_total_over_well_shaped_documents(info, scenes):
    rec = parse_metadata(json.dumps({"General Video Information": info, "Scene Analysis": scenes}))
    assert rec.scene_count == len(scenes)
    assert rec.orientation in ("landscape", "portrait", "unknown")
    assert rec.pace in ("slow", "medium", "fast", "unknown")
    assert rec.distinct_emotion_count >= 0 and rec.color_theme_count >= 0 and rec.duration_seconds >= 0


# --------------------------------------------------------------- manifest

def _write_dataset(root, labels, with_meta=False):
    rng = np.random.default_rng(0)
    entries = []
    (root / "emb").mkdir(parents=True, exist_ok=True)
    for i, lab in enumerate(labels):
        sid = f"s{i}"
        emb = {}
        for m, d in (("video", 4), ("text", 3)):
            write_embedding(EmbeddingSequence(m, f32(rng, (i + 1, d))), root / "emb" / f"{sid}.{m}.memb")
            emb[m] = f"emb/{sid}.{m}.memb"
        meta = None
        if with_meta:
            (root / f"{sid}.json").write_text(json.dumps(_doc(Pace="slow")))
            meta = f"{sid}.json"
        entries.append(ManifestEntry(sid, emb, lab, meta))
    man = Manifest("toy", "train", entries, root)
    man.save(root / "train.jsonl")
    return root / "train.jsonl"


def test_manifest_round_trip(tmp_path):
    path = _write_dataset(tmp_path, [0.1, 0.9, None], with_meta=True)
    man = read_manifest(path)
    assert (man.dataset, man.split, man.ids) == ("toy", "train", ["s0", "s1", "s2"])
    samples = load_dataset(man)
    assert [s.sequences["video"].length for s in samples] == [1, 2, 3]
    assert samples[2].label is None and samples[0].metadata.pace == "slow"
    only_text = load_dataset(path, ["text"])
    assert set(only_text[0].sequences) == {"text"}


def test_manifest_label_out_of_range_names_sample(tmp_path):
    path = _write_dataset(tmp_path, [0.5])
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["id"], rec["label"] = "bad-one", 1.2
    path.write_text("\n".join(lines + [json.dumps(rec)]) + "\n")
    with pytest.raises(DataError, match="bad-one"):
        read_manifest(path)


def test_manifest_duplicate_ids_and_missing_files(tmp_path):
    path = _write_dataset(tmp_path, [0.5, 0.4])
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        read_manifest(path)
    path.write_text("\n".join(lines) + "\n")
    (tmp_path / "emb" / "s1.text.memb").unlink()
    with pytest.raises(DataError, match="missing"):
        load_dataset(path)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "nope.jsonl")


# ---------------------------------------------------------------- batches

def _sample(sid, lengths, label=0.5):
    return Sample(sid, {m: EmbeddingSequence(m, np.ones((n, 2))) for m, n in lengths.items()}, label)


def test_collate_pads_and_masks():
    b = collate([_sample("a", {"video": 3}), _sample("b", {"video": 5})], ["video"])
    assert b.x["video"].shape == (2, 5, 2)
    assert b.mask["video"].tolist() == [[True] * 3 + [False] * 2, [True] * 5]
    assert not b.x["video"][0, 3:].any()
    assert b.labels.tolist() == [0.5, 0.5]


def test_collate_errors():
    with pytest.raises(DataError):
        collate([], ["video"])
    with pytest.raises(DataError):
        collate([_sample("a", {"audio": 1})], ["video"])


def test_batches_preserve_order_unless_shuffled():
    samples = [_sample(f"s{i}", {"text": 1}) for i in range(10)]
    plain = [i for b in iter_batches(samples, 3, ["text"]) for i in b.ids]
    assert plain == [s.id for s in samples]
    one = [i for b in iter_batches(samples, 3, ["text"], shuffle_seed=4) for i in b.ids]
    two = [i for b in iter_batches(samples, 3, ["text"], shuffle_seed=4) for i in b.ids]
    assert one == two and sorted(one) == plain and one != plain


def test_sample_label_range():
    with pytest.raises(DataError):
        _sample("x", {"video": 1}, label=-0.1)


@pytest.mark.parametrize("raw,expected", [("30s", 30.0), (" 12.5 ", 12.5), (45, 45.0), ("nan", 0.0), ("inf", 0.0),
                                          (-3, 0.0), ("0:30", 0.0), (True, 0.0)])
def test_metadata_duration_parsing(raw, expected):
    assert parse_metadata(json.dumps(_doc(Duration=raw))).duration_seconds == expected
