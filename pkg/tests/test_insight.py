from __future__ import annotations

import json

import numpy as np
import pytest

from memfuse.data import Sample
from memfuse.errors import DataError
from memfuse.insight import (
    FactorReport,
    RerankReport,
    categorize,
    factor_analysis,
    report_from_dict,
    report_render,
    report_to_dict,
    rerank,
    rerank_items_from_samples,
    summarize_rerank,
)
from memfuse.model import build, predict
from memfuse.synthetic import SyntheticSpec, generate_candidates, generate_split

from factories import random_samples, tiny_config


def noisy_scores(samples, seed, sd=0.05):
    rng = np.random.default_rng(seed)
    return np.clip([s.label + rng.normal(0, sd) for s in samples], 0.0, 1.0)


@pytest.fixture(scope="module")
def planted():
    return {seed: generate_split(SyntheticSpec(seed=seed), "test", 500) for seed in range(1, 6)}


# --------------------------------------------------------- factor analysis

@pytest.mark.parametrize("seed", range(1, 6))
def test_pace_effect_is_detected(planted, seed):
    samples = planted[seed].samples
    rep = factor_analysis(samples, noisy_scores(samples, seed), n_permutations=500)
    pace = rep.get("pace")
    assert pace.status == "ok" and pace.p_value < 0.05
    assert pace.groups["high"].mean > pace.groups["low"].mean


@pytest.mark.parametrize("seed", range(1, 6))
def test_orientation_null_is_not_flagged(planted, seed):
    samples = planted[seed].samples
    rep = factor_analysis(samples, noisy_scores(samples, seed), n_permutations=500)
    assert rep.get("orientation").p_value > 0.001


def test_factor_analysis_is_order_invariant(planted):
    samples = planted[1].samples
    preds = noisy_scores(samples, 0)
    a = factor_analysis(samples, preds, n_permutations=300, seed=2)
    b = factor_analysis(samples[::-1], preds[::-1], n_permutations=300, seed=2)
    assert report_to_dict(a) == report_to_dict(b)


def test_constant_predictions_are_degenerate(planted):
    samples = planted[2].samples
    rep = factor_analysis(samples, np.full(len(samples), 0.5), n_permutations=100)
    for name in ("pace", "scene_count", "orientation", "emotion_count"):
        assert rep.get(name).status == "degenerate", name


def test_missing_metadata_is_excluded_per_factor(planted):
    samples = list(planted[3].samples[:60])
    stripped = [Sample(s.id, s.sequences, s.label) for s in samples[:10]] + samples[10:]
    rep = factor_analysis(stripped, noisy_scores(stripped, 1), n_permutations=100)
    assert rep.n_samples == 60
    assert rep.get("orientation").n_used == 50 and rep.get("orientation").n_excluded == 10


def test_factor_analysis_length_mismatch():
    with pytest.raises(DataError):
        factor_analysis([], [0.5])


# ------------------------------------------------------------------ rerank

@pytest.mark.parametrize("score,expected", [(0.0, "low"), (0.5, "low"), (0.5000001, "medium"),
                                            (0.6999, "medium"), (0.7, "high"), (1.0, "high")])
def test_category_boundaries(score, expected):
    assert categorize(score) == expected


def test_single_item_improvement():
    rep = summarize_rerank([("a", 0.34, [("a.c0", 0.59)])])
    overall = rep.categories[-1]
    assert overall.category == "overall"
    assert overall.improvement_pct == pytest.approx(73.5294117647, abs=1e-6)
    assert rep.items[0].category == "low" and rep.items[0].chosen_id == "a.c0"


def test_identical_candidate_gives_zero_improvement():
    rep = summarize_rerank([("a", 0.61, [("a", 0.61)])])
    assert rep.categories[-1].improvement_pct == 0.0


def test_best_is_argmax_with_ties_to_smallest_id():
    rep = summarize_rerank([("a", 0.2, [("x", 0.3), ("z", 0.9), ("y", 0.9), ("w", 0.1)])])
    assert rep.items[0].chosen_id == "y" and rep.items[0].best_score == 0.9


def test_categories_partition_items():
    rng = np.random.default_rng(0)
    scored = [(f"i{k}", float(s), [(f"i{k}.c", float(rng.random()))]) for k, s in enumerate(rng.random(200))]
    rep = summarize_rerank(scored)
    rows = {c.category: c for c in rep.categories}
    assert rows["low"].n + rows["medium"].n + rows["high"].n == rows["overall"].n == 200


def test_improvement_nonnegative_when_original_is_a_candidate():
    rng = np.random.default_rng(1)
    scored = []
    for k in range(50):
        orig = float(rng.random())
        cands = [(f"c{j}", float(rng.random())) for j in range(3)] + [(f"i{k}", orig)]
        scored.append((f"i{k}", orig, cands))
    rep = summarize_rerank(scored)
    assert all(i.best_score >= i.original_score for i in rep.items)
    assert all(c.improvement_pct >= 0 for c in rep.categories if c.n)


def test_item_without_candidates_rejected():
    with pytest.raises(DataError):
        summarize_rerank([("a", 0.5, [])])


def test_rerank_with_model_uses_predictions():
    dims = {"video": 4, "audio": 4, "text": 5}
    spec = SyntheticSpec(dims=dims, n_candidates=3).validate()
    split = generate_split(spec, "test", 6)
    items = generate_candidates(spec, split)
    config = tiny_config(input_dims=dims)
    params = build(config, 0)
    rep = rerank(items, params, config)
    for (orig, cands), item in zip(items, rep.items):
        scores = predict(params, config, [orig, *cands])
        assert item.original_score == scores[0]
        assert item.best_score == scores[1:].max()
        assert item.chosen_id == cands[int(np.argmax(scores[1:]))].id


def test_rerank_items_from_samples_resolves_ids():
    rng = np.random.default_rng(0)
    base = random_samples(rng, 3, "b")
    orig = Sample("o", base[0].sequences, 0.5, candidates=("b0001", "b0002"))
    items = rerank_items_from_samples(base + [orig])
    assert [(o.id, [c.id for c in cs]) for o, cs in items] == [("o", ["b0001", "b0002"])]
    with pytest.raises(DataError):
        rerank_items_from_samples([Sample("o", base[0].sequences, 0.5, candidates=("nope",))])


def test_rerank_judge_needs_its_modalities():
    rng = np.random.default_rng(0)
    a, b = random_samples(rng, 2, "r")
    video_only = Sample("v", {"video": a.sequences["video"]}, 0.5)
    with pytest.raises(DataError):
        rerank([(a, [video_only])], build(tiny_config(), 0), tiny_config())


# --------------------------------------------------------------- rendering

def test_empty_rerank_renders_header_only():
    rep = summarize_rerank([])
    md = report_render(rep, "markdown").strip().splitlines()
    assert len(md) == 2 and md[0].startswith("| Category")
    assert report_render(rep, "csv").strip().count("\n") == 0


@pytest.mark.parametrize("fmt", ["csv", "json", "markdown"])
def test_rendering_is_deterministic(planted, fmt):
    samples = planted[4].samples[:120]
    preds = noisy_scores(samples, 3)
    a = report_render(factor_analysis(samples, preds, n_permutations=200), fmt)
    b = report_render(factor_analysis(samples, preds, n_permutations=200), fmt)
    assert a == b and a.endswith("\n")


def test_json_round_trip(planted):
    samples = planted[5].samples[:120]
    rep = factor_analysis(samples, noisy_scores(samples, 4), n_permutations=200)
    back = report_from_dict(json.loads(report_render(rep, "json")))
    assert isinstance(back, FactorReport) and report_to_dict(back) == report_to_dict(rep)
    rr = summarize_rerank([("a", 0.34, [("b", 0.59)]), ("c", 0.8, [("d", 0.7)])])
    back = report_from_dict(json.loads(report_render(rr, "json")))
    assert isinstance(back, RerankReport) and back == rr


def test_zero_within_variance_renders_inf():
    from memfuse.data import parse_metadata

    def doc(pace, orient):
        return json.dumps({"General Video Information": {"Pace": pace, "Orientation": orient},
                           "Scene Analysis": []})
    rng = np.random.default_rng(0)
    base = random_samples(rng, 1, "z")[0]
    samples = [Sample(f"s{i}", base.sequences, 0.5, parse_metadata(doc(p, "landscape")))
               for i, p in enumerate(["slow", "slow", "fast", "fast"])]
    rep = factor_analysis(samples, [0.2, 0.2, 0.8, 0.8], n_permutations=10)
    assert rep.get("pace").statistic == float("inf")
    assert "inf" in report_render(rep, "markdown")
    assert report_from_dict(json.loads(report_render(rep, "json"))).get("pace").statistic == float("inf")


def test_unknown_format_rejected():
    with pytest.raises(ValueError):
        report_render(summarize_rerank([]), "html")
