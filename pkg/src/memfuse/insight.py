"""Content-factor analysis of predicted scores and predictor-as-judge reranking."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import stats
from .data import Sample
from .errors import DataError, DegenerateStatisticError
from .model import ModelConfig, ModelParams, predict

LOW_MAX = 0.5  # score <= 0.5 is "low"
HIGH_MIN = 0.7  # score >= 0.7 is "high"; medium is the open interval between


# ------------------------------------------------------------ factor analysis

@dataclass
class GroupStat:
    n: int
    mean: float | None
    sd: float | None


@dataclass
class FactorResult:
    factor: str
    kind: str  # categorical | continuous
    test: str  # anova | t_test | spearman
    status: str = "ok"  # ok | degenerate | skipped
    statistic: float | None = None
    df: list[float] | None = None
    p_value: float | None = None
    n_used: int = 0
    n_excluded: int = 0
    groups: dict[str, GroupStat] = field(default_factory=dict)
    note: str = ""


@dataclass
class FactorReport:
    n_samples: int
    factors: list[FactorResult]

    def get(self, name: str) -> FactorResult:
        for f in self.factors:
            if f.factor == name:
                return f
        raise KeyError(name)


FACTORS = ("pace", "scene_count", "orientation", "emotion_count", "duration", "color_count")


def _group_stat(values: Sequence[float]) -> GroupStat:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return GroupStat(0, None, None)
    return GroupStat(int(a.size), float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0)


def _categorical(name: str, test: str, labelled: dict[str, list[float]], tested: Sequence[str], n_excluded: int,
                 t_variant: str) -> FactorResult:
    res = FactorResult(name, "categorical", test, n_excluded=n_excluded,
                       groups={k: _group_stat(v) for k, v in labelled.items()})
    usable = [k for k in tested if len(labelled.get(k, ())) >= 2]
    res.n_used = sum(len(labelled.get(k, ())) for k in tested)
    if len(usable) < 2:
        res.status = "skipped"
        res.note = f"needs >= 2 known groups with >= 2 samples; have {usable}"
        return res
    groups = [labelled[k] for k in usable]
    try:
        if test == "t_test":
            r = stats.t_test(groups[0], groups[1], t_variant)
            res.statistic, res.df, res.p_value = r.t, [r.df], r.p_value
        else:
            a = stats.one_way_anova(groups)
            res.statistic, res.df, res.p_value = a.f_statistic, [a.df_between, a.df_within], a.p_value
    except DegenerateStatisticError as e:
        res.status, res.note = "degenerate", str(e)
        return res
    if math.isinf(res.statistic):
        res.note = "zero within-group variance"
    elif np.ptp(np.concatenate([np.asarray(g) for g in groups])) == 0:
        res.status, res.note = "degenerate", "constant predictions"
    return res


def _continuous(name: str, values: list[float], preds: list[float], n_excluded: int, n_permutations: int,
                seed: int) -> FactorResult:
    res = FactorResult(name, "continuous", "spearman", n_used=len(values), n_excluded=n_excluded)
    if len(values) < 10:
        res.status, res.note = "skipped", f"needs >= 10 known samples, have {len(values)}"
        return res
    try:
        rho, p = stats.permutation_pvalue_spearman(values, preds, n_permutations, seed)
    except DegenerateStatisticError as e:
        res.status, res.note = "degenerate", str(e)
        return res
    res.statistic, res.p_value = rho, p
    return res


def factor_analysis(samples: Sequence[Sample], predictions: Sequence[float], n_permutations: int = 10_000,
                    seed: int = 0, t_variant: str = "welch") -> FactorReport:
    """Relate predicted scores to metadata factors.

    pace (slow vs fast) and scene-count terciles use one-way ANOVA,
    orientation a two-sample t-test, and emotion count, duration and
    color-theme count Spearman rho with a permutation p-value. Samples whose
    value for a factor is unknown are excluded from that factor only.
    """
    if len(samples) != len(predictions):
        raise DataError(f"{len(samples)} samples but {len(predictions)} predictions")
    pairs = sorted(((s, float(p)) for s, p in zip(samples, predictions)), key=lambda sp: sp[0].id)
    meta = [(s.metadata, p) for s, p in pairs if s.metadata is not None]
    missing = len(pairs) - len(meta)
    factors = []

    pace = {"low": [], "medium": [], "high": []}
    for m, p in meta:
        bucket = {"slow": "low", "medium": "medium", "fast": "high"}.get(m.pace)
        if bucket:
            pace[bucket].append(p)
    known = sum(len(v) for v in pace.values())
    factors.append(_categorical("pace", "anova", pace, ("low", "high"), missing + len(meta) - known, t_variant))

    scenes = [(m.scene_count, p) for m, p in meta if m.scene_count > 0]
    scene_groups: dict[str, list[float]] = {"low": [], "mid": [], "high": []}
    if scenes:
        q1, q2 = np.quantile([c for c, _ in scenes], [1 / 3, 2 / 3])
        for c, p in scenes:
            scene_groups["low" if c <= q1 else "mid" if c <= q2 else "high"].append(p)
    factors.append(_categorical("scene_count", "anova", scene_groups, ("low", "mid", "high"),
                                len(pairs) - len(scenes), t_variant))

    orient = {"landscape": [], "portrait": []}
    for m, p in meta:
        if m.orientation in orient:
            orient[m.orientation].append(p)
    known = sum(len(v) for v in orient.values())
    factors.append(_categorical("orientation", "t_test", orient, ("landscape", "portrait"), len(pairs) - known,
                                t_variant))

    for name, attr in (("emotion_count", "distinct_emotion_count"), ("duration", "duration_seconds"),
                       ("color_count", "color_theme_count")):
        vals = [(float(getattr(m, attr)), p) for m, p in meta if getattr(m, attr) > 0]
        factors.append(_continuous(name, [v for v, _ in vals], [p for _, p in vals], len(pairs) - len(vals),
                                   n_permutations, seed))
    return FactorReport(len(pairs), factors)


# ------------------------------------------------------------------ rerank

def categorize(score: float) -> str:
    if score <= LOW_MAX:
        return "low"
    if score < HIGH_MIN:
        return "medium"
    return "high"


@dataclass
class RerankItem:
    id: str
    original_score: float
    best_score: float
    chosen_id: str
    category: str


@dataclass
class CategoryRow:
    category: str
    n: int
    original_mean: float | None
    original_sd: float | None
    best_mean: float | None
    best_sd: float | None
    improvement_pct: float | None


@dataclass
class RerankReport:
    items: list[RerankItem]
    categories: list[CategoryRow]


def _category_row(name: str, items: Sequence[RerankItem]) -> CategoryRow:
    if not items:
        return CategoryRow(name, 0, None, None, None, None, None)
    o = _group_stat([i.original_score for i in items])
    b = _group_stat([i.best_score for i in items])
    imp = 100.0 * (b.mean - o.mean) / o.mean if o.mean else None
    return CategoryRow(name, len(items), o.mean, o.sd, b.mean, b.sd, imp)


def summarize_rerank(scored: Sequence[tuple[str, float, Sequence[tuple[str, float]]]]) -> RerankReport:
    """Build a report from (item id, original score, [(candidate id, score), ...]).

    The best candidate is the highest score; ties go to the smallest candidate id.
    """
    items = []
    for item_id, orig, cands in scored:
        if not cands:
            raise DataError(f"item {item_id!r} has no candidates")
        best_id, best = min(cands, key=lambda c: (-c[1], c[0]))
        items.append(RerankItem(item_id, float(orig), float(best), best_id, categorize(orig)))
    rows = [_category_row(c, [i for i in items if i.category == c]) for c in ("low", "medium", "high")]
    rows.append(_category_row("overall", items))
    return RerankReport(items, rows)


def rerank(items: Sequence[tuple[Sample, Sequence[Sample]]], params: ModelParams, config: ModelConfig) -> RerankReport:
    """Score originals and candidates with the frozen predictor and pick the best candidate per item."""
    flat: list[Sample] = []
    for orig, cands in items:
        if not cands:
            raise DataError(f"item {orig.id!r} has no candidates")
        for s in (orig, *cands):
            missing = [m for m in config.modalities if m not in s.sequences]
            if missing:
                raise DataError(f"sample {s.id!r} lacks modalities {missing} required by the judge model")
            flat.append(s)
    scores = predict(params, config, flat) if flat else np.empty(0)
    scored, k = [], 0
    for orig, cands in items:
        orig_score = float(scores[k])
        cand_scores = [(c.id, float(scores[k + 1 + j])) for j, c in enumerate(cands)]
        k += 1 + len(cands)
        scored.append((orig.id, orig_score, cand_scores))
    return summarize_rerank(scored)


def rerank_items_from_samples(samples: Sequence[Sample]) -> list[tuple[Sample, list[Sample]]]:
    """Pair each sample listing ``candidates`` with the referenced samples."""
    by_id = {s.id: s for s in samples}
    items = []
    for s in samples:
        if not s.candidates:
            continue
        missing = [c for c in s.candidates if c not in by_id]
        if missing:
            raise DataError(f"item {s.id!r} references unknown candidates {missing}")
        items.append((s, [by_id[c] for c in s.candidates]))
    return items


# --------------------------------------------------------------- rendering

def _fmt(x, digits: int = 3) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        if 0 < abs(x) < 10 ** -digits:
            return f"{x:.2e}"
        return f"{x:.{digits}f}"
    return str(x)


def _pm(mean, sd) -> str:
    return "-" if mean is None else f"{mean:.3f} ± {sd:.3f}"


def _json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _json_restore(obj):
    if obj in ("inf", "-inf"):
        return math.inf if obj == "inf" else -math.inf
    if isinstance(obj, dict):
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    return obj


def report_to_dict(report: FactorReport | RerankReport) -> dict:
    kind = "factor_report" if isinstance(report, FactorReport) else "rerank_report"
    return {"kind": kind, **_json_safe(asdict(report))}


def report_from_dict(d: dict) -> FactorReport | RerankReport:
    d = _json_restore(dict(d))
    kind = d.pop("kind")
    if kind == "factor_report":
        factors = []
        for f in d["factors"]:
            f = dict(f)
            f["groups"] = {k: GroupStat(**g) for k, g in f["groups"].items()}
            factors.append(FactorResult(**f))
        return FactorReport(d["n_samples"], factors)
    if kind == "rerank_report":
        return RerankReport([RerankItem(**i) for i in d["items"]], [CategoryRow(**c) for c in d["categories"]])
    raise ValueError(f"unknown report kind {kind!r}")


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _md(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def report_render(report: FactorReport | RerankReport, fmt: str = "markdown") -> str:
    if fmt == "json":
        return json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"format must be csv, json or markdown, got {fmt!r}")
    if isinstance(report, RerankReport):
        if fmt == "csv":
            return _csv(["category", "n", "original_mean", "original_sd", "best_mean", "best_sd", "improvement_pct"],
                        [[c.category, c.n, c.original_mean, c.original_sd, c.best_mean, c.best_sd, c.improvement_pct]
                         for c in report.categories if report.items])
        rows = [[c.category.capitalize(), _pm(c.original_mean, c.original_sd), _pm(c.best_mean, c.best_sd),
                 "-" if c.improvement_pct is None else f"{c.improvement_pct:.2f}%"]
                for c in report.categories if report.items]
        return _md(["Category", "Original", "Reranked", "Improvement"], rows)

    def groups_text(f: FactorResult) -> str:
        return "; ".join(f"{k} {_pm(g.mean, g.sd)} (n={g.n})" for k, g in f.groups.items())

    if fmt == "csv":
        return _csv(["factor", "kind", "test", "status", "statistic", "df", "p_value", "n_used", "n_excluded", "groups"],
                    [[f.factor, f.kind, f.test, f.status, f.statistic,
                      "" if f.df is None else " ".join(_fmt(x, 2) for x in f.df), f.p_value, f.n_used, f.n_excluded,
                      groups_text(f)] for f in report.factors])
    rows = [[f.factor, f.test, f.status, _fmt(f.statistic), _fmt(f.p_value), str(f.n_used), str(f.n_excluded),
             groups_text(f) or "-"] for f in report.factors]
    return _md(["Factor", "Test", "Status", "Statistic", "p-value", "n", "Excluded", "Groups"], rows)
