"""Deterministic mini-batch training, optimizers and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import stats
from .data import MODALITIES, Sample, iter_batches
from .errors import ConfigError, DataError, DegenerateStatisticError, DivergenceError, MemfuseError, VariantError
from .model import ATTENTION_MODES, ModelConfig, ModelParams, build, forward_batch, mse_loss, predict
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 10
    selection_metric: str = "val_spearman"
    grad_clip: float = 5.0

    def violations(self) -> list[str]:
        errs = []
        if self.epochs <= 0:
            errs.append(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            errs.append(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            errs.append(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            errs.append(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            errs.append("adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if self.early_stop_patience < 0:
            errs.append("early_stop_patience must be >= 0")
        if self.selection_metric not in ("val_mse", "val_spearman"):
            errs.append(f"selection_metric must be val_mse or val_spearman, got {self.selection_metric!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errs.append("grad_clip must be positive (or null to disable)")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.violations()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


# -------------------------------------------------------------- optimizers

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    m <- b1*m + (1-b1)*g ;  v <- b2*v + (1-b2)*g^2 ;  t <- t+1
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    if len(params) != len(state.m):
        raise DataError("adam state does not match the parameter list")
    for g in grads:
        if not np.isfinite(g).all():
            raise ArithmeticError("adam_step received non-finite gradients")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.data.shape:
            raise DataError(f"adam state shape {state.m[i].shape} != parameter shape {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], buffers: list[np.ndarray], lr: float,
             momentum: float = 0.9) -> None:
    for i, (p, g) in enumerate(zip(params, grads)):
        buffers[i] = momentum * buffers[i] + g
        p.data = p.data - lr * buffers[i]


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# ------------------------------------------------------------------ train

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_spearman: float | None
    grad_norm: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.records)

    def to_jsonl(self, with_time: bool = True) -> str:
        rows = []
        for r in self.records:
            d = asdict(r)
            if not with_time:
                d.pop("wall_time")
            rows.append(json.dumps(d, sort_keys=True))
        return "\n".join(rows) + ("\n" if rows else "")


def evaluate(params: ModelParams, config: ModelConfig, samples: Sequence[Sample]) -> dict:
    """Eval-mode Spearman rho and MSE against the samples' labels.

    Samples are scored in id order so the metrics do not depend on how the
    caller ordered them; ``predictions`` come back in the caller's order.
    """
    samples = list(samples)
    order = sorted(range(len(samples)), key=lambda i: samples[i].id)
    ordered = [samples[i] for i in order]
    sorted_preds = predict(params, config, ordered)
    labels = np.array([s.label for s in ordered], dtype=np.float64)
    preds = np.empty_like(sorted_preds)
    preds[order] = sorted_preds
    rho_mse = (sorted_preds, labels)
    try:
        rho = stats.spearman(*rho_mse)
    except DegenerateStatisticError:
        rho = None
    return {"spearman": rho, "mse": stats.mse(*rho_mse), "n": len(samples), "predictions": preds}


def _better(metric: str, value, best) -> bool:
    if best is None:
        return value is not None
    if value is None:
        return False
    return value > best if metric == "val_spearman" else value < best


def train(config: ModelConfig, params: ModelParams, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig, on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """Train ``params`` in place; return a copy of the best-by-validation parameters and the log."""
    config.validate()
    cfg.validate()
    if not train_set or not val_set:
        raise DataError("training and validation sets must be non-empty")
    overlap = {s.id for s in train_set} & {s.id for s in val_set}
    if overlap:
        raise DataError(f"train and validation share ids: {sorted(overlap)[:5]}")
    for s in list(train_set) + list(val_set):
        if s.label is None:
            raise DataError(f"sample {s.id!r} has no label")

    plist = params.parameters()
    adam = AdamState.zeros_like(plist)
    buffers = [np.zeros_like(p.data) for p in plist]
    dropout_rng = np.random.default_rng([cfg.seed, 0xD0])
    tlog = TrainLog()
    best_params, best_value, since_best = params.copy(), None, 0
    metric_key = "spearman" if cfg.selection_metric == "val_spearman" else "mse"

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, weights, norms = [], [], []
        shuffle_seed = int(np.random.default_rng([cfg.seed, epoch]).integers(2**63))
        for bi, batch in enumerate(iter_batches(train_set, cfg.batch_size, config.modalities, shuffle_seed)):
            params.zero_grad()
            with Tape() as tape:
                pred = forward_batch(params, config, batch, training=True, rng=dropout_rng)
                loss = mse_loss(pred, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, bi, value)
            tape.backward(loss, plist)
            grads = [p.grad for p in plist]
            if cfg.weight_decay:
                grads = [g + cfg.weight_decay * p.data for g, p in zip(grads, plist)]
            grads, norm = clip_global_norm(grads, cfg.grad_clip)
            if not math.isfinite(norm):
                raise DivergenceError(epoch, bi, norm)
            if cfg.optimizer == "adam":
                adam_step(plist, grads, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            else:
                sgd_step(plist, grads, buffers, cfg.learning_rate, cfg.momentum)
            losses.append(value)
            weights.append(len(batch))
            norms.append(norm)
        params.zero_grad()
        ev = evaluate(params, config, val_set)
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), ev["mse"], ev["spearman"],
                          float(np.mean(norms)), time.perf_counter() - t0)
        tlog.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.5f val_mse %.5f val_rho %s", epoch, rec.train_loss, rec.val_mse, rec.val_spearman)
        current = ev[metric_key]
        if _better(cfg.selection_metric, current, best_value):
            best_value, best_params, since_best = current, params.copy(), 0
            tlog.best_epoch = epoch
        else:
            since_best += 1
            if since_best > cfg.early_stop_patience:
                tlog.stopped_early = True
                break
    return best_params, tlog


# --------------------------------------------------------------- ablation

MODALITY_SUBSETS = (
    ("video",), ("text",), ("audio",),
    ("audio", "text"), ("video", "text"), ("video", "audio"),
    ("video", "audio", "text"),
)


def _subset_name(mods: Sequence[str]) -> str:
    return "+".join(m for m in MODALITIES if m in mods)


def ablation_variants(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The 7 modality subsets (under the base attention mode) then the 5 attention modes (all modalities)."""
    out = []
    for mods in MODALITY_SUBSETS:
        if not set(mods) <= set(base.modalities):
            raise ConfigError(f"ablation needs all three modalities; base config has {base.modalities}")
        mode = base.attention_mode
        if len(mods) == 1:
            # a lone modality has nothing to cross-attend to
            mode = {"self_and_cross": "self_only", "cross_with_average": "average_only"}.get(mode, mode)
        cfg = base.replace(modalities=list(mods), input_dims={m: base.input_dims[m] for m in mods},
                           attention_mode=mode)
        out.append((f"modality:{_subset_name(mods)}", cfg))
    for mode in ATTENTION_MODES:
        out.append((f"attention:{mode}", base.replace(attention_mode=mode)))
    return out


@dataclass
class AblationRow:
    variant: str
    spearman_rho: float | None
    mse: float
    epochs_run: int
    seed: int

    COLUMNS = ("variant", "spearman_rho", "mse", "epochs_run", "seed")


def _run_variant(args) -> tuple[float | None, float, int]:
    name, config, train_set, val_set, cfg = args
    try:
        params = build(config, cfg.seed)
        best, tlog = train(config, params, train_set, val_set, cfg)
        ev = evaluate(best, config, val_set)
    except MemfuseError as e:
        raise VariantError(name, e) from e
    return ev["spearman"], ev["mse"], tlog.epochs_run


def worker_count() -> int:
    try:
        n = int(os.environ.get("MEMFUSE_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def ablation_suite(base: ModelConfig, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig,
                   seeds: Sequence[int] | None = None, workers: int | None = None,
                   variants: Sequence[str] | None = None) -> list[AblationRow]:
    """Train every ablation variant for every seed; identical configurations are trained once."""
    base.validate()
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    plan = [(n, c) for n, c in ablation_variants(base) if variants is None or n in variants]
    jobs, keys = [], []
    cache: dict[tuple[str, int], int] = {}
    for seed in seeds:
        run_cfg = cfg.replace(seed=seed)
        for name, mc in plan:
            key = (mc.canonical_json(), seed)
            if key not in cache:
                cache[key] = len(jobs)
                jobs.append((name, mc, list(train_set), list(val_set), run_cfg))
            keys.append((name, seed, cache[key]))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            results = pool.map(_run_variant, jobs)
    else:
        results = [_run_variant(j) for j in jobs]
    return [AblationRow(name, *results[idx], seed) for name, seed, idx in keys]


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AblationRow.COLUMNS)
    for r in rows:
        rho = "" if r.spearman_rho is None else repr(r.spearman_rho)
        w.writerow([r.variant, rho, repr(r.mse), r.epochs_run, r.seed])
    return buf.getvalue()


def median_by_variant(rows: Sequence[AblationRow]) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r.variant, []).append(-1.0 if r.spearman_rho is None else r.spearman_rho)
    return {k: float(np.median(v)) for k, v in groups.items()}


def ordering_violations(medians: dict[str, float]) -> list[str]:
    """Check the expected ablation ordering on per-variant median rho.

    The trimodal model should be at least as good as every two-modality model,
    each of which should be at least as good as every single modality; the
    self_and_cross mode should match or beat average_only and max_only.
    """
    def tier(k: int) -> dict[str, float]:
        return {v: r for v, r in medians.items() if v.startswith("modality:") and v.count("+") == k - 1}

    out = []
    singles, duals, tri = tier(1), tier(2), tier(3)
    for hi, lo in ((tri, duals), (duals, singles)):
        for a, ra in hi.items():
            for b, rb in lo.items():
                if ra < rb:
                    out.append(f"{a} ({ra:.4f}) < {b} ({rb:.4f})")
    full = medians.get("attention:self_and_cross")
    for other in ("attention:average_only", "attention:max_only"):
        if full is not None and other in medians and full < medians[other]:
            out.append(f"attention:self_and_cross ({full:.4f}) < {other} ({medians[other]:.4f})")
    return out
