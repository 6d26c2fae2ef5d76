"""Training and inference speed of the TGA encoder vs the full-attention baseline."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .events import BehaviorSequence, Candidate, Sample
from .model import Model
from .training import AdamState, adam_step

MODELS = ("tga", "transformer")
CSV_HEADER = "model,L,fwd_ms,train_ms,samples_per_s"


@dataclass
class SpeedRow:
    model: str
    seq_len: int
    fwd_ms: float | None       # None when skipped
    train_ms: float | None
    samples_per_s: float | None
    batch_size: int

    @property
    def skipped(self) -> bool:
        return self.fwd_ms is None

    def csv(self) -> str:
        if self.skipped:
            return f"{self.model},{self.seq_len},–,–,–"
        return f"{self.model},{self.seq_len},{self.fwd_ms:.3f},{self.train_ms:.3f},{self.samples_per_s:.2f}"


def bench_samples(seq_len: int, batch_size: int, profile_dim: int, seed: int = 0,
                  n_items: int = 200, n_categories: int = 10) -> list[Sample]:
    """Random fixed-length samples; every graph view is dense at these vocabularies."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(batch_size):
        items = rng.integers(0, n_items, seq_len)
        seq = BehaviorSequence(items, items % n_categories, rng.integers(0, 4, seq_len),
                               np.cumsum(rng.integers(1, 3600, seq_len)))
        out.append(Sample(rng.normal(size=profile_dim), seq, Candidate(1, 1), int(rng.integers(2))))
    return out


def attention_bytes(cfg: ModelConfig, seq_len: int, batch_size: int) -> int:
    """Rough peak size of the baseline's per-layer attention tensors (logits, weights, grads)."""
    itemsize = np.dtype(cfg.precision).itemsize
    return 4 * batch_size * cfg.heads * seq_len * seq_len * itemsize


def _time_ms(fn, repeats: int, reduce: str = "median") -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return min(times) if reduce == "min" else statistics.median(times)


def measure_ti_speed(
    cfg: ModelConfig,
    lengths: Sequence[int],
    repeats: int = 3,
    batch_size: int = 4,
    memory_cap_bytes: float = 2e9,
    models: Sequence[str] = MODELS,
    seed: int = 0,
    warmup: int = 1,
    reduce: str = "median",
) -> list[SpeedRow]:
    """Wall-time per batch of the forward pass and of one Adam step.

    ``reduce`` picks the median (default) or the minimum over ``repeats``;
    the minimum is the less noisy choice on a shared machine.

    Both encoders share the embedding and head; the baseline is skipped at
    lengths where its attention tensors would exceed ``memory_cap_bytes``.
    """
    rows = []
    for name in models:
        mcfg = replace(cfg, encoder=name, max_positions=max(cfg.max_positions, max(lengths)))
        model = Model(mcfg, seed=seed)
        state = AdamState()
        for L in lengths:
            if name == "transformer" and attention_bytes(mcfg, L, batch_size) > memory_cap_bytes:
                rows.append(SpeedRow(name, L, None, None, None, batch_size))
                continue
            batch = model.batch(bench_samples(L, batch_size, mcfg.profile_dim, seed))

            def forward():
                model.logits(batch)

            def train_step():
                model.params.zero_grad()
                with nx.Tape() as tape:
                    loss = model.loss(batch)
                tape.backward(loss, model.params)
                adam_step(model.params.values, model.params.grads, state, 0.0)

            for _ in range(warmup):
                forward()
                train_step()
            fwd = _time_ms(forward, repeats, reduce)
            trn = _time_ms(train_step, repeats, reduce)
            rows.append(SpeedRow(name, L, fwd, trn, batch_size / (trn / 1e3), batch_size))
    return rows


def speed_csv(rows: Sequence[SpeedRow]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"


def _fmt(x: float | None) -> str:
    return "–" if x is None or not math.isfinite(x) else f"{x:.2f}"


def ratio_table(rows: Sequence[SpeedRow]) -> str:
    """Two views of the same timings.

    * scaling: train time at 2L over train time at L, per model;
    * relative: each model's train time over TGA's at the same L (TGA/TGA = 1).
    """
    by = {(r.model, r.seq_len): r for r in rows}
    models = list(dict.fromkeys(r.model for r in rows))
    lengths = sorted({r.seq_len for r in rows})
    lines = ["scaling: train_ms(2L) / train_ms(L)", "model,L->2L,fwd_ratio,train_ratio"]
    for m in models:
        for L in lengths:
            a, b = by.get((m, L)), by.get((m, 2 * L))
            if a is None or b is None:
                continue
            fr = b.fwd_ms / a.fwd_ms if not (a.skipped or b.skipped) else None
            tr = b.train_ms / a.train_ms if not (a.skipped or b.skipped) else None
            lines.append(f"{m},{L}->{2 * L},{_fmt(fr)},{_fmt(tr)}")
    lines += ["", "relative: train_ms(model) / train_ms(tga)", "L," + ",".join(models)]
    for L in lengths:
        ref = by.get(("tga", L))
        cells = []
        for m in models:
            r = by.get((m, L))
            ok = ref is not None and r is not None and not (ref.skipped or r.skipped)
            cells.append(_fmt(r.train_ms / ref.train_ms if ok else None))
        lines.append(f"{L}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def scaling_ratios(rows: Sequence[SpeedRow], model: str, field: str = "train_ms") -> dict[int, float]:
    """``{L: t(2L) / t(L)}`` for the lengths measured at both L and 2L."""
    by = {r.seq_len: r for r in rows if r.model == model and not r.skipped}
    return {L: getattr(by[2 * L], field) / getattr(by[L], field) for L in sorted(by) if 2 * L in by}


def parity_report(cfg: ModelConfig) -> str:
    """Parameter counts of both encoders under ``cfg``, by component."""
    lines = ["model,embedding,encoder,head,total"]
    for name in MODELS:
        counts = Model(replace(cfg, encoder=name)).num_parameters()
        lines.append(f"{name},{counts['embedding']},{counts['encoder']},{counts['head']},{counts['total']}")
    return "\n".join(lines) + "\n"
