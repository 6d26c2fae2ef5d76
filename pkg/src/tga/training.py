"""Mini-batch training with Adam/SGD, keep-best validation, ablation switches."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .batch import make_batch
from .config import ModelConfig
from .events import Sample
from .graph import TransitionView, build_graph
from .head import Degenerate, auc, bce_loss
from .model import Model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 1
    seed: int = 0
    eval_every: int = 0        # steps between validations; 0 = once per epoch
    max_steps: int | None = None
    eval_batch_size: int = 128
    max_seconds: float | None = None     # wall-clock budget; a run cut by it is not reproducible
    enabled_views: tuple[str, ...] | None = None   # None keeps the model's views
    layers: int | None = None                       # None keeps the model's depth

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.enabled_views is not None:
            self.enabled_views = tuple(TransitionView.parse(v).label if isinstance(v, str)
                                       else TransitionView(v).label for v in self.enabled_views)

    def model_config(self, base: ModelConfig) -> ModelConfig:
        """``base`` with this run's view switches and depth applied."""
        changes = {}
        if self.enabled_views is not None:
            changes["views"] = self.enabled_views
        if self.layers is not None:
            changes["layers"] = self.layers
        return replace(base, **changes)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    for name, p in params.items():
        p -= (lr * grads[name]).astype(p.dtype, copy=False)


@dataclass
class LogRow:
    step: int
    loss: float
    valid_auc: float | None


@dataclass
class TrainResult:
    header: dict
    rows: list[LogRow]
    best_auc: float
    best_step: int
    best_params: dict[str, np.ndarray]

    def log_csv(self) -> str:
        lines = ["step,loss,valid_auc"]
        for r in self.rows:
            v = "" if r.valid_auc is None else repr(r.valid_auc)
            lines.append(f"{r.step},{r.loss!r},{v}")
        return "\n".join(lines) + "\n"


class Evaluator:
    """Fixed validation batches, compiled once."""

    def __init__(self, model: Model, samples: Sequence[Sample], batch_size: int = 512):
        self.model = model
        self.labels = np.array([s.label for s in samples])
        self.batches = [model.batch(samples[i:i + batch_size]) for i in range(0, len(samples), batch_size)]

    def scores(self) -> np.ndarray:
        out = [self.model.predict(b) for b in self.batches]
        return np.concatenate(out) if out else np.zeros(0)

    def evaluate(self) -> dict:
        scores = self.scores()
        a = auc(scores, self.labels)
        return {
            "auc": float(a),
            "n": int(len(self.labels)),
            "pos_rate": float(self.labels.mean()) if len(self.labels) else float("nan"),
            "logloss": bce_loss(scores, self.labels) if len(self.labels) else float("nan"),
        }


def _auc_value(a) -> float:
    return float("nan") if isinstance(a, Degenerate) else float(a)


def train(
    train_samples: Sequence[Sample],
    valid_samples: Sequence[Sample],
    model: Model,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    progress: Callable[[LogRow], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and return the log plus best-by-valid-AUC parameters.

    The model parameters are left at the best checkpoint when training ends.
    """
    if not train_samples:
        raise ValueError("no training samples")
    if cfg.layers is not None and cfg.layers != model.cfg.layers:
        raise ValueError(f"model has {model.cfg.layers} layers but the run asks for {cfg.layers}")
    # view switches only change which edges are built, so they apply to an existing model
    model.cfg = cfg.model_config(model.cfg)
    mcfg = model.cfg
    params = model.params
    header = {
        "model": mcfg.to_dict(),
        "train": asdict(cfg),
        "num_parameters": model.num_parameters(),
        "n_train": len(train_samples),
        "n_valid": len(valid_samples),
        "param_seed": params.seed,
    }
    log.info("run header: %s", json.dumps(header))
    started = time.perf_counter()
    graphs = [build_graph(s.sequence, mcfg.enabled_views, mcfg.max_gap) for s in train_samples]
    evaluator = Evaluator(model, valid_samples, cfg.eval_batch_size) if valid_samples else None
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()

    rows: list[LogRow] = []
    best_auc, best_step = -math.inf, 0
    best_params = params.snapshot()
    step = 0
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch

    def validate():
        nonlocal best_auc, best_step, best_params
        if evaluator is None:
            return None
        value = _auc_value(auc(evaluator.scores(), evaluator.labels))
        if value > best_auc:
            best_auc, best_step = value, step
            best_params = params.snapshot()
        return value

    done = False
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch([train_samples[i] for i in idx], mcfg, [graphs[i] for i in idx])
            params.zero_grad()
            with nx.Tape() as tape:
                loss = model.loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                norms = params.global_norms()
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
                raise TrainingDiverged(f"non-finite loss at step {step + 1}; parameter norms: {worst[:10]}")
            tape.backward(loss, params)
            if cfg.optimizer == "adam":
                adam_step(params.values, params.grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            else:
                sgd_step(params.values, params.grads, cfg.lr)
            step += 1
            valid = validate() if step % eval_every == 0 else None
            row = LogRow(step, value, valid)
            rows.append(row)
            if progress:
                progress(row)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            if cfg.max_seconds is not None and time.perf_counter() - started >= cfg.max_seconds:
                done = True
                break
        if done:
            break
    if rows and rows[-1].valid_auc is None and evaluator is not None:
        rows[-1].valid_auc = validate()

    if evaluator is not None and best_auc > -math.inf:
        params.restore(best_params)
    result = TrainResult(header, rows, best_auc, best_step, best_params)
    if out_dir is not None:
        write_run(result, params, out_dir)
    return result


def write_run(result: TrainResult, params: nx.ParameterStore, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "header.json").write_text(json.dumps(result.header, indent=2, sort_keys=True) + "\n")
    (out / "train_log.csv").write_text(result.log_csv())
    nx.save_checkpoint(out / "best.ckpt", params, {
        "model": result.header["model"],
        "best_step": result.best_step,
        "best_valid_auc": result.best_auc,
    })
