"""Embedding -> encoder -> head, wired over one `ParameterStore`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .baseline import TransformerEncoder
from .batch import Batch, make_batch
from .config import ModelConfig
from .embedding import EmbeddingLayer, NodeStates
from .encoder import TGAEncoder
from .events import Sample
from .head import PredictionHead


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = nx.ParameterStore(seed=seed, precision=cfg.precision)
        self.embedding = EmbeddingLayer(cfg, self.params)
        if cfg.encoder == "tga":
            self.encoder = TGAEncoder(cfg, self.params)
        else:
            self.encoder = TransformerEncoder(cfg, self.params)
        self.head = PredictionHead(cfg, self.params)

    def batch(self, samples: Sequence[Sample]) -> Batch:
        return make_batch(samples, self.cfg)

    def embed(self, batch: Batch) -> NodeStates:
        return self.embedding(batch.items, batch.behaviors, batch.time_idx, batch.positions)

    def encode(self, batch: Batch) -> NodeStates:
        return self.encoder(self.embed(batch), batch)

    def logits(self, batch: Batch) -> nx.Tensor:
        return self.head(self.encode(batch), batch)

    def loss(self, batch: Batch) -> nx.Tensor:
        return nx.bce_with_logits(self.logits(batch), batch.labels)

    def predict(self, batch: Batch) -> np.ndarray:
        return nx.sigmoid(self.logits(batch)).data.astype(np.float64)

    def predict_samples(self, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
        out = [self.predict(self.batch(samples[i:i + batch_size]))
               for i in range(0, len(samples), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def num_parameters(self) -> dict[str, int]:
        p = self.params
        enc = p.num_parameters("layer") + p.num_parameters("base.")
        return {
            "embedding": p.num_parameters("emb."),
            "encoder": enc,
            "head": p.num_parameters("head."),
            "total": p.num_parameters(),
        }


def predict(sample: Sample, model: Model) -> float:
    return float(model.predict(model.batch([sample]))[0])
