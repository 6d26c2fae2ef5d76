"""Model configuration shared by the embedding, encoders and head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .graph import TransitionView


@dataclass
class ModelConfig:
    d: int = 64                     # per-field embedding width; node width is 4d
    heads: int = 4
    d_k: int = 16
    d_v: int = 16
    layers: int = 3
    ffn_mult: int = 4
    v_item: int = 65536
    v_cat: int = 1024
    v_time: int = 32
    max_positions: int = 2048
    profile_dim: int = 16
    mlp_hidden: tuple[int, ...] = (128, 64)
    target_heads: int = 1
    scale_logits: bool = True
    share_across_views: bool = False
    time_encoding: str = "recency"  # recency | absolute_bucket
    ln_eps: float = 1e-5
    encoder: str = "tga"            # tga | transformer
    views: tuple[str, ...] = ("item", "category", "neighbor")
    max_gap: int | None = None
    precision: str = "float32"

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.encoder not in ("tga", "transformer"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.time_encoding not in ("recency", "absolute_bucket"):
            raise ValueError(f"unknown time_encoding {self.time_encoding!r}")
        if self.target_heads < 1 or self.node_dim % self.target_heads:
            raise ValueError("target_heads must be positive and divide 4d")
        if self.encoder == "transformer" and self.node_dim % self.heads:
            raise ValueError("transformer baseline needs 4d divisible by heads")
        self.mlp_hidden = tuple(self.mlp_hidden)
        self.views = tuple(TransitionView.parse(v).label if isinstance(v, str) else TransitionView(v).label
                           for v in self.views)

    @property
    def node_dim(self) -> int:
        return 4 * self.d

    @property
    def edge_input_dim(self) -> int:
        return 2 * self.node_dim + 2 * self.d

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.node_dim

    @property
    def enabled_views(self) -> frozenset[TransitionView]:
        return frozenset(TransitionView.parse(v) for v in self.views)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp_hidden"] = list(self.mlp_hidden)
        out["views"] = list(self.views)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)
