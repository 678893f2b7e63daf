"""Encoder/decoder set-prediction model over trajectory-density sequences.

The encoder embeds each input vector linearly, adds learnable lookup-table
encodings for the time step, the within-trajectory step and the sensor
index, and runs a pre-norm self-attention stack.  A scalar scoring head
selects the top-k encoder outputs as initial position guesses and object
queries; the decoder refines the state estimate additively at every layer
and emits existence probabilities and Cholesky-parameterized covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dataprep import NormalizationBounds
from ..outputs import BernoulliComponent, FusionOutput


@dataclass
class EmbeddingConfig:
    model_dim: int = 256
    max_time: int = 10
    max_traj_index: int = 10
    num_sensors: int = 3
    input_dim: int = 15

    def __post_init__(self):
        if self.model_dim <= 0:
            raise ValueError("model_dim must be positive")


@dataclass
class NetConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    ffn_dim: int = 512
    num_queries: int = 16
    dropout: float = 0.0
    sigma_origin: float = 0.1  # covariance scale at the head origin

    def __post_init__(self):
        for name in ("encoder_layers", "decoder_layers", "attention_heads",
                     "ffn_dim", "num_queries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class AttentionRecord:
    """Per decoder layer: cross-attention weights (queries, positions)."""
    layers: list[np.ndarray] = field(default_factory=list)


class Attention(nn.Module):
    """Multi-head attention with an optional explicit-softmax path that
    exposes the (head-averaged) attention weights."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("model_dim must be divisible by attention heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def _shape(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor,
                value: torch.Tensor,
                key_padding_mask: torch.Tensor | None = None,
                need_weights: bool = False
                ) -> tuple[torch.Tensor, torch.Tensor | None]:
        B, Lq, dim = query.shape
        q = self._shape(self.q_proj(query))
        k = self._shape(self.k_proj(key))
        v = self._shape(self.v_proj(value))
        attn_mask = None
        if key_padding_mask is not None:
            # True marks valid positions
            attn_mask = key_padding_mask[:, None, None, :]
        if need_weights:
            scores = q @ k.transpose(-2, -1) / np.sqrt(self.head_dim)
            if attn_mask is not None:
                scores = scores.masked_fill(~attn_mask, float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            out = weights @ v
            avg_weights = weights.mean(dim=1)
        else:
            out = F.scaled_dot_product_attention(
                q, k, v, attn_mask=attn_mask,
                dropout_p=self.dropout if self.training else 0.0)
            avg_weights = None
        out = out.transpose(1, 2).reshape(B, Lq, dim)
        return self.out_proj(out), avg_weights


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(self.drop(F.relu(self.lin1(x))))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn, dropout)

    def forward(self, x: torch.Tensor,
                mask: torch.Tensor | None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_padding_mask=mask)[0]
        x = x + self.ffn(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    """Pre-norm query self-attention, cross-attention and feed-forward,
    plus a refinement head emitting an additive state offset."""

    def __init__(self, dim: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads, dropout)
        self.cross_attn = Attention(dim, heads, dropout)
        self.ffn = FeedForward(dim, ffn, dropout)
        self.refine = nn.Linear(dim, 4)
        nn.init.zeros_(self.refine.weight)
        nn.init.zeros_(self.refine.bias)

    def forward(self, q: torch.Tensor, memory: torch.Tensor,
                mask: torch.Tensor | None, need_weights: bool
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        h = self.norm1(q)
        q = q + self.self_attn(h, h, h)[0]
        out, weights = self.cross_attn(self.norm2(q), memory, memory,
                                       key_padding_mask=mask,
                                       need_weights=need_weights)
        q = q + out
        q = q + self.ffn(self.norm3(q))
        offset = self.refine(q)
        return q, offset, weights


@dataclass
class ModelOutput:
    existence: torch.Tensor      # (B, k)
    mean: torch.Tensor           # (B, k, 4)
    chol: torch.Tensor           # (B, k, 4, 4) lower-triangular factor
    init_state: torch.Tensor     # (B, k, 4) selection-derived start
    offsets: list[torch.Tensor]  # per decoder layer, (B, k, 4)
    selected: torch.Tensor       # (B, k) selected input positions
    attention: list[torch.Tensor] | None  # per layer, (B, k, L)

    def covariance(self) -> torch.Tensor:
        return self.chol @ self.chol.transpose(-1, -2)


class FusionModel(nn.Module):
    def __init__(self, emb_cfg: EmbeddingConfig, net_cfg: NetConfig):
        super().__init__()
        self.emb_cfg = emb_cfg
        self.net_cfg = net_cfg
        d = emb_cfg.model_dim
        self.input_proj = nn.Linear(emb_cfg.input_dim, d)
        # index 0 is reserved for padding
        self.time_table = nn.Embedding(emb_cfg.max_time + 1, d, padding_idx=0)
        self.traj_table = nn.Embedding(emb_cfg.max_traj_index + 1, d,
                                       padding_idx=0)
        self.sensor_table = nn.Embedding(emb_cfg.num_sensors + 1, d,
                                         padding_idx=0)
        for table in (self.time_table, self.traj_table, self.sensor_table):
            nn.init.normal_(table.weight, std=0.02)
            with torch.no_grad():
                table.weight[0].zero_()
        self.encoder = nn.ModuleList([
            EncoderBlock(d, net_cfg.attention_heads, net_cfg.ffn_dim,
                         net_cfg.dropout)
            for _ in range(net_cfg.encoder_layers)
        ])
        self.score_head = nn.Linear(d, 1)
        self.query_proj = nn.Linear(d, d)
        self.decoder = nn.ModuleList([
            DecoderBlock(d, net_cfg.attention_heads, net_cfg.ffn_dim,
                         net_cfg.dropout)
            for _ in range(net_cfg.decoder_layers)
        ])
        self.final_norm = nn.LayerNorm(d)
        self.existence_head = nn.Linear(d, 1)
        self.cov_head = nn.Linear(d, 10)
        nn.init.zeros_(self.cov_head.weight)
        nn.init.zeros_(self.cov_head.bias)
        tril = torch.tril_indices(4, 4, offset=-1)
        self.register_buffer("_tril_rows", tril[0], persistent=False)
        self.register_buffer("_tril_cols", tril[1], persistent=False)

    def embed(self, values: torch.Tensor, times: torch.Tensor,
              steps: torch.Tensor, sensors: torch.Tensor) -> torch.Tensor:
        """Linear input map plus the three positional lookup tables."""
        if int(times.max()) > self.emb_cfg.max_time:
            raise ValueError("time index exceeds embedding table size")
        if int(steps.max()) > self.emb_cfg.max_traj_index:
            raise ValueError("trajectory index exceeds embedding table size")
        if int(sensors.max()) > self.emb_cfg.num_sensors:
            raise ValueError("sensor index exceeds embedding table size")
        return (self.input_proj(values) + self.time_table(times)
                + self.traj_table(steps) + self.sensor_table(sensors))

    def encode(self, embedded: torch.Tensor,
               mask: torch.Tensor | None = None) -> torch.Tensor:
        if embedded.shape[1] == 0:
            raise ValueError("encoder input must be nonempty")
        x = embedded
        for block in self.encoder:
            x = block(x, mask)
        return x

    def select_queries(self, encoded: torch.Tensor, values: torch.Tensor,
                       mask: torch.Tensor | None
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Top-k scored encoder outputs.

        Returns (initial positions (B,k,2), object queries (B,k,d),
        selected indices (B,k)).  Ties break toward the lowest index; when
        k exceeds the valid length the selection repeats cyclically.
        """
        k = self.net_cfg.num_queries
        scores = self.score_head(encoded).squeeze(-1)  # (B, L)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        order = torch.argsort(-scores, dim=-1, stable=True)  # (B, L)
        B, L = scores.shape
        if mask is None:
            valid = torch.full((B,), L, device=scores.device)
        else:
            valid = mask.sum(dim=-1)
        take = torch.arange(k, device=scores.device)[None, :].expand(B, k)
        take = take % valid.clamp(min=1)[:, None]
        selected = torch.gather(order, 1, take)
        z_init = torch.gather(
            values[:, :, :2], 1, selected[:, :, None].expand(B, k, 2))
        queries = self.query_proj(torch.gather(
            encoded, 1, selected[:, :, None].expand(B, k, encoded.shape[-1])))
        return z_init, queries, selected

    def decode(self, encoded: torch.Tensor, z_init: torch.Tensor,
               queries: torch.Tensor, mask: torch.Tensor | None,
               need_weights: bool = False
               ) -> tuple[torch.Tensor, list[torch.Tensor],
                          list[torch.Tensor] | None, torch.Tensor]:
        """Iterative refinement decoding.

        Returns (final query states, per-layer offsets, attention maps,
        refined state estimates)."""
        state = torch.cat([z_init, torch.zeros_like(z_init)], dim=-1)
        offsets: list[torch.Tensor] = []
        attention: list[torch.Tensor] | None = [] if need_weights else None
        q = queries
        for block in self.decoder:
            q, offset, weights = block(q, encoded, mask, need_weights)
            offsets.append(offset)
            state = state + offset
            if need_weights:
                attention.append(weights)
        return q, offsets, attention, state

    def heads(self, q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Existence probabilities and Cholesky factors from query states."""
        h = self.final_norm(q)
        existence = torch.sigmoid(self.existence_head(h)).squeeze(-1)
        raw = self.cov_head(h)
        B, k, _ = raw.shape
        sigma0 = self.net_cfg.sigma_origin
        chol = torch.diag_embed(sigma0 * torch.exp(raw[..., :4]))
        off = sigma0 * raw[..., 4:]
        chol = chol.clone()
        chol[..., self._tril_rows, self._tril_cols] = off
        return existence, chol

    def forward(self, values: torch.Tensor, times: torch.Tensor,
                steps: torch.Tensor, sensors: torch.Tensor,
                mask: torch.Tensor | None = None,
                need_weights: bool = False) -> ModelOutput:
        embedded = self.embed(values, times, steps, sensors)
        encoded = self.encode(embedded, mask)
        z_init, queries, selected = self.select_queries(encoded, values, mask)
        q, offsets, attention, state = self.decode(
            encoded, z_init, queries, mask, need_weights)
        existence, chol = self.heads(q)
        init_state = torch.cat([z_init, torch.zeros_like(z_init)], dim=-1)
        return ModelOutput(existence, state, chol, init_state, offsets,
                           selected, attention)


def infer(model: FusionModel, values: np.ndarray, times: np.ndarray,
          steps: np.ndarray, sensors: np.ndarray,
          bounds: NormalizationBounds, capture_attention: bool = False
          ) -> tuple[FusionOutput, AttentionRecord]:
    """Run one normalized sequence through the model and denormalize the
    resulting multi-Bernoulli density to world coordinates.

    An empty sequence yields an empty density (attention over zero input
    positions is undefined).
    """
    record = AttentionRecord()
    if len(values) == 0:
        return FusionOutput([]), record
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(
            torch.as_tensor(values, dtype=dtype)[None],
            torch.as_tensor(times, dtype=torch.long)[None],
            torch.as_tensor(steps, dtype=torch.long)[None],
            torch.as_tensor(sensors, dtype=torch.long)[None],
            mask=None, need_weights=capture_attention)
        existence = out.existence[0].numpy()
        means = out.mean[0].numpy()
        covs = out.covariance()[0].numpy()
    components = []
    for r, mu, cov in zip(existence, means, covs):
        components.append(BernoulliComponent(
            float(r), bounds.denormalize_state(mu),
            bounds.denormalize_cov(cov)))
    if capture_attention:
        record.layers = [w[0].numpy() for w in out.attention]
    return FusionOutput(components), record
