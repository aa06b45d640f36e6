"""
Attention building blocks shared by the ECMA modules, encoder and decoder

Every block keeps the residual form out = x + MLP(norm(attention(x, kv))),
with normalization inside the branch, so zeroing a block's output
projection makes it the identity.
"""

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


class AttentionMaskError(ValueError):
    """A query row has no valid key to attend to"""


def check_kv_mask(kv_mask: torch.Tensor):
    if not bool(kv_mask.any(dim=-1).all()):
        raise AttentionMaskError("every attention row needs at least one valid key")


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention with separate W^q, W^k, W^v, W^o

    Logits at invalid key positions are set to -inf before the softmax.
    kv_mask is (B, L_kv), or (B, L_q, L_kv) for per-row masks.
    """

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if hidden_dim % num_heads != 0:
            raise ValueError(f"hidden_dim {hidden_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.w_q = nn.Linear(hidden_dim, hidden_dim)
        self.w_k = nn.Linear(hidden_dim, hidden_dim)
        self.w_v = nn.Linear(hidden_dim, hidden_dim)
        self.w_o = nn.Linear(hidden_dim, hidden_dim)
        self.attn_dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def attention_weights(self, queries: torch.Tensor, keys: torch.Tensor,
                          kv_mask: torch.Tensor) -> torch.Tensor:
        """(B, H, L_q, L_kv) softmax weights"""
        q = self._split(self.w_q(queries))
        k = self._split(self.w_k(keys))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        mask = kv_mask[:, None, None, :] if kv_mask.dim() == 2 else kv_mask[:, None]
        logits = logits.masked_fill(~mask, float('-inf'))
        return logits.softmax(dim=-1)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor, kv_mask: torch.Tensor,
                values: Optional[torch.Tensor] = None) -> torch.Tensor:
        values = keys if values is None else values
        weights = self.attn_dropout(self.attention_weights(queries, keys, kv_mask))
        v = self._split(self.w_v(values))
        out = (weights @ v).transpose(1, 2).reshape(queries.shape[0], queries.shape[1], -1)
        return self.w_o(out)


class FeedForward(nn.Module):
    """Two-layer MLP of the attention blocks"""

    def __init__(self, hidden_dim: int, ffn_dim: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        ffn_dim = ffn_dim or 4 * hidden_dim
        self.fc1 = nn.Linear(hidden_dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class CrossAttentionBlock(nn.Module):
    """out = queries + MLP(LN(MultiHeadAttention(queries, keys_values)))"""

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.norm = nn.LayerNorm(hidden_dim)
        self.mlp = FeedForward(hidden_dim, dropout=dropout)
        self.dropout = nn.Dropout(dropout)

    def branch(self, queries: torch.Tensor, keys: torch.Tensor, kv_mask: torch.Tensor,
               values: Optional[torch.Tensor] = None) -> torch.Tensor:
        check_kv_mask(kv_mask)
        attended = self.dropout(self.attn(queries, keys, kv_mask, values))
        return self.dropout(self.mlp(self.norm(attended)))

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor,
                kv_mask: torch.Tensor) -> torch.Tensor:
        return queries + self.branch(queries, keys_values, kv_mask)

    def zero_output(self):
        """Make the block an exact identity"""
        nn.init.zeros_(self.mlp.fc2.weight)
        nn.init.zeros_(self.mlp.fc2.bias)


class SelfAttentionBlock(CrossAttentionBlock):
    """Encoder layer; positions are added to queries and keys only"""

    def forward(self, x: torch.Tensor, mask: torch.Tensor,
                pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        qk = x if pos is None else x + pos
        return x + self.branch(qk, qk, mask, values=x)


class QueryBlock(nn.Module):
    """
    Self-attention among a query set, then a cross-attention block

    Used for the sentence set of SS-MESM and the span queries of the decoder.
    """

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.cross = CrossAttentionBlock(hidden_dim, num_heads, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, queries: torch.Tensor, query_mask: torch.Tensor, keys_values: torch.Tensor,
                kv_mask: torch.Tensor, query_pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        qk = queries if query_pos is None else queries + query_pos
        # padded rows also see themselves so no row is all -inf
        eye = torch.eye(queries.shape[1], dtype=torch.bool, device=queries.device)
        self_mask = query_mask[:, None, :] | eye[None]
        queries = queries + self.dropout(self.self_attn(qk, qk, self_mask, values=queries))
        cross_in = queries if query_pos is None else queries + query_pos
        return queries + self.cross.branch(cross_in, keys_values, kv_mask)

    def zero_output(self):
        nn.init.zeros_(self.self_attn.w_o.weight)
        nn.init.zeros_(self.self_attn.w_o.bias)
        self.cross.zero_output()


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed (length, dim) sine/cosine position table"""
    position = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device)
                    * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, :dim // 2]
    return table.to(dtype)


def span_position_encoding(spans_cw: torch.Tensor, dim: int) -> torch.Tensor:
    """
    Sine embedding of (center, width) anchors, half the channels each

    spans_cw: (..., 2) in [0, 1]; returns (..., dim)
    """
    half = dim // 2
    freq = torch.arange(half // 2, dtype=spans_cw.dtype, device=spans_cw.device)
    freq = 10000.0 ** (2 * freq / half)
    parts = []
    for coord in spans_cw.unbind(-1):
        angles = coord[..., None] * 2 * math.pi / freq
        parts.append(torch.cat([angles.sin(), angles.cos()], dim=-1))
    emb = torch.cat(parts, dim=-1)
    if emb.shape[-1] < dim:
        emb = F.pad(emb, (0, dim - emb.shape[-1]))
    return emb


class LinearLayer(nn.Module):
    """LayerNorm -> Dropout -> Linear -> optional ReLU"""

    def __init__(self, in_dim: int, out_dim: int, layer_norm: bool = True,
                 dropout: float = 0.1, relu: bool = True):
        super().__init__()
        self.layer_norm = nn.LayerNorm(in_dim) if layer_norm else nn.Identity()
        self.net = nn.Sequential(nn.Dropout(dropout), nn.Linear(in_dim, out_dim))
        self.relu = relu

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.net(self.layer_norm(x))
        return F.relu(x) if self.relu else x


class MLP(nn.Module):
    """Plain multi-layer perceptron with ReLU between layers"""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(dims, dims[1:] + [output_dim]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x
