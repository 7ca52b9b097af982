# utils/transformer.py
"""
TriggerTune - Encoder-Decoder Transformer
Speaker-independent phonetic encoder, query-based cross-attention decoder and output heads
"""
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from models.config import ModelConfig
from utils.errors import DataError

ENCODER_PREFIXES = ("input_proj.", "encoder_blocks.", "encoder_norm.", "phoneme_head.")


def padding_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """True at padded positions (B x max_len)"""
    return torch.arange(max_len)[None, :] >= lengths[:, None]


class SinusoidalPositionalEncoding(nn.Module):
    """Fixed sine/cosine position signal added to the encoder input"""

    def __init__(self, d_model: int, max_len: int = 4096):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float64)[:, None]
        div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
        table = torch.zeros(max_len, d_model, dtype=torch.float64)
        table[:, 0::2] = torch.sin(position * div)
        table[:, 1::2] = torch.cos(position * div)[:, : d_model // 2]
        self.register_buffer("table", table, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        if T > self.table.shape[0]:
            raise DataError(f"sequence of {T} frames exceeds positional table of {self.table.shape[0]}")
        return x + self.table[:T].to(x.dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over `heads` subspaces, returning the weights"""

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                key_padding_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            query (torch.Tensor): B x Tq x d
            key (torch.Tensor): B x Tk x d
            value (torch.Tensor): B x Tk x d
            key_padding_mask (torch.Tensor, optional): B x Tk, True where the key is padding

        Returns:
            Tuple[torch.Tensor, torch.Tensor]: B x Tq x d output and B x heads x Tq x Tk weights
        """
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        B, _, Tq, _ = out.shape
        out = out.transpose(1, 2).reshape(B, Tq, self.heads * self.head_dim)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, ffn_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderBlock(nn.Module):
    """Pre-layer-norm self-attention block"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.block_dropout)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.block_dropout)
        self.dropout = nn.Dropout(cfg.block_dropout)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.attn_norm(x)
        attended, weights = self.attn(h, h, h, mask)
        x = x + self.dropout(attended)
        x = x + self.dropout(self.ffn(self.ffn_norm(x)))
        return x, weights


class DecoderBlock(nn.Module):
    """Query self-attention, cross-attention into the encoder tap, then feed-forward"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.block_dropout)
        self.cross_norm = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.block_dropout)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.block_dropout)

    def forward(self, q: torch.Tensor, memory: torch.Tensor,
                mask: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.self_norm(q)
        q = q + self.self_attn(h, h, h)[0]
        attended, weights = self.cross_attn(self.cross_norm(q), memory, memory, mask)
        q = q + attended
        q = q + self.ffn(self.ffn_norm(q))
        return q, weights


@dataclass
class EncoderOutput:
    """Per-block taps I_1..I_N (B x T' x d), phoneme log-posteriors and attention weights"""
    taps: List[torch.Tensor]
    log_posteriors: torch.Tensor
    lengths: torch.Tensor
    attention: List[torch.Tensor] = field(default_factory=list)

    def tap(self, n: int) -> torch.Tensor:
        """Representation after encoder block n (1-based)"""
        if not 1 <= n <= len(self.taps):
            raise ValueError(f"tap layer {n} outside 1..{len(self.taps)}")
        return self.taps[n - 1]


class TriggerTransformer(nn.Module):
    """
    Encoder-decoder network of the voice trigger detector

    The encoder maps stacked features to phoneme posteriors (V phonemes + blank).
    The decoder lets M trainable queries cross-attend into one encoder tap and
    concatenates them into a d*M utterance embedding, which feeds the phrase
    head, the speaker head and the metric similarity (scale a, offset b).

    Example:
        model = TriggerTransformer(ModelConfig(d_model=8, heads=2, ffn_dim=16, enc_blocks=2, tap_layer=1))
        out = model.encoder_forward(x, lengths)
        emb = model.decoder_forward(out.tap(1), lengths)
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model

        # Encoder group
        self.input_proj = nn.Linear(cfg.input_dim, d)
        self.positional = SinusoidalPositionalEncoding(d)
        self.encoder_blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.enc_blocks))
        self.encoder_norm = nn.LayerNorm(d)
        self.phoneme_head = nn.Linear(d, cfg.output_classes)

        # Decoder group
        self.queries = nn.Parameter(torch.randn(cfg.query_count, d) / math.sqrt(d))
        self.memory_norm = nn.LayerNorm(d)
        self.decoder_blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.dec_blocks))
        self.decoder_norm = nn.LayerNorm(d)
        self.phrase_head = nn.Linear(cfg.embedding_dim, 1)
        self.speaker_head = nn.Linear(cfg.embedding_dim, cfg.speaker_classes)
        self.metric_a = nn.Parameter(torch.tensor(1.0))
        self.metric_b = nn.Parameter(torch.tensor(0.0))

    # Parameter groups

    def encoder_named_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if n.startswith(ENCODER_PREFIXES))

    def decoder_named_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if not n.startswith(ENCODER_PREFIXES))

    def freeze_encoder(self) -> None:
        for _, p in self.encoder_named_parameters():
            p.requires_grad_(False)

    def encoder_frozen(self) -> bool:
        return not any(p.requires_grad for _, p in self.encoder_named_parameters())

    # Forward passes

    def encoder_forward(self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> EncoderOutput:
        """
        Run the encoder on a padded batch

        Args:
            x (torch.Tensor): B x T' x input_dim (or a single T' x input_dim sequence)
            lengths (torch.Tensor, optional): (B,) valid frames; all full length if omitted

        Returns:
            EncoderOutput: Taps after every block and log-softmax phoneme posteriors
        """
        if x.dim() == 2:
            x = x[None]
        if x.dim() != 3 or x.shape[-1] != self.cfg.input_dim:
            raise DataError(f"encoder input must be B x T x {self.cfg.input_dim}, got {tuple(x.shape)}")
        B, T, _ = x.shape
        if T < 1:
            raise DataError("encoder input is an empty sequence")
        if not torch.all(torch.isfinite(x)):
            raise DataError("encoder input contains non-finite values")
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        if torch.any(lengths < 1) or torch.any(lengths > T):
            raise DataError("sequence lengths must lie in [1, T]")
        mask = padding_mask(lengths, T) if torch.any(lengths < T) else None

        h = self.positional(self.input_proj(x))
        taps, attention = [], []
        for block in self.encoder_blocks:
            h, weights = block(h, mask)
            taps.append(h)
            attention.append(weights)
        log_posteriors = F.log_softmax(self.phoneme_head(self.encoder_norm(h)), dim=-1)
        return EncoderOutput(taps=taps, log_posteriors=log_posteriors, lengths=lengths, attention=attention)

    def decoder_forward(self, tap: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Cross-attend the trainable queries into one encoder tap

        Args:
            tap (torch.Tensor): B x T' x d (or T' x d)
            lengths (torch.Tensor, optional): (B,) valid frames

        Returns:
            torch.Tensor: B x (d * M) utterance embeddings, independent of T'
        """
        if tap.dim() == 2:
            tap = tap[None]
        if tap.dim() != 3 or tap.shape[-1] != self.cfg.d_model:
            raise DataError(f"decoder input must be B x T x {self.cfg.d_model}, got {tuple(tap.shape)}")
        B, T, _ = tap.shape
        mask = None
        if lengths is not None and torch.any(lengths < T):
            mask = padding_mask(lengths, T)
        memory = self.memory_norm(tap)
        q = self.queries[None].expand(B, -1, -1)
        for block in self.decoder_blocks:
            q, _ = block(q, memory, mask)
        return self.decoder_norm(q).reshape(B, self.cfg.embedding_dim)

    def phrase_logit(self, embedding: torch.Tensor) -> torch.Tensor:
        """Scalar keyword logit per embedding"""
        return self.phrase_head(embedding).squeeze(-1)

    def speaker_logits(self, embedding: torch.Tensor, training: bool = False,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """
        K speaker logits; in training mode inverted dropout is applied to the embedding

        Args:
            embedding (torch.Tensor): (..., d * M)
            training (bool): Apply dropout with rate cfg.speaker_dropout
            generator (torch.Generator, optional): Source of the dropout mask
        """
        rate = self.cfg.speaker_dropout
        if training and rate > 0.0:
            keep = torch.rand(embedding.shape, generator=generator, dtype=embedding.dtype) >= rate
            embedding = embedding * keep / (1.0 - rate)
        return self.speaker_head(embedding)

    def embed(self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None,
              tap_layer: Optional[int] = None) -> torch.Tensor:
        """Utterance embeddings from features through the encoder tap and decoder"""
        out = self.encoder_forward(x, lengths)
        return self.decoder_forward(out.tap(tap_layer or self.cfg.tap_layer), out.lengths)


def build_model(cfg: ModelConfig, seed: int) -> TriggerTransformer:
    """Construct a model with parameters initialised from `seed`"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TriggerTransformer(cfg)
    return model.to(torch.get_default_dtype())
