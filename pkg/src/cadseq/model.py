"""Transformer autoencoder with a dropout-view contrastive head."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from cadseq.cad_core import MAX_LEN, N_BINS, N_COMMANDS, N_PARAMS, SLOT_MASK, CommandType

N_PARAM_CLASSES = N_BINS + 1  # class 0 is the unused-slot sentinel


class NonFiniteActivation(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    max_len: int = MAX_LEN
    masked_pooling: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % N_PARAMS:
            raise ValueError(f"d_model must be divisible by {N_PARAMS}")

    def to_dict(self) -> dict:
        return asdict(self)


def tokens_from_matrix(matrix: torch.Tensor):
    """Split ``(..., N, 17)`` integer matrices into command and parameter-class
    indices (parameter value ``v`` becomes class ``v + 1``)."""
    m = torch.as_tensor(matrix, dtype=torch.long)
    return m[..., 0], m[..., 1:] + 1


class CadEmbedding(nn.Module):
    """Command embedding + per-slot parameter embedding + learned position."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cmd = nn.Embedding(N_COMMANDS, d)
        self.param = nn.ModuleList(nn.Embedding(N_PARAM_CLASSES, d // N_PARAMS)
                                   for _ in range(N_PARAMS))
        self.mix = nn.Linear(d, d)
        self.pos = nn.Parameter(torch.zeros(cfg.max_len, d))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, cmd: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        if cmd.min() < 0 or cmd.max() >= N_COMMANDS:
            raise IndexError("command index out of range")
        if params.min() < 0 or params.max() >= N_PARAM_CLASSES:
            raise IndexError("parameter class out of range")
        slots = torch.cat([emb(params[..., j]) for j, emb in enumerate(self.param)], dim=-1)
        n = cmd.shape[-1]
        return self.cmd(cmd) + self.mix(slots) + self.pos[:n]


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.h = n_heads
        self.dk = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)
        self.last_attn: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, mem: Optional[torch.Tensor] = None) -> torch.Tensor:
        mem = x if mem is None else mem
        b, n, d = x.shape
        m = mem.shape[1]
        q = self.q(x).view(b, n, self.h, self.dk).transpose(1, 2)
        k = self.k(mem).view(b, m, self.h, self.dk).transpose(1, 2)
        v = self.v(mem).view(b, m, self.h, self.dk).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dk)
        attn = torch.softmax(scores, dim=-1)
        self.last_attn = attn.detach()
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mem):
        x = x + self.drop(self.self_attn(self.ln1(x)))
        x = x + self.drop(self.cross_attn(self.ln2(x), mem))
        return x + self.drop(self.ff(self.ln3(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = CadEmbedding(cfg)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln = nn.LayerNorm(cfg.d_model)

    def forward(self, cmd, params):
        h = self.drop(self.embed(cmd, params))
        for blk in self.blocks:
            h = blk(h)
        h = self.ln(h)
        if self.cfg.masked_pooling:
            keep = _content_mask(cmd).unsqueeze(-1).to(h.dtype)
            return (h * keep).sum(1) / keep.sum(1)
        return h.mean(dim=1)


def _content_mask(cmd: torch.Tensor) -> torch.Tensor:
    """True up to and including the first EOS of each row."""
    is_eos = (cmd == CommandType.EOS).long()
    return torch.cumsum(is_eos, dim=-1) - is_eos == 0


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.zeros(cfg.max_len, cfg.d_model))
        nn.init.normal_(self.queries, std=0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.cmd_head = nn.Linear(cfg.d_model, N_COMMANDS)
        self.param_head = nn.Linear(cfg.d_model, N_PARAMS * N_PARAM_CLASSES)

    def forward(self, z):
        b = z.shape[0]
        mem = z.unsqueeze(1)
        x = self.queries.unsqueeze(0).expand(b, -1, -1)
        for blk in self.blocks:
            x = blk(x, mem)
        x = self.ln(x)
        cmd_logits = self.cmd_head(x)
        param_logits = self.param_head(x).view(b, self.cfg.max_len, N_PARAMS, N_PARAM_CLASSES)
        return cmd_logits, param_logits


class SequenceAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def encode(self, matrix) -> torch.Tensor:
        cmd, params = tokens_from_matrix(matrix)
        z = self.encoder(cmd, params)
        if not torch.isfinite(z).all():
            raise NonFiniteActivation("encoder produced non-finite latents")
        return z

    def decode(self, z: torch.Tensor):
        if not torch.isfinite(z).all():
            raise NonFiniteActivation("non-finite latent passed to decoder")
        return self.decoder(z)

    def project_and_mask(self, z: torch.Tensor, p: Optional[float] = None,
                         generator: Optional[torch.Generator] = None):
        p = self.cfg.dropout if p is None else p
        return project_and_mask(self.proj(z), p, generator)

    def forward(self, matrix):
        z = self.encode(matrix)
        return z, self.decode(z)


# ---------------------------------------------------------------------------
# losses


def dropout_mask(shape, p: float, generator=None, dtype=torch.float32) -> torch.Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return torch.ones(shape, dtype=dtype)
    keep = torch.rand(shape, generator=generator) >= p
    return keep.to(dtype) / (1.0 - p)


def project_and_mask(z_proj: torch.Tensor, p: float, generator=None):
    """Two independent inverted-dropout views of already projected latents."""
    m1 = dropout_mask(z_proj.shape, p, generator, z_proj.dtype)
    m2 = dropout_mask(z_proj.shape, p, generator, z_proj.dtype)
    return z_proj * m1, z_proj * m2


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise ZeroDivisionError("cosine similarity of a zero vector")
    return (u * v).sum(-1) / (nu * nv)


def contrastive_loss(d_i: torch.Tensor, d_j: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """InfoNCE over the ``2m`` views; view ``i`` and ``i + m`` form a positive pair.

    The temperature divides every similarity, numerator and denominator alike.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    d = torch.cat([d_i, d_j], dim=0)
    m = d_i.shape[0]
    norms = d.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ZeroDivisionError("contrastive loss on a zero vector")
    u = d / norms
    sim = u @ u.T / tau
    self_mask = torch.eye(2 * m, dtype=torch.bool)
    sim = sim.masked_fill(self_mask, float("-inf"))
    target = torch.cat([torch.arange(m, 2 * m), torch.arange(0, m)])
    return F.cross_entropy(sim, target)


def recon_masks(target_cmd: torch.Tensor):
    """(position mask, slot mask) counted by the reconstruction loss: every row
    up to and including the first EOS, and every slot of those rows."""
    pos = _content_mask(target_cmd)
    return pos, pos.unsqueeze(-1).expand(*pos.shape, N_PARAMS)


def reconstruction_loss(cmd_logits, param_logits, target, lam: float = 2.0):
    target = torch.as_tensor(target, dtype=torch.long)
    cmd, params = tokens_from_matrix(target)
    if cmd_logits.shape[:-1] != cmd.shape or param_logits.shape[:-1] != params.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(cmd_logits.shape)}/{tuple(param_logits.shape)}"
            f" vs target {tuple(target.shape)}")
    pos, slots = recon_masks(cmd)
    ce_cmd = F.cross_entropy(cmd_logits[pos], cmd[pos])
    ce_par = F.cross_entropy(param_logits[slots], params[slots])
    return ce_cmd + lam * ce_par, ce_cmd, ce_par


def total_loss(l_rec, l_cont, kappa: float = 2.0):
    return l_rec + kappa * l_cont


# ---------------------------------------------------------------------------
# decoding


_ALLOWED = torch.zeros(N_COMMANDS, N_PARAMS, N_PARAM_CLASSES, dtype=torch.bool)
for _t in range(N_COMMANDS):
    for _j in range(N_PARAMS):
        if SLOT_MASK[_t, _j]:
            _ALLOWED[_t, _j, 1:] = True
        else:
            _ALLOWED[_t, _j, 0] = True
# categorical slots: c in {0, 1}; b, w in {0, 1, 2}
for _j, _n in ((3, 2), (14, 3), (15, 3)):
    for _t in range(N_COMMANDS):
        if SLOT_MASK[_t, _j]:
            _ALLOWED[_t, _j, 1 + _n:] = False


def logits_to_matrix(cmd_logits: torch.Tensor, param_logits: torch.Tensor) -> torch.Tensor:
    """Greedy decode to ``(B, N, 17)`` token matrices.

    Parameter argmax is restricted to values legal for the predicted command,
    and every row after the first predicted EOS is forced to EOS.
    """
    cmd = cmd_logits.argmax(-1)
    allowed = _ALLOWED.to(param_logits.device)[cmd]
    masked = param_logits.masked_fill(~allowed, float("-inf"))
    params = masked.argmax(-1) - 1
    after = ~_content_mask(cmd)
    cmd = cmd.masked_fill(after, int(CommandType.EOS))
    params = params.masked_fill(after.unsqueeze(-1), -1)
    return torch.cat([cmd.unsqueeze(-1), params], dim=-1)
