"""Variational encoder-decoder with per-token Gaussian latents.

The encoder yields one mean vector per source token and a single shared
variance vector (pooled by multi-head attention). The decoder is a standard
Transformer decoder that cross-attends over the latent sequence.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .divergence import VARIANCE_FLOOR, GaussianSequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
CHECKPOINT_HEADER = "minotaur-ckpt-v1"


@dataclass
class ModelConfig:
    source_vocab_size: int
    target_vocab_size: int
    d: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    max_source_len: int = 64
    max_target_len: int = 64
    dropout: float = 0.1
    deterministic_bottleneck: bool = False
    ff_mult: int = 4

    def __post_init__(self):
        if self.d % self.attention_heads:
            raise ValueError("d must be divisible by attention_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("source_vocab_size", "target_vocab_size", "d", "encoder_layers",
                     "decoder_layers", "attention_heads", "max_source_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class PosteriorBatch:
    means: Tensor  # (B, T, d)
    variance: Optional[Tensor]  # (B, d); None under the deterministic bottleneck
    mask: Tensor  # (B, T) bool, True on real tokens

    def sequence(self, i: int) -> GaussianSequence:
        n = int(self.mask[i].sum())
        return GaussianSequence(self.means[i, :n], self.variance[i])


@dataclass
class EncodedBatch:
    posterior: PosteriorBatch
    z: Tensor  # (B, T, d)

    @property
    def mask(self) -> Tensor:
        return self.posterior.mask


def sinusoidal_positions(n: int, d: int) -> Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class VariancePooler(nn.Module):
    """Multi-head attention pooling of T hidden states into one positive vector."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, 1, d) * d**-0.5)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.out = nn.Linear(d, d)

    def pre_activation(self, hidden: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        q = self.query.expand(hidden.shape[0], 1, -1).to(hidden.dtype)
        kpm = None if mask is None else ~mask
        pooled, _ = self.attn(q, hidden, hidden, key_padding_mask=kpm, need_weights=False)
        return self.out(pooled[:, 0])

    def forward(self, hidden: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        return F.softplus(self.pre_activation(hidden, mask)) + VARIANCE_FLOOR


def reparameterize(means: Tensor, variance: Tensor, generator: Optional[torch.Generator] = None,
                   scale: str = "std") -> Tensor:
    """z = mu + s * eps with eps ~ N(0, I) per row.

    ``scale="std"`` uses s = sqrt(variance); ``scale="variance"`` multiplies
    eps by the variance itself, as the update is sometimes written.
    """
    if variance.dim() == means.dim() - 1:
        variance = variance.unsqueeze(-2)
    eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
    if scale == "std":
        s = variance.sqrt()
    elif scale == "variance":
        s = variance
    else:
        raise ValueError(f"unknown reparameterization scale {scale!r}")
    return means + s * eps


class LatentParser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h = cfg.d, cfg.attention_heads
        self.src_embed = nn.Embedding(cfg.source_vocab_size, d, padding_idx=PAD)
        self.tgt_embed = nn.Embedding(cfg.target_vocab_size, d, padding_idx=PAD)
        n_pos = max(cfg.max_source_len, cfg.max_target_len + 2)
        self.register_buffer("positions", sinusoidal_positions(n_pos, d), persistent=False)
        enc_layer = nn.TransformerEncoderLayer(d, h, cfg.ff_mult * d, cfg.dropout,
                                               batch_first=True, norm_first=True)
        # The final norm has no gain, so token means keep unit scale and cannot be
        # shrunk towards each other by a learned projection.
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.encoder_layers,
                                             norm=nn.LayerNorm(d, elementwise_affine=False),
                                             enable_nested_tensor=False)
        self.pooler = VariancePooler(d, h)
        dec_layer = nn.TransformerDecoderLayer(d, h, cfg.ff_mult * d, cfg.dropout,
                                               batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.decoder_layers, norm=nn.LayerNorm(d))
        self.out = nn.Linear(d, cfg.target_vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        # unit scale after the sqrt(d) multiplier, so positions are not drowned out
        for emb in (self.src_embed, self.tgt_embed):
            nn.init.normal_(emb.weight, std=d**-0.5)
            with torch.no_grad():
                emb.weight[PAD].zero_()

    # -- encoder ------------------------------------------------------------

    def _check_source(self, src: Tensor) -> None:
        if src.shape[-1] > self.cfg.max_source_len:
            raise ValueError(f"source length {src.shape[-1]} exceeds max_source_len "
                             f"{self.cfg.max_source_len}")
        if src.numel() and (src.max() >= self.cfg.source_vocab_size or src.min() < 0):
            raise ValueError("unknown source token id")

    def hidden_states(self, src: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        """Final encoder states (B, T, d) for padded source ids (B, T)."""
        self._check_source(src)
        if mask is None:
            mask = src != PAD
        x = self.src_embed(src) * math.sqrt(self.cfg.d)
        x = x + self.positions[: src.shape[1]].to(x.dtype)
        x = self.drop(x)
        return self.encoder(x, src_key_padding_mask=~mask)

    def pool_variance(self, hidden: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        return self.pooler(hidden, mask)

    def encode_batch(self, src: Tensor, mask: Optional[Tensor] = None) -> PosteriorBatch:
        if mask is None:
            mask = src != PAD
        h = self.hidden_states(src, mask)
        if self.cfg.deterministic_bottleneck:
            return PosteriorBatch(h, None, mask)
        return PosteriorBatch(h, self.pool_variance(h, mask), mask)

    def encode(self, tokens: Sequence[int]) -> GaussianSequence:
        if self.cfg.deterministic_bottleneck:
            raise ValueError("encode() needs the latent bottleneck; use encode_deterministic()")
        src = torch.as_tensor(list(tokens), dtype=torch.long)[None]
        if src.shape[1] < 1:
            raise ValueError("empty source sequence")
        post = self.encode_batch(src, torch.ones_like(src, dtype=torch.bool))
        return GaussianSequence(post.means[0], post.variance[0])

    def encode_deterministic(self, tokens: Sequence[int]) -> Tensor:
        if not self.cfg.deterministic_bottleneck:
            raise ValueError("encode_deterministic() requires deterministic_bottleneck=True")
        src = torch.as_tensor(list(tokens), dtype=torch.long)[None]
        return self.hidden_states(src, torch.ones_like(src, dtype=torch.bool))[0]

    def sample(self, post: PosteriorBatch, generator: Optional[torch.Generator] = None,
               stochastic: bool = True, scale: str = "std") -> EncodedBatch:
        if post.variance is None or not stochastic:
            return EncodedBatch(post, post.means)
        return EncodedBatch(post, reparameterize(post.means, post.variance, generator, scale))

    # -- decoder ------------------------------------------------------------

    def decode_logits(self, z: Tensor, z_mask: Optional[Tensor], tgt_in: Tensor) -> Tensor:
        """Logits (B, L, V) for decoder inputs (B, L) that start with BOS."""
        L = tgt_in.shape[1]
        y = self.tgt_embed(tgt_in) * math.sqrt(self.cfg.d)
        y = self.drop(y + self.positions[:L].to(y.dtype))
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        kpm = None if z_mask is None else ~z_mask
        h = self.decoder(y, z, tgt_mask=causal, tgt_key_padding_mask=tgt_in == PAD,
                         memory_key_padding_mask=kpm)
        return self.out(h)

    def decode_teacher_forced(self, z: Tensor, gold: Tensor, z_mask: Optional[Tensor] = None
                              ) -> Tuple[Tensor, Tensor]:
        """Teacher-forced logits and cross-entropy.

        ``gold`` holds target ids without BOS/EOS, padded with PAD. The
        returned cross-entropy is the per-example mean over gold tokens plus
        EOS, averaged over the batch. Unbatched inputs (z: T x d, gold: L)
        are accepted.
        """
        if z.dim() == 2:
            z = z[None]
            gold = torch.as_tensor(gold, dtype=torch.long)[None]
            z_mask = None if z_mask is None else z_mask[None]
        if gold.shape[1] > self.cfg.max_target_len:
            raise ValueError(f"target length {gold.shape[1]} exceeds max_target_len "
                             f"{self.cfg.max_target_len}")
        tgt_in, tgt_out = teacher_forcing_pair(gold)
        logits = self.decode_logits(z, z_mask, tgt_in)
        return logits, sequence_cross_entropy(logits, tgt_out)

    def step_log_probs(self, z: Tensor, z_mask: Optional[Tensor], prefixes: Tensor) -> Tensor:
        logits = self.decode_logits(z, z_mask, prefixes)[:, -1]
        logits[:, PAD] = float("-inf")
        logits[:, BOS] = float("-inf")
        logits[:, UNK] = float("-inf")
        return torch.log_softmax(logits, dim=-1)

    @torch.no_grad()
    def beam_decode(self, z: Tensor, beam_width: int = 5, max_len: Optional[int] = None,
                    z_mask: Optional[Tensor] = None) -> List[List[int]]:
        """Length-normalised beam search; returns target ids without BOS/EOS."""
        if z.dim() == 2:
            z = z[None]
            z_mask = None if z_mask is None else z_mask[None]
        max_len = max_len or self.cfg.max_target_len + 1
        B = z.shape[0]

        def step(prefixes: Tensor, origin: Tensor) -> Tensor:
            return self.step_log_probs(z[origin], None if z_mask is None else z_mask[origin],
                                       prefixes)

        return beam_search(step, B, BOS, EOS, beam_width, max_len)


def teacher_forcing_pair(gold: Tensor) -> Tuple[Tensor, Tensor]:
    """(BOS + gold, gold + EOS), both padded with PAD."""
    B, L = gold.shape
    lengths = (gold != PAD).sum(1)
    tgt_in = torch.full((B, L + 1), PAD, dtype=torch.long)
    tgt_out = torch.full((B, L + 1), PAD, dtype=torch.long)
    tgt_in[:, 0] = BOS
    tgt_in[:, 1:] = gold
    tgt_out[:, :L] = gold
    tgt_out[torch.arange(B), lengths] = EOS
    return tgt_in, tgt_out


def sequence_cross_entropy(logits: Tensor, tgt_out: Tensor, reduce: bool = True) -> Tensor:
    """Per-example mean token cross-entropy (PAD ignored); batch mean if ``reduce``."""
    nll = F.cross_entropy(logits.transpose(1, 2), tgt_out, ignore_index=PAD, reduction="none")
    valid = (tgt_out != PAD).to(nll.dtype)
    per_example = (nll * valid).sum(1) / valid.sum(1).clamp_min(1.0)
    return per_example.mean() if reduce else per_example


def beam_search(step_fn: Callable[[Tensor, Tensor], Tensor], batch_size: int, bos: int, eos: int,
                beam_width: int, max_len: int) -> List[List[int]]:
    """Batched beam search over ``batch_size`` independent inputs.

    ``step_fn(prefixes, origin)`` maps prefixes (N, t) (starting with ``bos``)
    and the batch index of each row to next-token log-probabilities (N, V).
    Hypotheses are ranked by cumulative log-probability while searching and
    by log-probability per generated token (EOS included) at the end.
    Width 1 reduces to greedy decoding.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    W = beam_width
    seqs = torch.full((batch_size, W, 1), bos, dtype=torch.long)
    scores = torch.full((batch_size, W), float("-inf"), dtype=torch.float64)
    scores[:, 0] = 0.0
    finished: List[List[Tuple[float, List[int]]]] = [[] for _ in range(batch_size)]
    done = [False] * batch_size

    for t in range(1, max_len + 1):
        active = [b for b in range(batch_size) if not done[b]]
        if not active:
            break
        act = torch.tensor(active)
        prefixes = seqs[act].reshape(len(active) * W, t)
        origin = act.repeat_interleave(W)
        logp = step_fn(prefixes, origin).double()
        V = logp.shape[-1]
        cand = (scores[act][:, :, None] + logp.view(len(active), W, V)).view(len(active), W * V)
        k = min(2 * W, W * V)
        top_scores, top_idx = cand.topk(k, dim=1)
        top_scores, top_idx = top_scores.tolist(), top_idx.tolist()

        next_seqs = torch.full((batch_size, W, t + 1), eos, dtype=torch.long)
        next_scores = torch.full((batch_size, W), float("-inf"), dtype=torch.float64)
        for a, b in enumerate(active):
            n_live = 0
            for rank in range(k):
                s = top_scores[a][rank]
                if s == float("-inf"):
                    break
                beam, tok = divmod(top_idx[a][rank], V)
                if tok == eos:
                    if rank < W:
                        finished[b].append((s / t, seqs[b, beam, 1:].tolist()))
                    continue
                if t == max_len:
                    if n_live < W:
                        finished[b].append((s / t, seqs[b, beam, 1:].tolist() + [tok]))
                        n_live += 1
                    continue
                if n_live < W:
                    next_seqs[b, n_live, :t] = seqs[b, beam]
                    next_seqs[b, n_live, t] = tok
                    next_scores[b, n_live] = s
                    n_live += 1
            if len(finished[b]) >= W or n_live == 0:
                done[b] = True
        seqs, scores = next_seqs, next_scores
    return [max(f, key=lambda x: x[0])[1] if f else [] for f in finished]


def save_checkpoint(path, model: LatentParser, source_vocab: Sequence[str],
                    target_vocab: Sequence[str], extra: Optional[dict] = None) -> None:
    """Write a single-file checkpoint atomically (temp file + rename)."""
    payload = {
        "header": CHECKPOINT_HEADER,
        "model_config": asdict(model.cfg),
        "source_vocab": list(source_vocab),
        "target_vocab": list(target_vocab),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Tuple[LatentParser, List[str], List[str], dict]:
    payload = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("header") != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint")
    model = LatentParser(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["source_vocab"], payload["target_vocab"], payload["extra"]
