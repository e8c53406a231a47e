"""Divergences between Gaussian posteriors and between sample sets.

Everything here is written in torch so that the alignment terms can be
back-propagated into the encoder. Inputs may be tensors or anything
``torch.as_tensor`` accepts; results are 0-d tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

VARIANCE_FLOOR = 1e-6

DEFAULT_SCALES = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)

INDIVIDUAL_METRICS = ("w2", "kl", "l2", "stat_kl", "none")
AGGREGATE_METRICS = ("mmd", "none")


def _tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    if dtype is None and isinstance(x, np.ndarray) and x.dtype == np.float64:
        dtype = torch.float64
    return torch.as_tensor(x, dtype=dtype or torch.get_default_dtype())


def _check_finite(*xs: Tensor) -> None:
    for x in xs:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input")


@dataclass
class DiagonalGaussian:
    """N(mean, diag(variance)) for a single token position."""

    mean: Tensor
    variance: Tensor

    def __post_init__(self):
        self.mean = _tensor(self.mean)
        self.variance = _tensor(self.variance, self.mean.dtype)
        if self.mean.dim() != 1 or self.mean.numel() < 1:
            raise ValueError("mean must be a non-empty vector")
        if self.variance.shape != self.mean.shape:
            raise ValueError(
                f"mean/variance length mismatch: {self.mean.shape[0]} vs {self.variance.shape}"
            )
        if not (self.variance > 0).all():
            raise ValueError("variance must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class GaussianSequence:
    """T token means sharing one diagonal variance vector."""

    means: Tensor
    variance: Tensor

    def __post_init__(self):
        self.means = _tensor(self.means)
        self.variance = _tensor(self.variance, self.means.dtype)
        if self.means.dim() != 2 or self.means.shape[0] < 1:
            raise ValueError("means must be a T x d matrix with T >= 1")
        if self.variance.shape != (self.means.shape[1],):
            raise ValueError("variance must have length d")
        if not (self.variance > 0).all():
            raise ValueError("variance must be strictly positive")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def token(self, i: int) -> DiagonalGaussian:
        return DiagonalGaussian(self.means[i], self.variance)


@dataclass
class KernelConfig:
    """IMQ kernel scales and base constant.

    ``base=None`` means C = 2 * d * prior_variance, resolved against the
    dimension of the data the kernel is applied to.
    """

    scales: Sequence[float] = DEFAULT_SCALES
    base: Optional[float] = None
    prior_variance: float = 1.0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("kernel scales must be positive and non-empty")
        if self.base is not None and self.base <= 0:
            raise ValueError("kernel base must be positive")
        if self.prior_variance <= 0:
            raise ValueError("prior_variance must be positive")

    def resolve_base(self, dim: int) -> float:
        if self.base is not None:
            return float(self.base)
        return 2.0 * dim * self.prior_variance


@dataclass
class AlignmentConfig:
    individual_metric: str = "w2"
    aggregate_metric: str = "mmd"
    alpha_P: float = 0.01
    beta_P: float = 0.5
    alpha_prior: float = 1.0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    # printed-equation compatibility for the KL mean term
    kl_printed_form: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        self.individual_metric = self.individual_metric.lower()
        self.aggregate_metric = self.aggregate_metric.lower()
        if self.individual_metric not in INDIVIDUAL_METRICS:
            raise ValueError(f"unknown individual metric {self.individual_metric!r}")
        if self.aggregate_metric not in AGGREGATE_METRICS:
            raise ValueError(f"unknown aggregate metric {self.aggregate_metric!r}")
        for name in ("alpha_P", "beta_P", "alpha_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def enabled(self) -> bool:
        """True when the cross-lingual term can be nonzero."""
        indiv = self.individual_metric != "none" and self.beta_P > 0
        agg = self.aggregate_metric != "none" and self.alpha_P > 0
        return indiv or agg


# ---------------------------------------------------------------------------
# kernels and MMD


def _sq_dists(p: Tensor, q: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows of p and q."""
    pp = (p * p).sum(-1, keepdim=True)
    qq = (q * q).sum(-1, keepdim=True)
    d = pp + qq.transpose(-1, -2) - 2.0 * p @ q.transpose(-1, -2)
    return d.clamp_min(0.0)


def _imq_from_sq(sq: Tensor, scales: Sequence[float], base: float) -> Tensor:
    out = torch.zeros_like(sq)
    for s in scales:
        sc = s * base
        out = out + sc / (sc + sq)
    return out


def imq_kernel(p, q, cfg: Optional[KernelConfig] = None) -> Tensor:
    """sum_s sC / (sC + ||p - q||^2) for two vectors."""
    cfg = cfg or KernelConfig()
    p = _tensor(p)
    q = _tensor(q, p.dtype)
    if p.shape != q.shape or p.dim() != 1:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    _check_finite(p, q)
    sq = ((p - q) ** 2).sum()
    return _imq_from_sq(sq, cfg.scales, cfg.resolve_base(p.shape[0]))


def imq_kernel_matrix(p: Tensor, q: Tensor, cfg: Optional[KernelConfig] = None) -> Tensor:
    cfg = cfg or KernelConfig()
    return _imq_from_sq(_sq_dists(p, q), cfg.scales, cfg.resolve_base(p.shape[-1]))


def _as_samples(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if len(x) and isinstance(x[0], Tensor):
        return torch.stack(list(x))
    return _tensor(x)


def mmd_unbiased(samples_p, samples_q, cfg: Optional[KernelConfig] = None) -> Tensor:
    """Unbiased U-statistic estimate of squared MMD under the IMQ kernel.

    Within-set means exclude the diagonal; the cross term uses every pair.
    The estimate can be negative.
    """
    cfg = cfg or KernelConfig()
    p = _as_samples(samples_p)
    q = _as_samples(samples_q).to(p.dtype)
    if p.dim() == 1:
        p = p[:, None]
    if q.dim() == 1:
        q = q[:, None]
    n, m = p.shape[0], q.shape[0]
    if n < 2 or m < 2:
        raise ValueError("mmd_unbiased needs at least 2 samples per set")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    base = cfg.resolve_base(p.shape[1])
    k_pp = _imq_from_sq(_sq_dists(p, p), cfg.scales, base)
    k_qq = _imq_from_sq(_sq_dists(q, q), cfg.scales, base)
    k_pq = _imq_from_sq(_sq_dists(p, q), cfg.scales, base)
    within_p = (k_pp.sum() - k_pp.diagonal().sum()) / (n * (n - 1))
    within_q = (k_qq.sum() - k_qq.diagonal().sum()) / (m * (m - 1))
    return within_p + within_q - 2.0 * k_pq.mean()


# ---------------------------------------------------------------------------
# closed-form Gaussian divergences


def _pair(p: DiagonalGaussian, q: DiagonalGaussian):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return (
        p.mean,
        p.variance.clamp_min(VARIANCE_FLOOR),
        q.mean.to(p.mean.dtype),
        q.variance.to(p.mean.dtype).clamp_min(VARIANCE_FLOOR),
    )


def w2_diag(p: DiagonalGaussian, q: DiagonalGaussian) -> Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    With commuting covariances the trace term is sum_i (sigma_p,i - sigma_q,i)^2.
    """
    mp, vp, mq, vq = _pair(p, q)
    return ((mp - mq) ** 2).sum() + ((vp.sqrt() - vq.sqrt()) ** 2).sum()


def kl_diag(p: DiagonalGaussian, q: DiagonalGaussian, printed_form: bool = False) -> Tensor:
    """KL(p || q) for diagonal Gaussians.

    ``printed_form`` weights the squared mean gap by var_q instead of 1/var_q.
    """
    mp, vp, mq, vq = _pair(p, q)
    gap = (mq - mp) ** 2
    mean_term = gap * vq if printed_form else gap / vq
    return 0.5 * (torch.log(vq / vp) - 1.0 + vp / vq + mean_term).sum()


def _masked_pair_mean(cost: Tensor, mask_a: Optional[Tensor], mask_b: Optional[Tensor]) -> Tensor:
    # cost: (B, Ta, Tb)
    if mask_a is None and mask_b is None:
        return cost.mean(dim=(-2, -1))
    B, Ta, Tb = cost.shape
    ma = torch.ones(B, Ta, dtype=cost.dtype) if mask_a is None else mask_a.to(cost.dtype)
    mb = torch.ones(B, Tb, dtype=cost.dtype) if mask_b is None else mask_b.to(cost.dtype)
    w = ma[:, :, None] * mb[:, None, :]
    return (cost * w).sum(dim=(-2, -1)) / w.sum(dim=(-2, -1))


def pairwise_token_divergence(
    mu_a: Tensor,
    var_a: Optional[Tensor],
    mu_b: Tensor,
    var_b: Optional[Tensor],
    metric: str,
    mask_a: Optional[Tensor] = None,
    mask_b: Optional[Tensor] = None,
    printed_form: bool = False,
) -> Tensor:
    """Batched mean over all (i, j) token pairs of metric(a_i, b_j).

    mu_*: (B, T, d); var_*: (B, d) shared per sequence (ignored for the
    deterministic metrics ``l2`` and ``stat_kl``); masks: (B, T), True = real
    token. Returns a (B,) tensor.
    """
    if mu_a.shape[-1] != mu_b.shape[-1]:
        raise ValueError(f"dimension mismatch: {mu_a.shape[-1]} vs {mu_b.shape[-1]}")
    diff = mu_a[:, :, None, :] - mu_b[:, None, :, :]  # (B, Ta, Tb, d)
    if metric == "w2":
        sa = var_a.clamp_min(VARIANCE_FLOOR).sqrt()
        sb = var_b.clamp_min(VARIANCE_FLOOR).sqrt()
        cost = (diff**2).sum(-1) + ((sa - sb) ** 2).sum(-1)[:, None, None]
    elif metric == "kl":
        va = var_a.clamp_min(VARIANCE_FLOOR)
        vb = var_b.clamp_min(VARIANCE_FLOOR)
        const = 0.5 * (torch.log(vb / va) - 1.0 + va / vb).sum(-1)
        w = vb if printed_form else 1.0 / vb
        cost = 0.5 * ((diff**2) * w[:, None, None, :]).sum(-1) + const[:, None, None]
    elif metric == "l2":
        cost = (diff**2).sum(-1)
    elif metric == "stat_kl":
        lp = torch.log_softmax(mu_a, dim=-1)[:, :, None, :]
        lq = torch.log_softmax(mu_b, dim=-1)[:, None, :, :]
        cost = (lp.exp() * (lp - lq)).sum(-1)
    else:
        raise ValueError(f"unknown individual metric {metric!r}")
    return _masked_pair_mean(cost, mask_a, mask_b)


def individual_divergence(a: GaussianSequence, b: GaussianSequence, metric: str = "w2",
                          printed_form: bool = False) -> Tensor:
    """Mean of metric(a_i, b_j) over all token pairs; KL is taken as KL(a_i || b_j)."""
    metric = metric.lower()
    if metric not in ("w2", "kl"):
        raise ValueError(f"individual_divergence takes 'w2' or 'kl', got {metric!r}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    out = pairwise_token_divergence(
        a.means[None], a.variance[None], b.means.to(a.means.dtype)[None],
        b.variance.to(a.means.dtype)[None], metric, printed_form=printed_form,
    )
    return out[0]


def aggregate_divergence(tokens_a, tokens_b, cfg: Optional[KernelConfig] = None) -> Tensor:
    """MMD between two pools of token-level latent samples."""
    return mmd_unbiased(tokens_a, tokens_b, cfg)


def combine_alignment(d_aggregate, d_individual, cfg: AlignmentConfig):
    """alpha_P * D_Z + beta_P * D_Z|X, with disabled components contributing 0."""
    total = 0.0
    if cfg.aggregate_metric != "none":
        total = total + cfg.alpha_P * d_aggregate
    if cfg.individual_metric != "none":
        total = total + cfg.beta_P * d_individual
    return total


def minotaur_divergence(en: GaussianSequence, tgt: GaussianSequence, en_batch_tokens,
                        tgt_batch_tokens, cfg: AlignmentConfig) -> Tensor:
    """Two-level alignment between an English and a target-language posterior.

    The aggregate term compares the pooled batch token samples; the
    individual term is D(tgt || en) averaged over token pairs.
    """
    zero = torch.zeros((), dtype=en.means.dtype)
    d_agg = zero
    if cfg.aggregate_metric == "mmd" and cfg.alpha_P > 0:
        d_agg = aggregate_divergence(en_batch_tokens, tgt_batch_tokens, cfg.kernel)
    d_ind = zero
    if cfg.individual_metric != "none" and cfg.beta_P > 0:
        d_ind = individual_divergence(tgt, en, cfg.individual_metric, cfg.kl_printed_form)
    return zero + combine_alignment(d_agg, d_ind, cfg)


def prior_regularizer(z_samples, n_prior: Optional[int] = None, cfg: Optional[KernelConfig] = None,
                      rng: Optional[torch.Generator] = None) -> Tensor:
    """MMD between latent samples and draws from the unit Gaussian prior."""
    z = _as_samples(z_samples)
    if z.dim() == 1:
        z = z[:, None]
    n_prior = z.shape[0] if n_prior is None else int(n_prior)
    if n_prior < 2:
        raise ValueError("n_prior must be at least 2")
    prior = torch.randn(n_prior, z.shape[1], generator=rng, dtype=z.dtype)
    return mmd_unbiased(z, prior, cfg)


def statistical_kl(p, q) -> Tensor:
    """Discrete KL between softmax-normalised raw vectors."""
    p = _tensor(p)
    q = _tensor(q, p.dtype)
    lp = torch.log_softmax(p, -1)
    lq = torch.log_softmax(q, -1)
    return (lp.exp() * (lp - lq)).sum(-1)

