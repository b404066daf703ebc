"""The bottleneck objective: KL compression term plus bilinear InfoNCE term.

Scores are unbounded, so ``infonce_loss`` always goes through a
max-subtracted logsumexp.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch

from .nets import GaussianPosterior, RepresentationModel, sample_posterior


@dataclass
class LossBreakdown:
    kl_term: float
    infonce_term: float
    total: float
    alpha: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def kl_upper_bound(post: GaussianPosterior, reduce: bool = True) -> torch.Tensor:
    """KL(N(mean, diag std^2) || N(0, I)) in nats, summed over latent dims.

    Batched inputs are averaged over the leading dimension when ``reduce``.
    """
    if torch.any(post.stddev <= 0):
        raise ValueError("posterior stddev must be strictly positive")
    mu, sigma = post.mean, post.stddev
    kl = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum(-1)
    if reduce and kl.dim() > 0:
        return kl.mean()
    return kl


def score_matrix(
    model: RepresentationModel,
    z: torch.Tensor,
    action: torch.Tensor,
    z_next: torch.Tensor,
) -> torch.Tensor:
    """``S[i, k] = l(m(z_i, a_i))^T omega l^-(z'_k)``.

    ``z_next`` is projected through the target projection head; callers pass
    it already detached from any online graph.
    """
    if z.shape[0] != action.shape[0] or z.shape[0] != z_next.shape[0]:
        raise ValueError("batch sizes of z, action and z_next differ")
    query = model.project(model.prediction(z, action))
    keys = model.project(z_next, target=True)
    return bilinear_scores(query, model.omega, keys)


def bilinear_scores(query: torch.Tensor, omega: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    if query.shape[-1] != omega.shape[0] or keys.shape[-1] != omega.shape[1]:
        raise ValueError("embedding dims do not match omega")
    return query @ omega @ keys.T


def infonce_loss(scores: torch.Tensor) -> torch.Tensor:
    """Mean over rows of ``-(S_ii - logsumexp_k S_ik)``; positives on the diagonal."""
    if scores.dim() != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"score matrix must be square, got {tuple(scores.shape)}")
    if scores.shape[0] < 2:
        raise ValueError("InfoNCE needs at least one negative (B >= 2)")
    row_max = scores.max(dim=1, keepdim=True).values.detach()
    shifted = scores - row_max
    lse = torch.log(torch.exp(shifted).sum(dim=1))
    return -(torch.diagonal(shifted) - lse).mean()


def mib_loss(
    model: RepresentationModel,
    image: torch.Tensor,
    proprio: torch.Tensor,
    action: torch.Tensor,
    next_image: torch.Tensor,
    next_proprio: torch.Tensor,
    alpha: float,
    generator: torch.Generator | None = None,
    j_next: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Differentiable bottleneck loss on a preprocessed (augmented) batch.

    Current observations go through the online pathway; next observations go
    through the target pathway under ``no_grad``. One reparameterized sample
    per element on each side. ``j_next`` may be passed in when the target
    joint representation was already computed for the critic target.
    """
    post = model.posterior(model.joint(image, proprio))
    noise = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
    z = sample_posterior(post, noise)
    with torch.no_grad():
        if j_next is None:
            j_next = model.joint(next_image, next_proprio, target=True)
        post_next = model.posterior(j_next, target=True)
        noise_next = torch.randn(post_next.mean.shape, generator=generator, dtype=post_next.mean.dtype)
        z_next = sample_posterior(post_next, noise_next)
    kl = kl_upper_bound(post)
    nce = infonce_loss(score_matrix(model, z, action, z_next))
    total = alpha * kl + nce
    kl_f, nce_f = kl.item(), nce.item()
    info = LossBreakdown(kl_term=kl_f, infonce_term=nce_f, total=float(alpha) * kl_f + nce_f, alpha=float(alpha))
    return total, info
