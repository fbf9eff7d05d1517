"""Differentiable training objectives and their composition.

The total objective is the Dice term plus whatever the configured
regularization branch contributes; unlabeled samples contribute the branch
term only.  Tensors with four or more dimensions are treated as
channel-first and reduced per channel, then averaged over channels.
Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .volgrid import SegLabel

DICE_EPS = 1e-7
PROB_CLAMP = 1e-7
VAE_WEIGHT = 0.1


class UnusableSampleError(ValueError):
    """Sample carries no optimizable signal (no label and no branch)."""


@dataclass
class GaussianParams:
    """Diagonal Gaussian latent: mean and strictly positive SD per dim."""

    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class LossBreakdown:
    """One sample's loss terms; ``total = dice + branch`` with absent terms
    recorded as None."""

    total: torch.Tensor
    dice: torch.Tensor | None = None
    branch: torch.Tensor | None = None
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def scalars(self) -> dict[str, float | None]:
        out = {
            "total": float(self.total.detach()),
            "dice": None if self.dice is None else float(self.dice.detach()),
            "branch": None if self.branch is None else float(self.branch.detach()),
        }
        for name, t in self.components.items():
            out[name] = float(t.detach())
        return out


def _as_channel_rows(t: torch.Tensor) -> torch.Tensor:
    """(C, -1) view: axis 0 is channels for >=4-D tensors, else one channel."""
    if t.ndim >= 4:
        return t.reshape(t.shape[0], -1)
    return t.reshape(1, -1)


def dice_loss(p_true: torch.Tensor, p_pred: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss ``1 - 2*sum(t*p) / (sum(t^2) + sum(p^2) + eps)``,
    computed per channel and averaged."""
    if p_true.shape != p_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(p_true.shape)} vs {tuple(p_pred.shape)}")
    t = _as_channel_rows(p_true)
    p = _as_channel_rows(p_pred)
    inter = (t * p).sum(dim=1)
    denom = (t * t).sum(dim=1) + (p * p).sum(dim=1) + eps
    return (1.0 - 2.0 * inter / denom).mean()


def kl_std_normal(g: GaussianParams) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)), averaged over latent dimensions."""
    if not torch.all(g.sigma > 0):
        raise ValueError("sigma must be strictly positive")
    var = g.sigma * g.sigma
    return 0.5 * (g.mu * g.mu + var - torch.log(var) - 1.0).mean()


def vae_loss(recon: torch.Tensor, target: torch.Tensor, g: GaussianParams) -> torch.Tensor:
    """``0.1 * (L2 reconstruction + KL to the standard normal)``."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    rec = ((recon - target) ** 2).mean()
    return VAE_WEIGHT * (rec + kl_std_normal(g))


def edge_weighted_bce(b_pred: torch.Tensor, b_true: torch.Tensor) -> torch.Tensor:
    """Class-balanced BCE over boundary maps.

    With ``beta`` the per-channel ratio of non-boundary voxels to total
    voxels, the per-channel loss is the weighted sum
    ``-beta * sum_{boundary} log p - (1 - beta) * sum_{non-boundary} log(1 - p)``;
    channels are averaged.
    """
    if b_pred.shape != b_true.shape:
        raise ValueError(f"shape mismatch: {tuple(b_pred.shape)} vs {tuple(b_true.shape)}")
    pred = _as_channel_rows(b_pred).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    true = _as_channel_rows(b_true)
    pos = true > 0.5
    beta = 1.0 - pos.sum(dim=1).to(pred.dtype) / pred.shape[1]
    pos_term = torch.where(pos, torch.log(pred), pred.new_zeros(())).sum(dim=1)
    neg_term = torch.where(~pos, torch.log1p(-pred), pred.new_zeros(())).sum(dim=1)
    return (-beta * pos_term - (1.0 - beta) * neg_term).mean()


def boundary_loss(b_pred: torch.Tensor, b_true: torch.Tensor) -> torch.Tensor:
    """Dice loss on the boundary maps plus the edge-weighted BCE."""
    return dice_loss(b_true, b_pred) + edge_weighted_bce(b_pred, b_true)


def infonce_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    negatives: torch.Tensor,
) -> torch.Tensor:
    """Contrastive loss summed over target cells.

    ``pred`` and ``target`` are (n_cells, dim) code vectors, ``negatives``
    is (n_cells, n_neg, dim).  Per cell the loss is the negative log of the
    softmax probability of the positive logit ``pred . target`` against the
    negative logits; logits are max-stabilized.
    """
    if pred.ndim != 2 or target.shape != pred.shape:
        raise ValueError(
            f"pred/target must both be (n_cells, dim), got {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    if negatives.ndim != 3 or negatives.shape[0] != pred.shape[0] or negatives.shape[2] != pred.shape[1]:
        raise ValueError(
            f"negatives must be (n_cells, n_neg, dim), got {tuple(negatives.shape)}"
        )
    if negatives.shape[1] == 0:
        raise ValueError("need at least one negative sample per target cell")

    pos = (pred * target).sum(dim=1)
    neg = torch.einsum("nd,nkd->nk", pred, negatives)
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos).sum()


@dataclass
class VaeTerms:
    recon: torch.Tensor
    target: torch.Tensor
    gaussian: GaussianParams


@dataclass
class BoundaryTerms:
    pred: torch.Tensor
    true: torch.Tensor


@dataclass
class CpcTerms:
    pred: torch.Tensor
    target: torch.Tensor
    negatives: torch.Tensor


BranchTerms = VaeTerms | BoundaryTerms | CpcTerms


def _label_tensor(label: SegLabel | np.ndarray | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if isinstance(label, SegLabel):
        label = label.data
    if isinstance(label, np.ndarray):
        arr = np.ascontiguousarray(label)
        if not arr.flags.writeable:
            arr = arr.copy()
        label = torch.from_numpy(arr)
    return label.to(like.dtype)


def total_loss(
    seg_pred: torch.Tensor | None,
    label: SegLabel | np.ndarray | torch.Tensor | None,
    branch_terms: BranchTerms | None,
) -> LossBreakdown:
    """Assemble one sample's objective.

    Labeled samples get Dice plus the branch term; unlabeled samples get
    the branch term only.  An unlabeled sample with no branch raises
    :class:`UnusableSampleError` (nothing to optimize).
    """
    dice = None
    if label is not None:
        if seg_pred is None:
            raise ValueError("labeled sample requires segmentation predictions")
        dice = dice_loss(_label_tensor(label, seg_pred), seg_pred)

    branch = None
    components: dict[str, torch.Tensor] = {}
    if isinstance(branch_terms, VaeTerms):
        rec = ((branch_terms.recon - branch_terms.target) ** 2).mean()
        kl = kl_std_normal(branch_terms.gaussian)
        branch = VAE_WEIGHT * (rec + kl)
        components = {"rec": rec, "kl": kl}
    elif isinstance(branch_terms, BoundaryTerms):
        bdice = dice_loss(branch_terms.true, branch_terms.pred)
        edge = edge_weighted_bce(branch_terms.pred, branch_terms.true)
        branch = bdice + edge
        components = {"boundary_dice": bdice, "edge": edge}
    elif isinstance(branch_terms, CpcTerms):
        nce = infonce_loss(branch_terms.pred, branch_terms.target, branch_terms.negatives)
        branch = nce
        components = {"infonce": nce}
    elif branch_terms is not None:
        raise TypeError(f"unknown branch terms {type(branch_terms).__name__}")

    if dice is None and branch is None:
        raise UnusableSampleError("unlabeled sample with no regularization branch")
    if dice is None:
        total = branch
    elif branch is None:
        total = dice
    else:
        total = dice + branch
    return LossBreakdown(total=total, dice=dice, branch=branch, components=components)
