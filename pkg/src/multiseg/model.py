"""Residual encoder-decoder with pluggable regularization branches.

All forward paths take batched ``(B, C, D, H, W)`` tensors internally;
:func:`model_forward` is the per-sample entry point used by the trainer.
The encoder halves the spatial extent ``levels - 1`` times, so input
extents must be divisible by ``2**(levels - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import GaussianParams
from .volgrid import Sample, SegLabel, grid_geometry

BRANCH_KINDS = (None, "vae", "boundary", "cpc")

SIGMA_FLOOR = 1e-5


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Desk-scale defaults train in minutes on a CPU; the paper-scale
    equivalents (base_filters 32, groupnorm_groups 8, crop 160x192x128,
    cpc patch 32 / overlap 16) remain valid settings of the same knobs.
    ``input_shape`` sizes the VAE branch's dense layers and is otherwise
    unused.
    """

    in_channels: int = 4
    out_channels: int = 3
    base_filters: int = 8
    levels: int = 4
    blocks_per_level: tuple[int, ...] = (1, 2, 2, 4)
    groupnorm_groups: int = 4
    branch: str | None = None
    input_shape: tuple[int, int, int] = (32, 32, 32)
    latent_dim: int = 128
    cpc_patch: tuple[int, int, int] = (16, 16, 16)
    cpc_overlap: tuple[int, int, int] = (8, 8, 8)
    cpc_negatives: int = 15
    cpc_context_blocks: int = 8

    def __post_init__(self):
        if isinstance(self.branch, str):
            self.branch = self.branch.lower()
            if self.branch in ("none", ""):
                self.branch = None
        if self.branch not in BRANCH_KINDS:
            raise ValueError(f"branch must be one of {BRANCH_KINDS}, got {self.branch!r}")
        if self.levels < 2:
            raise ValueError("levels must be at least 2")
        if self.base_filters % self.groupnorm_groups != 0:
            raise ValueError(
                f"base_filters {self.base_filters} not divisible by groupnorm_groups {self.groupnorm_groups}"
            )
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        if len(self.blocks_per_level) != self.levels:
            raise ValueError(
                f"blocks_per_level has {len(self.blocks_per_level)} entries for {self.levels} levels"
            )
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.cpc_patch = tuple(int(p) for p in self.cpc_patch)
        self.cpc_overlap = tuple(int(o) for o in self.cpc_overlap)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def endpoint_channels(self) -> int:
        return self.base_filters * 2 ** (self.levels - 1)

    def endpoint_spatial(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        f = self.downsample_factor
        for axis, n in enumerate(spatial):
            if n % f != 0:
                raise ValueError(f"axis {axis}: extent {n} not divisible by {f}")
        return tuple(n // f for n in spatial)


def encoder_endpoint_shape(
    config: ModelConfig, spatial: tuple[int, int, int]
) -> tuple[int, tuple[int, int, int]]:
    """(channels, spatial extent) of the encoder endpoint, by arithmetic."""
    return config.endpoint_channels, config.endpoint_spatial(spatial)


class ResBlock3d(nn.Module):
    """Pre-activation residual unit: x + Conv(ReLU(GN(Conv(ReLU(GN(x))))))."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.gn1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(self.gn1(x)))
        h = self.conv2(F.relu(self.gn2(h)))
        return x + h


class Encoder(nn.Module):
    """Stem conv, then per level ResBlocks and a strided conv that doubles
    channels (no downsampling after the final level)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv3d(cfg.in_channels, cfg.base_filters, 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = cfg.base_filters
        for level, n_blocks in enumerate(cfg.blocks_per_level):
            self.levels.append(
                nn.Sequential(*[ResBlock3d(ch, cfg.groupnorm_groups) for _ in range(n_blocks)])
            )
            if level < cfg.levels - 1:
                self.downs.append(nn.Conv3d(ch, ch * 2, 3, stride=2, padding=1))
                ch *= 2

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        self.cfg.endpoint_spatial(tuple(x.shape[2:]))  # reject indivisible extents
        x = self.stem(x)
        skips = []
        for level, blocks in enumerate(self.levels):
            x = blocks(x)
            if level < self.cfg.levels - 1:
                skips.append(x)
                x = self.downs[level](x)
        return x, skips


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


class Decoder(nn.Module):
    """Mirrors the encoder: 1x1x1 conv halving channels, trilinear x2
    upsample, additive skip, one ResBlock; sigmoid head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.reduces = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = cfg.endpoint_channels
        for _ in range(cfg.levels - 1):
            self.reduces.append(nn.Conv3d(ch, ch // 2, 1))
            self.blocks.append(ResBlock3d(ch // 2, cfg.groupnorm_groups))
            ch //= 2
        self.head = nn.Conv3d(cfg.base_filters, cfg.out_channels, 1)

    def forward(self, endpoint: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != self.cfg.levels - 1:
            raise ValueError(f"expected {self.cfg.levels - 1} skips, got {len(skips)}")
        x = endpoint
        for reduce, block, skip in zip(self.reduces, self.blocks, reversed(skips)):
            x = _up2(reduce(x))
            if x.shape != skip.shape:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match {tuple(x.shape)}")
            x = block(x + skip)
        return torch.sigmoid(self.head(x))


class VaeBranch(nn.Module):
    """Reconstruction branch through a sampled low-dimensional Gaussian.

    Endpoint -> GN/ReLU/strided conv(16) -> dense to (mu, sigma) ->
    reparameterized sample -> dense back to the endpoint shape -> upsizing
    stages mirroring the decoder -> reconstruction of the input channels.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ce = cfg.endpoint_channels
        se = cfg.endpoint_spatial(cfg.input_shape)
        if any(s % 2 for s in se):
            raise ValueError(f"VAE branch needs an even endpoint extent, got {se}")
        self.endpoint_spatial = se
        self.gn = nn.GroupNorm(cfg.groupnorm_groups, ce)
        self.reduce = nn.Conv3d(ce, 16, 3, stride=2, padding=1)
        flat = 16 * math.prod(s // 2 for s in se)
        self.to_stats = nn.Linear(flat, 2 * cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, ce * math.prod(se))
        self.reduces = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = ce
        for _ in range(cfg.levels - 1):
            self.reduces.append(nn.Conv3d(ch, ch // 2, 1))
            self.blocks.append(ResBlock3d(ch // 2, cfg.groupnorm_groups))
            ch //= 2
        self.head = nn.Conv3d(cfg.base_filters, cfg.in_channels, 1)

    def forward(self, endpoint: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, GaussianParams]:
        b = endpoint.shape[0]
        h = self.reduce(F.relu(self.gn(endpoint))).reshape(b, -1)
        stats = self.to_stats(h)
        mu, raw = stats.chunk(2, dim=1)
        sigma = F.softplus(raw) + SIGMA_FLOOR
        z = mu + sigma * eps
        h = F.relu(self.from_latent(z))
        h = h.reshape(b, self.cfg.endpoint_channels, *self.endpoint_spatial)
        for reduce, block in zip(self.reduces, self.blocks):
            h = block(_up2(reduce(h)))
        recon = self.head(h)
        return recon, GaussianParams(mu=mu, sigma=sigma)  # batched (B, latent)


class BoundaryBranch(nn.Module):
    """Attention-gated upsizing path predicting per-region boundary maps.

    Per stage: ResBlock, channel-halving 1x1x1 conv, trilinear upsample,
    concatenate the same-resolution encoder skip, 1x1x1 conv + sigmoid into
    an attention map that multiplies the stage features.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList()
        self.reduces = nn.ModuleList()
        self.atts = nn.ModuleList()
        ch = cfg.endpoint_channels
        for _ in range(cfg.levels - 1):
            self.blocks.append(ResBlock3d(ch, cfg.groupnorm_groups))
            self.reduces.append(nn.Conv3d(ch, ch // 2, 1))
            self.atts.append(nn.Conv3d(ch, ch // 2, 1))  # input: features + skip
            ch //= 2
        self.head = nn.Conv3d(cfg.base_filters, cfg.out_channels, 1)

    def forward(
        self, endpoint: torch.Tensor, skips: list[torch.Tensor]
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if len(skips) != self.cfg.levels - 1:
            raise ValueError(f"expected {self.cfg.levels - 1} skips, got {len(skips)}")
        x = endpoint
        attentions = []
        for block, reduce, att, skip in zip(self.blocks, self.reduces, self.atts, reversed(skips)):
            x = _up2(reduce(block(x)))
            if x.shape != skip.shape:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match {tuple(x.shape)}")
            a = torch.sigmoid(att(torch.cat([x, skip], dim=1)))
            attentions.append(a)
            x = x * a
        return torch.sigmoid(self.head(x)), attentions


class CpcContextNet(nn.Module):
    """Grid-coordinate ResBlocks over the code grid plus the per-cell
    linear prediction map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ce = cfg.endpoint_channels
        self.blocks = nn.Sequential(
            *[ResBlock3d(ce, cfg.groupnorm_groups) for _ in range(cfg.cpc_context_blocks)]
        )
        self.predict = nn.Conv3d(ce, ce, 1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.predict(self.blocks(grid))


@dataclass
class VaeAux:
    recon: torch.Tensor  # (C, D, H, W)
    gaussian: GaussianParams


@dataclass
class BoundaryAux:
    probs: torch.Tensor  # (out_channels, D, H, W)
    attentions: list[torch.Tensor] = field(default_factory=list)


@dataclass
class CpcAux:
    pred: torch.Tensor  # (n_target_cells, feat_dim)
    target: torch.Tensor  # (n_target_cells, feat_dim)
    negatives: torch.Tensor  # (n_target_cells, n_neg, feat_dim)


BranchAux = VaeAux | BoundaryAux | CpcAux


class MultiTaskSegModel(nn.Module):
    """Encoder-decoder plus the configured regularization branch."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.vae_branch = VaeBranch(cfg) if cfg.branch == "vae" else None
        self.boundary_branch = BoundaryBranch(cfg) if cfg.branch == "boundary" else None
        self.cpc_net = CpcContextNet(cfg) if cfg.branch == "cpc" else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        endpoint, skips = self.encoder(x)
        return self.decoder(endpoint, skips)


def cpc_grid_split(cfg: ModelConfig, spatial: tuple[int, int, int]) -> tuple[tuple[int, int, int], int]:
    """Grid dims and the number of context slices along the last grid axis.

    Context cells are the first ``ceil(Gk / 2)`` slices; the remainder are
    prediction targets.  A grid needs at least one of each.
    """
    dims, _ = grid_geometry(spatial, cfg.cpc_patch, cfg.cpc_overlap)
    if dims[2] < 2:
        raise ValueError(
            f"cpc grid too shallow: {dims} has no target slice (need at least 2 slices on the last axis)"
        )
    return dims, (dims[2] + 1) // 2


def _extract_patches(x: torch.Tensor, cfg: ModelConfig) -> tuple[torch.Tensor, tuple[int, int, int]]:
    """(B * P, C, *patch) patches in batch-major, (i, j, k) C-order."""
    spatial = tuple(x.shape[2:])
    dims, stride = grid_geometry(spatial, cfg.cpc_patch, cfg.cpc_overlap)
    patches = []
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                starts = (i * stride[0], j * stride[1], k * stride[2])
                window = (slice(None), slice(None)) + tuple(
                    slice(s, s + p) for s, p in zip(starts, cfg.cpc_patch)
                )
                patches.append(x[window])
    stacked = torch.stack(patches, dim=1)  # (B, P, C, *patch)
    return stacked.reshape(-1, x.shape[1], *cfg.cpc_patch), dims


def _cpc_forward(
    model: MultiTaskSegModel, x: torch.Tensor, rngs: list[np.random.Generator]
) -> list[CpcAux]:
    """CPC pipeline over a batch: encode every patch of every sample with
    the shared encoder, mask the target slices, run the grid context net,
    and draw per-sample negatives."""
    cfg = model.cfg
    b = x.shape[0]
    dims, n_context = cpc_grid_split(cfg, tuple(x.shape[2:]))
    patches, _ = _extract_patches(x, cfg)  # (B * P, C, *patch)
    endpoints, _ = model.encoder(patches)
    n_cells = int(np.prod(dims))
    z = endpoints.mean(dim=(2, 3, 4)).reshape(b, n_cells, -1)  # (B, P, feat)

    grids = z.reshape(b, *dims, -1).permute(0, 4, 1, 2, 3)  # (B, feat, Gi, Gj, Gk)
    mask = torch.zeros(1, 1, 1, 1, dims[2], dtype=z.dtype, device=z.device)
    mask[..., :n_context] = 1.0
    zhat_grids = model.cpc_net(grids * mask)

    n_neg = cfg.cpc_negatives
    if n_neg > n_cells - 1:
        raise ValueError(f"cpc_negatives {n_neg} exceeds the {n_cells - 1} other grid cells")
    target_flat_ids = [
        (i * dims[1] + j) * dims[2] + k
        for i in range(dims[0])
        for j in range(dims[1])
        for k in range(n_context, dims[2])
    ]

    out = []
    feat = z.shape[2]
    for s, rng in enumerate(rngs):
        pred = zhat_grids[s].permute(1, 2, 3, 0)[:, :, n_context:, :].reshape(-1, feat)
        target = grids[s].permute(1, 2, 3, 0)[:, :, n_context:, :].reshape(-1, feat)
        neg_rows = []
        for cell in target_flat_ids:
            candidates = np.delete(np.arange(n_cells), cell)
            neg_rows.append(rng.choice(candidates, size=n_neg, replace=False))
        negatives = z[s][torch.from_numpy(np.stack(neg_rows))]
        out.append(CpcAux(pred=pred, target=target, negatives=negatives))
    return out


def model_forward_batch(
    model: MultiTaskSegModel,
    samples: list[Sample],
    rngs: list[np.random.Generator],
    channels_last: bool = False,
) -> list[tuple[torch.Tensor, BranchAux | None]]:
    """Run same-shaped samples through the model as one batch.

    Per-sample semantics are unchanged (group normalization never mixes
    samples); batching exists because single-volume 3D convolutions
    utilize CPU cores poorly.  Returns one (seg probs, branch aux) pair
    per sample.  ``rngs`` drive the VAE latent draw and the CPC negative
    draw, one generator per sample.
    """
    cfg = model.cfg
    if len(samples) != len(rngs):
        raise ValueError("need one rng per sample")
    dtype = next(model.parameters()).dtype
    x = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.volume.data)) for s in samples]
    ).to(dtype)
    if channels_last:
        x = x.contiguous(memory_format=torch.channels_last_3d)

    endpoint, skips = model.encoder(x)
    seg = model.decoder(endpoint, skips)

    auxes: list[BranchAux | None] = [None] * len(samples)
    if cfg.branch == "vae":
        eps = torch.from_numpy(
            np.stack([rng.standard_normal(cfg.latent_dim) for rng in rngs])
        ).to(dtype)
        recon, gauss = model.vae_branch(endpoint, eps)
        auxes = [
            VaeAux(recon=recon[s], gaussian=GaussianParams(gauss.mu[s], gauss.sigma[s]))
            for s in range(len(samples))
        ]
    elif cfg.branch == "boundary":
        probs, attentions = model.boundary_branch(endpoint, skips)
        auxes = [
            BoundaryAux(probs=probs[s], attentions=[a[s] for a in attentions])
            for s in range(len(samples))
        ]
    elif cfg.branch == "cpc":
        auxes = _cpc_forward(model, x, rngs)
    return [(seg[s], auxes[s]) for s in range(len(samples))]


def model_forward(
    model: MultiTaskSegModel,
    sample: Sample,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, BranchAux | None]:
    """Run one sample through the segmentation path and the branch.

    Returns per-sample segmentation probabilities ``(out_channels, D, H, W)``
    and the branch auxiliaries (None without a branch).  The CPC branch
    re-encodes the volume patchwise; the other branches reuse the single
    encoder pass.  ``rng`` drives the VAE latent sample and the CPC
    negative draw.
    """
    return model_forward_batch(model, [sample], [rng])[0]


def predict_mask(seg_probs: torch.Tensor | np.ndarray, threshold: float = 0.5) -> SegLabel:
    """Threshold per channel, then repair nesting by OR-ing ET into TC and
    TC into WT."""
    if isinstance(seg_probs, torch.Tensor):
        seg_probs = seg_probs.detach().cpu().numpy()
    et = seg_probs[0] >= threshold
    tc = (seg_probs[1] >= threshold) | et
    wt = (seg_probs[2] >= threshold) | tc
    return SegLabel(np.stack([et, tc, wt]).astype(np.uint8))


HEAD_INIT_STD = 0.01


def _is_output_head(name: str) -> bool:
    # probability heads, attention gates, and the CPC prediction map start
    # near zero so sigmoids/logits begin uncommitted instead of saturated
    last = name.rsplit(".", 1)[-1]
    return last in ("head", "predict") or ".atts." in name


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize every parameter from one seed.

    He-normal weights for convolutions and linears (small-std for output
    heads), zero biases, unit/zero affine parameters for group norms.
    Iteration follows module definition order, so two models built from
    the same config receive identical values.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in model.named_modules():
            if isinstance(m, (nn.Conv3d, nn.Linear)):
                fan_in = m.weight.shape[1:].numel()
                std = HEAD_INIT_STD if _is_output_head(name) else math.sqrt(2.0 / fan_in)
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_model(cfg: ModelConfig, seed: int) -> MultiTaskSegModel:
    model = MultiTaskSegModel(cfg)
    init_parameters(model, seed)
    return model
