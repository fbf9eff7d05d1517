"""Training loop: Adam with a poly LR schedule, the semi-supervised update
rule, checkpointing, structured logging, and a finite-difference gradient
checker.

Reproducibility scheme: all run-time randomness (epoch shuffling, per-sample
augmentation, VAE latent draws, CPC negative draws) derives from
``SeedSequence((seed, epoch, index))`` keys, never from sequential global
state, so a run is a pure function of (config, data, seed) and resuming from
a checkpoint replays the identical stream.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from . import losses, metrics
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .losses import (
    BoundaryTerms,
    CpcTerms,
    LossBreakdown,
    UnusableSampleError,
    VaeTerms,
    total_loss,
)
from .model import (
    BoundaryAux,
    BranchAux,
    CpcAux,
    ModelConfig,
    MultiTaskSegModel,
    VaeAux,
    build_model,
    model_forward,
    model_forward_batch,
    predict_mask,
)
from .volgrid import REGIONS, DatasetSplit, Sample, augment, gen_synthetic_case, normalize


class UnusableBatchError(ValueError):
    """No sample in the batch can produce a gradient."""


@dataclass
class TrainConfig:
    alpha0: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10
    checkpoint_every: int = 25
    crop_size: tuple[int, int, int] = (32, 32, 32)
    labeled_ratio: float | None = None  # optional fixed labeled fraction per batch

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.crop_size = tuple(int(c) for c in self.crop_size)
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class TrainLogRecord:
    """One optimization step; serializes as a single NDJSON line."""

    epoch: int
    step: int
    lr: float
    total: float
    dice: float | None
    branch: float | None
    components: dict[str, float]
    n_labeled: int
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    def comparable(self) -> dict:
        # wall_time is the one legitimately run-dependent field
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class EvalPoint:
    epoch: int
    split: str
    dice: dict[str, float]


@dataclass
class FitResult:
    model: MultiTaskSegModel
    model_config: ModelConfig
    train_config: TrainConfig
    log: list[TrainLogRecord]
    eval_history: list[EvalPoint]
    checkpoint_path: Path | None
    model_name: str


def lr_at_epoch(n: int, cfg: TrainConfig) -> float:
    """Poly schedule ``alpha0 * (1 - n/N)**0.9`` for epoch n of N."""
    if n < 0 or n > cfg.epochs:
        raise ValueError(f"epoch {n} outside [0, {cfg.epochs}]")
    return cfg.alpha0 * (1.0 - n / cfg.epochs) ** 0.9


def branch_uses_unlabeled(branch: str | None) -> bool:
    """Only branches whose loss needs no label can exploit unlabeled data."""
    return branch in ("vae", "cpc")


def boundary_targets(label) -> torch.Tensor:
    """Per-region boundary maps of a label, as a float tensor."""
    maps = [metrics.extract_boundary(label.data[c])[0] for c in range(label.data.shape[0])]
    return torch.from_numpy(np.stack(maps).astype(np.float32))


def _branch_terms(sample: Sample, aux: BranchAux | None):
    if isinstance(aux, VaeAux):
        target = torch.from_numpy(np.ascontiguousarray(sample.volume.data)).to(aux.recon.dtype)
        return VaeTerms(recon=aux.recon, target=target, gaussian=aux.gaussian)
    if isinstance(aux, BoundaryAux):
        return BoundaryTerms(
            pred=aux.probs, true=boundary_targets(sample.label).to(aux.probs.dtype)
        )
    if isinstance(aux, CpcAux):
        return CpcTerms(pred=aux.pred, target=aux.target, negatives=aux.negatives)
    return None


def sample_loss(
    model: MultiTaskSegModel, sample: Sample, rng: np.random.Generator
) -> LossBreakdown:
    """Forward one sample and assemble its loss terms.

    Unlabeled samples are only usable when the branch loss needs no label
    (VAE, CPC); otherwise :class:`UnusableSampleError` is raised.
    """
    if sample.label is None and not branch_uses_unlabeled(model.cfg.branch):
        raise UnusableSampleError(
            f"unlabeled sample {sample.case_id} cannot train branch {model.cfg.branch!r}"
        )
    seg, aux = model_forward(model, sample, rng)
    return total_loss(seg, sample.label, _branch_terms(sample, aux))


def train_step(
    model: MultiTaskSegModel,
    optimizer: torch.optim.Optimizer,
    batch: list[Sample],
    rngs: list[np.random.Generator],
    epoch: int,
    step: int,
    lr: float,
    channels_last: bool = False,
) -> TrainLogRecord:
    """One Adam update on the batch-mean of per-sample total losses.

    Samples that cannot contribute (unlabeled under a label-requiring
    branch) are dropped; an empty usable set raises
    :class:`UnusableBatchError`.  Parameters untouched by the loss keep a
    ``None`` gradient and are skipped by Adam, which is what keeps
    decoder-only parameters frozen on all-unlabeled batches.
    """
    if not batch:
        raise UnusableBatchError("empty batch")
    t0 = time.perf_counter()
    for group in optimizer.param_groups:
        group["lr"] = lr

    usable = []
    for sample, rng in zip(batch, rngs):
        if sample.label is None and not branch_uses_unlabeled(model.cfg.branch):
            continue
        usable.append((sample, rng))
    if not usable:
        raise UnusableBatchError(
            f"no usable sample in batch (branch {model.cfg.branch!r}, all unlabeled)"
        )

    outs = model_forward_batch(
        model, [s for s, _ in usable], [g for _, g in usable], channels_last=channels_last
    )
    breakdowns = [
        total_loss(seg, s.label, _branch_terms(s, aux))
        for (seg, aux), (s, _) in zip(outs, usable)
    ]
    loss = torch.stack([b.total for b in breakdowns]).mean()
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()

    scalars = [b.scalars() for b in breakdowns]
    dice_vals = [s["dice"] for s in scalars if s["dice"] is not None]
    branch_vals = [s["branch"] for s in scalars if s["branch"] is not None]
    comp_keys = sorted({k for s in scalars for k in s if k not in ("total", "dice", "branch")})
    components = {
        k: float(np.mean([s[k] for s in scalars if k in s])) for k in comp_keys
    }
    return TrainLogRecord(
        epoch=epoch,
        step=step,
        lr=lr,
        total=float(loss.detach()),
        dice=float(np.mean(dice_vals)) if dice_vals else None,
        branch=float(np.mean(branch_vals)) if branch_vals else None,
        components=components,
        n_labeled=sum(1 for s, _ in usable if s.label is not None),
        wall_time=time.perf_counter() - t0,
    )


def mean_region_dice(model: MultiTaskSegModel, samples: list[Sample]) -> dict[str, float]:
    """Mean per-region Dice of thresholded predictions over labeled cases."""
    dtype = next(model.parameters()).dtype
    scores: dict[str, list[float]] = {name: [] for name in REGIONS}
    same_shape = len({s.volume.spatial_shape for s in samples}) == 1
    with torch.no_grad():
        if same_shape:
            x = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(s.volume.data)) for s in samples]
            ).to(dtype).contiguous(memory_format=torch.channels_last_3d)
            probs = model(x)
            masks = [predict_mask(probs[i]) for i in range(len(samples))]
        else:
            masks = []
            for s in samples:
                x = torch.from_numpy(np.ascontiguousarray(s.volume.data)).to(dtype).unsqueeze(0)
                masks.append(predict_mask(model(x)[0]))
    for s, mask in zip(samples, masks):
        for c, name in enumerate(REGIONS):
            scores[name].append(metrics.dice_score(mask.data[c], s.label.data[c]))
    return {name: float(np.mean(v)) for name, v in scores.items()}


def _epoch_batches(
    labeled: list[str],
    unlabeled: list[str],
    cfg: TrainConfig,
    epoch: int,
) -> list[list[str]]:
    """Deterministic batch composition for one epoch.

    Default: uniform shuffle over the union.  With ``labeled_ratio`` set
    (and unlabeled data present), each batch draws a fixed number of
    labeled cases from a cycling shuffled stream instead.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
    union = list(labeled) + list(unlabeled)
    n_steps = -(-len(union) // cfg.batch_size)

    if cfg.labeled_ratio is None or not unlabeled or not labeled:
        order = [union[i] for i in rng.permutation(len(union))]
        return [order[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(n_steps)]

    k = min(cfg.batch_size, max(1, round(cfg.labeled_ratio * cfg.batch_size)))
    lab_stream = [labeled[i] for i in rng.permutation(len(labeled))]
    unl_stream = [unlabeled[i] for i in rng.permutation(len(unlabeled))]
    batches = []
    li = ui = 0
    for _ in range(n_steps):
        batch = []
        for _ in range(k):
            batch.append(lab_stream[li % len(lab_stream)])
            li += 1
        for _ in range(cfg.batch_size - k):
            batch.append(unl_stream[ui % len(unl_stream)])
            ui += 1
        batches.append(batch)
    return batches


def fit(
    cases: Mapping[str, Sample],
    split: DatasetSplit,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    model_name: str = "model",
    resume_from: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> FitResult:
    """Train on the split's labeled (and, branch permitting, unlabeled)
    cases; periodically evaluate Dice on val and test.

    Volumes are normalized once up front; unlabeled training cases have
    their labels stripped.  Deterministic given (configs, cases, seed).
    """
    missing = [cid for cid in split.all_ids() if cid not in cases]
    if missing:
        raise ValueError(f"split references unknown cases: {missing[:5]}")

    unlabeled_ids = split.train_unlabeled if branch_uses_unlabeled(model_cfg.branch) else []

    def prep(cid: str, strip: bool) -> Sample:
        s = cases[cid]
        s = Sample(case_id=s.case_id, volume=normalize(s.volume), label=s.label, seed=s.seed)
        return s.without_label() if strip else s

    train_pool = {cid: prep(cid, strip=False) for cid in split.train_labeled}
    train_pool.update({cid: prep(cid, strip=True) for cid in unlabeled_ids})
    val_samples = [prep(cid, strip=False) for cid in split.val]
    test_samples = [prep(cid, strip=False) for cid in split.test]

    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model_cfg = ckpt.config
        model = build_model(model_cfg, seed=train_cfg.seed)
        model, optimizer = _restore_training_checkpoint(ckpt, model, train_cfg)
        start_epoch = ckpt.epoch
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
        optimizer = torch.optim.Adam(
            model.parameters(), lr=train_cfg.alpha0, betas=train_cfg.betas, eps=train_cfg.eps
        )
    model.to(memory_format=torch.channels_last_3d)  # CPU conv throughput

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.ndjson", "a" if resume_from else "w")

    log: list[TrainLogRecord] = []
    eval_history: list[EvalPoint] = []
    checkpoint_path: Path | None = None
    n_union = len(split.train_labeled) + len(unlabeled_ids)
    steps_per_epoch = -(-n_union // train_cfg.batch_size)
    step_counter = start_epoch * steps_per_epoch

    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = lr_at_epoch(epoch, train_cfg)
            batches = _epoch_batches(split.train_labeled, unlabeled_ids, train_cfg, epoch)
            idx = 0
            for batch_ids in batches:
                samples, rngs = [], []
                for cid in batch_ids:
                    rng = np.random.default_rng(
                        np.random.SeedSequence((train_cfg.seed, epoch, idx))
                    )
                    samples.append(augment(train_pool[cid], rng, train_cfg.crop_size))
                    rngs.append(rng)
                    idx += 1
                record = train_step(
                    model, optimizer, samples, rngs, epoch, step_counter, lr, channels_last=True
                )
                log.append(record)
                if log_file is not None:
                    log_file.write(record.to_json() + "\n")
                step_counter += 1

            done = epoch + 1
            if done % train_cfg.eval_every == 0 or done == train_cfg.epochs:
                for split_name, samples in (("val", val_samples), ("test", test_samples)):
                    if samples:
                        eval_history.append(
                            EvalPoint(epoch=done, split=split_name, dice=mean_region_dice(model, samples))
                        )
            if out_dir is not None and (
                done % train_cfg.checkpoint_every == 0 or done == train_cfg.epochs
            ):
                checkpoint_path = out_dir / f"checkpoint_{done:04d}.ckpt"
                save_training_checkpoint(
                    checkpoint_path, model, optimizer, train_cfg, done, model_name,
                    extra_meta=checkpoint_meta,
                )
    finally:
        if log_file is not None:
            log_file.close()

    return FitResult(
        model=model,
        model_config=model_cfg,
        train_config=train_cfg,
        log=log,
        eval_history=eval_history,
        checkpoint_path=checkpoint_path,
        model_name=model_name,
    )


# ---------------------------------------------------------------------------
# Training checkpoints (model parameters + Adam state)
# ---------------------------------------------------------------------------

def save_training_checkpoint(
    path: str | Path,
    model: MultiTaskSegModel,
    optimizer: torch.optim.Optimizer,
    train_cfg: TrainConfig,
    epoch: int,
    model_name: str,
    extra_meta: dict | None = None,
) -> None:
    tensors: dict[str, torch.Tensor] = dict(model.named_parameters())
    opt_steps: dict[str, int] = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            tensors[f"opt.{name}.exp_avg"] = state["exp_avg"]
            tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"]
            opt_steps[name] = int(state["step"])
    meta = {
        "model_name": model_name,
        "train_config": dataclasses.asdict(train_cfg),
        "opt_steps": opt_steps,
        "rng_state": {"scheme": "seed-sequence", "seed": train_cfg.seed, "next_epoch": int(epoch)},
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, model.cfg, epoch, tensors, meta)


def _restore_training_checkpoint(
    ckpt: Checkpoint, model: MultiTaskSegModel, train_cfg: TrainConfig
) -> tuple[MultiTaskSegModel, torch.optim.Optimizer]:
    param_state = {
        name: torch.from_numpy(arr)
        for name, arr in ckpt.tensors.items()
        if not name.startswith("opt.")
    }
    model.load_state_dict(param_state, strict=True)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_cfg.alpha0, betas=train_cfg.betas, eps=train_cfg.eps
    )
    opt_steps = ckpt.meta.get("opt_steps", {})
    sd = optimizer.state_dict()
    state = {}
    for i, (name, _p) in enumerate(model.named_parameters()):
        key = f"opt.{name}.exp_avg"
        if key in ckpt.tensors:
            state[i] = {
                "step": torch.tensor(float(opt_steps[name])),
                "exp_avg": torch.from_numpy(ckpt.tensors[key]).clone(),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"opt.{name}.exp_avg_sq"]).clone(),
            }
    sd["state"] = state
    optimizer.load_state_dict(sd)
    return model, optimizer


def load_model_for_eval(path: str | Path) -> tuple[MultiTaskSegModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = build_model(ckpt.config, seed=0)
    param_state = {
        name: torch.from_numpy(arr)
        for name, arr in ckpt.tensors.items()
        if not name.startswith("opt.")
    }
    model.load_state_dict(param_state, strict=True)
    model.eval()
    return model, ckpt


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def gradcheck(
    loss_fn: Callable[..., torch.Tensor],
    inputs: dict[str, torch.Tensor],
    step: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn(**inputs)`` must return a scalar.  Inputs are promoted to
    float64 leaves.  With ``max_coords_per_tensor`` set, a seeded random
    subset of coordinates per tensor is probed instead of every element.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    leaves = {
        k: v.detach().clone().double().requires_grad_(True) for k, v in inputs.items()
    }
    loss = loss_fn(**leaves)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for (name, leaf), grad in zip(leaves.items(), grads):
        analytic = torch.zeros_like(leaf) if grad is None else grad
        n_elem = leaf.numel()
        coords = np.arange(n_elem)
        if max_coords_per_tensor is not None and n_elem > max_coords_per_tensor:
            coords = rng.choice(n_elem, size=max_coords_per_tensor, replace=False)
        flat = leaf.detach().reshape(-1)
        for c in coords:
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + step
                up = float(loss_fn(**{k: v.detach() for k, v in leaves.items()}))
                flat[c] = orig - step
                down = float(loss_fn(**{k: v.detach() for k, v in leaves.items()}))
                flat[c] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def gradcheck_model(
    model: MultiTaskSegModel,
    sample: Sample,
    step: float = 1e-4,
    coords_per_tensor: int = 3,
    seed: int = 0,
) -> float:
    """Finite-difference check of d(loss)/d(theta) on a (tiny) model.

    The forward closure redraws its RNG from a fixed seed on every call so
    the VAE latent sample and CPC negatives are held constant while
    parameters are perturbed.  Probes a seeded random subset of coordinates
    in every parameter tensor.
    """

    def closure() -> torch.Tensor:
        return sample_loss(model, sample, np.random.default_rng(seed)).total

    loss = closure()
    model.zero_grad(set_to_none=True)
    loss.backward()

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _name, p in model.named_parameters():
        analytic = torch.zeros_like(p) if p.grad is None else p.grad
        n = p.numel()
        coords = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
        flat = p.data.view(-1)
        for c in coords:
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + step
                up = float(closure())
                flat[c] = orig - step
                down = float(closure())
                flat[c] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.view(-1)[c])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
    return worst


@dataclass
class GradcheckEntry:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "entries": [
                {
                    "name": e.name,
                    "max_rel_error": e.max_rel_error,
                    "tolerance": e.tolerance,
                    "passed": e.passed,
                }
                for e in self.entries
            ],
        }


def _tiny_cpc_model(seed: int) -> tuple[MultiTaskSegModel, Sample]:
    cfg = ModelConfig(
        base_filters=2,
        levels=2,
        blocks_per_level=(1, 1),
        groupnorm_groups=2,
        branch="cpc",
        input_shape=(16, 16, 16),
        cpc_patch=(8, 8, 8),
        cpc_overlap=(4, 4, 4),
        cpc_negatives=5,
    )
    model = build_model(cfg, seed).double()
    raw = gen_synthetic_case(seed, (16, 16, 16))
    sample = Sample(case_id=raw.case_id, volume=normalize(raw.volume), label=raw.label, seed=raw.seed)
    return model, sample


def run_gradcheck_suite(
    seeds: tuple[int, ...] = tuple(range(10)),
    step: float = 1e-4,
    tolerance: float = 1e-3,
    model_seeds: tuple[int, ...] = (0, 1),
) -> GradcheckReport:
    """Finite-difference verification of every loss plus a tiny end-to-end
    model, in float64.  Reports the max relative error per check."""

    def dice_case(rng):
        return {
            "p_true": torch.from_numpy(rng.random((4, 4, 4))),
            "p_pred": torch.from_numpy(rng.uniform(0.05, 0.95, (4, 4, 4))),
        }, lambda p_true, p_pred: losses.dice_loss(p_true, p_pred)

    def vae_case(rng):
        inputs = {
            "recon": torch.from_numpy(rng.standard_normal((2, 4, 4, 4))),
            "target": torch.from_numpy(rng.standard_normal((2, 4, 4, 4))),
            "mu": torch.from_numpy(rng.standard_normal(6)),
            "sigma": torch.from_numpy(rng.uniform(0.5, 1.5, 6)),
        }
        return inputs, lambda recon, target, mu, sigma: losses.vae_loss(
            recon, target, losses.GaussianParams(mu, sigma)
        )

    def bce_case(rng):
        true = torch.from_numpy((rng.random((4, 4, 4)) < 0.2).astype(np.float64))
        inputs = {"b_pred": torch.from_numpy(rng.uniform(0.05, 0.95, (4, 4, 4)))}
        return inputs, lambda b_pred: losses.edge_weighted_bce(b_pred, true)

    def boundary_case(rng):
        true = torch.from_numpy((rng.random((4, 4, 4)) < 0.2).astype(np.float64))
        inputs = {"b_pred": torch.from_numpy(rng.uniform(0.05, 0.95, (4, 4, 4)))}
        return inputs, lambda b_pred: losses.boundary_loss(b_pred, true)

    def infonce_case(rng):
        inputs = {
            "pred": torch.from_numpy(0.5 * rng.standard_normal((4, 6))),
            "target": torch.from_numpy(0.5 * rng.standard_normal((4, 6))),
            "negatives": torch.from_numpy(0.5 * rng.standard_normal((4, 3, 6))),
        }
        return inputs, lambda pred, target, negatives: losses.infonce_loss(pred, target, negatives)

    cases = {
        "dice_loss": dice_case,
        "vae_loss": vae_case,
        "edge_weighted_bce": bce_case,
        "boundary_loss": boundary_case,
        "infonce_loss": infonce_case,
    }

    entries = []
    for name, case in cases.items():
        worst = 0.0
        for seed in seeds:
            inputs, fn = case(np.random.default_rng(seed))
            worst = max(worst, gradcheck(fn, inputs, step=step))
        entries.append(GradcheckEntry(name=name, max_rel_error=worst, tolerance=tolerance))

    if model_seeds:
        worst_model = 0.0
        for seed in model_seeds:
            model, sample = _tiny_cpc_model(seed)
            worst_model = max(worst_model, gradcheck_model(model, sample, step=step, seed=seed))
        entries.append(
            GradcheckEntry(name="model_end_to_end", max_rel_error=worst_model, tolerance=tolerance)
        )
    return GradcheckReport(entries=entries)
