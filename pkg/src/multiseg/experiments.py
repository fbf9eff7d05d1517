"""Experiment harness: data generation, training runs, evaluation tables,
and label-count sweeps.

Model names mirror the reporting convention: EncDec, VAEseg, Boundseg,
CPCseg for fully supervised runs; ssVAEseg and ssCPCseg for the
semi-supervised variants that also consume unlabeled cases.  Result CSVs
carry exactly the columns (model, n_labels, n_unlabeled, seed, region,
dice, hd95); an undefined HD95 is an empty cell and is counted in the run
summary instead of being averaged.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .metrics import MetricsReport, dice_score, evaluate_case
from .model import ModelConfig, predict_mask
from .trainer import (
    FitResult,
    TrainConfig,
    fit,
    load_model_for_eval,
    run_gradcheck_suite,
)
from .volgrid import (
    REGIONS,
    DatasetSplit,
    PhantomConfig,
    Sample,
    SegLabel,
    gen_synthetic_case,
    load_cases,
    normalize,
    read_manifest,
    split_dataset,
    write_case,
    write_manifest,
)

# canonical name -> (branch kind, uses unlabeled data)
MODEL_REGISTRY = {
    "EncDec": (None, False),
    "VAEseg": ("vae", False),
    "Boundseg": ("boundary", False),
    "CPCseg": ("cpc", False),
    "ssVAEseg": ("vae", True),
    "ssCPCseg": ("cpc", True),
}
_SS_COUNTERPART = {"ssVAEseg": "VAEseg", "ssCPCseg": "CPCseg"}

RESULT_COLUMNS = ("model", "n_labels", "n_unlabeled", "seed", "region", "dice", "hd95")


def resolve_model_name(name: str) -> str:
    for canonical in MODEL_REGISTRY:
        if canonical.lower() == name.lower():
            return canonical
    raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODEL_REGISTRY)}")


@dataclass
class RunConfig:
    """One training run of one model on one split."""

    model: str = "CPCseg"
    n_labeled: int = 8
    n_unlabeled: int = 0
    n_val: int = 8
    n_test: int = 8
    split_seed: int = 0
    seed: int = 0
    model_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model = resolve_model_name(self.model)

    def build_configs(self) -> tuple[ModelConfig, TrainConfig, list[str]]:
        branch, uses_unlabeled = MODEL_REGISTRY[self.model]
        warnings = []
        effective_unlabeled = self.n_unlabeled
        if self.n_unlabeled > 0 and not uses_unlabeled:
            warnings.append(
                f"{self.model} does not use unlabeled data; ignoring {self.n_unlabeled} unlabeled cases"
            )
            effective_unlabeled = 0
        model_cfg = ModelConfig(branch=branch, **self.model_overrides)
        train_cfg = TrainConfig(seed=self.seed, **self.train_overrides)
        return model_cfg, train_cfg, warnings

    def effective_unlabeled(self) -> int:
        return self.n_unlabeled if MODEL_REGISTRY[self.model][1] else 0


@dataclass
class ResultRow:
    model: str
    n_labels: int
    n_unlabeled: int
    seed: int
    region: str
    dice: float
    hd95: float | None

    def as_csv(self) -> list[str]:
        return [
            self.model,
            str(self.n_labels),
            str(self.n_unlabeled),
            str(self.seed),
            self.region,
            f"{self.dice:.6f}",
            "" if self.hd95 is None else f"{self.hd95:.6f}",
        ]


def write_results_csv(path: str | Path, rows: list[ResultRow], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())
    return path


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

@dataclass
class GenDataResult:
    manifest: Path
    n_cases: int
    digest: str


def run_gen_data(
    n_cases: int,
    shape: tuple[int, int, int],
    seed: int,
    out_dir: str | Path,
    force: bool = False,
    difficulty: dict | None = None,
    split_counts: tuple[int, int, int, int] | None = None,
) -> GenDataResult:
    """Generate a synthetic dataset plus its manifest.

    Case i is a pure function of (seed, i); the digest hashes the manifest
    and every payload byte, so identical invocations are byte-identical.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"output directory {out_dir} is not empty (use force to overwrite)")
    cfg = PhantomConfig(**(difficulty or {}))

    case_ids, rel_paths = [], []
    for i in range(n_cases):
        case_seed = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        sample = gen_synthetic_case(case_seed, shape, cfg)
        sample = dataclasses.replace(sample, case_id=f"case_{i:04d}")
        rel = f"cases/case_{i:04d}"
        write_case(out_dir / rel, sample)
        case_ids.append(sample.case_id)
        rel_paths.append(rel)

    split = None
    if split_counts is not None:
        split = split_dataset(case_ids, split_counts, seed)
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, case_ids, rel_paths, seed, split)

    h = hashlib.sha256(manifest.read_bytes())
    for rel in rel_paths:
        base = out_dir / rel
        for suffix in (".json", ".vol", ".seg"):
            p = base.with_suffix(suffix)
            if p.exists():
                h.update(p.read_bytes())
    return GenDataResult(manifest=manifest, n_cases=n_cases, digest=h.hexdigest())


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------

@dataclass
class TrainRunResult:
    checkpoint: Path
    log_file: Path
    curve_file: Path | None
    steps: int
    warnings: list[str]
    final_test_dice: dict[str, float] | None
    fit_result: FitResult


def _write_curve_csv(path: Path, fit_result: FitResult, split: str) -> Path | None:
    points = [p for p in fit_result.eval_history if p.split == split]
    if not points:
        return None
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch"] + [f"dice_{r.lower()}" for r in REGIONS])
        for p in points:
            writer.writerow([p.epoch] + [f"{p.dice[r]:.6f}" for r in REGIONS])
    return path


def run_train(
    manifest_path: str | Path,
    run_cfg: RunConfig,
    out_dir: str | Path,
) -> TrainRunResult:
    """Split the manifest pool, train one model, write checkpoint, NDJSON
    log, and the test learning-curve CSV."""
    out_dir = Path(out_dir)
    model_cfg, train_cfg, warnings = run_cfg.build_configs()

    doc = read_manifest(manifest_path)
    pool = [entry["case_id"] for entry in doc["cases"]]
    counts = (run_cfg.n_labeled, run_cfg.effective_unlabeled(), run_cfg.n_val, run_cfg.n_test)
    split = split_dataset(pool, counts, run_cfg.split_seed)
    cases = load_cases(manifest_path, split.all_ids())

    result = fit(
        cases,
        split,
        model_cfg,
        train_cfg,
        out_dir=out_dir,
        model_name=run_cfg.model,
        checkpoint_meta={
            "run": {
                "model": run_cfg.model,
                "n_labels": run_cfg.n_labeled,
                "n_unlabeled": run_cfg.effective_unlabeled(),
                "seed": run_cfg.seed,
                "split_seed": run_cfg.split_seed,
            },
            "split": split.as_dict(),
        },
    )

    curve = _write_curve_csv(out_dir / "curve_test.csv", result, "test")
    final_test = next(
        (p.dice for p in reversed(result.eval_history) if p.split == "test"), None
    )
    return TrainRunResult(
        checkpoint=result.checkpoint_path,
        log_file=out_dir / "train_log.ndjson",
        curve_file=curve,
        steps=len(result.log),
        warnings=warnings,
        final_test_dice=final_test,
        fit_result=result,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list[ResultRow]
    per_case: dict[str, MetricsReport]
    hd95_undefined: dict[str, int]
    csv_path: Path | None


def run_eval(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    split: str = "test",
    out_csv: str | Path | None = None,
    predictor=None,
) -> EvalResult:
    """Evaluate a checkpoint on one split of its training manifest.

    The split assignment is read back from the checkpoint metadata.
    ``predictor`` (Sample -> SegLabel) can replace the model's prediction
    path, which keeps the aggregation plumbing testable in isolation.
    """
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"checkpoint {checkpoint_path} does not exist")
    ckpt = load_checkpoint(checkpoint_path)
    split_ids = ckpt.meta.get("split", {}).get(split)
    if split_ids is None:
        raise ValueError(f"checkpoint has no split {split!r} in its metadata")
    if not split_ids:
        raise ValueError(f"split {split!r} is empty")
    run_info = ckpt.meta.get("run", {})

    cases = load_cases(manifest_path, split_ids)
    if predictor is None:
        model, _ = load_model_for_eval(checkpoint_path)
        dtype = next(model.parameters()).dtype

        def predictor(sample: Sample) -> SegLabel:
            x = torch.from_numpy(np.ascontiguousarray(sample.volume.data)).to(dtype)
            with torch.no_grad():
                probs = model(x.unsqueeze(0))[0]
            return predict_mask(probs)

    per_case: dict[str, MetricsReport] = {}
    for cid in split_ids:
        sample = cases[cid]
        prepped = Sample(
            case_id=cid, volume=normalize(sample.volume), label=sample.label, seed=sample.seed
        )
        pred = predictor(prepped)
        per_case[cid] = evaluate_case(pred, sample.label, sample.volume.spacing)

    rows = []
    undefined = {r: 0 for r in REGIONS}
    for region in REGIONS:
        dices = [rep.regions[region].dice for rep in per_case.values()]
        hds = [rep.regions[region].hd95 for rep in per_case.values()]
        defined = [h for h in hds if h is not None]
        undefined[region] = len(hds) - len(defined)
        rows.append(
            ResultRow(
                model=run_info.get("model", "unknown"),
                n_labels=int(run_info.get("n_labels", -1)),
                n_unlabeled=int(run_info.get("n_unlabeled", -1)),
                seed=int(run_info.get("seed", -1)),
                region=region,
                dice=float(np.mean(dices)),
                hd95=float(np.mean(defined)) if defined else None,
            )
        )

    csv_path = write_results_csv(out_csv, rows) if out_csv is not None else None
    return EvalResult(rows=rows, per_case=per_case, hd95_undefined=undefined, csv_path=csv_path)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """Grid of (model, label count, seed) cells, or an unlabeled-count sweep
    when ``unlabeled_counts`` is set (labels fixed at ``label_counts[0]``)."""

    models: list[str] = field(default_factory=lambda: ["EncDec", "CPCseg", "ssCPCseg"])
    label_counts: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    n_unlabeled: int = 0
    unlabeled_counts: list[int] | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    n_val: int = 8
    n_test: int = 8
    split_seed: int = 0
    model_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.models = [resolve_model_name(m) for m in self.models]

    def cells(self) -> list[tuple[str, int, int, int]]:
        """(model, n_labels, n_unlabeled, seed) for every run."""
        out = []
        if self.unlabeled_counts is not None:
            labels = self.label_counts[0]
            for unlabeled in self.unlabeled_counts:
                for model in self.models:
                    for seed in self.seeds:
                        out.append((model, labels, unlabeled, seed))
        else:
            for model in self.models:
                for labels in self.label_counts:
                    for seed in self.seeds:
                        out.append((model, labels, self.n_unlabeled, seed))
        return out


@dataclass
class SweepResult:
    results_csv: Path
    summary_path: Path
    rows: list[ResultRow]
    summary: dict


def _cell_split_seed(spec: ExperimentSpec, n_labels: int, n_unlabeled: int, seed: int) -> int:
    # same split for every model in a cell, different across cells/seeds
    return int(
        np.random.SeedSequence((spec.split_seed, n_labels, n_unlabeled, seed)).generate_state(1)[0]
    )


def trend_comparisons(rows: list[ResultRow], margin: float = 0.02) -> list[dict]:
    """Mean WT Dice of each semi-supervised model against its supervised
    counterpart at matching label counts; flags drops beyond ``margin``."""
    wt = [r for r in rows if r.region == "WT"]

    def mean_wt(model: str, n_labels: int) -> float | None:
        vals = [r.dice for r in wt if r.model == model and r.n_labels == n_labels]
        return float(np.mean(vals)) if vals else None

    comparisons = []
    for ss_model, base_model in _SS_COUNTERPART.items():
        for n_labels in sorted({r.n_labels for r in wt}):
            ss = mean_wt(ss_model, n_labels)
            base = mean_wt(base_model, n_labels)
            if ss is None or base is None:
                continue
            comparisons.append(
                {
                    "n_labels": n_labels,
                    "semi_supervised": ss_model,
                    "supervised": base_model,
                    "ss_wt_dice": ss,
                    "supervised_wt_dice": base,
                    "delta": ss - base,
                    "regression": bool(ss < base - margin),
                }
            )
    return comparisons


def run_sweep(
    manifest_path: str | Path,
    spec: ExperimentSpec,
    out_dir: str | Path,
) -> SweepResult:
    """Train and evaluate every sweep cell; emit the consolidated results
    CSV, per-run learning curves, and a summary JSON with the
    semi-vs-supervised trend comparison.

    A failing cell is recorded in the summary and the sweep continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[ResultRow] = []
    failures: list[dict] = []
    hd95_undefined: dict[str, int] = {r: 0 for r in REGIONS}
    runs: list[dict] = []

    for model, n_labels, n_unlabeled, seed in spec.cells():
        run_dir = out_dir / f"{model}_L{n_labels}_U{n_unlabeled}_s{seed}"
        run_cfg = RunConfig(
            model=model,
            n_labeled=n_labels,
            n_unlabeled=n_unlabeled,
            n_val=spec.n_val,
            n_test=spec.n_test,
            split_seed=_cell_split_seed(spec, n_labels, n_unlabeled, seed),
            seed=seed,
            model_overrides=dict(spec.model_overrides),
            train_overrides=dict(spec.train_overrides),
        )
        try:
            train_result = run_train(manifest_path, run_cfg, run_dir)
            eval_result = run_eval(train_result.checkpoint, manifest_path, split="test")
            rows.extend(eval_result.rows)
            for region, count in eval_result.hd95_undefined.items():
                hd95_undefined[region] += count
            runs.append(
                {
                    "model": model,
                    "n_labels": n_labels,
                    "n_unlabeled": n_unlabeled,
                    "seed": seed,
                    "run_dir": str(run_dir),
                    "warnings": train_result.warnings,
                }
            )
        except Exception as exc:  # keep sweeping; report the cell
            failures.append(
                {
                    "model": model,
                    "n_labels": n_labels,
                    "n_unlabeled": n_unlabeled,
                    "seed": seed,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )

    results_csv = write_results_csv(out_dir / "results.csv", rows)
    summary = {
        "n_runs": len(runs),
        "n_failures": len(failures),
        "runs": runs,
        "failures": failures,
        "hd95_undefined": hd95_undefined,
        "trend": trend_comparisons(rows),
    }
    summary_path = out_dir / "sweep_summary.json"
    summary_path.write_text(json.dumps(summary, indent=1))
    return SweepResult(results_csv=results_csv, summary_path=summary_path, rows=rows, summary=summary)


def all_foreground_wt_dice(samples: list[Sample]) -> float:
    """Mean WT Dice of the trivial all-foreground prediction (baseline)."""
    scores = []
    for s in samples:
        ones = np.ones_like(s.label.data[2])
        scores.append(dice_score(ones, s.label.data[2]))
    return float(np.mean(scores))


def run_gradcheck(seeds: list[int] | None = None, include_model: bool = True) -> dict:
    kwargs = {}
    if seeds is not None:
        kwargs["seeds"] = tuple(seeds)
    if not include_model:
        kwargs["model_seeds"] = ()
    return run_gradcheck_suite(**kwargs).as_dict()
