"""Endpoint handlers wrapping the experiment harness.

Every endpoint is synchronous and stateless: requests carry all inputs
(paths refer to the server's filesystem), responses carry result paths and
summaries, and identical requests produce identical artifacts.
"""

from __future__ import annotations

import dataclasses

from fastapi import APIRouter, FastAPI, HTTPException

from .. import __version__, experiments
from ..losses import UnusableSampleError
from ..trainer import UnusableBatchError
from ..volgrid import CorruptCaseFileError
from . import schemas

router = APIRouter()


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")


@router.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


@router.post("/gen-data", response_model=schemas.GenDataResponse)
def gen_data(req: schemas.GenDataRequest) -> schemas.GenDataResponse:
    try:
        result = experiments.run_gen_data(
            n_cases=req.n_cases,
            shape=req.shape,
            seed=req.seed,
            out_dir=req.out_dir,
            force=req.force,
            difficulty=req.difficulty,
            split_counts=req.split_counts,
        )
    except FileExistsError as exc:
        raise HTTPException(status_code=409, detail=str(exc))
    except (ValueError, TypeError) as exc:
        raise _bad_request(exc)
    return schemas.GenDataResponse(
        manifest=str(result.manifest), n_cases=result.n_cases, digest=result.digest
    )


@router.post("/train", response_model=schemas.TrainResponse)
def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    run_cfg = experiments.RunConfig(**req.config.model_dump())
    try:
        result = experiments.run_train(req.manifest, run_cfg, req.out_dir)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (ValueError, TypeError, UnusableBatchError, UnusableSampleError, CorruptCaseFileError) as exc:
        raise _bad_request(exc)
    return schemas.TrainResponse(
        checkpoint=str(result.checkpoint),
        log_file=str(result.log_file),
        curve_file=None if result.curve_file is None else str(result.curve_file),
        steps=result.steps,
        warnings=result.warnings,
        final_test_dice=result.final_test_dice,
    )


@router.post("/eval", response_model=schemas.EvalResponse)
def eval_checkpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
    try:
        result = experiments.run_eval(
            req.checkpoint, req.manifest, split=req.split, out_csv=req.out_csv
        )
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (ValueError, CorruptCaseFileError) as exc:
        raise _bad_request(exc)
    return schemas.EvalResponse(
        rows=[schemas.ResultRowModel(**dataclasses.asdict(r)) for r in result.rows],
        csv=None if result.csv_path is None else str(result.csv_path),
        hd95_undefined=result.hd95_undefined,
        n_cases=len(result.per_case),
    )


@router.post("/sweep", response_model=schemas.SweepResponse)
def sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
    spec = experiments.ExperimentSpec(**req.spec.model_dump())
    try:
        result = experiments.run_sweep(req.manifest, spec, req.out_dir)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (ValueError, CorruptCaseFileError) as exc:
        raise _bad_request(exc)
    return schemas.SweepResponse(
        results_csv=str(result.results_csv),
        summary_path=str(result.summary_path),
        n_runs=result.summary["n_runs"],
        n_failures=result.summary["n_failures"],
        trend=result.summary["trend"],
        failures=result.summary["failures"],
    )


@router.post("/gradcheck", response_model=schemas.GradcheckResponse)
def gradcheck(req: schemas.GradcheckRequest | None = None) -> schemas.GradcheckResponse:
    req = req or schemas.GradcheckRequest()
    report = experiments.run_gradcheck(seeds=req.seeds, include_model=req.include_model)
    return schemas.GradcheckResponse(**report)


def create_app() -> FastAPI:
    app = FastAPI(title="multiseg", version=__version__)
    app.include_router(router)
    return app
