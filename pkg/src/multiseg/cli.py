"""Thin command-line client for the experiment service.

Every subcommand builds a request, sends it to the service, and prints the
JSON response.  By default the service app runs in-process; pass ``--url``
to talk to a remote server (see ``multiseg serve``).  ``MULTISEG_SEED``
provides the seed whenever neither a flag nor a config file sets one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import httpx


def default_seed() -> int:
    return int(os.environ.get("MULTISEG_SEED", "0"))


def open_client(url: str | None) -> httpx.Client:
    if url:
        return httpx.Client(base_url=url, timeout=None)
    from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        print(f"error ({resp.status_code}): {json.dumps(detail) if not isinstance(detail, str) else detail}",
              file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _load_json_file(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise SystemExit(f"config file {path} must contain a JSON object")
    return doc


def _print(doc: dict) -> None:
    print(json.dumps(doc, indent=2))


def cmd_gen_data(args: argparse.Namespace) -> None:
    payload = {
        "n_cases": args.n_cases,
        "shape": args.shape,
        "seed": args.seed if args.seed is not None else default_seed(),
        "out_dir": args.out,
        "force": args.force,
    }
    if args.split_counts is not None:
        payload["split_counts"] = args.split_counts
    with open_client(args.url) as client:
        _print(_post(client, "/gen-data", payload))


def cmd_train(args: argparse.Namespace) -> None:
    config = _load_json_file(args.config)
    overrides = {
        "model": args.model,
        "n_labeled": args.labels,
        "n_unlabeled": args.unlabeled,
        "n_val": args.val,
        "n_test": args.test,
        "split_seed": args.split_seed,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    config.setdefault("seed", default_seed())
    train_overrides = config.setdefault("train_overrides", {})
    for key, value in (("epochs", args.epochs), ("alpha0", args.alpha0), ("batch_size", args.batch_size)):
        if value is not None:
            train_overrides[key] = value

    payload = {"manifest": args.manifest, "out_dir": args.out, "config": config}
    with open_client(args.url) as client:
        doc = _post(client, "/train", payload)
    for w in doc.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    _print(doc)


def cmd_eval(args: argparse.Namespace) -> None:
    payload = {
        "checkpoint": args.checkpoint,
        "manifest": args.manifest,
        "split": args.split,
        "out_csv": args.out_csv,
    }
    with open_client(args.url) as client:
        _print(_post(client, "/eval", payload))


def cmd_sweep(args: argparse.Namespace) -> None:
    spec = _load_json_file(args.spec)
    if args.models is not None:
        spec["models"] = args.models
    if args.labels is not None:
        spec["label_counts"] = args.labels
    if args.unlabeled is not None:
        spec["n_unlabeled"] = args.unlabeled
    if args.unlabeled_counts is not None:
        spec["unlabeled_counts"] = args.unlabeled_counts
    if args.seeds is not None:
        spec["seeds"] = args.seeds
    spec.setdefault("seeds", [default_seed()])

    payload = {"manifest": args.manifest, "out_dir": args.out, "spec": spec}
    with open_client(args.url) as client:
        doc = _post(client, "/sweep", payload)
    for comp in doc.get("trend", []):
        flag = "REGRESSION" if comp["regression"] else "ok"
        print(
            f"trend [{flag}] {comp['semi_supervised']} vs {comp['supervised']} "
            f"at {comp['n_labels']} labels: WT Dice {comp['ss_wt_dice']:.4f} vs "
            f"{comp['supervised_wt_dice']:.4f} (delta {comp['delta']:+.4f})",
            file=sys.stderr,
        )
    _print(doc)
    if doc.get("n_failures", 0) > 0:
        raise SystemExit(2)


def cmd_gradcheck(args: argparse.Namespace) -> None:
    payload = {"include_model": not args.no_model}
    if args.seeds is not None:
        payload["seeds"] = args.seeds
    with open_client(args.url) as client:
        doc = _post(client, "/gradcheck", payload)
    for entry in doc["entries"]:
        status = "pass" if entry["passed"] else "FAIL"
        print(f"{status}  {entry['name']}: max rel err {entry['max_rel_error']:.3e} "
              f"(tol {entry['tolerance']:.1e})")
    if not doc["passed"]:
        raise SystemExit(1)


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiseg", description=__doc__)
    parser.add_argument("--url", default=None, help="remote service URL (default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset + manifest")
    p.add_argument("--n-cases", type=int, required=True)
    p.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--split-counts", type=int, nargs=4, default=None,
                   metavar=("LABELED", "UNLABELED", "VAL", "TEST"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON run config; flags override its fields")
    p.add_argument("--model", default=None)
    p.add_argument("--labels", type=int, default=None)
    p.add_argument("--unlabeled", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train+eval a grid of (model, labels, seed) cells")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="JSON experiment spec; flags override its fields")
    p.add_argument("--models", nargs="+", default=None)
    p.add_argument("--labels", type=int, nargs="+", default=None)
    p.add_argument("--unlabeled", type=int, default=None)
    p.add_argument("--unlabeled-counts", type=int, nargs="+", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses and a tiny model")
    p.add_argument("--seeds", type=int, nargs="+", default=None,
                   help="restrict to these seeds (default: the full 10-seed gate)")
    p.add_argument("--no-model", action="store_true", help="skip the end-to-end model check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the experiment service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
