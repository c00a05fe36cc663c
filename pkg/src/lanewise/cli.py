"""Command-line client for the lanewise service.

By default requests are served in-process; ``--server URL`` sends them to a
running ``lanewise serve`` instance instead.
"""
from __future__ import annotations

import argparse
import base64
import os
import sys
import tempfile
from pathlib import Path

import yaml


class CommandError(Exception):
    pass


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc.strerror}") from None


def _config_overrides(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(_read_text(path)) or {}
    if not isinstance(data, dict):
        raise CommandError(f"{path}: config must be a mapping")
    return data


def _write(path, data: str | bytes) -> None:
    """Write via a temp file and rename so partial outputs never appear."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class Client:
    def __init__(self, server: str | None = None):
        if server:
            import httpx

            self._http = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service import app

            self._http = TestClient(app)

    def post(self, route: str, payload: dict) -> dict:
        resp = self._http.post(route, json=payload)
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise CommandError(f"{route}: {detail}")
        return resp.json()


def cmd_synth(args, client: Client) -> str:
    cfg = _config_overrides(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    res = client.post("/synth", {"config": cfg})
    truth = args.truth or str(Path(args.out).with_name(Path(args.out).stem + "_truth.csv"))
    _write(args.out, res["samples_csv"])
    _write(truth, res["truth_csv"])
    return f"wrote {args.out} and {truth} ({len(res['injections'])} injections, seed {res['seed']})"


def cmd_train(args, client: Client) -> str:
    cfg = _config_overrides(args.config)
    if args.percentile is not None:
        cfg.setdefault("thresholds", {})["percentile"] = args.percentile
    payload = {"samples_csv": _read_text(args.data), "config": cfg}
    if args.exclude:
        payload["exclude_csv"] = _read_text(args.exclude)
    res = client.post("/train", payload)
    loss_log = args.loss_log or str(Path(args.out).with_suffix(".loss.csv"))
    _write(args.out, base64.b64decode(res["bundle_b64"]))
    _write(loss_log, res["loss_log_csv"])
    s = res["summary"]
    return (f"wrote {args.out} and {loss_log}: {s['train_windows']} train / {s['validation_windows']} validation "
            f"windows, stopped at epoch {s['stopping_epoch']} (best {s['best_epoch']})")


def cmd_detect(args, client: Client) -> str:
    try:
        bundle = Path(args.bundle).read_bytes()
    except OSError as exc:
        raise CommandError(f"cannot read {args.bundle}: {exc.strerror}") from None
    res = client.post("/detect", {"bundle_b64": base64.b64encode(bundle).decode(),
                                  "samples_csv": _read_text(args.data)})
    _write(args.out, res["verdicts_csv"])
    return f"wrote {args.out}: {res['n_flagged']} of {res['n_windows']} windows flagged"


def cmd_evaluate(args, client: Client) -> str:
    res = client.post("/evaluate", {
        "verdicts_csv": _read_text(args.verdicts), "labels_csv": _read_text(args.labels),
        "overlap_k": args.overlap_k, "balance": not args.no_balance, "seed": args.seed,
    })
    out = Path(args.out)
    csv_path = out.with_suffix(".csv") if out.suffix != ".csv" else out.with_name(out.stem + "_table.csv")
    _write(out, res["report_text"])
    _write(csv_path, res["report_csv"])
    sys.stdout.write(res["report_text"])
    return f"wrote {out} and {csv_path}"


def cmd_propose(args, client: Client) -> str:
    res = client.post("/label/propose", {"samples_csv": _read_text(args.data),
                                         "config": _config_overrides(args.config),
                                         "contamination": args.contamination})
    _write(args.out, res["candidates_csv"])
    return f"wrote {args.out}: {res['n_candidates']} candidate windows"


def cmd_review(args, client: Client) -> str:
    res = client.post("/label/review", {"candidates_csv": _read_text(args.candidates),
                                        "decisions_csv": _read_text(args.decisions)})
    _write(args.out, res["verified_csv"])
    tally = " ".join(f"{k}={res['tally'].get(k, 0)}" for k in ("accept", "reject", "defer"))
    return f"wrote {args.out}: {tally}"


def cmd_serve(args, _client) -> str:
    import uvicorn

    uvicorn.run("lanewise.service:app", host=args.host, port=args.port)
    return "server stopped"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanewise", description=__doc__.splitlines()[0])
    p.add_argument("--server", help="base URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a seeded synthetic scenario")
    s.add_argument("--config", help="YAML run config")
    s.add_argument("--out", required=True, help="sample CSV to write")
    s.add_argument("--truth", help="ground-truth CSV (default: <out>_truth.csv)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit all detectors and write a bundle")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="bundle path (.lgb)")
    t.add_argument("--exclude", help="ground truth or verified windows to keep out of training")
    t.add_argument("--percentile", type=float, choices=(90.0, 95.0, 99.0), help="threshold percentile preset")
    t.add_argument("--loss-log", help="loss log CSV (default: <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="score data with a trained bundle")
    d.add_argument("--bundle", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="compare verdicts against labels")
    e.add_argument("--verdicts", required=True)
    e.add_argument("--labels", required=True, help="ground-truth intervals or window labels CSV")
    e.add_argument("--out", required=True, help="report text path; a CSV table is written alongside")
    e.add_argument("--overlap-k", type=int, default=3)
    e.add_argument("--no-balance", action="store_true", help="score every labelled window")
    e.add_argument("--seed", type=int, default=0, help="seed for the balanced normal sample")
    e.set_defaults(func=cmd_evaluate)

    lab = sub.add_parser("label", help="isolation-forest labeling workflow")
    lsub = lab.add_subparsers(dest="label_command", required=True)
    lp = lsub.add_parser("propose", help="rank candidate anomalous windows")
    lp.add_argument("--data", required=True)
    lp.add_argument("--config")
    lp.add_argument("--contamination", type=float, default=None, help="default 0.3")
    lp.add_argument("--out", required=True)
    lp.set_defaults(func=cmd_propose)
    lr = lsub.add_parser("review", help="merge accept/reject/defer decisions")
    lr.add_argument("--candidates", required=True)
    lr.add_argument("--decisions", required=True)
    lr.add_argument("--out", required=True, help="verified anomaly CSV")
    lr.set_defaults(func=cmd_review)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        client = None if args.command == "serve" else Client(args.server)
        print(args.func(args, client))
    except CommandError as exc:
        print(f"lanewise {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
