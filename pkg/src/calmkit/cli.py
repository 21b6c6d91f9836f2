"""Command line entry point ``calmkit``."""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from . import calmcert, harness

EXIT_OK, EXIT_VIOLATED, EXIT_HYPOTHESES, EXIT_CONFIG = 0, 2, 3, 4


def _load(path: str, seed: int | None = None) -> harness.ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    if seed is not None:
        doc.setdefault("solver", {})["seed"] = seed
    return harness.load_config(doc)


def _cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    report = harness.run_experiment(cfg)
    out_dir = args.out_dir or cfg.output.out_dir
    fmt = args.format or cfg.output.format
    for p in harness.emit_report(report, out_dir, cfg.output.stem, fmt):
        print(p)
    print(f"verdict: {report.verdict}")
    return {"certified_bound_holds": EXIT_OK, "inconclusive": EXIT_OK,
            "bound_violated": EXIT_VIOLATED, "hypotheses_fail": EXIT_HYPOTHESES}[report.verdict]


def _cmd_certify(args) -> int:
    cfg = _load(args.config)
    cert, status, ref = harness.certify_only(cfg)
    print(json.dumps(harness._encode({"status": status, "reference": ref, "certificate": cert}),
                     sort_keys=True, indent=2))
    return EXIT_OK if cert is not None else EXIT_HYPOTHESES


def _cmd_oracle_lemma(args) -> int:
    bound = calmcert.lemma_bound(args.p, args.q, args.l, args.eps)
    check = calmcert.lemma_oracle(args.p, args.q, args.l, bound)
    out = {"k": bound.k, "delta": bound.delta, "branch": bound.branch, "eps0": bound.eps0, "eps": bound.eps,
           "checked": check.checked, "violations": check.violations, "worst_excess": check.worst_excess}
    print(json.dumps(harness._encode(out), sort_keys=True, indent=2))
    return EXIT_OK if check.violations == 0 else EXIT_VIOLATED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="calmkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a perturbation experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir")
    run.add_argument("--seed", type=int)
    run.add_argument("--format", choices=["csv", "json", "both"])
    run.set_defaults(fn=_cmd_run)

    cert = sub.add_parser("certify", help="reference solve and certificate only")
    cert.add_argument("--config", required=True)
    cert.set_defaults(fn=_cmd_certify)

    orc = sub.add_parser("oracle", help="brute-force oracles")
    osub = orc.add_subparsers(dest="oracle", required=True)
    lem = osub.add_parser("lemma", help="check x <= k y^delta on a dense x grid")
    lem.add_argument("--p", type=float, required=True)
    lem.add_argument("--q", type=float, required=True)
    lem.add_argument("--l", type=float, required=True)
    lem.add_argument("--eps", type=float)
    lem.set_defaults(fn=_cmd_oracle_lemma)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (calmcert.HypothesesFail, calmcert.NotApplicable, calmcert.NotCalm, harness.ReferenceSolveError) as exc:
        print(f"hypotheses fail: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESES


if __name__ == "__main__":
    sys.exit(main())
