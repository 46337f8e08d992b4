"""Command-line entry point: ``cfground <subcommand> ...``.

Exit codes: 0 success, 1 validation/scoring/build failures, 2 configuration errors.
Progress goes to stdout; machine-readable results go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .dataset import file_sha256, validate_manifest
from .demo import make_demo_corpus
from .evidence import load_services_config, make_client
from .geometry import parse_color
from .grpo import PolicyCollapse, SimConfig, TrainingDiverged, curve_is_nondecreasing, evaluate, train
from .pipeline import DEFAULT_TAU, BuildAborted, build_dataset, score_responses
from .rewards import ConfigError, RewardConfig

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("cfground")


def _write_jsonl(rows: Sequence[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _existing(path: Optional[str], what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _fill(spec: str) -> tuple[int, int, int]:
    try:
        return parse_color(spec)
    except ValueError as exc:
        raise ConfigError(f"bad --fill {spec!r}: {exc}") from exc


def _read_json(path: Path, what: str) -> dict:
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{what} {path} must hold a JSON object")
    return data


def cmd_build_dataset(args: argparse.Namespace) -> int:
    source = _existing(args.input, "--input")
    if args.seed is None:
        raise ConfigError("--seed is required for build-dataset")
    if args.out is None:
        raise ConfigError("--out is required")
    services = _existing(args.services_config, "--services-config") if args.services_config else None
    cfg = load_services_config(services, mode=args.mode)
    out = Path(args.out)
    fill = _fill(args.fill)
    print(f"building from {source} ({cfg.mode} mode, seed {args.seed}, tau {args.tau})")
    try:
        report = build_dataset(source, make_client(cfg), out, seed=args.seed, tau=args.tau, fill=fill,
                               workers=args.workers, max_failure_rate=args.max_failure_rate)
    except BuildAborted as exc:
        _write_jsonl(exc.report.failures, out / "build_errors.jsonl")
        print(f"aborted: {exc}; see {out / 'build_errors.jsonl'}")
        return EXIT_FAILED
    _write_jsonl(report.failures, out / "build_errors.jsonl")
    print(f"{report.records} records -> {len(report.instances)} instances, "
          f"{len(report.failures)} failed")
    print(f"manifest {report.manifest} sha256 {file_sha256(report.manifest)}")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    manifest = _existing(args.manifest, "--manifest")
    responses = _existing(args.input, "--input")
    cfg = RewardConfig.load(_existing(args.reward_config, "--reward-config")) if args.reward_config else RewardConfig()
    rows = score_responses(manifest, responses, cfg, image_dir=args.image_dir, workers=args.workers)
    out = Path(args.out) if args.out else responses.with_name(responses.stem + ".scores.jsonl")
    _write_jsonl(rows, out)
    errors = [r for r in rows if "error" in r]
    for r in errors:
        print(f"line {r['line']}: {r['instance_id']}: {r['error']}")
    print(f"scored {len(rows) - len(errors)}/{len(rows)} responses -> {out}")
    return EXIT_FAILED if errors else EXIT_OK


def cmd_train_sim(args: argparse.Namespace) -> int:
    if args.seed is None:
        raise ConfigError("--seed is required for train-sim")
    data = _read_json(_existing(args.config, "--config"), "sim config") if args.config else {}
    reward_data = data.get("reward", {})
    if args.reward_config:
        reward_data = {**reward_data, **_read_json(_existing(args.reward_config, "--reward-config"),
                                                   "reward config")}
    try:
        sim = SimConfig.from_mapping({**data, "seed": args.seed})
    except TypeError as exc:
        raise ConfigError(f"bad sim config: {exc}") from exc
    reward = RewardConfig.from_mapping(reward_data)
    out = Path(args.out or "train-sim")
    print(f"training {sim.iterations} iterations, seed {sim.seed}")
    try:
        result = train(sim, reward)
    except (TrainingDiverged, PolicyCollapse) as exc:
        print(f"training stopped: {type(exc).__name__}: {exc}")
        return EXIT_FAILED
    result.write_csv(out / "train_log.csv")
    result.write_policy(out / "policy.json")
    rates = evaluate(result)
    ok, tail = curve_is_nondecreasing(result)
    summary = {**rates, "final_window_total": float(tail[-1]) if len(tail) else None,
               "curve_nondecreasing": ok}
    (out / "eval.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    for key in ("pos_evidence_selection", "cf_abstention", "rand_abstention"):
        print(f"{key}: {rates[key]:.3f}")
    print(f"wrote {out / 'train_log.csv'}, {out / 'policy.json'}, {out / 'eval.json'}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    manifest = _existing(args.manifest or args.input, "--manifest")
    fill = _fill(args.fill) if args.fill else None
    violations = validate_manifest(manifest, image_dir=args.image_dir, fill=fill)
    if args.out:
        _write_jsonl([v.__dict__ for v in violations], Path(args.out))
    for v in violations:
        print(f"{v.kind}: {v.instance_id}: {v.detail}")
    print(f"{len(violations)} violation(s) in {manifest}")
    return EXIT_FAILED if violations else EXIT_OK


def cmd_make_demo(args: argparse.Namespace) -> int:
    paths = make_demo_corpus(Path(args.out or "demo"))
    print(f"demo corpus in {paths['root']}: {paths['source']}, {paths['services']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfground", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="source JSONL -> manifest + variant rasters")
    p.add_argument("--input", required=True, help="source JSONL of {image, question, answer}")
    p.add_argument("--services-config", help="evidence services JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("stub", "live"))
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--fill", default="black")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-failure-rate", type=float, default=0.1)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("score", help="responses JSONL -> reward breakdown JSONL")
    p.add_argument("--manifest", required=True)
    p.add_argument("--input", required=True, help="JSONL of {instance_id, response}")
    p.add_argument("--reward-config")
    p.add_argument("--image-dir", help="defaults to the manifest's directory")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-sim", help="GRPO on the tabular grounding environment")
    p.add_argument("--config", help="sim config JSON; an optional 'reward' key holds reward weights")
    p.add_argument("--reward-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_sim)

    p = sub.add_parser("validate", help="re-check every manifest invariant")
    p.add_argument("--manifest")
    p.add_argument("--input", help="alias of --manifest")
    p.add_argument("--image-dir")
    p.add_argument("--fill", help="expected mask color")
    p.add_argument("--out", help="write violations as JSONL")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("make-demo", help="write the five-image stub corpus")
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
