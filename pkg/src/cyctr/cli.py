"""Command line: train, eval, gradcheck, oracle, ablate, gen-data.

Machine-readable JSON goes to stdout, human-readable logs to stderr. Exit
status is 0 only when every internal check of the command passes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import numtensor as nt
from .ablation import format_table, run_ablation
from .config import ConfigError, RunConfig, load_config
from .episodes import write_episode
from .gradchecks import check_model, gradcheck_episode
from .model import VARIANTS, CyCTRModel
from .oracles import cycle_oracle_suite
from .train import TrainingDiverged, build, evaluate_model, split_of, evaluation_episode, train, train_episode

log = logging.getLogger("cyctr")


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(str(args.out))}")
    if getattr(args, "episodes", None) is not None:
        overrides.append(f"data.test_episodes={args.episodes}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    start = time.perf_counter()
    try:
        result = train(cfg, out)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        _emit({"status": "diverged", **exc.dump})
        return 1
    log.info("trained %d steps in %.1fs", cfg.optim.steps, time.perf_counter() - start)
    _emit(
        {
            "status": "ok",
            "out": str(out),
            "checkpoint": str(result.checkpoint),
            "steps": cfg.optim.steps,
            "final": result.history[-1] if result.history else None,
        }
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = build(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint"
    try:
        nt.checkpoint.load_into(model.parameters(), ckpt)
    except nt.checkpoint.CheckpointError as exc:
        log.error("%s", exc)
        return 2
    metrics = evaluate_model(model, cfg)
    if args.out is not None or args.write:
        path = Path(cfg.out) / "metrics.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _emit(metrics)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    model = CyCTRModel(cfg.model, cfg.variant, cfg.seed)
    episode = gradcheck_episode(cfg.data.K, args.image_size, args.episode_seed, cfg.data.n_classes, cfg.data.split)
    start = time.perf_counter()
    report = check_model(model, episode, step=args.step, probes=args.probes, seed=cfg.seed)
    log.info("gradcheck finished in %.1fs", time.perf_counter() - start)
    for group, err in report["full_model"]["groups"].items():
        log.info("  %-16s max rel error %.3e", group, err)
    for name, sub in report.get("submodules", {}).items():
        log.info("  [isolated] %-10s max rel error %.3e", name, sub["max_rel_error"])
    _emit(report)
    return 0 if report["passed"] else 1


def cmd_oracle(args) -> int:
    start = time.perf_counter()
    report = cycle_oracle_suite(args.trials, 0 if args.seed is None else args.seed)
    log.info("%d/%d exact matches in %.2fs", report["exact_matches"], report["trials"], time.perf_counter() - start)
    _emit(report)
    return 0 if report["exact_matches"] == report["trials"] else 1


def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    return [int(v) for v in text.split(",")]


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    table = run_ablation(
        cfg, variants, args.seeds, _int_list(args.sweep_L), _int_list(args.sweep_d), workers=args.workers
    )
    text = format_table(table)
    sys.stderr.write(text + "\n")
    if args.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(text + "\n")
    _emit(table)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    split = split_of(cfg)
    n = args.episodes if args.episodes is not None else (
        cfg.data.test_episodes if args.role == "test" else cfg.data.train_episodes
    )
    files = []
    for i in range(n):
        ep = evaluation_episode(cfg, i, split) if args.role == "test" else train_episode(cfg, i, split)
        if args.hide_query_mask:
            ep = ep.without_query_mask()
        files.append(str(write_episode(ep, out / f"{args.role}_{i:05d}")))
    _emit({"role": args.role, "episodes": n, "out": str(out), "files": files})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyctr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes=False):
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
        if episodes:
            p.add_argument("--episodes", type=int, help="number of test episodes")
        return p

    p = common(sub.add_parser("train", help="episodic training"))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on test episodes"), episodes=True)
    p.add_argument("--checkpoint", type=Path, help="checkpoint stem (default <out>/checkpoint)")
    p.add_argument("--write", action="store_true", help="also write <out>/metrics.json")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full model and its submodules"))
    p.add_argument("--probes", type=int, default=200, help="probes per parameter group")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--episode-seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="cycle-consistency bias against the brute-force oracle")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser("ablate", help="variant table and L / d sweeps"))
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per cell")
    p.add_argument("--sweep-L", default="1,2,3", help="comma-separated encoder depths ('' to skip)")
    p.add_argument("--sweep-d", default="16,32,48", help="comma-separated widths ('' to skip)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("gen-data", help="write synthetic episodes to disk"))
    p.add_argument("--episodes", type=int, help="number of episodes (default from config)")
    p.add_argument("--role", choices=("train", "test"), default="test")
    p.add_argument("--hide-query-mask", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
