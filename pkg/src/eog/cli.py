"""Command line entry point: ``eog paths|score|eval|ttest|train-toy|gen-toy|serve``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .evalkit import build_record, format_table, grouped_report, one_sample_ttest, summarize
from .kg import dump_graph, dump_tasks, load_graph, load_tasks
from .pathfind import (
    AlwaysVerifier,
    KeywordOverlapVerifier,
    MissingEntityError,
    SearchConfig,
    VerificationCache,
    VerificationError,
    build_gold_paths,
)
from .rewards import RewardConfig, reward_record, score_text
from .toysim import SyntheticTaskFamily, TrainSchedule, generate_family, train
from .trace import load_traces, parse_trace

log = logging.getLogger("eog")

EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config") and isinstance(v, (str, int, float, bool, type(None)))}


def write_manifest(out: Path, args: argparse.Namespace, inputs: list) -> Path:
    """Record config hash, seed and input digests next to an output."""
    cfg = _jsonable(args)
    manifest = {
        "command": args.command,
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs if p},
    }
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


def _tasks_by_id(path) -> dict:
    return {t.id: t for t in load_tasks(path)}


def _reward_cfg(args) -> RewardConfig:
    return RewardConfig(alpha=args.alpha, phase=args.phase, overlong_threshold=args.overlong_threshold)


def cmd_paths(args) -> int:
    g = load_graph(args.graph)
    tasks = load_tasks(args.tasks)
    if args.verifier == "always":
        verifier = AlwaysVerifier()
    elif args.verifier == "rule":
        verifier = KeywordOverlapVerifier()
    else:
        from .llm import ChatEndpointConfig, llm_verifier

        verifier = llm_verifier(ChatEndpointConfig.from_env())
    cfg = SearchConfig(max_hops=args.max_hops, traverse_inverse=args.inverse, max_paths=args.max_paths)
    cache = VerificationCache()
    out_tasks, failed = [], 0
    for task in tasks:
        try:
            new = build_gold_paths(task, g, cfg, verifier, force=args.force, cache=cache, max_workers=args.workers)
        except (MissingEntityError, VerificationError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            failed += 1
            out_tasks.append(task)
            continue
        n = len(new.gold_paths)
        print(f"{task.id}\t{n} path(s)")
        if n == 0:
            print(f"warning: task {task.id}: no gold path found within {args.max_hops} hop(s)", file=sys.stderr)
        out_tasks.append(new)
    out = Path(args.out)
    dump_tasks(out_tasks, out)
    write_manifest(out, args, [args.graph, args.tasks])
    return EXIT_ERROR if failed else 0


def cmd_score(args) -> int:
    tasks = _tasks_by_id(args.tasks)
    cfg = _reward_cfg(args)
    lines, missing = [], []
    for tid, text in load_traces(args.traces):
        task = tasks.get(tid)
        if task is None:
            missing.append(tid)
            lines.append(_dumps({"id": tid, "error": "unknown task id"}))
            continue
        lines.append(_dumps(reward_record(tid, score_text(text, task, cfg))))
    out = Path(args.out)
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    write_manifest(out, args, [args.tasks, args.traces])
    if missing:
        print(f"error: {len(missing)} trace id(s) without a task: {', '.join(missing)}", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def cmd_eval(args) -> int:
    tasks = _tasks_by_id(args.tasks)
    g = load_graph(args.graph) if args.graph else None
    records, missing = [], []
    for tid, text in load_traces(args.traces):
        task = tasks.get(tid)
        if task is None:
            missing.append(tid)
            continue
        rec = build_record(parse_trace(text), task, g)
        if g is None and task.subgraph is None:
            # no graph to validate mentioned triples against
            rec = type(rec)(rec.id, rec.hit1, rec.f1, group_labels=rec.group_labels)
        records.append(rec)
    if missing:
        print(f"error: {len(missing)} trace id(s) without a task: {', '.join(missing)}", file=sys.stderr)
    if not records:
        print("error: nothing to evaluate", file=sys.stderr)
        return EXIT_ERROR
    summary = grouped_report(records, args.group_by) if args.group_by else summarize(records)
    text = json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        write_manifest(out, args, [args.tasks, args.traces, args.graph])
    print(format_table(summary))
    return EXIT_PARTIAL if missing else 0


def cmd_ttest(args) -> int:
    t, df = one_sample_ttest(args.mean, args.sd, args.n, args.baseline)
    print(f"t = {t:.2f}  df = {df}")
    return 0


def _family(args) -> SyntheticTaskFamily:
    return SyntheticTaskFamily(
        seed=args.seed,
        n_entities=args.n_entities,
        n_relations=args.n_relations,
        edge_density=args.edge_density,
        gold_hops=args.gold_hops,
        distractor_branching=args.distractor_branching,
        n_tasks=args.n_tasks,
    )


def cmd_gen_toy(args) -> int:
    g, tasks = generate_family(_family(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_graph(g, out / "graph.jsonl")
    dump_tasks(tasks, out / "tasks.jsonl")
    write_manifest(out, args, [])
    print(f"wrote {len(g)} triples and {len(tasks)} tasks to {out}")
    return 0


def cmd_train_toy(args) -> int:
    p1, p2 = args.phase1_steps, args.phase2_steps
    if args.steps is not None:
        p1, p2 = args.steps // 2, args.steps - args.steps // 2
    schedule = TrainSchedule(
        phase1_steps=p1,
        phase2_steps=p2,
        group_size=args.group_size,
        learning_rate=args.lr,
        alpha=args.alpha,
        kl_beta=args.kl_beta,
        inner_epochs=args.inner_epochs,
        sft_steps=args.sft_steps,
        sft_fraction=args.sft_fraction,
        eval_samples=args.eval_samples,
        seed=args.seed,
    )
    report = train(schedule, _family(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "policy.json").write_text(json.dumps(report.policy.to_dict()) + "\n", encoding="utf-8")
    write_manifest(out, args, [])
    i, f = report.initial, report.final
    print(f"initial r_outcome={i['mean_r_outcome']:.4f} coverage={i['coverage']:.4f}")
    print(f"final   r_outcome={f['mean_r_outcome']:.4f} coverage={f['coverage']:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    g = load_graph(args.graph) if args.graph else None
    app = create_app(g, load_tasks(args.tasks), _reward_cfg(args))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _add_reward_flags(p):
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--phase", choices=["outcome_only", "joint"], default="joint")
    p.add_argument("--overlong-threshold", type=int, default=3000)


def _add_family_flags(p):
    p.add_argument("--n-entities", type=int, default=40)
    p.add_argument("--n-relations", type=int, default=8)
    p.add_argument("--edge-density", type=float, default=0.03)
    p.add_argument("--gold-hops", type=int, default=2)
    p.add_argument("--distractor-branching", type=int, default=3)
    p.add_argument("--n-tasks", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eog", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="TOML or JSON file with flag values")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("paths", cmd_paths, "build gold reasoning paths (search and verify)")
    p.add_argument("--graph", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-hops", type=int, default=4)
    p.add_argument("--max-paths", type=int, default=256)
    p.add_argument("--inverse", action="store_true", help="also walk edges object->subject")
    p.add_argument("--verifier", choices=["always", "rule", "llm"], default="rule")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true", help="recompute tasks that already have gold paths")

    p = add("score", cmd_score, "score traces with outcome/path/joint rewards")
    p.add_argument("--tasks", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    _add_reward_flags(p)

    p = add("eval", cmd_eval, "hit@1, F1, exploration efficiency and coverage")
    p.add_argument("--tasks", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--graph")
    p.add_argument("--out")
    p.add_argument("--group-by")

    p = add("ttest", cmd_ttest, "one-sample t statistic against a baseline score")
    p.add_argument("--mean", type=float, required=True)
    p.add_argument("--sd", type=float, required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--baseline", type=float, required=True)

    p = add("train-toy", cmd_train_toy, "two-phase training of the toy policy")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="total steps, split evenly between phases")
    p.add_argument("--phase1-steps", type=int, default=300)
    p.add_argument("--phase2-steps", type=int, default=300)
    p.add_argument("--group-size", type=int, default=6)
    p.add_argument("--lr", type=float, default=1.5)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--kl-beta", type=float, default=0.0)
    p.add_argument("--inner-epochs", type=int, default=1)
    p.add_argument("--sft-steps", type=int, default=0)
    p.add_argument("--sft-fraction", type=float, default=0.0)
    p.add_argument("--eval-samples", type=int, default=16)
    _add_family_flags(p)

    p = add("gen-toy", cmd_gen_toy, "write a synthetic graph and task file")
    p.add_argument("--out", required=True)
    _add_family_flags(p)

    p = add("serve", cmd_serve, "run the HTTP scoring service")
    p.add_argument("--graph")
    p.add_argument("--tasks", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    _add_reward_flags(p)
    return parser


def load_config(path) -> dict:
    text = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text.decode("utf-8"))
    else:
        data = json.loads(text)
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv=None) -> argparse.Namespace:
    """Flags given on the command line win over ``--config`` values."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in choices), None)
    if known.config and command:
        conf = load_config(known.config)
        sub = choices[command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(conf) - dests)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**conf)
        for action in sub._actions:
            if action.dest in conf:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
