"""promptforge command line: train | compare | inspect | generate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from promptforge import config as cfgmod
from promptforge import runs
from promptforge.envs import WorkerError, write_dataset


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptforge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one optimizer and persist a run directory")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--dataset", type=Path)
    t.add_argument("--mode", choices=cfgmod.MODES, default="rl")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, type=Path)

    c = sub.add_parser("compare", help="rl vs rl_no_buffer (optionally evo) across seeds")
    c.add_argument("--config", required=True, type=Path)
    c.add_argument("--dataset", type=Path)
    c.add_argument("--seeds", required=True, type=lambda s: [int(x) for x in s.split(",") if x])
    c.add_argument("--evo", action="store_true", help="add the evolutionary baseline at matched worker calls")
    c.add_argument("--out", required=True, type=Path)

    i = sub.add_parser("inspect", help="dump buffers, top prompts and the eval curve of a run")
    i.add_argument("run_dir", type=Path)
    i.add_argument("--json", action="store_true")

    g = sub.add_parser("generate", help="write the configured synthetic dataset as JSONL")
    g.add_argument("--config", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, type=Path)
    return p


def cmd_train(args) -> int:
    rc = cfgmod.load_config(args.config)
    out = runs.execute_run(rc, args.mode, args.out, args.dataset, args.seed)
    report = json.loads((out / "report.json").read_text())
    print(f"run directory: {out}")
    if "steps_to_threshold" in report:
        print(f"best eval reward {report['best_eval_reward']:.4f} at step {report['best_eval_step']}; "
              f"test mean {report['mean_test_reward']}; worker calls {report['total_worker_calls']}")
    else:
        print(f"test mean {report['mean_test_reward']}; worker calls {report['total_worker_calls']}")
    return 0


def cmd_compare(args) -> int:
    rc = cfgmod.load_config(args.config)
    result = runs.compare(rc, args.seeds, args.out, args.dataset, include_evo=args.evo)
    print("seed\tmode\tsteps_to_threshold\tcensored\tmean_test_reward")
    for row in result["per_seed"]:
        for mode in ("rl", "rl_no_buffer", "evo"):
            r = row.get(mode)
            if r and "error" not in r:
                print(f"{row['seed']}\t{mode}\t{r.get('steps_to_threshold', '')}\t{r.get('censored', '')}\t{r['mean_test_reward']}")
    s = result["summary"]
    print(f"median steps: rl={s['rl']['median_steps']} rl_no_buffer={s['rl_no_buffer']['median_steps']}")
    if "relative_efficiency" in result:
        print(f"relative efficiency: {result['relative_efficiency']:.2f}x "
              f"(reference: Dyck 1.91x, DQA 2.40x)")
    print(f"figure: {args.out / 'comparison.png'}")
    return 0


def cmd_inspect(args) -> int:
    info = runs.inspect_run(args.run_dir)
    if info["eval_curve"]:
        runs.write_eval_series(args.run_dir, info["eval_curve"])
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True, default=list))
    else:
        print(runs.render_inspection(info))
    return 0


def cmd_generate(args) -> int:
    rc = cfgmod.load_config(args.config)
    setup = runs.build_setup(rc, None, args.seed)
    write_dataset(args.out, setup.dataset)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"train": cmd_train, "compare": cmd_compare, "inspect": cmd_inspect, "generate": cmd_generate}
    try:
        return handlers[args.command](args)
    except cfgmod.ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except WorkerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for line in exc.attempts:
            print(f"  {line}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
