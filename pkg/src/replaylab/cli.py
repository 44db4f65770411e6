"""Command-line entry points for running and inspecting experiments.

Run configs are JSON files mirroring the dataclasses in `harness` (see
README for the schema); common fields are overridable with flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from . import model as M
from . import mlp_toy
from . import replay as R
from . import tasks as T


def _load_config(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        cfg.setdefault("replay", {})["lam"] = args.lam
    if getattr(args, "steps", None) is not None:
        cfg.setdefault("stopping", {"kind": "fixed_steps"})["n_steps"] = args.steps
    if getattr(args, "peak_lr", None) is not None:
        cfg.setdefault("optimizer", {})["peak_lr"] = args.peak_lr
    return cfg


def cmd_pretrain(args):
    cfg = H.RunConfig.from_dict(_apply_overrides(_load_config(args.config), args))
    _, _, log = H.run_pretrain(cfg, args.out_dir)
    print(f"outcome: {log.meta['outcome']}")


def cmd_finetune(args):
    cfg_dict = _apply_overrides(_load_config(args.config), args)
    if args.base_checkpoint:
        cfg_dict["base_checkpoint"] = args.base_checkpoint
    cfg = H.RunConfig.from_dict(cfg_dict)
    if not cfg.base_checkpoint:
        raise SystemExit("finetune needs --base-checkpoint or base_checkpoint in the config")
    _, params = M.load_checkpoint(cfg.base_checkpoint)
    _, _, log = H.run_finetune(params, cfg, args.out_dir)
    print(f"outcome: {log.meta['outcome']}")


def cmd_curriculum(args):
    cfg_dict = _load_config(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.lam is not None:
        cfg_dict.setdefault("replay", {})["lam"] = args.lam
    spec = H.CurriculumSpec(**cfg_dict)
    _, _, log = H.run_curriculum(spec, args.out_dir)
    for task in spec.tasks:
        print(f"exact_match/{task}: {log.last('eval', f'exact_match/{task}'):.3f}")


def cmd_sweep(args):
    grid = _load_config(args.config)
    runs = [(r["run_id"], r["kind"], r["config"]) for r in grid["runs"]]
    results = H.run_sweep(runs, args.out_dir, parallelism=args.parallelism)
    for r in results:
        print(f"{r['run_id']}: {r['outcome']}")


def cmd_eval(args):
    config, params = M.load_checkpoint(args.checkpoint)
    vocab = T.Vocab()
    rng = np.random.default_rng(args.seed or 0)
    for task in T.TASK_NAMES:
        acc = T.eval_exact_match(params, config, task, args.n_examples, rng, vocab)
        print(f"exact_match/{task}: {acc:.3f}")


def cmd_sample(args):
    config, params = M.load_checkpoint(args.checkpoint)
    vocab = T.Vocab()
    if args.corpus not in vocab.corpus_ids:
        vocab.register_corpus(args.corpus)
    ref = R.FrozenReference.freeze(params, config)
    rng = np.random.default_rng(args.seed or 0)
    batch = R.sample_replay(ref, vocab.corpus_ids[args.corpus], args.n, args.length, rng)
    # checkpoints store vocab_size but not token names; ids past the known
    # vocabulary render as ?<id>
    names = [vocab.token(i) if i < len(vocab) else f"?{i}" for i in range(config.vocab_size)]
    for row in batch.tokens:
        print(" ".join(str(i) for i in row))
        print("# " + " ".join(names[i] for i in row))


def cmd_sample_data(args):
    vocab = T.Vocab()
    rng = np.random.default_rng(args.seed or 0)
    if args.source in T.TASK_NAMES:
        for _ in range(args.n):
            ex = T.gen_example(args.source, rng, vocab)
            print(vocab.detokenize(ex.tokens))
    else:
        corpus = T.make_markov_corpus(args.source, vocab, seed=args.seed or 0)
        batch = T.gen_markov_batch(corpus, args.n, args.length, rng)
        for row in batch.tokens:
            print(vocab.detokenize(row))


def cmd_mlp_demo(args):
    band = mlp_toy.toy_band(args.n_seeds, args.lam, steps=args.steps)
    out = {
        "kind": "mlp_band",
        "lam": args.lam,
        "n_seeds": args.n_seeds,
        "old_region": list(mlp_toy.OLD_REGION),
        "new_region": list(mlp_toy.NEW_REGION),
        "note": "dataset and MLP size are artifact choices; only the old/new split is structural",
        "x": band["x"].tolist(),
        "per_seed": band["per_seed"].tolist(),
        "p25": band["p25"].tolist(),
        "p50": band["p50"].tolist(),
        "p75": band["p75"].tolist(),
    }
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        path = Path(args.out_dir) / "mlp_band.json"
        path.write_text(json.dumps(out))
        print(f"wrote {path}")
    else:
        json.dump(out, sys.stdout)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="replaylab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)

    p = sub.add_parser("pretrain", help="train from scratch on a corpus mixture")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--peak-lr", dest="peak_lr", type=float, default=None)
    p.set_defaults(func=cmd_pretrain, lam=None)

    p = sub.add_parser("finetune", help="finetune a checkpoint with optional replay")
    common(p)
    p.add_argument("--base-checkpoint", default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--peak-lr", dest="peak_lr", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("curriculum", help="sequential toy-task training")
    common(p)
    p.add_argument("--lam", type=float, default=None)
    p.set_defaults(func=cmd_curriculum)

    p = sub.add_parser("sweep", help="run a grid of configs as parallel workers")
    common(p)
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint on the toy tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-examples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="corpus identifier name (e.g. a task name)")
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sample-data", help="emit generated training examples as text")
    p.add_argument("--source", required=True, help="task name or markov corpus name")
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_data)

    p = sub.add_parser("mlp-demo", help="1-D regression forgetting demo")
    p.add_argument("--n-seeds", type=int, default=8)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_mlp_demo)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
