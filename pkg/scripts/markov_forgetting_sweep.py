"""Learning-rate and lambda sweeps on the two-corpus Markov setup.

Pretrains a small transformer on corpus A to its entropy-anchored target,
then finetunes on corpus B across a grid of learning rates (no replay) and
a grid of replay weights (KL replay at a fixed lr), writing one run
directory per cell plus a sweep manifest. The resulting logs feed the
lr_flow and frontier figures.

Usage:
    python3 scripts/markov_forgetting_sweep.py --out-dir runs/markov_sweep
"""

import argparse
import json
from pathlib import Path

import replaylab.harness as H
import replaylab.model as M
import replaylab.optim as O
import replaylab.tasks as T

MODEL = dict(n_layers=2, d_model=64, n_heads=4, d_head=16, d_ff=256,
             vocab_size=48, max_context=32)
SEQ_LEN = 24
A = dict(name="lang-A", kind="markov", n_states=24, alpha=0.3, seed=0)
B = dict(name="lang-B", kind="markov", n_states=24, alpha=0.3, seed=1)


def entropy_target(spec, extra=0.1):
    c = T.make_markov_corpus(spec["name"], T.Vocab(), n_states=spec["n_states"],
                             alpha=spec["alpha"], seed=spec["seed"])
    return c.entropy_rate + extra


def pretrain_config(seed):
    return H.RunConfig(
        model=M.ModelConfig(**MODEL),
        optimizer=O.OptimizerConfig(peak_lr=1e-3, warmup_steps=50, schedule="constant"),
        stopping=O.StoppingRule(kind="target_loss", target=entropy_target(A),
                                eval_every=50),
        data=H.DataSpec([H.CorpusSpec(**A)], seq_len=SEQ_LEN),
        batch_size=32, eval_every=50, eval_batches=2, eval_batch_size=128,
        log_every=50, max_steps=6000, seed=seed,
    )


def finetune_config(base, lr, replay, seed):
    return H.RunConfig(
        model=M.ModelConfig(**MODEL),
        optimizer=O.OptimizerConfig(peak_lr=lr, warmup_steps=0, schedule="constant"),
        stopping=O.StoppingRule(kind="target_loss", target=entropy_target(B),
                                eval_every=25),
        data=H.DataSpec([H.CorpusSpec(**B)], seq_len=SEQ_LEN),
        forgetting_data=H.DataSpec([H.CorpusSpec(**A)], seq_len=SEQ_LEN),
        batch_size=32, eval_every=25, eval_batches=2, eval_batch_size=128,
        log_every=100, max_steps=8000, replay=replay, replay_pool_size=2048,
        base_checkpoint=str(base), seed=seed,
    )


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lrs", type=float, nargs="+",
                   default=[1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5])
    p.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.1, 1.0, 10.0])
    p.add_argument("--frontier-lr", type=float, default=5e-4)
    p.add_argument("--parallelism", type=int, default=1)
    args = p.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    base_dir = args.out_dir / "base"
    _, _, log = H.run_pretrain(pretrain_config(args.seed), base_dir)
    print(f"pretrain: {log.meta['outcome']} "
          f"(loss/lang-A {log.last('eval', 'loss/lang-A'):.4f})")
    base_ckpt = base_dir / "checkpoint.bin"

    runs = []
    for lr in args.lrs:
        cfg = finetune_config(base_ckpt, lr, None, args.seed)
        runs.append((f"lr_{lr:g}", "finetune", cfg.to_dict()))
    for lam in args.lams:
        rep = {"objective": "kl", "lam": lam} if lam > 0 else None
        cfg = finetune_config(base_ckpt, args.frontier_lr, rep, args.seed)
        runs.append((f"lam_{lam:g}", "finetune", cfg.to_dict()))

    results = H.run_sweep(runs, args.out_dir, parallelism=args.parallelism)
    target = entropy_target(B)
    table = []
    for r in results:
        run_log = H.RunLog.read(args.out_dir / r["run_id"])
        steps = H.steps_to_target(run_log, target)
        forget = run_log.last("eval", "forgetting/lang-A")
        table.append(dict(run_id=r["run_id"], outcome=r["outcome"],
                          steps_to_target=steps, forgetting=forget))
        print(f"{r['run_id']:>12}: steps_to_target={steps} forgetting={forget:.4f}")
    (args.out_dir / "summary.json").write_text(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
