"""Forgetting as a function of pretraining budget.

Pretrains the same model on corpus A for 1x / 10x / 50x steps, finetunes
each base on corpus B with a fixed replay weight, and reports the loss
increase on A. Longer-pretrained bases end at the same or better loss on A,
so any extra forgetting is attributable to the pretraining budget.

Usage:
    python3 scripts/overtraining_forgetting.py --out-dir runs/overtraining
"""

import argparse
import dataclasses
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


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-steps", type=int, nargs="+", default=[400, 4000, 20000])
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--finetune-lr", type=float, default=5e-4)
    args = p.parse_args()

    pretrain = H.RunConfig(
        model=M.ModelConfig(**MODEL),
        optimizer=O.OptimizerConfig(peak_lr=1e-3, warmup_steps=50, schedule="constant"),
        stopping=O.StoppingRule(kind="fixed_steps", n_steps=0),
        data=H.DataSpec([H.CorpusSpec(**A)], seq_len=SEQ_LEN),
        batch_size=32, eval_every=500, eval_batches=2, eval_batch_size=128,
        log_every=100, max_steps=max(args.base_steps), seed=args.seed,
    )
    replay = {"objective": "kl", "lam": args.lam} if args.lam > 0 else None
    finetune = H.RunConfig(
        model=M.ModelConfig(**MODEL),
        optimizer=O.OptimizerConfig(peak_lr=args.finetune_lr, warmup_steps=0,
                                    schedule="constant"),
        stopping=O.StoppingRule(kind="target_loss", target=entropy_target(B),
                                eval_every=25),
        data=H.DataSpec([H.CorpusSpec(**B)], seq_len=SEQ_LEN),
        forgetting_data=H.DataSpec([H.CorpusSpec(**A)], seq_len=SEQ_LEN),
        batch_size=32, eval_every=25, eval_batches=2, eval_batch_size=128,
        log_every=100, max_steps=8000, replay=replay, replay_pool_size=2048,
        seed=args.seed,
    )

    for n in args.base_steps:
        pcfg = dataclasses.replace(
            pretrain, stopping=O.StoppingRule(kind="fixed_steps", n_steps=n))
        base_dir = args.out_dir / f"base_{n}"
        params, _, plog = H.run_pretrain(pcfg, base_dir)
        _, _, flog = H.run_finetune(params, finetune, args.out_dir / f"finetune_{n}")
        print(f"base {n:>6} steps: loss_A={plog.last('eval', 'loss/lang-A'):.4f} "
              f"forgetting={flog.last('eval', 'forgetting/lang-A'):.4f} "
              f"steps_to_target={H.steps_to_target(flog, finetune.stopping.target)}")


if __name__ == "__main__":
    main()
