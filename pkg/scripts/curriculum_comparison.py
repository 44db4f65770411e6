"""Sequential-task curriculum with and without self-generated replay.

Trains one model through add -> reversal -> sort -> modadd, once plainly and
once with KL replay against pools sampled from the frozen pre-phase model,
then prints the final exact-match on every task. The run directories feed
the curriculum figure.

Usage:
    python3 scripts/curriculum_comparison.py --out-dir runs/curriculum
"""

import argparse
from pathlib import Path

import replaylab.harness as H
import replaylab.model as M
import replaylab.optim as O

TASKS = ["add", "reversal", "sort", "modadd"]


def make_spec(replay, args):
    return H.CurriculumSpec(
        model=M.ModelConfig(n_layers=4, d_model=128, n_heads=4, d_head=32,
                            d_ff=512, vocab_size=17, max_context=16),
        optimizer=O.OptimizerConfig(peak_lr=args.peak_lr, warmup_steps=100,
                                    schedule="cosine",
                                    total_steps=args.steps_per_task),
        tasks=TASKS, steps_per_task=args.steps_per_task, batch_size=128,
        eval_every=250, eval_examples=200,
        replay=replay, pool_size=16384, seed=args.seed,
    )


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps-per-task", type=int, default=1250)
    p.add_argument("--peak-lr", type=float, default=1e-3)
    p.add_argument("--lam", type=float, default=1.0)
    args = p.parse_args()

    variants = [
        ("no_replay", None),
        ("replay", {"objective": "kl", "lam": args.lam}),
    ]
    for name, rep in variants:
        _, _, log = H.run_curriculum(make_spec(rep, args), args.out_dir / name)
        finals = " ".join(
            f"{t}={log.last('eval', f'exact_match/{t}'):.3f}" for t in TASKS)
        print(f"{name:>10}: {finals}")


if __name__ == "__main__":
    main()
