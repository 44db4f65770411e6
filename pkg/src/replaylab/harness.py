"""Experiment orchestration: pretrain/finetune loops, the sequential
four-task curriculum, grid sweeps over run configs, and metric logging.

Every run is fully determined by (RunConfig, seed). Metrics stream to a
line-delimited JSON file (one record per line: step, split, metric, value,
wall_ms) next to a meta.json carrying the config, its hash, and the run
outcome.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from . import optim as O
from . import replay as R
from . import tasks as T

RUNLOG_VERSION = "replaylab-0.1.0"

OUTCOME_CONVERGED = "converged"
OUTCOME_FAILED = "failed_to_converge"
OUTCOME_EARLY_STOPPED = "early_stopped"
OUTCOME_ERROR = "error"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    name: str
    kind: str = "markov"  # "markov" | "cycle"
    n_states: int = 24
    alpha: float = 0.3
    seed: int = 0
    weight: float = 1.0


@dataclass
class DataSpec:
    corpora: list[CorpusSpec]
    seq_len: int = 32
    dataset_tokens: int | None = None  # finite-dataset size for epoch accounting

    def __post_init__(self):
        self.corpora = [CorpusSpec(**c) if isinstance(c, dict) else c for c in self.corpora]


@dataclass
class RunConfig:
    model: M.ModelConfig
    optimizer: O.OptimizerConfig
    stopping: O.StoppingRule
    data: DataSpec
    replay: R.ReplayConfig | None = None
    forgetting_data: DataSpec | None = None  # pretraining distribution to track during finetune
    base_checkpoint: str | None = None  # finetune start point (sweep workers load it)
    seed: int = 0
    batch_size: int = 256
    eval_every: int = 200
    eval_batches: int = 4
    eval_batch_size: int = 256
    log_every: int = 10
    max_steps: int = 100_000
    replay_pool_size: int = 8192
    replay_fresh: bool = False  # resample replay data from the reference every step

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.ModelConfig(**self.model)
        if isinstance(self.optimizer, dict):
            self.optimizer = O.OptimizerConfig(**self.optimizer)
        if isinstance(self.stopping, dict):
            self.stopping = O.StoppingRule(**self.stopping)
        if isinstance(self.data, dict):
            self.data = DataSpec(**self.data)
        if isinstance(self.replay, dict):
            self.replay = R.ReplayConfig(**self.replay)
        if isinstance(self.forgetting_data, dict):
            self.forgetting_data = DataSpec(**self.forgetting_data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------


class RunLog:
    """Append-only metric stream plus run-level metadata."""

    def __init__(self, config_hash: str = "", config: dict | None = None):
        self.records: list[dict] = []
        self.meta = {
            "config_hash": config_hash,
            "version": RUNLOG_VERSION,
            "outcome": None,
            "config": config or {},
        }
        self._t0 = time.monotonic()
        self._last_step: dict[tuple, int] = {}

    def log(self, step: int, split: str, metric: str, value: float) -> None:
        key = (split, metric)
        prev = self._last_step.get(key)
        if prev is not None and step <= prev:
            raise ValueError(f"non-increasing step {step} for stream {key}")
        self._last_step[key] = step
        self.records.append(
            {
                "step": int(step),
                "split": split,
                "metric": metric,
                "value": float(value),
                "wall_ms": (time.monotonic() - self._t0) * 1000.0,
            }
        )

    def values(self, split: str, metric: str) -> tuple[list[int], list[float]]:
        steps, vals = [], []
        for r in self.records:
            if r["split"] == split and r["metric"] == metric:
                steps.append(r["step"])
                vals.append(r["value"])
        return steps, vals

    def last(self, split: str, metric: str) -> float | None:
        _, vals = self.values(split, metric)
        return vals[-1] if vals else None

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")
        with open(out / "meta.json", "w") as f:
            json.dump(self.meta, f, indent=2)

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunLog":
        """Reload a finished run's log from its output directory."""
        run_dir = Path(run_dir)
        with open(run_dir / "meta.json") as f:
            meta = json.load(f)
        log = cls(meta.get("config_hash", ""), meta.get("config"))
        log.meta = meta
        log.records = cls.read_records(run_dir / "metrics.jsonl")
        return log

    @staticmethod
    def read_records(path: str | Path) -> list[dict]:
        records = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records


def steps_to_target(log: RunLog, target: float, split: str = "eval", metric: str = "loss/downstream"):
    """First eval step at-or-below target, or None if never reached."""
    for step, value in zip(*log.values(split, metric)):
        if value <= target:
            return step
    return None


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------


def build_corpora(spec: DataSpec, vocab: T.Vocab) -> list[T.MarkovCorpus]:
    out = []
    for c in spec.corpora:
        if c.kind == "markov":
            out.append(T.make_markov_corpus(c.name, vocab, n_states=c.n_states, alpha=c.alpha, seed=c.seed))
        elif c.kind == "cycle":
            out.append(T.make_cycle_corpus(c.name, vocab, n_states=c.n_states))
        else:
            raise ValueError(f"unknown corpus kind {c.kind!r}")
    return out


def build_vocab(cfg: RunConfig) -> tuple[T.Vocab, list[T.MarkovCorpus], list[T.MarkovCorpus]]:
    """Vocabulary and corpora; registration order fixed by the config.

    Returns (vocab, data corpora, forgetting corpora). Corpora shared
    between the two specs (by name) are built once.
    """
    vocab = T.Vocab()
    corpora = build_corpora(cfg.data, vocab)
    by_name = {c.name: c for c in corpora}
    forgetting = []
    if cfg.forgetting_data is not None:
        for c in cfg.forgetting_data.corpora:
            if c.name in by_name:
                forgetting.append(by_name[c.name])
            else:
                forgetting.extend(build_corpora(DataSpec([c]), vocab))
    return vocab, corpora, forgetting


def _eval_sets(corpora, cfg: RunConfig, rng) -> dict[str, list[T.TokenBatch]]:
    return {
        c.name: [
            T.gen_markov_batch(c, cfg.eval_batch_size, cfg.data.seq_len, rng)
            for _ in range(cfg.eval_batches)
        ]
        for c in corpora
    }


def _eval_loss(params, config, batches) -> float:
    with ad.no_grad:
        losses = [R.ntp_loss(params, b, config).item() for b in batches]
    return float(np.mean(losses))


def _epochs(step: int, cfg: RunConfig) -> float:
    if cfg.data.dataset_tokens is None:
        return 0.0
    return step * cfg.batch_size * cfg.data.seq_len / cfg.data.dataset_tokens


def _mixture_batch(corpora, weights, batch_size, seq_len, rng) -> T.TokenBatch:
    """Per-sequence mixture draw; a weight-0 corpus never contributes."""
    if len(corpora) == 1:
        return T.gen_markov_batch(corpora[0], batch_size, seq_len, rng)
    counts = rng.multinomial(batch_size, weights)
    parts = [
        T.gen_markov_batch(c, int(n), seq_len, rng)
        for c, n in zip(corpora, counts)
        if n > 0
    ]
    tokens = np.concatenate([p.tokens for p in parts])
    mask = np.concatenate([p.loss_mask for p in parts])
    return T.TokenBatch(tokens, mask)


# ---------------------------------------------------------------------------
# pretrain / finetune
# ---------------------------------------------------------------------------


def run_pretrain(cfg: RunConfig, out_dir: str | Path | None = None):
    """Train from scratch on the configured corpus mixture.

    Returns (params, vocab, log). Logs per-corpus eval losses plus the
    weighted mixture loss that drives the stopping rule.
    """
    vocab, corpora, _ = build_vocab(cfg)
    if cfg.model.vocab_size < len(vocab):
        raise ValueError(f"model vocab_size {cfg.model.vocab_size} < vocabulary {len(vocab)}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    data_rng = np.random.default_rng(seeds[0])
    eval_rng = np.random.default_rng(seeds[1])
    params = M.init_params(cfg.model, cfg.seed)

    log = RunLog(cfg.config_hash(), cfg.to_dict())
    weights = np.array([c.weight for c in cfg.data.corpora], dtype=np.float64)
    weights = weights / weights.sum()
    eval_sets = _eval_sets(corpora, cfg, eval_rng)

    state = O.OptimizerState.init(params)
    eval_history: list[float] = []
    outcome = OUTCOME_CONVERGED
    last_good = {k: v.copy() for k, v in params.items()}

    total = cfg.stopping.n_steps if cfg.stopping.kind == "fixed_steps" else cfg.max_steps
    step = 0
    while step < min(total, cfg.max_steps):
        batch = _mixture_batch(corpora, weights, cfg.batch_size, cfg.data.seq_len, data_rng)
        try:
            loss_val, grads = ad.grad(lambda p: R.ntp_loss(p, batch, cfg.model), params)
        except ad.NonFiniteLossError:
            outcome = OUTCOME_FAILED
            params = last_good
            break
        O.adamw_step(params, grads, state, cfg.optimizer, O.lr_at(cfg.optimizer, step))
        step += 1
        if step % cfg.log_every == 0 or step == 1:
            log.log(step, "train", "loss", loss_val)
        if step % cfg.eval_every == 0:
            mixture = 0.0
            for c, w in zip(corpora, weights):
                el = _eval_loss(params, cfg.model, eval_sets[c.name])
                log.log(step, "eval", f"loss/{c.name}", el)
                mixture += w * el
            log.log(step, "eval", "loss/mixture", mixture)
            eval_history.append(mixture)
            last_good = {k: v.copy() for k, v in params.items()}
            decision = O.should_stop(cfg.stopping, eval_history, _epochs(step, cfg))
            if decision.stop:
                outcome = OUTCOME_CONVERGED if decision.reason == "target_reached" else (
                    OUTCOME_EARLY_STOPPED if decision.reason == "early_stopped" else OUTCOME_FAILED
                )
                break
    else:
        if cfg.stopping.kind == "target_loss":
            outcome = OUTCOME_FAILED

    log.meta["outcome"] = outcome
    if out_dir is not None:
        out_dir = Path(out_dir)
        log.write(out_dir)
        M.save_checkpoint(out_dir / "checkpoint.bin", cfg.model, params)
    return params, vocab, log


def run_finetune(base_params: dict, cfg: RunConfig, out_dir: str | Path | None = None):
    """Finetune on the downstream source with optional replay.

    `cfg.data` is the downstream corpus; `cfg.forgetting_data` names the
    pretraining corpora whose eval loss is tracked as the forgetting
    metric. The reference model is frozen from `base_params` at entry.
    """
    vocab, corpora, forget_corpora = build_vocab(cfg)
    if len(corpora) != 1:
        raise ValueError("finetune expects a single downstream corpus")
    downstream = corpora[0]
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng = np.random.default_rng(seeds[0])
    eval_rng = np.random.default_rng(seeds[1])
    replay_rng = np.random.default_rng(seeds[2])

    params = {k: v.copy() for k, v in base_params.items()}
    rcfg = cfg.replay or R.ReplayConfig(lam=0.0)
    use_replay = rcfg.lam > 0.0 or rcfg.mixed_batch
    ref = R.FrozenReference.freeze(base_params, cfg.model) if use_replay else None

    # replay batches come from the pretraining distribution
    pools: list[tuple[T.MarkovCorpus, R.ReplayPool | None]] = []
    if use_replay:
        if not forget_corpora:
            raise ValueError("replay finetuning needs forgetting_data corpora")
        for c in forget_corpora:
            pool = None
            if rcfg.replay_source == "self_generated" and not cfg.replay_fresh:
                pool = R.build_pool(
                    ref, c.corpus_id, cfg.replay_pool_size, cfg.data.seq_len, replay_rng
                )
            pools.append((c, pool))

    def replay_batch(n: int) -> T.TokenBatch:
        per = max(1, n // len(pools))
        parts = []
        for c, pool in pools:
            if rcfg.replay_source == "stored_real":
                parts.append(T.gen_markov_batch(c, per, cfg.data.seq_len, replay_rng))
            elif pool is not None:
                parts.append(pool.draw(per, replay_rng))
            else:
                parts.append(R.sample_replay(ref, c.corpus_id, per, cfg.data.seq_len, replay_rng))
        return T.TokenBatch(
            np.concatenate([p.tokens for p in parts]),
            np.concatenate([p.loss_mask for p in parts]),
        )

    log = RunLog(cfg.config_hash(), cfg.to_dict())
    eval_sets = _eval_sets([downstream] + forget_corpora, cfg, eval_rng)

    start_pretrain_loss = {
        c.name: _eval_loss(params, cfg.model, eval_sets[c.name]) for c in forget_corpora
    }
    for name, v in start_pretrain_loss.items():
        log.log(0, "eval", f"loss/{name}", v)
    log.log(0, "eval", "loss/downstream", _eval_loss(params, cfg.model, eval_sets[downstream.name]))

    state = O.OptimizerState.init(params)
    eval_history: list[float] = []
    outcome = OUTCOME_CONVERGED
    n_replay = max(1, int(round(cfg.batch_size * rcfg.replay_batch_ratio))) if use_replay else 0
    total = cfg.stopping.n_steps if cfg.stopping.kind == "fixed_steps" else cfg.max_steps
    best_params = None

    step = 0
    while step < min(total, cfg.max_steps):
        down = T.gen_markov_batch(downstream, cfg.batch_size, cfg.data.seq_len, data_rng)
        rep = replay_batch(n_replay) if use_replay else None
        parts_out: dict[str, float] = {}

        def loss_fn(p):
            loss, parts = R.total_loss(p, ref, down, rep, rcfg, cfg.model, vocab.pad_id)
            parts_out.update(parts)
            return loss

        try:
            _, grads = ad.grad(loss_fn, params)
        except ad.NonFiniteLossError:
            outcome = OUTCOME_FAILED
            break
        O.adamw_step(params, grads, state, cfg.optimizer, O.lr_at(cfg.optimizer, step))
        step += 1
        if step % cfg.log_every == 0 or step == 1:
            log.log(step, "train", "loss_total", parts_out["loss_total"])
            log.log(step, "train", "loss_down", parts_out["loss_down"])
            log.log(step, "train", "loss_replay", parts_out["loss_replay"])
        if step % cfg.eval_every == 0:
            dl = _eval_loss(params, cfg.model, eval_sets[downstream.name])
            log.log(step, "eval", "loss/downstream", dl)
            for c in forget_corpora:
                pl = _eval_loss(params, cfg.model, eval_sets[c.name])
                log.log(step, "eval", f"loss/{c.name}", pl)
                log.log(step, "eval", f"forgetting/{c.name}", pl - start_pretrain_loss[c.name])
            eval_history.append(dl)
            decision = O.should_stop(cfg.stopping, eval_history, _epochs(step, cfg))
            if decision.best_index is not None and decision.best_index == len(eval_history) - 1:
                best_params = {k: v.copy() for k, v in params.items()}
            if decision.stop:
                if decision.reason == "target_reached":
                    outcome = OUTCOME_CONVERGED
                elif decision.reason == "early_stopped":
                    outcome = OUTCOME_EARLY_STOPPED
                    if best_params is not None:
                        params = best_params
                else:
                    outcome = OUTCOME_FAILED
                break
    else:
        if cfg.stopping.kind == "target_loss":
            outcome = OUTCOME_FAILED

    log.meta["outcome"] = outcome
    if out_dir is not None:
        out_dir = Path(out_dir)
        log.write(out_dir)
        M.save_checkpoint(out_dir / "checkpoint.bin", cfg.model, params)
    return params, vocab, log


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------


@dataclass
class CurriculumSpec:
    model: M.ModelConfig
    optimizer: O.OptimizerConfig
    tasks: list[str] = field(default_factory=lambda: list(T.TASK_NAMES))
    steps_per_task: int = 1500
    replay: R.ReplayConfig | None = None
    pool_size: int = 50_000
    batch_size: int = 128
    seq_len: int = 16
    seed: int = 0
    eval_every: int = 100
    eval_examples: int = 200
    log_every: int = 20

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.ModelConfig(**self.model)
        if isinstance(self.optimizer, dict):
            self.optimizer = O.OptimizerConfig(**self.optimizer)
        if isinstance(self.replay, dict):
            self.replay = R.ReplayConfig(**self.replay)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def run_curriculum(spec: CurriculumSpec, out_dir: str | Path | None = None):
    """Sequentially train the toy tasks, optionally with self-generated
    replay of all earlier tasks (pools drawn from a snapshot frozen before
    each new task). Exact-match accuracy on every task is logged at a
    fixed cadence throughout."""
    vocab = T.Vocab()
    if spec.model.vocab_size < len(vocab):
        raise ValueError(f"model vocab_size {spec.model.vocab_size} < vocabulary {len(vocab)}")
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    data_rng = np.random.default_rng(seeds[0])
    eval_seed = seeds[1]
    replay_rng = np.random.default_rng(seeds[2])

    params = M.init_params(spec.model, spec.seed)
    log = RunLog(spec.config_hash(), spec.to_dict())
    rcfg = spec.replay
    use_replay = rcfg is not None and (rcfg.lam > 0.0 or rcfg.mixed_batch)

    def eval_all(step):
        for task in spec.tasks:
            rng = np.random.default_rng(eval_seed)  # fixed eval set every time
            acc = T.eval_exact_match(params, spec.model, task, spec.eval_examples, rng, vocab)
            log.log(step, "eval", f"exact_match/{task}", acc)

    global_step = 0
    n_replay = max(1, int(round(spec.batch_size * rcfg.replay_batch_ratio))) if use_replay else 0

    for phase, task in enumerate(spec.tasks):
        log.log(global_step + 1, "meta", "phase_start", phase)
        ref = None
        pools: dict[str, R.ReplayPool] = {}
        if use_replay and phase > 0:
            ref = R.FrozenReference.freeze(params, spec.model, step=global_step)
            for prior in spec.tasks[:phase]:
                pools[prior] = R.build_pool(
                    ref, vocab.corpus_ids[prior], spec.pool_size,
                    T.task_seq_len(prior), replay_rng,
                )

        opt_cfg = dataclasses.replace(spec.optimizer, total_steps=spec.steps_per_task)
        state = O.OptimizerState.init(params)

        for local_step in range(spec.steps_per_task):
            down = T.task_batch(task, spec.batch_size, data_rng, vocab)
            rep = None
            if pools:
                per = max(1, n_replay // len(pools))
                drawn = [pools[p].draw(per, replay_rng) for p in pools]
                rep = drawn[0]
                for extra in drawn[1:]:
                    rep = T.concat_batches(rep, extra, vocab.pad_id)
            parts_out: dict[str, float] = {}

            def loss_fn(p):
                loss, parts = R.total_loss(p, ref, down, rep, rcfg or R.ReplayConfig(lam=0.0), spec.model, vocab.pad_id)
                parts_out.update(parts)
                return loss

            _, grads = ad.grad(loss_fn, params)
            O.adamw_step(params, grads, state, opt_cfg, O.lr_at(opt_cfg, local_step))
            global_step += 1
            if global_step % spec.log_every == 0:
                log.log(global_step, "train", "loss_total", parts_out["loss_total"])
                log.log(global_step, "train", "loss_down", parts_out["loss_down"])
                log.log(global_step, "train", "loss_replay", parts_out["loss_replay"])
            if global_step % spec.eval_every == 0:
                eval_all(global_step)

    if global_step % spec.eval_every != 0:
        eval_all(global_step)
    log.meta["outcome"] = OUTCOME_CONVERGED
    if out_dir is not None:
        out_dir = Path(out_dir)
        log.write(out_dir)
        M.save_checkpoint(out_dir / "checkpoint.bin", spec.model, params)
    return params, vocab, log


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _sweep_worker(args: tuple) -> dict:
    run_id, kind, cfg_dict, run_dir = args
    try:
        if kind == "pretrain":
            cfg = RunConfig.from_dict(cfg_dict)
            _, _, log = run_pretrain(cfg, run_dir)
        elif kind == "finetune":
            cfg = RunConfig.from_dict(cfg_dict)
            if not cfg.base_checkpoint:
                raise ValueError("finetune sweep run needs base_checkpoint")
            _, base_params = M.load_checkpoint(cfg.base_checkpoint)
            _, _, log = run_finetune(base_params, cfg, run_dir)
        elif kind == "curriculum":
            spec = CurriculumSpec(**cfg_dict)
            _, _, log = run_curriculum(spec, run_dir)
        else:
            raise ValueError(f"unknown run kind {kind!r}")
    except Exception:
        return {
            "run_id": run_id,
            "dir": str(run_dir),
            "outcome": OUTCOME_ERROR,
            "summary": {"error": traceback.format_exc(limit=3)},
        }
    summary = {}
    for key in ("loss/downstream", "loss/mixture"):
        v = log.last("eval", key)
        if v is not None:
            summary[key.replace("loss/", "final_loss_")] = v
    for r in log.records:
        if r["split"] == "eval" and r["metric"].startswith("forgetting/"):
            summary["final_" + r["metric"].replace("/", "_")] = r["value"]
    summary["steps"] = max((r["step"] for r in log.records), default=0)
    return {"run_id": run_id, "dir": str(run_dir), "outcome": log.meta["outcome"], "summary": summary}


def run_sweep(
    runs: list[tuple[str, str, dict]],
    out_root: str | Path,
    parallelism: int = 1,
) -> list[dict]:
    """Execute (run_id, kind, config-dict) triples as independent worker
    processes; failures are recorded in the manifest and do not abort the
    sweep. Returns the manifest entries in input order."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = [(run_id, kind, cfg, str(out_root / run_id)) for run_id, kind, cfg in runs]
    if parallelism <= 1:
        results = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    manifest = {"runs": results}
    with open(out_root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return results
