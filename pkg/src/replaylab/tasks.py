"""Synthetic data: four arithmetic toy tasks, exact-match evaluation, and
Markov-chain corpora standing in for multi-language pretraining text.

Every sequence starts with a corpus-identifier token (for the toy tasks the
task-name token doubles as the identifier). The NTP loss mask covers all
real tokens after the identifier; exact-match accuracy only scores the
answer span.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as M

TASK_NAMES = ("add", "reversal", "sort", "modadd")

BASE_TOKENS = [str(d) for d in range(10)] + ["|", "="] + list(TASK_NAMES) + ["<pad>"]


class Vocab:
    """Token table: digits, separators, task tokens, pad, then registered
    corpus identifiers and Markov state tokens, in registration order."""

    def __init__(self):
        self._tokens: list[str] = list(BASE_TOKENS)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        self.corpus_ids: dict[str, int] = {t: self._ids[t] for t in TASK_NAMES}

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return self._ids["<pad>"]

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, i: int) -> str:
        return self._tokens[i]

    def _add(self, token: str) -> int:
        if token in self._ids:
            raise ValueError(f"token {token!r} already registered")
        self._ids[token] = len(self._tokens)
        self._tokens.append(token)
        return self._ids[token]

    def register_corpus(self, name: str) -> int:
        """New corpus-identifier token; returns its id."""
        cid = self._add(f"<{name}>")
        self.corpus_ids[name] = cid
        return cid

    def register_states(self, count: int) -> list[int]:
        """Markov state tokens s0..s{count-1}; shared across corpora."""
        return [self._ids[f"s{i}"] if f"s{i}" in self._ids else self._add(f"s{i}")
                for i in range(count)]

    def tokenize(self, text: str) -> list[int]:
        return [self._ids[t] for t in text.split()]

    def detokenize(self, ids) -> str:
        return " ".join(self._tokens[int(i)] for i in ids)


@dataclass
class TokenBatch:
    """Integer token matrix [B, T] with a {0,1} loss mask of the same shape.

    mask[b, t] == 1 means tokens[b, t] is a prediction target (everything
    after the corpus identifier that is not padding).
    """

    tokens: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        if self.tokens.shape != self.loss_mask.shape:
            raise ValueError("tokens and loss_mask must agree in shape")

    @property
    def shape(self):
        return self.tokens.shape


def concat_batches(a: TokenBatch, b: TokenBatch, pad_id: int) -> TokenBatch:
    """Stack two batches along B, right-padding to the longer T."""
    t = max(a.tokens.shape[1], b.tokens.shape[1])

    def padded(x: TokenBatch):
        bsz, tx = x.tokens.shape
        if tx == t:
            return x.tokens, x.loss_mask
        toks = np.full((bsz, t), pad_id, dtype=x.tokens.dtype)
        mask = np.zeros((bsz, t), dtype=x.loss_mask.dtype)
        toks[:, :tx] = x.tokens
        mask[:, :tx] = x.loss_mask
        return toks, mask

    ta, ma = padded(a)
    tb, mb = padded(b)
    return TokenBatch(np.concatenate([ta, tb]), np.concatenate([ma, mb]))


# ---------------------------------------------------------------------------
# arithmetic toy tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskExample:
    task: str
    prompt_tokens: list[int]  # includes the leading corpus identifier
    answer_tokens: list[int]

    @property
    def tokens(self) -> list[int]:
        return self.prompt_tokens + self.answer_tokens


def _digits(n: int, width: int) -> list[str]:
    return list(str(n).zfill(width))


def _example_from_parts(task: str, prompt_str: str, answer_str: str, vocab: Vocab) -> TaskExample:
    return TaskExample(
        task=task,
        prompt_tokens=vocab.tokenize(f"{task} {prompt_str}"),
        answer_tokens=vocab.tokenize(answer_str),
    )


def gen_example(task: str, rng: np.random.Generator, vocab: Vocab) -> TaskExample:
    """One uniform example; operands are 3-digit strings, leading zeros
    allowed. The answer is recomputed from the prompt by integer/string
    arithmetic and re-verified before returning."""
    if task == "add":
        a, b = int(rng.integers(1000)), int(rng.integers(1000))
        prompt = " ".join(_digits(a, 3)) + " | " + " ".join(_digits(b, 3)) + " ="
        answer = " ".join(_digits(a + b, 4))
        assert int(answer.replace(" ", "")) == a + b
    elif task == "modadd":
        a, b = int(rng.integers(1000)), int(rng.integers(1000))
        prompt = " ".join(_digits(a, 3)) + " | " + " ".join(_digits(b, 3)) + " ="
        answer = " ".join(_digits((a + b) % 1000, 3))
        assert int(answer.replace(" ", "")) == (a + b) % 1000
    elif task == "reversal":
        ds = [str(int(d)) for d in rng.integers(0, 10, size=3)]
        prompt = " ".join(ds) + " ="
        answer = " ".join(reversed(ds))
        assert answer.split() == ds[::-1]
    elif task == "sort":
        ds = [str(int(d)) for d in rng.integers(0, 10, size=3)]
        prompt = " ".join(ds) + " ="
        answer = " ".join(sorted(ds))
        assert answer.split() == sorted(ds)
    else:
        raise ValueError(f"unknown task {task!r} (expected one of {TASK_NAMES})")
    return _example_from_parts(task, prompt, answer, vocab)


def task_seq_len(task: str) -> int:
    return 13 if task == "add" else 12 if task == "modadd" else 8


def task_batch(task: str, batch_size: int, rng: np.random.Generator, vocab: Vocab, t: int | None = None) -> TokenBatch:
    """Batch of fresh i.i.d. examples, right-padded to `t` (default: the
    task's natural length)."""
    t = t or task_seq_len(task)
    tokens = np.full((batch_size, t), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((batch_size, t), dtype=np.float32)
    for i in range(batch_size):
        ex = gen_example(task, rng, vocab)
        seq = ex.tokens
        tokens[i, : len(seq)] = seq
        mask[i, 1 : len(seq)] = 1.0
    return TokenBatch(tokens, mask)


def greedy_answers(
    logits_fn: Callable[[np.ndarray], np.ndarray],
    prompts: np.ndarray,
    answer_len: int,
) -> np.ndarray:
    """Argmax-decode `answer_len` tokens after each prompt row."""
    seq = prompts.copy()
    for _ in range(answer_len):
        logits = logits_fn(seq)
        nxt = logits[:, -1, :].argmax(axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq[:, prompts.shape[1] :]


def eval_exact_match(
    params: dict,
    config: M.ModelConfig,
    task: str,
    n_examples: int,
    rng: np.random.Generator,
    vocab: Vocab,
    logits_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Fraction of examples whose greedy-decoded answer span matches
    exactly. Deterministic given the rng state."""
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    if logits_fn is None:

        def logits_fn(toks):
            with ad.no_grad:
                return M.forward(params, toks, config).data

    examples = [gen_example(task, rng, vocab) for _ in range(n_examples)]
    prompts = np.array([ex.prompt_tokens for ex in examples], dtype=np.int64)
    answers = np.array([ex.answer_tokens for ex in examples], dtype=np.int64)
    decoded = greedy_answers(logits_fn, prompts, answers.shape[1])
    return float((decoded == answers).all(axis=1).mean())


# ---------------------------------------------------------------------------
# Markov-chain corpora
# ---------------------------------------------------------------------------


@dataclass
class MarkovCorpus:
    """Finite-state token source with a known entropy floor."""

    name: str
    corpus_id: int
    state_tokens: np.ndarray  # token id per state
    transitions: np.ndarray  # [S, S], rows sum to 1
    stationary: np.ndarray = field(init=False)
    entropy_rate: float = field(init=False)

    def __post_init__(self):
        p = self.transitions
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("transition matrix must be square")
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        self.stationary = stationary_distribution(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(p), 0.0)
        self.entropy_rate = float(-(self.stationary @ plogp.sum(axis=1)))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]


def stationary_distribution(p: np.ndarray, iters: int = 10_000, tol: float = 1e-13) -> np.ndarray:
    """Left fixed point of P by power iteration from uniform."""
    mu = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(iters):
        nxt = mu @ p
        if np.abs(nxt - mu).max() < tol:
            return nxt / nxt.sum()
        mu = nxt
    return mu / mu.sum()


def make_markov_corpus(
    name: str, vocab: Vocab, n_states: int = 24, alpha: float = 0.3, seed: int = 0
) -> MarkovCorpus:
    """Transition rows drawn from a symmetric Dirichlet(alpha); the corpus
    gets its own identifier token but shares state tokens with others."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(n_states, alpha), size=n_states)
    cid = vocab.corpus_ids.get(name)
    if cid is None:
        cid = vocab.register_corpus(name)
    states = np.array(vocab.register_states(n_states), dtype=np.int64)
    return MarkovCorpus(name=name, corpus_id=cid, state_tokens=states, transitions=p)


def make_cycle_corpus(name: str, vocab: Vocab, n_states: int = 8) -> MarkovCorpus:
    """Deterministic cycle: entropy rate 0, learnable to ~0 loss."""
    p = np.roll(np.eye(n_states), 1, axis=1)
    cid = vocab.corpus_ids.get(name)
    if cid is None:
        cid = vocab.register_corpus(name)
    states = np.array(vocab.register_states(n_states), dtype=np.int64)
    return MarkovCorpus(name=name, corpus_id=cid, state_tokens=states, transitions=p)


def gen_markov_batch(corpus: MarkovCorpus, batch_size: int, t: int, rng: np.random.Generator) -> TokenBatch:
    """[corpus id, s_0, s_1, ...] with s_0 ~ stationary and s_{k+1} ~ P[s_k]."""
    if t < 2:
        raise ValueError("need t >= 2 (identifier plus at least one state)")
    states = np.empty((batch_size, t - 1), dtype=np.int64)
    states[:, 0] = rng.choice(corpus.n_states, size=batch_size, p=corpus.stationary)
    cum = np.cumsum(corpus.transitions, axis=1)
    for k in range(1, t - 1):
        u = rng.random(batch_size)
        states[:, k] = (u[:, None] > cum[states[:, k - 1]]).sum(axis=1)
    tokens = np.empty((batch_size, t), dtype=np.int64)
    tokens[:, 0] = corpus.corpus_id
    tokens[:, 1:] = corpus.state_tokens[states]
    mask = np.ones((batch_size, t), dtype=np.float32)
    mask[:, 0] = 0.0
    return TokenBatch(tokens, mask)
