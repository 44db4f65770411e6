"""Self-generated replay: sampling from a frozen reference model and the
two replay objectives (token-level forward KL and plain NTP), combined
with the downstream loss either as separate terms or as one mixed batch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .tasks import TokenBatch, concat_batches


@dataclass(frozen=True)
class FrozenReference:
    """Immutable snapshot of model parameters used for sampling and as the
    KL target distribution."""

    params: dict[str, np.ndarray]
    config: M.ModelConfig
    snapshot_step: int = 0
    corpus_ids: tuple[int, ...] = ()

    @classmethod
    def freeze(cls, params, config, step=0, corpus_ids=()) -> "FrozenReference":
        return cls(
            params={k: v.copy() for k, v in params.items()},
            config=config,
            snapshot_step=step,
            corpus_ids=tuple(corpus_ids),
        )


@dataclass
class ReplayConfig:
    objective: str = "kl"  # "kl" | "ntp"
    lam: float = 1.0
    replay_source: str = "self_generated"  # "self_generated" | "stored_real"
    replay_batch_ratio: float = 0.25
    mixed_batch: bool = False
    sample_temperature: float = 1.0

    def __post_init__(self):
        if self.objective not in ("kl", "ntp"):
            raise ValueError(f"unknown replay objective {self.objective!r}")
        if self.replay_source not in ("self_generated", "stored_real"):
            raise ValueError(f"unknown replay source {self.replay_source!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        # a mixed batch is scored with a single NTP loss by construction
        if self.mixed_batch and self.objective != "ntp":
            raise ValueError("mixed_batch mode implies the ntp objective")


def sample_replay(
    ref: FrozenReference,
    corpus_id: int,
    batch_size: int,
    t: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> TokenBatch:
    """Autoregressive temperature-1 sampling from the frozen reference,
    starting from the corpus identifier, to exactly `t` tokens."""
    seq = np.full((batch_size, 1), corpus_id, dtype=np.int64)
    for _ in range(t - 1):
        with ad.no_grad:
            logits = M.forward(ref.params, seq, ref.config).data[:, -1, :].astype(np.float64)
        if temperature != 1.0:
            logits = logits / temperature
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(batch_size)
        nxt = (u[:, None] > np.cumsum(p, axis=-1)).sum(axis=1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    mask = np.ones_like(seq, dtype=np.float32)
    mask[:, 0] = 0.0
    return TokenBatch(seq, mask)


def ntp_loss(params: dict, batch: TokenBatch, config: M.ModelConfig) -> Tensor:
    """Masked next-token cross-entropy in nats per predicted token."""
    logits = M.forward(params, batch.tokens[:, :-1], config)
    return ad.softmax_cross_entropy(logits, batch.tokens[:, 1:], batch.loss_mask[:, 1:])


def ntp_replay_loss(params: dict, batch: TokenBatch, config: M.ModelConfig) -> Tensor:
    return ntp_loss(params, batch, config)


def kl_replay_loss(params: dict, ref: FrozenReference, batch: TokenBatch, config: M.ModelConfig) -> Tensor:
    """Token-level forward KL from the reference's next-token distribution
    to the current model's, averaged over masked positions. Gradients flow
    only through `params`."""
    with ad.no_grad:
        ref_logits = M.forward(ref.params, batch.tokens[:, :-1], ref.config).data
    logits = M.forward(params, batch.tokens[:, :-1], config)
    return ad.kl_from_reference(ref_logits, logits, batch.loss_mask[:, 1:])


def total_loss(
    params: dict,
    ref: FrozenReference | None,
    downstream: TokenBatch,
    replay_batch: TokenBatch | None,
    cfg: ReplayConfig,
    config: M.ModelConfig,
    pad_id: int = 0,
) -> tuple[Tensor, dict[str, float]]:
    """Combined objective plus per-component values for logging.

    Separate mode returns L_down + lam * L_replay; mixed mode concatenates
    the two batches and returns a single NTP loss over the union.
    """
    if cfg.mixed_batch:
        if replay_batch is None:
            raise ValueError("mixed_batch mode needs a replay batch")
        mixed = concat_batches(downstream, replay_batch, pad_id)
        loss = ntp_loss(params, mixed, config)
        return loss, {"loss_total": loss.item(), "loss_down": loss.item(), "loss_replay": loss.item()}

    down = ntp_loss(params, downstream, config)
    if cfg.lam == 0.0 or replay_batch is None:
        return down, {"loss_total": down.item(), "loss_down": down.item(), "loss_replay": 0.0}
    if cfg.objective == "kl":
        if ref is None:
            raise ValueError("kl objective needs a frozen reference")
        rep = kl_replay_loss(params, ref, replay_batch, config)
    else:
        rep = ntp_replay_loss(params, replay_batch, config)
    total = down + cfg.lam * rep
    return total, {
        "loss_total": total.item(),
        "loss_down": down.item(),
        "loss_replay": rep.item(),
    }


@dataclass
class ReplayPool:
    """Pre-generated replay sequences, drawn without replacement per batch
    (cycling with reshuffle once exhausted)."""

    batch: TokenBatch
    _order: np.ndarray = field(init=False)
    _cursor: int = field(init=False, default=0)

    def __post_init__(self):
        self._order = np.arange(self.batch.tokens.shape[0])

    def __len__(self) -> int:
        return self.batch.tokens.shape[0]

    def draw(self, n: int, rng: np.random.Generator) -> TokenBatch:
        idx = []
        while len(idx) < n:
            if self._cursor == 0:
                rng.shuffle(self._order)
            take = min(n - len(idx), len(self._order) - self._cursor)
            idx.extend(self._order[self._cursor : self._cursor + take])
            self._cursor = (self._cursor + take) % len(self._order)
        idx = np.asarray(idx)
        return TokenBatch(self.batch.tokens[idx], self.batch.loss_mask[idx])


def build_pool(
    ref: FrozenReference,
    corpus_id: int,
    size: int,
    t: int,
    rng: np.random.Generator,
    chunk: int = 1024,
) -> ReplayPool:
    """Sample `size` sequences from the reference in chunks."""
    parts = []
    remaining = size
    while remaining > 0:
        b = min(chunk, remaining)
        parts.append(sample_replay(ref, corpus_id, b, t, rng))
        remaining -= b
    tokens = np.concatenate([p.tokens for p in parts])
    mask = np.concatenate([p.loss_mask for p in parts])
    return ReplayPool(TokenBatch(tokens, mask))
