"""1-D regression demonstration: pretrain a small MLP on a left interval,
finetune on a right interval, with an optional penalty that pins the
model's predictions on the old inputs to the frozen pretrained model.

For unit-variance Gaussian predictive distributions the KL divergence
between two predictions reduces to half their squared difference, so the
penalty R is the mean squared difference between current and frozen
predictions on old-region inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import optim as O
from .autodiff import Tensor

OLD_REGION = (-2.0, -0.5)
NEW_REGION = (0.5, 2.0)
NOISE_STD = 0.05
N_POINTS = 256
HIDDEN = 64
N_HIDDEN_LAYERS = 2


def target_fn(x: np.ndarray) -> np.ndarray:
    return np.sin(3.0 * x)


@dataclass
class ToyDataset:
    x: np.ndarray
    y: np.ndarray
    region: str  # "old" | "new"


def make_dataset(region: str, rng: np.random.Generator, n: int = N_POINTS) -> ToyDataset:
    lo, hi = OLD_REGION if region == "old" else NEW_REGION
    x = rng.uniform(lo, hi, size=n)
    y = target_fn(x) + NOISE_STD * rng.standard_normal(n)
    return ToyDataset(x=x, y=y, region=region)


def init_mlp(rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    dims = [1] + [HIDDEN] * N_HIDDEN_LAYERS + [1]
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"w{i}"] = (rng.standard_normal((din, dout)) / np.sqrt(din)).astype(np.float32)
        params[f"b{i}"] = np.zeros(dout, dtype=np.float32)
    return params


def mlp_forward(params: dict, x: np.ndarray) -> Tensor:
    h: Tensor | np.ndarray = np.asarray(x, dtype=np.float32).reshape(-1, 1)
    h = Tensor(h)
    n_layers = N_HIDDEN_LAYERS + 1
    for i in range(n_layers):
        w = params[f"w{i}"] if isinstance(params[f"w{i}"], Tensor) else Tensor(params[f"w{i}"])
        b = params[f"b{i}"] if isinstance(params[f"b{i}"], Tensor) else Tensor(params[f"b{i}"])
        h = h @ w + b
        if i < n_layers - 1:
            h = ad.gelu(h)
    return h


def predict(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    with ad.no_grad:
        return mlp_forward(params, x).data[:, 0]


def mse(pred: Tensor, y: np.ndarray) -> Tensor:
    d = pred - np.asarray(y, dtype=np.float32).reshape(-1, 1)
    return ad.tensor_mean(d * d)


@dataclass
class ToyTraces:
    old_mse: list[float] = field(default_factory=list)
    new_mse: list[float] = field(default_factory=list)
    drift: list[float] = field(default_factory=list)  # R(old) per eval


def toy_train(
    stage: str,
    seed: int,
    lam: float = 0.0,
    base_params: dict[str, np.ndarray] | None = None,
    steps: int = 1500,
    lr: float = 3e-3,
    eval_every: int = 50,
):
    """Pretrain (MSE on old region) or finetune (MSE on new region plus
    lam * mean squared prediction drift on old inputs vs the frozen base).
    Returns (params, ToyTraces)."""
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "finetune" and base_params is None:
        raise ValueError("finetune needs the pretrained parameters")
    rng = np.random.default_rng(seed)
    old = make_dataset("old", rng)
    new = make_dataset("new", rng)

    if stage == "pretrain":
        params = init_mlp(rng)
        data = old
    else:
        params = {k: v.copy() for k, v in base_params.items()}
        data = new
    frozen_old_pred = predict(base_params, old.x) if stage == "finetune" else None

    opt_cfg = O.OptimizerConfig(peak_lr=lr, weight_decay=0.0, warmup_steps=50, schedule="cosine", total_steps=steps)
    state = O.OptimizerState.init(params)
    traces = ToyTraces()

    def loss_fn(p):
        pred = mlp_forward(p, data.x)
        loss = mse(pred, data.y)
        if stage == "finetune" and lam > 0.0:
            drift_pred = mlp_forward(p, old.x)
            d = drift_pred - frozen_old_pred.reshape(-1, 1)
            loss = loss + lam * ad.tensor_mean(d * d)
        return loss

    for step in range(steps):
        if step % eval_every == 0:
            traces.old_mse.append(float(np.mean((predict(params, old.x) - old.y) ** 2)))
            traces.new_mse.append(float(np.mean((predict(params, new.x) - new.y) ** 2)))
            if frozen_old_pred is not None:
                traces.drift.append(float(np.mean((predict(params, old.x) - frozen_old_pred) ** 2)))
        loss_val, grads = ad.grad(loss_fn, params)
        if not np.isfinite(loss_val):
            raise FloatingPointError("toy training diverged")
        O.adamw_step(params, grads, state, opt_cfg, O.lr_at(opt_cfg, step))

    traces.old_mse.append(float(np.mean((predict(params, old.x) - old.y) ** 2)))
    traces.new_mse.append(float(np.mean((predict(params, new.x) - new.y) ** 2)))
    if frozen_old_pred is not None:
        traces.drift.append(float(np.mean((predict(params, old.x) - frozen_old_pred) ** 2)))
    return params, traces


def toy_band(n_seeds: int, lam: float, grid: np.ndarray | None = None, steps: int = 1500):
    """Pointwise 25/50/75th percentile predictions over seeds after a
    pretrain-then-finetune cycle at the given penalty strength."""
    if n_seeds < 4:
        raise ValueError("need at least 4 seeds for quartiles")
    if grid is None:
        grid = np.linspace(-2.5, 2.5, 101)
    preds = np.stack([per_seed_predictions(seed, lam, grid, steps) for seed in range(n_seeds)])
    p25, p50, p75 = band_percentiles(preds)
    return {"x": grid, "per_seed": preds, "p25": p25, "p50": p50, "p75": p75}


def band_percentiles(preds: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise 25/50/75th percentiles over the seed axis."""
    p25, p50, p75 = np.percentile(preds, [25, 50, 75], axis=0)
    return p25, p50, p75


def per_seed_predictions(seed: int, lam: float, grid: np.ndarray, steps: int = 1500) -> np.ndarray:
    base, _ = toy_train("pretrain", seed=seed, steps=steps)
    tuned, _ = toy_train("finetune", seed=seed, lam=lam, base_params=base, steps=steps)
    return predict(tuned, grid)
