"""Pretraining losses, the regularizer warm-up, and gradient verification.

The reconstruction term averages squared error over voxels that are both
inside hidden patches and inside the source extent.  The variance and
covariance terms act on pooled per-session features stacked across the
batch (unbiased statistics, divisor B-1).  Everything here is paired with
an analytic gradient so the training loop never touches finite differences;
`gradcheck` compares the two routes on sampled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateLossError,
    InsufficientBatchError,
    NonFiniteLossError,
    RangeError,
)
from .network import NetConfig, model_backward, model_forward
from .tokenizer import TokenBatch

VAR_EPS = 1e-4
LAMBDA_VAR_MAX = 0.1
LAMBDA_COV_MAX = 0.005
WARMUP_EPOCHS = 5


@dataclass
class LossReport:
    l_mae: float
    l_var: float
    l_cov: float
    l_total: float
    lambda_var: float
    lambda_cov: float
    n_valid_elements: int

    def to_dict(self) -> dict:
        return {
            "l_mae": self.l_mae, "l_var": self.l_var, "l_cov": self.l_cov,
            "l_total": self.l_total, "lambda_var": self.lambda_var,
            "lambda_cov": self.lambda_cov,
            "n_valid_elements": self.n_valid_elements,
        }


def _hidden_targets(tokens):
    ps = tokens.patch_set
    hid = tokens.hidden_indices()
    return ps.patches[hid], ps.extent_mask[hid]


def loss_mae(recons, batch: TokenBatch):
    """Masked MSE over hidden, in-extent voxels; returns (value, N)."""
    total = 0.0
    count = 0
    for s, tokens in enumerate(batch.sessions):
        target, mask = _hidden_targets(tokens)
        if target.shape[0] == 0:
            continue
        recon = recons[s]
        diff = (recon - target.astype(recon.dtype)) * mask
        total += float((diff * diff).sum())
        count += int(mask.sum())
    if count == 0:
        raise DegenerateLossError("no hidden valid voxels in batch")
    return total / count, count


def loss_mae_grads(recons, batch: TokenBatch, n_valid: int):
    """d l_mae / d recon for each session."""
    grads = []
    for s, tokens in enumerate(batch.sessions):
        target, mask = _hidden_targets(tokens)
        recon = recons[s]
        if target.shape[0] == 0:
            grads.append(np.zeros_like(recon))
            continue
        grads.append(2.0 * (recon - target.astype(recon.dtype)) * mask / n_valid)
    return grads


def loss_var(z: np.ndarray, eps: float = VAR_EPS) -> float:
    """Hinge on per-dimension spread: mean_j relu(1 - sqrt(Var_j + eps))."""
    z = np.asarray(z)
    if z.shape[0] < 2:
        raise InsufficientBatchError("variance term needs >= 2 pooled rows")
    var = z.var(axis=0, ddof=1)
    return float(np.maximum(0.0, 1.0 - np.sqrt(var + eps)).mean())


def loss_var_grad(z: np.ndarray, eps: float = VAR_EPS):
    z = np.asarray(z)
    if z.shape[0] < 2:
        raise InsufficientBatchError("variance term needs >= 2 pooled rows")
    b, d = z.shape
    var = z.var(axis=0, ddof=1)
    std = np.sqrt(var + eps)
    value = float(np.maximum(0.0, 1.0 - std).mean())
    active = (std < 1.0).astype(z.dtype)
    dvar = -active / (2.0 * std) / d
    dz = dvar[None, :] * 2.0 * (z - z.mean(axis=0)) / (b - 1)
    return value, dz


def loss_cov(z: np.ndarray) -> float:
    """Mean squared off-diagonal of the unbiased feature covariance."""
    z = np.asarray(z)
    if z.shape[0] < 2:
        raise InsufficientBatchError("covariance term needs >= 2 pooled rows")
    b, d = z.shape
    if d == 1:
        return 0.0
    y = z - z.mean(axis=0)
    cov = (y.T @ y) / (b - 1)
    off = cov - np.diag(np.diag(cov))
    return float((off * off).sum() / (d * (d - 1)))


def loss_cov_grad(z: np.ndarray):
    z = np.asarray(z)
    if z.shape[0] < 2:
        raise InsufficientBatchError("covariance term needs >= 2 pooled rows")
    b, d = z.shape
    if d == 1:
        return 0.0, np.zeros_like(z)
    y = z - z.mean(axis=0)
    cov = (y.T @ y) / (b - 1)
    off = cov - np.diag(np.diag(cov))
    value = float((off * off).sum() / (d * (d - 1)))
    dcov = 2.0 * off / (d * (d - 1))
    dy = y @ (dcov + dcov.T) / (b - 1)
    dz = dy - dy.mean(axis=0)
    return value, dz


def warmup_lambdas(
    step: int,
    steps_per_epoch: int,
    lambda_var_max: float = LAMBDA_VAR_MAX,
    lambda_cov_max: float = LAMBDA_COV_MAX,
    warmup_epochs: int = WARMUP_EPOCHS,
) -> tuple[float, float]:
    """Per-step linear ramp from 0 to the target weights over the warm-up."""
    if step < 0:
        raise RangeError(f"step={step} must be nonnegative")
    if steps_per_epoch < 1:
        raise RangeError(f"steps_per_epoch={steps_per_epoch} must be >= 1")
    frac = min(1.0, step / (warmup_epochs * steps_per_epoch))
    return frac * lambda_var_max, frac * lambda_cov_max


def loss_total(l_mae, l_var, l_cov, lambda_var, lambda_cov,
               n_valid_elements: int = 0) -> LossReport:
    total = l_mae + lambda_var * l_var + lambda_cov * l_cov
    report = LossReport(
        l_mae=float(l_mae), l_var=float(l_var), l_cov=float(l_cov),
        l_total=float(total), lambda_var=float(lambda_var),
        lambda_cov=float(lambda_cov), n_valid_elements=int(n_valid_elements),
    )
    if not np.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss: {report.to_dict()}")
    return report


def compute_loss_and_grads(params, cfg: NetConfig, batch: TokenBatch,
                           lambda_var: float, lambda_cov: float):
    """Forward, total loss, and analytic gradients for every parameter."""
    state = model_forward(params, cfg, batch)
    l_mae, n_valid = loss_mae(state.recons, batch)
    l_var, dz_var = loss_var_grad(state.pooled)
    l_cov, dz_cov = loss_cov_grad(state.pooled)
    report = loss_total(l_mae, l_var, l_cov, lambda_var, lambda_cov, n_valid)

    d_recons = loss_mae_grads(state.recons, batch, n_valid)
    d_pooled = lambda_var * dz_var + lambda_cov * dz_cov
    grads = model_backward(params, cfg, state, d_pooled=d_pooled,
                           d_recons=d_recons)
    return report, grads


def compute_loss(params, cfg: NetConfig, batch: TokenBatch,
                 lambda_var: float, lambda_cov: float) -> LossReport:
    state = model_forward(params, cfg, batch)
    l_mae, n_valid = loss_mae(state.recons, batch)
    l_var = loss_var(state.pooled)
    l_cov = loss_cov(state.pooled)
    return loss_total(l_mae, l_var, l_cov, lambda_var, lambda_cov, n_valid)


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple[str, int] = ("", -1)
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradcheck(params, cfg: NetConfig, batch: TokenBatch,
              lambda_var: float = LAMBDA_VAR_MAX,
              lambda_cov: float = LAMBDA_COV_MAX,
              h: float = 1e-3, tol_rel: float = 1e-4,
              coords_per_tensor: int = 2, seed: int = 0,
              grad_scale: float = 1.0) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    Runs in double precision.  `coords_per_tensor` coordinates are sampled
    per tensor; relative error uses |a - n| / max(1e-8, |a| + |n|).
    `grad_scale` deliberately corrupts the analytic side, for testing the
    checker itself.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = compute_loss_and_grads(params, cfg, batch,
                                         lambda_var, lambda_cov)
    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    worst = ("", -1)
    max_rel = 0.0
    n_checked = 0
    for name in sorted(params):
        tensor = params[name]
        size = tensor.size
        k = min(coords_per_tensor, size)
        flat_idx = rng.choice(size, size=k, replace=False)
        tensor_max = 0.0
        for idx in flat_idx:
            idx = int(idx)
            original = tensor.flat[idx]
            tensor.flat[idx] = original + h
            up = compute_loss(params, cfg, batch, lambda_var, lambda_cov)
            tensor.flat[idx] = original - h
            down = compute_loss(params, cfg, batch, lambda_var, lambda_cov)
            tensor.flat[idx] = original
            numeric = (up.l_total - down.l_total) / (2.0 * h)
            a = float(analytic[name].flat[idx]) * grad_scale
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            tensor_max = max(tensor_max, rel)
            if rel > max_rel:
                max_rel = rel
                worst = (name, idx)
            n_checked += 1
        per_tensor[name] = tensor_max
    return GradcheckReport(
        max_rel_error=max_rel, n_checked=n_checked, tolerance=tol_rel,
        worst=worst, per_tensor=per_tensor,
    )
