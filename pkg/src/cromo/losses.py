"""Self-supervised loss functions operating on embedding batches.

Four objectives are supported:

* ``simclr``       -- temperature-scaled InfoNCE over L2-normalized embeddings,
                      symmetric in the two views, with an optional extra
                      negative pool.
* ``barlow_twins`` -- cross-correlation loss: the correlation matrix of the
                      two (batch-standardized) views is pushed toward identity.
* ``byol``         -- mean squared distance between row-normalized embeddings,
                      equal to ``2 - 2 cos`` per row.
* ``corinfomax``   -- log-determinant mutual information surrogate with a
                      running covariance estimate per view (stateful).

All functions are dtype/device agnostic and differentiable. InfoNCE and the
BYOL distance decompose per positive pair; ``*_per_pair`` variants expose the
per-pair values so callers can weight them before averaging. Barlow-Twins and
CorInfoMax are batch statistics and only exist at batch level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

PAIRWISE_KINDS = ("simclr", "byol")
BATCH_KINDS = ("barlow_twins", "corinfomax")
LOSS_KINDS = PAIRWISE_KINDS + BATCH_KINDS


class LossInputError(ValueError):
    """Raised when a loss is called with inputs that violate its contract."""


@dataclass
class CorInfoMaxState:
    """Running first/second-moment estimates for the corinfomax objective.

    ``cov1``/``cov2`` are D x D covariance estimates of the two views,
    ``mean1``/``mean2`` the matching running means. States are stored
    detached; each update returns a fresh state.
    """

    cov1: torch.Tensor
    cov2: torch.Tensor
    mean1: torch.Tensor
    mean2: torch.Tensor

    @property
    def dim(self) -> int:
        return self.cov1.shape[0]


def init_corinfomax_state(dim: int, eps: float, *, dtype=torch.float32,
                          device="cpu") -> CorInfoMaxState:
    """Fresh covariance state: eps * I covariances, zero means."""
    eye = torch.eye(dim, dtype=dtype, device=device) * eps
    zero = torch.zeros(dim, dtype=dtype, device=device)
    return CorInfoMaxState(eye.clone(), eye.clone(), zero.clone(), zero.clone())


@dataclass
class SslLossSpec:
    """Configuration bundle for one SSL objective.

    temperature      -- softmax temperature for simclr (> 0)
    lambda_bt        -- off-diagonal weight for barlow_twins (>= 0)
    eps              -- regularizer for the corinfomax logdet / invariance
                        coefficient (> 0)
    lambda_cov       -- weight on the previous covariance estimate, in [0, 1)
    invariance_weight-- extra multiplier on the corinfomax invariance term,
                        exposed because the printed coefficient of that term
                        is ambiguous in its source
    bt_eps           -- guard added to the barlow_twins correlation
                        denominators
    """

    kind: str
    temperature: float = 0.5
    lambda_bt: float = 5e-3
    eps: float = 0.1
    lambda_cov: float = 0.01
    invariance_weight: float = 1.0
    bt_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise LossInputError(f"unknown ssl loss kind {self.kind!r}")
        if self.temperature <= 0:
            raise LossInputError("temperature must be > 0")
        if self.lambda_bt < 0:
            raise LossInputError("lambda_bt must be >= 0")
        if self.eps <= 0:
            raise LossInputError("eps must be > 0")
        if not 0.0 <= self.lambda_cov < 1.0:
            raise LossInputError("lambda_cov must be in [0, 1)")

    @property
    def is_pairwise(self) -> bool:
        """True when the loss decomposes over positive pairs."""
        return self.kind in PAIRWISE_KINDS


def _check_2d_pair(z1: torch.Tensor, z2: torch.Tensor) -> None:
    if z1.ndim != 2 or z2.ndim != 2:
        raise LossInputError("embeddings must be 2-D [batch, dim]")
    if z1.shape != z2.shape:
        raise LossInputError(f"view shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")


def _normalize_rows(z: torch.Tensor, what: str) -> torch.Tensor:
    norms = z.norm(dim=1)
    if (norms == 0).any():
        raise LossInputError(f"zero-norm row in {what}; direction undefined")
    return z / norms.unsqueeze(1)


def info_nce_per_pair(z1: torch.Tensor, z2: torch.Tensor, temperature: float,
                      extra_negatives: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pair InfoNCE, averaged over the two anchor directions.

    For anchor ``z1[i]`` the positive is ``z2[i]`` and the negatives are every
    other row of both views plus all rows of ``extra_negatives``; symmetric
    for ``z2[i]`` anchors. Rows are L2-normalized before the cosine
    similarities. Returns a [B] vector; ``info_nce`` is its mean.
    """
    _check_2d_pair(z1, z2)
    b = z1.shape[0]
    n_extra = 0 if extra_negatives is None else extra_negatives.shape[0]
    if 2 * b - 2 + n_extra < 1:
        raise LossInputError("InfoNCE needs at least one negative: "
                             "batch size >= 2 or a non-empty extra pool")

    a = _normalize_rows(z1, "view 1")
    c = _normalize_rows(z2, "view 2")
    pool = torch.cat([a, c], dim=0)
    if n_extra:
        pool = torch.cat([pool, _normalize_rows(extra_negatives, "extra negatives")], dim=0)

    idx = torch.arange(b, device=z1.device)
    neg_inf = torch.finfo(z1.dtype).min

    sim1 = a @ pool.T / temperature        # anchors from view 1
    sim1[idx, idx] = neg_inf               # mask self
    loss1 = torch.logsumexp(sim1, dim=1) - sim1[idx, b + idx]

    sim2 = c @ pool.T / temperature        # anchors from view 2
    sim2[idx, b + idx] = neg_inf
    loss2 = torch.logsumexp(sim2, dim=1) - sim2[idx, idx]

    return 0.5 * (loss1 + loss2)


def info_nce(z1: torch.Tensor, z2: torch.Tensor, temperature: float,
             extra_negatives: torch.Tensor | None = None) -> torch.Tensor:
    """Symmetric InfoNCE loss; see ``info_nce_per_pair``."""
    return info_nce_per_pair(z1, z2, temperature, extra_negatives).mean()


def barlow_twins(z1: torch.Tensor, z2: torch.Tensor, lambda_bt: float,
                 eps: float = 1e-5) -> torch.Tensor:
    """Cross-correlation loss between two views.

    Columns are centered along the batch; the correlation matrix is
    ``C[i, j] = <zc1[:, i], zc2[:, j]> / ((|zc1[:, i]| + eps) (|zc2[:, j]| + eps))``.
    The loss is ``sum_i (1 - C_ii)^2 + lambda_bt * sum_{i != j} C_ij^2``.
    """
    _check_2d_pair(z1, z2)
    if z1.shape[0] < 2:
        raise LossInputError("barlow_twins needs batch size >= 2")

    zc1 = z1 - z1.mean(dim=0)
    zc2 = z2 - z2.mean(dim=0)
    n1 = zc1.pow(2).sum(dim=0).sqrt()
    n2 = zc2.pow(2).sum(dim=0).sqrt()
    if (n1 < 1e-12).any() or (n2 < 1e-12).any():
        warnings.warn("barlow_twins: zero-variance embedding dimension; "
                      "correlation guarded by eps", RuntimeWarning)

    corr = (zc1.T @ zc2) / ((n1 + eps).unsqueeze(1) * (n2 + eps).unsqueeze(0))
    diag = corr.diagonal()
    on_diag = (1.0 - diag).pow(2).sum()
    off_diag = corr.pow(2).sum() - diag.pow(2).sum()
    return on_diag + lambda_bt * off_diag


def byol_mse_per_pair(q1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Per-row squared distance between row-normalized embeddings (= 2 - 2 cos)."""
    _check_2d_pair(q1, z2)
    q = _normalize_rows(q1, "predictions")
    t = _normalize_rows(z2, "targets")
    return (q - t).pow(2).sum(dim=1)


def byol_mse(q1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``byol_mse_per_pair``; range [0, 4]."""
    return byol_mse_per_pair(q1, z2).mean()


def corinfomax(z1: torch.Tensor, z2: torch.Tensor, spec: SslLossSpec,
               state: CorInfoMaxState) -> tuple[torch.Tensor, CorInfoMaxState]:
    """Log-determinant objective with running covariance estimates.

    Updates mean and covariance of each view,

        mean_new = lambda_cov * mean_old + (1 - lambda_cov) * batch_mean
        cov_new  = lambda_cov * cov_old  + (1 - lambda_cov) * (Zc^T Zc / N)

    with ``Zc = z - mean_new``, then returns

        - logdet(cov1_new + eps I) - logdet(cov2_new + eps I)
          + invariance_weight * (2 / (eps N)) * ||z1 - z2||_F^2

    together with the (detached) updated state. Gradients flow to the
    embeddings through both the covariance update and the invariance term.
    """
    _check_2d_pair(z1, z2)
    n, d = z1.shape
    if n < 2:
        raise LossInputError("corinfomax needs batch size >= 2")
    if state.dim != d:
        raise LossInputError(f"covariance state dim {state.dim} != embedding dim {d}")

    lam = spec.lambda_cov
    eps = spec.eps
    eye = torch.eye(d, dtype=z1.dtype, device=z1.device)

    def updated(z, cov_old, mean_old):
        mean_new = lam * mean_old + (1.0 - lam) * z.mean(dim=0)
        zc = z - mean_new
        cov_new = lam * cov_old + (1.0 - lam) * (zc.T @ zc) / n
        return cov_new, mean_new

    cov1, mean1 = updated(z1, state.cov1.to(z1.dtype), state.mean1.to(z1.dtype))
    cov2, mean2 = updated(z2, state.cov2.to(z2.dtype), state.mean2.to(z2.dtype))

    sign1, logdet1 = torch.linalg.slogdet(cov1 + eps * eye)
    sign2, logdet2 = torch.linalg.slogdet(cov2 + eps * eye)
    if sign1 <= 0 or sign2 <= 0 or not (torch.isfinite(logdet1) and torch.isfinite(logdet2)):
        eigs1 = torch.linalg.eigvalsh((cov1 + eps * eye).detach())
        eigs2 = torch.linalg.eigvalsh((cov2 + eps * eye).detach())
        raise LossInputError(
            "corinfomax: non-finite or non-positive log-determinant; "
            f"spectrum view1 [{eigs1.min():.3e}, {eigs1.max():.3e}], "
            f"view2 [{eigs2.min():.3e}, {eigs2.max():.3e}]")

    invariance = (z1 - z2).pow(2).sum()
    loss = -logdet1 - logdet2 + spec.invariance_weight * (2.0 / (eps * n)) * invariance

    new_state = CorInfoMaxState(cov1.detach(), cov2.detach(),
                                mean1.detach(), mean2.detach())
    return loss, new_state


def ssl_loss(spec: SslLossSpec, z1: torch.Tensor, z2: torch.Tensor, *,
             predictor=None,
             extra_negatives: torch.Tensor | None = None,
             pair_weights: torch.Tensor | None = None,
             state: CorInfoMaxState | None = None,
             ) -> tuple[torch.Tensor, CorInfoMaxState | None]:
    """Dispatch to the objective named by ``spec.kind``.

    Returns ``(loss, state)`` where ``state`` is the updated covariance state
    for corinfomax and None otherwise. ``pair_weights`` (a [B] vector) scales
    the per-pair losses before the mean and is only legal for pairwise kinds.
    For byol the first view is routed through ``predictor``.
    """
    if pair_weights is not None and not spec.is_pairwise:
        raise LossInputError(f"{spec.kind} is a batch statistic; per-pair weights unsupported")

    if spec.kind == "simclr":
        per_pair = info_nce_per_pair(z1, z2, spec.temperature, extra_negatives)
        if pair_weights is not None:
            per_pair = per_pair * pair_weights
        return per_pair.mean(), None

    if spec.kind == "byol":
        if predictor is None:
            raise LossInputError("byol loss requires a predictor")
        per_pair = byol_mse_per_pair(predictor(z1), z2)
        if pair_weights is not None:
            per_pair = per_pair * pair_weights
        return per_pair.mean(), None

    if spec.kind == "barlow_twins":
        return barlow_twins(z1, z2, spec.lambda_bt, spec.bt_eps), None

    if spec.kind == "corinfomax":
        if state is None:
            raise LossInputError("corinfomax requires a covariance state")
        return corinfomax(z1, z2, spec, state)

    raise LossInputError(f"unknown ssl loss kind {spec.kind!r}")
