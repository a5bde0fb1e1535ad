"""Variational mutual-information bounds.

Upper bounds for the compression term (closed-form KL against a learnable
diagonal-Gaussian marginal; leave-one-out batch bound) and lower bounds
for the predictive term (TUBA family with constant or learned baselines,
InfoNCE, and a decoder-based bound), plus the exact Gaussian quantities
used by the deterministic closed-form configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DTYPE, MlpSpec, ParamStore, init_mlp, logdet_psd, mlp_apply
from .series import LaggedCovariance

CRITIC_KINDS = ("separable", "joint")
BASELINE_KINDS = ("constant-one", "constant-e", "learned-scalar", "learned-network")
TUBA_FORMS = ("standard", "printed")


@dataclass
class CriticParams:
    """Score function on code pairs: separable h(a)^T g(b) or a joint MLP."""

    kind: str
    in_dim: int
    embed_dim: int
    store: ParamStore
    h_spec: MlpSpec | None = None
    g_spec: MlpSpec | None = None
    joint_spec: MlpSpec | None = None
    prefix: str = "critic"


@dataclass
class BaselineParams:
    """Baseline a(y) > 0 for TUBA, parameterized through log a."""

    kind: str
    store: ParamStore
    net_spec: MlpSpec | None = None
    prefix: str = "baseline"


@dataclass
class VariationalMarginal:
    """Diagonal-Gaussian stand-in r(y) for the code marginal."""

    dim: int
    store: ParamStore
    learnable: bool = True
    prefix: str = "marginal"

    @property
    def mean(self) -> torch.Tensor:
        return self.store[f"{self.prefix}.mean"]

    @property
    def log_sigma(self) -> torch.Tensor:
        return self.store[f"{self.prefix}.logsigma"]


@dataclass
class DecoderParams:
    """Diagonal-Gaussian conditional q(future | past): MLP mean, learned log-sigma."""

    spec: MlpSpec
    store: ParamStore
    prefix: str = "decoder"


def init_critic(store: ParamStore, kind: str, in_dim: int, embed_dim: int = 32,
                hidden: int = 64, seed: int = 0, prefix: str = "critic") -> CriticParams:
    if kind not in CRITIC_KINDS:
        raise ValueError(f"unknown critic kind {kind!r}")
    critic = CriticParams(kind=kind, in_dim=in_dim, embed_dim=embed_dim,
                          store=store, prefix=prefix)
    if kind == "separable":
        critic.h_spec = MlpSpec((in_dim, hidden, embed_dim))
        critic.g_spec = MlpSpec((in_dim, hidden, embed_dim))
        init_mlp(store, f"{prefix}.h", critic.h_spec, seed)
        init_mlp(store, f"{prefix}.g", critic.g_spec, seed)
    else:
        critic.joint_spec = MlpSpec((2 * in_dim, hidden, 1))
        init_mlp(store, f"{prefix}.j", critic.joint_spec, seed)
    return critic


def init_baseline(store: ParamStore, kind: str, in_dim: int, hidden: int = 64,
                  seed: int = 0, prefix: str = "baseline") -> BaselineParams:
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    baseline = BaselineParams(kind=kind, store=store, prefix=prefix)
    if kind == "learned-scalar":
        store.add(f"{prefix}.log_a", np.array(0.0))
    elif kind == "learned-network":
        baseline.net_spec = MlpSpec((in_dim, hidden, 1))
        init_mlp(store, f"{prefix}.net", baseline.net_spec, seed)
    return baseline


def init_marginal(store: ParamStore, dim: int, learnable: bool = True,
                  prefix: str = "marginal") -> VariationalMarginal:
    mean = store.add(f"{prefix}.mean", np.zeros(dim))
    log_sigma = store.add(f"{prefix}.logsigma", np.zeros(dim))
    if not learnable:
        mean.requires_grad_(False)
        log_sigma.requires_grad_(False)
    return VariationalMarginal(dim=dim, store=store, learnable=learnable, prefix=prefix)


def init_decoder(store: ParamStore, in_dim: int, hidden: int = 64, seed: int = 0,
                 prefix: str = "decoder") -> DecoderParams:
    spec = MlpSpec((in_dim, hidden, in_dim))
    init_mlp(store, f"{prefix}.mean", spec, seed)
    store.add(f"{prefix}.logsigma", np.zeros(in_dim))
    return DecoderParams(spec=spec, store=store, prefix=prefix)


def score_matrix(critic: CriticParams, past_codes: torch.Tensor,
                 future_codes: torch.Tensor) -> torch.Tensor:
    """All S^2 critic scores; entry (i, j) pairs past i with future j."""
    a = torch.as_tensor(past_codes, dtype=DTYPE)
    b = torch.as_tensor(future_codes, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ValueError("score_matrix needs matching (S, K) code batches")
    s = a.shape[0]
    if s < 2:
        raise ValueError("batch size must be at least 2 for contrastive scores")
    if critic.kind == "separable":
        h = mlp_apply(critic.h_spec, critic.store, f"{critic.prefix}.h", a)
        g = mlp_apply(critic.g_spec, critic.store, f"{critic.prefix}.g", b)
        return h @ g.T
    pairs = torch.cat(
        [a[:, None, :].expand(s, s, a.shape[1]),
         b[None, :, :].expand(s, s, b.shape[1])], dim=-1)
    return mlp_apply(critic.joint_spec, critic.store, f"{critic.prefix}.j",
                     pairs.reshape(s * s, -1)).reshape(s, s)


def log_baseline(baseline: BaselineParams, future_codes: torch.Tensor) -> torch.Tensor:
    """log a(y) per future sample; shape (S,) (constants broadcast)."""
    if baseline.kind == "constant-one":
        return torch.zeros((), dtype=DTYPE)
    if baseline.kind == "constant-e":
        return torch.ones((), dtype=DTYPE)
    if baseline.kind == "learned-scalar":
        return baseline.store[f"{baseline.prefix}.log_a"]
    b = torch.as_tensor(future_codes, dtype=DTYPE)
    return mlp_apply(baseline.net_spec, baseline.store,
                     f"{baseline.prefix}.net", b).squeeze(-1)


def _offdiag_mask(s: int) -> torch.Tensor:
    return ~torch.eye(s, dtype=torch.bool)


def infonce(scores: torch.Tensor) -> torch.Tensor:
    """Noise-contrastive lower bound: mean_i [f_ii - logsumexp_j f_ij] + ln S.

    Never exceeds ln S.
    """
    scores = torch.as_tensor(scores, dtype=DTYPE)
    s = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != s:
        raise ValueError("infonce needs a square score matrix")
    if s < 2:
        raise ValueError("batch size must be at least 2 for contrastive scores")
    nll = torch.diagonal(scores) - torch.logsumexp(scores, dim=1)
    return nll.mean() + math.log(s)


def tuba(scores: torch.Tensor, baseline_log: torch.Tensor,
         form: str = "standard") -> torch.Tensor:
    """Unnormalized Barber-Agakov lower bound with baseline a(y).

    With f~_ij = f_ij - log a(y_j):
      standard: mean_i f~_ii - mean_{i!=j} e^{f~_ij} + 1
      printed:  mean_i f~_ii - ln(mean_{i!=j} e^{f~_ij})
    Constant baselines a=1 / a=e give the MINE-style and NWJ variants of
    the standard form; in the printed form any constant baseline cancels.
    """
    if form not in TUBA_FORMS:
        raise ValueError(f"unknown tuba form {form!r}")
    scores = torch.as_tensor(scores, dtype=DTYPE)
    s = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != s:
        raise ValueError("tuba needs a square score matrix")
    if s < 2:
        raise ValueError("batch size must be at least 2 for contrastive scores")
    baseline_log = torch.as_tensor(baseline_log, dtype=DTYPE)
    shifted = scores - baseline_log.reshape(1, -1) if baseline_log.ndim > 0 \
        else scores - baseline_log
    joint = torch.diagonal(shifted).mean()
    off = shifted[_offdiag_mask(s)]
    log_mean_marg = torch.logsumexp(off, dim=0) - math.log(s * (s - 1))
    if form == "standard":
        return joint - torch.exp(log_mean_marg) + 1.0
    return joint - log_mean_marg


def lba(decoder: DecoderParams, past_codes: torch.Tensor,
        future_codes: torch.Tensor) -> torch.Tensor:
    """Decoder lower bound: batch mean of log q(future_i | past_i).

    Omits the (nonnegative) code entropy, so it may be negative.
    """
    a = torch.as_tensor(past_codes, dtype=DTYPE)
    b = torch.as_tensor(future_codes, dtype=DTYPE)
    mu = mlp_apply(decoder.spec, decoder.store, f"{decoder.prefix}.mean", a)
    log_sigma = decoder.store[f"{decoder.prefix}.logsigma"]
    log_q = (-0.5 * math.log(2.0 * math.pi) - log_sigma
             - 0.5 * ((b - mu) * torch.exp(-log_sigma)) ** 2).sum(dim=-1)
    return log_q.mean()


def vub(mu: torch.Tensor, sigma: torch.Tensor,
        marginal: VariationalMarginal) -> torch.Tensor:
    """Batch mean of the closed-form KL between the per-sample encoder
    conditional N(mu_i, diag sigma_i^2) and the marginal r(y)."""
    mu = torch.as_tensor(mu, dtype=DTYPE)
    sigma = torch.as_tensor(sigma, dtype=DTYPE)
    mu_r = marginal.mean
    log_sig_r = marginal.log_sigma
    var_r = torch.exp(2.0 * log_sig_r)
    kl = (log_sig_r - torch.log(sigma)
          + (sigma**2 + (mu - mu_r) ** 2) / (2.0 * var_r) - 0.5).sum(dim=-1)
    return kl.mean()


def l1out(log_density_matrix: torch.Tensor) -> torch.Tensor:
    """Leave-one-out upper bound from entries l_ij = log p(y_i | x_j):
    mean_i [l_ii - (logsumexp_{j!=i} l_ij - ln(S-1))]."""
    ldm = torch.as_tensor(log_density_matrix, dtype=DTYPE)
    s = ldm.shape[0]
    if ldm.ndim != 2 or ldm.shape[1] != s:
        raise ValueError("l1out needs a square log-density matrix")
    if s < 2:
        raise ValueError("l1out needs a batch of at least 2")
    masked = ldm.masked_fill(torch.eye(s, dtype=torch.bool), float("-inf"))
    leave_one_out = torch.logsumexp(masked, dim=1) - math.log(s - 1)
    return (torch.diagonal(ldm) - leave_one_out).mean()


def gaussian_mi(joint_cov: torch.Tensor | np.ndarray, split: int) -> torch.Tensor:
    """Exact MI of a jointly Gaussian pair from its joint covariance:
    0.5 * [logdet S11 + logdet S22 - logdet S]."""
    cov = torch.as_tensor(joint_cov, dtype=DTYPE)
    d = cov.shape[0]
    if cov.ndim != 2 or cov.shape[1] != d:
        raise ValueError("gaussian_mi needs a square covariance")
    if not 0 < split < d:
        raise ValueError(f"split {split} must lie strictly inside dimension {d}")
    top = logdet_psd(cov[:split, :split])
    bottom = logdet_psd(cov[split:, split:])
    return 0.5 * (top + bottom - logdet_psd(cov))


def _projected_toeplitz(blocks: list[torch.Tensor], width: int) -> torch.Tensor:
    rows = []
    for i in range(width):
        rows.append(torch.cat(
            [blocks[j - i] if j >= i else blocks[i - j].T for j in range(width)],
            dim=1))
    return torch.cat(rows, dim=0)


def gaussian_pi(cov: LaggedCovariance, u: torch.Tensor, window: int) -> torch.Tensor:
    """Predictive information of the linearly projected Gaussian process:
    logdet Sigma_T(Y) - 0.5 * logdet Sigma_2T(Y) with C_delta(Y) = U^T C_delta U.

    Differentiable in U. Needs lags up to 2*window - 1.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if cov.max_lag < 2 * window - 1:
        raise ValueError(
            f"window {window} needs lagged covariances up to {2 * window - 1}, "
            f"have up to {cov.max_lag}"
        )
    u = torch.as_tensor(u, dtype=DTYPE)
    blocks = [u.T @ torch.as_tensor(c, dtype=DTYPE) @ u
              for c in cov.covariances[: 2 * window]]
    sigma_t = _projected_toeplitz(blocks, window)
    sigma_2t = _projected_toeplitz(blocks, 2 * window)
    return logdet_psd(sigma_t) - 0.5 * logdet_psd(sigma_2t)
