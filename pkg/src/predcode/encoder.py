"""Stochastic linear encoder: per-step Gaussian codes whose means are a
linear projection of the input and whose variances come from a small
input-dependent network; includes a deterministic variant."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DTYPE, MlpSpec, ParamStore, init_mlp, mlp_apply, param_stream

# softplus(VAR_FLOOR_INIT) ~ 0.1: keeps sigma away from zero early on.
VAR_FLOOR_INIT = math.log(math.expm1(0.1))


@dataclass
class EncoderParams:
    """Handle to the encoder's parameters inside a ParamStore.

    The mean map U (N x D) lives at ``{prefix}.U``; the variance network,
    when stochastic, under ``{prefix}.var.*`` plus a learnable scalar
    floor at ``{prefix}.var_floor``.
    """

    n_channels: int
    latent_dim: int
    deterministic: bool
    store: ParamStore
    var_spec: MlpSpec | None = None
    prefix: str = "enc"

    @property
    def u(self) -> torch.Tensor:
        return self.store[f"{self.prefix}.U"]


@dataclass
class WindowCode:
    """One batch of sampled window codes: y = mean + std * eps elementwise."""

    y: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor
    eps: torch.Tensor


def init_encoder(store: ParamStore, n_channels: int, latent_dim: int,
                 deterministic: bool, seed: int, var_hidden: int = 64,
                 prefix: str = "enc") -> EncoderParams:
    u_name = f"{prefix}.U"
    store.add(u_name, np.asarray(
        param_stream(seed, u_name).uniform(
            -1.0 / math.sqrt(n_channels), 1.0 / math.sqrt(n_channels),
            size=(n_channels, latent_dim),
        )
    ))
    var_spec = None
    if not deterministic:
        var_spec = MlpSpec((n_channels, var_hidden, latent_dim),
                           activation="tanh", output="softplus")
        init_mlp(store, f"{prefix}.var", var_spec, seed)
        store.add(f"{prefix}.var_floor", np.array(VAR_FLOOR_INIT))
    return EncoderParams(n_channels=n_channels, latent_dim=latent_dim,
                         deterministic=deterministic, store=store,
                         var_spec=var_spec, prefix=prefix)


def _to_steps(enc: EncoderParams, x_window: torch.Tensor) -> torch.Tensor:
    """(..., T*N) -> (..., T, N), validating divisibility."""
    n = enc.n_channels
    if x_window.shape[-1] % n != 0:
        raise ValueError(
            f"window length {x_window.shape[-1]} is not a multiple of "
            f"{n} channels"
        )
    return x_window.reshape(*x_window.shape[:-1], -1, n)


def encode_mean(enc: EncoderParams, x_window: torch.Tensor) -> torch.Tensor:
    """Per-step mean mu_t = U^T x_t, concatenated time-major."""
    x_window = torch.as_tensor(x_window, dtype=DTYPE)
    steps = _to_steps(enc, x_window)
    mu = steps @ enc.u
    return mu.reshape(*x_window.shape[:-1], -1)


def encode_std(enc: EncoderParams, x_window: torch.Tensor) -> torch.Tensor:
    """Per-step standard deviation from the variance network plus its
    learnable floor; identically zero in deterministic mode."""
    x_window = torch.as_tensor(x_window, dtype=DTYPE)
    steps = _to_steps(enc, x_window)
    flat_shape = (*x_window.shape[:-1], steps.shape[-2] * enc.latent_dim)
    if enc.deterministic:
        return torch.zeros(flat_shape, dtype=DTYPE)
    raw = mlp_apply(enc.var_spec, enc.store, f"{enc.prefix}.var", steps)
    floor = torch.nn.functional.softplus(enc.store[f"{enc.prefix}.var_floor"])
    return (raw + floor).reshape(flat_shape)


def encode_sample(enc: EncoderParams, x_window: torch.Tensor,
                  rng: np.random.Generator | None = None,
                  eps: np.ndarray | torch.Tensor | None = None) -> WindowCode:
    """Reparameterized draw y = mu + sigma * eps with eps ~ N(0, I).

    In deterministic mode this degenerates to y = mu with sigma = eps = 0.
    """
    mu = encode_mean(enc, x_window)
    if enc.deterministic:
        zero = torch.zeros_like(mu)
        return WindowCode(y=mu, mean=mu, std=zero, eps=zero)
    sigma = encode_std(enc, x_window)
    if eps is None:
        if rng is None:
            raise ValueError("encode_sample needs an rng or explicit eps")
        eps = rng.standard_normal(tuple(mu.shape))
    eps_t = torch.as_tensor(np.asarray(eps, dtype=np.float64) if not torch.is_tensor(eps) else eps,
                            dtype=DTYPE)
    if eps_t.shape != mu.shape:
        raise ValueError(f"eps shape {tuple(eps_t.shape)} != code shape {tuple(mu.shape)}")
    return WindowCode(y=mu + sigma * eps_t, mean=mu, std=sigma, eps=eps_t)


def log_density(enc: EncoderParams, x_window: torch.Tensor,
                y_window: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log p(y(T) | x(T)); differentiable in all
    encoder parameters. Undefined for the deterministic encoder."""
    if enc.deterministic:
        raise ValueError("L1Out undefined for deterministic encoder")
    mu = encode_mean(enc, x_window)
    sigma = encode_std(enc, x_window)
    y = torch.as_tensor(y_window, dtype=DTYPE)
    if y.shape != mu.shape:
        raise ValueError(f"code shape {tuple(y.shape)} != mean shape {tuple(mu.shape)}")
    terms = -0.5 * math.log(2.0 * math.pi) - torch.log(sigma) \
        - 0.5 * ((y - mu) / sigma) ** 2
    return terms.sum()


def log_density_matrix(enc: EncoderParams, x_windows: torch.Tensor,
                       y_windows: torch.Tensor,
                       clamp_min: float | None = None) -> tuple[torch.Tensor, int]:
    """(S, S) matrix with entry (i, j) = log p(y_i | x_j).

    With ``clamp_min`` set, per-dimension log-density terms are clamped
    from below before summing (numerical-stability guard); the number of
    clamped entries is returned alongside.
    """
    if enc.deterministic:
        raise ValueError("L1Out undefined for deterministic encoder")
    mu = encode_mean(enc, x_windows)          # (S, K)
    sigma = encode_std(enc, x_windows)        # (S, K)
    y = torch.as_tensor(y_windows, dtype=DTYPE)
    if y.ndim != 2 or mu.ndim != 2 or y.shape != mu.shape:
        raise ValueError("log_density_matrix needs matching (S, K) batches")
    terms = -0.5 * math.log(2.0 * math.pi) - torch.log(sigma)[None, :, :] \
        - 0.5 * ((y[:, None, :] - mu[None, :, :]) / sigma[None, :, :]) ** 2
    n_clamped = 0
    if clamp_min is not None:
        n_clamped = int((terms < clamp_min).sum())
        terms = terms.clamp(min=clamp_min)
    return terms.sum(dim=-1), n_clamped


def mean_path(enc: EncoderParams, data: np.ndarray) -> np.ndarray:
    """Deterministic per-step projection mu_t = U^T x_t of a whole series."""
    u = enc.u.detach().numpy()
    return np.asarray(data, dtype=np.float64) @ u
