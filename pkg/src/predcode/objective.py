"""Loss assembly and training.

The loss is beta * (compression bound) - (predictive-information bound).
Multi-sample runs pair the leave-one-out upper bound with InfoNCE;
uni-sample runs pair the marginal-KL upper bound with a TUBA-family
bound. A deterministic encoder drops the compression term, and the
closed-form Gaussian configuration optimizes the projection alone
against exact Gaussian predictive information.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace, asdict

import numpy as np
import torch

from . import bounds
from .encoder import EncoderParams, WindowCode, encode_sample, init_encoder, log_density_matrix
from .numerics import DTYPE, AdamState, ParamStore, adam_step, step_stream
from .series import Series, WindowPairBatch, anchor_bounds, center, lagged_covariance, standardize

PI_ESTIMATORS = ("infonce", "nwj", "mine", "tuba", "lba", "gaussian")
COMPRESSION_TERMS = ("vub", "l1out", "none")
ENCODER_MODES = ("stochastic", "deterministic")
LOSS_FAMILIES = ("multi", "uni")

_BASELINE_FOR_PI = {"mine": "constant-one", "nwj": "constant-e", "tuba": "learned-network"}


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the failing step and partial traces."""

    def __init__(self, message: str, step: int, traces: dict):
        super().__init__(message)
        self.step = step
        self.traces = traces


@dataclass(frozen=True)
class TrainConfig:
    """Full run configuration; every field has a serializable default."""

    latent_dim: int
    window: int
    beta: float = 1.0
    encoder: str = "stochastic"
    loss: str = "multi"
    pi: str | None = None
    compression: str | None = None
    batch_size: int = 64
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0
    critic: str = "separable"
    tuba_form: str = "standard"
    baseline: str | None = None
    embed_dim: int = 32
    hidden: int = 64
    var_hidden: int = 64
    standardize: bool = False
    orthonormal_u: bool = False
    marginal_learnable: bool = True
    clamp_log_density: float = -30.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def finalize(self) -> "TrainConfig":
        """Fill family-dependent defaults and validate invariants."""
        pi = self.pi
        if pi is None:
            pi = "infonce" if self.loss == "multi" else "nwj"
        compression = self.compression
        if compression is None:
            if self.encoder == "deterministic":
                compression = "none"
            else:
                compression = "l1out" if self.loss == "multi" else "vub"
        baseline = self.baseline
        if baseline is None:
            baseline = _BASELINE_FOR_PI.get(pi)
        cfg = replace(self, pi=pi, compression=compression, baseline=baseline)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.encoder not in ENCODER_MODES:
            raise ConfigError(f"unknown encoder mode {self.encoder!r}")
        if self.loss not in LOSS_FAMILIES:
            raise ConfigError(f"unknown loss family {self.loss!r}")
        if self.pi not in PI_ESTIMATORS:
            raise ConfigError(f"unknown pi estimator {self.pi!r}")
        if self.compression not in COMPRESSION_TERMS:
            raise ConfigError(f"unknown compression term {self.compression!r}")
        if self.critic not in bounds.CRITIC_KINDS:
            raise ConfigError(f"unknown critic kind {self.critic!r}")
        if self.tuba_form not in bounds.TUBA_FORMS:
            raise ConfigError(f"unknown tuba form {self.tuba_form!r}")
        if self.baseline is not None and self.baseline not in bounds.BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.baseline!r}")
        if self.encoder == "deterministic" and self.compression != "none":
            raise ConfigError(
                "compression term constant for a deterministic encoder; "
                "use compression=none"
            )
        if self.pi == "gaussian" and self.encoder != "deterministic":
            raise ConfigError(
                "gaussian predictive information requires encoder=deterministic"
            )
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunComponents:
    """All live parameters of one training run, sharing a single store."""

    store: ParamStore
    encoder: EncoderParams
    critic: bounds.CriticParams | None = None
    baseline: bounds.BaselineParams | None = None
    marginal: bounds.VariationalMarginal | None = None
    decoder: bounds.DecoderParams | None = None


@dataclass
class TrainReport:
    """Traces and final parameters of one training run."""

    config: TrainConfig
    seed: int
    loss_trace: np.ndarray
    compression_trace: np.ndarray
    pi_trace: np.ndarray
    wall_time_s: float
    clamp_events: int
    encoder: EncoderParams
    components: RunComponents
    preprocess_mean: np.ndarray
    preprocess_scale: np.ndarray | None = None

    def traces_digest(self) -> str:
        payload = b"".join(
            np.ascontiguousarray(t, dtype=np.float64).tobytes()
            for t in (self.loss_trace, self.compression_trace, self.pi_trace)
        )
        return hashlib.sha256(payload).hexdigest()


def build_components(cfg: TrainConfig, n_channels: int) -> RunComponents:
    store = ParamStore()
    enc = init_encoder(store, n_channels, cfg.latent_dim,
                       deterministic=cfg.encoder == "deterministic",
                       seed=cfg.seed, var_hidden=cfg.var_hidden)
    comps = RunComponents(store=store, encoder=enc)
    code_dim = cfg.window * cfg.latent_dim
    if cfg.pi in ("infonce", "nwj", "mine", "tuba"):
        comps.critic = bounds.init_critic(store, cfg.critic, code_dim,
                                          embed_dim=cfg.embed_dim,
                                          hidden=cfg.hidden, seed=cfg.seed)
        if cfg.pi != "infonce":
            comps.baseline = bounds.init_baseline(store, cfg.baseline, code_dim,
                                                  hidden=cfg.hidden, seed=cfg.seed)
    elif cfg.pi == "lba":
        comps.decoder = bounds.init_decoder(store, code_dim, hidden=cfg.hidden,
                                            seed=cfg.seed)
    if cfg.compression == "vub":
        comps.marginal = bounds.init_marginal(store, code_dim,
                                              learnable=cfg.marginal_learnable)
    return comps


def _step_terms(cfg: TrainConfig, comps: RunComponents,
                past_x: torch.Tensor, future_x: torch.Tensor,
                eps_past, eps_future):
    """(loss, compression, pi, clamp count) for one batch."""
    enc = comps.encoder
    code_p = encode_sample(enc, past_x, eps=eps_past)
    code_f = encode_sample(enc, future_x, eps=eps_future)
    n_clamped = 0
    if cfg.compression == "vub":
        comp = bounds.vub(code_f.mean, code_f.std, comps.marginal)
    elif cfg.compression == "l1out":
        ldm, n_clamped = log_density_matrix(enc, future_x, code_f.y,
                                            clamp_min=cfg.clamp_log_density)
        comp = bounds.l1out(ldm)
    else:
        comp = torch.zeros((), dtype=DTYPE)
    if cfg.pi == "infonce":
        pi = bounds.infonce(bounds.score_matrix(comps.critic, code_p.y, code_f.y))
    elif cfg.pi in ("nwj", "mine", "tuba"):
        scores = bounds.score_matrix(comps.critic, code_p.y, code_f.y)
        pi = bounds.tuba(scores, bounds.log_baseline(comps.baseline, code_f.y),
                         form=cfg.tuba_form)
    elif cfg.pi == "lba":
        pi = bounds.lba(comps.decoder, code_p.y, code_f.y)
    else:
        raise ConfigError(f"pi estimator {cfg.pi!r} has no per-batch loss")
    return cfg.beta * comp - pi, comp, pi, n_clamped


def multi_sample_loss(batch: WindowPairBatch, enc: EncoderParams,
                      critic: bounds.CriticParams, beta: float,
                      rng: np.random.Generator | None = None,
                      eps: tuple | None = None,
                      clamp_min: float | None = None):
    """Multi-sample loss: beta * l1out - infonce on codes sampled from the
    encoder conditional (per-window reparameterized draws)."""
    code_p = encode_sample(enc, torch.as_tensor(batch.past, dtype=DTYPE),
                           rng=rng, eps=None if eps is None else eps[0])
    code_f = encode_sample(enc, torch.as_tensor(batch.future, dtype=DTYPE),
                           rng=rng, eps=None if eps is None else eps[1])
    ldm, n_clamped = log_density_matrix(enc, torch.as_tensor(batch.future, dtype=DTYPE),
                                        code_f.y, clamp_min=clamp_min)
    comp = bounds.l1out(ldm)
    pi = bounds.infonce(bounds.score_matrix(critic, code_p.y, code_f.y))
    return beta * comp - pi, comp, pi, n_clamped


def uni_sample_loss(batch: WindowPairBatch, enc: EncoderParams,
                    critic: bounds.CriticParams, baseline: bounds.BaselineParams,
                    marginal: bounds.VariationalMarginal, beta: float,
                    rng: np.random.Generator | None = None,
                    eps: tuple | None = None, form: str = "standard"):
    """Uni-sample loss: beta * vub - tuba (baseline picks the variant)."""
    if enc.deterministic:
        raise ConfigError(
            "compression term constant for a deterministic encoder; "
            "use compression=none"
        )
    code_p = encode_sample(enc, torch.as_tensor(batch.past, dtype=DTYPE),
                           rng=rng, eps=None if eps is None else eps[0])
    code_f = encode_sample(enc, torch.as_tensor(batch.future, dtype=DTYPE),
                           rng=rng, eps=None if eps is None else eps[1])
    comp = bounds.vub(code_f.mean, code_f.std, marginal)
    scores = bounds.score_matrix(critic, code_p.y, code_f.y)
    pi = bounds.tuba(scores, bounds.log_baseline(baseline, code_f.y), form=form)
    return beta * comp - pi, comp, pi


def gaussian_objective(u: torch.Tensor, cov, window: int) -> torch.Tensor:
    """Negative exact Gaussian predictive information of the projection."""
    return -bounds.gaussian_pi(cov, u, window)


def _qr_retract(u: torch.Tensor) -> None:
    with torch.no_grad():
        q, r = torch.linalg.qr(u)
        sign = torch.sign(torch.diagonal(r))
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        u.copy_(q * sign)


def _preprocess(series: Series, do_standardize: bool):
    if do_standardize:
        prepped, mean, scale = standardize(series)
        return prepped, mean, scale
    prepped, mean = center(series)
    return prepped, mean, None


def train(config: TrainConfig, series: Series) -> TrainReport:
    """Optimize all live parameters with Adam; deterministic given the seed."""
    cfg = config.finalize()
    t0 = time.perf_counter()
    prepped, mean, scale = _preprocess(series, cfg.standardize)
    if cfg.pi == "gaussian":
        return _train_gaussian(cfg, prepped, mean, scale, t0)

    lo, hi = anchor_bounds(prepped.length, cfg.window)
    comps = build_components(cfg, prepped.n_channels)
    adam = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                     eps=cfg.adam_eps)
    data = prepped.data
    t, n = cfg.window, prepped.n_channels
    code_dim = t * cfg.latent_dim
    offsets_past = np.arange(-t + 1, 1)
    offsets_future = np.arange(1, t + 1)
    stochastic = cfg.encoder == "stochastic"

    losses = np.empty(cfg.steps)
    comp_tr = np.empty(cfg.steps)
    pi_tr = np.empty(cfg.steps)
    clamp_total = 0
    for k in range(cfg.steps):
        rng = step_stream(cfg.seed, k)
        anchors = rng.integers(lo, hi + 1, size=cfg.batch_size)
        eps_p = eps_f = None
        if stochastic:
            eps_p = rng.standard_normal((cfg.batch_size, code_dim))
            eps_f = rng.standard_normal((cfg.batch_size, code_dim))
        past = torch.as_tensor(
            data[anchors[:, None] + offsets_past].reshape(cfg.batch_size, t * n))
        future = torch.as_tensor(
            data[anchors[:, None] + offsets_future].reshape(cfg.batch_size, t * n))
        loss, comp, pi, n_clamped = _step_terms(cfg, comps, past, future, eps_p, eps_f)
        loss_v = float(loss)
        if not math.isfinite(loss_v):
            last = losses[k - 1] if k > 0 else float("nan")
            raise TrainingDiverged(
                f"non-finite loss at step {k} (last finite loss {last:.6g})",
                step=k,
                traces={"loss": losses[:k].copy(), "compression": comp_tr[:k].copy(),
                        "pi": pi_tr[:k].copy()},
            )
        loss.backward()
        adam_step(adam, comps.store)
        if cfg.orthonormal_u:
            _qr_retract(comps.encoder.u)
        losses[k] = loss_v
        comp_tr[k] = float(comp)
        pi_tr[k] = float(pi)
        clamp_total += n_clamped
    return TrainReport(config=cfg, seed=cfg.seed, loss_trace=losses,
                       compression_trace=comp_tr, pi_trace=pi_tr,
                       wall_time_s=time.perf_counter() - t0,
                       clamp_events=clamp_total, encoder=comps.encoder,
                       components=comps, preprocess_mean=mean,
                       preprocess_scale=scale)


def _train_gaussian(cfg: TrainConfig, prepped: Series, mean, scale, t0) -> TrainReport:
    cov = lagged_covariance(prepped, 2 * cfg.window - 1)
    comps = build_components(cfg, prepped.n_channels)
    adam = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                     eps=cfg.adam_eps)
    u = comps.encoder.u
    losses = np.empty(cfg.steps)
    for k in range(cfg.steps):
        loss = gaussian_objective(u, cov, cfg.window)
        loss_v = float(loss)
        if not math.isfinite(loss_v):
            last = losses[k - 1] if k > 0 else float("nan")
            raise TrainingDiverged(
                f"non-finite loss at step {k} (last finite loss {last:.6g})",
                step=k, traces={"loss": losses[:k].copy()},
            )
        loss.backward()
        adam_step(adam, comps.store)
        if cfg.orthonormal_u:
            _qr_retract(u)
        losses[k] = loss_v
    return TrainReport(config=cfg, seed=cfg.seed, loss_trace=losses,
                       compression_trace=np.zeros(cfg.steps),
                       pi_trace=-losses,
                       wall_time_s=time.perf_counter() - t0,
                       clamp_events=0, encoder=comps.encoder, components=comps,
                       preprocess_mean=mean, preprocess_scale=scale)
