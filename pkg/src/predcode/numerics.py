"""Differentiable numerical core used by the training objectives.

All tensors are 64-bit. Gradients come from torch's reverse mode and
accumulate additively into per-parameter buffers; callers zero them once
per optimization step. Random initialization is drawn from numpy
substreams keyed by (seed, parameter name) so that adding a parameter
never shifts the draws of another.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64

_INIT_TAG = 0x1A17
_STEP_TAG = 0x57E9

ACTIVATIONS = ("tanh", "relu")
OUTPUT_TRANSFORMS = ("identity", "softplus")


def substream(seed: int, *tags: int) -> np.random.Generator:
    """Independent RNG stream derived from a base seed and integer tags."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def param_stream(seed: int, name: str) -> np.random.Generator:
    """Per-parameter init stream; stable under construction-order changes."""
    return substream(seed, _INIT_TAG, zlib.crc32(name.encode()))


def step_stream(seed: int, step: int) -> np.random.Generator:
    """Fresh noise/anchor stream for one optimization step."""
    return substream(seed, _STEP_TAG, step)


class ParamStore:
    """Named 64-bit parameter tensors with matching gradient buffers.

    Iteration order is insertion order, which is deterministic given the
    same construction sequence.
    """

    def __init__(self) -> None:
        self._params: dict[str, torch.Tensor] = {}

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)
        t = t.clone().detach().requires_grad_(True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> torch.Tensor:
        """Current gradient buffer (zeros if no reverse pass touched it)."""
        p = self[name]
        return torch.zeros_like(p) if p.grad is None else p.grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.zero_()

    def trainable(self):
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            p = self[name]
            v = torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)
            if v.shape != p.shape:
                raise ValueError(
                    f"parameter {name!r}: expected shape {tuple(p.shape)}, got {tuple(v.shape)}"
                )
            with torch.no_grad():
                p.copy_(v)


@dataclass(frozen=True)
class MlpSpec:
    """Feed-forward layer widths plus hidden activation and output transform."""

    widths: tuple[int, ...]
    activation: str = "tanh"
    output: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least input and output widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"MlpSpec widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {self.output!r}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def layer_names(self, prefix: str) -> list[tuple[str, str]]:
        return [(f"{prefix}.W{i}", f"{prefix}.b{i}") for i in range(len(self.widths) - 1)]


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, seed: int) -> None:
    """Weights ~ uniform(+/- 1/sqrt(fan_in)), biases zero."""
    for i, (w_name, b_name) in enumerate(spec.layer_names(prefix)):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        store.add(w_name, uniform_init(param_stream(seed, w_name), (fan_in, fan_out), fan_in))
        store.add(b_name, np.zeros(fan_out))


def mlp_apply(spec: MlpSpec, store: ParamStore, prefix: str, x: torch.Tensor) -> torch.Tensor:
    """Apply the MLP along the last axis of ``x``; reverse mode accumulates
    into parameter (and input) gradient buffers from any output cotangent."""
    if x.shape[-1] != spec.in_dim:
        raise ValueError(
            f"mlp {prefix!r}: input width {x.shape[-1]} != spec width {spec.in_dim}"
        )
    h = x
    n_layers = len(spec.widths) - 1
    for i, (w_name, b_name) in enumerate(spec.layer_names(prefix)):
        w, b = store[w_name], store[b_name]
        if tuple(w.shape) != (spec.widths[i], spec.widths[i + 1]):
            raise ValueError(
                f"parameter {w_name!r}: shape {tuple(w.shape)} does not match spec "
                f"{(spec.widths[i], spec.widths[i + 1])}"
            )
        h = h @ w + b
        if i < n_layers - 1:
            h = torch.tanh(h) if spec.activation == "tanh" else torch.relu(h)
    if spec.output == "softplus":
        h = torch.nn.functional.softplus(h)
    return h


def logsumexp(values: torch.Tensor) -> torch.Tensor:
    """log(sum(exp(v))) with max-shift stabilization; gradient is softmax."""
    if values.numel() == 0:
        raise ValueError("logsumexp of empty input")
    return torch.logsumexp(values.reshape(-1), dim=0)


_PSD_JITTER = 1e-6


def logdet_psd(matrix: torch.Tensor) -> torch.Tensor:
    """Log-determinant of a symmetric positive-definite matrix.

    The input is symmetrized, then factorized by Cholesky; if the clean
    factorization fails the fixed 1e-6 diagonal jitter is applied once
    before giving up.
    """
    a = torch.as_tensor(matrix, dtype=DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"logdet_psd needs a square matrix, got shape {tuple(a.shape)}")
    sym = 0.5 * (a + a.T)
    chol, info = torch.linalg.cholesky_ex(sym)
    if int(info) != 0:
        eye = torch.eye(a.shape[0], dtype=DTYPE)
        chol, info = torch.linalg.cholesky_ex(sym + _PSD_JITTER * eye)
        if int(info) != 0:
            raise ValueError("matrix not positive definite")
    return 2.0 * torch.log(torch.diagonal(chol)).sum()


@dataclass
class AdamState:
    """Adam moments and step counter for one ParamStore."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(state: AdamState, store: ParamStore) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in store.trainable():
        g = p.grad
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient in parameter {name!r} at step {t}"
            )
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        with torch.no_grad():
            p.addcdiv_(m / bc1, (v / bc2).sqrt() + state.eps, value=-state.lr)
    store.zero_grad()


def grad_check(loss_fn, store: ParamStore, h: float = 1e-5,
               max_entries_per_param: int = 48, seed: int = 0) -> dict:
    """Compare reverse-mode gradients of ``loss_fn()`` against central
    finite differences, subsampling entries of large parameters.

    ``loss_fn`` must be deterministic (fix its batch and noise draws).
    Returns a report with the max relative error; raises nothing.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {n: store.grad(n).clone() for n, _ in store.trainable()}
    store.zero_grad()

    per_param: dict[str, float] = {}
    checked = 0
    worst = 0.0
    for name, p in store.trainable():
        flat = p.detach().reshape(-1)
        n = flat.numel()
        if n <= max_entries_per_param:
            idx = np.arange(n)
        else:
            idx = param_stream(seed, "gradcheck." + name).choice(
                n, size=max_entries_per_param, replace=False
            )
            idx.sort()
        a_flat = analytic[name].reshape(-1)
        err = 0.0
        with torch.no_grad():
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                dn = float(loss_fn())
                flat[i] = orig
                fd = (up - dn) / (2.0 * h)
                an = float(a_flat[i])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                err = max(err, rel)
                checked += 1
        per_param[name] = err
        worst = max(worst, err)
    return {"max_rel_error": worst, "per_param": per_param, "entries_checked": checked}
