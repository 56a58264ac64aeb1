"""Score-based (OUVE) and Schrödinger-bridge generative processes.

Everything here works on real tensors of any shape with a leading batch
dimension; spectrograms are carried as two real channels (real, imag).
Process time ``t`` is either a python float or a tensor of shape ``(batch,)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import torch
from torch import nn

Network = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class ScheduleError(ValueError):
    pass


class SamplerDivergence(FloatingPointError):
    """Non-finite values appeared in a sampling trajectory."""


@dataclass(frozen=True)
class SdeSchedule:
    kind: Literal["OUVE", "BridgeVE"]
    sigma_min: float
    sigma_max: float
    gamma: float = 0.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ScheduleError("need 0 < sigma_min < sigma_max")
        if self.kind == "OUVE" and not self.gamma > 0:
            raise ScheduleError("OUVE schedule needs gamma > 0")
        if self.kind not in ("OUVE", "BridgeVE"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def ouve(cls, sigma_min=0.05, sigma_max=0.5, gamma=1.5) -> "SdeSchedule":
        return cls("OUVE", sigma_min, sigma_max, gamma)

    @classmethod
    def bridge(cls, sigma_min=0.7, sigma_max=1.82) -> "SdeSchedule":
        return cls("BridgeVE", sigma_min, sigma_max)

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def g(self, t):
        """Diffusion coefficient, shared by both processes."""
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t * math.sqrt(2 * self.log_ratio)

    def _require(self, kind: str) -> None:
        if self.kind != kind:
            raise ScheduleError(f"operation needs a {kind} schedule, got {self.kind}")


def _bcast(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


# -- OUVE (SGMSE+) -------------------------------------------------------------

def ouve_variance(s: SdeSchedule, t):
    """Closed-form marginal variance of the OUVE process started at a point."""
    s._require("OUVE")
    lr = s.log_ratio
    r = s.sigma_max / s.sigma_min
    exp = torch.exp if isinstance(t, torch.Tensor) else np.exp
    if not isinstance(t, torch.Tensor):
        t = np.asarray(t, dtype=float)
    return s.sigma_min ** 2 * (r ** (2 * t) - exp(-2 * s.gamma * t)) * lr / (s.gamma + lr)


def ouve_std(s: SdeSchedule, t):
    v = ouve_variance(s, t)
    return torch.sqrt(v) if isinstance(v, torch.Tensor) else np.sqrt(v)


def ouve_marginal(x0: torch.Tensor, y: torch.Tensor, t, s: SdeSchedule):
    """Mean and std of ``x_t | x0, y``: mean drifts from ``x0`` towards ``y``."""
    s._require("OUVE")
    tt = _bcast(t, x0)
    decay = torch.exp(-s.gamma * tt)
    mean = decay * x0 + (1 - decay) * y
    return mean, ouve_std(s, tt)


def _per_example_sq_norm(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).pow(2).sum(dim=1) if x.ndim > 1 else x.pow(2)


def score_matching_loss(network: Network, x0: torch.Tensor, y: torch.Tensor, t, z: torch.Tensor,
                        s: SdeSchedule, t_eps: float = 0.03,
                        weighting: Literal["none", "sigma2"] = "none") -> torch.Tensor:
    """Denoising score matching ``|| s(x_t, y, t) + z / sigma(t) ||^2`` (batch mean).

    ``weighting="sigma2"`` multiplies each term by ``sigma(t)**2``, the form
    used during training.
    """
    tt = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any(tt < t_eps - 1e-12) or torch.any(tt > 1):
        raise ScheduleError(f"process time must lie in [{t_eps}, 1]")
    mean, std = ouve_marginal(x0, y, t, s)
    xt = mean + std * z
    score = network(xt, y, tt)
    resid = score + z / std
    if weighting == "sigma2":
        resid = resid * std
    return _per_example_sq_norm(resid).mean()


def pc_sample(network: Network, y: torch.Tensor, s: SdeSchedule, steps: int = 30,
              generator: torch.Generator | None = None, t_eps: float = 0.03,
              snr: float = 0.5) -> torch.Tensor:
    """Predictor-corrector sampling of the reverse OUVE SDE.

    Each of the ``steps`` uniform time steps runs one annealed Langevin
    corrector update followed by one reverse-diffusion predictor update, so the
    network is evaluated ``2 * steps`` times. Returns the final noise-free mean.
    """
    s._require("OUVE")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = (1.0 - t_eps) / steps

    def randn():
        return torch.randn(y.shape, generator=generator, dtype=y.dtype, device=y.device)

    def check(x, i, what):
        if not torch.isfinite(x).all():
            raise SamplerDivergence(f"non-finite state after {what} at step {i}")

    with torch.no_grad():
        x = y + float(ouve_std(s, 1.0)) * randn()
        x_mean = x
        for i in range(steps):
            t = 1.0 - i * dt
            tvec = torch.full((y.shape[0],), t, dtype=y.dtype, device=y.device)
            std = float(ouve_std(s, t))
            # corrector
            eps = 2 * (snr * std) ** 2
            x = x + eps * network(x, y, tvec) + math.sqrt(2 * eps) * randn()
            check(x, i, "corrector")
            # predictor
            g = s.g(t)
            drift = s.gamma * (y - x) - g ** 2 * network(x, y, tvec)
            x_mean = x - drift * dt
            x = x_mean + g * math.sqrt(dt) * randn()
            check(x, i, "predictor")
    return x_mean


# -- Schrödinger bridge (VE reference process) ----------------------------------

@dataclass(frozen=True)
class BridgeWeights:
    w_x: float | torch.Tensor
    w_y: float | torch.Tensor
    var: float | torch.Tensor


def bridge_sigma2(s: SdeSchedule, t):
    """Accumulated reference-process variance ``sigma_min^2 (r^{2t} - 1)``."""
    s._require("BridgeVE")
    r = s.sigma_max / s.sigma_min
    if isinstance(t, torch.Tensor):
        return s.sigma_min ** 2 * (r ** (2 * t) - 1)
    return s.sigma_min ** 2 * (r ** (2 * np.asarray(t, dtype=float)) - 1)


def bridge_weights(s: SdeSchedule, t) -> BridgeWeights:
    s._require("BridgeVE")
    if isinstance(t, torch.Tensor):
        if torch.any(t < 0) or torch.any(t > 1):
            raise ScheduleError("t must lie in [0, 1]")
    elif np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ScheduleError("t must lie in [0, 1]")
    st2 = bridge_sigma2(s, t)
    s12 = bridge_sigma2(s, 1.0)
    w_y = st2 / s12
    w_x = (s12 - st2) / s12
    var = st2 * (s12 - st2) / s12
    if not isinstance(t, torch.Tensor) and np.ndim(t) == 0:
        return BridgeWeights(float(w_x), float(w_y), float(var))
    return BridgeWeights(w_x, w_y, var)


def bridge_marginal(x0: torch.Tensor, y: torch.Tensor, t, s: SdeSchedule):
    tt = _bcast(t, x0)
    w = bridge_weights(s, tt)
    return w.w_x * x0 + w.w_y * y, torch.sqrt(w.var)


def sb_data_loss(network: Network, x0: torch.Tensor, y: torch.Tensor, t, z: torch.Tensor,
                 s: SdeSchedule, t_eps: float = 0.03, var_floor: float = 1e-6) -> torch.Tensor:
    """Weighted data-prediction loss ``lambda(t) || D(x_t, y, t) - x0 ||^2``.

    ``lambda(t) = 1 / max(var(t), var_floor)``; ``t`` is clamped to
    ``[t_eps, 1 - t_eps]`` where the bridge variance is non-degenerate.
    """
    tt = torch.as_tensor(t, dtype=x0.dtype).clamp(t_eps, 1 - t_eps)
    mean, std = bridge_marginal(x0, y, tt, s)
    xt = mean + std * z
    pred = network(xt, y, tt)
    lam = 1.0 / bridge_weights(s, tt).var.clamp_min(var_floor)
    return (lam.reshape(-1) * _per_example_sq_norm(pred - x0)).mean()


def sb_sde_sample(network: Network, y: torch.Tensor, s: SdeSchedule, steps: int = 50,
                  generator: torch.Generator | None = None, t_eps: float = 0.03) -> torch.Tensor:
    """First-order SDE sampler for the bridge, from ``x_1 = y`` down to ``t_eps``.

    One network evaluation per step; the last step returns the network's data
    prediction.
    """
    s._require("BridgeVE")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.linspace(1.0, t_eps, steps)
    with torch.no_grad():
        x = y.clone()
        for i, t in enumerate(ts):
            tvec = torch.full((y.shape[0],), float(t), dtype=y.dtype, device=y.device)
            x0_hat = network(x, y, tvec)
            if not torch.isfinite(x0_hat).all():
                raise SamplerDivergence(f"non-finite data prediction at step {i}")
            if i == steps - 1:
                return x0_hat
            st2 = float(bridge_sigma2(s, t))
            ss2 = float(bridge_sigma2(s, ts[i + 1]))
            keep = ss2 / st2
            noise = torch.randn(y.shape, generator=generator, dtype=y.dtype, device=y.device)
            x = keep * x + (1 - keep) * x0_hat + math.sqrt(ss2 * (1 - keep)) * noise
    raise AssertionError("unreachable")


# -- EMA -------------------------------------------------------------------------

def ema_update(shadow, weights, decay: float = 0.999):
    """Return ``decay * shadow + (1 - decay) * weights`` for arrays, tensors or dicts."""
    if isinstance(shadow, dict):
        if shadow.keys() != weights.keys():
            raise ValueError("shadow and weights have different keys")
        return {k: ema_update(shadow[k], weights[k], decay) for k in shadow}
    if tuple(shadow.shape) != tuple(weights.shape):
        raise ValueError(f"shape mismatch {tuple(shadow.shape)} vs {tuple(weights.shape)}")
    return decay * shadow + (1 - decay) * weights


class EMA:
    """Shadow copy of a module's floating-point parameters."""

    def __init__(self, model: nn.Module, decay: float = 0.999):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()
                       if v.is_floating_point()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.state_dict().items():
            if k in self.shadow:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict) -> None:
        self.shadow = {k: v.clone() for k, v in state.items()}


# -- generative model wrappers -----------------------------------------------------

class ScoreModel(nn.Module):
    """SGMSE+ score network built on a time-conditioned U-Net.

    The backbone predicts clean coefficients ``D``; the score is the Gaussian
    score around the OUVE mean of that prediction,
    ``-(x_t - mean_t(D, y)) / sigma(t)^2``.
    """

    family = "SGMSE+"

    def __init__(self, backbone: nn.Module, schedule: SdeSchedule):
        super().__init__()
        self.backbone = backbone
        self.schedule = schedule

    def forward(self, xt: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        d = self.backbone(torch.cat([xt, y], dim=1), t)
        mean, std = ouve_marginal(d, y, t, self.schedule)
        return -(xt - mean) / std ** 2


class BridgeModel(nn.Module):
    """SB data-prediction network ``D(x_t, y, t)``."""

    family = "SB"

    def __init__(self, backbone: nn.Module, schedule: SdeSchedule):
        super().__init__()
        self.backbone = backbone
        self.schedule = schedule

    def forward(self, xt: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.backbone(torch.cat([xt, y], dim=1), t)
