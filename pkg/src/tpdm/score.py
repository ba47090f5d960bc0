"""Score models: the analytic Gaussian oracle and a small convolutional network.

Both backends expose the same two calls, batched over leading slices:

* ``eval(x, t)`` -- the score of ``x`` (``(h, w)`` or ``(B, h, w)``) at time ``t``;
* ``vjp(x, t, v)`` -- ``J^T v`` with ``J = d eval / d x``.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from . import autodiff as ad
from . import rng
from .sde import NoiseSchedule, sigma
from .volume import SliceAxis, Volume3D, all_slices

# spread of normalized intensities, used to precondition network inputs
DATA_SCALE = 0.5


class ScoreModel(Protocol):
    schedule: NoiseSchedule

    def eval(self, x: np.ndarray, t) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, t, v: np.ndarray) -> np.ndarray: ...


class AnalyticGaussianScore:
    """Exact score of ``N(mu, tau^2 I)`` after VE perturbation to level ``sigma(t)``."""

    def __init__(self, mu=0.0, tau: float = 1.0, schedule: NoiseSchedule | None = None):
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.mu = mu
        self.tau = float(tau)
        self.schedule = schedule or NoiseSchedule()

    def _var(self, t):
        return self.tau**2 + sigma(self.schedule, t) ** 2

    def eval(self, x, t):
        return -(x - self.mu) / self._var(t)

    def vjp(self, x, t, v):
        return -np.asarray(v) / self._var(t)

    def denoiser_vjp(self, x, t, v):
        """``(I + sigma^2 J)^T v`` in closed form, avoiding cancellation at large sigma."""
        return np.asarray(v) * (self.tau**2 / self._var(t))


def analytic_score(x, t, mu, tau, schedule: NoiseSchedule | None = None):
    return AnalyticGaussianScore(mu, tau, schedule).eval(x, t)


def score_vjp(model: ScoreModel, x, t, v):
    return model.vjp(x, t, v)


class NeuralScore:
    """Plain convolutional score network.

    Layout: ``layers`` 3x3 convolutions with SiLU between them.  The input
    stack is the preconditioned slice ``x / sqrt(sigma^2 + DATA_SCALE^2)``
    plus a constant channel ``log sigma / log sigma_max``; the last layer's
    single output channel is divided by ``sigma``.

    Parameters are kept as a list ``[w0, b0, w1, b1, ...]`` with kernels
    shaped ``(3, 3, Cin, Cout)``; that is also the on-disk order.
    """

    def __init__(
        self,
        layers: int = 4,
        channels: int = 32,
        schedule: NoiseSchedule | None = None,
        seed: int = 0,
        dtype=np.float64,
        params: list[np.ndarray] | None = None,
    ):
        if layers < 2 or channels < 1:
            raise ValueError("need at least 2 layers and 1 channel")
        self.layers = layers
        self.channels = channels
        self.schedule = schedule or NoiseSchedule()
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self._init_params(seed)
        shapes = self.param_shapes()
        if [p.shape for p in params] != shapes:
            raise ValueError("parameter shapes do not match the architecture")
        self.params = [np.asarray(p, dtype=self.dtype) for p in params]

    def param_shapes(self) -> list[tuple[int, ...]]:
        chans = [2] + [self.channels] * (self.layers - 1) + [1]
        shapes = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            shapes += [(3, 3, cin, cout), (cout,)]
        return shapes

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def _init_params(self, seed: int) -> list[np.ndarray]:
        g = rng.generator(seed, rng.TAG_PARAMS)
        params = []
        shapes = self.param_shapes()
        for k in range(0, len(shapes), 2):
            wshape, bshape = shapes[k], shapes[k + 1]
            fan_in = 9 * wshape[2]
            std = np.sqrt(2.0 / fan_in)
            if k == len(shapes) - 2:
                std *= 0.1
            params += [g.standard_normal(wshape) * std, np.zeros(bshape)]
        return params

    def astype(self, dtype) -> NeuralScore:
        return NeuralScore(self.layers, self.channels, self.schedule, dtype=dtype, params=self.params)

    def config(self) -> dict:
        return {"layers": self.layers, "channels": self.channels, "data_scale": DATA_SCALE}

    def _sigmas(self, t, batch: int) -> np.ndarray:
        s = np.asarray(sigma(self.schedule, t), dtype=np.float64)
        return np.broadcast_to(s, (batch,)).copy()

    def _forward(self, x, t, param_grads: bool, input_grad: bool):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 2
        if single:
            x = x[None]
        B = x.shape[0]
        sig = self._sigmas(t, B)
        c_in = (1.0 / np.sqrt(sig**2 + DATA_SCALE**2)).reshape(B, 1, 1, 1)
        tchan = (np.log(sig) / np.log(self.schedule.sigma_max)).reshape(B, 1, 1, 1)
        xin = ad.Var(x[..., None], requires_grad=input_grad)
        tvar = ad.Var(np.broadcast_to(tchan, xin.value.shape).astype(self.dtype))
        pvars = [ad.Var(p, requires_grad=param_grads) for p in self.params]
        h = ad.concat_channels(ad.scale(xin, c_in), tvar)
        n = len(pvars) // 2
        for k in range(n):
            h = ad.conv2d(h, pvars[2 * k], pvars[2 * k + 1])
            if k < n - 1:
                h = ad.silu(h)
        out = ad.scale(h, (1.0 / sig).reshape(B, 1, 1, 1))
        return out, xin, pvars, single

    def eval(self, x, t):
        out, _, _, single = self._forward(x, t, False, False)
        y = out.value[..., 0]
        return y[0] if single else y

    def eval_with_vjp(self, x, t):
        """Score at ``x`` plus a one-shot closure for ``J^T v`` reusing the forward pass."""
        out, xin, _, single = self._forward(x, t, False, True)
        y = out.value[..., 0]

        def vjp(v):
            v = np.asarray(v, dtype=self.dtype)
            ad.backward(out, (v[None] if single else v)[..., None])
            g = xin.grad[..., 0]
            return g[0] if single else g

        return (y[0] if single else y), vjp

    def vjp(self, x, t, v):
        out, xin, _, single = self._forward(x, t, False, True)
        v = np.asarray(v, dtype=self.dtype)
        if single:
            v = v[None]
        ad.backward(out, v[..., None])
        g = xin.grad[..., 0]
        return g[0] if single else g

    def loss_and_grad(self, x0, t, z):
        """DSM loss of one batch and its gradient with respect to ``params``."""
        sig = self._sigmas(t, x0.shape[0])
        xt = x0 + sig[:, None, None] * z
        out, _, pvars, _ = self._forward(xt, t, True, False)
        s = out.value[..., 0]
        resid = sig[:, None, None] * s + z
        B = x0.shape[0]
        loss = float(np.sum(resid.astype(np.float64) ** 2) / B)
        cot = (2.0 / B) * sig[:, None, None] * resid
        ad.backward(out, cot[..., None].astype(self.dtype))
        return loss, [p.grad for p in pvars]


def dsm_loss(model: ScoreModel, x0_batch, t_batch, z_batch, sched: NoiseSchedule | None = None) -> float:
    """Mean over the batch of ``sigma^2 * || s(x0 + sigma z, t) + z / sigma ||^2``."""
    sched = sched or model.schedule
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    z_batch = np.asarray(z_batch, dtype=np.float64)
    t_batch = np.asarray(t_batch, dtype=np.float64)
    if x0_batch.shape != z_batch.shape or t_batch.shape != x0_batch.shape[:1]:
        raise ValueError("x0, t and z batches are not congruent")
    total = 0.0
    for x0, t, z in zip(x0_batch, t_batch, z_batch):
        s = sigma(sched, t)
        pred = np.asarray(model.eval(x0 + s * z, t), dtype=np.float64)
        total += s**2 * float(np.sum((pred + z / s) ** 2))
    return total / len(x0_batch)


def build_slice_datasets(volumes) -> tuple[np.ndarray, np.ndarray]:
    """Primary (all Axis3 planes) and auxiliary (all Axis1 planes) training sets."""
    volumes = list(volumes)
    if not volumes:
        raise ValueError("no volumes given")
    shape = volumes[0].shape
    if any(v.shape != shape for v in volumes):
        raise ValueError("volumes do not share one shape")
    data = [v.data if isinstance(v, Volume3D) else np.asarray(v) for v in volumes]
    primary = np.concatenate([all_slices(d, SliceAxis.AXIS3) for d in data])
    auxiliary = np.concatenate([all_slices(d, SliceAxis.AXIS1) for d in data])
    return primary, auxiliary
