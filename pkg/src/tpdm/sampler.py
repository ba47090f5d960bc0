"""Alternating two-axis sampling loops for 3D volumes.

The state ``X`` is a ``(d1, d2, d3)`` array.  At each step ``i`` (from
``N-1`` down to ``0``) the plan selects one branch:

* primary   -- every Axis3 plane ``X[:, :, j]`` takes a reverse step with the
  primary model, followed (conditional runs) by a measurement-guidance
  correction against ``Y[:, :, j]``;
* auxiliary -- every Axis1 plane ``X[j, :, :]`` takes a reverse step with the
  auxiliary model.

Step ``i >= 1`` moves the noise level from ``sigma_i`` to ``sigma_{i-1}``
(ancestral predictor, then optional Langevin correctors at the new level);
step ``0`` is the noise-free final denoising move ``x + sigma_0^2 s``.
All noise is drawn from counter-based streams keyed on
``(seed, branch, step)`` with slices in index order, so the result does not
depend on how slices are chunked or threaded.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .guidance import GuidanceConfig, GuidanceMode, guidance_from_score
from .sde import NoiseSchedule, corrector_step_batch, final_denoise, predictor_step
from .volume import SliceAxis, Volume3D, all_slices, from_slices

log = logging.getLogger(__name__)

PRIMARY = "primary"
AUXILIARY = "auxiliary"


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite values in the sampler state at step {step}")
        self.step = step


def is_integer_k(K) -> bool:
    return isinstance(K, (int, np.integer)) or (isinstance(K, float) and math.isfinite(K) and K.is_integer())


@dataclass
class SamplerConfig:
    N: int = 2000
    K: float = 2
    lam: float = 0.0
    snr: float = 0.16
    corrector_steps: int = 1
    seed: int = 0
    guidance_mode: str = "exact_vjp"
    normalize_residual: bool = False
    sigma_min: float = 0.01
    sigma_max: float = 378.0
    check_every: int = 50
    chunk: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if not self.K >= 1:
            raise ValueError("K must be >= 1")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lambda must be finite and non-negative")
        if not self.snr > 0 or self.corrector_steps < 0 or self.seed < 0:
            raise ValueError("invalid corrector or seed settings")
        GuidanceMode(self.guidance_mode)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.N)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not math.isfinite(d["K"]):
            d["K"] = "inf"
        return d


@dataclass
class StepPlan:
    """``primary[i]`` tells whether step ``i`` runs the primary branch."""

    N: int
    K: float
    seed: int
    primary: np.ndarray = field(repr=False)

    def branch(self, i: int) -> str:
        return PRIMARY if self.primary[i] else AUXILIARY

    @property
    def n_primary(self) -> int:
        return int(self.primary.sum())

    @property
    def n_auxiliary(self) -> int:
        return self.N - self.n_primary

    def summary(self) -> dict:
        return {
            "N": self.N,
            "K": self.K if math.isfinite(self.K) else "inf",
            "kind": "modular" if is_integer_k(self.K) else "bernoulli",
            "n_primary": self.n_primary,
            "n_auxiliary": self.n_auxiliary,
            # branch per step in loop order i = N-1 .. 0
            "branches": "".join("P" if self.primary[i] else "A" for i in range(self.N - 1, -1, -1)),
        }


def make_step_plan(N: int, K, seed: int = 0) -> StepPlan:
    """Integer ``K``: auxiliary iff ``i mod K == 0``.  Otherwise each step is
    primary with probability ``1 - 1/K`` (``K = inf`` gives all-primary)."""
    if N < 2:
        raise ValueError("N must be >= 2")
    if not K > 1:
        raise ValueError(f"K must exceed 1, got {K}")
    i = np.arange(N)
    if is_integer_k(K):
        primary = (i % int(K)) != 0
    else:
        u = rng.generator(seed, rng.TAG_PLAN).random(N)
        # draw n belongs to loop position n, i.e. step i = N-1-n
        primary = (u < 1.0 - 1.0 / K)[::-1].copy()
    return StepPlan(N, K, seed, primary)


@dataclass
class Problem:
    """Measurements ``Y`` (stack over Axis3 planes, ``(n, h', w')``) and operator."""

    op: object
    Y: np.ndarray
    guidance: GuidanceConfig


class _Runner:
    def __init__(self, shape, model_p, model_a, cfg: SamplerConfig, problem: Problem | None):
        self.shape = tuple(shape)
        self.model_p, self.model_a = model_p, model_a
        self.cfg = cfg
        self.sched = cfg.schedule
        self.problem = problem
        self.residual_trace: list[tuple[int, float]] = []
        self.zero_score_events = 0

    def _t(self, i: int) -> float:
        return i / (self.sched.N - 1)

    def _chunks(self, n: int):
        size = self.cfg.chunk if self.cfg.chunk > 0 else n
        return [slice(a, min(n, a + size)) for a in range(0, n, size)]

    def _step_slices(self, x, i, model, noise, y=None, op=None):
        """Advance a stack of slices by one step; returns (new stack, residual^2 sum)."""
        t = self._t(i)
        sig = self.sched.sigma_at(i)
        guided = y is not None
        vjp = None
        if guided and self.problem.guidance.mode is GuidanceMode.EXACT_VJP and hasattr(model, "eval_with_vjp"):
            score, vjp = model.eval_with_vjp(x, t)
        else:
            score = model.eval(x, t)
        if i >= 1:
            xp = predictor_step(x, i, score, noise[:, 0], self.sched)
            t_next = self._t(i - 1)
            for k in range(self.cfg.corrector_steps):
                s2 = model.eval(xp, t_next)
                xp, zero = corrector_step_batch(xp, s2, noise[:, 1 + k], self.cfg.snr)
                self.zero_score_events += int(zero.sum())
        else:
            xp = final_denoise(x, score, self.sched)
        resid = 0.0
        if guided:
            g, resid = guidance_from_score(
                model, op, x, y, t, sig, score, self.problem.guidance, vjp=vjp, return_residual=True
            )
            xp = xp - self.cfg.lam * g
        return xp, resid

    def sweep(self, X, i, branch):
        axis = SliceAxis.AXIS3 if branch == PRIMARY else SliceAxis.AXIS1
        model = self.model_p if branch == PRIMARY else self.model_a
        tag = rng.TAG_PRIMARY if branch == PRIMARY else rng.TAG_AUXILIARY
        stack = all_slices(X, axis)
        n, h, w = stack.shape
        noise = rng.normal(self.cfg.seed, tag, i, (n, 1 + self.cfg.corrector_steps, h, w)).astype(stack.dtype)
        guided = branch == PRIMARY and self.problem is not None and self.cfg.lam > 0
        chunks = self._chunks(n)

        def work(c):
            if not guided:
                return self._step_slices(stack[c], i, model, noise[c])
            op = self.problem.op
            if hasattr(op, "select"):  # operators that differ per plane
                op = op.select(c)
            return self._step_slices(stack[c], i, model, noise[c], self.problem.Y[c], op)

        if self.cfg.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.cfg.threads) as ex:
                results = list(ex.map(work, chunks))
        else:
            results = [work(c) for c in chunks]
        out = np.empty_like(stack)
        total = 0.0
        for c, (part, r) in zip(chunks, results):
            out[c] = part
            total += r
        if guided:
            self.residual_trace.append((i, float(total)))
        return from_slices(out, axis)

    def run(self, plan: StepPlan, dtype=np.float64):
        X = self.sched.sigma_max * rng.normal(self.cfg.seed, rng.TAG_INIT, 0, self.shape).astype(dtype)
        # overflow is reported through DivergenceError, not floating-point warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(self.sched.N - 1, -1, -1):
                X = self.sweep(X, i, plan.branch(i))
                if (self.cfg.check_every and i % self.cfg.check_every == 0) or i == 0:
                    if not np.all(np.isfinite(X)):
                        raise DivergenceError(i)
        return X


def _model_dtype(*models):
    dts = [getattr(m, "dtype", np.dtype(np.float64)) for m in models]
    return np.result_type(*dts)


def _check_plan(cfg: SamplerConfig, plan):
    plan = plan or make_step_plan(cfg.N, cfg.K, cfg.seed)
    if plan.N != cfg.N:
        raise ValueError("plan length does not match N")
    return plan


def solve_inverse(Y, op, model_p, model_a, cfg: SamplerConfig, plan: StepPlan | None = None, info: dict | None = None):
    """Conditional sampling of a volume whose Axis3 planes are measured by ``op``.

    ``Y`` has shape ``(h', w', d3)``: plane ``Y[:, :, j]`` is the measurement of
    ``X[:, :, j]``.  ``info``, when given, receives the plan summary and the
    per-step residual trace.
    """
    Y = np.asarray(Y)
    if Y.ndim != 3 or Y.shape[:2] != tuple(op.out_shape):
        raise ValueError(f"measurement stack {Y.shape} does not match operator output {op.out_shape}")
    shape = tuple(op.in_shape) + (Y.shape[2],)
    plan = _check_plan(cfg, plan)
    guidance = GuidanceConfig(cfg.lam if cfg.lam > 0 else 1.0, cfg.guidance_mode, cfg.normalize_residual)
    problem = Problem(op, np.ascontiguousarray(np.moveaxis(Y, 2, 0)), guidance)
    runner = _Runner(shape, model_p, model_a, cfg, problem)
    X = runner.run(plan, _model_dtype(model_p, model_a))
    if info is not None:
        info.update(
            plan=plan.summary(),
            residual_trace=runner.residual_trace,
            zero_score_events=runner.zero_score_events,
            unconditional=cfg.lam == 0,
        )
    return Volume3D(X)


def generate(model_p, model_a, cfg: SamplerConfig, shape, plan: StepPlan | None = None, info: dict | None = None):
    """Unconditional sampling: the conditional loop without a measurement term."""
    plan = _check_plan(cfg, plan)
    runner = _Runner(shape, model_p, model_a, cfg, None)
    X = runner.run(plan, _model_dtype(model_p, model_a))
    if info is not None:
        info.update(plan=plan.summary(), zero_score_events=runner.zero_score_events)
    return Volume3D(X)


def primary_conditional_sweep(X, i, model_p, op, Y, cfg: SamplerConfig):
    """One guided primary step over all Axis3 planes of ``X``."""
    X = X.data if isinstance(X, Volume3D) else np.asarray(X)
    Y = np.asarray(Y)
    if Y.shape[2] != X.shape[2]:
        raise ValueError(f"{Y.shape[2]} measurement slices for {X.shape[2]} volume planes")
    if i < 0:
        raise ValueError("step index must be >= 0")
    guidance = GuidanceConfig(cfg.lam if cfg.lam > 0 else 1.0, cfg.guidance_mode, cfg.normalize_residual)
    runner = _Runner(X.shape, model_p, None, cfg, Problem(op, np.ascontiguousarray(np.moveaxis(Y, 2, 0)), guidance))
    return Volume3D(runner.sweep(X, i, PRIMARY))


def primary_sweep(X, i, model_p, cfg: SamplerConfig):
    X = X.data if isinstance(X, Volume3D) else np.asarray(X)
    return Volume3D(_Runner(X.shape, model_p, None, cfg, None).sweep(X, i, PRIMARY))


def auxiliary_sweep(X, i, model_a, cfg: SamplerConfig):
    X = X.data if isinstance(X, Volume3D) else np.asarray(X)
    if i < 0:
        raise ValueError("step index must be >= 0")
    return Volume3D(_Runner(X.shape, None, model_a, cfg, None).sweep(X, i, AUXILIARY))
