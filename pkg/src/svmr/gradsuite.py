"""Finite-difference verification across every trainable operator.

Each entry pairs a freshly seeded operator with a compatible random input
and runs a central-difference gradient check.  Purely linear operators are
held to a tighter tolerance than compositions with nonlinearities, whose
curvature inflates the truncation error of the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (AvgPoolTemporal, ChannelProjection, ConceptTemporalConv,
                  FunctionOp, LinearResize, MapConv2d, OperatorParams,
                  SampleAxisConv, TemporalConv1d, grad_check)
from .stage1 import Stage1Config, Stage1Model
from .stage2 import BMSampler, RlmLoss, Stage2Config, Stage2Model

LINEAR_TOL = 1e-4
DEFAULT_TOL = 1e-3

# shapes stay small so the whole suite runs in seconds
_C_IN, _C_OUT, _LEN = 5, 4, 12
_N_SAMPLES, _L_REF = 4, 6


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    seed: int
    err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.err < self.tol


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, salt)))


def _seq(rng: np.random.Generator, channels: int = _C_IN, length: int = _LEN):
    return rng.standard_normal((channels, length))


def _check_temporal_conv_linear(seed: int):
    op = TemporalConv1d(_C_IN, _C_OUT, activation="linear", seed=seed)
    return op, _seq(_rng(seed, 1))


def _check_temporal_conv_relu(seed: int):
    op = TemporalConv1d(_C_IN, _C_OUT, activation="relu", seed=seed)
    return op, _seq(_rng(seed, 2))


def _check_concept_conv(seed: int):
    op = ConceptTemporalConv(3, 2, activation="linear", seed=seed)
    x = _rng(seed, 3).standard_normal((_C_IN, _LEN, 3))
    return op, x


def _check_channel_projection(seed: int):
    op = ChannelProjection(_C_IN, _C_OUT, activation="linear", seed=seed)
    return op, _seq(_rng(seed, 4))


def _check_sample_axis_conv(seed: int):
    op = SampleAxisConv(_C_IN, _C_OUT, _N_SAMPLES, activation="linear",
                        seed=seed)
    x = _rng(seed, 5).standard_normal((_C_IN, _N_SAMPLES, _L_REF, _L_REF))
    return op, x


def _check_map_conv(seed: int):
    op = MapConv2d(_C_IN, _C_OUT, kernel_size=3, activation="linear",
                   seed=seed)
    x = _rng(seed, 6).standard_normal((_C_IN, _L_REF, _L_REF))
    return op, x


def _check_avg_pool(seed: int):
    op = AvgPoolTemporal(3)
    return op, _seq(_rng(seed, 7))


def _check_linear_resize(seed: int):
    op = LinearResize(7)
    return op, _seq(_rng(seed, 8))


def _check_bm_sampler(seed: int):
    sampler = BMSampler(_L_REF, _N_SAMPLES)
    op = FunctionOp(lambda f: (sampler.forward(f), f.shape),
                    lambda dy, shape: sampler.backward(dy, shape))
    x = _rng(seed, 9).standard_normal((_C_IN, _L_REF))
    return op, x


class _Stage1LossOp:
    """Encoder/decoder pair plus reconstruction-similarity loss."""

    def __init__(self, model: Stage1Model, g: np.ndarray):
        self.model = model
        self.g = g

    def forward(self, xs):
        loss, _, cache = self.model.loss_forward(xs[0], xs[1], self.g)
        return loss, cache

    def backward(self, dy, cache):
        dfq, dfr = self.model.loss_backward(cache)
        return dfq * dy, dfr * dy

    def zero_grads(self):
        self.model.zero_grads()

    def iter_params(self):
        for layer in self.model.layers():
            yield from layer.iter_params()


class _Stage2LossOp:
    """Relocalization network plus frozen-selection map loss."""

    def __init__(self, model: Stage2Model, loss_fn: RlmLoss):
        self.model = model
        self.loss_fn = loss_fn
        self.params = OperatorParams(seed=0, arrays={})
        self.grads = {}

    def forward(self, xs):
        m_c, m_r, cache = self.model.forward(xs[0], xs[1])
        loss, _, lcache = self.loss_fn.forward(m_c, m_r)
        return np.array(loss), (cache, lcache)

    def backward(self, dy, cache):
        mcache, lcache = cache
        dm_c, dm_r = self.loss_fn.backward(lcache)
        return self.model.backward(float(dy) * dm_c, float(dy) * dm_r, mcache)

    def zero_grads(self):
        self.model.zero_grads()

    def iter_params(self):
        for layer in self.model.layers():
            yield from layer.iter_params()


def _check_stage1_loss(seed: int):
    config = Stage1Config(channels=3, d_e=4, t_emb=2, l_q=4, l_r=_L_REF,
                          ctc_filters=(1, 2, 1), seed=seed)
    model = Stage1Model(config)
    rng = _rng(seed, 10)
    f_q = rng.standard_normal((2, 3, config.l_q))
    f_r = rng.standard_normal((2, 3, config.l_r))
    g = rng.uniform(0.0, 1.0, (2, config.t_emb))
    return _Stage1LossOp(model, g), (f_q, f_r)


def _check_stage2_loss(seed: int):
    config = Stage2Config(channels=3, base_hidden=5, map_channels=4,
                          n_samples=_N_SAMPLES, head_channels=4, l_q=4,
                          l_r=_L_REF, seed=seed)
    model = Stage2Model(config)
    rng = _rng(seed, 11)
    f_q = rng.standard_normal((2, 3, config.l_q))
    f_r = rng.standard_normal((2, 3, config.l_r))
    g = rng.uniform(0.0, 1.0, (2, config.l_r, config.l_r))
    loss_fn = RlmLoss(g, rng, config)
    return _Stage2LossOp(model, loss_fn), (f_q, f_r)


SUITE = (
    ("temporal_conv_linear", LINEAR_TOL, _check_temporal_conv_linear),
    ("temporal_conv_relu", DEFAULT_TOL, _check_temporal_conv_relu),
    ("concept_temporal_conv", LINEAR_TOL, _check_concept_conv),
    ("channel_projection", LINEAR_TOL, _check_channel_projection),
    ("sample_axis_conv", LINEAR_TOL, _check_sample_axis_conv),
    ("map_conv2d", LINEAR_TOL, _check_map_conv),
    ("avg_pool_temporal", LINEAR_TOL, _check_avg_pool),
    ("linear_resize", LINEAR_TOL, _check_linear_resize),
    ("boundary_sampler", LINEAR_TOL, _check_bm_sampler),
    ("stage1_loss", DEFAULT_TOL, _check_stage1_loss),
    ("stage2_loss", DEFAULT_TOL, _check_stage2_loss),
)


def run_gradient_suite(seeds=(0, 1, 2, 3, 4)) -> list[GradCheckResult]:
    """Check every operator at each seed; results carry max relative error."""
    results = []
    for name, tol, factory in SUITE:
        for seed in seeds:
            op, x = factory(seed)
            err = grad_check(op, x, rng=np.random.default_rng((seed + 1) * 7919))
            results.append(GradCheckResult(name, seed, float(err), tol))
    return results
