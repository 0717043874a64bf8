"""Finite-difference checks over every differentiable operation and a tiny model."""

from __future__ import annotations

from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import (
    ModelConfig,
    Parameters,
    encoder_forward,
    ffn,
    init_params,
    model_forward,
    msa_frame,
    parameter_shapes,
)
from .shift import PLACEMENTS, ShiftSpec, apply_shift, patch_shift, temporal_shift, token_shift
from .tensor import GradCheckReport, grad_check

TOLERANCE = 1e-5

TINY = ModelConfig(
    frames=2, height=8, width=8, patch=4, dim=8, depth=1, heads=2, classes=4,
    shift=ShiftSpec("token", Fraction(1, 4), Fraction(1, 4)),
)


def _layer_names(config: ModelConfig) -> list[str]:
    return [k[len("enc0."):] for k in parameter_shapes(config) if k.startswith("enc0.")]


def _layer_inputs(config: ModelConfig, rng) -> list[np.ndarray]:
    params = init_params(config, seed=int(rng.integers(1 << 31)))
    out = []
    for name in _layer_names(config):
        value = params["enc0." + name].data
        # perturb gains and biases away from 1/0 so their gradients are exercised
        out.append(value + rng.uniform(-0.3, 0.3, value.shape))
    return out


def _cases(rng) -> list[tuple[str, Callable, list, list | None]]:
    u = lambda *shape: rng.uniform(-1.0, 1.0, shape)  # noqa: E731
    cfg = TINY
    names = _layer_names(cfg)

    def layer_fn(fn):
        def run(z, *weights):
            return fn(z, dict(zip(names, weights)))
        return run

    cases = [
        ("matmul", tn.matmul, [u(3, 3), u(3, 3)], None),
        ("matmul_batched", tn.matmul, [u(2, 3, 4), u(2, 4, 2)], None),
        ("linear", tn.linear, [u(2, 3, 4), u(4, 5), u(5)], None),
        ("softmax", tn.softmax, [u(3, 5) * 3], None),
        ("layer_norm", lambda x, g, b: tn.layer_norm(x, g, b), [u(3, 6), u(6), u(6)], None),
        ("gelu", tn.gelu, [u(4, 5) * 3], None),
        ("add", tn.add, [u(3, 4), u(3, 4)], None),
        ("add_broadcast", tn.add, [u(2, 3, 4), u(4)], None),
        ("scale", lambda x: tn.scale(x, -1.7), [u(3, 4)], None),
        ("concat", lambda a, b: tn.concat([a, b], axis=1), [u(2, 3), u(2, 2)], None),
        ("split", lambda x: tn.split(x, 1, [2, 3])[1], [u(2, 5)], None),
        ("take", lambda x: tn.take(x, 1, 2), [u(2, 4, 3)], None),
        ("reshape", lambda x: tn.reshape(x, (3, 4)), [u(2, 6)], None),
        ("transpose", tn.transpose, [u(2, 3, 4)], None),
        ("swapaxes", lambda x: tn.swapaxes(x, 0, 2), [u(2, 3, 4)], None),
        ("broadcast_to", lambda x: tn.broadcast_to(x, (2, 3, 4)), [u(4)], None),
        ("mean", lambda x: tn.mean(x, axis=1), [u(2, 5, 3)], None),
        ("cross_entropy", lambda x: tn.cross_entropy(x, [2, 0, 1]), [u(3, 4) * 2], None),
        ("token_shift", lambda c: token_shift(c, 2, 1), [u(4, 6)], None),
        ("temporal_shift", lambda z: temporal_shift(z, 1, 2), [u(3, 4, 6)], None),
        ("patch_shift", lambda z: patch_shift(z, 2, 2), [u(3, 4, 6)], None),
        ("apply_shift_token", lambda z: apply_shift(z, cfg.shift), [u(3, 4, 8)], None),
        ("msa_frame", layer_fn(lambda z, l: msa_frame(z, l, cfg.heads)),
         [u(2, 5, cfg.dim)] + _layer_inputs(cfg, rng), None),
        ("ffn", layer_fn(ffn), [u(2, 5, cfg.dim)] + _layer_inputs(cfg, rng), None),
    ]
    for placement in PLACEMENTS:
        spec = ShiftSpec("token", Fraction(1, 4), Fraction(1, 4), placement)
        fn = layer_fn(lambda z, l, s=spec: encoder_forward(z, l, s, cfg.heads)[0])
        cases.append((f"encoder[{placement}]", fn, [u(3, 5, cfg.dim)] + _layer_inputs(cfg, rng), None))
    literal = ShiftSpec("token", Fraction(1, 4), Fraction(1, 4))
    fn = layer_fn(lambda z, l: encoder_forward(z, l, literal, cfg.heads, normalized_skip=True)[0])
    cases.append(("encoder[normalized_skip]", fn, [u(3, 5, cfg.dim)] + _layer_inputs(cfg, rng), None))
    return cases


def model_case(config: ModelConfig = TINY, seed: int = 0):
    """Loss of the whole model on one clip as a function of every parameter."""
    rng = np.random.default_rng(seed)
    video = rng.uniform(0.0, 1.0, (config.frames, config.height, config.width, 3))
    base = init_params(config, seed)
    names = list(base)
    values = [t.data + rng.normal(0.0, 0.05, t.shape) for t in base.values()]

    def loss(*tensors):
        params = Parameters(zip(names, tensors))
        logits, _ = model_forward(video, params, config)
        return tn.cross_entropy(tn.reshape(logits, (1, config.classes)), [1])

    return loss, values


def run_suite(seed: int = 0, eps: float = 1e-5, include_model: bool = True) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = [
        grad_check(fn, inputs, eps=eps, name=name, seed=seed, wrt=wrt)
        for name, fn, inputs, wrt in _cases(rng)
    ]
    if include_model:
        fn, values = model_case(TINY, seed)
        reports.append(grad_check(fn, values, eps=eps, name="model_end_to_end", seed=seed))
    return reports


def format_reports(reports: list[GradCheckReport]) -> str:
    width = max(len(r.op) for r in reports)
    lines = [f"{'op'.ljust(width)}  max_rel_err  status"]
    for r in reports:
        status = "pass" if r.passed else ("FLAGGED" if r.flagged else "FAIL")
        lines.append(f"{r.op.ljust(width)}  {r.max_rel_error:11.3e}  {status}")
    return "\n".join(lines)
