"""Video transformer with per-frame attention and configurable token shifting.

Shapes carry an optional leading batch axis throughout: a clip is
``[T, H, W, 3]`` and a batch of clips ``[B, T, H, W, 3]``; embeddings are
``[..., T, N+1, D]`` with word 0 holding the class token.

Parameter names follow ``embed.*``, ``enc{l}.{component}``, ``norm.*`` and
``head.*``; these are also the tensor names written to checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .shift import ShiftSpec, apply_shift
from .tensor import Tensor

PRESETS = {
    "Base-16": dict(patch=16, dim=768, depth=12, heads=12),
    "Large-16": dict(patch=16, dim=1024, depth=24, heads=16),
}


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 224
    width: int = 224
    patch: int = 16
    dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    classes: int = 400
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    normalized_skip: bool = False
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("frames", "height", "width", "patch", "dim", "depth", "heads", "mlp_ratio", "classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"frame size {self.height}x{self.width} is not divisible by patch {self.patch}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not isinstance(self.shift, ShiftSpec):
            raise TypeError("shift must be a ShiftSpec")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def with_shift(self, **changes) -> "ModelConfig":
        return replace(self, shift=replace(self.shift, **changes))

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def words(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in checkpoint order."""
    D, H = config.dim, config.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.E": (config.patch_dim, D),
        "embed.pos": (config.words, D),
        "embed.cls": (D,),
    }
    for l in range(config.depth):
        p = f"enc{l}."
        shapes.update({
            p + "ln1.gamma": (D,), p + "ln1.beta": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.gamma": (D,), p + "ln2.beta": (D,),
            p + "ffn.w1": (D, H), p + "ffn.b1": (H,),
            p + "ffn.w2": (H, D), p + "ffn.b2": (D,),
        })
    shapes.update({
        "norm.gamma": (D,), "norm.beta": (D,),
        "head.w": (D, config.classes), "head.b": (config.classes,),
    })
    return shapes


class Parameters(dict):
    """Ordered name -> :class:`Tensor` mapping of learnable weights."""

    def layer(self, l: int) -> dict[str, Tensor]:
        prefix = f"enc{l}."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Parameters":
        return cls((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True)) for k, v in arrays.items())

    def check(self, config: ModelConfig) -> None:
        expected = parameter_shapes(config)
        if list(self) != list(expected):
            missing = sorted(set(expected) - set(self))
            extra = sorted(set(self) - set(expected))
            raise ValueError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if self[name].shape != shape:
                raise ValueError(f"{name}: parameter shape {self[name].shape} != config shape {shape}")


def init_params(config: ModelConfig, seed: int = 0) -> Parameters:
    """Embeddings ~ N(0, 0.02); linear weights Xavier-uniform; biases 0; LN gains 1."""
    rng = np.random.default_rng(seed)
    params = Parameters()
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("embed."):
            value = rng.normal(0.0, 0.02, shape)
        elif leaf == "gamma":
            value = np.ones(shape)
        elif len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


@dataclass
class Activations:
    """Intermediate results retained by :func:`model_forward`."""

    z: list[np.ndarray]
    z_mid: list[np.ndarray]
    attention: list[np.ndarray]
    logits: Tensor
    frame_logits: np.ndarray
    features: np.ndarray
    has_graph: bool = True


def patchify(video: np.ndarray, patch: int) -> np.ndarray:
    """``[..., T, H, W, 3] -> [..., T, N, P*P*3]``, patches in row-major grid order,
    pixels row-major ``(y, x, channel)`` inside each patch."""
    *lead, H, W, C = video.shape
    gh, gw = H // patch, W // patch
    x = video.reshape(*lead, gh, patch, gw, patch, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, patch * patch * C)


def embed_video(video, params: Parameters, config: ModelConfig) -> Tensor:
    """Project patches, prepend the class token to every frame, add spatial positions."""
    v = np.asarray(video.data if isinstance(video, Tensor) else video, dtype=np.float64)
    expected = (config.frames, config.height, config.width, 3)
    if v.shape[-4:] != expected or v.ndim not in (4, 5):
        raise ValueError(f"video shape {v.shape} does not match config {expected} (optionally batched)")
    if not np.isfinite(v).all():
        raise ValueError("video contains non-finite pixels")
    patches = Tensor(patchify(v, config.patch))
    x = tn.matmul(patches, params["embed.E"], tag="embed")
    cls = tn.broadcast_to(params["embed.cls"], x.shape[:-2] + (1, config.dim))
    z = tn.concat([cls, x], axis=-2)
    return tn.add(z, params["embed.pos"])


def _linear(x: Tensor, w: Tensor, b: Tensor, tag: str) -> Tensor:
    return tn.linear(x, w, b, tag=tag)


def msa_frame(z: Tensor, layer: dict[str, Tensor], heads: int, store: list | None = None) -> Tensor:
    """Multi-head self-attention over the words of each frame independently.

    Accepts ``[..., S, D]``; every leading axis (frames, batch) is a separate
    attention problem.  Head-wise attention weights ``[..., M, S, S]`` are
    appended to ``store`` when given.
    """
    *lead, S, D = z.shape
    dh = D // heads

    def split_heads(t: Tensor) -> Tensor:
        return tn.swapaxes(tn.reshape(t, (*lead, S, heads, dh)), -3, -2)

    w = tn.concat([layer["attn.wq"], layer["attn.wk"], layer["attn.wv"]], axis=1)
    b = tn.concat([layer["attn.bq"], layer["attn.bk"], layer["attn.bv"]], axis=0)
    q, k, v = (split_heads(t) for t in tn.split(_linear(z, w, b, "qkv"), -1, [D, D, D]))
    scores = tn.scale(tn.matmul(q, tn.transpose(k), tag="attn"), 1.0 / math.sqrt(dh))
    weights = tn.softmax(scores)
    if store is not None:
        store.append(weights.data)
    ctx = tn.matmul(weights, v, tag="attn")
    merged = tn.reshape(tn.swapaxes(ctx, -3, -2), (*lead, S, D))
    return _linear(merged, layer["attn.wo"], layer["attn.bo"], "proj")


def ffn(z: Tensor, layer: dict[str, Tensor]) -> Tensor:
    """Position-wise ``W2 gelu(W1 z + b1) + b2``."""
    h = tn.gelu(_linear(z, layer["ffn.w1"], layer["ffn.b1"], "ffn"))
    return _linear(h, layer["ffn.w2"], layer["ffn.b2"], "ffn")


def _residual_block(x, norm, branch, spec: ShiftSpec, literal: bool):
    shift = lambda t: apply_shift(t, spec)  # noqa: E731
    site = spec.placement
    if site == "prior_residual":
        x = shift(x)
    h = norm(shift(x) if site == "prior_layernorm" else x)
    out = branch(shift(h) if site == "prior_branch" else h)
    if site == "post_branch":
        out = shift(out)
    skip = h if literal else x
    return tn.add(out, skip)


def encoder_forward(
    z: Tensor,
    layer: dict[str, Tensor],
    spec: ShiftSpec,
    heads: int,
    eps: float = 1e-6,
    normalized_skip: bool = False,
    store: list | None = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """One encoder: attention block then feed-forward block, shift at ``spec.placement``.

    Returns the encoder output, the mid-encoder tensor after the attention
    block, and the attention weights ``[..., T, M, S, S]``.
    """
    if z.ndim < 3:
        raise ValueError(f"encoder expects [..., T, N+1, D], got {z.shape}")
    weights: list = []
    mid = _residual_block(
        z,
        lambda t: tn.layer_norm(t, layer["ln1.gamma"], layer["ln1.beta"], eps),
        lambda t: msa_frame(t, layer, heads, weights),
        spec,
        normalized_skip,
    )
    out = _residual_block(
        mid,
        lambda t: tn.layer_norm(t, layer["ln2.gamma"], layer["ln2.beta"], eps),
        lambda t: ffn(t, layer),
        spec,
        normalized_skip,
    )
    if store is not None:
        store.append(weights[0])
    return out, mid, weights[0]


def model_forward(video, params: Parameters, config: ModelConfig) -> tuple[Tensor, Activations]:
    """Clip(s) to class logits: the frame-level head on the class token, averaged over frames."""
    z = embed_video(video, params, config)
    zs, mids, attn = [z.data], [], []
    for l in range(config.depth):
        z, mid, w = encoder_forward(
            z, params.layer(l), config.shift, config.heads, config.eps, config.normalized_skip
        )
        zs.append(z.data)
        mids.append(mid.data)
        attn.append(w)
    token = tn.take(z, -2, 0)
    token = tn.layer_norm(token, params["norm.gamma"], params["norm.beta"], config.eps)
    frame_logits = _linear(token, params["head.w"], params["head.b"], "head")
    logits = tn.mean(frame_logits, axis=-2) if frame_logits.ndim > 2 else _mean_frames(frame_logits)
    acts = Activations(zs, mids, attn, logits, frame_logits.data, token.data, logits.requires_grad)
    return logits, acts


def _mean_frames(frame_logits: Tensor) -> Tensor:
    # [T, C] -> [C]: mean over frames without collapsing to rank 0
    T, C = frame_logits.shape
    row = tn.mean(tn.reshape(frame_logits, (1, T, C)), axis=1)
    return tn.reshape(row, (C,))


def model_backward(loss_grad, acts: Activations, params: Parameters) -> dict[str, np.ndarray]:
    """Gradients of every parameter given ``dLoss/dlogits``."""
    if acts is None or not acts.has_graph or acts.logits._node is None:
        raise ValueError("forward activations were not retained; run model_forward with trainable parameters")
    params.zero_grad()
    tn.backward(acts.logits, np.asarray(loss_grad, dtype=np.float64).reshape(acts.logits.shape))
    return {k: v.copy() for k, v in params.grads().items()}
