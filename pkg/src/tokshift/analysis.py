"""Closed-form cost model, attention-map export and the temporal cosine probe.

Headline FLOPs follow the convention that reproduces the published tables:
one FLOP per multiply-accumulate of the linear layers (patch projection,
QKV, attention output projection, FFN), per frame, times the frame count.
Attention score/value products and the classification head are reported as
separate informational entries and are excluded from the headline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .model import Activations, ModelConfig


@dataclass(frozen=True)
class CostEntry:
    name: str
    params: int
    macs: int
    headline: bool = True


@dataclass
class CostReport:
    entries: list[CostEntry] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def headline_macs(self) -> int:
        return sum(e.macs for e in self.entries if e.headline)

    @property
    def full_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def gflops_per_view(self) -> float:
        return self.headline_macs / 1e9

    @property
    def full_gflops_per_view(self) -> float:
        return self.full_macs / 1e9

    def entry(self, name: str) -> CostEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def tsv_lines(self) -> list[str]:
        return [f"{e.name}\t{e.params}\t{e.macs}" for e in self.entries]

    def table(self) -> str:
        rows = [("component", "params", "MACs", "headline")]
        rows += [(e.name, f"{e.params:,}", f"{e.macs:,}", "yes" if e.headline else "no") for e in self.entries]
        rows.append(("total", f"{self.total_params:,}", f"{self.full_macs:,}", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = []
        for j, row in enumerate(rows):
            lines.append("  ".join(
                cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))
            ).rstrip())
            if j == 0 or j == len(rows) - 2:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _layer_entries(config: ModelConfig) -> dict[str, tuple[int, int]]:
    # (params, MACs per frame) for one encoder
    D, H, S = config.dim, config.hidden, config.words
    return {
        "qkv": (3 * (D * D + D), 3 * S * D * D),
        "attn_proj": (D * D + D, S * D * D),
        "ffn": (D * H + H + H * D + D, 2 * S * D * H),
        "layer_norm": (4 * D, 0),
    }


def cost_report(config: ModelConfig) -> CostReport:
    """Parameters and MACs per component for one view of ``config``."""
    T, D, L, S, N = config.frames, config.dim, config.depth, config.words, config.num_patches
    per_layer = _layer_entries(config)
    entries = [
        CostEntry("patch_embed", config.patch_dim * D, T * N * config.patch_dim * D),
        CostEntry("pos_embed", S * D, 0),
        CostEntry("class_token", D, 0),
    ]
    for name, (p, m) in per_layer.items():
        entries.append(CostEntry(f"encoder.{name}", L * p, L * T * m))
    entries.append(CostEntry("encoder.shift", 0, 0))
    entries.append(CostEntry("final_norm", 2 * D, 0))
    entries.append(CostEntry("attention_matmuls", 0, L * T * 2 * S * S * D, headline=False))
    entries.append(CostEntry("head", D * config.classes + config.classes, T * D * config.classes, headline=False))
    return CostReport(entries)


def count_params(config: ModelConfig) -> CostReport:
    """Closed-form parameter counts (read ``total_params``)."""
    return cost_report(config)


def count_flops(config: ModelConfig) -> CostReport:
    """Closed-form MAC counts (read ``gflops_per_view``)."""
    return cost_report(config)


def word_count(config: ModelConfig) -> int:
    return config.frames * config.words


# ---------------------------------------------------------------------------
# attention export


@dataclass
class AttentionDump:
    layer: int
    maps: np.ndarray  # [T, N+1, N+1], head-averaged
    grid: np.ndarray  # [T, H/P, W/P], class-token attention over patches

    def tsv_lines(self) -> list[str]:
        T, S, _ = self.maps.shape
        lines = []
        for t in range(T):
            for i in range(S):
                lines.append(f"{t}\t{i}\t" + "\t".join(f"{w:.17g}" for w in self.maps[t, i]))
        return lines


def attention_map(acts: Activations, layer: int, config: ModelConfig) -> AttentionDump:
    """Head-averaged attention of one encoder for a single (unbatched) clip."""
    depth = len(acts.attention)
    if not -depth <= layer < depth:
        raise IndexError(f"layer {layer} out of range for a {depth}-layer model")
    layer = layer % depth
    weights = acts.attention[layer]
    if weights.ndim != 4:
        raise ValueError(f"expected unbatched [T, M, S, S] attention, got {weights.shape}")
    maps = weights.mean(axis=1)
    row = maps[:, 0, 1:]
    row = row / row.sum(axis=-1, keepdims=True)
    gh, gw = config.grid
    return AttentionDump(layer, maps, row.reshape(-1, gh, gw))


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 image from ``[h, w]`` values in [0, 1] (grey) or ``[h, w, 3]``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3)
    return pixels.reshape(h, w, 3).astype(np.float64) / maxval


def heatmaps(dump: AttentionDump) -> np.ndarray:
    """Min-max normalize the grids over the whole clip; a flat clip maps to zeros."""
    lo, hi = dump.grid.min(), dump.grid.max()
    if hi - lo <= 0:
        return np.zeros_like(dump.grid)
    return (dump.grid - lo) / (hi - lo)


def write_heatmaps(dump: AttentionDump, out_dir, prefix: str = "attn") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, img in enumerate(heatmaps(dump)):
        path = out_dir / f"{prefix}_l{dump.layer}_t{t}.ppm"
        write_ppm(path, img)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# temporal similarity probe


class CosineProbe(NamedTuple):
    token: float | None
    patch: float | None
    skipped: int


def _pair_cosines(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    cos = (a * b).sum(axis=-1)[ok] / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), int((~ok).sum())


def temporal_cosine(features) -> CosineProbe:
    """Mean cosine similarity between each word and itself in the next frame.

    ``features`` is ``[T, S, D]`` with the class token at word 0 (``[T, D]`` is
    read as token-only).  Pairs with a zero vector are skipped and counted.
    """
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if f.ndim == 2:
        f = f[:, None, :]
    if f.ndim != 3 or f.shape[0] < 2:
        raise ValueError(f"need [T>=2, S, D] features, got {f.shape}")
    tok, skipped_tok = _pair_cosines(f[:-1, 0], f[1:, 0])
    pat, skipped_pat = _pair_cosines(f[:-1, 1:], f[1:, 1:])
    if tok.size == 0 and pat.size == 0:
        raise ValueError("every frame pair contains a zero vector")
    return CosineProbe(
        float(tok.mean()) if tok.size else None,
        float(pat.mean()) if pat.size else None,
        skipped_tok + skipped_pat,
    )
