"""Observation encoders, modality fusion and selection emission matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffmath import ShapeError, Tensor, ops
from .nnkit import Dense, MlpParams, mlp_forward

FEATURE_FLOOR = 1e-4
JITTER_SCALE = 1e-4


@dataclass
class ObservationPacket:
    """Encoded features ``a`` (B, m) with diagonal noise ``R`` (B, m).

    ``blocks`` lists the declared width of every modality in order and
    ``mask`` says which of them are present; absent blocks contribute no
    columns to ``features``/``noise``.  In full-matrix mode ``noise`` may be
    (B, m, m).
    """

    features: Tensor | None
    noise: Tensor | None
    mask: tuple[bool, ...] = (True,)
    blocks: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.mask) != len(self.blocks):
            raise ShapeError(f"mask {self.mask} and blocks {self.blocks} differ in length")
        m = sum(b for b, on in zip(self.blocks, self.mask) if on)
        if m == 0:
            if self.features is not None:
                raise ShapeError("packet with no present block must carry no features")
            return
        if self.features is None or self.features.shape[-1] != m:
            raise ShapeError(f"features {None if self.features is None else self.features.shape} do not match {m} present columns")
        if self.noise is None or self.noise.shape[:2] != self.features.shape:
            raise ShapeError(f"noise {None if self.noise is None else self.noise.shape} does not match features {self.features.shape}")

    @property
    def width(self) -> int:
        return sum(b for b, on in zip(self.blocks, self.mask) if on)

    @property
    def any_present(self) -> bool:
        return any(self.mask)

    @classmethod
    def absent(cls, width: int) -> "ObservationPacket":
        return cls(None, None, (False,), (width,))


@dataclass
class EncoderParams:
    """Shared trunk followed by a feature head and a noise head."""

    trunk: MlpParams
    feature_head: Dense
    noise_head: Dense
    jitter: bool = False

    def __post_init__(self):
        for head in (self.feature_head, self.noise_head):
            if head.in_dim != self.trunk.out_dim:
                raise ShapeError(f"head in_dim {head.in_dim} does not match trunk out_dim {self.trunk.out_dim}")
        if self.feature_head.out_dim != self.noise_head.out_dim:
            raise ShapeError("feature and noise heads must have equal width")

    @property
    def in_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def out_dim(self) -> int:
        return self.feature_head.out_dim

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng, hidden: Sequence[int] = (64,), jitter: bool = False) -> "EncoderParams":
        if not hidden:
            raise ValueError("encoder needs at least one hidden layer")
        sizes = [in_dim, *hidden]
        trunk = MlpParams.init(sizes, ["relu"] * (len(sizes) - 1), rng.child(0))
        width = sizes[-1]
        return cls(trunk, Dense.init(width, out_dim, rng.child(1)), Dense.init(width, out_dim, rng.child(2)), jitter)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, hidden: Sequence[int] = (64,)) -> "EncoderParams":
        sizes = [in_dim, *hidden]
        trunk = MlpParams.zeros(sizes, ["relu"] * (len(sizes) - 1))
        return cls(trunk, Dense.zeros(sizes[-1], out_dim), Dense.zeros(sizes[-1], out_dim))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            **self.trunk.parameters(f"{prefix}trunk."),
            **self.feature_head.parameters(f"{prefix}feature."),
            **self.noise_head.parameters(f"{prefix}noise."),
        }


def encode(encoder: EncoderParams, x, rng=None) -> ObservationPacket:
    """a = relu(feature_head(h)) + floor, R = relu(noise_head(h)) + floor.

    With ``encoder.jitter`` and an ``rng`` a |N(0, 1e-4)| term is added to
    both floors.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != encoder.in_dim:
        raise ShapeError(f"encode: input shape {x.shape} does not match in_dim {encoder.in_dim}")
    h = mlp_forward(encoder.trunk, x)
    floor_a: float | np.ndarray = FEATURE_FLOOR
    floor_r: float | np.ndarray = FEATURE_FLOOR
    if encoder.jitter and rng is not None:
        shape = (x.shape[0], encoder.out_dim)
        floor_a = FEATURE_FLOOR + np.abs(JITTER_SCALE * rng.normal(shape))
        floor_r = FEATURE_FLOOR + np.abs(JITTER_SCALE * rng.normal(shape))
    a = ops.relu(encoder.feature_head(h)) + floor_a
    r = ops.relu(encoder.noise_head(h)) + floor_r
    return ObservationPacket(a, r, (True,), (encoder.out_dim,))


def fuse(packets: Sequence[ObservationPacket]) -> ObservationPacket:
    """Concatenate packets in the given order; absent blocks add no columns."""
    if not packets:
        raise ValueError("fuse needs at least one packet")
    if len(packets) == 1:
        return packets[0]
    mask = tuple(m for p in packets for m in p.mask)
    blocks = tuple(b for p in packets for b in p.blocks)
    feats = [p.features for p in packets if p.features is not None]
    noise = [p.noise for p in packets if p.noise is not None]
    if not feats:
        return ObservationPacket(None, None, mask, blocks)
    if len(feats) == 1:
        return ObservationPacket(feats[0], noise[0], mask, blocks)
    return ObservationPacket(ops.concat(feats, axis=-1), ops.concat(noise, axis=-1), mask, blocks)


@dataclass(frozen=True)
class EmissionMatrix:
    """0/1 selection of ``m`` latent coordinates out of ``d``.

    ``rows[i]`` is the latent index read by observed feature ``i``.
    """

    mode: str
    d: int
    rows: tuple[int, ...]
    matrix: np.ndarray = field(repr=False, compare=False)

    @property
    def m(self) -> int:
        return len(self.rows)


def emission_matrix(mode: str, m: int, d: int, layout: Sequence[int] | None = None,
                    present: Sequence[bool] | None = None) -> EmissionMatrix:
    """Build a selection H (m, d).

    ``identity``: m == d.  ``leading``: first m latent coordinates.
    ``block``: ``layout`` partitions d into blocks and ``present`` picks
    which blocks are observed (their widths must total m).
    """
    if m > d:
        raise ShapeError(f"emission: m={m} exceeds latent dim d={d}")
    if mode == "identity":
        if m != d:
            raise ShapeError(f"identity emission requires m == d, got m={m}, d={d}")
        rows = tuple(range(d))
    elif mode == "leading":
        rows = tuple(range(m))
    elif mode == "block":
        if layout is None or present is None or len(layout) != len(present):
            raise ValueError("block emission needs a layout and a matching present mask")
        if sum(layout) != d or min(layout, default=0) < 0:
            raise ShapeError(f"block layout {tuple(layout)} does not partition d={d}")
        starts = np.cumsum([0, *layout[:-1]])
        rows = tuple(int(s) + j for s, w, on in zip(starts, layout, present) if on for j in range(w))
        if len(rows) != m:
            raise ShapeError(f"present blocks select {len(rows)} coordinates, expected m={m}")
    else:
        raise ValueError(f"unknown emission mode {mode!r}")
    H = np.zeros((len(rows), d))
    H[np.arange(len(rows)), list(rows)] = 1.0
    return EmissionMatrix(mode, d, rows, H)


def emission_for_packet(packet: ObservationPacket, d: int) -> EmissionMatrix:
    """Selection H for a fused packet whose declared blocks fill the leading latent coordinates.

    Latent coordinates beyond the declared blocks are never observed.
    """
    total = sum(packet.blocks)
    if total > d:
        raise ShapeError(f"declared blocks {packet.blocks} exceed latent dim {d}")
    if all(packet.mask) and total == d:
        return emission_matrix("identity", d, d)
    layout, present = list(packet.blocks), list(packet.mask)
    if total < d:
        layout.append(d - total)
        present.append(False)
    return emission_matrix("block", packet.width, d, layout, present)
