"""LoRA and rotary-compressed MoRA adapters with per-layer rank vectors.

A LoRA branch adds a trapezoidal low-rank update B @ A next to a frozen weight.
A MoRA branch routes the input through a fixed chunk-and-rotate compressor, a
single trainable square matrix, and a concat-tile decompressor; the whole
branch is equivalent to multiplying by one block-diagonal matrix, and
``materialize_delta_w`` builds that matrix explicitly as an independent oracle
for the chunked forward path.

Both branches initialize to an exact zero contribution (B = 0, M = 0), so a
freshly adapted layer reproduces its frozen weight bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .autodiff import GradTape, Node, Param, ShapeError


class ScheduleError(ValueError):
    """Requested rank schedule cannot be realized."""


@dataclass(frozen=True)
class RankVector:
    """Per-block adapter ranks, monotone non-increasing, every entry >= 1."""

    ranks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if not self.ranks:
            raise ScheduleError("rank vector must be non-empty")
        for r in self.ranks:
            if r < 1:
                raise ScheduleError(f"ranks must be >= 1, got {r}")
        for a, b in zip(self.ranks, self.ranks[1:]):
            if a < b:
                raise ScheduleError(f"ranks must be non-increasing, got {a} before {b}")

    def __len__(self) -> int:
        return len(self.ranks)

    def __getitem__(self, i: int) -> int:
        return self.ranks[i]

    def __iter__(self):
        return iter(self.ranks)


def stepped_schedule(start: int, end: int, step: int, period: int, length: int) -> RankVector:
    """Rank vector that drops by ``step`` every ``period`` blocks, from start to end.

    ranks[i] = max(end, start - step * (i // period)); the first entry must be
    ``start`` and the last must land exactly on ``end``.
    """
    if not (start >= end >= 1):
        raise ScheduleError(f"need start >= end >= 1, got start={start} end={end}")
    if step < 0 or period < 1 or length < 1:
        raise ScheduleError(f"need step >= 0, period >= 1, length >= 1, got {step}, {period}, {length}")
    if step == 0 and start != end:
        raise ScheduleError(f"step 0 cannot descend from {start} to {end}")
    if step > 0 and (start - end) % step != 0:
        raise ScheduleError(f"step {step} does not divide the drop {start - end}")
    ranks = [max(end, start - step * (i // period)) for i in range(length)]
    if ranks[-1] != end:
        raise ScheduleError(
            f"schedule reaches {ranks[-1]} at block {length - 1}, not the requested end {end}"
        )
    return RankVector(tuple(ranks))


# ---- LoRA --------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank pair: B (d x r, zero-init) and A (r x k, Gaussian-init)."""

    B: Param
    A: Param
    r: int
    scale: float = 1.0

    @classmethod
    def create(cls, d: int, k: int, r: int, rng: np.random.Generator,
               scale: float = 1.0, name: str = "lora") -> "LoraAdapter":
        if not 1 <= r < min(d, k):
            raise ValueError(f"lora rank must satisfy 1 <= r < min(d, k) = {min(d, k)}, got {r}")
        b = Param(f"{name}.B", np.zeros((d, r)), adapter=True)
        a = Param(f"{name}.A", rng.normal(0.0, 0.02, size=(r, k)), adapter=True)
        return cls(B=b, A=a, r=r, scale=float(scale))

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    def apply(self, tape: GradTape, x: Node, trainable: bool = True) -> Node:
        """Contribution scale * (x A^T) B^T for row-activation x of shape (T, k)."""
        if x.shape[1] != self.k:
            raise ShapeError(f"lora: input has {x.shape[1]} columns, expected {self.k}")
        a = tape.parameter(self.A, trainable=trainable)
        b = tape.parameter(self.B, trainable=trainable)
        low = tape.matmul(x, tape.transpose(a))
        out = tape.matmul(low, tape.transpose(b))
        if self.scale != 1.0:
            out = tape.scale(out, self.scale)
        return out


# ---- rotary codec ---------------------------------------------------------------


def rope_angles(r_hat: int) -> np.ndarray:
    """Base angles 10000^(-2(t-1)/r_hat) for t = 1 .. r_hat/2; r_hat must be even."""
    if r_hat < 2 or r_hat % 2 != 0:
        raise ValueError(f"rotary rank must be even and >= 2, got {r_hat}")
    t = np.arange(1, r_hat // 2 + 1, dtype=np.float64)
    return 10000.0 ** (-2.0 * (t - 1.0) / r_hat)


@dataclass(frozen=True)
class RotaryCodec:
    """Fixed chunk-and-rotate compressor for a k -> d update of internal rank r_hat.

    The input splits into n_in = ceil(k / r_hat) contiguous chunks (the last
    zero-padded); chunk j is rotated by a block-diagonal matrix of 2x2 rotations
    with angles j * theta_t. Decompression concatenates the per-chunk outputs,
    repeats the concatenation ``tile`` times and truncates to d.
    """

    r_hat: int
    k: int
    d: int

    def __post_init__(self):
        if self.r_hat < 2 or self.r_hat % 2 != 0:
            raise ValueError(f"rotary rank must be even and >= 2, got {self.r_hat}")
        if self.k < 1 or self.d < 1:
            raise ValueError(f"need positive dims, got k={self.k} d={self.d}")

    @property
    def n_in(self) -> int:
        return -(-self.k // self.r_hat)

    @property
    def padded_k(self) -> int:
        return self.n_in * self.r_hat

    @property
    def tile(self) -> int:
        return -(-self.d // self.padded_k)

    @cached_property
    def angles(self) -> np.ndarray:
        return rope_angles(self.r_hat)

    def rotation(self, j: int) -> np.ndarray:
        """Block-diagonal rotation for chunk index j (identity at j = 0)."""
        if j < 0:
            raise ValueError(f"chunk index must be >= 0, got {j}")
        r = np.zeros((self.r_hat, self.r_hat))
        c = np.cos(j * self.angles)
        s = np.sin(j * self.angles)
        for t in range(self.r_hat // 2):
            r[2 * t, 2 * t] = c[t]
            r[2 * t, 2 * t + 1] = -s[t]
            r[2 * t + 1, 2 * t] = s[t]
            r[2 * t + 1, 2 * t + 1] = c[t]
        return r

    @cached_property
    def compressor(self) -> np.ndarray:
        """All chunk rotations as one (padded_k, padded_k) block-diagonal matrix."""
        g = np.zeros((self.padded_k, self.padded_k))
        for j in range(self.n_in):
            lo = j * self.r_hat
            g[lo:lo + self.r_hat, lo:lo + self.r_hat] = self.rotation(j)
        return g


def rotate_chunk(chunk: np.ndarray, j: int, codec: RotaryCodec) -> np.ndarray:
    """Rotate one length-r_hat chunk by the codec's chunk-j rotation."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape != (codec.r_hat,):
        raise ShapeError(f"rotate_chunk: chunk shape {chunk.shape}, expected ({codec.r_hat},)")
    return codec.rotation(j) @ chunk


def mora_compress(x: np.ndarray, codec: RotaryCodec) -> list[np.ndarray]:
    """Split x into n_in rotated chunks (final chunk zero-padded to r_hat)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (codec.k,):
        raise ShapeError(f"mora_compress: input shape {x.shape}, expected ({codec.k},)")
    padded = np.zeros(codec.padded_k)
    padded[:codec.k] = x
    return [
        rotate_chunk(padded[j * codec.r_hat:(j + 1) * codec.r_hat], j, codec)
        for j in range(codec.n_in)
    ]


# ---- MoRA ----------------------------------------------------------------------


@dataclass
class MoraAdapter:
    """Square trainable matrix M (r_hat x r_hat, zero-init) behind a RotaryCodec."""

    M: Param
    codec: RotaryCodec

    @classmethod
    def create(cls, d: int, k: int, r_hat: int, name: str = "mora") -> "MoraAdapter":
        codec = RotaryCodec(r_hat=r_hat, k=k, d=d)
        m = Param(f"{name}.M", np.zeros((r_hat, r_hat)), adapter=True)
        return cls(M=m, codec=codec)

    def apply(self, tape: GradTape, x: Node, trainable: bool = True) -> Node:
        """Adapter contribution for row-activations x of shape (T, k).

        Rotate all chunks at once with the constant block-diagonal compressor,
        apply M to every chunk via a rows-as-chunks reshape, reassemble, then
        tile-and-truncate the columns out to width d.
        """
        codec = self.codec
        if x.shape[1] != codec.k:
            raise ShapeError(f"mora: input has {x.shape[1]} columns, expected {codec.k}")
        t = x.shape[0]
        m = tape.parameter(self.M, trainable=trainable)
        padded = tape.pad_cols(x, codec.padded_k)
        rotated = tape.matmul_const(padded, codec.compressor.T)
        chunks = tape.reshape(rotated, t * codec.n_in, codec.r_hat)
        mixed = tape.matmul(chunks, tape.transpose(m))
        joined = tape.reshape(mixed, t, codec.padded_k)
        return tape.tile_cols(joined, codec.tile, codec.d)


def mora_forward(adapter: MoraAdapter, x: np.ndarray) -> np.ndarray:
    """Adapter contribution (length d) for a single length-k input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (adapter.codec.k,):
        raise ShapeError(f"mora_forward: input shape {x.shape}, expected ({adapter.codec.k},)")
    tape = GradTape()
    out = adapter.apply(tape, tape.constant(x))
    return out.value[0].copy()


def materialize_delta_w(adapter: MoraAdapter) -> np.ndarray:
    """Explicit (d, k) update matrix equal to the chunked forward path.

    Builds blockdiag(M R_0, ..., M R_{n_in-1}), drops the zero-pad columns,
    then vertically tiles and truncates the rows to d. Kept deliberately
    independent of ``MoraAdapter.apply`` so the two can cross-check each other.
    """
    codec = adapter.codec
    m = adapter.M.value
    full = np.zeros((codec.padded_k, codec.padded_k))
    for j in range(codec.n_in):
        lo = j * codec.r_hat
        full[lo:lo + codec.r_hat, lo:lo + codec.r_hat] = m @ codec.rotation(j)
    trimmed = full[:, :codec.k]
    tiled = np.tile(trimmed, (codec.tile, 1))
    return tiled[:codec.d].copy()


# ---- combined layer -----------------------------------------------------------


@dataclass
class MoLoraLayer:
    """Frozen weight plus parallel LoRA and MoRA branches on one projection."""

    frozen: Param
    lora: LoraAdapter
    mora: MoraAdapter
    layer_index: int = 0

    @classmethod
    def create(cls, d: int, k: int, r_l: int, r_m: int, rng: np.random.Generator,
               layer_index: int = 0, scale: float = 1.0, name: str = "molora",
               adapter_rng: np.random.Generator | None = None) -> "MoLoraLayer":
        """``adapter_rng`` (default: ``rng``) seeds the LoRA A matrix; passing a
        separate stream keeps the frozen weight independent of the rank choice."""
        frozen = Param(f"{name}.W", rng.normal(0.0, 0.02, size=(d, k)))
        lora = LoraAdapter.create(d, k, r_l, adapter_rng if adapter_rng is not None else rng,
                                  scale=scale, name=f"{name}.lora")
        mora = MoraAdapter.create(d, k, r_m, name=f"{name}.mora")
        return cls(frozen=frozen, lora=lora, mora=mora, layer_index=layer_index)

    @property
    def d(self) -> int:
        return self.frozen.shape[0]

    @property
    def k(self) -> int:
        return self.frozen.shape[1]

    def apply(self, tape: GradTape, x: Node, adapters_trainable: bool = True,
              backbone_trainable: bool = False, use_adapters: bool = True) -> Node:
        """x W^T plus both adapter contributions, for x of shape (T, k)."""
        if x.shape[1] != self.k:
            raise ShapeError(f"molora: input has {x.shape[1]} columns, expected {self.k}")
        w = tape.parameter(self.frozen, trainable=backbone_trainable)
        out = tape.matmul(x, tape.transpose(w))
        if use_adapters:
            out = tape.add(out, self.lora.apply(tape, x, trainable=adapters_trainable))
            out = tape.add(out, self.mora.apply(tape, x, trainable=adapters_trainable))
        return out

    def params(self) -> list[Param]:
        return [self.frozen, self.lora.B, self.lora.A, self.mora.M]


def lora_forward(layer: MoLoraLayer, x: np.ndarray) -> np.ndarray:
    """W x + scale * B (A x) for a single length-k vector (MoRA branch off)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.k,):
        raise ShapeError(f"lora_forward: input shape {x.shape}, expected ({layer.k},)")
    tape = GradTape()
    xn = tape.constant(x)
    w = tape.parameter(layer.frozen, trainable=False)
    out = tape.add(tape.matmul(xn, tape.transpose(w)), layer.lora.apply(tape, xn))
    return out.value[0].copy()


def molora_forward(layer: MoLoraLayer, x: np.ndarray) -> np.ndarray:
    """Full layer output W x + lora + mora for a single length-k vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.k,):
        raise ShapeError(f"molora_forward: input shape {x.shape}, expected ({layer.k},)")
    tape = GradTape()
    out = layer.apply(tape, tape.constant(x))
    return out.value[0].copy()


# ---- parameter accounting -------------------------------------------------------


@dataclass(frozen=True)
class ParamBudget:
    """Trainable-entry counts per block: r_l * (d + k) for LoRA, r_m^2 for MoRA."""

    lora: tuple[int, ...]
    mora: tuple[int, ...]

    @property
    def layer_totals(self) -> tuple[int, ...]:
        return tuple(a + b for a, b in zip(self.lora, self.mora))

    @property
    def total(self) -> int:
        return sum(self.layer_totals)


def param_count(d: int, k: int, r_l: RankVector, r_m: RankVector) -> ParamBudget:
    if len(r_l) != len(r_m):
        raise ValueError(f"rank vectors differ in length: {len(r_l)} vs {len(r_m)}")
    return ParamBudget(
        lora=tuple(r * (d + k) for r in r_l),
        mora=tuple(r * r for r in r_m),
    )
