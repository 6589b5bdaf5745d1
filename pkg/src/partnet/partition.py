"""Parameter partitioning: assignments, subnetwork views, checkpoints.

A network's trainable arrays are split into C ordered partitions.  The
level-k subnetwork keeps partitions 1..k at their trained values and holds
the rest at fixed default values, so a forward pass through level k only
"sees" what partitions 1..k have learned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff

CHECKPOINT_MAGIC = b"PNET"
CHECKPOINT_VERSION = 1


class PartitionError(ValueError):
    pass


def _validate_ratios(ratios, what: str):
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise PartitionError(f"{what} must be a non-empty 1-D sequence")
    if np.any(r < 0):
        raise PartitionError(f"{what} must be non-negative, got {ratios}")
    if abs(r.sum() - 1.0) > 1e-9:
        raise PartitionError(f"{what} must sum to 1 within 1e-9, got sum {r.sum()!r}")
    return r


@dataclass(frozen=True)
class PartitionSpec:
    """C partitions/chunks with parameter and data mass per partition."""

    n_partitions: int
    param_ratios: tuple
    chunk_ratios: tuple

    def __post_init__(self):
        if self.n_partitions < 1:
            raise PartitionError(f"need at least 1 partition, got {self.n_partitions}")
        p = _validate_ratios(self.param_ratios, "param_ratios")
        u = _validate_ratios(self.chunk_ratios, "chunk_ratios")
        if p.size != self.n_partitions or u.size != self.n_partitions:
            raise PartitionError(
                f"ratio lengths ({p.size}, {u.size}) must equal n_partitions "
                f"({self.n_partitions})")
        object.__setattr__(self, "param_ratios", tuple(float(x) for x in p))
        object.__setattr__(self, "chunk_ratios", tuple(float(x) for x in u))

    @classmethod
    def uniform(cls, c: int) -> "PartitionSpec":
        r = tuple(1.0 / c for _ in range(c))
        return cls(c, r, r)

    @classmethod
    def from_ratios(cls, param_ratios, chunk_ratios=None) -> "PartitionSpec":
        if chunk_ratios is None:
            chunk_ratios = param_ratios
        return cls(len(param_ratios), tuple(param_ratios), tuple(chunk_ratios))


def largest_remainder(total: int, ratios) -> np.ndarray:
    """Integer allocation of `total` by `ratios`: floors, then largest remainders.

    Deterministic; ties go to the lower index.  Sums exactly to `total` and
    differs from total*ratio by less than 1 in every cell.
    """
    r = np.asarray(ratios, dtype=np.float64)
    exact = total * r
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        remainders = exact - counts
        # stable sort descending by remainder, index breaks ties
        order = np.lexsort((np.arange(r.size), -remainders))
        counts[order[:short]] += 1
    return counts


@dataclass
class PartitionAssignment:
    """Per-layer arrays of partition indices in [1, C], one byte per element."""

    layers: list  # list of uint8 ndarrays, one per parameter array
    n_partitions: int

    def __post_init__(self):
        for arr in self.layers:
            if arr.dtype != np.uint8:
                raise PartitionError("assignment arrays must be uint8")
            if arr.size and (arr.min() < 1 or arr.max() > self.n_partitions):
                raise PartitionError(
                    f"assignment indices must lie in [1, {self.n_partitions}]")

    def counts(self) -> np.ndarray:
        """Global element count per partition (index j stored at [j-1])."""
        out = np.zeros(self.n_partitions, dtype=np.int64)
        for arr in self.layers:
            out += np.bincount(arr.ravel(), minlength=self.n_partitions + 1)[1:]
        return out


def assign_random_weights(layer_shapes, param_ratios, rng) -> PartitionAssignment:
    """Random weight partitioning: per layer, a largest-remainder share of
    elements carries each index, at uniformly random positions."""
    ratios = _validate_ratios(param_ratios, "param_ratios")
    shapes = list(layer_shapes)
    if not shapes:
        raise PartitionError("empty layer list")
    layers = []
    for shape in shapes:
        count = int(np.prod(shape)) if len(shape) else 1
        per = largest_remainder(count, ratios)
        flat = np.repeat(np.arange(1, ratios.size + 1, dtype=np.uint8), per)
        rng.shuffle(flat)
        layers.append(flat.reshape(shape))
    return PartitionAssignment(layers, ratios.size)


def assign_nodes(layer_shapes, out_axes, param_ratios) -> PartitionAssignment:
    """Node partitioning: contiguous blocks of output units get each index and
    every weight feeding a unit inherits that unit's index.

    `out_axes[i]` names the axis of layer i that indexes output units; a bias
    vector uses axis 0.
    """
    ratios = _validate_ratios(param_ratios, "param_ratios")
    shapes = list(layer_shapes)
    if not shapes:
        raise PartitionError("empty layer list")
    if len(out_axes) != len(shapes):
        raise PartitionError("out_axes must match layer_shapes")
    layers = []
    for shape, axis in zip(shapes, out_axes):
        n_out = shape[axis]
        per = largest_remainder(n_out, ratios)
        units = np.repeat(np.arange(1, ratios.size + 1, dtype=np.uint8), per)
        expand = [None] * len(shape)
        expand[axis] = slice(None)
        layers.append(np.broadcast_to(units[tuple(expand)], shape).copy())
    return PartitionAssignment(layers, ratios.size)


@dataclass
class PartitionedParams:
    """Trainable values, frozen defaults, and the partition assignment."""

    values: list  # float ndarrays
    defaults: list  # same shapes; never modified by training
    assignment: PartitionAssignment
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.values) == len(self.defaults) == len(self.assignment.layers)):
            raise PartitionError("values/defaults/assignment layer counts differ")
        for v, d, a in zip(self.values, self.defaults, self.assignment.layers):
            if not (v.shape == d.shape == a.shape):
                raise PartitionError(
                    f"shape mismatch: values {v.shape}, defaults {d.shape}, "
                    f"assignment {a.shape}")
        if not self.names:
            self.names = [f"layer{i}" for i in range(len(self.values))]

    @property
    def n_partitions(self) -> int:
        return self.assignment.n_partitions

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values))

    def copy(self) -> "PartitionedParams":
        return PartitionedParams(
            [v.copy() for v in self.values],
            [d.copy() for d in self.defaults],
            PartitionAssignment([a.copy() for a in self.assignment.layers],
                                self.n_partitions),
            list(self.names))


def materialize(params: PartitionedParams, k: int) -> list:
    """Effective arrays of the level-k subnetwork: value where the element's
    partition index <= k, default otherwise.  Pure and idempotent."""
    if not 1 <= k <= params.n_partitions:
        raise PartitionError(f"subnetwork level {k} outside [1, {params.n_partitions}]")
    return [np.where(a <= k, v, d)
            for v, d, a in zip(params.values, params.defaults, params.assignment.layers)]


def materialize_on_tape(tape, params: PartitionedParams, k: int, trainable: bool = True):
    """Tape version of :func:`materialize`.

    Returns (effective nodes, value leaf nodes).  Gradients through the
    effective tensors flow only into elements with assignment <= k; with
    trainable=False the values enter as constants.
    """
    if not 1 <= k <= params.n_partitions:
        raise PartitionError(f"subnetwork level {k} outside [1, {params.n_partitions}]")
    leaves = []
    effective = []
    for v, d, a in zip(params.values, params.defaults, params.assignment.layers):
        node = tape.leaf(v) if trainable else tape.constant(v)
        leaves.append(node)
        effective.append(autodiff.select(node, a <= k, d))
    return effective, leaves


def restrict_gradient(grads, assignment: PartitionAssignment, j: int):
    """Zero gradient entries outside partition j (exactly 0.0 elsewhere)."""
    return [np.where(a == j, g, 0.0) for g, a in zip(grads, assignment.layers)]


def partitioned_affine_compose(scales, biases, k: int):
    """Effective (scale, bias) of a partition-indexed elementwise affine:
    the product of the first k scale vectors and the sum of the first k biases."""
    scales = [np.asarray(s, dtype=np.float64) for s in scales]
    biases = [np.asarray(b, dtype=np.float64) for b in biases]
    if len(scales) != len(biases):
        raise PartitionError(f"{len(scales)} scale vectors vs {len(biases)} biases")
    if not 1 <= k <= len(scales):
        raise PartitionError(f"k={k} outside [1, {len(scales)}]")
    base = scales[0].shape
    for arr in scales + biases:
        if arr.shape != base:
            raise PartitionError(f"length mismatch: {arr.shape} vs {base}")
    scale = scales[0].copy()
    bias = biases[0].copy()
    for i in range(1, k):
        scale *= scales[i]
        bias += biases[i]
    return scale, bias


# ---------------------------------------------------------------------------
# flat binary checkpoint

def save_checkpoint(path, params: PartitionedParams) -> None:
    """Header {magic "PNET", version u32, layer count}; per layer {ndim u32,
    extents u32, values f64 LE, defaults f64 LE, assignment u8}."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.values)))
        for v, d, a in zip(params.values, params.defaults, params.assignment.layers):
            fh.write(struct.pack("<I", v.ndim))
            fh.write(struct.pack(f"<{v.ndim}I", *v.shape))
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(d, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(a, dtype=np.uint8).tobytes())


def load_checkpoint(path) -> PartitionedParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise PartitionError(f"bad checkpoint magic {blob[:4]!r}")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise PartitionError(f"unsupported checkpoint version {version}")
    off = 12
    values, defaults, assigns = [], [], []
    for _ in range(n_layers):
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        v = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        d = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        a = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off).reshape(shape)
        off += count
        values.append(v.astype(np.float64))
        defaults.append(d.astype(np.float64))
        assigns.append(a.copy())
    if off != len(blob):
        raise PartitionError(f"trailing bytes in checkpoint ({len(blob) - off})")
    c = max((int(a.max()) for a in assigns if a.size), default=1)
    return PartitionedParams(values, defaults, PartitionAssignment(assigns, c))
