"""Variable-length CNN genomes and their mapping to networks.

A genome is a header (id, age, learning rate), an ordered list of conv and
pool genes, and the width of the hidden fully connected layer.  Every conv
gene expands to conv -> batchnorm -> ReLU; every network ends with
flatten -> FC(fc_neurons) -> ReLU -> FC(classes) -> softmax, none of which
is encoded in the gene list.

Trained weights travel with the genes (``ConvGene.weights``) and with the
genome (``Genome.tail_weights``), so crossover and mutation move weights
together with the structure they belong to.  :func:`inherit_weights`
reconciles those blobs with the shapes the phenotype needs.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, StructuralError
from .nn import (
    AVERAGE,
    MAX,
    SAME,
    VALID,
    BatchNorm2D,
    Conv2D,
    Dense,
    Flatten,
    Network,
    Pool2D,
    ReLU,
    Softmax,
    conv_output_size,
    glorot_uniform,
)

MAGIC = b"EA4C"
FORMAT_VERSION = 1

CONV_KEYS = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")
TAIL_KEYS = ("fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias")

LR_MIN, LR_MAX = 1e-4, 1.0


@dataclass(frozen=True)
class Bounds:
    """Hyperparameter domain for sampling and repair."""

    kernel_sizes: tuple = (1, 3, 5, 7)
    strides: tuple = (1, 2)
    paddings: tuple = (VALID, SAME)
    max_filters: int = 12
    max_pool: int = 4
    pool_kinds: tuple = (MAX, AVERAGE)
    fc_min: int = 10
    fc_max: int = 512
    max_genes: int = 16
    init_genes: tuple = (1, 8)

    @property
    def max_kernel(self):
        return max(self.kernel_sizes)


@dataclass
class ConvGene:
    kernel_size: int
    filters: int
    stride: int = 1
    padding: str = VALID
    weights: dict | None = field(default=None, compare=False, repr=False)

    kind = "conv"


@dataclass
class PoolGene:
    pool_size: int
    stride: int
    pool_kind: str = MAX

    kind = "pool"
    weights = None


@dataclass
class GenomeHeader:
    id: int
    age: int = 0
    learning_rate: float = 0.1


@dataclass(eq=False)
class Genome:
    header: GenomeHeader
    genes: list = field(default_factory=list)
    fc_neurons: int = 50
    tail_weights: dict | None = field(default=None, repr=False)

    def copy(self) -> "Genome":
        return copy.deepcopy(self)

    @property
    def depth(self) -> int:
        """Layer count as reported in architecture tables: genes plus the two FC layers."""
        return len(self.genes) + 2

    def structure(self):
        return (tuple(self.genes), self.fc_neurons)

    def has_weights(self) -> bool:
        return self.tail_weights is not None or any(g.weights is not None for g in self.genes)

    def __eq__(self, other):
        if not isinstance(other, Genome):
            return NotImplemented
        if self.header != other.header or self.genes != other.genes or self.fc_neurons != other.fc_neurons:
            return False
        pairs = [(a.weights, b.weights) for a, b in zip(self.genes, other.genes)]
        pairs.append((self.tail_weights, other.tail_weights))
        return all(_blobs_equal(a, b) for a, b in pairs)


def _blobs_equal(a, b):
    if a is None or b is None:
        return a is b
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and np.array_equal(a[k], b[k]) for k in a
    )


# --------------------------------------------------------------------------
# Shapes and parameter counting
# --------------------------------------------------------------------------


def gene_output_shape(gene, in_shape):
    c, h, w = in_shape
    if gene.kind == "conv":
        if gene.kernel_size < 1 or gene.stride < 1 or gene.filters < 1:
            raise StructuralError(f"invalid conv gene {gene}")
        ho = conv_output_size(h, gene.kernel_size, gene.stride, gene.padding)
        wo = conv_output_size(w, gene.kernel_size, gene.stride, gene.padding)
        if ho < 1 or wo < 1:
            raise StructuralError(f"{gene} underflows a {h}x{w} feature map")
        return (gene.filters, ho, wo)
    if gene.pool_size < 1 or gene.stride < 1 or gene.pool_size > min(h, w):
        raise StructuralError(f"{gene} does not fit a {h}x{w} feature map")
    return (c, (h - gene.pool_size) // gene.stride + 1, (w - gene.pool_size) // gene.stride + 1)


def trace_shapes(genes, input_shape):
    """Output shape (C, H, W) after each gene; raises StructuralError if any underflows."""
    shapes, shape = [], tuple(input_shape)
    for gene in genes:
        shape = gene_output_shape(gene, shape)
        shapes.append(shape)
    return shapes


def count_params(g: Genome, input_shape, num_classes=10) -> int:
    """Weights, biases and batchnorm affine parameters of the phenotype."""
    total, shape = 0, tuple(input_shape)
    for gene in g.genes:
        out = gene_output_shape(gene, shape)
        if gene.kind == "conv":
            k = gene.kernel_size
            total += k * k * shape[0] * gene.filters + gene.filters + 2 * gene.filters
        shape = out
    flat = int(np.prod(shape))
    total += flat * g.fc_neurons + g.fc_neurons
    total += g.fc_neurons * num_classes + num_classes
    return total


# --------------------------------------------------------------------------
# Sampling and repair
# --------------------------------------------------------------------------


def random_gene(rng, bounds: Bounds = Bounds()):
    if rng.random() < 0.5:
        return ConvGene(
            kernel_size=int(rng.choice(bounds.kernel_sizes)),
            filters=int(rng.integers(1, bounds.max_filters + 1)),
            stride=int(rng.choice(bounds.strides)),
            padding=str(rng.choice(bounds.paddings)),
        )
    return PoolGene(
        pool_size=int(rng.integers(1, bounds.max_pool + 1)),
        stride=int(rng.choice(bounds.strides)),
        pool_kind=str(rng.choice(bounds.pool_kinds)),
    )


def random_genome(rng, bounds: Bounds = Bounds(), input_shape=(1, 28, 28), num_classes=10,
                  genome_id=0, learning_rate=0.1, fc_neurons=50) -> Genome:
    lo, hi = bounds.init_genes
    n = int(rng.integers(lo, hi + 1))
    g = Genome(GenomeHeader(genome_id, 0, learning_rate), [random_gene(rng, bounds) for _ in range(n)], fc_neurons)
    g = repair(g, input_shape, bounds=bounds)
    return inherit_weights(g, input_shape, num_classes, rng)


def _largest_at_most(options, limit):
    fits = [v for v in options if v <= limit]
    return max(fits) if fits else limit


def repair(g: Genome, input_shape, num_classes=10, bounds: Bounds = Bounds(), rng=None) -> Genome:
    """Clamp every gene so the chain stays at least 1x1, front to back.

    Out-of-domain hyperparameters are clamped into their domain; a valid
    genome comes back equal to the input.  When the genome carries
    weights they are resized to the repaired shapes.
    """
    out = g.copy()
    c, h, w = input_shape
    genes = []
    for gene in out.genes[: bounds.max_genes]:
        side = min(h, w)
        if gene.kind == "conv":
            gene.filters = max(1, int(gene.filters))
            gene.stride = max(1, int(gene.stride))
            if gene.padding not in (VALID, SAME):
                gene.padding = VALID
            gene.kernel_size = min(max(1, int(gene.kernel_size)), bounds.max_kernel)
            if gene.padding == VALID and gene.kernel_size > side:
                gene.kernel_size = _largest_at_most(bounds.kernel_sizes, side)
        elif gene.kind == "pool":
            gene.stride = max(1, int(gene.stride))
            if gene.pool_kind not in (MAX, AVERAGE):
                gene.pool_kind = MAX
            gene.pool_size = min(max(1, int(gene.pool_size)), bounds.max_pool, side)
        else:
            continue
        try:
            c, h, w = gene_output_shape(gene, (c, h, w))
        except StructuralError:
            continue
        genes.append(gene)
    out.genes = genes
    out.fc_neurons = int(min(max(out.fc_neurons, bounds.fc_min), bounds.fc_max))
    out.header.age = max(0, int(out.header.age))
    out.header.learning_rate = float(min(max(out.header.learning_rate, LR_MIN), LR_MAX))
    if out.has_weights():
        out = inherit_weights(out, input_shape, num_classes, rng if rng is not None else np.random.default_rng(out.header.id))
    return out


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


def _overlap_copy(dst, src, center_axes=()):
    """Copy the overlapping block of ``src`` into ``dst``.

    Leading indices are aligned on every axis except ``center_axes``,
    where the smaller extent is centered inside the larger one.
    """
    dst_sl, src_sl = [], []
    for ax, (d, s) in enumerate(zip(dst.shape, src.shape)):
        n = min(d, s)
        if ax in center_axes:
            od, os_ = (d - n) // 2, (s - n) // 2
        else:
            od = os_ = 0
        dst_sl.append(slice(od, od + n))
        src_sl.append(slice(os_, os_ + n))
    dst[tuple(dst_sl)] = src[tuple(src_sl)]
    return dst


def _fresh_conv(rng, c_in, gene, dtype=np.float32):
    k, f = gene.kernel_size, gene.filters
    return {
        "weight": glorot_uniform(rng, (f, c_in, k, k), c_in * k * k, f * k * k, dtype),
        "bias": np.zeros(f, dtype),
        "gamma": np.ones(f, dtype),
        "beta": np.zeros(f, dtype),
        "running_mean": np.zeros(f, dtype),
        "running_var": np.ones(f, dtype),
    }


def _fresh_tail(rng, flat, fc, classes, dtype=np.float32):
    return {
        "fc1_weight": glorot_uniform(rng, (fc, flat), flat, fc, dtype),
        "fc1_bias": np.zeros(fc, dtype),
        "fc2_weight": glorot_uniform(rng, (classes, fc), fc, classes, dtype),
        "fc2_bias": np.zeros(classes, dtype),
    }


def _fit_blob(fresh, old, center_axes):
    if old is None:
        return fresh
    if all(k in old and old[k].shape == fresh[k].shape for k in fresh):
        return {k: old[k] for k in fresh}
    for key, dst in fresh.items():
        if key in old:
            _overlap_copy(dst, old[key].astype(dst.dtype), center_axes.get(key, ()))
    return fresh


def inherit_weights(child: Genome, input_shape, num_classes=10, rng=None) -> Genome:
    """Resize the weight blobs carried by ``child`` to its phenotype's shapes.

    Each gene keeps the weights it was copied from (its positional parent
    gene).  Overlapping sub-tensors are kept: filters and input channels
    are cut or extended at the end, and kernels are cut or padded around
    their center.  Entries with no parent counterpart are freshly
    initialized.  Blobs whose shapes already match are kept untouched.
    """
    rng = rng if rng is not None else np.random.default_rng()
    out = child.copy()
    shape = tuple(input_shape)
    for gene in out.genes:
        new_shape = gene_output_shape(gene, shape)
        if gene.kind == "conv":
            fresh = _fresh_conv(rng, shape[0], gene)
            gene.weights = _fit_blob(fresh, gene.weights, {"weight": (2, 3)})
        shape = new_shape
    flat = int(np.prod(shape))
    fresh = _fresh_tail(rng, flat, out.fc_neurons, num_classes)
    out.tail_weights = _fit_blob(fresh, out.tail_weights, {})
    return out


def reset_layer_weights(g: Genome, layer_index: int, input_shape, num_classes=10, rng=None) -> Genome:
    """Re-initialize one weighted layer.

    ``layer_index`` counts weighted layers: conv genes in order, then the
    hidden FC layer, then the output FC layer.
    """
    rng = rng if rng is not None else np.random.default_rng()
    out = inherit_weights(g, input_shape, num_classes, rng)
    convs = [i for i, gene in enumerate(out.genes) if gene.kind == "conv"]
    if layer_index < len(convs):
        gene = out.genes[convs[layer_index]]
        before = trace_shapes(out.genes[: convs[layer_index]], input_shape)
        c_in = before[-1][0] if before else input_shape[0]
        gene.weights = _fresh_conv(rng, c_in, gene)
        return out
    which = layer_index - len(convs)
    w = out.tail_weights
    fc1, fc2 = w["fc1_weight"], w["fc2_weight"]
    if which == 0:
        w["fc1_weight"] = glorot_uniform(rng, fc1.shape, fc1.shape[1], fc1.shape[0])
        w["fc1_bias"] = np.zeros_like(w["fc1_bias"])
    else:
        w["fc2_weight"] = glorot_uniform(rng, fc2.shape, fc2.shape[1], fc2.shape[0])
        w["fc2_bias"] = np.zeros_like(w["fc2_bias"])
    return out


def weighted_layer_count(g: Genome) -> int:
    return sum(1 for gene in g.genes if gene.kind == "conv") + 2


# --------------------------------------------------------------------------
# Phenotype
# --------------------------------------------------------------------------


def build_phenotype(g: Genome, input_shape, num_classes=10, rng=None, numeric_mode=None,
                    dtype=np.float32) -> Network:
    """Instantiate the network; weights are copied so training never touches ``g``."""
    trace_shapes(g.genes, input_shape)
    rng = rng if rng is not None else np.random.default_rng(g.header.id)
    g = inherit_weights(g, input_shape, num_classes, rng)
    layers, gene_layers = [], []
    c = input_shape[0]
    for gene in g.genes:
        if gene.kind == "conv":
            w = {k: np.array(v, dtype=dtype) for k, v in gene.weights.items()}
            block = [
                Conv2D(c, gene.filters, gene.kernel_size, gene.stride, gene.padding, w["weight"], w["bias"]),
                BatchNorm2D(gene.filters, gamma=w["gamma"], beta=w["beta"],
                            running_mean=w["running_mean"], running_var=w["running_var"]),
                ReLU(),
            ]
            c = gene.filters
        else:
            block = [Pool2D(gene.pool_size, gene.stride, gene.pool_kind)]
        gene_layers.append(block)
        layers.extend(block)
    t = {k: np.array(v, dtype=dtype) for k, v in g.tail_weights.items()}
    fc1 = Dense(t["fc1_weight"].shape[1], g.fc_neurons, t["fc1_weight"], t["fc1_bias"])
    fc2 = Dense(g.fc_neurons, num_classes, t["fc2_weight"], t["fc2_bias"])
    layers.extend([Flatten(), fc1, ReLU(), fc2, Softmax()])
    net = Network(layers, input_shape, num_classes, numeric_mode)
    net.gene_layers = gene_layers
    net.tail_layers = (fc1, fc2)
    return net


def absorb_weights(g: Genome, net: Network) -> Genome:
    """Return a copy of ``g`` carrying the (trained) weights of ``net``."""
    out = g.copy()
    if len(net.gene_layers) != len(out.genes):
        raise StructuralError("network does not belong to this genome")
    for gene, block in zip(out.genes, net.gene_layers):
        if gene.kind == "conv":
            conv, bn = block[0], block[1]
            gene.weights = {
                "weight": conv.weight.copy(), "bias": conv.bias.copy(),
                "gamma": bn.gamma.copy(), "beta": bn.beta.copy(),
                "running_mean": bn.running_mean.copy(), "running_var": bn.running_var.copy(),
            }
    fc1, fc2 = net.tail_layers
    out.tail_weights = {
        "fc1_weight": fc1.weight.copy(), "fc1_bias": fc1.bias.copy(),
        "fc2_weight": fc2.weight.copy(), "fc2_bias": fc2.bias.copy(),
    }
    return out


def summary(g: Genome, input_shape, num_classes=10) -> str:
    """One line per phenotype layer with its output shape (H x W x C)."""
    lines = [f"genome {g.header.id}  age={g.header.age}  lr={g.header.learning_rate:g}"]
    lines.append(f"input         {_hwc(input_shape)}")
    shape = tuple(input_shape)
    for gene in g.genes:
        shape = gene_output_shape(gene, shape)
        if gene.kind == "conv":
            desc = f"conv k{gene.kernel_size} f{gene.filters} s{gene.stride} {gene.padding} +bn+relu"
        else:
            desc = f"pool {gene.pool_kind} {gene.pool_size} s{gene.stride}"
        lines.append(f"{desc:<34}-> {_hwc(shape)}")
    flat = int(np.prod(shape))
    lines.append(f"{'flatten':<34}-> {flat}")
    lines.append(f"{'fc ' + str(g.fc_neurons) + ' +relu':<34}-> {g.fc_neurons}")
    lines.append(f"{'fc ' + str(num_classes) + ' +softmax':<34}-> {num_classes}")
    lines.append(f"parameters: {count_params(g, input_shape, num_classes)}")
    return "\n".join(lines)


def _hwc(shape):
    c, h, w = shape
    return f"{h}x{w}x{c}"


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------
#
# All fields little-endian:
#   magic "EA4C" | version u16 | id u64 | age u32 | lr f64 | fc_neurons u32 | n_genes u16
#   per gene:  u8 type (0 conv, 1 pool)
#              conv: kernel u16, filters u16, stride u16, padding u8 (0 valid, 1 same)
#              pool: size u16, stride u16, kind u8 (0 max, 1 average)
#   per gene:  weight block;  then the tail weight block
#   weight block: u8 n_tensors, then per tensor:
#              u8 name_len, name, u8 ndim, u32 dims..., float32 data (row-major)

_PADDINGS = (VALID, SAME)
_POOLS = (MAX, AVERAGE)


def _pack_blob(blob):
    if blob is None:
        return struct.pack("<B", 0)
    parts = [struct.pack("<B", len(blob))]
    for name, arr in blob.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack(f"<B{len(raw)}sB", len(raw), raw, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated genome checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def blob(self):
        (n,) = self.take("<B")
        if n == 0:
            return None
        out = {}
        for _ in range(n):
            (ln,) = self.take("<B")
            (name,) = self.take(f"<{ln}s")
            (ndim,) = self.take("<B")
            dims = self.take(f"<{ndim}I")
            count = int(np.prod(dims)) if dims else 1
            (raw,) = self.take(f"<{4 * count}s")
            out[name.decode()] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        return out


def serialize(g: Genome) -> bytes:
    h = g.header
    parts = [MAGIC, struct.pack("<HQIdIH", FORMAT_VERSION, h.id, h.age, h.learning_rate, g.fc_neurons, len(g.genes))]
    for gene in g.genes:
        if gene.kind == "conv":
            parts.append(struct.pack("<BHHHB", 0, gene.kernel_size, gene.filters, gene.stride,
                                     _PADDINGS.index(gene.padding)))
        else:
            parts.append(struct.pack("<BHHB", 1, gene.pool_size, gene.stride, _POOLS.index(gene.pool_kind)))
    for gene in g.genes:
        parts.append(_pack_blob(gene.weights))
    parts.append(_pack_blob(g.tail_weights))
    return b"".join(parts)


def deserialize(data: bytes) -> Genome:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    version, gid, age, lr, fc, n = r.take("<HQIdIH")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    genes = []
    for _ in range(n):
        (kind,) = r.take("<B")
        if kind == 0:
            k, f, s, p = r.take("<HHHB")
            if p >= len(_PADDINGS):
                raise FormatError(f"bad padding code {p}")
            genes.append(ConvGene(k, f, s, _PADDINGS[p]))
        elif kind == 1:
            size, s, pk = r.take("<HHB")
            if pk >= len(_POOLS):
                raise FormatError(f"bad pool kind code {pk}")
            genes.append(PoolGene(size, s, _POOLS[pk]))
        else:
            raise FormatError(f"unknown gene type {kind}")
    for gene in genes:
        blob = r.blob()
        if gene.kind == "conv":
            gene.weights = blob
        elif blob is not None:
            raise FormatError("pool gene carries weights")
    tail = r.blob()
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes in genome checkpoint")
    return Genome(GenomeHeader(gid, age, lr), genes, fc, tail)


def save_genome(g: Genome, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(g))


def load_genome(path) -> Genome:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
