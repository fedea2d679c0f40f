"""Freeze a policy checkpoint into a constant graph, optimize it, emit C.

The emitted artifact is a single C99 translation unit with static weight
tables and one exported function ``void name(const float in[N], float out[M])``.
It includes nothing but ``<math.h>`` and never allocates.
"""

from __future__ import annotations

import ctypes
import hashlib
import json
import os
import re
import shutil
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .policy import CheckpointError, forward_mean, params_from_checkpoint

MAGIC = b"RLW1"
VERSION = 1
HEADER = struct.Struct("<4sIII")
_ACT_CODE = {"linear": 0, "tanh": 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


@dataclass(frozen=True)
class Node:
    """One graph op. ``op`` is mul, matmul, bias_add, affine or tanh."""

    op: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def apply(self, x):
        if self.op == "mul":
            return x * self.weight
        if self.op == "matmul":
            return x @ self.weight.T
        if self.op == "bias_add":
            return x + self.bias
        if self.op == "affine":
            return x @ self.weight.T + self.bias
        if self.op == "tanh":
            return np.tanh(x)
        raise ValueError(f"unknown op {self.op!r}")


@dataclass(frozen=True)
class FrozenGraph:
    nodes: tuple[Node, ...]
    input_dim: int
    output_dim: int
    # output k reads row out_index[k] of the last layer, or out_const[k] when -1
    out_index: tuple[int, ...] = ()
    out_const: tuple[float, ...] = ()
    source_hash: str = ""

    def __post_init__(self):
        if not self.out_index:
            object.__setattr__(self, "out_index", tuple(range(self.output_dim)))
            object.__setattr__(self, "out_const", (0.0,) * self.output_dim)

    def count(self, op: str) -> int:
        return sum(n.op == op for n in self.nodes)

    @property
    def n_affine(self) -> int:
        return self.count("matmul") + self.count("affine")

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        for node in self.nodes:
            x = node.apply(x)
        return self._map_outputs(x)

    def _map_outputs(self, x):
        idx = np.asarray(self.out_index)
        if np.all(idx == np.arange(self.output_dim)) and x.shape[-1] == self.output_dim:
            return x
        out = np.broadcast_to(np.asarray(self.out_const, dtype=float),
                              x.shape[:-1] + (self.output_dim,)).copy()
        live = idx >= 0
        out[..., live] = x[..., idx[live]]
        return out

    def to_bytes(self) -> bytes:
        """Canonical float64 serialization; also the basis of :attr:`hash`."""
        parts = [struct.pack("<III", self.input_dim, self.output_dim, len(self.nodes))]
        for n in self.nodes:
            name = n.op.encode()
            parts.append(struct.pack("<B", len(name)) + name)
            for arr in (n.weight, n.bias):
                if arr is None:
                    parts.append(struct.pack("<B", 0))
                else:
                    a = np.ascontiguousarray(arr, dtype="<f8")
                    parts.append(struct.pack("<BII", a.ndim, *(a.shape + (1,) * (2 - a.ndim))))
                    parts.append(a.tobytes())
        parts.append(np.asarray(self.out_index, dtype="<i4").tobytes())
        parts.append(np.asarray(self.out_const, dtype="<f8").tobytes())
        return b"".join(parts)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())


def load_checkpoint(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        return path_or_dict
    with open(path_or_dict) as fh:
        return json.load(fh)


def freeze(checkpoint) -> FrozenGraph:
    """Inference-only graph of the policy mean: value head and log_std dropped."""
    ckpt = load_checkpoint(checkpoint)
    try:
        params, _ = params_from_checkpoint(ckpt)
    except CheckpointError:
        raise
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    nodes = []
    if not np.all(params.obs_scale == 1.0):
        nodes.append(Node("mul", weight=params.obs_scale.copy()))
    for layer in params.layers:
        nodes.append(Node("matmul", weight=layer.weight.copy()))
        nodes.append(Node("bias_add", bias=layer.bias.copy()))
        if layer.activation == "tanh":
            nodes.append(Node("tanh"))
    blob = json.dumps({k: ckpt[k] for k in ("obs_scale", "layers") if k in ckpt},
                      sort_keys=True).encode()
    return FrozenGraph(tuple(nodes), params.obs_dim, params.act_dim,
                       source_hash=hashlib.sha256(blob).hexdigest())


# ----------------------------------------------------------------- passes


def _fold_input_scale(nodes):
    out, changed = [], False
    i = 0
    while i < len(nodes):
        n = nodes[i]
        if n.op == "mul" and i + 1 < len(nodes) and nodes[i + 1].op in ("matmul", "affine"):
            nxt = nodes[i + 1]
            out.append(Node(nxt.op, weight=nxt.weight * n.weight[None, :], bias=nxt.bias))
            i += 2
            changed = True
            continue
        out.append(n)
        i += 1
    return out, changed


def _fuse_bias(nodes):
    out, changed = [], False
    i = 0
    while i < len(nodes):
        n = nodes[i]
        if n.op == "matmul" and i + 1 < len(nodes) and nodes[i + 1].op == "bias_add":
            out.append(Node("affine", weight=n.weight, bias=nodes[i + 1].bias))
            i += 2
            changed = True
            continue
        out.append(n)
        i += 1
    return out, changed


def _affine_blocks(nodes):
    """Split a fused graph into [(W, b, act)] or return None if not fused."""
    blocks = []
    i = 0
    while i < len(nodes):
        if nodes[i].op != "affine":
            return None
        act = "linear"
        if i + 1 < len(nodes) and nodes[i + 1].op == "tanh":
            act = "tanh"
            i += 1
        blocks.append([nodes[i - (act == "tanh")].weight, nodes[i - (act == "tanh")].bias, act])
        i += 1
    return blocks


def _blocks_to_nodes(blocks):
    nodes = []
    for w, b, act in blocks:
        nodes.append(Node("affine", weight=w, bias=b))
        if act == "tanh":
            nodes.append(Node("tanh"))
    return nodes


def _prune_units(blocks, out_index, out_const):
    """Remove constant hidden units and dead outputs.

    A hidden unit whose weight row is zero is a constant ``act(b)``; it is
    folded into the next layer's bias. A hidden unit no later layer reads is
    dropped. An output row with zero weights becomes a constant stub.
    """
    changed = False
    for k in range(len(blocks) - 1):
        w, b, act = blocks[k]
        nw, nb, nact = blocks[k + 1]
        const = ~np.any(w != 0.0, axis=1)
        unread = ~np.any(nw != 0.0, axis=0)
        drop = const | unread
        if np.any(drop) and not np.all(drop):
            value = np.tanh(b[const]) if act == "tanh" else b[const]
            nb = nb + nw[:, const] @ value if np.any(const) else nb
            keep = ~drop
            blocks[k] = [w[keep], b[keep], act]
            blocks[k + 1] = [nw[:, keep], nb, nact]
            changed = True
    w, b, act = blocks[-1]
    dead = ~np.any(w != 0.0, axis=1)
    if np.any(dead) and not np.all(dead):
        keep_rows = np.flatnonzero(~dead)
        remap = {int(old): new for new, old in enumerate(keep_rows)}
        new_index, new_const = [], []
        for idx, c in zip(out_index, out_const):
            if idx >= 0 and dead[idx]:
                new_index.append(-1)
                v = float(b[idx])
                new_const.append(float(np.tanh(v)) if act == "tanh" else v)
            else:
                new_index.append(remap[idx] if idx >= 0 else -1)
                new_const.append(c)
        blocks[-1] = [w[keep_rows], b[keep_rows], act]
        out_index, out_const = tuple(new_index), tuple(new_const)
        changed = True
    return blocks, out_index, out_const, changed


def optimize(graph: FrozenGraph) -> FrozenGraph:
    """Semantics-preserving size/speed passes, iterated to a fixpoint."""
    nodes = list(graph.nodes)
    out_index, out_const = graph.out_index, graph.out_const
    changed_any = False
    while True:
        nodes, c1 = _fold_input_scale(nodes)
        nodes, c2 = _fuse_bias(nodes)
        c3 = False
        blocks = _affine_blocks(nodes)
        if blocks:
            blocks, out_index, out_const, c3 = _prune_units(blocks, out_index, out_const)
            nodes = _blocks_to_nodes(blocks)
        if not (c1 or c2 or c3):
            break
        changed_any = True
    if not changed_any:
        return graph
    return FrozenGraph(tuple(nodes), graph.input_dim, graph.output_dim, tuple(out_index),
                       tuple(out_const), graph.source_hash)


# --------------------------------------------------------------- emission


def _float_literal(v: float) -> str:
    s = repr(float(np.float32(v)))
    if "e" not in s and "." not in s and "inf" not in s and "nan" not in s:
        s += ".0"
    return s + "f"


def _require_fused(graph: FrozenGraph):
    blocks = _affine_blocks(list(graph.nodes))
    if blocks is None:
        raise ValueError("emission expects an optimized graph; run optimize() first")
    return blocks


def emit_source(graph: FrozenGraph, symbol: str = "nn_eval") -> str:
    """Freestanding C99 source for the graph."""
    if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", symbol):
        raise ValueError(f"invalid C identifier {symbol!r}")
    blocks = _require_fused(graph)
    lines = [
        f"/* {symbol}: {graph.input_dim} inputs -> {graph.output_dim} outputs, "
        f"{len(blocks)} layers. Generated; do not edit. */",
        "#include <math.h>",
        "",
    ]
    for k, (w, b, _) in enumerate(blocks):
        rows, cols = w.shape
        lines.append(f"static const float {symbol}_w{k}[{rows}][{cols}] = {{")
        for r in range(rows):
            lines.append("    {" + ", ".join(_float_literal(v) for v in w[r]) + "},")
        lines.append("};")
        lines.append(f"static const float {symbol}_b{k}[{rows}] = {{")
        lines.append("    " + ", ".join(_float_literal(v) for v in b))
        lines.append("};")
        lines.append("")
    lines.append(f"void {symbol}(const float in[{graph.input_dim}], float out[{graph.output_dim}])")
    lines.append("{")
    prev, prev_n = "in", graph.input_dim
    for k, (w, _, act) in enumerate(blocks):
        rows, cols = w.shape
        buf = f"h{k}"
        lines.append(f"    double {buf}[{rows}];")
        lines.append(f"    for (int i = 0; i < {rows}; ++i) {{")
        lines.append(f"        double acc = (double){symbol}_b{k}[i];")
        lines.append(f"        for (int j = 0; j < {cols}; ++j)")
        lines.append(f"            acc += (double){symbol}_w{k}[i][j] * (double){prev}[j];")
        lines.append(f"        {buf}[i] = {'tanh(acc)' if act == 'tanh' else 'acc'};")
        lines.append("    }")
        prev, prev_n = buf, rows
    for k, (idx, c) in enumerate(zip(graph.out_index, graph.out_const)):
        if idx >= 0:
            lines.append(f"    out[{k}] = (float){prev}[{idx}];")
        else:
            lines.append(f"    out[{k}] = {_float_literal(c)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def count_weight_constants(source: str) -> int:
    """Number of float literals inside the static weight tables."""
    total = 0
    for block in re.findall(r"static const float [^=]*=\s*\{(.*?)\};", source, flags=re.S):
        total += len(re.findall(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?f", block))
    return total


_ALLOWED_INCLUDES = {"<math.h>"}
_FORBIDDEN = re.compile(r"\b(malloc|calloc|realloc|free|alloca|printf|fopen|new|delete)\b")


def is_freestanding(source: str) -> tuple[bool, list[str]]:
    """Textual check: only <math.h> included, no allocation or I/O calls."""
    problems = []
    for inc in re.findall(r"^\s*#\s*include\s*(\S+)", source, flags=re.M):
        if inc not in _ALLOWED_INCLUDES:
            problems.append(f"includes {inc}")
    for m in _FORBIDDEN.finditer(source):
        problems.append(f"uses {m.group(1)}")
    if re.search(r"^\s*#\s*import", source, flags=re.M):
        problems.append("uses #import")
    return not problems, problems


def emit_weights(graph: FrozenGraph) -> bytes:
    """Flat little-endian weights file.

    16-byte header ``magic, version, obs_dim, act_dim`` (``<4sIII``), then
    ``n_layers`` and per layer ``rows, cols, activation`` (u32) followed by
    float32 weights row-major and float32 biases; finally the output map as
    ``act_dim`` int32 indices and ``act_dim`` float32 constants.
    """
    blocks = _require_fused(graph)
    parts = [HEADER.pack(MAGIC, VERSION, graph.input_dim, graph.output_dim),
             struct.pack("<I", len(blocks))]
    for w, b, act in blocks:
        parts.append(struct.pack("<III", w.shape[0], w.shape[1], _ACT_CODE[act]))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    parts.append(np.asarray(graph.out_index, dtype="<i4").tobytes())
    parts.append(np.asarray(graph.out_const, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_weights(data: bytes) -> FrozenGraph:
    magic, version, obs_dim, act_dim = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported weights version {version}")
    off = HEADER.size
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    nodes = []
    for _ in range(n_layers):
        rows, cols, act = struct.unpack_from("<III", data, off)
        off += 12
        w = np.frombuffer(data, "<f4", rows * cols, off).reshape(rows, cols).astype(float)
        off += 4 * rows * cols
        b = np.frombuffer(data, "<f4", rows, off).astype(float)
        off += 4 * rows
        nodes.append(Node("affine", weight=w, bias=b))
        if _ACT_NAME[act] == "tanh":
            nodes.append(Node("tanh"))
    idx = tuple(int(v) for v in np.frombuffer(data, "<i4", act_dim, off))
    off += 4 * act_dim
    const = tuple(float(v) for v in np.frombuffer(data, "<f4", act_dim, off))
    return FrozenGraph(tuple(nodes), obs_dim, act_dim, idx, const)


def quantized_eval(graph: FrozenGraph, x) -> np.ndarray:
    """Numpy model of the emitted C: float32 weights and I/O, double accumulation."""
    blocks = _require_fused(graph)
    h = np.asarray(x, dtype=np.float32).astype(float)
    for w, b, act in blocks:
        h = h @ w.astype(np.float32).astype(float).T + b.astype(np.float32).astype(float)
        if act == "tanh":
            h = np.tanh(h)
    q = FrozenGraph((), graph.input_dim, graph.output_dim, graph.out_index,
                    tuple(float(np.float32(c)) for c in graph.out_const))
    return q._map_outputs(h).astype(np.float32).astype(float)


# ----------------------------------------------------------- verification


@dataclass
class EquivalenceReport:
    n_probes: int
    max_abs_error: float
    tolerance: float
    passed: bool
    worst_probe: list[float] | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def probe_inputs(n: int, dim: int, seed: int = 0, bound: float = 1000.0) -> np.ndarray:
    """Uniform probes in [-bound, bound], rounded to float32-representable values."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(n, dim)).astype(np.float32).astype(float)


def verify_equivalence(graph: FrozenGraph, checkpoint, n: int = 1000, seed: int = 0,
                       tol: float = 1e-6, evaluator=None) -> EquivalenceReport:
    """Max output discrepancy between an artifact and the checkpoint's mean head.

    ``evaluator`` maps an (n, obs_dim) batch to outputs; by default the
    float32 model of the emitted code is used.
    """
    params, _ = params_from_checkpoint(load_checkpoint(checkpoint))
    if n == 0:
        return EquivalenceReport(0, 0.0, tol, True, None, "no probes")
    if evaluator is None:
        evaluator = lambda xs: quantized_eval(graph, xs)  # noqa: E731
    xs = probe_inputs(n, graph.input_dim, seed)
    ref = forward_mean(params, xs)
    got = np.asarray(evaluator(xs), dtype=float)
    err = np.max(np.abs(got - ref), axis=1)
    worst = int(np.argmax(err))
    max_err = float(err[worst])
    passed = max_err <= tol
    return EquivalenceReport(n, max_err, tol, passed, xs[worst].tolist(),
                             "" if passed else f"probe {worst} exceeds tolerance")


# ---------------------------------------------------------- native harness


def find_compiler() -> str | None:
    for cc in (os.environ.get("CC"), "cc", "gcc", "clang"):
        if cc and shutil.which(cc):
            return cc
    return None


@dataclass
class CompiledArtifact:
    """The emitted C built into a shared library and called through ctypes."""

    path: str
    symbol: str
    input_dim: int
    output_dim: int
    _fn: object = field(default=None, repr=False)

    def __post_init__(self):
        lib = ctypes.CDLL(self.path)
        fn = getattr(lib, self.symbol)
        fn.restype = None
        fn.argtypes = [ctypes.POINTER(ctypes.c_float), ctypes.POINTER(ctypes.c_float)]
        self._lib = lib
        self._fn = fn
        self._in = (ctypes.c_float * self.input_dim)()
        self._out = (ctypes.c_float * self.output_dim)()

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.array([self(row) for row in x])
        for i in range(self.input_dim):
            self._in[i] = x[i]
        self._fn(self._in, self._out)
        return np.array(self._out[:], dtype=float)


def compile_source(source: str, symbol: str, input_dim: int, output_dim: int,
                   workdir: str | None = None, opt: str = "-O2") -> CompiledArtifact:
    cc = find_compiler()
    if cc is None:
        raise RuntimeError("no C compiler found (set CC)")
    workdir = workdir or tempfile.mkdtemp(prefix="ratelab_cc_")
    src = os.path.join(workdir, f"{symbol}.c")
    lib = os.path.join(workdir, f"lib{symbol}.so")
    with open(src, "w") as fh:
        fh.write(source)
    cmd = [cc, "-std=c99", opt, "-Wall", "-Werror", "-shared", "-fPIC", "-ffreestanding",
           src, "-o", lib, "-lm"]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"compilation failed: {proc.stderr.strip()}")
    return CompiledArtifact(lib, symbol, input_dim, output_dim)
