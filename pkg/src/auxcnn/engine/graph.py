"""Static computation graphs over a shared parameter store.

A graph is an ordered list of op nodes built once by a network builder;
node ids are topological by construction, so the forward order is fixed and
deterministic and cycles cannot be expressed. Backward walks the same list
in reverse and *accumulates* into the store's gradient buffers; callers zero
them between steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GraphError, NumericError, ShapeError, UninitializedParameterError
from .ops import Ctx, OpSpec, ScratchPool, op_impl

OWNER_GROUPS = ("F", "C", "R", "D", "D_disc", "D_cls")


@dataclass
class _Entry:
    array: np.ndarray
    owner: str
    trainable: bool
    fill: float = 0.0            # reset value for non-weight entries
    fans: tuple | None = None    # (fan_in, fan_out) for Xavier-initialized weights


class ParameterStore:
    """Named parameter tensors grouped by owner, with gradient buffers.

    Owner groups carry the freeze semantics of the alternating training
    procedure: an optimizer step addresses a set of groups and must leave
    every other group bitwise untouched.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, _Entry] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._uninitialized: set[str] = set()
        self._fresh_grads: set[str] = set()   # zeroed logically, memset deferred
        self.pool = ScratchPool()

    def create(self, name, shape, owner, trainable=True, fill=None, fans=None):
        if name in self._entries:
            raise GraphError(f"duplicate parameter name {name!r}")
        if owner not in OWNER_GROUPS:
            raise GraphError(f"unknown owner group {owner!r}")
        arr = np.full(shape, 0.0 if fill is None else fill, dtype=self.dtype)
        self._entries[name] = _Entry(arr, owner, trainable,
                                     fill=0.0 if fill is None else fill, fans=fans)
        if trainable:
            self.grads[name] = np.zeros(shape, dtype=self.dtype)
            if fill is None:
                self._uninitialized.add(name)
        return arr

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> np.ndarray:
        return self._entries[name].array

    def set(self, name, value):
        entry = self._entries[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != entry.array.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {entry.array.shape}, got {value.shape}"
            )
        entry.array[...] = value
        self._uninitialized.discard(name)

    def mark_initialized(self, name):
        self._uninitialized.discard(name)

    def names(self, groups=None, trainable_only=False):
        return [
            n
            for n, e in self._entries.items()
            if (groups is None or e.owner in groups) and (e.trainable or not trainable_only)
        ]

    def owner(self, name):
        return self._entries[name].owner

    def is_trainable(self, name):
        return self._entries[name].trainable

    def init_spec(self, name):
        """(fans, fill): Xavier fans when set, else the constant reset value."""
        e = self._entries[name]
        return e.fans, e.fill

    def zero_grads(self, groups=None):
        """Logically zero gradient buffers; the memset is deferred until a
        buffer is read without having been written."""
        for name in self.grads:
            if groups is None or self._entries[name].owner in groups:
                self._fresh_grads.add(name)

    def accumulate_grad(self, name, value):
        buf = self.grads[name]
        if value.shape != buf.shape:
            raise ShapeError(f"gradient shape {value.shape} != parameter {name!r} {buf.shape}")
        if name in self._fresh_grads:
            np.copyto(buf, value)
            self._fresh_grads.discard(name)
        else:
            np.add(buf, value, out=buf)

    def grad(self, name) -> np.ndarray:
        """Current gradient buffer, zero-filled if nothing accumulated since
        the last zero_grads."""
        buf = self.grads[name]
        if name in self._fresh_grads:
            buf.fill(0.0)
            self._fresh_grads.discard(name)
        return buf

    def check_initialized(self, names):
        missing = [n for n in names if n in self._uninitialized]
        if missing:
            raise UninitializedParameterError(
                f"parameters never initialized: {sorted(missing)[:8]}"
                + ("..." if len(missing) > 8 else "")
            )

    def group_bytes(self, groups):
        """Concatenated little-endian bytes of every entry in the groups (buffers included)."""
        blobs = []
        for name in sorted(self.names(groups=groups)):
            blobs.append(self._entries[name].array.tobytes())
        return b"".join(blobs)


@dataclass
class Node:
    op: OpSpec
    inputs: tuple[int, ...]      # node ids; ids below n_inputs are graph inputs
    params: tuple[str, ...]


class Tape:
    """Forward record needed to run a backward pass."""

    __slots__ = ("values", "caches", "ctx")

    def __init__(self, values, caches, ctx):
        self.values = values
        self.caches = caches
        self.ctx = ctx


class Graph:
    """An acyclic, deterministically ordered network of primitive ops."""

    def __init__(self, name: str, store: ParameterStore, n_inputs: int = 1):
        self.name = name
        self.store = store
        self.n_inputs = n_inputs
        self.nodes: list[Node | None] = [None] * n_inputs  # placeholders for inputs
        self.outputs: list[int] = []

    def add(self, op: OpSpec, inputs, params=()) -> int:
        nid = len(self.nodes)
        inputs = tuple(inputs)
        impl = op_impl(op.kind)
        if len(inputs) != impl.n_inputs:
            raise GraphError(f"{op.kind} takes {impl.n_inputs} inputs, got {len(inputs)}")
        for ref in inputs:
            if not 0 <= ref < nid:
                raise GraphError(f"node {nid} references {ref}: graphs must be built in order")
        for p in params:
            if p not in self.store:
                raise GraphError(f"unknown parameter {p!r}")
        self.nodes.append(Node(op, inputs, tuple(params)))
        return nid

    def set_outputs(self, refs):
        refs = list(refs)
        for ref in refs:
            if not self.n_inputs <= ref < len(self.nodes):
                raise GraphError(f"output ref {ref} out of range")
        self.outputs = refs

    # -- execution ----------------------------------------------------------

    def param_names(self, trainable_only=False):
        seen = []
        got = set()
        for node in self.nodes[self.n_inputs:]:
            for p in node.params:
                if p not in got and (not trainable_only or self.store.is_trainable(p)):
                    got.add(p)
                    seen.append(p)
        return seen

    def forward(self, *inputs, mode="eval", update_stats=False, want_tape=False,
                check_finite=True):
        """Run the graph; returns the output array, or a tuple for multi-head graphs.

        With ``want_tape=True`` returns ``(outputs, tape)`` for a later
        backward pass.
        """
        if len(inputs) != self.n_inputs:
            raise ShapeError(f"graph {self.name} takes {self.n_inputs} inputs")
        if not self.outputs:
            raise GraphError(f"graph {self.name} has no outputs set")
        self.store.check_initialized(self.param_names(trainable_only=True))
        ctx = Ctx(mode, update_stats)
        values: list = [np.asarray(x, dtype=self.store.dtype) for x in inputs]
        values += [None] * (len(self.nodes) - self.n_inputs)
        caches = [None] * len(self.nodes) if want_tape else None
        for nid in range(self.n_inputs, len(self.nodes)):
            node = self.nodes[nid]
            xs = tuple(values[r] for r in node.inputs)
            ps = tuple(self.store[p] for p in node.params)
            impl = op_impl(node.op.kind)
            y, cache = impl.forward(node.op, xs, ps, ctx)
            values[nid] = y
            if want_tape:
                caches[nid] = cache
        outs = tuple(values[r] for r in self.outputs)
        if check_finite:
            for r, y in zip(self.outputs, outs):
                if not np.all(np.isfinite(y)):
                    raise NumericError(
                        f"non-finite output from graph {self.name} node {r} "
                        f"({self.nodes[r].op.kind})"
                    )
        result = outs[0] if len(outs) == 1 else outs
        if want_tape:
            return result, Tape(values, caches, ctx)
        return result

    def backward(self, tape: Tape, out_grads, param_grads=True):
        """Accumulate parameter gradients from a taped forward; returns input grads.

        ``out_grads`` is one array (single output) or a sequence aligned with
        ``self.outputs`` where ``None`` marks an output with no loss attached.
        With ``param_grads=False`` only input gradients are computed (used
        when backpropagating *through* a frozen network).
        """
        if tape.caches is None:
            raise GraphError("forward was run without want_tape=True")
        if isinstance(out_grads, np.ndarray):
            out_grads = [out_grads]
        if len(out_grads) != len(self.outputs):
            raise ShapeError(f"expected {len(self.outputs)} output grads")
        grads: list = [None] * len(self.nodes)
        for ref, g in zip(self.outputs, out_grads):
            if g is None:
                continue
            if g.shape != tape.values[ref].shape:
                raise ShapeError(f"output grad shape {g.shape} != value {tape.values[ref].shape}")
            grads[ref] = g if grads[ref] is None else grads[ref] + g
        for nid in range(len(self.nodes) - 1, self.n_inputs - 1, -1):
            gy = grads[nid]
            if gy is None:
                continue
            node = self.nodes[nid]
            impl = op_impl(node.op.kind)
            want = param_grads and any(self.store.is_trainable(p) for p in node.params)
            gxs, gps = impl.backward(node.op, tape.caches[nid], gy, want, self.store.pool)
            for ref, gx in zip(node.inputs, gxs):
                if gx is None:
                    continue
                if grads[ref] is None:
                    grads[ref] = gx
                else:
                    grads[ref] = grads[ref] + gx
            if want:
                for pname, gp in zip(node.params, gps):
                    if gp is not None and self.store.is_trainable(pname):
                        self.store.accumulate_grad(pname, gp)
            grads[nid] = None  # free as we go
        return [grads[i] for i in range(self.n_inputs)]
