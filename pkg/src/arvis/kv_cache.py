"""Paged key/value storage: fixed-size blocks, per-sequence block tables,
refcounted prefix sharing with copy-on-write.

One pool serves many handles. Pool-level mutation (allocate / append growth /
fork / free) happens under a single lock; each handle has exactly one writer.
There is no eviction: exhaustion raises and the caller decides.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, InvalidHandleError, PoolExhaustedError

DEFAULT_BLOCK_SIZE = 16


@dataclass
class CacheHandle:
    """Ordered block table plus the filled token count for one sequence."""

    pool: "BlockPool"
    handle_id: int
    block_ids: list[int] = field(default_factory=list)
    filled: int = 0
    alive: bool = True

    @property
    def capacity(self) -> int:
        return len(self.block_ids) * self.pool.block_size

    def check(self) -> None:
        if not self.alive:
            raise InvalidHandleError(f"handle {self.handle_id} used after free")


class BlockPool:
    """Block arena for all layers of one model."""

    def __init__(self, n_layers: int, dim: int, capacity: int,
                 block_size: int = DEFAULT_BLOCK_SIZE, dtype=np.float32):
        self.n_layers = n_layers
        self.dim = dim
        self.capacity = capacity
        self.block_size = block_size
        self.k = np.zeros((n_layers, capacity, block_size, dim), dtype=dtype)
        self.v = np.zeros((n_layers, capacity, block_size, dim), dtype=dtype)
        self.refcount = np.zeros(capacity, dtype=np.int32)
        self.free_list = list(range(capacity - 1, -1, -1))
        self.lock = threading.Lock()
        self._next_handle = 0
        self._handles: dict[int, CacheHandle] = {}

    # -- accounting ---------------------------------------------------------

    @property
    def free_blocks(self) -> int:
        return len(self.free_list)

    def unique_allocated(self) -> int:
        return int(np.sum(self.refcount > 0))

    def debug_dump(self) -> str:
        with self.lock:
            lines = [f"{h.handle_id}: {h.block_ids} filled={h.filled}"
                     for h in sorted(self._handles.values(), key=lambda x: x.handle_id)]
        return "\n".join(lines)

    # -- lifecycle ----------------------------------------------------------

    def allocate(self, initial_len: int = 0) -> CacheHandle:
        """Reserve capacity for initial_len tokens; content is appended later."""
        n_blocks = -(-initial_len // self.block_size) if initial_len > 0 else 0
        with self.lock:
            if n_blocks > len(self.free_list):
                raise PoolExhaustedError(
                    f"need {n_blocks} blocks, {len(self.free_list)} free")
            handle = CacheHandle(self, self._next_handle)
            self._next_handle += 1
            for _ in range(n_blocks):
                b = self.free_list.pop()
                self.refcount[b] = 1
                handle.block_ids.append(b)
            self._handles[handle.handle_id] = handle
        return handle

    def fork(self, handle: CacheHandle) -> CacheHandle:
        """Share all blocks with a new handle; later writes copy-on-write."""
        handle.check()
        with self.lock:
            clone = CacheHandle(self, self._next_handle, list(handle.block_ids), handle.filled)
            self._next_handle += 1
            for b in handle.block_ids:
                self.refcount[b] += 1
            self._handles[clone.handle_id] = clone
        return clone

    def free(self, handle: CacheHandle) -> None:
        handle.check()
        with self.lock:
            for b in handle.block_ids:
                self.refcount[b] -= 1
                if self.refcount[b] == 0:
                    self.free_list.append(b)
            handle.alive = False
            handle.block_ids = []
            del self._handles[handle.handle_id]

    # -- data path ----------------------------------------------------------

    def append(self, handle: CacheHandle, kv_rows: list[tuple[np.ndarray, np.ndarray]]) -> None:
        """Append n token rows per layer. kv_rows[layer] = (k (n, dim), v (n, dim)).

        Atomic: the pool is checked for every block the call will consume
        (growth plus copy-on-write copies) before anything is written, so a
        failed append leaves the handle exactly as it was.
        """
        handle.check()
        if len(kv_rows) != self.n_layers:
            raise CacheError(f"expected {self.n_layers} layers of rows, got {len(kv_rows)}")
        n = kv_rows[0][0].shape[0]
        if n == 0:
            return
        bs = self.block_size
        start, end = handle.filled, handle.filled + n
        first_block = start // bs
        last_block = (end - 1) // bs

        with self.lock:
            grow = max(0, last_block + 1 - len(handle.block_ids))
            cow = [bi for bi in range(first_block, min(last_block + 1, len(handle.block_ids)))
                   if self.refcount[handle.block_ids[bi]] > 1]
            if grow + len(cow) > len(self.free_list):
                raise PoolExhaustedError(
                    f"append needs {grow + len(cow)} blocks, {len(self.free_list)} free")
            for bi in cow:
                old = handle.block_ids[bi]
                new = self.free_list.pop()
                self.k[:, new] = self.k[:, old]
                self.v[:, new] = self.v[:, old]
                self.refcount[new] = 1
                self.refcount[old] -= 1
                handle.block_ids[bi] = new
            for _ in range(grow):
                b = self.free_list.pop()
                self.refcount[b] = 1
                handle.block_ids.append(b)

        for layer, (k_rows, v_rows) in enumerate(kv_rows):
            if k_rows.shape != (n, self.dim) or v_rows.shape != (n, self.dim):
                raise CacheError(f"layer {layer} rows have shape {k_rows.shape}")
            pos = start
            off = 0
            while off < n:
                blk = handle.block_ids[pos // bs]
                in_blk = pos % bs
                take = min(bs - in_blk, n - off)
                self.k[layer, blk, in_blk:in_blk + take] = k_rows[off:off + take]
                self.v[layer, blk, in_blk:in_blk + take] = v_rows[off:off + take]
                pos += take
                off += take
        handle.filled = end

    def gather(self, handle: CacheHandle, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Filled K/V rows for one layer, in token order."""
        handle.check()
        n = handle.filled
        if n == 0:
            return (np.zeros((0, self.dim), dtype=self.k.dtype),
                    np.zeros((0, self.dim), dtype=self.v.dtype))
        bs = self.block_size
        n_blocks = -(-n // bs)
        ids = handle.block_ids[:n_blocks]
        k = self.k[layer, ids].reshape(n_blocks * bs, self.dim)[:n]
        v = self.v[layer, ids].reshape(n_blocks * bs, self.dim)[:n]
        return k, v
