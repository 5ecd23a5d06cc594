"""Dense per-layer KV store with validity flags and write stamps."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import CacheMissError, DimensionError, InputError
from .tensor import DTYPE

# digest of a cache holding no valid entries
EMPTY_DIGEST = 0xCBF29CE484222325
_MASK64 = (1 << 64) - 1


class KvCache:
    """Keys/values indexed by ``(layer, position)``.

    Storage is preallocated for ``n_positions`` slots per layer.  Reading an
    invalid slot raises ``CacheMissError``; nothing is ever zero-filled.
    """

    def __init__(self, n_layers: int, n_positions: int, d_model: int):
        self.n_layers = n_layers
        self.n_positions = n_positions
        self.d_model = d_model
        self.keys = np.zeros((n_layers, n_positions, d_model), DTYPE)
        self.values = np.zeros_like(self.keys)
        self.valid = np.zeros((n_layers, n_positions), bool)
        self.written_at = np.full((n_layers, n_positions), -1, np.int64)
        self.last_refresh_step: int | None = None

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.n_layers:
            raise InputError(f"layer {layer} outside [0, {self.n_layers})")

    def write(self, layer: int, position: int, key, value, step: int) -> None:
        self._check_layer(layer)
        key = np.asarray(key, DTYPE)
        value = np.asarray(value, DTYPE)
        if key.shape != (self.d_model,) or value.shape != (self.d_model,):
            raise DimensionError(
                f"KV vectors must have length {self.d_model}, got {key.shape} and {value.shape}"
            )
        self.keys[layer, position] = key
        self.values[layer, position] = value
        self.valid[layer, position] = True
        self.written_at[layer, position] = step

    def read(self, layer: int, positions) -> tuple[np.ndarray, np.ndarray]:
        self._check_layer(layer)
        idx = np.asarray(positions, dtype=np.int64).reshape(-1)
        ok = self.valid[layer, idx]
        if not ok.all():
            raise CacheMissError(layer, int(idx[~ok][0]))
        return self.keys[layer, idx].copy(), self.values[layer, idx].copy()

    def refresh_from_forward(self, positions, keys: np.ndarray, values: np.ndarray, step: int) -> None:
        """Write a forward pass's per-layer K/V (shape ``(L, n, d)``) at ``positions``."""
        positions = np.asarray(positions, dtype=np.int64)
        if keys.shape[0] != self.n_layers or values.shape[0] != self.n_layers:
            raise InputError(f"fresh KV has {keys.shape[0]} layers, cache has {self.n_layers}")
        if keys.shape[1:] != (positions.size, self.d_model) or values.shape != keys.shape:
            raise DimensionError(f"fresh KV shape {keys.shape} does not match {positions.size} positions")
        self.keys[:, positions] = keys
        self.values[:, positions] = values
        self.valid[:, positions] = True
        self.written_at[:, positions] = step
        self.last_refresh_step = step

    def invalidate(self, positions) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        self.valid[:, positions] = False
        self.written_at[:, positions] = -1

    def invalidate_except(self, keep) -> None:
        drop = np.ones(self.n_positions, bool)
        drop[np.asarray(keep, dtype=np.int64)] = False
        self.invalidate(np.flatnonzero(drop))

    def valid_positions(self, layer: int = 0) -> np.ndarray:
        return np.flatnonzero(self.valid[layer])

    def snapshot_digest(self, positions=None) -> int:
        """Order-independent 64-bit digest of valid entries.

        Each entry hashes (layer, position, K bytes, V bytes, written step);
        entry hashes are summed modulo 2**64 on top of ``EMPTY_DIGEST``.
        ``positions`` restricts the digest to a subset of slots.
        """
        mask = self.valid
        if positions is not None:
            sel = np.zeros(self.n_positions, bool)
            sel[np.asarray(positions, dtype=np.int64)] = True
            mask = mask & sel[None, :]
        acc = EMPTY_DIGEST
        for layer, pos in zip(*np.nonzero(mask)):
            h = hashlib.blake2b(digest_size=8)
            h.update(int(layer).to_bytes(4, "little"))
            h.update(int(pos).to_bytes(4, "little"))
            h.update(self.keys[layer, pos].tobytes())
            h.update(self.values[layer, pos].tobytes())
            h.update(int(self.written_at[layer, pos]).to_bytes(8, "little", signed=True))
            acc = (acc + int.from_bytes(h.digest(), "little")) & _MASK64
        return acc

    def dump(self) -> dict:
        """Debug view of valid entries with per-vector digests."""
        entries = []
        for layer, pos in zip(*np.nonzero(self.valid)):
            entries.append({
                "layer": int(layer),
                "position": int(pos),
                "written_at_step": int(self.written_at[layer, pos]),
                "key_digest": hashlib.blake2b(self.keys[layer, pos].tobytes(), digest_size=8).hexdigest(),
                "value_digest": hashlib.blake2b(self.values[layer, pos].tobytes(), digest_size=8).hexdigest(),
            })
        return {
            "n_layers": self.n_layers,
            "last_refresh_step": self.last_refresh_step,
            "digest": f"{self.snapshot_digest():016x}",
            "entries": entries,
        }

    def dump_json(self) -> str:
        return json.dumps(self.dump(), indent=1)
