"""Named parameter containers and their JSON persistence."""
from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import Tape, Var

FORMAT_VERSION = 1


class ParamStore:
    """Ordered mapping of layer-tensor names to float64 arrays.

    Shapes are fixed at creation; :meth:`set` rejects a reshaped tensor.
    """

    def __init__(self, entries=None):
        self._data: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._data[name] = arr

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._data[name].shape:
            raise ValueError(f"shape change for {name!r}: {self._data[name].shape} -> {arr.shape}")
        self._data[name] = arr.copy()

    def __getitem__(self, name):
        return self._data[name]

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def names(self):
        return list(self._data)

    def items(self):
        return self._data.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._data.items()})

    def size(self, names=None) -> int:
        return int(sum(self._data[n].size for n in (names or self._data)))

    def bind(self, tape: Tape) -> dict[str, Var]:
        """Watch every tensor on ``tape``; returns name -> Var."""
        return {name: tape.watch(value, name=name) for name, value in self._data.items()}

    def flatten(self, names) -> np.ndarray:
        return np.concatenate([self._data[n].ravel() for n in names]) if names else np.zeros(0)

    def unflatten(self, names, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for n in names:
            shape = self._data[n].shape
            size = self._data[n].size
            self.set(n, flat[offset:offset + size].reshape(shape))
            offset += size
        if offset != flat.size:
            raise ValueError("flat vector length does not match the named subset")

    def allclose(self, other: "ParamStore", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self[n], other[n], **kw) for n in self.names())


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_dense(store: ParamStore, rng, name: str, n_in: int, n_out: int) -> None:
    store.add(f"{name}.W", uniform_init(rng, (n_in, n_out), n_in))
    store.add(f"{name}.b", uniform_init(rng, (n_out,), n_in))


def add_gru(store: ParamStore, rng, name: str, n_in: int, hidden: int) -> None:
    store.add(f"{name}.W_ih", uniform_init(rng, (n_in, 3 * hidden), hidden))
    store.add(f"{name}.W_hh", uniform_init(rng, (hidden, 3 * hidden), hidden))
    store.add(f"{name}.b_ih", uniform_init(rng, (3 * hidden,), hidden))
    store.add(f"{name}.b_hh", uniform_init(rng, (3 * hidden,), hidden))


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_params(path, store: ParamStore, config: dict, seed: int) -> None:
    doc = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash(config),
        "seed": int(seed),
        "config": config,
        "layers": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in store.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False))


def load_params(path) -> tuple[ParamStore, dict]:
    """Returns the store and the document header (version, config, seed...)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter file version {doc.get('version')!r}")
    store = ParamStore()
    for name, entry in doc["layers"].items():
        store.add(name, np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"]))
    header = {k: v for k, v in doc.items() if k != "layers"}
    if header.get("config") is not None and config_hash(header["config"]) != header["config_hash"]:
        raise ValueError("parameter file config does not match its hash")
    return store, header
