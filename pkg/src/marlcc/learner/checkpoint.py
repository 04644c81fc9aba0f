"""Checkpoints: a JSON manifest plus one little-endian float64 blob per network."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict

import numpy as np

from ..errors import CheckpointError
from .mlp import MLP

FORMAT_VERSION = 1


def _blob(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def save_checkpoint(directory, nets: Dict[str, MLP], extra: Dict[str, np.ndarray] = None, meta: dict = None) -> Path:
    """Write ``manifest.json`` and ``<name>.bin`` files; returns the manifest path.

    ``extra`` holds loose arrays (for example policy log-stds) stored the same way.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "networks": {}, "arrays": {}, "meta": meta or {}}
    for name, net in nets.items():
        params = net.params()
        (d / f"{name}.bin").write_bytes(_blob(params))
        manifest["networks"][name] = {
            "sizes": net.sizes,
            "ensemble": net.ensemble,
            "shapes": [list(p.shape) for p in params],
            "file": f"{name}.bin",
        }
    for name, arr in (extra or {}).items():
        arr = np.asarray(arr, dtype=float)
        (d / f"{name}.bin").write_bytes(_blob([arr]))
        manifest["arrays"][name] = {"shape": list(arr.shape), "file": f"{name}.bin"}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _read(path: Path, shapes):
    raw = path.read_bytes()
    n = sum(int(np.prod(s)) for s in shapes)
    if len(raw) != 8 * n:
        raise CheckpointError(f"{path.name}: expected {8 * n} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8").astype(float)
    out, k = [], 0
    for s in shapes:
        m = int(np.prod(s))
        out.append(flat[k : k + m].reshape(s).copy())
        k += m
    return out


def load_checkpoint(directory, expect: Dict[str, list] = None):
    """Return ``(nets, arrays, meta)``.

    ``expect`` maps network names to required layer sizes; a mismatch raises
    :class:`CheckpointError`.
    """
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {d}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    nets = {}
    try:
        for name, spec in manifest["networks"].items():
            if expect and name in expect and list(expect[name]) != list(spec["sizes"]):
                raise CheckpointError(f"network {name!r} has sizes {spec['sizes']}, configuration expects {expect[name]}")
            params = _read(d / spec["file"], [tuple(s) for s in spec["shapes"]])
            net = MLP(list(spec["sizes"]), [], [], spec["ensemble"])
            net.set_params(params)
            nets[name] = net
        arrays = {name: _read(d / spec["file"], [tuple(spec["shape"])])[0] for name, spec in manifest["arrays"].items()}
    except (OSError, KeyError) as exc:
        raise CheckpointError(f"incomplete checkpoint in {d}: {exc}") from None
    if expect:
        missing = set(expect) - set(nets)
        if missing:
            raise CheckpointError(f"checkpoint lacks networks {sorted(missing)}")
    return nets, arrays, manifest.get("meta", {})
