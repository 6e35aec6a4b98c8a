"""Versioned binary containers for embeddings (``EMBD``) and grounding MLPs (``GMLP``).

Layout: magic ``RULE``, uint16 format version, 4-byte section tag, a fixed
little-endian header, then little-endian float32 arrays in declared order.
A JSON sidecar (``<file>.json``) carries the config echo and seed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .train import EmbeddingStore

MAGIC = b"RULE"
VERSION = 1
_PREAMBLE = struct.Struct("<4sH4s")
_EMBD = struct.Struct("<IIIIIBBBBddd32s")
_GMLP = struct.Struct("<IIIBBd32s")

_BACKENDS = ("rotate", "transe")
_VARIANTS = ("default", "positional")
AGG_MODES = ("mlp", "sum", "max", "hard")
CONF_MODES = ("scalar", "finegrained")


class CheckpointError(ValueError):
    pass


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_f32(buf: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
    return arr, offset + 4 * n


def _read_preamble(data: bytes, tag: bytes) -> int:
    if len(data) < _PREAMBLE.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, section = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if section != tag:
        raise CheckpointError(f"expected section {tag!r}, found {section!r}")
    return _PREAMBLE.size


def _write_sidecar(path: Path, meta: dict | None) -> None:
    if meta is not None:
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def read_sidecar(path) -> dict:
    p = Path(str(path) + ".json")
    if not p.exists():
        return {}
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def save_store(store: EmbeddingStore, path, fingerprint: bytes = b"\0" * 32, meta: dict | None = None) -> None:
    path = Path(path)
    s = store.copy()
    s.canonicalize()
    n_l, p, k = s.rules.shape
    header = _PREAMBLE.pack(MAGIC, VERSION, b"EMBD") + _EMBD.pack(
        k, s.num_entities, s.num_relations, n_l, p,
        _BACKENDS.index(s.kge), _VARIANTS.index(s.rule_variant), 1 if s.norm in ("L1", 1) else 2,
        0 if s.rule_wrap else 1,
        s.gamma_t, s.gamma_r, s.angle_scale, fingerprint)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (s.ent_re, s.ent_im, s.rel, s.rules):
            fh.write(_f32(arr))
    _write_sidecar(path, meta)


def load_store(path, fingerprint: bytes | None = None) -> EmbeddingStore:
    data = Path(path).read_bytes()
    off = _read_preamble(data, b"EMBD")
    k, n_e, n_r, n_l, p, backend, variant, norm, flags, g_t, g_r, scale, fp = _EMBD.unpack_from(data, off)
    if fingerprint is not None and fp != b"\0" * 32 and fp != fingerprint:
        raise CheckpointError("rule set does not match the one the embeddings were trained with")
    off += _EMBD.size
    buf = memoryview(data)
    ent_re, off = _read_f32(buf, off, (n_e, k))
    ent_im, off = _read_f32(buf, off, (n_e, k))
    rel, off = _read_f32(buf, off, (n_r, k))
    rules, off = _read_f32(buf, off, (n_l, p, k))
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return EmbeddingStore(ent_re, ent_im, rel, rules, g_t, g_r, _BACKENDS[backend], _VARIANTS[variant],
                          "L1" if norm == 1 else "L2", scale, rule_wrap=not flags & 1)


def save_grounding(model, path, meta: dict | None = None) -> None:
    """Persist a :class:`rulekg.grounding.GroundingModel`."""
    path = Path(path)
    header = _PREAMBLE.pack(MAGIC, VERSION, b"GMLP") + _GMLP.pack(
        model.num_rules, model.hidden, 0, AGG_MODES.index(model.agg), CONF_MODES.index(model.conf_mode),
        model.p, model.fingerprint)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (model.w1, model.b1, model.w2, np.atleast_1d(model.b2)):
            fh.write(_f32(arr))
    _write_sidecar(path, meta)


def load_grounding(path, fingerprint: bytes | None = None):
    from .grounding import GroundingModel

    data = Path(path).read_bytes()
    off = _read_preamble(data, b"GMLP")
    n_rules, hidden, _, agg, conf, p, fp = _GMLP.unpack_from(data, off)
    if fingerprint is not None and fp != fingerprint:
        raise CheckpointError("grounding model was trained against a different rule set")
    off += _GMLP.size
    buf = memoryview(data)
    w1, off = _read_f32(buf, off, (hidden, n_rules))
    b1, off = _read_f32(buf, off, (hidden,))
    w2, off = _read_f32(buf, off, (hidden,))
    b2, off = _read_f32(buf, off, (1,))
    if off != len(data):
        raise CheckpointError("trailing bytes in grounding model")
    return GroundingModel(w1, b1, w2, float(b2[0]), fp, AGG_MODES[agg], CONF_MODES[conf], p)
