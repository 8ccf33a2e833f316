"""Versioned, hash-verified checkpoint bundles with per-component addressing.

File layout::

    catprior-checkpoint <version>\\n
    <header length in bytes>\\n
    <header: JSON, sorted keys>
    <payload: concatenated component blobs>

The header records the bundle kind, the config hash, structural fields
(code count, code width, character model digest), free-form metadata, and
for each component its byte range and SHA-256.  A component blob is an
``.npz``-style sequence of ``np.save`` records preceded by a JSON index, so
arrays round-trip exactly.  Loading verifies the hash of every component it
reads, which lets a consumer pull out the decoder alone without touching
the rest.
"""

from __future__ import annotations

import collections
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from catprior.errors import DataError, UsageError
from catprior.nn import AdamState, GaussianHead, ParamSet
from catprior.quantizer import Codebook

MAGIC = "catprior-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Component:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


@dataclass
class Bundle:
    kind: str
    components: dict[str, Component] = field(default_factory=dict)
    config_hash: str = ""
    structural: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------ blob codec
def _encode_component(comp: Component) -> bytes:
    names = sorted(comp.arrays)
    records = []
    for n in names:
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(comp.arrays[n]), allow_pickle=False)
        records.append(buf.getvalue())
    index = {"arrays": [[n, len(r)] for n, r in zip(names, records)], "meta": comp.meta}
    head = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    return len(head).to_bytes(8, "little") + head + b"".join(records)


def _decode_component(blob: bytes) -> Component:
    try:
        n = int.from_bytes(blob[:8], "little")
        index = json.loads(blob[8:8 + n].decode())
        pos = 8 + n
        arrays = {}
        for name, size in index["arrays"]:
            arrays[name] = np.load(io.BytesIO(blob[pos:pos + size]), allow_pickle=False)
            pos += size
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed checkpoint component: {exc}") from exc
    return Component(arrays, index["meta"])


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ------------------------------------------------------------------ file io
def dumps(bundle: Bundle) -> bytes:
    blobs = []
    table = {}
    offset = 0
    for name in sorted(bundle.components):
        b = _encode_component(bundle.components[name])
        table[name] = {"offset": offset, "nbytes": len(b), "sha256": _sha(b)}
        blobs.append(b)
        offset += len(b)
    header = {
        "version": FORMAT_VERSION, "kind": bundle.kind, "config_hash": bundle.config_hash,
        "structural": bundle.structural, "meta": bundle.meta, "components": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return f"{MAGIC} {FORMAT_VERSION}\n{len(head)}\n".encode() + head + b"".join(blobs)


def _split(data: bytes, source: str):
    try:
        first = data.index(b"\n")
        second = data.index(b"\n", first + 1)
        magic, version = data[:first].decode().split(" ")
        n = int(data[first + 1:second])
    except ValueError as exc:
        raise DataError(f"{source}: not a checkpoint bundle") from exc
    if magic != MAGIC:
        raise DataError(f"{source}: not a checkpoint bundle")
    if int(version) != FORMAT_VERSION:
        raise DataError(f"{source}: checkpoint format version {version} is not supported "
                        f"(this build reads version {FORMAT_VERSION})")
    try:
        header = json.loads(data[second + 1:second + 1 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupted checkpoint header") from exc
    return header, data[second + 1 + n:]


def loads(data: bytes, components: list[str] | None = None, source: str = "<bytes>") -> Bundle:
    """Parse a bundle; only ``components`` (all when None) are decoded and hash-checked."""
    header, payload = _split(data, source)
    table = header["components"]
    expected = sum(t["nbytes"] for t in table.values())
    if len(payload) != expected:
        raise DataError(f"{source}: payload is {len(payload)} bytes, header declares {expected}")
    names = sorted(table) if components is None else list(components)
    out = {}
    for name in names:
        if name not in table:
            raise UsageError(f"{source}: no component {name!r}; available: {', '.join(sorted(table))}")
        t = table[name]
        blob = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if _sha(blob) != t["sha256"]:
            raise DataError(f"{source}: hash mismatch in component {name!r}")
        out[name] = _decode_component(blob)
    return Bundle(header["kind"], out, header["config_hash"], header["structural"], header["meta"])


def save(bundle: Bundle, path) -> str:
    """Write the bundle; returns its SHA-256."""
    data = dumps(bundle)
    with open(path, "wb") as fh:
        fh.write(data)
    return _sha(data)


def load(path, components: list[str] | None = None) -> Bundle:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc
    return loads(data, components, source=str(path))


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return _sha(fh.read())


def check_structural(bundle: Bundle, expected: dict, stage: str) -> None:
    """Refuse to continue when an upstream bundle disagrees on structural fields."""
    for k, v in expected.items():
        if k in bundle.structural and bundle.structural[k] != v:
            raise UsageError(f"{stage}: upstream {bundle.kind} checkpoint has {k}={bundle.structural[k]!r}, "
                             f"current config has {v!r}")


# ------------------------------------------------------------------ component codecs
def paramset_component(p: ParamSet) -> Component:
    arrays = {}
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        arrays[f"w{i:02d}"] = w
        arrays[f"b{i:02d}"] = b
    return Component(arrays, {"activations": list(p.activations)})


def paramset_from(c: Component) -> ParamSet:
    n = len(c.meta["activations"])
    return ParamSet([c.arrays[f"w{i:02d}"].copy() for i in range(n)],
                    [c.arrays[f"b{i:02d}"].copy() for i in range(n)], list(c.meta["activations"]))


def codebook_component(cb: Codebook) -> Component:
    return Component({"codes": cb.codes, "usage": cb.usage}, {})


def codebook_from(c: Component) -> Codebook:
    return Codebook(c.arrays["codes"].copy(), c.arrays["usage"].copy())


def adam_component(states: dict[str, AdamState]) -> Component:
    arrays = {}
    meta = {}
    for g in sorted(states):
        s = states[g]
        for i, (m, v) in enumerate(zip(s.m, s.v)):
            arrays[f"{g}.m{i:03d}"] = m
            arrays[f"{g}.v{i:03d}"] = v
        meta[g] = {"lr": s.lr, "step": s.step, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
                   "max_grad_norm": s.max_grad_norm, "n": len(s.m)}
    return Component(arrays, meta)


def adam_from(c: Component) -> dict[str, AdamState]:
    out = {}
    for g, m in c.meta.items():
        out[g] = AdamState(m["lr"], [c.arrays[f"{g}.m{i:03d}"].copy() for i in range(m["n"])],
                           [c.arrays[f"{g}.v{i:03d}"].copy() for i in range(m["n"])], step=m["step"],
                           beta1=m["beta1"], beta2=m["beta2"], eps=m["eps"], max_grad_norm=m["max_grad_norm"])
    return out


def imitation_components(policy) -> dict[str, Component]:
    meta = {"state_dim": policy.state_dim, "future_dim": policy.future_dim}
    head = Component({"log_std": policy.head.log_std}, meta)
    if policy.obs_shift is not None:
        head.arrays["obs_shift"] = policy.obs_shift
        head.arrays["obs_scale"] = policy.obs_scale
    return {"encoder": paramset_component(policy.encoder), "codebook": codebook_component(policy.codebook),
            "decoder": paramset_component(policy.decoder), "head": head,
            "value": paramset_component(policy.critic)}


def imitation_from(bundle: Bundle):
    """Rebuild the imitation policy; the encoder and value net may be absent (decoder-only load)."""
    from catprior.imitation import ImitationPolicy

    b = bundle.components
    head = b["head"]
    dec = paramset_from(b["decoder"])
    cb = codebook_from(b["codebook"])
    enc = paramset_from(b["encoder"]) if "encoder" in b else None
    val = paramset_from(b["value"]) if "value" in b else None
    return ImitationPolicy(enc, cb, dec, GaussianHead(head.arrays["log_std"].copy()), val,
                           int(head.meta["state_dim"]), int(head.meta["future_dim"]),
                           head.arrays.get("obs_shift"), head.arrays.get("obs_scale"))


def count_table_component(table) -> Component:
    ring = np.fromiter(table.ring, dtype=np.int64, count=len(table.ring))
    return Component({"counts": table.counts, "ring": ring},
                     {"n_frames": table.n_frames, "window": table.window, "scale": table.scale,
                      "total": table.total})


def count_table_from(c: Component):
    from catprior.prior import PseudoCountTable

    m = c.meta
    return PseudoCountTable(m["n_frames"], m["window"], m["scale"], c.arrays["counts"].copy(),
                            collections.deque(int(x) for x in c.arrays["ring"]), m["total"])


def league_components(league) -> dict[str, Component]:
    comps = {"league": Component({"win_prob": np.asarray(league.win_prob, dtype=np.float64),
                                  "added_at": np.asarray(league.added_at, dtype=np.int64)},
                                 {"size": len(league), "exponent": league.exponent, "ema": league.ema})}
    for i, p in enumerate(league.pool):
        comps[f"pool.{i:04d}"] = paramset_component(p)
    return comps


def league_from(bundle: Bundle):
    from catprior.upper import League

    c = bundle.components["league"]
    n = int(c.meta["size"])
    pool = [paramset_from(bundle.components[f"pool.{i:04d}"]) for i in range(n)]
    return League(pool, [float(x) for x in c.arrays["win_prob"]], [int(x) for x in c.arrays["added_at"]],
                  c.meta["exponent"], c.meta["ema"])
