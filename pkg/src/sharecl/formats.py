"""SHRX: a small binary container for adapters, temporary factors and checkpoints.

Layout (all integers little-endian)::

    b"SHRX" | u32 version (=1) | u64 manifest_len | manifest (UTF-8 JSON) | payload

The manifest is a JSON array. Tensor entries carry ``name``, ``role``,
``layer_id``, optional ``task_name``, ``shape`` ``[rows, cols]``, ``dtype``
(always ``"f32"``), ``offset`` (relative to the payload start) and
``byte_len``. The payload is the tensors back to back as row-major f32. One
extra entry with ``role == "meta"`` holds the non-tensor blocks (kind,
hyperparameters, history, per-task pseudo-ranks).

Values are computed in float64 and stored as float32.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConsistencyError, CorruptionError, FormatError, ValidationError
from .model import HyperParams, LoraAdapter, MergeEvent, ShareFactors, ShareState, TaskCoefficients

MAGIC = b"SHRX"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
DTYPE = np.dtype("<f4")
TENSOR_ROLES = ("lora_a", "lora_b", "alpha", "beta", "eps_alpha", "eps_beta", "mean_a", "mean_b")
META_ROLE = "meta"
# orthonormality after the round trip through float32
LOAD_ORTHO_TOL = 1e-5


@dataclass
class Container:
    """Parsed file: tensor entries, the decoded float64 tensors and the meta block."""

    entries: list
    tensors: dict
    meta: dict

    def by_role(self, role, layer_id=None, task_name=None):
        for e in self.entries:
            if e["role"] == role and e["layer_id"] == layer_id and e.get("task_name") == task_name:
                return self.tensors[e["name"]]
        raise ValidationError(
            f"missing tensor role={role!r} layer={layer_id!r} task={task_name!r}", field=f"{task_name}/{layer_id}/{role}"
        )


# -- writing -------------------------------------------------------------------


def _entry(name, role, layer_id, m, task_name=None):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"tensor {name!r} has non-finite entries", field=name)
    e = {"name": name, "role": role, "layer_id": layer_id}
    if task_name is not None:
        e["task_name"] = task_name
    e["shape"] = [int(m.shape[0]), int(m.shape[1])]
    e["dtype"] = "f32"
    return e, np.ascontiguousarray(m, dtype=DTYPE)


def encode(tensors, meta) -> bytes:
    """``tensors``: list of ``(entry_without_offsets, f32 array)``."""
    manifest = [{"name": "__meta__", "role": META_ROLE, "meta": meta}]
    chunks = []
    offset = 0
    for e, arr in tensors:
        raw = arr.tobytes(order="C")
        e = dict(e, offset=offset, byte_len=len(raw))
        manifest.append(e)
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(manifest, separators=(",", ":"), sort_keys=False, ensure_ascii=False).encode("utf-8")
    return HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def atomic_write(path, data: bytes):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".shrx-", dir=directory)
    try:
        os.chmod(tmp, 0o666 & ~_umask())
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _hyper_dict(h: HyperParams):
    return asdict(h)


def _history_list(history):
    return [{"timestep": ev.timestep, "task_name": ev.task_name, "source": ev.source} for ev in history]


def state_to_bytes(state: ShareState) -> bytes:
    tensors = []
    for lid, f in state.factors.layers.items():
        for role in ("alpha", "beta", "mean_a", "mean_b"):
            tensors.append(_entry(f"{lid}/{role}", role, lid, getattr(f, role)))
    for t in state.tasks:
        for lid, c in t.layers.items():
            for role in ("eps_alpha", "eps_beta"):
                tensors.append(_entry(f"{t.task_name}/{lid}/{role}", role, lid, getattr(c, role), t.task_name))
    meta = {
        "kind": "state",
        "k": state.factors.k,
        "n_vectors": state.factors.n_vectors,
        "layers": list(state.factors.layers),
        "tasks": [{"task_name": t.task_name, "p": t.p} for t in state.tasks],
        "hyper": _hyper_dict(state.hyper),
        "history": _history_list(state.history),
    }
    return encode(tensors, meta)


def adapter_to_bytes(adapter: LoraAdapter) -> bytes:
    tensors = []
    for lid, ly in adapter.layers.items():
        tensors.append(_entry(f"{lid}/lora_a", "lora_a", lid, ly.a, adapter.task_name))
        tensors.append(_entry(f"{lid}/lora_b", "lora_b", lid, ly.b, adapter.task_name))
    meta = {"kind": "adapter", "task_name": adapter.task_name, "rank": adapter.rank, "layers": list(adapter.layers)}
    return encode(tensors, meta)


def temporary_to_bytes(tmp) -> bytes:
    tensors = []
    for lid, ly in tmp.layers.items():
        for role in ("alpha", "beta", "eps_alpha", "eps_beta"):
            tensors.append(_entry(f"{lid}/{role}", role, lid, getattr(ly, role), tmp.task_name))
    meta = {
        "kind": "temporary",
        "task_name": tmp.task_name,
        "phi": tmp.phi,
        "p": tmp.p,
        "layers": list(tmp.layers),
        "loss_history": [float(v) for v in tmp.history],
    }
    return encode(tensors, meta)


def save_state(state: ShareState, path):
    atomic_write(path, state_to_bytes(state))


def export_adapter(adapter: LoraAdapter, path):
    atomic_write(path, adapter_to_bytes(adapter))


def save_temporary(tmp, path):
    atomic_write(path, temporary_to_bytes(tmp))


# -- reading -------------------------------------------------------------------


def _check_entry(e, i):
    required = ("name", "role", "layer_id", "shape", "dtype", "offset", "byte_len")
    if not isinstance(e, dict):
        raise FormatError(f"manifest entry {i} is not an object")
    missing = [k for k in required if k not in e]
    if missing:
        raise FormatError(f"manifest entry {i} lacks {missing}")
    extra = set(e) - set(required) - {"task_name"}
    if extra:
        raise FormatError(f"manifest entry {i} has unknown keys {sorted(extra)}")
    if e["role"] not in TENSOR_ROLES:
        raise FormatError(f"manifest entry {e['name']!r} has unknown role {e['role']!r}")
    if e["dtype"] != "f32":
        raise FormatError(f"manifest entry {e['name']!r} has dtype {e['dtype']!r}; only f32 is supported")
    shape = e["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in shape)
    ):
        raise FormatError(f"manifest entry {e['name']!r} has bad shape {shape!r}")
    for key in ("offset", "byte_len"):
        if not isinstance(e[key], int) or isinstance(e[key], bool) or e[key] < 0:
            raise FormatError(f"manifest entry {e['name']!r} has bad {key} {e[key]!r}")
    if e["byte_len"] != 4 * shape[0] * shape[1]:
        raise FormatError(f"manifest entry {e['name']!r}: byte_len {e['byte_len']} != 4*{shape[0]}*{shape[1]}")


def decode(data: bytes) -> Container:
    if len(data) < HEADER.size:
        raise CorruptionError(
            f"file is {len(data)} bytes, shorter than the {HEADER.size}-byte header", offset=len(data), expected=HEADER.size
        )
    magic, version, mlen = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    start = HEADER.size
    if start + mlen > len(data):
        raise CorruptionError(
            f"manifest runs to byte {start + mlen} but the file ends at {len(data)}",
            offset=len(data),
            expected=start + mlen,
        )
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(manifest, list):
        raise FormatError("manifest must be a JSON array")
    payload_start = start + mlen
    payload_len = len(data) - payload_start
    meta = None
    entries, tensors, spans = [], {}, []
    for i, e in enumerate(manifest):
        if isinstance(e, dict) and e.get("role") == META_ROLE:
            if meta is not None:
                raise FormatError("manifest has more than one meta entry")
            meta = e.get("meta")
            if not isinstance(meta, dict):
                raise FormatError("meta entry has no object 'meta'")
            continue
        _check_entry(e, i)
        if e["name"] in tensors:
            raise FormatError(f"duplicate tensor name {e['name']!r}")
        end = e["offset"] + e["byte_len"]
        if end > payload_len:
            raise CorruptionError(
                f"tensor {e['name']!r} spans payload bytes [{e['offset']}, {end}) but the payload has {payload_len} "
                f"(absolute end {payload_start + end} > file size {len(data)})",
                offset=payload_start + payload_len,
                expected=payload_start + end,
            )
        spans.append((e["offset"], end, e["name"]))
        raw = data[payload_start + e["offset"] : payload_start + end]
        arr = np.frombuffer(raw, dtype=DTYPE).reshape(e["shape"]).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {e['name']!r} has non-finite entries", field=e["name"])
        tensors[e["name"]] = arr
        entries.append(e)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptionError(f"tensors {n0!r} and {n1!r} overlap at payload byte {s1}", offset=payload_start + s1)
    if meta is None:
        raise FormatError("manifest has no meta entry")
    return Container(entries, tensors, meta)


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        return decode(fh.read())


def _kind(c: Container, expected):
    kind = c.meta.get("kind")
    if kind != expected:
        raise ValidationError(f"file holds a {kind!r}, expected a {expected!r}", field="kind")


def _vector(m, name):
    if m.shape[0] != 1:
        raise ValidationError(f"{name} must be stored as a 1 x n row", field=name)
    return m[0]


def _wrap_validation(fn, *args):
    try:
        return fn(*args)
    except ValidationError:
        raise
    except (ConsistencyError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"invalid contents: {exc}", field=getattr(exc, "layer_id", None)) from None


def state_from_container(c: Container) -> ShareState:
    _kind(c, "state")
    return _wrap_validation(_build_state, c)


def _build_state(c: Container) -> ShareState:
    m = c.meta
    layers = {}
    for lid in m["layers"]:
        layers[lid] = (
            c.by_role("alpha", lid),
            c.by_role("beta", lid),
            _vector(c.by_role("mean_a", lid), f"{lid}/mean_a"),
            _vector(c.by_role("mean_b", lid), f"{lid}/mean_b"),
        )
    factors = ShareFactors(int(m["k"]), layers, n_vectors=int(m["n_vectors"]))
    try:
        factors.check_orthonormal(LOAD_ORTHO_TOL)
    except ConsistencyError as exc:
        raise ValidationError(str(exc), field=f"{exc.layer_id}/alpha|beta") from None
    tasks = []
    for t in m["tasks"]:
        name = t["task_name"]
        tl = {lid: (c.by_role("eps_alpha", lid, name), c.by_role("eps_beta", lid, name)) for lid in m["layers"]}
        tasks.append(TaskCoefficients(name, int(t["p"]), tl))
    hyper = HyperParams(**m["hyper"])
    history = [MergeEvent(**ev) for ev in m["history"]]
    return ShareState(factors, tasks, hyper, history)


def load_state(path) -> ShareState:
    return state_from_container(read_container(path))


def import_adapter(path, layout=None) -> LoraAdapter:
    """Read an adapter; with ``layout`` (list of LayerShape) shapes are checked against it."""
    c = read_container(path)
    _kind(c, "adapter")

    def build():
        m = c.meta
        name = m["task_name"]
        layers = {lid: (c.by_role("lora_a", lid, name), c.by_role("lora_b", lid, name)) for lid in m["layers"]}
        ad = LoraAdapter(name, int(m["rank"]), layers)
        if layout is not None:
            ad.check_layout(layout)
        return ad

    return _wrap_validation(build)


def load_temporary(path):
    from .adapt import TemporaryFactors  # local: formats stays usable without the trainer loaded

    c = read_container(path)
    _kind(c, "temporary")

    def build():
        m = c.meta
        name = m["task_name"]
        layers = {
            lid: tuple(c.by_role(role, lid, name) for role in ("beta", "alpha", "eps_beta", "eps_alpha"))
            for lid in m["layers"]
        }
        return TemporaryFactors(int(m["phi"]), int(m["p"]), layers, task_name=name, history=tuple(m["loss_history"]))

    return _wrap_validation(build)


def load_any(path):
    """Load whatever the file holds: a state, an adapter or temporary factors."""
    kind = read_container(path).meta.get("kind")
    loaders = {"state": load_state, "adapter": import_adapter, "temporary": load_temporary}
    if kind not in loaders:
        raise ValidationError(f"unknown container kind {kind!r}", field="kind")
    return loaders[kind](path)


def tensor_checksums(path):
    """sha256 of every tensor's little-endian f32 bytes, keyed by tensor name."""
    c = read_container(path)
    return {
        name: hashlib.sha256(np.ascontiguousarray(arr, dtype=DTYPE).tobytes()).hexdigest()
        for name, arr in c.tensors.items()
    }
