"""Binary model checkpoints.

Layout: 5-byte magic "PIER1", a little-endian uint32 header length, a JSON
header, then the raw payload: every named tensor as little-endian float32
in C order, at the byte offsets recorded in the header's tensor index.

The header is self-describing: model widths are recorded explicitly, so a
checkpoint restores without the original training config.  The hash family
is not serialized; its seed is, and regenerating from the seed reproduces
the identical banks.
"""

import json
import struct

import numpy as np

from .. import fpsm
from ..embedding import make_table
from ..errors import FormatError, IntegrityError
from ..ocpm import init_ocpm_params
from ..training import AdamState, ModelState

MAGIC = b"PIER1"
FORMAT_VERSION = 1

_ADAM_M = "adam.m."
_ADAM_V = "adam.v."


def _mlp_widths(layers):
    return tuple(int(w.shape[1]) for w, _, _ in layers)


def _header_for(state):
    p = state.params
    meta = state.meta
    return {
        "format_version": FORMAT_VERSION,
        "dim": int(meta["dim"]),
        "n_fields": int(meta["n_fields"]),
        "n_display": int(meta["n_display"]),
        "n_candidates": int(meta["n_candidates"]),
        "m_behaviors": int(meta["m_behaviors"]),
        "hash_bits": int(meta["hash_bits"]),
        "hash_seed": int(meta["hash_seed"]),
        "time_gamma": float(meta["gamma"]),
        "vocab_sizes": [int(v) for v in meta["vocab_sizes"]],
        "hidden_field": list(_mlp_widths(p.mlp1)),
        "hidden_context": list(_mlp_widths(p.mlp2)),
        "hidden_att": list(_mlp_widths(p.mlp_att)[:-1]),
        "hidden_head": list(_mlp_widths(p.mlp3)[:-1]),
        "use_oau": bool(p.use_oau),
        "use_tau": bool(p.use_tau),
        "epochs_done": int(state.epochs_done),
        "adam_t": int(state.opt.t) if state.opt is not None else None,
    }


def _named_tensors(state):
    out = list(state.named_parameters())
    if state.opt is not None:
        for name, _ in state.named_parameters():
            out.append((_ADAM_M + name, state.opt.m[name]))
            out.append((_ADAM_V + name, state.opt.v[name]))
    return out


def save_checkpoint(state, path):
    """Write the model (and optimizer moments, when present) to `path`."""
    header = _header_for(state)
    index = []
    chunks = []
    offset = 0
    for name, tensor in _named_tensors(state):
        arr = np.ascontiguousarray(getattr(tensor, "data", tensor), dtype="<f4")
        index.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header["tensors"] = index
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def _read_header(raw, path):
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{path}: file shorter than the checkpoint preamble")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[: len(MAGIC)]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if start + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    return header, raw[start + hlen :]


def load_checkpoint(path):
    """Rebuild a ModelState; every tensor restores bit-exactly in float32."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header, payload = _read_header(raw, path)

    index = header["tensors"]
    expected = 0
    for name, shape, offset in index:
        if offset != expected:
            raise IntegrityError(f"{path}: tensor {name} at offset {offset}, expected {expected}")
        expected += int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise IntegrityError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )

    dim = header["dim"]
    table = make_table(header["vocab_sizes"], dim, seed=0, dtype=np.float32)
    params = init_ocpm_params(
        n_fields=header["n_fields"],
        n_display=header["n_display"],
        dim=dim,
        seed=0,
        hidden_field=tuple(header["hidden_field"]),
        hidden_context=tuple(header["hidden_context"]),
        hidden_att=tuple(header["hidden_att"]),
        hidden_head=tuple(header["hidden_head"]),
        dtype=np.float32,
        use_oau=header["use_oau"],
        use_tau=header["use_tau"],
    )
    family = fpsm.make_hash_family(
        header["m_behaviors"], header["hash_bits"], dim, seed=header["hash_seed"]
    )
    weights = fpsm.time_weights(header["m_behaviors"], header["time_gamma"])
    meta = {
        "dim": dim,
        "n_fields": header["n_fields"],
        "n_display": header["n_display"],
        "n_candidates": header["n_candidates"],
        "m_behaviors": header["m_behaviors"],
        "hash_bits": header["hash_bits"],
        "hash_seed": header["hash_seed"],
        "gamma": header["time_gamma"],
        "vocab_sizes": list(header["vocab_sizes"]),
    }
    state = ModelState(table=table, params=params, family=family, time_weights=weights, meta=meta)
    state.epochs_done = header["epochs_done"]

    tensors = dict(state.named_parameters())
    adam_m, adam_v = {}, {}
    seen = set()
    for name, shape, offset in index:
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        arr = arr.reshape(shape).astype(np.float32)
        if name.startswith(_ADAM_M):
            adam_m[name[len(_ADAM_M) :]] = arr
        elif name.startswith(_ADAM_V):
            adam_v[name[len(_ADAM_V) :]] = arr
        else:
            if name not in tensors:
                raise IntegrityError(f"{path}: unknown tensor {name!r} in index")
            if tuple(tensors[name].data.shape) != tuple(shape):
                raise IntegrityError(
                    f"{path}: tensor {name} has shape {tuple(shape)}, expected {tuple(tensors[name].data.shape)}"
                )
            tensors[name].data = arr
            seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise IntegrityError(f"{path}: tensors missing from index: {sorted(missing)}")

    if header["adam_t"] is not None:
        if set(adam_m) != set(tensors) or set(adam_v) != set(tensors):
            raise IntegrityError(f"{path}: optimizer moments incomplete")
        state.opt = AdamState(m=adam_m, v=adam_v, t=header["adam_t"])
    else:
        state.opt = None
    return state
