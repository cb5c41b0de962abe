"""Binary checkpoint: magic ``NS2C``, u32 version, tagged sections.

Each section is a 4-byte ASCII tag, a little-endian u64 payload length, and
the payload.  Array payloads are a JSON header (shapes, dtypes, metadata)
length-prefixed with a u32, followed by raw little-endian array bytes in
header order.  Saving the optimizer moments, rng state, and occupancy EMA
alongside the parameters makes a resumed run bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NS2C"
VERSION = 1


def _le(arr):
    a = np.ascontiguousarray(arr)
    return a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_arrays(meta, arrays):
    head = _json_bytes(meta)
    out = [struct.pack("<I", len(head)), head]
    out.extend(_le(a) for a in arrays)
    return b"".join(out)


def _unpack_arrays(payload, specs_key="arrays"):
    (hlen,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4 : 4 + hlen].decode())
    offset = 4 + hlen
    arrays = []
    for spec in meta[specs_key]:
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=offset)
        offset += arr.nbytes
        arrays.append(arr.reshape(spec["shape"]).astype(dt.newbyteorder("=")))
    return meta, arrays


def _arr_spec(a):
    return {"shape": list(a.shape), "dtype": a.dtype.str.lstrip("<>=|")}


def _mlp_section(net):
    meta = {"arrays": [_arr_spec(h) for h in net.layers]}
    return _pack_arrays(meta, net.layers)


def _grid_section(grid):
    meta = {
        "num_levels": grid.num_levels,
        "table_size": grid.table_size,
        "features_per_level": grid.features_per_level,
        "resolutions": grid.resolutions.tolist(),
        "aabb_min": grid.aabb_min.tolist(),
        "aabb_extent": grid.aabb_extent.tolist(),
        "arrays": [_arr_spec(grid.tables)],
    }
    return _pack_arrays(meta, [grid.tables])


def save_checkpoint(path, state, extra_sections=None):
    """Serialize a trainer.TrainState (plus optional extra tagged sections)."""
    sections = []
    sections.append((b"GRID", _grid_section(state.params.grid)))
    sections.append((b"SDFN", _mlp_section(state.params.sdf_net)))
    sections.append((b"COLN", _mlp_section(state.params.color_net)))
    sections.append((b"SLOG", _le(state.params.sharpness_log)))

    adam_meta = {"keys": [], "steps": [], "arrays": []}
    adam_arrays = []
    for key in sorted(state.adam):
        st = state.adam[key]
        adam_meta["keys"].append(key)
        adam_meta["steps"].append(st.t)
        adam_meta["arrays"].extend([_arr_spec(st.m), _arr_spec(st.v)])
        adam_arrays.extend([st.m, st.v])
    sections.append((b"ADAM", _pack_arrays(adam_meta, adam_arrays)))

    sections.append((b"STEP", struct.pack("<Q", state.step)))
    sections.append((b"RNGS", _json_bytes(state.rng.bit_generator.state)))

    occ = state.occ
    occ_meta = {
        "resolution": occ.resolution,
        "aabb": [occ.lo.tolist(), occ.hi.tolist()],
        "threshold": occ.threshold,
        "arrays": [_arr_spec(occ.ema), _arr_spec(occ.bits.astype(np.uint8))],
    }
    sections.append((b"OCCG", _pack_arrays(occ_meta, [occ.ema, occ.bits.astype(np.uint8)])))

    sections.append((b"CONF", _json_bytes(dataclasses.asdict(state.config))))
    for tag, payload in extra_sections or []:
        sections.append((tag, payload))

    blob = [MAGIC, struct.pack("<I", VERSION)]
    for tag, payload in sections:
        blob.append(tag)
        blob.append(struct.pack("<Q", len(payload)))
        blob.append(payload)
    Path(path).write_bytes(b"".join(blob))


def read_sections(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sections = {}
    offset = 8
    while offset < len(raw):
        tag = raw[offset : offset + 4]
        (n,) = struct.unpack_from("<Q", raw, offset + 4)
        offset += 12
        sections[tag] = raw[offset : offset + n]
        offset += n
    return sections


def load_checkpoint(path):
    """Rebuild a trainer.TrainState from a checkpoint file."""
    from . import field as fieldmod
    from . import hash_encoding as enc
    from . import renderer
    from . import relu_mlp as mlp
    from . import trainer

    sec = read_sections(path)

    gmeta, (tables,) = _unpack_arrays(sec[b"GRID"])
    grid = enc.MultiResHashGrid(
        num_levels=gmeta["num_levels"],
        min_resolution=int(gmeta["resolutions"][0]),
        max_resolution=int(gmeta["resolutions"][-1]),
        features_per_level=gmeta["features_per_level"],
        table_size=gmeta["table_size"],
        aabb=(
            gmeta["aabb_min"],
            (np.asarray(gmeta["aabb_min"]) + np.asarray(gmeta["aabb_extent"])).tolist(),
        ),
        dtype=tables.dtype,
    )
    grid.tables = tables.copy()

    _, sdf_layers = _unpack_arrays(sec[b"SDFN"])
    _, color_layers = _unpack_arrays(sec[b"COLN"])
    slog = np.frombuffer(sec[b"SLOG"], dtype="<f8").astype(np.float64)
    params = fieldmod.SdfFieldParams(
        grid, mlp.MlpWeights(sdf_layers), mlp.MlpWeights(color_layers), slog
    )

    cfg = trainer.TrainConfig(**json.loads(sec[b"CONF"].decode()))
    ometa, (ema, bits) = _unpack_arrays(sec[b"OCCG"])
    occ = renderer.OccupancyGrid(
        resolution=ometa["resolution"],
        aabb=(tuple(ometa["aabb"][0]), tuple(ometa["aabb"][1])),
        threshold=ometa["threshold"],
    )
    occ.ema = ema.copy()
    occ.bits = bits.astype(bool)

    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(sec[b"RNGS"].decode())
    (step,) = struct.unpack("<Q", sec[b"STEP"])

    state = trainer.TrainState(params, occ, cfg, rng, step=int(step))
    ameta, arrays = _unpack_arrays(sec[b"ADAM"])
    for i, key in enumerate(ameta["keys"]):
        st = state.adam[key]
        st.m = arrays[2 * i].copy()
        st.v = arrays[2 * i + 1].copy()
        st.t = int(ameta["steps"][i])
    return state, sec
