"""The SHRVQ-CKPT-1 container: a self-describing single-file checkpoint.

Layout: the magic line ``SHRVQ-CKPT-1\\n``, a little-endian uint64 header
length, a JSON header (sorted keys) describing metadata and every array
(name, dtype, shape, byte offset, byte count), then the raw array payload.
Floats are 32-bit little-endian; integers 64-bit. Writing is deterministic:
identical contents produce identical bytes.

The same container serializes full model checkpoints (autoencoder +
codebook tree + per-layer predictors) and standalone code sequences.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .autoencoder import AutoencoderConfig, FrameAutoencoder
from .codebook import CodebookTree
from .predictor import CodePredictor, PredictorConfig

MAGIC = b"SHRVQ-CKPT-1\n"

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    """Everything needed to reproduce inference bit-exactly."""

    autoencoder: FrameAutoencoder
    tree: CodebookTree
    predictors: list
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _canonical(a):
    a = np.asarray(a)
    if np.issubdtype(a.dtype, np.floating):
        return np.ascontiguousarray(a, dtype="<f4"), "<f4"
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return np.ascontiguousarray(a, dtype="<i8"), "<i8"
    raise ValueError(f"unsupported array dtype {a.dtype}")


def write_container(path, meta, arrays):
    """Write metadata and named arrays; array order is name-sorted."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        data, dtype = _canonical(arrays[name])
        raw = data.tobytes()
        entries.append({
            "name": name, "dtype": dtype, "shape": list(data.shape),
            "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def read_container(path):
    """Load (meta, arrays) written by :func:`write_container`."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a SHRVQ-CKPT-1 container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(
            e["shape"]
        ).copy()
    return header["meta"], arrays


def _state_arrays(module, prefix):
    return {
        f"{prefix}/{k}": v.detach().cpu().numpy()
        for k, v in module.state_dict().items()
    }


def _load_state(module, prefix, arrays):
    state = {}
    for k, v in module.state_dict().items():
        a = arrays[f"{prefix}/{k}"]
        state[k] = torch.from_numpy(np.ascontiguousarray(a)).to(v.dtype).reshape(v.shape)
    module.load_state_dict(state)


def save_checkpoint(ckpt: Checkpoint, path):
    meta = {
        "format": "SHRVQ-CKPT-1",
        "config": ckpt.config,
        "metadata": ckpt.metadata,
        "autoencoder": asdict(ckpt.autoencoder.config),
        "tree": {
            "num_layers": ckpt.tree.num_layers, "branch": ckpt.tree.branch,
            "dim": ckpt.tree.dim, "seed": ckpt.tree.seed,
        },
        "predictors": [asdict(p.config) for p in ckpt.predictors],
    }
    arrays = {"tree/codewords": ckpt.tree.codeword_blob()}
    arrays.update(_state_arrays(ckpt.autoencoder, "autoencoder"))
    for i, p in enumerate(ckpt.predictors):
        arrays.update(_state_arrays(p, f"predictor{i}"))
    write_container(path, meta, arrays)


def load_checkpoint(path):
    meta, arrays = read_container(path)
    ae = FrameAutoencoder(AutoencoderConfig(**meta["autoencoder"]))
    _load_state(ae, "autoencoder", arrays)
    t = meta["tree"]
    tree = CodebookTree(t["num_layers"], t["branch"], t["dim"], seed=t["seed"])
    tree.load_codeword_blob(arrays["tree/codewords"])
    predictors = []
    for i, pc in enumerate(meta["predictors"]):
        p = CodePredictor(PredictorConfig(**pc))
        _load_state(p, f"predictor{i}", arrays)
        predictors.append(p)
    return Checkpoint(
        autoencoder=ae, tree=tree, predictors=predictors,
        config=meta["config"], metadata=meta["metadata"],
    )


def save_codes(path, codes, branch):
    """Serialize per-layer (T, H, W) integer code grids."""
    layers = len(codes)
    T, H, W = np.asarray(codes[0]).shape
    meta = {"kind": "codes", "layers": layers, "T": T, "H": H, "W": W, "M": branch}
    arrays = {f"codes/layer{i}": np.asarray(c, dtype=np.int64) for i, c in enumerate(codes)}
    write_container(path, meta, arrays)


def load_codes(path):
    meta, arrays = read_container(path)
    if meta.get("kind") != "codes":
        raise ValueError(f"{path} does not hold a code sequence")
    codes = [arrays[f"codes/layer{i}"] for i in range(meta["layers"])]
    return codes, meta


def tree_checksum(tree):
    return hashlib.sha256(tree.codeword_blob().tobytes()).hexdigest()


def module_checksum(module):
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
