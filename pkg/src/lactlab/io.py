"""On-disk formats: volumes, checkpoints, key=value configs and manifests.

Volumes are raw little-endian float32 (slice-major) with a text sidecar
``<file>.hdr``. Checkpoints are a float32 blob plus ``<file>.manifest``
listing every tensor's name, shape and offset together with free-form
key=value metadata.
"""
import hashlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .tomo import Volume

VOLUME_FORMAT = "lactlab-volume-1"
CHECKPOINT_FORMAT = "lactlab-checkpoint-1"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_array(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


# ----------------------------------------------------------------------------
# key=value text
# ----------------------------------------------------------------------------

def parse_kv(text):
    out = OrderedDict()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path):
    return parse_kv(Path(path).read_text())


def format_kv(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items())


def config_hash(mapping):
    canon = "".join(f"{k}={mapping[k]}\n" for k in sorted(mapping))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# volumes
# ----------------------------------------------------------------------------

def _hdr_path(path):
    return Path(str(path) + ".hdr")


def write_volume(path, vol):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
    hdr = OrderedDict(format=VOLUME_FORMAT,
                      dims=",".join(str(d) for d in vol.shape),
                      dtype="float32-le",
                      spacing=",".join(f"{s:g}" for s in vol.spacing),
                      value_domain=vol.value_domain)
    for k in sorted(vol.meta):
        hdr[k] = vol.meta[k]
    _hdr_path(path).write_text(format_kv(hdr))
    return path


def read_volume(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    hdr_file = _hdr_path(path)
    if not hdr_file.exists():
        raise FileNotFoundError(f"volume header not found: {hdr_file}")
    hdr = read_kv(hdr_file)
    if hdr.get("format") != VOLUME_FORMAT:
        raise InvalidArgument(f"{hdr_file}: unknown volume format {hdr.get('format')!r}")
    dims = tuple(int(d) for d in hdr["dims"].split(","))
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise InvalidArgument(f"{path}: expected {np.prod(dims)} floats, found {data.size}")
    meta = {k: v for k, v in hdr.items()
            if k not in ("format", "dims", "dtype", "spacing", "value_domain")}
    spacing = tuple(float(s) for s in hdr["spacing"].split(","))
    return Volume(data.reshape(dims).astype(np.float32), hdr["value_domain"], spacing, meta)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def _manifest_path(path):
    return Path(str(path) + ".manifest")


def save_checkpoint(path, arrays, meta):
    """Write ``arrays`` (name -> ndarray) and ``meta`` (str -> str). Returns the blob hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = [f"format={CHECKPOINT_FORMAT}"]
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(s) for s in a.shape) or "scalar"
        lines.append(f"tensor.{name}={shape}@{offset}")
        blobs.append(a.tobytes())
        offset += a.size
    path.write_bytes(b"".join(blobs))
    digest = sha256_file(path)
    lines.append(f"blob_sha256={digest}")
    for k, v in meta.items():
        lines.append(f"{k}={v}")
    _manifest_path(path).write_text("\n".join(lines) + "\n")
    return digest


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    man_file = _manifest_path(path)
    if not man_file.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {man_file}")
    kv = read_kv(man_file)
    if kv.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgument(f"{man_file}: unknown checkpoint format")
    if sha256_file(path) != kv["blob_sha256"]:
        raise InvalidArgument(f"{path}: blob hash does not match manifest")
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    arrays = OrderedDict()
    meta = OrderedDict()
    for k, v in kv.items():
        if k.startswith("tensor."):
            shape_s, off = v.split("@")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            n = int(np.prod(shape)) if shape else 1
            off = int(off)
            arrays[k[len("tensor."):]] = flat[off:off + n].reshape(shape).astype(np.float32)
        elif k != "format":
            meta[k] = v
    return arrays, meta
