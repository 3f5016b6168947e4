"""
Binary trajectory and checkpoint formats, text reports and config files.

Both binary formats are little-endian and self-describing:

Trajectory::

    b"CARDTRAJ" | version u32 | N u32 | z u8[N] | n_bonds u32 | bonds u32[n_bonds, 2]
    | n_frames u64 | frames f64[n_frames, N, 3] | energies f64[n_frames]

Checkpoint::

    b"CARDCKPT" | version u32 | json_len u32 | json utf-8 | n_records u32
    | records (name_len u32 | name | ndim u32 | dims u64[ndim] | f64 payload)
    | crc32 u32 over every preceding byte

All writers go through a temporary file in the target directory followed by
an atomic rename.
"""

from __future__ import annotations

import configparser
import contextlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .conformer import SystemContext
from .errors import FormatError
from .toy import Trajectory

TRAJ_MAGIC = b"CARDTRAJ"
CKPT_MAGIC = b"CARDCKPT"
TRAJ_VERSION = 1
CKPT_VERSION = 1


@contextlib.contextmanager
def atomic_write(path, mode="wb"):
    """Yield a file handle whose content replaces ``path`` only on success."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# -----------------------------------------------------------------------------
# trajectories
# -----------------------------------------------------------------------------

def trajectory_bytes(traj):
    z = np.asarray(traj.z)
    if np.any(z < 0) or np.any(z > 255):
        raise FormatError("atomic numbers must fit in u8")
    n = len(z)
    frames = np.ascontiguousarray(traj.frames, dtype="<f8")
    if frames.shape[1:] != (n, 3):
        raise FormatError(f"frames must be (M, {n}, 3), got {frames.shape}")
    bonds = np.asarray(traj.bonds, dtype="<u4").reshape(-1, 2)
    parts = [TRAJ_MAGIC, struct.pack("<II", TRAJ_VERSION, n), z.astype("u1").tobytes(),
             struct.pack("<I", len(bonds)), bonds.tobytes(),
             struct.pack("<Q", len(frames)), frames.tobytes(),
             np.ascontiguousarray(traj.energies, dtype="<f8").tobytes()]
    return b"".join(parts)


def write_trajectory(path, traj):
    data = trajectory_bytes(traj)
    with atomic_write(path) as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_trajectory(data):
    rd = _Reader(data, "trajectory")
    if rd.take(8) != TRAJ_MAGIC:
        raise FormatError("not a trajectory file (bad magic)")
    version, n = rd.unpack("<II")
    if version != TRAJ_VERSION:
        raise FormatError(f"unsupported trajectory version {version}")
    z = np.frombuffer(rd.take(n), dtype="u1").astype(np.int64)
    (nb,) = rd.unpack("<I")
    bonds = np.frombuffer(rd.take(8 * nb), dtype="<u4").reshape(nb, 2)
    (m,) = rd.unpack("<Q")
    expected = rd.pos + m * (n * 3 + 1) * 8
    if expected != len(data):
        raise FormatError(f"trajectory length {len(data)} does not match header ({expected})")
    frames = np.frombuffer(rd.take(m * n * 3 * 8), dtype="<f8").reshape(m, n, 3).astype(np.float64)
    energies = np.frombuffer(rd.take(m * 8), dtype="<f8").astype(np.float64)
    return Trajectory(frames, energies, z, [tuple(int(i) for i in b) for b in bonds])


def read_trajectory(path):
    with open(path, "rb") as fh:
        return parse_trajectory(fh.read())


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model config, named parameter arrays, optional context and metadata."""

    config: dict
    state: dict
    context: SystemContext = None
    meta: dict = field(default_factory=dict)


def checkpoint_bytes(ck):
    header = dict(config=ck.config, meta=ck.meta, has_context=ck.context is not None)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    records = list(ck.state.items())
    if ck.context is not None:
        records += [("context.z", np.asarray(ck.context.z, dtype=np.float64)),
                    ("context.bonds", np.asarray(ck.context.bonds, dtype=np.float64).reshape(-1, 2)),
                    ("context.references", ck.context.references)]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_checkpoint(data):
    if len(data) < 12:
        raise FormatError("checkpoint too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch (file corrupted)")
    rd = _Reader(body, "checkpoint")
    if rd.take(8) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, jl = rd.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(rd.take(jl).decode())
    except ValueError as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from None
    (count,) = rd.unpack("<I")
    state = {}
    for _ in range(count):
        (ln,) = rd.unpack("<I")
        name = rd.take(ln).decode()
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if rd.pos != len(body):
        raise FormatError("trailing bytes after checkpoint records")
    ctx = None
    if header.get("has_context"):
        z = state.pop("context.z").astype(np.int64)
        bonds = [tuple(int(i) for i in b) for b in state.pop("context.bonds")]
        ctx = SystemContext(z, bonds, state.pop("context.references"))
    return Checkpoint(header["config"], state, ctx, header.get("meta", {}))


def write_checkpoint(path, ck):
    data = checkpoint_bytes(ck)
    with atomic_write(path) as fh:
        fh.write(data)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def model_checkpoint(model, ctx=None, **meta):
    return Checkpoint(model.cfg.to_dict(), model.state_dict(), ctx, meta)


def load_model(ck):
    """Rebuild a CardModel from a Checkpoint."""
    from .model import CardModel, ModelConfig

    model = CardModel(ModelConfig.from_dict(ck.config))
    model.load_state_dict(ck.state)
    return model


# -----------------------------------------------------------------------------
# reports and config
# -----------------------------------------------------------------------------

def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def report_text(fields, title="card report"):
    lines = [f"# {title}"]
    for k, v in fields.items():
        if "=" in str(k) or "\n" in format_value(v):
            raise FormatError(f"report field {k!r} cannot be written as key = value")
        lines.append(f"{k} = {format_value(v)}")
    return "\n".join(lines) + "\n"


def write_report(path, fields, title="card report"):
    text = report_text(fields, title)
    with atomic_write(path, "w") as fh:
        fh.write(text)
    return text


def parse_report(text):
    """Parse ``key = value`` lines; numbers become floats where possible."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if " = " not in line:
            raise FormatError(f"malformed report line: {line!r}")
        k, v = line.split(" = ", 1)
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def read_report(path):
    with open(path) as fh:
        return parse_report(fh.read())


def read_config(path):
    """INI-style config: ``{section: {key: value}}`` with string values."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise FormatError(f"bad config file {path}: {exc}") from None
    return {s: dict(cp.items(s)) for s in cp.sections()}
