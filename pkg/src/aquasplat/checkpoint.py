"""``.aqs`` checkpoints: cloud (embedded PLY), medium (AQMD), frame weights and config hash.

Layout: magic ``AQSC``, a little-endian ``uint32`` version, then four sections,
each a ``uint64`` byte length followed by the payload:

1. UTF-8 JSON metadata (config hash, active SH degree, iteration, config text)
2. binary PLY of the Gaussian parameters (float64 properties)
3. AQMD medium record, or empty when there is no medium
4. UTF-8 JSON object mapping frame id to ``log(gamma)``
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from ._validation import DTYPE
from .config import TrainConfig, config_hash, dump_config, parse_config
from .dataio import FormatError, read_ply, write_ply
from .medium import MediumNet, medium_from_bytes, medium_to_bytes
from .scene import FrameWeight, GaussianCloud
from .trainer import cloud_from_ply_props, cloud_to_ply_props

MAGIC = b"AQSC"
VERSION = 1
N_SECTIONS = 4


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    medium: Optional[MediumNet]
    config: TrainConfig
    frame_weights: dict[str, FrameWeight] = field(default_factory=dict)
    sh_degree: Optional[int] = None
    iteration: int = 0

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "config_hash": ckpt.config_hash,
        "sh_degree": ckpt.cloud.sh_degree if ckpt.sh_degree is None else int(ckpt.sh_degree),
        "iteration": int(ckpt.iteration),
        "config": dump_config(ckpt.config),
    }
    gammas = {k: float(w.gamma_logparam.detach()) for k, w in sorted(ckpt.frame_weights.items())}
    sections = [
        json.dumps(meta, sort_keys=True).encode("utf-8"),
        write_ply(None, cloud_to_ply_props(ckpt.cloud)),
        medium_to_bytes(ckpt.medium) if ckpt.medium is not None else b"",
        json.dumps(gammas, sort_keys=True).encode("utf-8"),
    ]
    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    for s in sections:
        out += struct.pack("<Q", len(s)) + s
    return bytes(out)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise FormatError("not an .aqs checkpoint (bad magic)")
    if len(data) < 8:
        raise FormatError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    sections = []
    for i in range(N_SECTIONS):
        if len(data) < off + 8:
            raise FormatError(f"truncated checkpoint (section {i} length)")
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        if len(data) < off + n:
            raise FormatError(f"truncated checkpoint (section {i} payload)")
        sections.append(data[off:off + n])
        off += n
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint")
    meta = json.loads(sections[0].decode("utf-8"))
    cfg = parse_config(meta["config"], TrainConfig)
    if config_hash(cfg) != meta["config_hash"]:
        raise FormatError("checkpoint config hash mismatch")
    cloud = cloud_from_ply_props(read_ply(sections[1]))
    medium = medium_from_bytes(sections[2]) if sections[2] else None
    gammas = json.loads(sections[3].decode("utf-8"))
    weights = {k: FrameWeight(k, torch.tensor(float(v), dtype=DTYPE)) for k, v in gammas.items()}
    return Checkpoint(cloud, medium, cfg, weights, int(meta["sh_degree"]), int(meta["iteration"]))


def save_checkpoint(ckpt: Checkpoint, path) -> bytes:
    data = checkpoint_to_bytes(ckpt)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration}.aqs"
