"""
Self-describing binary trajectory files and run manifests.

Layout: the 8-byte tag b"TSNSTRJ1", the header length as a little-endian
uint32, a UTF-8 JSON header (manifest, mode enumeration, solver config, start
index, frame count), then the frames as little-endian float64 in the header's
mode order.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from common.utils import IntegrityError, SimulationError
from periodic_sns.dynamics import Trajectory
from periodic_sns.run_config import solver_config_from_document
from periodic_sns.sns_config import TOOL_VERSION
from periodic_sns.spectral_core import ModeIndex

MAGIC = b"TSNSTRJ1"
_HEADER_LEN = struct.Struct("<I")
_FRAME_DTYPE = np.dtype("<f8")


def content_hash(payload: bytes) -> str:
    """64-bit BLAKE2b digest as 16 hex digits."""
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    tool_version: str = TOOL_VERSION
    config_echo: dict[str, Any] = field(default_factory=dict)
    master_seed: int = 0
    c0_provenance: Optional[str] = None
    created_at: str = ""
    content_hash: Optional[str] = None

    @classmethod
    def create(
        cls, config_echo: dict[str, Any], master_seed: int, c0_provenance: Optional[str] = None
    ) -> "RunManifest":
        return cls(
            config_echo=config_echo,
            master_seed=int(master_seed),
            c0_provenance=c0_provenance,
            created_at=datetime.now(timezone.utc).isoformat(),
        )

    def with_hash(self, payload: bytes) -> "RunManifest":
        return replace(self, content_hash=content_hash(payload))

    def to_document(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_document(cls, document: dict[str, Any]) -> "RunManifest":
        return cls(**document)


def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(manifest.to_document(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise SimulationError(f"Cannot write manifest to {path}: {e}") from e


def save_trajectory(traj: Trajectory, path: Union[str, Path], manifest: Optional[RunManifest] = None) -> RunManifest:
    """Writes traj to path and returns the manifest with the payload hash filled in."""
    path = Path(path)
    payload = np.ascontiguousarray(traj.frames, dtype=_FRAME_DTYPE).tobytes()
    manifest = (manifest or RunManifest.create(traj.config.to_document(), 0)).with_hash(payload)
    header = {
        "manifest": manifest.to_document(),
        "modes": [list(m.as_tuple()) for m in traj.config.trunc.modes],
        "config": traj.config.to_document(),
        "start_index": traj.start_index,
        "n_frames": int(traj.frames.shape[0]),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with path.open("wb") as f:
            f.write(MAGIC)
            f.write(_HEADER_LEN.pack(len(header_bytes)))
            f.write(header_bytes)
            f.write(payload)
    except OSError as e:
        raise SimulationError(f"Cannot write trajectory to {path}: {e}") from e
    return manifest


def _read_header(path: Path, blob: bytes) -> tuple[dict[str, Any], int]:
    if len(blob) < len(MAGIC) + _HEADER_LEN.size or blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError("Not a trajectory file (bad magic tag)", path=path)
    (header_len,) = _HEADER_LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _HEADER_LEN.size
    if len(blob) < start + header_len:
        raise IntegrityError("File ends inside the header", path=path)
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"Unreadable header: {e}", path=path) from e
    for key in ("manifest", "modes", "config", "start_index", "n_frames"):
        if key not in header:
            raise IntegrityError(f"Header lacks '{key}'", path=path)
    return header, start + header_len


def read_trajectory_file(path: Union[str, Path]) -> tuple[Trajectory, RunManifest]:
    """Validated trajectory and the manifest stored in its header."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise SimulationError(f"Cannot read trajectory from {path}: {e}") from e

    header, offset = _read_header(path, blob)
    config = solver_config_from_document(header["config"])
    trunc = config.trunc
    modes = [ModeIndex(int(k1), int(k2)) for k1, k2 in header["modes"]]
    if sorted(modes) != list(trunc.modes):
        raise IntegrityError("Header mode enumeration does not match the truncation", path=path)

    n_frames = int(header["n_frames"])
    frame_bytes = trunc.dim * _FRAME_DTYPE.itemsize
    payload = blob[offset:]
    complete = len(payload) // frame_bytes
    if complete < n_frames:
        raise IntegrityError(
            f"Payload truncated: {complete} complete frame(s) of {n_frames}", path=path, frame_index=complete
        )
    if len(payload) != n_frames * frame_bytes:
        raise IntegrityError(f"Payload longer than the {n_frames} frame(s) declared", path=path)

    manifest = RunManifest.from_document(header["manifest"])
    if manifest.content_hash != content_hash(payload):
        raise IntegrityError("Content hash mismatch", path=path)

    stored = np.frombuffer(payload, dtype=_FRAME_DTYPE).reshape(n_frames, trunc.dim)
    frames = np.empty_like(stored, dtype=np.float64)
    frames[:, [trunc.position(m) for m in modes]] = stored
    return Trajectory(config, int(header["start_index"]), frames), manifest


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    return read_trajectory_file(path)[0]
