"""Versioned checkpoint files for agent and supervisor state (and optionally a whole episode).

Layout: one ASCII header line ``RANLOOP-CHECKPOINT <version> <body bytes> <sha256 of body>``
followed by a UTF-8 JSON body.  The episode snapshot, when present, is a base64 pickle inside the
body and is only unpickled after the digest has been verified.
"""
from __future__ import annotations

import base64
import hashlib
import json
import pickle
from pathlib import Path

MAGIC = "RANLOOP-CHECKPOINT"
FORMAT_VERSION = 1

_EPISODE_FIELDS = ("interval", "prev_obs", "prev_action", "trackers", "load_history", "faults", "twin",
                   "records", "stream")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    def __init__(self, path, offset: int, why: str):
        self.offset = offset
        super().__init__(f"corrupt checkpoint {path} at byte offset {offset}: {why}")


class CheckpointVersionError(CheckpointError):
    def __init__(self, path, found, expected=FORMAT_VERSION):
        self.found, self.expected = found, expected
        super().__init__(f"checkpoint {path} has format version {found}, this build reads version {expected}")


def _encode(payload: dict) -> bytes:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = f"{MAGIC} {FORMAT_VERSION} {len(body)} {hashlib.sha256(body).hexdigest()}\n".encode("ascii")
    return header + body


def save_checkpoint(path, agent, supervisor, episode=None) -> None:
    payload = {"agent": agent.state_dict(), "supervisor": supervisor.state_dict(), "episode": None}
    if episode is not None:
        snap = {k: getattr(episode, k) for k in _EPISODE_FIELDS}
        payload["episode"] = {"seed": episode.seed, "tti": episode.twin.tti,
                              "blob": base64.b64encode(pickle.dumps(snap)).decode("ascii")}
    data = _encode(payload)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)          # never leave a half-written checkpoint behind


def _decode(path, data: bytes) -> dict:
    nl = data.find(b"\n")
    if nl < 0:
        raise CorruptCheckpointError(path, len(data), "missing header line")
    parts = data[:nl].split(b" ")
    if len(parts) != 4 or parts[0] != MAGIC.encode():
        raise CorruptCheckpointError(path, 0, "bad header")
    try:
        version = int(parts[1])
    except ValueError:
        raise CorruptCheckpointError(path, len(parts[0]) + 1, "unreadable version") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(path, version)
    try:
        size = int(parts[2])
    except ValueError:
        raise CorruptCheckpointError(path, 0, "unreadable body length") from None
    body = data[nl + 1:]
    if len(body) != size:
        raise CorruptCheckpointError(path, nl + 1 + min(len(body), size),
                                     f"body is {len(body)} bytes, header says {size}")
    if hashlib.sha256(body).hexdigest().encode() != parts[3]:
        raise CorruptCheckpointError(path, nl + 1, "digest mismatch")
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(path, nl + 1 + getattr(exc, "pos", getattr(exc, "start", 0)), str(exc)) \
            from None


def load_checkpoint(path) -> dict:
    """Return the verified payload: ``{"agent", "supervisor", "episode"}``."""
    return _decode(path, Path(path).read_bytes())


def restore(payload: dict, agent, supervisor) -> None:
    agent.load_state_dict(payload["agent"])
    supervisor.load_state_dict(payload["supervisor"])


def restore_episode(payload: dict, episode) -> None:
    """Load agent, supervisor and loop state into a freshly constructed episode for the same scenario."""
    ep = payload.get("episode")
    if ep is None:
        raise CheckpointError("checkpoint holds no episode snapshot")
    if int(ep["seed"]) != episode.seed:
        raise CheckpointError(f"checkpoint seed {ep['seed']} does not match run seed {episode.seed}")
    restore(payload, episode.agent, episode.supervisor)
    for k, v in pickle.loads(base64.b64decode(ep["blob"])).items():
        setattr(episode, k, v)
