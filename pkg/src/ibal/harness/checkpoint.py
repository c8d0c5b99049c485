"""Versioned binary checkpoints.

Layout::

    b"IBALCKPT"                      magic
    u32 little-endian                version string length
    version string                   "ibal-ckpt-v1"
    u64 little-endian                manifest length
    manifest                         compact JSON, sorted keys
    array payload                    little-endian float64, manifest order
    32 bytes                         SHA-256 of everything above

The manifest carries the training config, the architectures of every model,
schedule state, counters and (name, shape, offset) for each array.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import miest, qmix
from ..attackers import AttackProbState
from ..training import Streams, TrainConfig, TrainState, init_state

MAGIC = b"IBALCKPT"
VERSION = "ibal-ckpt-v1"
DIGEST = 32

MODEL_NAMES = ("agent", "target_agent", "mixer", "target_mixer", "obs_model", "act_model")
OPT_NAMES = ("learner", "obs_model", "act_model")
REQUIRED_FIELDS = ("config", "models", "optimizers", "pstate", "table", "counters", "arrays")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class MissingFieldsError(CheckpointError):
    def __init__(self, fields):
        self.fields = sorted(fields)
        super().__init__(f"checkpoint is missing fields: {', '.join(self.fields)}")


def _models(state: TrainState) -> dict:
    ln = state.learner
    return {"agent": ln.agent, "target_agent": ln.target_agent, "mixer": ln.mixer,
            "target_mixer": ln.target_mixer, "obs_model": state.obs_model.net.params,
            "act_model": state.act_model.params}


def _optimizers(state: TrainState) -> dict:
    return {"learner": state.learner.opt, "obs_model": state.obs_model.net.opt,
            "act_model": state.act_model.opt}


def encode(state: TrainState) -> bytes:
    arrays: list = []

    def add(name, arr):
        arrays.append((name, np.ascontiguousarray(arr, dtype="<f8")))

    models = _models(state)
    for m in MODEL_NAMES:
        for k in sorted(models[m].tensors):
            add(f"{m}/{k}", models[m].tensors[k].data)
    opts = _optimizers(state)
    for o in OPT_NAMES:
        for k in sorted(opts[o].sq):
            add(f"opt.{o}/{k}", opts[o].sq[k])
    add("table/scores", state.table.scores)

    offset, entries = 0, []
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    ps = state.pstate
    manifest = {
        "config": state.config.to_dict(),
        "models": {m: models[m].arch for m in MODEL_NAMES},
        "optimizers": {o: {"lr": opts[o].lr, "alpha": opts[o].alpha, "eps": opts[o].eps} for o in OPT_NAMES},
        "pstate": {"p_max": ps.p_max, "alpha": ps.alpha, "eta": ps.eta, "window": ps.window,
                   "history": [float(x) for x in ps.history]},
        "table": {"refreshed_at": int(state.table.refreshed_at), "stale": bool(state.table.stale)},
        "counters": {"step": int(state.step), "episode": int(state.episode),
                     "updates": int(state.learner.updates)},
        "replay_action": state.config.replay_action,
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    vbytes = VERSION.encode("ascii")
    body = b"".join([MAGIC, struct.pack("<I", len(vbytes)), vbytes, struct.pack("<Q", len(mbytes)), mbytes]
                    + [a.tobytes() for _, a in arrays])
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return str(path)


def _split(blob: bytes) -> tuple:
    """Returns (manifest dict, payload bytes) after structural checks."""
    head = len(MAGIC) + 4
    if len(blob) < head:
        raise CheckpointTruncatedError("file ends inside the header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("bad magic bytes")
    (vlen,) = struct.unpack("<I", blob[len(MAGIC):head])
    if len(blob) < head + vlen + 8:
        raise CheckpointTruncatedError("file ends inside the header")
    version = blob[head:head + vlen].decode("ascii", errors="replace")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version!r}, expected {VERSION!r}")
    (mlen,) = struct.unpack("<Q", blob[head + vlen:head + vlen + 8])
    mstart = head + vlen + 8
    if len(blob) < mstart + mlen + DIGEST:
        raise CheckpointTruncatedError("file ends inside the manifest")
    body, digest = blob[:-DIGEST], blob[-DIGEST:]
    try:
        manifest = json.loads(blob[mstart:mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable manifest: {exc}") from exc
    missing = [f for f in REQUIRED_FIELDS if f not in manifest]
    if missing:
        raise MissingFieldsError(missing)
    need = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["arrays"])
    payload = body[mstart + mlen:]
    if len(payload) < need:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, manifest needs {need}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch")
    if len(payload) != need:
        raise CheckpointCorruptError("payload size does not match the manifest")
    return manifest, payload


def decode(blob: bytes) -> TrainState:
    """Rebuild a TrainState; nothing is returned unless every check passes."""
    manifest, payload = _split(blob)
    config = TrainConfig.from_dict(manifest["config"])
    fresh = init_state(config, Streams.from_seed(0))
    models = _models(fresh)
    missing = [m for m in MODEL_NAMES if m not in manifest["models"]]
    if missing:
        raise MissingFieldsError([f"models.{m}" for m in missing])
    for m in MODEL_NAMES:
        if manifest["models"][m] != json.loads(json.dumps(models[m].arch)):
            raise CheckpointShapeError(f"architecture of {m} does not match the config")

    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=count,
                                          offset=e["offset"]).reshape(e["shape"]).astype(np.float64)

    def fetch(name, shape):
        if name not in arrays:
            raise MissingFieldsError([name])
        if arrays[name].shape != tuple(shape):
            raise CheckpointShapeError(f"{name}: stored shape {arrays[name].shape}, expected {tuple(shape)}")
        return arrays[name]

    loaded = {}
    for m in MODEL_NAMES:
        loaded[m] = {k: fetch(f"{m}/{k}", t.shape) for k, t in models[m].tensors.items()}
    opts = _optimizers(fresh)
    opt_arrays = {o: {k: fetch(f"opt.{o}/{k}", v.shape) for k, v in opts[o].sq.items()} for o in OPT_NAMES}
    scores = fetch("table/scores", fresh.table.scores.shape)

    # all checks passed: populate
    for m in MODEL_NAMES:
        models[m].load_arrays(loaded[m])
    for o in OPT_NAMES:
        meta = manifest["optimizers"][o]
        opts[o].sq = {k: v.copy() for k, v in opt_arrays[o].items()}
        opts[o].lr, opts[o].alpha, opts[o].eps = meta["lr"], meta["alpha"], meta["eps"]
    ps = manifest["pstate"]
    fresh.pstate = AttackProbState(ps["p_max"], ps["alpha"], ps["eta"], ps["window"])
    fresh.pstate.history.extend(ps["history"])
    tb = manifest["table"]
    fresh.table = miest.DimMIScoreTable(scores.copy(), tb["refreshed_at"], tb["stale"])
    c = manifest["counters"]
    fresh.step, fresh.episode, fresh.learner.updates = c["step"], c["episode"], c["updates"]
    return fresh


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return decode(path.read_bytes())


def policy_utilities(state: TrainState, history: np.ndarray) -> np.ndarray:
    """Final-step utilities of the stored policy on a (T, B, in) input history."""
    q, _ = qmix.agent_utilities(state.learner.agent, history)
    return q


def checkpoint_fn(directory) -> "callable":
    """A train() hook writing ``<directory>/<tag>.ckpt``."""
    directory = Path(directory)

    def write(state: TrainState, tag: str) -> Optional[str]:
        return save_checkpoint(state, directory / f"{tag}.ckpt")

    return write


@dataclass
class CheckpointInfo:
    version: str
    step: int
    episode: int
    replay_action: str
    arrays: int


def inspect(path) -> CheckpointInfo:
    manifest, _ = _split(Path(path).read_bytes())
    c = manifest["counters"]
    return CheckpointInfo(VERSION, c["step"], c["episode"], manifest.get("replay_action", ""),
                          len(manifest["arrays"]))


__all__ = ["CheckpointError", "CheckpointVersionError", "CheckpointShapeError", "CheckpointTruncatedError",
           "CheckpointCorruptError", "MissingFieldsError", "save_checkpoint", "load_checkpoint", "encode",
           "decode", "inspect", "checkpoint_fn", "policy_utilities", "VERSION"]
