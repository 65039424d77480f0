"""Binary checkpoints: model, optimizer moments, and run bookkeeping.

Layout (all integers little-endian):

    7 bytes   magic  b"MOEUP1\\0"
    u32       format version (currently 1)
    u64       header length in bytes
    ...       header JSON (utf-8): config, kind, step, optimizer hyperparams,
              replica groups, extra metadata, and the tensor manifest
    ...       tensor payloads, '<f8' raw bytes, in manifest order

A file must end exactly at the last payload byte; anything else (bad magic,
unknown version, short read, trailing bytes, shape mismatch) raises
FormatError. Writes go to a temp file in the target directory followed by an
atomic rename, so readers never observe a half-written checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .model import DenseBlock, Model, ModelConfig, MoEBlock, OptState

MAGIC = b"MOEUP1\0"
VERSION = 1


def _model_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    out = list(model.named_params())
    for bi, blk in model.moe_blocks():
        out.append((f"b{bi}.select_bias", blk.select_bias))
    return out


def save_checkpoint(path: str, model: Model, opt: OptState | None = None, step: int = 0, extra: dict | None = None) -> None:
    tensors = _model_tensors(model)
    if opt is not None:
        for name, _ in model.named_params():
            tensors.append((f"opt_m.{name}", opt.m[name]))
            tensors.append((f"opt_v.{name}", opt.v[name]))
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "step": int(step),
        "opt": None
        if opt is None
        else {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "replica_groups": None
        if model.replica_groups is None
        else {str(k): v for k, v in model.replica_groups.items()},
        "extra": extra or {},
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for _, arr in tensors:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _skeleton(cfg: ModelConfig, kind: str) -> Model:
    """Zero-filled model of the right shape for a given kind."""
    d, f, fe, E = cfg.dim, cfg.ffn_dim, cfg.expert_dim, cfg.experts
    blocks = []
    for slot in cfg.moe_layout:
        if slot == "moe" and kind == "moe":
            blocks.append(
                MoEBlock(np.zeros(d), np.zeros((d, E)), np.zeros(E), np.zeros((E, d, fe)), np.zeros((E, fe, d)))
            )
        else:
            width = fe if slot == "moe" else f
            blocks.append(DenseBlock(np.zeros(d), np.zeros((d, width)), np.zeros((width, d))))
    return Model(cfg, kind, np.zeros((cfg.vocab, d)), np.zeros((cfg.vocab, d)), blocks, np.zeros((d, cfg.vocab)))


def load_checkpoint(path: str) -> tuple[Model, OptState | None, dict]:
    """Read a checkpoint back; returns (model, optimizer or None, header)."""
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"truncated checkpoint: ran out of bytes reading {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", take(8, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from e

    try:
        cfg = ModelConfig.from_dict(header["config"])
        kind = header["kind"]
        manifest = header["tensors"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"checkpoint header missing field: {e}") from e
    if kind not in ("moe", "dense_source"):
        raise FormatError(f"unknown model kind {kind!r}")

    model = _skeleton(cfg, kind)
    expected = {name: arr.shape for name, arr in _model_tensors(model)}
    loaded: dict[str, np.ndarray] = {}
    for entry in manifest:
        name, shape = entry[0], tuple(int(x) for x in entry[1])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        buf = take(8 * n, f"tensor {name}")
        arr = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        base = name.split(".", 1)[1] if name.startswith(("opt_m.", "opt_v.")) else name
        if base in expected and expected[base] != shape:
            raise FormatError(f"tensor {name}: shape {shape} != expected {expected[base]}")
        loaded[name] = arr
    if pos != len(raw):
        raise FormatError(f"trailing bytes after last tensor ({len(raw) - pos})")

    missing = [k for k in expected if k not in loaded]
    if missing:
        raise FormatError(f"checkpoint missing tensors: {missing}")
    for name in expected:
        if not name.endswith(".select_bias"):
            model.set_param(name, loaded[name])
    for bi, blk in model.moe_blocks():
        blk.select_bias[:] = loaded[f"b{bi}.select_bias"]
    if header.get("replica_groups") is not None:
        model.replica_groups = {int(k): [list(g) for g in v] for k, v in header["replica_groups"].items()}

    opt = None
    if header.get("opt") is not None:
        oh = header["opt"]
        m = {}
        v = {}
        for name, _ in model.named_params():
            try:
                m[name] = loaded[f"opt_m.{name}"]
                v[name] = loaded[f"opt_v.{name}"]
            except KeyError as e:
                raise FormatError(f"checkpoint missing optimizer tensor for {name}") from e
        opt = OptState(m=m, v=v, t=int(oh["t"]), beta1=float(oh["beta1"]), beta2=float(oh["beta2"]), eps=float(oh["eps"]))
    return model, opt, header
