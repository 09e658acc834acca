"""Checkpoint files: a length-prefixed canonical JSON header, then little-endian
float64 blobs for student params, optimizer moments and EMA params, in that order."""
import json
import os
import struct

import numpy as np

from ..refine import EmaState
from ..seeding import canonical_json
from ..student.model import PARAM_ORDER, StudentParams
from ..student.optim import OptimState

FORMAT = "bbdistill-checkpoint-1"
_LEN = struct.Struct("<I")


def blob_names(with_ema):
    names = list(PARAM_ORDER)
    names += [f"m_{n}" for n in PARAM_ORDER] + [f"v_{n}" for n in PARAM_ORDER]
    if with_ema:
        names += [f"ema_{n}" for n in PARAM_ORDER]
    return names


def save_checkpoint(path, *, config_hash, step, params, optim, ema=None, extra=None):
    arrays = dict(params.as_dict())
    for n in PARAM_ORDER:
        arrays[f"m_{n}"] = optim.m.get(n, np.zeros_like(arrays[n]))
        arrays[f"v_{n}"] = optim.v.get(n, np.zeros_like(arrays[n]))
    if ema is not None:
        for n, a in ema.params.as_dict().items():
            arrays[f"ema_{n}"] = a
    names = blob_names(ema is not None)
    header = {
        "format": FORMAT,
        "config_hash": config_hash,
        "step": step,
        "blobs": names,
        "shapes": {n: list(arrays[n].shape) for n in names},
        "optim": {
            "step": optim.step,
            "lr_hidden": optim.lr_hidden,
            "lr_output": optim.lr_output,
            "weight_decay": optim.weight_decay,
            "warmup_steps": optim.warmup_steps,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "eps": optim.eps,
        },
        "ema": None if ema is None else {"alpha": ema.alpha, "step": ema.step},
        "extra": extra or {},
    }
    raw = canonical_json(header).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_LEN.pack(len(raw)))
        f.write(raw)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (header, params, optim_state, ema_state or None)."""
    with open(path, "rb") as f:
        data = f.read()
    (n,) = _LEN.unpack_from(data, 0)
    header = json.loads(data[_LEN.size:_LEN.size + n].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint ({header.get('format')!r})")
    pos = _LEN.size + n
    arrays = {}
    for name in header["blobs"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    params = StudentParams.from_dict(arrays)
    o = header["optim"]
    optim = OptimState(
        o["lr_hidden"], o["lr_output"], o["weight_decay"], o["warmup_steps"],
        o["beta1"], o["beta2"], o["eps"], o["step"],
        {n: arrays[f"m_{n}"] for n in PARAM_ORDER},
        {n: arrays[f"v_{n}"] for n in PARAM_ORDER},
    )
    ema = None
    if header["ema"] is not None:
        ema_params = StudentParams.from_dict({n: arrays[f"ema_{n}"] for n in PARAM_ORDER})
        ema = EmaState(ema_params, header["ema"]["alpha"], header["ema"]["step"])
    return header, params, optim, ema
