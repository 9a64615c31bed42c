"""Network checkpoints in the "APGN" container.

After the magic and version word comes a u32 entry count; each entry is a u32
name length, the UTF-8 name, a u32 rank, rank u32 dimensions and then one
section (tag "DATA") holding the tensor in float32 or float64.
"""
import io
from pathlib import Path
from typing import Dict

import numpy as np
import torch

from ._binary import MalformedHeaderError, Reader, Writer

MAGIC = b"APGN"
VERSION = 1


def save_tensors(tensors: Dict[str, np.ndarray], path) -> None:
    buf = io.BytesIO()
    w = Writer(buf)
    w.magic(MAGIC, VERSION)
    w.words(len(tensors))
    for name, value in tensors.items():
        arr = np.asarray(value.detach().cpu().numpy() if torch.is_tensor(value) else value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        encoded = name.encode("utf-8")
        w.words(len(encoded))
        w.raw(encoded)
        w.words(arr.ndim, *arr.shape)
        w.section("DATA", arr)
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path) -> Dict[str, np.ndarray]:
    r = Reader(Path(path).read_bytes())
    r.magic(MAGIC, versions=(VERSION,))
    (count,) = r.words(1)
    out = {}
    for _ in range(count):
        (n,) = r.words(1, "entry name")
        name = r.raw(n, "entry name").decode("utf-8")
        (ndim,) = r.words(1, name)
        shape = r.words(ndim, name) if ndim else ()
        out[name] = r.section("DATA", tuple(shape))
    r.finish()
    return out


def save_module(module: torch.nn.Module, path, extra: Dict[str, np.ndarray] = None) -> None:
    tensors = {f"param/{k}": v for k, v in module.state_dict().items()}
    tensors.update(extra or {})
    save_tensors(tensors, path)


def load_module(module: torch.nn.Module, path) -> Dict[str, np.ndarray]:
    """Load parameters into ``module``; returns any non-parameter entries."""
    tensors = load_tensors(path)
    state = module.state_dict()
    new_state = {}
    for k, ref in state.items():
        key = f"param/{k}"
        if key not in tensors:
            raise MalformedHeaderError(f"checkpoint lacks {k!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise MalformedHeaderError(f"shape mismatch for {k!r}: {arr.shape} vs {tuple(ref.shape)}")
        new_state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(new_state)
    return {k: v for k, v in tensors.items() if not k.startswith("param/")}
