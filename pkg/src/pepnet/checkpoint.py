"""Model checkpointing: a directory of PTNSR1 tensor files plus a
plain-text manifest of ``key=value`` lines.

The manifest records every model-config scalar (including d, k and
use_ilsr), whether the projection has been frozen, and one
``name=relative-path`` entry per tensor: the projection mean/basis and
each named parameter (prefixed ``param.``). All stored arrays are
float32; the projection holds float32-representable values by
construction, so a save/load round trip is bit-exact.
"""

import os
from dataclasses import fields

import numpy as np

from .latent import Projection
from .model import Model, ModelConfig
from .tensor import read_ptnsr, write_ptnsr

MANIFEST_NAME = "manifest.txt"
TENSOR_DIR = "tensors"
FORMAT_KEY = "format"
FORMAT_VALUE = "pepnet-checkpoint-v1"

_BOOL_WORDS = {"true": True, "false": False}


def _encode_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _decode_scalar(text: str, kind):
    if kind is bool:
        if text not in _BOOL_WORDS:
            raise ValueError(f"expected true/false, got {text!r}")
        return _BOOL_WORDS[text]
    return kind(text)


def _tensor_relpath(name: str) -> str:
    return f"{TENSOR_DIR}/{name}.tnsr"


def _resolve(root: str, relpath: str) -> str:
    parts = relpath.split("/")
    if relpath.startswith("/") or ".." in parts:
        raise ValueError(f"manifest path {relpath!r} escapes the checkpoint directory")
    return os.path.join(root, *parts)


def save_checkpoint(model: Model, root) -> None:
    """Write config, projection and every parameter under root."""
    root = os.fspath(root)
    os.makedirs(os.path.join(root, TENSOR_DIR), exist_ok=True)

    lines = [f"{FORMAT_KEY}={FORMAT_VALUE}"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name}={_encode_scalar(getattr(model.config, f.name))}")
    lines.append(f"projection_frozen={_encode_scalar(model.projection_frozen)}")

    proj = model.projection
    for name, arr in (("pca_mean", proj.mean), ("pca_basis", proj.basis)):
        rel = _tensor_relpath(name)
        write_ptnsr(_resolve(root, rel), arr)
        lines.append(f"{name}={rel}")

    for name, p in sorted(model.named_params().items()):
        rel = _tensor_relpath(name)
        write_ptnsr(_resolve(root, rel), p.data)
        lines.append(f"param.{name}={rel}")

    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def _parse_manifest(path: str) -> dict[str, str]:
    with open(path, encoding="ascii") as f:
        entries = {}
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            if key in entries:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = value
    return entries


def load_checkpoint(root) -> Model:
    """Rebuild the model saved by save_checkpoint, bit for bit."""
    root = os.fspath(root)
    manifest = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"{manifest} does not exist")
    entries = _parse_manifest(manifest)

    fmt = entries.pop(FORMAT_KEY, None)
    if fmt != FORMAT_VALUE:
        raise ValueError(f"unsupported checkpoint format {fmt!r}")

    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in entries:
            raise ValueError(f"manifest is missing config key {f.name!r}")
        kwargs[f.name] = _decode_scalar(entries.pop(f.name), type(f.default))
    config = ModelConfig(**kwargs)

    frozen = _decode_scalar(entries.pop("projection_frozen", "false"), bool)
    mean = read_ptnsr(_resolve(root, entries.pop("pca_mean")))
    basis = read_ptnsr(_resolve(root, entries.pop("pca_basis")))

    model = Model(config, rng=np.random.default_rng(0))
    if frozen:
        model.set_projection(Projection(mean=mean.astype(np.float64), basis=basis.astype(np.float64)))

    params = model.named_params()
    for key in list(entries):
        if not key.startswith("param."):
            raise ValueError(f"manifest has unexpected key {key!r}")
        name = key[len("param."):]
        if name not in params:
            raise ValueError(f"manifest names unknown parameter {name!r}")
        arr = read_ptnsr(_resolve(root, entries.pop(key)))
        p = params.pop(name)
        if arr.shape != p.data.shape:
            raise ValueError(
                f"parameter {name!r}: stored shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data = arr
    if params:
        raise ValueError(f"manifest is missing parameters: {sorted(params)}")
    return model
