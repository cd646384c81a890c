"""Parameter checkpoints: binary file plus a JSON sidecar mirroring its header."""

from __future__ import annotations

import json
from pathlib import Path

from ifdetect.blob import read_blob, write_blob
from ifdetect.errors import FormatError
from ifdetect.model.core import ArchitectureSpec, ModelParameters

MAGIC = b"IFCK"


def _header(params: ModelParameters) -> dict:
    return {"arch": params.spec.to_dict(), "W": params.n_params, "seed": params.seed}


def save_checkpoint(params: ModelParameters, path: str | Path) -> Path:
    path = Path(path)
    header = _header(params)
    write_blob(path, MAGIC, header, params.values)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(dict(header, count=params.n_params), indent=2, sort_keys=True) + "\n")
    return sidecar


def load_checkpoint(path: str | Path) -> ModelParameters:
    header, values = read_blob(path, MAGIC)
    if header["W"] != values.size:
        raise FormatError(f"{path}: header W={header['W']} but payload has {values.size} values")
    spec = ArchitectureSpec.from_dict(header["arch"])
    return ModelParameters(spec, values, int(header["seed"]))
