import os
import logging
import json
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import pandas as pd
import torch
from dotenv import load_dotenv

load_dotenv()

CHECKPOINT_MANIFEST = 'manifest.json'
CHECKPOINT_FORMAT_VERSION = 1

_ARRAY_DTYPES = {
    torch.float32: '<f4',
    torch.float64: '<f8',
    torch.int64: '<i8',
}


def resolve_output_root(default: str = 'runs') -> Path:
    """
    Returns the directory experiment outputs are written under.
    CONTRAST_OUTPUT_ROOT (environment or .env) overrides the configured default.
    """
    return Path(os.getenv('CONTRAST_OUTPUT_ROOT') or default)


def save_checkpoint(directory: Path, tensors: Dict[str, torch.Tensor], metadata: Dict[str, Any]) -> Path:
    """
    Saves named tensors as raw little-endian arrays plus a JSON manifest.

    Args:
        directory: Checkpoint directory (created if needed).
        tensors: Name -> tensor. Float tensors keep their dtype; integer tensors
            are stored as 64-bit.
        metadata: JSON-serialisable config, RNG state and counters.

    Returns:
        Path of the manifest file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    arrays = {}
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu()
        if tensor.dtype not in _ARRAY_DTYPES:
            tensor = tensor.to(torch.int64 if not tensor.is_floating_point() else torch.float32)
        dtype = _ARRAY_DTYPES[tensor.dtype]
        filename = f"{name}.bin"
        tensor.numpy().astype(dtype, copy=False).tofile(directory / filename)
        arrays[name] = {'file': filename, 'shape': list(tensor.shape), 'dtype': dtype}

    manifest = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'arrays': arrays,
        'metadata': metadata,
    }
    manifest_path = directory / CHECKPOINT_MANIFEST
    with open(manifest_path, 'w', encoding='utf-8') as handle:
        json.dump(manifest, handle, ensure_ascii=False, indent=2)

    logging.info(f"Saved checkpoint with {len(arrays)} arrays to {directory}")
    return manifest_path


def load_checkpoint(directory: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """
    Loads a checkpoint written by save_checkpoint.

    Returns:
        (tensors, metadata) with tensors bit-identical to the saved ones.
    """
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"No checkpoint manifest at {manifest_path}")

    with open(manifest_path, encoding='utf-8') as handle:
        manifest = json.load(handle)
    if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format {manifest.get('format_version')} in {manifest_path}")

    tensors = {}
    for name, entry in manifest['arrays'].items():
        path = directory / entry['file']
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint array '{name}' missing: {path}")
        array = np.fromfile(path, dtype=entry['dtype'])
        expected = int(np.prod(entry['shape'])) if entry['shape'] else 1
        if array.size != expected:
            raise ValueError(f"Checkpoint array '{name}' has {array.size} values, manifest says {expected}")
        tensors[name] = torch.from_numpy(array.astype(array.dtype.newbyteorder('='), copy=False).reshape(entry['shape']))

    logging.info(f"Loaded checkpoint with {len(tensors)} arrays from {directory}")
    return tensors, manifest['metadata']


def save_json(data: Any, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(data, handle, ensure_ascii=False, indent=2, default=str)
    return path


def load_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"JSON file not found: {path}")
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)


def save_table(table: pd.DataFrame, path: Path) -> Path:
    """Writes a CSV with LF line endings and no index column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, lineterminator='\n')
    logging.info(f"Saved table with {len(table)} rows to {path}")
    return path


def save_report(report_content: str, path: Path) -> Path:
    """
    Saves a markdown report.

    Args:
        report_content: The markdown content of the report.
        path: Destination file.

    Returns:
        The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_content, encoding='utf-8')
    logging.info(f"Saved report to {path}")
    return path
