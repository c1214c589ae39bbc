"""
Tensor container: a JSON manifest plus raw little-endian row-major binaries.

Layout of a saved artifact ``<dir>/<stem>.manifest.json``::

    {
      "format": "lowbit-tensors/1",
      "artifact": "twinlog",            # or null for plain tensor sets
      "attributes": {"bits": 3},
      "entries": [
        {"name": "codes", "dims": [64, 128], "dtype": "uint8",
         "file": "<stem>.codes.bin", "byte_order": "little-endian",
         "layout": "row-major"},
        ...
      ]
    }

``bit`` tensors are packed 8 per byte, MSB first, each last-axis row padded
to a byte boundary.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from lowbit_quant.errors import (
    ManifestError,
    MissingTensorFileError,
    SizeMismatchError,
    TensorIOError,
    UnknownDtypeError,
    UnknownTensorError,
)
from lowbit_quant.models import (
    BaseArtifact,
    RotationPlan,
    ShiftArtifact,
    SmoothingVector,
    TwinLogArtifact,
    UniformArtifact,
)

logger = logging.getLogger(__name__)

FORMAT = "lowbit-tensors/1"
MANIFEST_SUFFIX = ".manifest.json"
BYTE_ORDER = "little-endian"
LAYOUT = "row-major"

# Storage dtypes ("bit" is handled separately)
DTYPES: dict[str, np.dtype] = {
    "real32": np.dtype("<f4"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
}

ARTIFACT_TYPES: dict[str, type[BaseArtifact]] = {
    cls.artifact_kind: cls
    for cls in (TwinLogArtifact, ShiftArtifact, RotationPlan, UniformArtifact, SmoothingVector)
}


@dataclass
class ManifestEntry:
    """One tensor declared by a manifest."""

    name: str
    dims: list[int]
    dtype: str
    file: str
    byte_order: str = BYTE_ORDER
    layout: str = LAYOUT

    @property
    def nbytes(self) -> int:
        """Exact byte length the binary file must have."""
        if self.dtype == "bit":
            prefix = int(np.prod(self.dims[:-1], dtype=np.int64))
            return prefix * ((self.dims[-1] + 7) // 8)
        return int(np.prod(self.dims, dtype=np.int64)) * DTYPES[self.dtype].itemsize

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "dims": list(self.dims),
            "dtype": self.dtype,
            "file": self.file,
            "byte_order": self.byte_order,
            "layout": self.layout,
        }


@dataclass
class TensorManifest:
    """Parsed manifest file."""

    path: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    artifact: str | None = None
    attributes: dict[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> ManifestEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise UnknownTensorError(f"unknown tensor '{name}' in {self.path}")


def safe_stem(name: str) -> str:
    """File-system safe version of a layer or tensor name."""
    stem = name.replace("/", "__").replace(":", "__")
    return re.sub(r"[^A-Za-z0-9._-]", "_", stem)


def _storage_dtype(array: np.ndarray, name: str) -> str:
    if array.dtype == np.bool_:
        return "bit"
    for dtype_name, dtype in DTYPES.items():
        if array.dtype == dtype or array.dtype == dtype.newbyteorder("="):
            return dtype_name
    raise TensorIOError(
        f"tensor '{name}': dtype {array.dtype} has no storage type "
        f"(use float32, int32, uint8 or bool)"
    )


def _encode(array: np.ndarray, dtype: str) -> bytes:
    if dtype == "bit":
        return np.packbits(array, axis=-1).tobytes()
    return np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes()


def _decode(raw: bytes, entry: ManifestEntry) -> np.ndarray:
    if entry.dtype == "bit":
        row_bytes = (entry.dims[-1] + 7) // 8
        packed = np.frombuffer(raw, dtype=np.uint8).reshape(*entry.dims[:-1], row_bytes)
        bits = np.unpackbits(packed, axis=-1, count=entry.dims[-1])
        return bits.astype(bool)
    array = np.frombuffer(raw, dtype=DTYPES[entry.dtype]).reshape(entry.dims)
    # native byte order, writable copy
    return array.astype(DTYPES[entry.dtype].newbyteorder("="), copy=True)


def _parse_entry(raw: Any, manifest_path: Path) -> ManifestEntry:
    if not isinstance(raw, dict):
        raise ManifestError(f"{manifest_path}: entries must be objects")
    name = raw.get("name", "<unnamed>")
    try:
        entry = ManifestEntry(
            name=str(raw["name"]),
            dims=[int(d) for d in raw["dims"]],
            dtype=str(raw["dtype"]),
            file=str(raw["file"]),
            byte_order=str(raw.get("byte_order", BYTE_ORDER)),
            layout=str(raw.get("layout", LAYOUT)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{manifest_path}: entry '{name}' is malformed ({e})") from e
    if entry.dtype != "bit" and entry.dtype not in DTYPES:
        raise UnknownDtypeError(
            f"tensor '{entry.name}': unknown dtype '{entry.dtype}' "
            f"(expected one of real32, int32, uint8, bit)"
        )
    if not entry.dims or any(d <= 0 for d in entry.dims):
        raise ManifestError(f"tensor '{entry.name}': dims must be positive, got {entry.dims}")
    if entry.byte_order != BYTE_ORDER or entry.layout != LAYOUT:
        raise ManifestError(
            f"tensor '{entry.name}': only {BYTE_ORDER} {LAYOUT} storage is supported"
        )
    return entry


def read_manifest(manifest_path: Path) -> TensorManifest:
    """Parse and validate a manifest (files are checked lazily on load)."""
    manifest_path = Path(manifest_path)
    try:
        data = json.loads(manifest_path.read_text())
    except FileNotFoundError as e:
        raise MissingTensorFileError(f"manifest not found: {manifest_path}") from e
    except OSError as e:
        raise TensorIOError(f"cannot read manifest {manifest_path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{manifest_path}: invalid JSON ({e.msg})") from e

    if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
        raise ManifestError(f"{manifest_path}: missing 'entries' list")

    entries = [_parse_entry(raw, manifest_path) for raw in data["entries"]]
    seen: set[str] = set()
    for e in entries:
        if e.name in seen:
            raise ManifestError(f"{manifest_path}: duplicate tensor name '{e.name}'")
        seen.add(e.name)

    return TensorManifest(
        path=manifest_path,
        entries=entries,
        artifact=data.get("artifact"),
        attributes=dict(data.get("attributes") or {}),
    )


def _read_entry(manifest: TensorManifest, entry: ManifestEntry) -> np.ndarray:
    file_path = manifest.path.parent / entry.file
    if not file_path.is_file():
        raise MissingTensorFileError(f"tensor '{entry.name}': file not found: {file_path}")
    try:
        raw = file_path.read_bytes()
    except OSError as e:
        raise TensorIOError(f"tensor '{entry.name}': cannot read {file_path}: {e.strerror}") from e
    if len(raw) != entry.nbytes:
        raise SizeMismatchError(
            f"tensor '{entry.name}': size mismatch: expected {entry.nbytes} bytes, "
            f"found {len(raw)} in {file_path.name}"
        )
    return _decode(raw, entry)


def load_tensor(manifest_path: Path, name: str) -> np.ndarray:
    """Load one tensor by name, values read verbatim with the declared dims."""
    manifest = read_manifest(manifest_path)
    return _read_entry(manifest, manifest.entry(name))


def load_tensors(manifest_path: Path) -> dict[str, np.ndarray]:
    """Load every tensor of a manifest, in manifest order."""
    manifest = read_manifest(manifest_path)
    return {e.name: _read_entry(manifest, e) for e in manifest.entries}


def _unique_stem(directory: Path, stem: str) -> str:
    candidate, n = stem, 1
    while (directory / f"{candidate}{MANIFEST_SUFFIX}").exists():
        candidate = f"{stem}-{n}"
        n += 1
    return candidate


def save_tensors(
    tensors: dict[str, np.ndarray],
    directory: Path,
    stem: str,
    artifact: str | None = None,
    attributes: dict[str, Any] | None = None,
) -> Path:
    """
    Write tensors plus their manifest under directory.

    Args:
        tensors: {name: array}; arrays must be float32, int32, uint8 or bool
        directory: Output directory (created if missing)
        stem: Prefix of the manifest and binary file names
        artifact: Artifact kind recorded in the manifest, if any
        attributes: JSON-serialisable scalar metadata

    Returns:
        Path of the written manifest
    """
    directory = Path(directory)
    stem = safe_stem(stem)
    entries: list[ManifestEntry] = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, array in tensors.items():
            array = np.asarray(array)
            if array.ndim == 0 or array.size == 0:
                raise TensorIOError(f"tensor '{name}': empty or scalar arrays are not storable")
            dtype = _storage_dtype(array, name)
            entry = ManifestEntry(
                name=name,
                dims=[int(d) for d in array.shape],
                dtype=dtype,
                file=f"{stem}.{safe_stem(name)}.bin",
            )
            (directory / entry.file).write_bytes(_encode(array, dtype))
            entries.append(entry)

        manifest_path = directory / f"{stem}{MANIFEST_SUFFIX}"
        document = {
            "format": FORMAT,
            "artifact": artifact,
            "attributes": attributes or {},
            "entries": [e.to_dict() for e in entries],
        }
        manifest_path.write_text(json.dumps(document, indent=2, sort_keys=False) + "\n")
    except OSError as e:
        raise TensorIOError(f"cannot write '{stem}' under {directory}: {e.strerror}") from e

    logger.debug("wrote %s (%d tensors)", manifest_path, len(entries))
    return manifest_path


def save_artifact(artifact: BaseArtifact, directory: Path, stem: str | None = None) -> Path:
    """
    Save any artifact; load_artifact on the result reproduces it bit-exactly.

    Without an explicit stem the artifact kind is used, suffixed -1, -2, ...
    when a manifest of that name already exists.
    """
    directory = Path(directory)
    if stem is None:
        stem = _unique_stem(directory, artifact.artifact_kind) if directory.is_dir() else artifact.artifact_kind
    return save_tensors(
        artifact.to_tensors(),
        directory,
        stem,
        artifact=artifact.artifact_kind,
        attributes=artifact.to_attributes(),
    )


def load_artifact(manifest_path: Path) -> BaseArtifact:
    """Load an artifact written by save_artifact."""
    manifest = read_manifest(manifest_path)
    cls = ARTIFACT_TYPES.get(manifest.artifact or "")
    if cls is None:
        raise ManifestError(f"{manifest.path}: not an artifact manifest (artifact={manifest.artifact!r})")
    tensors = {e.name: _read_entry(manifest, e) for e in manifest.entries}
    return cls.from_tensors(tensors, manifest.attributes)


# =============================================================================
# Layer corpora
# =============================================================================

CORPUS_STEM = "corpus"


@dataclass
class CorpusLayer:
    """Weights and captured activations of one linear layer."""

    name: str
    weight: np.ndarray  # out x in
    activations: np.ndarray  # B x N x C


def write_corpus(layers: list[CorpusLayer], directory: Path) -> Path:
    """Write a layer corpus (one manifest, two tensors per layer)."""
    tensors: dict[str, np.ndarray] = {}
    for layer in layers:
        tensors[f"{layer.name}.weight"] = np.asarray(layer.weight, dtype=np.float32)
        tensors[f"{layer.name}.act"] = np.asarray(layer.activations, dtype=np.float32)
    return save_tensors(
        tensors,
        directory,
        CORPUS_STEM,
        attributes={"layers": [layer.name for layer in layers]},
    )


def corpus_manifest(path: Path) -> Path:
    """Accept either a corpus directory or its manifest path."""
    path = Path(path)
    return path / f"{CORPUS_STEM}{MANIFEST_SUFFIX}" if path.is_dir() else path


def read_corpus(path: Path) -> list[CorpusLayer]:
    """Read a corpus written by write_corpus, in its recorded layer order."""
    manifest = read_manifest(corpus_manifest(path))
    names = manifest.attributes.get("layers")
    if not isinstance(names, list):
        raise ManifestError(f"{manifest.path}: corpus manifest lacks a 'layers' attribute")
    layers = []
    for name in names:
        weight = _read_entry(manifest, manifest.entry(f"{name}.weight"))
        acts = _read_entry(manifest, manifest.entry(f"{name}.act"))
        if acts.ndim != 3 or weight.ndim != 2 or acts.shape[-1] != weight.shape[1]:
            raise ManifestError(
                f"layer '{name}': activations {acts.shape} do not match weight {weight.shape}"
            )
        layers.append(CorpusLayer(name=name, weight=weight, activations=acts))
    return layers
