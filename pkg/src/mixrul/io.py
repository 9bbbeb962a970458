"""Binary model and windowed-dataset files (layout documented in docs/formats.md)."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import network as nw
from .dataset import NormalizationStats, WindowedSamples
from .distributions import Family, MixtureSpec
from .errors import DataFormatError

MODEL_MAGIC = b"MIXRULM\x00"
DATASET_MAGIC = b"MIXRULD\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path, magic: bytes, header: dict, arrays) -> None:
    head = canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(head)))
        fh.write(head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes(order="C"))


def _read(path, magic: bytes) -> tuple[dict, memoryview]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise DataFormatError(f"{path}: file too short")
    got_magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if got_magic != magic:
        raise DataFormatError(f"{path}: bad magic {got_magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from None
    return header, memoryview(data)[start + hlen:]


class _Reader:
    def __init__(self, path, body: memoryview):
        self.path = path
        self.body = body
        self.pos = 0

    def take(self, dtype: str, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        nbytes = n * np.dtype(dtype).itemsize
        if self.pos + nbytes > len(self.body):
            raise DataFormatError(f"{self.path}: truncated payload")
        a = np.frombuffer(self.body[self.pos:self.pos + nbytes], dtype=dtype).reshape(shape)
        self.pos += nbytes
        return a.astype(dtype.lstrip("<"), copy=True)

    def finish(self):
        if self.pos != len(self.body):
            raise DataFormatError(f"{self.path}: {len(self.body) - self.pos} trailing bytes")


# ---------------------------------------------------------------------------
# model


def save_model(path, model: nw.ModelParams, extra: dict | None = None) -> None:
    """Write ``model``; ``extra`` (window, normalisation stats, seed, ...) goes in the header."""
    tensors = list(model.named_tensors())
    if model.shared_sigma is not None:
        tensors.append(("shared_sigma", model.shared_sigma))
    header = {
        "kind": model.kind,
        "families": model.spec.to_list(),
        "K": model.K,
        "n_features": model.n_features,
        "lstm_units": [l.hidden for l in model.lstm_layers],
        "fc_units": [int(l.W.shape[0]) for l in model.fc_layers],
        "head_activations": list(model.head.activations),
        "output_gate": model.output_gate,
        "time_unit": model.time_unit,
        "fc_activation": model.fc_activation,
        "tensors": [[name, list(a.shape)] for name, a in tensors],
        "dtype": "<f8",
        "meta": dict(model.meta, **(extra or {})),
    }
    _write(path, MODEL_MAGIC, header, [np.asarray(a, dtype="<f8") for _, a in tensors])


def load_model(path) -> nw.ModelParams:
    header, body = _read(path, MODEL_MAGIC)
    try:
        r = _Reader(path, body)
        arrays = {name: r.take("<f8", tuple(shape)) for name, shape in header["tensors"]}
        r.finish()
        lstm = [nw.LstmLayerParams(arrays[f"lstm{i}.W"], arrays[f"lstm{i}.U"], arrays[f"lstm{i}.b"])
                for i in range(len(header["lstm_units"]))]
        fc = [nw.FcLayerParams(arrays[f"fc{i}.W"], arrays[f"fc{i}.b"])
              for i in range(len(header["fc_units"]))]
        head = nw.HeadParams(arrays["head.W"], arrays["head.b"], tuple(header["head_activations"]))
        spec = MixtureSpec(tuple(Family.parse(f) for f in header["families"]))
        return nw.ModelParams(
            header["kind"], spec, lstm, fc, head, arrays.get("shared_sigma"),
            output_gate=header["output_gate"], fc_activation=header["fc_activation"],
            time_unit=float(header.get("time_unit", 1.0)),
            meta=header.get("meta", {}),
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing field {exc}") from None
    except ValueError as exc:
        raise DataFormatError(f"{path}: inconsistent model: {exc}") from None


# ---------------------------------------------------------------------------
# windowed dataset


def save_dataset(path, samples: WindowedSamples, header: dict) -> None:
    """``header`` should carry kept sensors, cap, normalisation stats and seed."""
    full = dict(header)
    full.update({"n_samples": len(samples), "window": samples.window_width,
                 "n_features": samples.n_features})
    _write(path, DATASET_MAGIC, full, [
        samples.asset_ids.astype("<i8"),
        samples.window_index.astype("<i8"),
        samples.targets.astype("<f8"),
        samples.windows.astype("<f8"),
    ])


def load_dataset(path) -> tuple[WindowedSamples, dict]:
    header, body = _read(path, DATASET_MAGIC)
    try:
        n, T, P = header["n_samples"], header["window"], header["n_features"]
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing field {exc}") from None
    r = _Reader(path, body)
    ids = r.take("<i8", (n,))
    idx = r.take("<i8", (n,))
    targets = r.take("<f8", (n,))
    windows = r.take("<f8", (n, T, P))
    r.finish()
    return WindowedSamples(windows, targets, ids, idx), header


def stats_from_header(header: dict) -> NormalizationStats | None:
    d = header.get("normalization") or header.get("meta", {}).get("normalization")
    return None if d is None else NormalizationStats.from_dict(d)
