"""On-disk model store: one directory per model.

``params.bin``
    Little-endian float64 arrays written back to back, no header.
``manifest.json``
    Everything else: format tag, model settings, and for every array its
    name, shape and byte offset into ``params.bin``.

Files are written deterministically (sorted keys, fixed array order), so the
same model always produces byte-identical files.
"""

import hashlib
import json
import os

import numpy as np

from .dgp import DGPModel, LoadModel
from .errors import DataError
from .gpcore import KernelSpec
from .svgp import SVGPLayer

FORMAT = "cfdgp-model/1"
_LAYER_ARRAYS = ("log_lengthscales", "Z", "q_mu", "q_sqrt_lower", "q_log_diag")


def fingerprint(values):
    """sha256 of the float64 little-endian bytes of ``values`` (NaN kept as-is)."""
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()


def save_model(model, path, extra=None):
    """Write a ``LoadModel`` to directory ``path`` (created if needed)."""
    os.makedirs(path, exist_ok=True)
    arrays = []
    layers = []
    for i, layer in enumerate(model.model.layers):
        p = layer.params()
        for name in _LAYER_ARRAYS:
            arrays.append((f"{i}.{name}", p[name]))
        if layer.skip_weights is not None:
            arrays.append((f"{i}.skip_weights", layer.skip_weights))
        layers.append({
            "log_variance": float(layer.kernel.log_variance),
            "jitter": layer.kernel.jitter,
            "mean_function": layer.mean_function,
            "input_dim": layer.input_dim,
            "output_dim": layer.output_dim,
            "num_inducing": layer.num_inducing,
            "has_skip": layer.skip_weights is not None,
        })
    if model.context is not None:
        arrays.append(("context", model.context))

    offset = 0
    index = []
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name, arr in arrays:
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            index.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes

    m = model.model
    manifest = {
        "format": FORMAT,
        "layers": layers,
        "log_noise": m.log_noise,
        "y_mean": m.y_mean,
        "y_std": m.y_std,
        "trained": m.trained,
        "steps_per_day": model.steps_per_day,
        "origin": model.origin,
        "span": model.span,
        "lags": model.lags,
        "lag_mean": model.lag_mean,
        "lag_std": model.lag_std,
        "trend": model.trend,
        "context_start": model.context_start,
        "arrays": index,
        "extra": extra or {},
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Read a model directory written by ``save_model``."""
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            man = json.load(fh)
        raw = open(os.path.join(path, "params.bin"), "rb").read()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read model at {path}: {exc}") from exc
    if man.get("format") != FORMAT:
        raise DataError(f"{path}: unsupported model format {man.get('format')!r}")
    arrays = {}
    for entry in man["arrays"]:
        n = int(np.prod(entry["shape"], dtype=int))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(float)

    layers = []
    for i, info in enumerate(man["layers"]):
        kernel = KernelSpec(info["log_variance"], arrays[f"{i}.log_lengthscales"], info["jitter"])
        layers.append(SVGPLayer(
            kernel=kernel,
            Z=arrays[f"{i}.Z"],
            q_mu=arrays[f"{i}.q_mu"],
            q_sqrt_lower=arrays[f"{i}.q_sqrt_lower"],
            q_log_diag=arrays[f"{i}.q_log_diag"],
            mean_function=info["mean_function"],
            skip_weights=arrays.get(f"{i}.skip_weights"),
        ))
    dgp = DGPModel(layers, man["log_noise"], man["y_mean"], man["y_std"], man["trained"])
    return LoadModel(dgp, man["steps_per_day"], man["origin"], man["span"], man["lags"],
                     man["lag_mean"], man["lag_std"], arrays.get("context"), man["context_start"],
                     man["trend"])


def read_manifest(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)
