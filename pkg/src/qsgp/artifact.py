"""Model files: a JSON header followed by little-endian float64 arrays.

Layout::

    b"QSGPMDL\\0" | uint64 LE header length | UTF-8 JSON header | array bytes

The header lists every array with its shape and byte offset into the
array section.  Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .chevron import VariationalState
from .data import Standardization
from .errors import DataError, InvalidState
from .features import DICTIONARY, INDUCING, RFF, BasisExpansion, Hyperparameters

MAGIC = b"QSGPMDL\0"
FORMAT_VERSION = 1

_ARRAY_FIELDS = ("mu", "log_diag", "lower", "hyper", "frozen_hyper", "inducing_inputs", "phi",
                 "log_precisions", "x_mean", "x_std")


@dataclass
class ModelArtifact:
    """Everything needed to rebuild a trained model and its data transforms."""

    kind: str
    m: int
    seed: int
    likelihood: str
    mu: np.ndarray
    log_diag: np.ndarray
    lower: np.ndarray
    hyper: np.ndarray
    frozen_hyper: Optional[np.ndarray] = None
    inducing_inputs: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    log_precisions: Optional[np.ndarray] = None
    x_mean: Optional[np.ndarray] = None
    x_std: Optional[np.ndarray] = None
    y_mean: float = 0.0
    y_std: float = 1.0
    iteration: int = 0
    config: Dict = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)

    # -- conversions ---------------------------------------------------
    @classmethod
    def from_model(cls, state: VariationalState, expansion: BasisExpansion, likelihood: str,
                   standardization: Optional[Standardization] = None, *, frozen_hyper=None,
                   iteration=0, config=None, extra=None) -> "ModelArtifact":
        std = standardization or Standardization.identity(expansion.hyper.d)
        return cls(
            kind=expansion.kind, m=expansion.m, seed=expansion.seed, likelihood=likelihood,
            mu=state.mu.copy(), log_diag=state.log_diag.copy(), lower=state.lower.copy(),
            hyper=expansion.hyper.to_vector(),
            frozen_hyper=None if frozen_hyper is None else frozen_hyper.to_vector(),
            inducing_inputs=None if expansion.inducing_inputs is None else np.array(expansion.inducing_inputs),
            phi=None if expansion.phi is None else np.array(expansion.phi),
            log_precisions=None if expansion.log_precisions is None else np.array(expansion.log_precisions),
            x_mean=np.array(std.x_mean, dtype=np.float64), x_std=np.array(std.x_std, dtype=np.float64),
            y_mean=float(std.y_mean), y_std=float(std.y_std), iteration=int(iteration),
            config=dict(config or {}), extra=dict(extra or {}))

    def expansion(self) -> BasisExpansion:
        hyper = Hyperparameters.from_vector(self.hyper)
        if self.kind == RFF:
            return BasisExpansion.rff(self.m, hyper, self.seed)
        if self.kind == INDUCING:
            return BasisExpansion.inducing(self.inducing_inputs, hyper)
        if self.kind == DICTIONARY:
            return BasisExpansion(DICTIONARY, self.m, hyper, seed=self.seed, inducing_inputs=self.inducing_inputs,
                                  phi=self.phi, log_precisions=self.log_precisions)
        raise DataError(f"unknown basis kind {self.kind!r} in model file")

    def state(self) -> VariationalState:
        st = VariationalState(self.mu.copy(), self.log_diag.copy(), self.lower.copy())
        if not np.all(np.isfinite(st.mu)) or not np.all(np.isfinite(st.lower)):
            raise InvalidState("model file holds non-finite variational parameters")
        return st

    def standardization(self) -> Standardization:
        return Standardization(self.x_mean, self.x_std, self.y_mean, self.y_std)

    # -- persistence ---------------------------------------------------
    def to_bytes(self) -> bytes:
        arrays, blobs, offset = [], [], 0
        for name in _ARRAY_FIELDS:
            a = getattr(self, name)
            if a is None:
                continue
            a = np.ascontiguousarray(a, dtype="<f8")
            arrays.append({"name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
        header = {
            "format_version": FORMAT_VERSION, "kind": self.kind, "m": self.m, "seed": self.seed,
            "likelihood": self.likelihood, "y_mean": self.y_mean, "y_std": self.y_std,
            "iteration": self.iteration, "config": self.config, "extra": self.extra, "arrays": arrays,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelArtifact":
        if buf[: len(MAGIC)] != MAGIC:
            raise DataError("not a model file")
        (hlen,) = struct.unpack("<Q", buf[len(MAGIC): len(MAGIC) + 8])
        start = len(MAGIC) + 8
        try:
            header = json.loads(buf[start: start + hlen].decode("utf-8"))
        except ValueError as exc:
            raise DataError("corrupt model header") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported model format version {header.get('format_version')}")
        body = start + hlen
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            lo = body + spec["offset"]
            if lo + 8 * count > len(buf):
                raise DataError("truncated model file")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8", count=count, offset=lo).reshape(
                spec["shape"]).astype(np.float64)
        for name in ("mu", "log_diag", "lower", "hyper"):
            if name not in arrays:
                raise DataError(f"model file lacks {name}")
        kw = {k: header[k] for k in ("kind", "m", "seed", "likelihood", "y_mean", "y_std", "iteration",
                                      "config", "extra")}
        art = cls(**kw, **arrays)
        if not np.all(np.isfinite(art.log_diag)):
            raise InvalidState("model file holds a non-positive diagonal")
        return art

    def save(self, path):
        save_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except OSError as exc:
            raise DataError(f"cannot read model file {path}: {exc}") from exc


def save_atomic(path, payload):
    """Write ``payload`` (bytes or str) to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
