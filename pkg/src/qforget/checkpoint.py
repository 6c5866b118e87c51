"""Checkpoint container: a JSON manifest plus a little-endian float64 blob.

A checkpoint stem `foo` is stored as `foo.json` (config, provenance, and one
entry per parameter with name/shape/offset/length, plus a CRC-32 of the blob)
and `foo.bin` (parameters concatenated in manifest order). Round-trips are
bit-exact. The same two-file scheme stores adapter tensors.
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, SchemaError


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    context_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "context_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_len < 2:
            raise ConfigError("context_len must be at least 2")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_ff": self.d_ff, "context_len": self.context_len, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Linear-layer roles addressable for quantization and adapter targeting.
ATTN_ROLES = ("attn_q", "attn_k", "attn_v", "attn_o")
MLP_ROLES = ("mlp_up", "mlp_down")
LINEAR_ROLES = ATTN_ROLES + MLP_ROLES + ("lm_head",)


def param_schema(cfg: ModelConfig) -> dict:
    """Ordered parameter name -> shape map for a model config."""
    d, ff, v, ctx = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.context_len
    schema = {"tok_emb": (v, d), "pos_emb": (ctx, d)}
    for i in range(cfg.n_layers):
        b = f"block{i}."
        schema[b + "ln1.g"] = (d,)
        schema[b + "ln1.b"] = (d,)
        schema[b + "attn_q"] = (d, d)
        schema[b + "attn_k"] = (d, d)
        schema[b + "attn_v"] = (d, d)
        schema[b + "attn_o"] = (d, d)
        schema[b + "ln2.g"] = (d,)
        schema[b + "ln2.b"] = (d,)
        schema[b + "mlp_up"] = (ff, d)
        schema[b + "mlp_down"] = (d, ff)
    schema["ln_f.g"] = (d,)
    schema["ln_f.b"] = (d,)
    schema["lm_head"] = (v, d)
    return schema


def linear_param_names(cfg: ModelConfig) -> list:
    """Names of the weight matrices eligible for quantization."""
    names = []
    for i in range(cfg.n_layers):
        names += [f"block{i}.{r}" for r in ATTN_ROLES + MLP_ROLES]
    names.append("lm_head")
    return names


@dataclass
class Checkpoint:
    params: dict  # name -> float64 ndarray, in schema order
    config: ModelConfig
    provenance: str = ""

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.config, self.provenance)

    def validate(self) -> None:
        schema = param_schema(self.config)
        if list(self.params.keys()) != list(schema.keys()):
            raise SchemaError("parameter names do not match the config schema")
        for name, shape in schema.items():
            if self.params[name].shape != shape:
                raise SchemaError(f"parameter {name}: shape {self.params[name].shape}, expected {shape}")


def _write_container(stem: Path, tensors: dict, meta: dict) -> None:
    # Integer tensors (quantization bin indices) are stored as signed bytes,
    # everything else as little-endian float64.
    stem = Path(stem)
    blob = bytearray()
    entries = []
    for name, arr in tensors.items():
        dtype = "<i1" if np.issubdtype(np.asarray(arr).dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({
            "name": name, "shape": list(arr.shape), "dtype": dtype,
            "offset": len(blob), "length": len(raw),
        })
        blob.extend(raw)
    manifest = dict(meta)
    manifest["params"] = entries
    manifest["crc32"] = zlib.crc32(bytes(blob))
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(bytes(blob))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _read_container(stem: Path) -> tuple:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    if zlib.crc32(blob) != manifest["crc32"]:
        raise ChecksumError(f"{stem}: blob CRC mismatch (corrupt or truncated file)")
    tensors = {}
    for entry in manifest["params"]:
        ofs, length = entry["offset"], entry["length"]
        if ofs + length > len(blob):
            raise ChecksumError(f"{stem}: blob shorter than manifest entry {entry['name']}")
        dtype = np.dtype(entry.get("dtype", "<f8"))
        flat = np.frombuffer(blob, dtype=dtype, count=length // dtype.itemsize, offset=ofs)
        out_dtype = np.int64 if np.issubdtype(dtype, np.integer) else np.float64
        tensors[entry["name"]] = flat.reshape(entry["shape"]).astype(out_dtype)
    return tensors, manifest


def save_checkpoint(ck: Checkpoint, stem) -> None:
    """Write `stem`.json + `stem`.bin; load_checkpoint(stem) is bit-identical."""
    ck.validate()
    _write_container(Path(stem), ck.params, {
        "kind": "checkpoint",
        "config": ck.config.to_dict(),
        "provenance": ck.provenance,
    })


def load_checkpoint(stem) -> Checkpoint:
    tensors, manifest = _read_container(Path(stem))
    cfg = ModelConfig.from_dict(manifest["config"])
    schema = param_schema(cfg)
    if list(tensors.keys()) != list(schema.keys()):
        raise SchemaError(f"{stem}: parameter list does not match config schema")
    for name, shape in schema.items():
        if tensors[name].shape != tuple(shape):
            raise SchemaError(f"{stem}: parameter {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    ck = Checkpoint(tensors, cfg, manifest.get("provenance", ""))
    return ck
