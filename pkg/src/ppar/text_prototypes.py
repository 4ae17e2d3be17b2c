"""Text prototypes: class-name (OTP) and visual-text (VTP) embeddings.

A prototype set is a frozen matrix of unit-norm text embeddings, one row per
class. Rows never receive gradients; training code converts them to tensors
on demand and treats them as constants.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import (
    ChecksumError,
    ProviderError,
    SchemaVersionError,
    TruncatedFileError,
    ValidationError,
)

SCHEMA_VERSION = 1
OTP = "OTP"
VTP = "VTP"
FACTOR_COLOR = "color"
FACTOR_TEXTURE = "texture"
_HEX_RE = re.compile(r"^#[0-9A-F]{6}$")
NORM_TOL = 1e-5


@dataclass(frozen=True)
class ClassCatalog:
    entries: tuple[tuple[int, str], ...]
    ignore_index: int = 255

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [i for i, _ in entries]
        if ids != list(range(len(entries))):
            raise ValidationError(f"class ids must be 0..N-1 without gaps or duplicates, got {ids}")
        for i, name in entries:
            if not name.strip():
                raise ValidationError(f"class {i} has an empty name")
        if 0 <= self.ignore_index < len(entries):
            raise ValidationError(f"ignore_index {self.ignore_index} collides with a class id")

    @classmethod
    def from_names(cls, names: Sequence[str], ignore_index: int = 255) -> "ClassCatalog":
        return cls(tuple(enumerate(names)), ignore_index)

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [n for _, n in self.entries]

    def name(self, class_id: int) -> str:
        return self.entries[class_id][1]

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": i, "name": n} for i, n in self.entries],
            "ignore_index": self.ignore_index,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClassCatalog":
        try:
            classes = sorted(data["classes"], key=lambda c: c["id"])
            return cls(tuple((c["id"], c["name"]) for c in classes), int(data.get("ignore_index", 255)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed catalog: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ClassCatalog":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@runtime_checkable
class TextEmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return a ``len(texts) x D`` float matrix. Rows need not be normalized."""
        ...


class TrigramStubProvider:
    """Offline provider: seeded random projection of character-trigram counts.

    Deterministic for a given (dim, seed, buckets); strings sharing many
    trigrams land close together, which is all the tests need.
    """

    def __init__(self, dim: int = 512, seed: int = 0, buckets: int = 2048):
        if dim < 1 or buckets < 1:
            raise ValidationError("dim and buckets must be positive")
        self.dim = dim
        self.seed = seed
        self.buckets = buckets
        self.provider_id = f"stub-trigram-v1:dim={dim}:seed={seed}:buckets={buckets}"
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((buckets, dim)) / np.sqrt(dim)

    def _bucket(self, gram: str) -> int:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.buckets

    def _counts(self, text: str) -> np.ndarray:
        padded = f"^^{text}$$"
        counts = np.zeros(self.buckets)
        for k in range(len(padded) - 2):
            counts[self._bucket(padded[k : k + 3])] += 1.0
        return counts

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        counts = np.stack([self._counts(t) for t in texts])
        return counts @ self._proj


class SubprocessProvider:
    """Adapter for an external encoder process.

    The command reads ``{"texts": [...]}`` as JSON on stdin and writes
    ``{"vectors": [[...], ...]}`` on stdout.
    """

    def __init__(self, command: Sequence[str], provider_id: str, timeout: float = 120.0):
        self.command = list(command)
        self.provider_id = provider_id
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        payload = json.dumps({"texts": list(texts)})
        try:
            proc = subprocess.run(
                self.command, input=payload, capture_output=True, text=True, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProviderError(f"provider command failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise ProviderError(f"provider exited with {proc.returncode}: {proc.stderr.strip()[:500]}")
        try:
            vectors = np.asarray(json.loads(proc.stdout)["vectors"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"provider returned malformed output: {exc}") from exc
        return vectors


WEIGHTS_ENV = "PPAR_TEXT_ENCODER"


class HFClipTextProvider:
    """CLIP text tower loaded from a local Hugging Face checkpoint directory.

    The directory comes from ``$PPAR_TEXT_ENCODER`` unless given explicitly.
    The provider id embeds a digest of the weight files.
    """

    def __init__(self, weights_dir: str | os.PathLike | None = None, device: str = "cpu"):
        weights_dir = weights_dir or os.environ.get(WEIGHTS_ENV)
        if not weights_dir or not Path(weights_dir).is_dir():
            raise ProviderError(
                f"CLIP text encoder weights not found (set ${WEIGHTS_ENV} to a local checkpoint dir)",
                retryable=False,
            )
        try:
            import torch
            from transformers import CLIPTextModelWithProjection, CLIPTokenizer
        except ImportError as exc:
            raise ProviderError(f"transformers is required for the CLIP provider: {exc}", retryable=False) from exc
        self._torch = torch
        self.device = device
        self.tokenizer = CLIPTokenizer.from_pretrained(weights_dir)
        self.model = CLIPTextModelWithProjection.from_pretrained(weights_dir).to(device).eval()
        self.provider_id = f"hf-clip:{_dir_digest(Path(weights_dir))}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        torch = self._torch
        tokens = self.tokenizer(list(texts), padding=True, return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self.model(**tokens).text_embeds
        return out.double().cpu().numpy()


def _dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()[:16]


def make_provider(spec: dict) -> TextEmbeddingProvider:
    name = spec.get("name", "stub")
    if name == "stub":
        return TrigramStubProvider(dim=spec.get("dim", 512), seed=spec.get("seed", 0), buckets=spec.get("buckets", 2048))
    if name == "subprocess":
        return SubprocessProvider(spec["command"], spec.get("provider_id", "subprocess:" + " ".join(spec["command"])))
    if name == "clip":
        return HFClipTextProvider(spec.get("weights_dir"), spec.get("device", "cpu"))
    raise ValidationError(f"unknown provider {name!r}")


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    kind: str
    class_ids: tuple[int, ...]
    names: tuple[str, ...]
    texts: tuple[str, ...]
    vectors: np.ndarray
    provider_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (OTP, VTP):
            raise ValidationError(f"kind must be OTP or VTP, got {self.kind!r}")
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.class_ids):
            raise ValidationError("vectors must be an N x D matrix with one row per class")
        if not (len(self.class_ids) == len(self.names) == len(self.texts)):
            raise ValidationError("class_ids, names and texts must have equal length")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValidationError("prototype vectors must have unit norm")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.class_ids)

    def __eq__(self, other):
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.class_ids == other.class_ids
            and self.names == other.names
            and self.texts == other.texts
            and self.provider_id == other.provider_id
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    __hash__ = None

    def as_tensor(self, dtype=None, device=None):
        import torch

        return torch.as_tensor(np.array(self.vectors), dtype=dtype or torch.float32, device=device)


def compose_visual_text(class_name: str, color: str | None = None, texture: int | None = None) -> str:
    if not class_name:
        raise ValidationError("class name is required")
    text = class_name
    if color is not None:
        if not isinstance(color, str) or not _HEX_RE.match(color):
            raise ValidationError(f"color must be an uppercase #RRGGBB string, got {color!r}")
        text += f" with color {color}"
    if texture is not None:
        if isinstance(texture, bool) or not isinstance(texture, (int, np.integer)) or not 0 <= texture <= 255:
            raise ValidationError(f"texture must be an LBP code in 0..255, got {texture!r}")
        text += f" with local texture {int(texture)}"
    return text


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ValidationError("provider returned a zero or non-finite vector")
    return v / n


def _embed_rows(
    texts: list[str], catalog: ClassCatalog, provider: TextEmbeddingProvider, workers: int = 1
) -> np.ndarray:
    def one(class_id: int) -> np.ndarray:
        try:
            out = np.asarray(provider.embed([texts[class_id]]), dtype=np.float64)
        except ProviderError as exc:
            raise ProviderError(
                f"provider failed for class {class_id} ({catalog.name(class_id)!r}): {exc}",
                class_id=class_id,
                class_name=catalog.name(class_id),
                retryable=exc.retryable,
            ) from exc
        except Exception as exc:
            raise ProviderError(
                f"provider failed for class {class_id} ({catalog.name(class_id)!r}): {exc}",
                class_id=class_id,
                class_name=catalog.name(class_id),
            ) from exc
        if out.ndim != 2 or out.shape[0] != 1:
            raise ProviderError(
                f"provider returned shape {out.shape} for one string",
                class_id=class_id,
                class_name=catalog.name(class_id),
                retryable=False,
            )
        return _normalize(out[0])

    ids = range(catalog.num_classes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, ids))
    else:
        rows = [one(i) for i in ids]
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise ProviderError(f"provider returned inconsistent dims {sorted(dims)}", retryable=False)
    return np.stack(rows)


def build_otp(
    catalog: ClassCatalog, provider: TextEmbeddingProvider, template: str | None = None, workers: int = 1
) -> PrototypeSet:
    """Embed each raw class name. ``template`` (e.g. ``"a photo of {}"``) is off by default."""
    texts = [template.format(n) if template else n for n in catalog.names]
    vectors = _embed_rows(texts, catalog, provider, workers)
    return PrototypeSet(OTP, tuple(range(catalog.num_classes)), tuple(catalog.names), tuple(texts), vectors, provider.provider_id)


def visual_texts(catalog: ClassCatalog, factors, enabled: Iterable[str]) -> list[str]:
    enabled = set(enabled)
    unknown = enabled - {FACTOR_COLOR, FACTOR_TEXTURE}
    if unknown:
        raise ValidationError(f"unknown visual factors {sorted(unknown)}")
    texts = []
    for class_id, name in catalog.entries:
        color = texture = None
        if enabled:
            row = factors.get(class_id) if factors is not None else None
            if FACTOR_COLOR in enabled:
                color = getattr(row, "color_hex", None)
                if color is None:
                    raise ValidationError(f"factor table has no color for class {class_id} ({name!r})")
            if FACTOR_TEXTURE in enabled:
                texture = getattr(row, "texture_code", None)
                if texture is None:
                    raise ValidationError(f"factor table has no texture for class {class_id} ({name!r})")
        texts.append(compose_visual_text(name, color, texture))
    return texts


def build_vtp(
    catalog: ClassCatalog, factors, enabled: Iterable[str], provider: TextEmbeddingProvider, workers: int = 1
) -> PrototypeSet:
    enabled = sorted(set(enabled))
    texts = visual_texts(catalog, factors, enabled)
    vectors = _embed_rows(texts, catalog, provider, workers)
    return PrototypeSet(
        VTP,
        tuple(range(catalog.num_classes)),
        tuple(catalog.names),
        tuple(texts),
        vectors,
        provider.provider_id,
        meta={"enabled_factors": enabled},
    )


def _rows_payload(pset: PrototypeSet) -> list[dict]:
    return [
        {"class_id": cid, "name": name, "text": text, "vector": [float(x) for x in vec]}
        for cid, name, text, vec in zip(pset.class_ids, pset.names, pset.texts, pset.vectors)
    ]


def _rows_checksum(rows: list[dict]) -> str:
    blob = json.dumps(rows, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_prototypes(pset: PrototypeSet, path, extra: dict | None = None) -> None:
    rows = _rows_payload(pset)
    doc = {
        "schema": SCHEMA_VERSION,
        "kind": pset.kind,
        "provider_id": pset.provider_id,
        "dim": pset.dim,
        "meta": pset.meta,
        "rows": rows,
        "checksum": _rows_checksum(rows),
    }
    if extra:
        doc.update(extra)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False))
    os.replace(tmp, path)


def read_prototype_doc(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(f"{path}: unreadable prototype file ({exc})") from exc
    if not isinstance(doc, dict):
        raise TruncatedFileError(f"{path}: prototype file is not a JSON object")
    if doc.get("schema") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: schema {doc.get('schema')!r}, expected {SCHEMA_VERSION}")
    return doc


def load_prototypes(path) -> PrototypeSet:
    doc = read_prototype_doc(path)
    try:
        rows = doc["rows"]
        checksum = doc["checksum"]
        kind, provider_id, dim = doc["kind"], doc["provider_id"], doc["dim"]
        if _rows_checksum(rows) != checksum:
            raise ChecksumError(f"{path}: checksum mismatch")
        vectors = np.array([r["vector"] for r in rows], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise TruncatedFileError(f"{path}: vector dims do not match declared dim {dim}")
        return PrototypeSet(
            kind,
            tuple(int(r["class_id"]) for r in rows),
            tuple(r["name"] for r in rows),
            tuple(r["text"] for r in rows),
            vectors,
            provider_id,
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError) as exc:
        raise TruncatedFileError(f"{path}: missing field {exc}") from exc
