"""File formats, dataset loading, synthetic data, and checkpoints.

EMB1 embedding file (little-endian throughout):
    4 bytes  magic  "EMB1"
    u32      version (1)
    u32      d      columns
    u64      n      rows
    n*d f32  values, row-major

Pairs file: UTF-8 TSV with a header line, either
    text_row<TAB>image_row
or the extended form with per-pair metadata
    text_row<TAB>image_row<TAB>level<TAB>tokens<TAB>group

AVLM checkpoint: magic "AVLM", u32 version, family/variant codes, dims,
batch-norm momentum and kappa floor, then per adapter every tensor in the
adapter module's documented order followed by the running statistics and
the scalar log_tau / siglip_bias.  Checkpoints store float64 so that
load(save(x)) is bitwise x; embedding files store float32 (the precision
real encoder exports come in).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, AdapterParams, Model, N_LAYERS
from .directional import VmfParams, sample_vmf

EMB_MAGIC = b"EMB1"
CKPT_MAGIC = b"AVLM"

_FAMILY_CODES = {"vmf": 0, "ps": 1, "gauss": 2, "deterministic": 3}
_VARIANT_CODES = {"asym_text": 0, "asym_image": 1, "symmetric": 2}
_FAMILY_BY_CODE = {v: k for k, v in _FAMILY_CODES.items()}
_VARIANT_BY_CODE = {v: k for k, v in _VARIANT_CODES.items()}


class FileFormatError(Exception):
    """A file failed structural validation (bad magic, version, payload)."""


def write_embeddings(path, matrix: np.ndarray) -> None:
    """Write an (N, d) matrix as an EMB1 file (values stored as f32)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("embeddings contain non-finite values")
    n, d = m.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQ", EMB_MAGIC, 1, d, n))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read an EMB1 file into a float64 (N, d) matrix (not normalized)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != EMB_MAGIC:
        raise FileFormatError(f"{path}: not an EMB1 file")
    if len(blob) < 20:
        raise FileFormatError(f"{path}: payload size mismatch (truncated header)")
    version, d, n = struct.unpack("<IIQ", blob[4:20])
    if version != 1:
        raise FileFormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * n * d
    if len(blob) != expected:
        raise FileFormatError(
            f"{path}: payload size mismatch (expected {expected} bytes, found {len(blob)})"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=20)
    return values.reshape(n, d).astype(np.float64)


@dataclass
class PairMeta:
    level: int
    tokens: int
    group: str


def read_pairs(path):
    """Parse a pairs TSV; returns (pairs (P, 2) int array, metadata or None)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FileFormatError(f"{path}: empty pairs file")
    header = lines[0].split("\t")
    if header[:2] != ["text_row", "image_row"]:
        raise FileFormatError(f"{path}: line 1: expected header starting with 'text_row\\timage_row'")
    with_meta = len(header) == 5 and header[2:] == ["level", "tokens", "group"]
    if not with_meta and len(header) != 2:
        raise FileFormatError(
            f"{path}: line 1: header must be 2 columns or the 5-column metadata form"
        )
    pairs = []
    meta = [] if with_meta else None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != len(header):
            raise FileFormatError(f"{path}: line {lineno}: expected {len(header)} columns, got {len(cols)}")
        try:
            t, i = int(cols[0]), int(cols[1])
        except ValueError as exc:
            raise FileFormatError(f"{path}: line {lineno}: non-integer row index") from exc
        pairs.append((t, i))
        if with_meta:
            try:
                meta.append(PairMeta(level=int(cols[2]), tokens=int(cols[3]), group=cols[4]))
            except ValueError as exc:
                raise FileFormatError(f"{path}: line {lineno}: malformed metadata") from exc
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2), meta


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise ValueError(f"cannot unit-normalize zero embedding row {int(bad[0])}")
    return matrix / norms[:, None]


@dataclass
class PairedEmbeddingDataset:
    """Aligned text/image embedding matrices with a pair index.

    Rows are unit-normalized on load unless ``normalize=False`` (raw inputs
    for the Gaussian ablation).
    """

    text_embs: np.ndarray
    image_embs: np.ndarray
    pairs: np.ndarray
    meta: list | None = None

    def __post_init__(self):
        if self.text_embs.shape[1] != self.image_embs.shape[1]:
            raise ValueError(
                f"text embedding dimension {self.text_embs.shape[1]} does not match "
                f"image embedding dimension {self.image_embs.shape[1]}"
            )
        if self.pairs.size and (
            self.pairs[:, 0].min() < 0 or self.pairs[:, 0].max() >= self.text_embs.shape[0]
            or self.pairs[:, 1].min() < 0 or self.pairs[:, 1].max() >= self.image_embs.shape[0]
        ):
            raise ValueError("pair index out of range")
        if self.meta is not None and len(self.meta) != self.pairs.shape[0]:
            raise ValueError(f"{len(self.meta)} metadata records for {self.pairs.shape[0]} pairs")

    @property
    def dim(self) -> int:
        return self.text_embs.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    @classmethod
    def load(cls, text_path, image_path, pairs_path, normalize: bool = True):
        texts = read_embeddings(text_path)
        images = read_embeddings(image_path)
        if normalize:
            texts = normalize_rows(texts)
            images = normalize_rows(images)
        pairs, meta = read_pairs(pairs_path)
        return cls(text_embs=texts, image_embs=images, pairs=pairs, meta=meta)


@dataclass
class SynthConfig:
    """Synthetic benchmark generator settings.

    Each object is a uniform prototype on S^{d-1}; its image is a tight
    vMF draw around the prototype and each caption is a vMF draw whose
    concentration depends on the caption's abstraction level.
    ``kappa_text_by_level`` is indexed ascending by level: level 0 (the
    most general, most uncertain captions) first, so the default
    (8, 16, 32, 64) makes concentration strictly decreasing as captions
    get more abstract.
    """

    n_objects: int
    captions_per_object: int = 4
    levels: int = 4
    dim: int = 32
    kappa_image: float = 200.0
    kappa_text_by_level: tuple = (8.0, 16.0, 32.0, 64.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 1 or self.captions_per_object < 1:
            raise ValueError("need at least one object and one caption per object")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.kappa_image <= 0:
            raise ValueError("kappa_image must be positive")
        ks = tuple(float(k) for k in self.kappa_text_by_level)
        if len(ks) != self.levels:
            raise ValueError(f"kappa_text_by_level needs {self.levels} entries, got {len(ks)}")
        if any(k <= 0 for k in ks) or any(a >= b for a, b in zip(ks, ks[1:])):
            raise ValueError(
                "kappa_text_by_level must be positive and strictly increasing with level "
                "(strictly decreasing with abstraction)"
            )
        self.kappa_text_by_level = ks


def synth_arrays(config: SynthConfig):
    """Draw the synthetic prototypes, images, texts and pair rows.

    Caption j of an object has level j mod levels, and a token count that
    grows with the level (detailed captions are longer).
    """
    rng = np.random.default_rng(config.seed)
    protos = rng.standard_normal((config.n_objects, config.dim))
    protos /= np.linalg.norm(protos, axis=1)[:, None]

    images = np.empty_like(protos)
    for o in range(config.n_objects):
        images[o] = sample_vmf(VmfParams(protos[o], config.kappa_image), rng)

    n_texts = config.n_objects * config.captions_per_object
    texts = np.empty((n_texts, config.dim))
    rows = []
    for o in range(config.n_objects):
        for j in range(config.captions_per_object):
            level = j % config.levels
            t = o * config.captions_per_object + j
            texts[t] = sample_vmf(VmfParams(protos[o], config.kappa_text_by_level[level]), rng)
            tokens = 4 + 6 * level + int(rng.integers(0, 4))
            rows.append((t, o, level, tokens, f"L{level}"))
    return protos, images, texts, rows


def gen_synthetic(config: SynthConfig, out_dir) -> dict:
    """Generate texts.emb1 / images.emb1 / pairs.tsv / manifest.json.

    Deterministic per seed: fixed seeds produce byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, images, texts, rows = synth_arrays(config)
    n_texts = texts.shape[0]

    paths = {
        "texts": out / "texts.emb1",
        "images": out / "images.emb1",
        "pairs": out / "pairs.tsv",
        "manifest": out / "manifest.json",
    }
    write_embeddings(paths["texts"], texts)
    write_embeddings(paths["images"], images)
    with open(paths["pairs"], "w", encoding="utf-8") as fh:
        fh.write("text_row\timage_row\tlevel\ttokens\tgroup\n")
        for t, i, level, tokens, group in rows:
            fh.write(f"{t}\t{i}\t{level}\t{tokens}\t{group}\n")
    manifest = {
        "config": asdict(config),
        "n_texts": n_texts,
        "n_images": config.n_objects,
        "files": {k: v.name for k, v in paths.items() if k != "manifest"},
    }
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {k: str(v) for k, v in paths.items()}


def _write_tensor(fh, arr: np.ndarray) -> None:
    a = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FileFormatError(f"{self.path}: payload size mismatch (truncated)")
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self, expected_shape, name: str) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        if ndim != len(expected_shape):
            raise FileFormatError(
                f"{self.path}: shape mismatch for {name}: {ndim} dims, expected {len(expected_shape)}"
            )
        shape = self.unpack(f"<{ndim}I")
        if tuple(shape) != tuple(expected_shape):
            raise FileFormatError(
                f"{self.path}: shape mismatch for {name}: {shape}, expected {tuple(expected_shape)}"
            )
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8")
        return data.reshape(shape).astype(np.float64)


def _adapter_tensor_specs(config: AdapterConfig):
    dims = [config.d_in, config.d_hidden, config.d_hidden, config.d_out]
    specs = []
    for i in range(N_LAYERS):
        specs.append((f"layer{i}.weight", (dims[i], dims[i + 1])))
        specs.append((f"layer{i}.bias", (dims[i + 1],)))
        specs.append((f"layer{i}.bn_scale", (dims[i + 1],)))
        specs.append((f"layer{i}.bn_shift", (dims[i + 1],)))
    for i in range(N_LAYERS):
        specs.append((f"layer{i}.bn_running_mean", (dims[i + 1],)))
    for i in range(N_LAYERS):
        specs.append((f"layer{i}.bn_running_var", (dims[i + 1],)))
    return specs


def save_checkpoint(path, model: Model) -> None:
    """Serialize a model to the AVLM format (bitwise round-trip)."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CKPT_MAGIC, 1))
        fh.write(struct.pack("<BB", _FAMILY_CODES[cfg.dist_family], _VARIANT_CODES[cfg.variant]))
        fh.write(struct.pack("<III", cfg.d_in, cfg.d_hidden, cfg.d_out))
        fh.write(struct.pack("<dd", cfg.bn_momentum, cfg.kappa_floor))
        adapters = model.adapters()
        fh.write(struct.pack("<B", len(adapters)))
        for role, params in adapters:
            fh.write(struct.pack("<B", 0 if role == "text" else 1))
            for i in range(N_LAYERS):
                _write_tensor(fh, params.weights[i])
                _write_tensor(fh, params.biases[i])
                _write_tensor(fh, params.bn_scale[i])
                _write_tensor(fh, params.bn_shift[i])
            for i in range(N_LAYERS):
                _write_tensor(fh, params.bn_running_mean[i])
            for i in range(N_LAYERS):
                _write_tensor(fh, params.bn_running_var[i])
            fh.write(struct.pack("<dd", params.log_tau, params.siglip_bias))


def load_checkpoint(path) -> Model:
    """Read an AVLM checkpoint back into a Model."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise FileFormatError(f"{path}: not an AVLM file")
    r = _Reader(blob, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != 1:
        raise FileFormatError(f"{path}: unsupported version {version}")
    family_code, variant_code = r.unpack("<BB")
    if family_code not in _FAMILY_BY_CODE or variant_code not in _VARIANT_BY_CODE:
        raise FileFormatError(f"{path}: unknown family/variant codes ({family_code}, {variant_code})")
    d_in, d_hidden, d_out = r.unpack("<III")
    bn_momentum, kappa_floor = r.unpack("<dd")
    try:
        config = AdapterConfig(
            d_in=d_in, d_hidden=d_hidden, d_out=d_out,
            dist_family=_FAMILY_BY_CODE[family_code],
            variant=_VARIANT_BY_CODE[variant_code],
            bn_momentum=bn_momentum, kappa_floor=kappa_floor,
        )
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid configuration: {exc}") from exc

    (n_adapters,) = r.unpack("<B")
    expected_roles = {"asym_text": [0], "asym_image": [1], "symmetric": [0, 1]}[config.variant]
    if n_adapters != len(expected_roles):
        raise FileFormatError(
            f"{path}: {n_adapters} adapters stored, variant {config.variant!r} expects {len(expected_roles)}"
        )
    model = Model(config)
    specs = _adapter_tensor_specs(config)
    for expected_role in expected_roles:
        (role_code,) = r.unpack("<B")
        if role_code != expected_role:
            raise FileFormatError(f"{path}: unexpected adapter role code {role_code}")
        tensors = {name: r.tensor(shape, name) for name, shape in specs}
        log_tau, siglip_bias = r.unpack("<dd")
        params = AdapterParams(
            config=config,
            weights=[tensors[f"layer{i}.weight"] for i in range(N_LAYERS)],
            biases=[tensors[f"layer{i}.bias"] for i in range(N_LAYERS)],
            bn_scale=[tensors[f"layer{i}.bn_scale"] for i in range(N_LAYERS)],
            bn_shift=[tensors[f"layer{i}.bn_shift"] for i in range(N_LAYERS)],
            bn_running_mean=[tensors[f"layer{i}.bn_running_mean"] for i in range(N_LAYERS)],
            bn_running_var=[tensors[f"layer{i}.bn_running_var"] for i in range(N_LAYERS)],
            log_tau=log_tau,
            siglip_bias=siglip_bias,
        )
        if role_code == 0:
            model.text_adapter = params
        else:
            model.image_adapter = params
    if r.off != len(blob):
        raise FileFormatError(f"{path}: payload size mismatch ({len(blob) - r.off} trailing bytes)")
    return model
