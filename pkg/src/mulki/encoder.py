"""A toy dual encoder: images and class texts meet in a shared unit sphere.

The image tower is a one-hidden-layer tanh MLP over abstract feature
vectors. The text tower embeds a (class token, template token) pair by
averaging the two rows of a token table and passing the result through
its own tanh MLP. Both towers L2-normalize their outputs, so cosine
similarity is a plain dot product downstream.

Token id 0 is reserved for the shared template token; class tokens
start at 1.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatchError, UnknownTokenError
from .tensor import Tensor

TEMPLATE_TOKEN = 0

# Flat serialization order. Bump the version if this list ever changes.
PARAM_ORDER = (
    "img_w1",
    "img_b1",
    "img_w2",
    "img_b2",
    "token_table",
    "txt_w1",
    "txt_b1",
    "txt_w2",
    "txt_b2",
)
PARAM_ORDERING_VERSION = 1

CHECKPOINT_FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<I")


def _init_param(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class DualEncoder:
    """Trainable dual encoder with deterministic seeded initialization."""

    def __init__(
        self,
        seed: int,
        vocab_size: int,
        d_in: int = 32,
        d_tok: int = 16,
        hidden: int = 64,
        embed_dim: int = 16,
    ):
        if vocab_size < 1:
            raise ContractError(f"vocab_size must be positive, got {vocab_size}")
        self.seed = int(seed)
        self.vocab_size = int(vocab_size)
        self.d_in = int(d_in)
        self.d_tok = int(d_tok)
        self.hidden = int(hidden)
        self.embed_dim = int(embed_dim)

        rng = np.random.default_rng(self.seed)
        self.img_w1 = _init_param(rng, (d_in, hidden), d_in)
        self.img_b1 = _init_param(rng, (hidden,), d_in)
        self.img_w2 = _init_param(rng, (hidden, embed_dim), hidden)
        self.img_b2 = _init_param(rng, (embed_dim,), hidden)
        self.token_table = _init_param(rng, (vocab_size, d_tok), d_tok)
        self.txt_w1 = _init_param(rng, (d_tok, hidden), d_tok)
        self.txt_b1 = _init_param(rng, (hidden,), d_tok)
        self.txt_w2 = _init_param(rng, (hidden, embed_dim), hidden)
        self.txt_b2 = _init_param(rng, (embed_dim,), hidden)

    @property
    def dims(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_in": self.d_in,
            "d_tok": self.d_tok,
            "hidden": self.hidden,
            "embed_dim": self.embed_dim,
        }

    def parameters(self) -> list:
        return [getattr(self, name) for name in PARAM_ORDER]

    def encode_images(self, x) -> Tensor:
        """Map [B, d_in] inputs to unit-norm [B, embed_dim] embeddings."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeMismatchError(f"encode_images expects [B, {self.d_in}], got {x.shape}")
        if x.shape[0] == 0:
            return Tensor(np.zeros((0, self.embed_dim)))
        h = T.tanh(T.add(T.matmul(x, self.img_w1), self.img_b1))
        e = T.add(T.matmul(h, self.img_w2), self.img_b2)
        return T.l2_normalize(e, axis=1)

    def encode_texts(self, token_ids) -> Tensor:
        """Map class token ids to unit-norm [K, embed_dim] embeddings.

        Each class's input is the average of its token row and the shared
        template row of the token table.
        """
        ids = [int(t) for t in token_ids]
        for t in ids:
            if t < 0 or t >= self.vocab_size:
                raise UnknownTokenError(f"token id {t} outside vocabulary of size {self.vocab_size}")
        if not ids:
            return Tensor(np.zeros((0, self.embed_dim)))
        picker = np.zeros((len(ids), self.vocab_size))
        for row, t in enumerate(ids):
            picker[row, t] += 0.5
            picker[row, TEMPLATE_TOKEN] += 0.5
        emb = T.matmul(Tensor(picker), self.token_table)
        h = T.tanh(T.add(T.matmul(emb, self.txt_w1), self.txt_b1))
        e = T.add(T.matmul(h, self.txt_w2), self.txt_b2)
        return T.l2_normalize(e, axis=1)


class ModelSnapshot:
    """Frozen copy of a DualEncoder.

    Parameters are deep-copied, marked read-only, and never require
    gradients, so everything a snapshot encodes is detached by
    construction. Snapshots taken before further training steps are
    unaffected by them.
    """

    def __init__(self, model: DualEncoder):
        frozen = DualEncoder.__new__(DualEncoder)
        frozen.seed = model.seed
        frozen.vocab_size = model.vocab_size
        frozen.d_in = model.d_in
        frozen.d_tok = model.d_tok
        frozen.hidden = model.hidden
        frozen.embed_dim = model.embed_dim
        for name in PARAM_ORDER:
            data = np.array(getattr(model, name).data, copy=True)
            data.flags.writeable = False
            setattr(frozen, name, Tensor(data))
        self._model = frozen

    @property
    def seed(self) -> int:
        return self._model.seed

    @property
    def dims(self) -> dict:
        return self._model.dims

    def encode_images(self, x) -> Tensor:
        return self._model.encode_images(x)

    def encode_texts(self, token_ids) -> Tensor:
        return self._model.encode_texts(token_ids)

    def params_flat(self) -> np.ndarray:
        return params_flat(self._model)

    def trainable_copy(self) -> DualEncoder:
        """A fresh DualEncoder carrying this snapshot's exact parameters."""
        model = DualEncoder(self._model.seed, **{k: v for k, v in self._model.dims.items()})
        load_flat(model, self.params_flat())
        return model


def snapshot(model: DualEncoder) -> ModelSnapshot:
    return ModelSnapshot(model)


def params_flat(model: DualEncoder) -> np.ndarray:
    """All parameters as one float64 vector in PARAM_ORDER, row-major."""
    return np.concatenate([getattr(model, name).data.ravel() for name in PARAM_ORDER])


def load_flat(model: DualEncoder, vector: np.ndarray) -> None:
    """Write a flat vector back into the model's parameter storage."""
    vector = np.asarray(vector, dtype=np.float64)
    expected = sum(getattr(model, name).size for name in PARAM_ORDER)
    if vector.shape != (expected,):
        raise ShapeMismatchError(f"load_flat: expected {expected} values, got shape {vector.shape}")
    offset = 0
    for name in PARAM_ORDER:
        param = getattr(model, name)
        n = param.size
        if not param.data.flags.writeable:
            raise ContractError("load_flat: target parameters are frozen")
        param.data[...] = vector[offset : offset + n].reshape(param.shape)
        offset += n


def params_flat_tensor(model: DualEncoder) -> Tensor:
    """Differentiable flat view of the parameters, for penalties on weights."""
    return T.concat1d([T.reshape(p, (-1,)) for p in model.parameters()])


def save_checkpoint(model, path) -> None:
    """Write a checkpoint: length-prefixed JSON manifest + raw float64 payload.

    The payload is the flat parameter vector in PARAM_ORDER, little-endian.
    Round trips are bit-exact.
    """
    inner = model._model if isinstance(model, ModelSnapshot) else model
    vector = params_flat(inner)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "param_ordering_version": PARAM_ORDERING_VERSION,
        "dims": inner.dims,
        "seed": inner.seed,
        "count": int(vector.size),
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        fh.write(vector.astype("<f8").tobytes())


def load_checkpoint(path) -> DualEncoder:
    """Reconstruct a trainable DualEncoder from a checkpoint file."""
    with open(path, "rb") as fh:
        raw_len = fh.read(_HEADER_LEN.size)
        if len(raw_len) != _HEADER_LEN.size:
            raise ContractError(f"checkpoint {path} is truncated")
        (header_len,) = _HEADER_LEN.unpack(raw_len)
        header = fh.read(header_len)
        if len(header) != header_len:
            raise ContractError(f"checkpoint {path} is truncated")
        manifest = json.loads(header.decode("utf-8"))
        payload = fh.read()
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format version in {path}")
    if manifest.get("param_ordering_version") != PARAM_ORDERING_VERSION:
        raise ContractError(f"unsupported parameter ordering version in {path}")
    if len(payload) % 8 != 0:
        raise ContractError(f"checkpoint {path} is truncated")
    vector = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if vector.size != manifest["count"]:
        raise ContractError(f"checkpoint {path}: expected {manifest['count']} values, found {vector.size}")
    model = DualEncoder(manifest["seed"], **manifest["dims"])
    load_flat(model, vector)
    return model
