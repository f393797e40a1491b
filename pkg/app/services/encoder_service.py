"""Toy per-modality encoders, contrastive training and the alignment metric."""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core import grad
from app.core.container import dump_container, load_container, read_container, write_container
from app.core.exceptions import (
    EmptyInputError,
    InvalidConfigError,
    ShapeMismatchError,
    UnsupportedModalityError,
)
from app.core.grad import Tape, Tensor
from app.schemas.encoder import CHECKPOINT_FORMAT_VERSION, EncoderCheckpoint, Layer, TrainingMetadata
from app.schemas.sample import AUDIO_LENGTH, IMAGE_SHAPE, VOCAB_SIZE, Modality, PairedDataset, Sample

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ILLUCKPT"

DEFAULT_EMBED_DIM = 32
DEFAULT_HIDDEN_DIM = 64
DEFAULT_TOKEN_DIM = 16
DEFAULT_TEMPERATURE = 0.07
DEFAULT_LEARNING_RATE = 0.1
DEFAULT_EPOCHS = 200
DEFAULT_BATCH_SIZE = 64

DEFAULT_INPUT_DIMS = {
    Modality.IMAGE: int(np.prod(IMAGE_SHAPE)),
    Modality.AUDIO: AUDIO_LENGTH,
    Modality.TEXT: VOCAB_SIZE,
}

_ACTIVATIONS = {"none": lambda t: t, "tanh": grad.tanh, "relu": grad.relu}

Params = List[Tuple[Tensor, Optional[Tensor], str]]


# =============================================================================
# Initialization
# =============================================================================

def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int, kind: str = "dense",
                   activation: str = "none", bias: bool = True) -> Layer:
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out) if bias else None
    return Layer(kind=kind, weight=weight, bias=b, activation=activation)


def init_checkpoint(input_dims: Optional[Dict[Modality, int]] = None, embed_dim: int = DEFAULT_EMBED_DIM,
                    hidden_dim: int = DEFAULT_HIDDEN_DIM, token_dim: int = DEFAULT_TOKEN_DIM,
                    seed: int = 0, normalize_output: bool = True) -> EncoderCheckpoint:
    """
    Seeded random encoder. IMAGE/AUDIO: affine -> tanh -> affine;
    TEXT: token embedding (mean over the sequence) -> affine.
    Weights are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    """
    input_dims = dict(DEFAULT_INPUT_DIMS if input_dims is None else input_dims)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    layers = {}
    for modality in (Modality.IMAGE, Modality.AUDIO, Modality.TEXT):
        if modality not in input_dims:
            continue
        fan_in = input_dims[modality]
        if modality == Modality.TEXT:
            layers[modality] = [
                _uniform_layer(rng, fan_in, token_dim, kind="embedding", bias=False),
                _uniform_layer(rng, token_dim, embed_dim),
            ]
        else:
            layers[modality] = [
                _uniform_layer(rng, fan_in, hidden_dim, activation="tanh"),
                _uniform_layer(rng, hidden_dim, embed_dim),
            ]
    return EncoderCheckpoint(embed_dim=embed_dim, layers=layers, normalize_output=normalize_output,
                             metadata=TrainingMetadata(seed=seed))


# =============================================================================
# Forward pass
# =============================================================================

def bag_of_tokens(sequences: Sequence[np.ndarray], vocab_size: int = VOCAB_SIZE) -> np.ndarray:
    """Row b holds 1/len at every token of sequence b, so bag @ E is the mean embedding."""
    bag = np.zeros((len(sequences), vocab_size))
    for row, seq in enumerate(sequences):
        ids = np.asarray(seq, dtype=np.int64)
        np.add.at(bag[row], ids, 1.0 / ids.size)
    return bag


def _layer_params(layers: Sequence[Layer]) -> Params:
    return [
        (Tensor.constant(layer.weight), None if layer.bias is None else Tensor.constant(layer.bias), layer.activation)
        for layer in layers
    ]


def _run_stack(params: Params, x: Tensor) -> Tensor:
    h = x
    for weight, bias, activation in params:
        h = h @ weight
        if bias is not None:
            # row-wise bias as ones(B, 1) @ b(1, out)
            h = h + Tensor.constant(np.ones((h.shape[0], 1))) @ bias.reshape(1, bias.shape[0])
        h = _ACTIVATIONS[activation](h)
    return h


def _stack(ckpt: EncoderCheckpoint, modality: Modality) -> List[Layer]:
    if modality not in ckpt.layers:
        raise UnsupportedModalityError(f"checkpoint has no {modality.value} encoder")
    return ckpt.layers[modality]


def embed_tensor(ckpt: EncoderCheckpoint, modality: Modality, x: Tensor,
                 params: Optional[Params] = None) -> Tensor:
    """
    Differentiable forward pass.

    ``x`` is one flattened input (1-D) or a batch of rows (2-D); TEXT inputs
    are bag-of-tokens rows. Returns (d,) or (B, d).
    """
    stack = _stack(ckpt, modality)
    single = x.ndim == 1
    rows = x.reshape(1, x.size) if single else x
    if rows.ndim != 2 or rows.shape[1] != stack[0].in_dim:
        raise ShapeMismatchError(f"encode[{modality.value}]", rows.shape, (stack[0].in_dim,))
    z = _run_stack(params if params is not None else _layer_params(stack), rows)
    if ckpt.normalize_output:
        z = grad.l2_normalize(z, axis=1)
    return z.reshape(z.shape[1]) if single else z


def input_tensor(sample: Sample, requires_grad: bool = False) -> Tensor:
    """The row a sample contributes to its encoder's first layer."""
    if sample.modality == Modality.TEXT:
        return Tensor(bag_of_tokens([sample.tokens])[0], requires_grad=requires_grad)
    return Tensor(sample.payload.reshape(-1), requires_grad=requires_grad)


def encode(ckpt: EncoderCheckpoint, sample: Sample) -> Tensor:
    """theta(x): length-d embedding, unit norm when the checkpoint normalizes."""
    return embed_tensor(ckpt, sample.modality, input_tensor(sample))


def encode_batch(ckpt: EncoderCheckpoint, samples: Sequence[Sample]) -> np.ndarray:
    """Embeddings of same-modality samples as a (B, d) array."""
    if not samples:
        raise EmptyInputError("cannot encode an empty batch")
    modality = samples[0].modality
    if any(s.modality != modality for s in samples):
        raise InvalidConfigError("encode_batch needs samples of one modality")
    if modality == Modality.TEXT:
        rows = bag_of_tokens([s.tokens for s in samples])
    else:
        rows = np.stack([s.payload.reshape(-1) for s in samples])
    return embed_tensor(ckpt, modality, Tensor.constant(rows)).numpy()


# =============================================================================
# Alignment
# =============================================================================

def alignment(ckpt: EncoderCheckpoint, dataset: PairedDataset) -> float:
    """Mean cosine similarity between the embeddings of every (x, y) pair."""
    if len(dataset) == 0:
        raise EmptyInputError("alignment of an empty dataset")
    total = 0.0
    for x, y in dataset.pairs:
        total += grad.cosine_value(encode(ckpt, x), encode(ckpt, y))
    return total / len(dataset)


# =============================================================================
# Contrastive training
# =============================================================================

def _info_nce(za: Tensor, zb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE with in-batch negatives; matching rows are positives."""
    n = za.shape[0]
    logits = (za @ zb.T) * (1.0 / temperature)
    eye = Tensor.constant(np.eye(n))
    row_term = (grad.log_softmax(logits, axis=1) * eye).sum()
    col_term = (grad.log_softmax(logits, axis=0) * eye).sum()
    return (row_term + col_term) * (-0.5 / n)


def _pair_rows(samples: Sequence[Sample]) -> np.ndarray:
    if samples[0].modality == Modality.TEXT:
        return bag_of_tokens([s.tokens for s in samples])
    return np.stack([s.payload.reshape(-1) for s in samples])


def train_contrastive(pairs: Sequence[PairedDataset], epochs: int = DEFAULT_EPOCHS,
                      temperature: float = DEFAULT_TEMPERATURE, lr: float = DEFAULT_LEARNING_RATE,
                      seed: int = 0, embed_dim: int = DEFAULT_EMBED_DIM, hidden_dim: int = DEFAULT_HIDDEN_DIM,
                      token_dim: int = DEFAULT_TOKEN_DIM, batch_size: int = DEFAULT_BATCH_SIZE,
                      normalize_output: bool = True) -> EncoderCheckpoint:
    """
    Train every modality into one space with plain SGD on symmetric InfoNCE.

    Only (IMAGE, TEXT) and (AUDIO, TEXT) pairs are accepted, so any
    IMAGE-AUDIO alignment of the result is emergent.
    """
    if not pairs or all(len(p) == 0 for p in pairs):
        raise EmptyInputError("no training pairs")
    if temperature <= 0:
        raise InvalidConfigError(f"temperature must be > 0, got {temperature}")
    if epochs < 0 or batch_size < 1:
        raise InvalidConfigError("epochs must be >= 0 and batch_size >= 1")
    for dataset in pairs:
        if len(dataset) and set(dataset.modalities) == {Modality.IMAGE, Modality.AUDIO}:
            raise InvalidConfigError("IMAGE-AUDIO pairs are never used for training")

    input_dims = {}
    for dataset in pairs:
        for x, y in dataset.pairs[:1]:
            for s in (x, y):
                input_dims[s.modality] = VOCAB_SIZE if s.modality == Modality.TEXT else s.payload.size
    for modality, dim in DEFAULT_INPUT_DIMS.items():
        input_dims.setdefault(modality, dim)

    ckpt = init_checkpoint(input_dims, embed_dim, hidden_dim, token_dim, seed, normalize_output)
    weights = {m: [[layer.weight, layer.bias] for layer in stack] for m, stack in ckpt.layers.items()}
    activations = {m: [layer.activation for layer in stack] for m, stack in ckpt.layers.items()}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    prepared = [(ds.modalities, _pair_rows([x for x, _ in ds.pairs]), _pair_rows([y for _, y in ds.pairs]))
                for ds in pairs if len(ds)]

    final_loss = None
    for epoch in range(epochs):
        losses = []
        for (ma, mb), rows_a, rows_b in prepared:
            order = rng.permutation(rows_a.shape[0])
            for start in range(0, order.size, batch_size):
                batch = order[start:start + batch_size]
                with Tape():
                    params = {
                        m: [(Tensor(w, requires_grad=True), None if b is None else Tensor(b, requires_grad=True), act)
                            for (w, b), act in zip(weights[m], activations[m])]
                        for m in (ma, mb)
                    }
                    za = grad.l2_normalize(_run_stack(params[ma], Tensor.constant(rows_a[batch])), axis=1)
                    zb = grad.l2_normalize(_run_stack(params[mb], Tensor.constant(rows_b[batch])), axis=1)
                    loss = _info_nce(za, zb, temperature)
                    grad.backward(loss)
                for m in (ma, mb):
                    for entry, (w, b, _) in zip(weights[m], params[m]):
                        if w.grad is not None:
                            entry[0] = entry[0] - lr * w.grad
                        if b is not None and b.grad is not None:
                            entry[1] = entry[1] - lr * b.grad
                losses.append(loss.item())
        final_loss = float(np.mean(losses)) if losses else None
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.debug("epoch %d/%d loss %.6f", epoch + 1, epochs, final_loss or float("nan"))

    trained = {
        m: [Layer(kind=layer.kind, weight=w, bias=b, activation=layer.activation)
            for layer, (w, b) in zip(ckpt.layers[m], weights[m])]
        for m in ckpt.layers
    }
    metadata = TrainingMetadata(seed=seed, epochs=epochs, temperature=temperature, learning_rate=lr,
                                batch_size=batch_size, final_loss=final_loss)
    logger.info("trained encoder seed=%d epochs=%d final loss=%s", seed, epochs, final_loss)
    return EncoderCheckpoint(embed_dim=embed_dim, layers=trained, normalize_output=normalize_output,
                             metadata=metadata)


# =============================================================================
# Checkpoint files
# =============================================================================

def _checkpoint_parts(ckpt: EncoderCheckpoint):
    descriptors = []
    arrays = []
    for modality, stack in ckpt.layers.items():
        for index, layer in enumerate(stack):
            prefix = f"{modality.value}.{index}"
            descriptors.append({
                "modality": modality.value,
                "index": index,
                "kind": layer.kind,
                "activation": layer.activation,
                "has_bias": layer.bias is not None,
            })
            arrays.append((f"{prefix}.weight", layer.weight))
            if layer.bias is not None:
                arrays.append((f"{prefix}.bias", layer.bias))
    header = {
        "kind": "encoder-checkpoint",
        "embed_dim": ckpt.embed_dim,
        "normalize_output": ckpt.normalize_output,
        "metadata": ckpt.metadata.model_dump(),
        "layers": descriptors,
    }
    return header, arrays


def dump_checkpoint(ckpt: EncoderCheckpoint) -> bytes:
    header, arrays = _checkpoint_parts(ckpt)
    return dump_container(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, header, arrays)


def _from_parts(version: int, header: dict, arrays: dict) -> EncoderCheckpoint:
    layers: Dict[Modality, List[Layer]] = {}
    for desc in sorted(header["layers"], key=lambda d: d["index"]):
        prefix = f"{desc['modality']}.{desc['index']}"
        layers.setdefault(Modality(desc["modality"]), []).append(Layer(
            kind=desc["kind"],
            weight=arrays[f"{prefix}.weight"],
            bias=arrays.get(f"{prefix}.bias") if desc["has_bias"] else None,
            activation=desc["activation"],
        ))
    return EncoderCheckpoint(
        embed_dim=header["embed_dim"],
        layers=layers,
        normalize_output=header["normalize_output"],
        metadata=TrainingMetadata(**header["metadata"]),
        format_version=version,
    )


def parse_checkpoint(blob: bytes) -> EncoderCheckpoint:
    return _from_parts(*load_container(blob, CHECKPOINT_MAGIC, [CHECKPOINT_FORMAT_VERSION]))


def save_checkpoint(ckpt: EncoderCheckpoint, path) -> None:
    header, arrays = _checkpoint_parts(ckpt)
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, header, arrays)


def load_checkpoint(path) -> EncoderCheckpoint:
    return _from_parts(*read_container(path, CHECKPOINT_MAGIC, [CHECKPOINT_FORMAT_VERSION]))
