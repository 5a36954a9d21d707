"""GRU cell, sequence encoder and task decoders.

The encoder reads an index sequence into a fixed-length context vector C
(final hidden state; for the bidirectional variant, a linear projection
of the concatenated final states of both directions). Each decoder is a
GRU over its own output alphabet: hidden state initialized with C, first
input the learned GO embedding, trained with teacher forcing, decoded
greedily at inference (ties go to the lowest index).

Gate convention, with x the input and h the previous state:

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    hcand = tanh(W_h x + U_h (r * h) + b_h)
    h_new = (1 - z) * h + z * hcand
"""

from __future__ import annotations

import json

import numpy as np

from . import numeric as nm
from .corpus import EOS, GO, RESERVED_TOKENS, Vocabulary
from .numeric import GradTape, Parameter, Tensor

KIND_RECONSTRUCTION = "recon"
KIND_CLASSIFICATION = "cls"
KIND_FAP = "fap"
DECODER_KINDS = (KIND_RECONSTRUCTION, KIND_CLASSIFICATION, KIND_FAP)

# ContextVector: rank-1 Tensor of size H (rank-2 B x H in batched paths).


class IndexOutOfVocab(ValueError):
    pass


class GruCell:
    def __init__(self, input_size: int, hidden_size: int, rng, name: str):
        self.input_size = input_size
        self.hidden_size = hidden_size
        s = 1.0 / np.sqrt(hidden_size)
        E, H = input_size, hidden_size

        def w(shape, suffix):
            return Parameter(rng.uniform(-s, s, shape), f"{name}.{suffix}")

        self.W_z, self.U_z = w((H, E), "W_z"), w((H, H), "U_z")
        self.W_r, self.U_r = w((H, E), "W_r"), w((H, H), "U_r")
        self.W_h, self.U_h = w((H, E), "W_h"), w((H, H), "U_h")
        self.b_z = Parameter(np.zeros(H), f"{name}.b_z")
        self.b_r = Parameter(np.zeros(H), f"{name}.b_r")
        self.b_h = Parameter(np.zeros(H), f"{name}.b_h")

    def parameters(self) -> list[Parameter]:
        return [self.W_z, self.U_z, self.b_z, self.W_r, self.U_r, self.b_r,
                self.W_h, self.U_h, self.b_h]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = nm.sigmoid(nm.affine_pair(x, self.W_z, h, self.U_z, self.b_z))
        r = nm.sigmoid(nm.affine_pair(x, self.W_r, h, self.U_r, self.b_r))
        cand = nm.tanh(nm.affine_pair(x, self.W_h, nm.mul(r, h), self.U_h, self.b_h))
        return nm.add(nm.mul(nm.one_minus(z), h), nm.mul(z, cand))


def gru_step(cell: GruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """Single unbatched step: x_t of size E, h_prev of size H."""
    x2 = nm.reshape(x_t, (1, cell.input_size))
    h2 = nm.reshape(h_prev, (1, cell.hidden_size))
    return nm.reshape(cell.step(x2, h2), (cell.hidden_size,))


class Encoder:
    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int,
                 bidirectional: bool, rng, name: str = "encoder"):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.bidirectional = bidirectional
        self.embedding = Parameter(rng.uniform(-0.1, 0.1, (vocab_size, embed_dim)), f"{name}.embedding")
        self.cell_fwd = GruCell(embed_dim, hidden_dim, rng, f"{name}.fwd")
        if bidirectional:
            self.cell_bwd = GruCell(embed_dim, hidden_dim, rng, f"{name}.bwd")
            s = 1.0 / np.sqrt(2 * hidden_dim)
            self.proj_W = Parameter(rng.uniform(-s, s, (hidden_dim, 2 * hidden_dim)), f"{name}.proj_W")
            self.proj_b = Parameter(np.zeros(hidden_dim), f"{name}.proj_b")
        else:
            self.cell_bwd = None
            self.proj_W = None
            self.proj_b = None

    def parameters(self) -> list[Parameter]:
        params = [self.embedding] + self.cell_fwd.parameters()
        if self.bidirectional:
            params += self.cell_bwd.parameters() + [self.proj_W, self.proj_b]
        return params

    def _run_direction(self, cell: GruCell, X: np.ndarray, lengths: np.ndarray, reverse: bool) -> Tensor:
        B, T = X.shape
        h = Tensor(np.zeros((B, self.hidden_dim)))
        min_len = int(lengths.min())
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            x_t = nm.embed(self.embedding, X[:, t])
            h_new = cell.step(x_t, h)
            # rows past their own length keep their previous state
            if t < min_len:
                h = h_new
            else:
                h = nm.where_rows((lengths > t).astype(np.float64), h_new, h)
        return h

    def encode_batch(self, X: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Context vectors (B,H) for right-padded index rows X (B,T)."""
        if X.size and X.max() >= self.vocab_size:
            raise IndexOutOfVocab(f"index {X.max()} >= vocabulary size {self.vocab_size}")
        h_fwd = self._run_direction(self.cell_fwd, X, lengths, reverse=False)
        if not self.bidirectional:
            return h_fwd
        h_bwd = self._run_direction(self.cell_bwd, X, lengths, reverse=True)
        both = nm.concat_cols(h_fwd, h_bwd)
        return nm.add_bias(nm.matmul_t(both, self.proj_W), self.proj_b)


def encode(enc: Encoder, indices) -> Tensor:
    """Context vector (rank-1, size H) of one index sequence."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("cannot encode an empty sequence")
    C = enc.encode_batch(idx.reshape(1, -1), np.array([idx.size]))
    return nm.reshape(C, (enc.hidden_dim,))


class Decoder:
    def __init__(self, alphabet: Vocabulary, embed_dim: int, hidden_dim: int,
                 kind: str, rng, name: str):
        if kind not in DECODER_KINDS:
            raise ValueError(f"unknown decoder kind {kind!r}")
        self.alphabet = alphabet
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.kind = kind
        V = alphabet.size
        self.embedding = Parameter(rng.uniform(-0.1, 0.1, (V, embed_dim)), f"{name}.embedding")
        self.cell = GruCell(embed_dim, hidden_dim, rng, f"{name}.cell")
        s = 1.0 / np.sqrt(hidden_dim)
        self.out_W = Parameter(rng.uniform(-s, s, (V, hidden_dim)), f"{name}.out_W")
        self.out_b = Parameter(np.zeros(V), f"{name}.out_b")

    def parameters(self) -> list[Parameter]:
        return [self.embedding] + self.cell.parameters() + [self.out_W, self.out_b]

    def step_probs(self, inputs: np.ndarray, h: Tensor) -> tuple[Tensor, Tensor]:
        """One decode step: token indices (B,) plus state -> (probs (B,V), new state)."""
        x = nm.embed(self.embedding, inputs)
        h = self.cell.step(x, h)
        logits = nm.add_bias(nm.matmul_t(h, self.out_W), self.out_b)
        return nm.softmax(logits), h

    def teacher_forced_probs(self, C: Tensor, targets: np.ndarray) -> list[Tensor]:
        """Per-step output distributions under teacher forcing.

        Step 1 feeds GO with state C; step t feeds targets[:, t-1]. Returns
        targets.shape[1] tensors of shape (B, V).
        """
        B, L = targets.shape
        h = C
        inputs = np.full(B, GO, dtype=np.intp)
        probs = []
        for t in range(L):
            p, h = self.step_probs(inputs, h)
            probs.append(p)
            inputs = targets[:, t]
        return probs

    def greedy_batch(self, C: Tensor, max_len: int) -> list[list[int]]:
        """Greedy decode for each row of C; EOS stops a row and is not returned.

        The classification decoder emits exactly one symbol.
        """
        B = C.data.shape[0]
        if self.kind == KIND_CLASSIFICATION:
            max_len = 1
        h = C
        inputs = np.full(B, GO, dtype=np.intp)
        outputs: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            p, h = self.step_probs(inputs, h)
            choice = p.data.argmax(axis=1)
            for b in range(B):
                if done[b]:
                    continue
                if choice[b] == EOS and self.kind != KIND_CLASSIFICATION:
                    done[b] = True
                else:
                    outputs[b].append(int(choice[b]))
            if self.kind == KIND_CLASSIFICATION or done.all():
                break
            inputs = choice
        return outputs


def decode_teacher_forced(dec: Decoder, C: Tensor, target) -> list[Tensor]:
    """Single-sequence teacher forcing; returns one rank-1 distribution per step."""
    t = np.asarray(target, dtype=np.intp)
    if t.size == 0:
        raise ValueError("target must be non-empty")
    C2 = nm.reshape(C, (1, dec.hidden_dim)) if C.data.ndim == 1 else C
    probs = dec.teacher_forced_probs(C2, t.reshape(1, -1))
    return [nm.reshape(p, (dec.alphabet.size,)) for p in probs]


def decode_greedy(dec: Decoder, C: Tensor, max_len: int) -> list[int]:
    """Greedy output indices for one context vector."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    C2 = nm.reshape(C, (1, dec.hidden_dim)) if C.data.ndim == 1 else C
    return dec.greedy_batch(C2, max_len)[0]


class MultiTaskModel:
    """Shared encoder plus task decoders keyed by kind (recon/cls/fap)."""

    def __init__(self, encoder: Encoder, decoders: dict[str, Decoder],
                 api_vocab: Vocabulary, families: list[str]):
        self.encoder = encoder
        self.decoders = decoders
        self.api_vocab = api_vocab
        self.families = list(families)

    def parameters(self) -> list[Parameter]:
        params = self.encoder.parameters()
        for kind in DECODER_KINDS:
            if kind in self.decoders:
                params += self.decoders[kind].parameters()
        return params

    def decoder_parameters(self) -> list[Parameter]:
        return [p for d in self.decoders.values() for p in d.parameters()]

    def manifest(self) -> dict[str, str]:
        enc = self.encoder
        return {
            "embed_dim": str(enc.embed_dim),
            "hidden_dim": str(enc.hidden_dim),
            "bidirectional": "1" if enc.bidirectional else "0",
            "api_vocab_size": str(enc.vocab_size),
            "api_tokens": json.dumps(list(self.api_vocab.index_to_token[len(RESERVED_TOKENS):])),
            "families": json.dumps(self.families),
            "decoders": json.dumps(sorted(self.decoders)),
            "fap_tokens": json.dumps(
                list(self.decoders["fap"].alphabet.index_to_token[len(RESERVED_TOKENS):])
                if "fap" in self.decoders else []),
        }

    def save(self, path) -> None:
        nm.save_checkpoint(path, self.parameters(), self.manifest())

    @classmethod
    def load(cls, path) -> "MultiTaskModel":
        manifest, arrays = nm.load_checkpoint(path)
        embed_dim = int(manifest["embed_dim"])
        hidden_dim = int(manifest["hidden_dim"])
        bidirectional = manifest["bidirectional"] == "1"
        api_vocab = Vocabulary.from_tokens(json.loads(manifest["api_tokens"]))
        families = json.loads(manifest["families"])
        fap_tokens = json.loads(manifest["fap_tokens"])
        rng = np.random.default_rng(0)
        encoder = Encoder(api_vocab.size, embed_dim, hidden_dim, bidirectional, rng)
        decoders = {}
        for kind in json.loads(manifest["decoders"]):
            alphabet = {
                KIND_RECONSTRUCTION: api_vocab,
                KIND_CLASSIFICATION: Vocabulary.from_tokens(families),
                KIND_FAP: Vocabulary.from_tokens(fap_tokens),
            }[kind]
            decoders[kind] = Decoder(alphabet, embed_dim, hidden_dim, kind, rng, f"decoder.{kind}")
        model = cls(encoder, decoders, api_vocab, families)
        for p in model.parameters():
            if p.name not in arrays:
                raise nm.NumericError(f"checkpoint missing parameter {p.name}")
            if arrays[p.name].shape != p.value.data.shape:
                raise nm.NumericError(f"checkpoint shape mismatch for {p.name}")
            p.value.data[...] = arrays[p.name]
        return model


def build_model(api_vocab: Vocabulary, families: list[str], *, embed_dim: int,
                hidden_dim: int, bidirectional: bool, decoders, seed: int) -> MultiTaskModel:
    """Construct a model with fresh parameters; decoder kinds from `decoders`."""
    rng = np.random.default_rng([seed, 0])
    encoder = Encoder(api_vocab.size, embed_dim, hidden_dim, bidirectional, rng)
    from .fap import fap_vocabulary

    table = {}
    for kind in decoders:
        alphabet = {
            KIND_RECONSTRUCTION: api_vocab,
            KIND_CLASSIFICATION: Vocabulary.from_tokens(sorted(families)),
            KIND_FAP: fap_vocabulary(),
        }[kind]
        table[kind] = Decoder(alphabet, embed_dim, hidden_dim, kind, rng, f"decoder.{kind}")
    return MultiTaskModel(encoder, table, api_vocab, sorted(families))
