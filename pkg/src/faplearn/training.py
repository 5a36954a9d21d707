"""Training loops: autoencoder pretraining, end-to-end seq2seq baselines and
multi-task decoder training, all driven by one seeded RNG so loss
trajectories are reproducible bit for bit.

The loss is the mean over batch samples of the summed per-step
cross-entropies of the teacher-forced decoder outputs; PAD steps are
masked out. Multi-task batches combine the classification loss and
lambda_fap times the generation loss on a shared context vector.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .corpus import EOS, PAD, CorpusSplit, Trace, Vocabulary, encode_trace, family_labels
from .fap import DEFAULT_FAP_SET, extract_fap_vector, fap_target_sequence, fap_vocabulary
from .gru import (KIND_CLASSIFICATION, KIND_FAP, KIND_RECONSTRUCTION,
                  MultiTaskModel, build_model)
from .numeric import GradTape, Parameter, Tensor, backward


class DivergedLoss(ArithmeticError):
    pass


REGIMES = ("seq2seq-cls", "seq2seq-fap", "ae", "ae-full", "multitask")

FAP_DECODE_MAX_LEN = 8  # 7 canonical tokens plus the EOS step


@dataclass
class TrainConfig:
    batch_size: int = 32
    pretrain_epochs: int = 10
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_fap: float = 1.0
    grad_clip: float = 2.0
    seed: int = 0
    freeze_encoder: bool = True
    max_len: int = 512
    patience: int = 5
    embed_dim: int = 64
    hidden_dim: int = 128

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda_fap < 0:
            raise ValueError("lambda_fap must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        return self

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for f in dataclasses.fields(self):
                value = getattr(self, f.name)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                fh.write(f"{f.name} = {value}\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"config line {lineno}: expected key = value")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in fields:
                    raise ValueError(f"config line {lineno}: unknown key {key!r}")
                ftype = fields[key].type
                if ftype in ("bool", bool):
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"config line {lineno}: bad boolean {raw!r}")
                    values[key] = raw.lower() in ("true", "1", "yes")
                elif ftype in ("int", int):
                    values[key] = int(raw)
                else:
                    values[key] = float(raw)
        return cls(**values).validate()


class AdamState:
    """First/second moment buffers per parameter plus the shared step count."""

    def __init__(self):
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def buffers(self, p: Parameter) -> tuple[np.ndarray, np.ndarray]:
        key = id(p)
        if key not in self._m:
            self._m[key] = np.zeros_like(p.value.data)
            self._v[key] = np.zeros_like(p.value.data)
        return self._m[key], self._v[key]


def clip_gradients(params, max_norm: float) -> float:
    """Scale all grads down so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        g = p.grad.data
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad.data *= factor
    return norm


def adam_step(params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected adaptive update from each parameter's accumulated grad."""
    state.t += 1
    t = state.t
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad.data
        m, v = state.buffers(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# batching and losses


def pad_rows(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad index sequences with PAD into a (B,T) matrix plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    X = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.intp)
    for i, s in enumerate(seqs):
        X[i, :len(s)] = s
    return X, lengths


def decoder_loss_sum(decoder, C: Tensor, targets) -> Tensor:
    """Sum over batch samples of summed per-step CE (PAD steps masked)."""
    T, lengths = pad_rows(targets)
    probs = decoder.teacher_forced_probs(C, T)
    total = None
    for t, p in enumerate(probs):
        mask = (lengths > t).astype(np.float64)
        ce = nm.cross_entropy_rows(p, T[:, t], mask)
        total = ce if total is None else nm.add(total, ce)
    return total


def sequence_loss(model: MultiTaskModel, batch, task: str) -> Tensor:
    """Mean over the batch of summed per-step cross-entropies for one task.

    `batch` is a list of (input_indices, target_indices) pairs.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    inputs = [b[0] for b in batch]
    targets = [b[1] for b in batch]
    X, lengths = pad_rows(inputs)
    C = model.encoder.encode_batch(X, lengths)
    return nm.scale(decoder_loss_sum(model.decoders[task], C, targets), 1.0 / len(batch))


@dataclass
class Supervision:
    """Precomputed per-trace targets, keyed by trace id."""

    inputs: dict
    cls_targets: dict
    fap_targets: dict
    cls_alphabet: Vocabulary
    fap_alphabet: Vocabulary


def build_supervision(traces, api_vocab: Vocabulary, families, max_len: int,
                      fset=DEFAULT_FAP_SET) -> Supervision:
    cls_alphabet = Vocabulary.from_tokens(sorted(families))
    fap_alphabet = fap_vocabulary(fset)
    inputs, cls_targets, fap_targets = {}, {}, {}
    for t in traces:
        inputs[t.id] = encode_trace(api_vocab, t, max_len)
        cls_targets[t.id] = [cls_alphabet.token_to_index[t.family]]
        fap_targets[t.id] = fap_target_sequence(extract_fap_vector(t, fset), fap_alphabet, fset)
    return Supervision(inputs, cls_targets, fap_targets, cls_alphabet, fap_alphabet)


TARGETS_BY_TASK = {
    KIND_CLASSIFICATION: lambda sup, t: sup.cls_targets[t.id],
    KIND_FAP: lambda sup, t: sup.fap_targets[t.id],
}


# ---------------------------------------------------------------------------
# logging


@dataclass
class LogRow:
    phase: str
    epoch: int
    task: str
    train_loss: float
    val_loss: float
    val_acc: float


class TrainingLog:
    def __init__(self):
        self.rows: list[LogRow] = []

    def add(self, **kw):
        self.rows.append(LogRow(**kw))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("phase,epoch,task,train_loss,val_loss,val_acc\n")
            for r in self.rows:
                fh.write(f"{r.phase},{r.epoch},{r.task},{r.train_loss:.6f},"
                         f"{r.val_loss:.6f},{r.val_acc:.6f}\n")


# ---------------------------------------------------------------------------
# phases


def _check_finite(value: float) -> float:
    if not np.isfinite(value):
        raise DivergedLoss(f"loss diverged to {value}")
    return value


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _corpus_loss(model, decoder_kind, inputs, targets, batch_size=256) -> float:
    """Mean per-sample loss over a dataset, without recording gradients."""
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        ins = inputs[start:start + batch_size]
        tgs = targets[start:start + batch_size]
        X, lengths = pad_rows(ins)
        C = model.encoder.encode_batch(X, lengths)
        total += decoder_loss_sum(model.decoders[decoder_kind], C, tgs).item()
    return total / max(len(inputs), 1)


def pretrain_autoencoder(model: MultiTaskModel, traces, config: TrainConfig,
                         log: TrainingLog | None = None,
                         val_traces=None, phase: str = "pretrain") -> list[float]:
    """Minimize reconstruction loss (target = input + EOS) on raw traces.

    Uses only the input sequences, never the labels. Returns the per-epoch
    mean training loss.
    """
    config.validate()
    inputs = [encode_trace(model.api_vocab, t, config.max_len) for t in traces]
    targets = [ids + [EOS] for ids in inputs]
    val_inputs = None
    if val_traces:
        val_inputs = [encode_trace(model.api_vocab, t, config.max_len) for t in val_traces]
        val_targets = [ids + [EOS] for ids in val_inputs]

    params = model.encoder.parameters() + model.decoders[KIND_RECONSTRUCTION].parameters()
    state = AdamState()
    rng = np.random.default_rng([config.seed, 1])
    history = []
    for epoch in range(config.pretrain_epochs):
        epoch_total = 0.0
        for batch_idx in _epoch_batches(len(inputs), config.batch_size, rng):
            for p in params:
                p.zero_grad()
            with GradTape() as tape:
                X, lengths = pad_rows([inputs[i] for i in batch_idx])
                C = model.encoder.encode_batch(X, lengths)
                loss_sum = decoder_loss_sum(model.decoders[KIND_RECONSTRUCTION], C,
                                            [targets[i] for i in batch_idx])
                loss = nm.scale(loss_sum, 1.0 / len(batch_idx))
            backward(tape, loss)
            adam_step(params, state, config.learning_rate,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            epoch_total += _check_finite(loss_sum.item())
        mean_loss = epoch_total / len(inputs)
        history.append(mean_loss)
        val_loss = (_corpus_loss(model, KIND_RECONSTRUCTION, val_inputs, val_targets)
                    if val_inputs else float("nan"))
        if log is not None:
            log.add(phase=phase, epoch=epoch, task="recon", train_loss=mean_loss,
                    val_loss=val_loss, val_acc=float("nan"))
    return history


def _greedy_exact_from_C(model, kind, C_rows: np.ndarray, targets, batch_size=512) -> float:
    """Fraction of rows whose greedy decode equals the target (EOS stripped)."""
    decoder = model.decoders[kind]
    correct = 0
    for start in range(0, len(targets), batch_size):
        C = Tensor(C_rows[start:start + batch_size])
        outs = decoder.greedy_batch(C, FAP_DECODE_MAX_LEN)
        for out, tgt in zip(outs, targets[start:start + batch_size]):
            expected = [i for i in tgt if i != EOS]
            correct += int(out == expected)
    return correct / max(len(targets), 1)


def encode_corpus(model, inputs, batch_size=256) -> np.ndarray:
    """Context vectors for a list of index sequences (no gradients)."""
    rows = []
    for start in range(0, len(inputs), batch_size):
        X, lengths = pad_rows(inputs[start:start + batch_size])
        rows.append(model.encoder.encode_batch(X, lengths).data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.encoder.hidden_dim))


def _snapshot(params) -> list[np.ndarray]:
    return [p.value.data.copy() for p in params]


def _restore(params, snap) -> None:
    for p, arr in zip(params, snap):
        p.value.data[...] = arr


def train_supervised(model: MultiTaskModel, split: CorpusSplit, supervision: Supervision,
                     tasks: dict[str, float], config: TrainConfig, *, freeze_encoder: bool,
                     log: TrainingLog | None = None, phase: str = "decoders") -> dict:
    """Train the given task decoders (and the encoder unless frozen).

    tasks maps decoder kind to its loss weight. Early stopping watches
    validation classification accuracy when the classification task is
    present, otherwise validation FAP exact match; the best-validation
    parameters are restored before returning.
    """
    config.validate()
    train, val = list(split.train), list(split.validation)
    train_inputs = [supervision.inputs[t.id] for t in train]
    train_targets = {k: [TARGETS_BY_TASK[k](supervision, t) for t in train] for k in tasks}
    val_inputs = [supervision.inputs[t.id] for t in val]
    val_targets = {k: [TARGETS_BY_TASK[k](supervision, t) for t in val] for k in tasks}

    params = [p for k in sorted(tasks) for p in model.decoders[k].parameters()]
    if not freeze_encoder:
        params = model.encoder.parameters() + params

    C_train = C_val = None
    if freeze_encoder:
        C_train = encode_corpus(model, train_inputs)
        C_val = encode_corpus(model, val_inputs)

    watch = KIND_CLASSIFICATION if KIND_CLASSIFICATION in tasks else KIND_FAP
    state = AdamState()
    rng = np.random.default_rng([config.seed, 2])
    # best = (val metric, -val loss): the loss breaks metric ties
    best_key, best_snap, since_best = (-1.0, -np.inf), None, 0
    history = {"train_loss": [], "val_loss": [], "val_metric": []}

    for epoch in range(config.epochs):
        epoch_total = 0.0
        for batch_idx in _epoch_batches(len(train), config.batch_size, rng):
            for p in params:
                p.zero_grad()
            with GradTape() as tape:
                if freeze_encoder:
                    C = Tensor(C_train[batch_idx])
                else:
                    X, lengths = pad_rows([train_inputs[i] for i in batch_idx])
                    C = model.encoder.encode_batch(X, lengths)
                loss = None
                for kind, weight in sorted(tasks.items()):
                    part = decoder_loss_sum(model.decoders[kind], C,
                                            [train_targets[kind][i] for i in batch_idx])
                    part = nm.scale(part, weight / len(batch_idx))
                    loss = part if loss is None else nm.add(loss, part)
            backward(tape, loss)
            adam_step(params, state, config.learning_rate,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            epoch_total += _check_finite(loss.item()) * len(batch_idx)
        train_loss = epoch_total / len(train)

        if not freeze_encoder:
            C_val = encode_corpus(model, val_inputs)
        val_loss = 0.0
        for kind, weight in sorted(tasks.items()):
            part = decoder_loss_sum(model.decoders[kind], Tensor(C_val), val_targets[kind]).item()
            val_loss += weight * part / max(len(val), 1)
        val_metric = _greedy_exact_from_C(model, watch, C_val, val_targets[watch])

        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["val_metric"].append(val_metric)
        if log is not None:
            log.add(phase=phase, epoch=epoch, task="+".join(sorted(tasks)),
                    train_loss=train_loss, val_loss=val_loss, val_acc=val_metric)

        key = (val_metric, -val_loss)
        if key > best_key:
            best_key, since_best = key, 0
            best_snap = _snapshot(params)
        else:
            since_best += 1
            if since_best > config.patience:
                break
    if best_snap is not None:
        _restore(params, best_snap)
    return history


def train_multitask(model: MultiTaskModel, split: CorpusSplit, supervision: Supervision,
                    config: TrainConfig, log: TrainingLog | None = None,
                    phase: str = "multitask") -> dict:
    """Joint classification + FAP training per the one-to-many setting."""
    tasks = {KIND_CLASSIFICATION: 1.0, KIND_FAP: config.lambda_fap}
    return train_supervised(model, split, supervision, tasks, config,
                            freeze_encoder=config.freeze_encoder, log=log, phase=phase)


# ---------------------------------------------------------------------------
# regimes


def run_regime(regime: str, split: CorpusSplit, api_vocab: Vocabulary,
               config: TrainConfig, *, bidirectional: bool = False,
               log: TrainingLog | None = None) -> MultiTaskModel:
    """Train one of the named experimental regimes from scratch.

    seq2seq-cls / seq2seq-fap: single decoder, encoder trained end to end.
    ae / multitask: reconstruction pretraining on the train split, then
    joint decoder training (encoder frozen per config.freeze_encoder).
    ae-full: pretraining additionally uses validation and test inputs
    (their labels are never used in any gradient).
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    config.validate()
    families = family_labels(split.all_traces())
    supervision = build_supervision(split.all_traces(), api_vocab, families, config.max_len)

    if regime in ("seq2seq-cls", "seq2seq-fap"):
        kind = KIND_CLASSIFICATION if regime == "seq2seq-cls" else KIND_FAP
        model = build_model(api_vocab, families, embed_dim=config.embed_dim,
                            hidden_dim=config.hidden_dim, bidirectional=bidirectional,
                            decoders=(kind,), seed=config.seed)
        train_supervised(model, split, supervision, {kind: 1.0}, config,
                         freeze_encoder=False, log=log, phase="seq2seq")
        return model

    model = build_model(api_vocab, families, embed_dim=config.embed_dim,
                        hidden_dim=config.hidden_dim, bidirectional=bidirectional,
                        decoders=(KIND_RECONSTRUCTION, KIND_CLASSIFICATION, KIND_FAP),
                        seed=config.seed)
    pretrain_traces = list(split.train)
    if regime == "ae-full":
        pretrain_traces = list(split.all_traces())
    pretrain_autoencoder(model, pretrain_traces, config, log=log,
                         val_traces=split.validation, phase="pretrain")
    train_multitask(model, split, supervision, config, log=log)
    return model
