"""scikit-learn style wrapper around the multi-task model.

fit() consumes raw API-call sequences plus family labels, predict()
returns family labels, generate_fap() returns file-access-pattern
strings and transform() exposes the learned context vectors, so the
model composes with pipelines and model-selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import CorpusSplit, Trace, build_vocabulary, is_valid_api_name
from .evaluate import predicted_faps
from .gru import KIND_CLASSIFICATION
from .numeric import Tensor
from .training import REGIMES, TrainConfig, encode_corpus, run_regime
from .corpus import encode_trace


def check_call_sequences(X) -> list[tuple[str, ...]]:
    """Validate raw input: an iterable of non-empty API-name sequences."""
    if isinstance(X, str):
        raise TypeError("X must be a sequence of call sequences, not a string")
    sequences = []
    for i, seq in enumerate(X):
        if isinstance(seq, str):
            raise TypeError(f"sample {i}: expected a sequence of call names, got a string")
        calls = tuple(seq)
        if not calls:
            raise ValueError(f"sample {i}: empty call sequence")
        for c in calls:
            if not isinstance(c, str) or not is_valid_api_name(c):
                raise ValueError(f"sample {i}: invalid API name {c!r}")
        sequences.append(calls)
    if not sequences:
        raise ValueError("X must contain at least one sequence")
    return sequences


def check_labels(y, n: int) -> list[str]:
    labels = [str(v) for v in y]
    if len(labels) != n:
        raise ValueError(f"found {len(labels)} labels for {n} sequences")
    if any(not v for v in labels):
        raise ValueError("labels must be non-empty strings")
    return labels


class MalwareSequenceModel(BaseEstimator, ClassifierMixin, TransformerMixin):
    """Multi-task sequence model: family classification plus FAP generation.

    Parameters mirror the training configuration; `regime` selects the
    training recipe ("seq2seq-cls", "seq2seq-fap", "ae", "ae-full" or
    "multitask"). A validation_fraction of the training data is held out
    for early stopping.
    """

    def __init__(self, regime="multitask", bidirectional=False, embed_dim=32,
                 hidden_dim=64, batch_size=32, pretrain_epochs=10, epochs=30,
                 learning_rate=2e-3, lambda_fap=1.0, freeze_encoder=True,
                 max_len=512, patience=5, min_token_count=1,
                 validation_fraction=0.1, seed=0):
        self.regime = regime
        self.bidirectional = bidirectional
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lambda_fap = lambda_fap
        self.freeze_encoder = freeze_encoder
        self.max_len = max_len
        self.patience = patience
        self.min_token_count = min_token_count
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            pretrain_epochs=self.pretrain_epochs,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lambda_fap=self.lambda_fap,
            seed=self.seed,
            freeze_encoder=self.freeze_encoder,
            max_len=self.max_len,
            patience=self.patience,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
        ).validate()

    def fit(self, X, y):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        sequences = check_call_sequences(X)
        labels = check_labels(y, len(sequences))
        traces = [Trace(f"s{i}", fam, calls)
                  for i, (calls, fam) in enumerate(zip(sequences, labels))]

        rng = np.random.default_rng([self.seed, 99])
        order = rng.permutation(len(traces))
        n_val = max(1, int(round(self.validation_fraction * len(traces))))
        if n_val >= len(traces):
            raise ValueError("validation_fraction leaves no training data")
        val = tuple(traces[i] for i in order[:n_val])
        train = tuple(traces[i] for i in order[n_val:])
        split = CorpusSplit(train=train, validation=val, test=(), seed=self.seed)

        vocab = build_vocabulary(list(train), self.min_token_count)
        self.model_ = run_regime(self.regime, split, vocab, self._config(),
                                 bidirectional=self.bidirectional)
        self.vocab_ = vocab
        self.classes_ = np.array(self.model_.families)
        return self

    def _encode(self, X) -> np.ndarray:
        sequences = check_call_sequences(X)
        inputs = [encode_trace(self.vocab_, Trace("q", "q", calls), self.max_len)
                  for calls in sequences]
        return encode_corpus(self.model_, inputs)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        if KIND_CLASSIFICATION not in self.model_.decoders:
            raise ValueError(f"regime {self.regime!r} trains no classification decoder")
        decoder = self.model_.decoders[KIND_CLASSIFICATION]
        C = self._encode(X)
        outs = decoder.greedy_batch(Tensor(C), 1)
        return np.array([decoder.alphabet.index_to_token[o[0]] if o else "" for o in outs])

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._encode(X)

    def generate_fap(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        sequences = check_call_sequences(X)
        traces = [Trace(f"q{i}", "q", calls) for i, calls in enumerate(sequences)]
        return [f.text for f in predicted_faps(self.model_, traces, self.max_len)]
