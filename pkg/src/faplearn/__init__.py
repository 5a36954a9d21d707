"""Multi-task GRU learning on API-call sequences.

An encoder compresses a raw API-call sequence into a fixed-length context
vector; task decoders generate the family label (classification as a
length-1 sequence) and the file-access pattern summary from it. The
package also ships the deterministic FAP extraction that produces the
generation supervision, a synthetic benchmark generator, training
regimes, an evaluation harness, a CLI and a scikit-learn style estimator.
"""

from .corpus import (CorpusSplit, Trace, Vocabulary, build_vocabulary,
                     drop_rare_families, encode_trace, load_corpus,
                     parse_corpus, save_corpus, split_corpus)
from .estimator import MalwareSequenceModel
from .fap import (CANONICAL_FAP_APIS, DEFAULT_FAP_ID_TABLE, DEFAULT_FAP_SET,
                  Fap, FapIdTable, FapSet, FapVector, canonicalize_api,
                  extract_fap_vector, fap_target_sequence, fap_to_id,
                  vector_to_fap)
from .gru import MultiTaskModel, build_model, decode_greedy, decode_teacher_forced, encode
from .synth import SynthSpec, default_benchmark_spec, fine_grained_spec, generate_corpus
from .training import TrainConfig, run_regime

__version__ = "0.1.0"

__all__ = [
    "CANONICAL_FAP_APIS", "CorpusSplit", "DEFAULT_FAP_ID_TABLE", "DEFAULT_FAP_SET",
    "Fap", "FapIdTable", "FapSet", "FapVector", "MalwareSequenceModel",
    "MultiTaskModel", "SynthSpec", "Trace", "TrainConfig", "Vocabulary",
    "build_model", "build_vocabulary", "canonicalize_api", "decode_greedy",
    "decode_teacher_forced", "default_benchmark_spec", "drop_rare_families",
    "encode", "encode_trace", "extract_fap_vector", "fap_target_sequence",
    "fap_to_id", "fine_grained_spec", "generate_corpus", "load_corpus",
    "parse_corpus", "run_regime", "save_corpus", "split_corpus", "vector_to_fap",
]
