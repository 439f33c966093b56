"""Ontology-factorized sigmoid output layers for massively multi-label prediction."""
from .errors import (CycleError, DivergenceError, OntobnError, ParseError, UnknownFeatureError,
                     UnknownLabelError, UnstableStatisticError, ValidationError)
from .evaluation import (BINS, EvalReport, ScoreMatrix, auroc, average_precision, bin_report,
                         bootstrap_ci, emit_report, evaluate, micro_metrics, per_label_metrics,
                         read_report)
from .featurize import (Instance, LabelDict, SynthSpec, TrueModel, build_label_dictionary,
                        read_dataset, rollup_expand, synth_generate, write_dataset)
from .model import (LossHead, Model, backward, conditional_prob, encode, load_checkpoint,
                    predict_all, predict_marginal, predict_proba, save_checkpoint)
from .ontology import (Ontology, ancestors, ancestral_closure, assumption_diagnostic,
                       load_ontology, parse_edge_list, parse_obo_subset)
from .training import (AdamState, TrainConfig, adam_step, flat_loss, grid_search, masked_loss, train,
                    train_logistic_baseline)

__version__ = "0.1.0"
