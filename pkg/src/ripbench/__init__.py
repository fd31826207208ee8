"""ripbench: a desk-scale simulator for continual test-time adaptation,
its theoretical mixture-model collapse dynamics, and a black-box attack
that collapses adapting classifiers by reusing their own mistakes."""

from .attack import (AttackConfig, AttackState, SpyVictim, VictimHandle,
                     init_attack_state, ips_filter, pick_victim_classes,
                     rip_round, run_attack, run_no_attack, run_trials)
from .augment import LEVEL_SIGMA, AugConfig, awgn, level_to_sigma
from .core import (ModelParams, RngStream, argmax_label, argmax_labels,
                   clamp_probs, one_hot, softmax)
from .data import (BenchmarkDomain, DomainSpec, LabeledDataset, TrainConfig,
                   gen_blobs, load_dataset_csv, make_benchmark,
                   save_dataset_csv, train_source)
from .gmmc import (GmmcParams, GmmcSimConfig, gmmc_boundary, gmmc_fit_step,
                   gmmc_posterior, gmmc_record_to_csv, gmmc_simulate)
from .losses import (AUGMENTING_FREE, LossEval, LossKind, ce_loss, ent_loss,
                     grad_logits, loss_grad_logits, loss_value, rmt_loss,
                     sce_loss, slr_loss)
from .metrics import (Checkpoint, RunRecord, classwise_error, collapse_detect,
                      prediction_marginal, spearman_corr)
from .tta import (AdaptState, OptimizerState, SrcReplayConfig, TtaConfig,
                  TtaModel, adapt_step, ema_update, optimizer_step, predict,
                  predict_labels, pseudo_labels, source_ensemble_update)

__version__ = "0.1.0"
