"""Adaptive multisensory inference on planted synthetic tasks.

A lightweight multimodal student distilled from an oracle teacher, a
Gumbel-Softmax selection policy with an explicit compute-cost model, a
three-stage joint training schedule, and analytic MAC/energy accounting.
"""

from .checkpoints import load_checkpoint, load_into, parameter_checksum, save_checkpoint
from .distillation import (DistillConfig, OracleTeacher, TeacherOutput, loss_cfd, loss_gt,
                           loss_gt_regression, loss_kd, loss_l1, oracle_teacher)
from .efficiency import (EnergyCoefficients, LayerGraph, LayerSpec, activation_bytes,
                         count_macs, count_params, estimate_energy, graph_from_json,
                         graph_to_json, sensor_schedule, usage_report)
from .encoders import Feature, ModalityEncoder, StudentConfig, StudentModel, audio_spectrogram
from .errors import (AdaptSenseError, ConfigError, ContractError, DataError, DivergenceError,
                     EmptySelectionError, GraphError, ShapeError)
from .pipeline import (ExperimentConfig, build_models, config_from_dict, config_to_dict,
                       input_hash, load_run_models, run_pipeline, split_episodes)
from .policy import (ActionSpace, AudioPreviewNet, ControllerConfig, CostModel, DecisionTensor,
                     PolicyController, PolicyRollout, PolicyState, PreviewConfig,
                     assemble_partial_clip, audio_preview_saliency, gumbel_max_sample,
                     gumbel_noise, gumbel_softmax_relax, policy_loss, select_salient_frames,
                     usage_cost)
from .synthetic import (AUDIO, BEHAVIOR, MODALITIES, VISUAL, DatasetConfig, Episode, Segment,
                        SegmentSpec, SignalBank, TemplateClassifier, corrupt_audio,
                        generate_dataset, generate_episode, load_dataset, oracle_policy,
                        save_dataset, split_of_index)
from .training import (MetricsReport, TrainConfig, collate, evaluate, export_decisions_csv,
                       gradcheck, train_stage1, train_stage2, train_stage3)

__version__ = "0.1.0"
