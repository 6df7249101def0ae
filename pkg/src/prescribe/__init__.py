"""Prescriptive process monitoring: predict outcomes, estimate treatment effects, learn when to intervene."""

from .bench import EvaluationReport, SyntheticSpec, evaluate_policies, generate_synthetic_log, net_gain
from .causal import CausalForest, ForestConfig, estimate_cate, fit_forest
from .conformal import ConformalCalibrator, calibrate, prediction_set, rho
from .eventlog import EventLog, LogSchema, PrefixDataset, encode_prefixes, ingest_csv, temporal_split
from .generator import EnhancedLog, GeneratorConfig, realism_check, sample_potential_outcomes, train_generator
from .pipeline import PhaseError, run_pipeline
from .policy import PPOConfig, RewardConfig, decide, make_environment, reward, train_agent
from .predictor import TrainConfig, predict_proba

__version__ = "0.1.0"
