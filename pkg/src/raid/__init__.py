"""Barycenter-alignment defense for embedding recommenders against attribute inference."""

from raid.attack import AttackReport, ClassifierConfig, balanced_accuracy, evaluate_attack, f1_micro, train_classifier
from raid.barycenter import (
    BarycenterSolution,
    c_transform,
    dual_objective,
    dual_supergradient,
    primal_objective,
    recover_alpha,
    select_support,
    solve_barycenter,
)
from raid.data import (
    Dataset,
    RawRatings,
    bin_attribute,
    build_splits,
    filter_kcore,
    ingest,
    parse_ratings,
    parse_users,
)
from raid.ot import Coupling, Histogram, cost_matrix, exact_ot_oracle, sinkhorn, w2_squared
from raid.ranking import RecReport, evaluate_model, hr_at_k, ndcg_at_k, rank_test_item
from raid.synthetic import gaussian_classes, preference_world
from raid.train import (
    EmbeddingModel,
    InteractionSet,
    TrainConfig,
    ce_gradient,
    ce_loss,
    class_histograms,
    defend_embeddings,
    defense_gradient,
    defense_loss,
    dp_perturb,
    negative_sample,
    predict_score,
    train_raid,
)

__version__ = "0.1.0"
