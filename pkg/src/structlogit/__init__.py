"""Structured prediction on region graphs with entropy-smoothed
LP inference and per-region classifier oracles."""

from .data import (Dataset, Example, GenConfig, extract_image_features,
                   gaussian_blur, gen_denoising, load_dataset, load_pnm,
                   save_dataset, write_label_image)
from .gbt import BoostedTreesClassifier, fit_gbt
from .graph import RegionGraph, build_grid, region_count_of_configs
from .inference import (Messages, Potentials, Pseudomarginals,
                        SmoothingConfig, agreement_residual,
                        brute_smoothed_value, compute_marginals, decode,
                        dual_objective, primal_objective,
                        run_message_passing, star_update)
from .loss import (LossTables, build_theta, empirical_risk, energy,
                   entropy_cap, exhaustive_l1, hamming_tables, smoothed_loss)
from .oracle import (BiasedLogRegProblem, ConstantClassifier, FitConfig,
                     LinearClassifier, MlpClassifier, ZeroClassifier,
                     fit_constant, fit_linear, fit_mlp, fit_zero,
                     load_classifier, logistic_gradient, logistic_objective,
                     predict_scores, save_classifier)
from .trainer import (BiasTables, Model, TrainConfig, assemble_tied_problem,
                      compute_biases, load_model, model_scores, predict,
                      save_model, train, univariate_error)

__version__ = "0.1.0"
