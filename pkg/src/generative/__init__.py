"""Flow matching, joint adjoint-matching fine-tuning and inference."""
from .finetune import (FinetuneHistory, JointDynamics, JointTrajectory, LinearReward, LossReport,
                       adjoint_matching_loss, finetune, loss_step_subset, one_step_estimate, reg_field,
                       rollout_joint, running_cost, solve_lean_adjoint, surrogate_alpha_field,
                       tilted_gaussian_moments)
from .flow import (ZERO_SCHEDULE, augment_time_grid, coarse_nodes, drift, eta, fm_loss, fm_pretrain,
                   interpolate, sample_base, sample_ode, sample_sde, sde_step, sigma)
from .inference import (evaluate_residuals, export_field_png, generate_pairs, guidance_loss, guided_sample,
                        inference_dynamics, observed_values, residual_table, sample_joint, sample_observations,
                        stat_report, superres_evaluate, sweep_zeta)

__all__ = [
    "FinetuneHistory", "JointDynamics", "JointTrajectory", "LinearReward", "LossReport",
    "adjoint_matching_loss", "finetune", "loss_step_subset", "one_step_estimate", "reg_field",
    "rollout_joint", "running_cost", "solve_lean_adjoint", "surrogate_alpha_field", "tilted_gaussian_moments",
    "ZERO_SCHEDULE", "augment_time_grid", "coarse_nodes", "drift", "eta", "fm_loss", "fm_pretrain",
    "interpolate", "sample_base", "sample_ode", "sample_sde", "sde_step", "sigma",
    "evaluate_residuals", "export_field_png", "generate_pairs", "guidance_loss", "guided_sample",
    "inference_dynamics", "observed_values", "residual_table", "sample_joint", "sample_observations",
    "stat_report", "superres_evaluate", "sweep_zeta",
]
