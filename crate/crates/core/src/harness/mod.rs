// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end orchestration: configuration, the staged pipeline, result
//! files and gradient checks.

mod artifacts;
mod config;
mod gradcheck;
mod pipeline;

pub use artifacts::{write_run, RunManifest};
pub use config::{derive_seed, ExperimentConfig, METHODS};
pub use gradcheck::{gradient_fidelity, GradcheckReport, CLOSED_FORM_TOLERANCE, FD_TOLERANCE};
pub use pipeline::{
    capture_clean, clean_accuracy, evaluate_setting, fit_inlp, fit_interventional_probe, fit_validation_probes,
    generate_suite, grid_search, method_grid, num_ze_classes, run_pipeline, run_pipeline_with_model, run_suite,
    split_suite, stage_seeds, train_model, CleanStates, Evaluation, InterventionalResources, Intervener, MethodReport,
    PipelineOutput, Setting, SuiteReport, ValidationProbes,
};

#[cfg(test)]
mod tests;
