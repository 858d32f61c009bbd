//! Preset experiments and the regularizer comparison.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{lenet300, lenet5, InitScheme, Network};
use crate::regularization::RegularizerKind;
use crate::sensitivity::{SensitivityConfig, SensitivityMode};
use crate::trainer::{train_fixed, EpochContext, EpochMetrics, TrainConfig, TrainFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Lenet300,
    Lenet5,
}

impl Architecture {
    pub fn build(self, seed: u64) -> Network {
        let (input, specs) = match self {
            Architecture::Lenet300 => lenet300(),
            Architecture::Lenet5 => lenet5(),
        };
        Network::new(input, specs)
            .expect("preset architectures are valid")
            .with_init(InitScheme::GlorotUniform, seed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lenet300 => "lenet300",
            Architecture::Lenet5 => "lenet5",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet300" => Ok(Self::Lenet300),
            "lenet5" => Ok(Self::Lenet5),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Settings for the regularizer comparison: fixed-length runs without
/// thresholding, several seeds, and a lambda grid per regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Comparison {
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub l1_lambdas: Vec<f64>,
    pub l2_lambdas: Vec<f64>,
    pub sensitivity_lambdas: Vec<f64>,
}

impl Default for Comparison {
    fn default() -> Self {
        Self {
            epochs: 30,
            seeds: vec![0, 1, 2],
            l1_lambdas: vec![1e-7, 1e-6, 1e-5],
            l2_lambdas: vec![1e-6, 1e-5, 1e-4],
            sensitivity_lambdas: vec![1e-5],
        }
    }
}

impl Comparison {
    pub fn lambdas(&self, kind: RegularizerKind) -> Vec<f64> {
        match kind {
            RegularizerKind::None => vec![0.0],
            RegularizerKind::L1 => self.l1_lambdas.clone(),
            RegularizerKind::L2 => self.l2_lambdas.clone(),
            RegularizerKind::Sensitivity => self.sensitivity_lambdas.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecipe {
    pub name: String,
    pub architecture: Architecture,
    pub dataset: String,
    pub config: TrainConfig,
    pub comparison: Option<Comparison>,
}

pub const RECIPES: [&str; 4] = ["lenet300-1.65", "lenet300-1.95", "lenet5-0.78", "fig2-comparison"];

/// Looks up a preset by name.
pub fn recipe(name: &str) -> Result<ExperimentRecipe> {
    let base = TrainConfig {
        max_epochs_phase1: 50,
        max_epochs_phase2: 100,
        ..TrainConfig::default()
    };
    let (architecture, config, comparison) = match name {
        "lenet300-1.65" => (Architecture::Lenet300, TrainConfig { target_error: 0.0165, ..base }, None),
        "lenet300-1.95" => (Architecture::Lenet300, TrainConfig { target_error: 0.0195, ..base }, None),
        "lenet5-0.78" => (Architecture::Lenet5, TrainConfig { target_error: 0.0078, ..base }, None),
        "fig2-comparison" => (
            Architecture::Lenet300,
            TrainConfig {
                threshold: 0.0,
                sensitivity: SensitivityConfig::new(SensitivityMode::Unspecific),
                ..base
            },
            Some(Comparison::default()),
        ),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown recipe {other:?}; expected one of {}",
                RECIPES.join(", ")
            )))
        }
    };
    Ok(ExperimentRecipe {
        name: name.to_string(),
        architecture,
        dataset: "mnist".into(),
        config,
        comparison,
    })
}

/// One fixed-length comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRun {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
}

impl ComparisonRun {
    pub fn final_test_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |m| m.test_loss)
    }

    /// True when the test loss rises after its minimum: the last epoch ends
    /// above the lowest value seen.
    pub fn overfits(&self) -> bool {
        let losses: Vec<f64> = self.history.iter().map(|m| m.test_loss).collect();
        let Some((argmin, min)) = losses
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            return false;
        };
        argmin + 1 < losses.len() && losses[losses.len() - 1] > min
    }
}

/// Mean and sample standard deviation of the final test loss per regularizer
/// at its selected lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub final_losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub runs: Vec<ComparisonRun>,
    pub summaries: Vec<KindSummary>,
}

impl ComparisonResult {
    pub fn summary(&self, kind: RegularizerKind) -> Option<&KindSummary> {
        self.summaries.iter().find(|s| s.kind == kind)
    }

    pub fn selected_runs(&self, kind: RegularizerKind) -> impl Iterator<Item = &ComparisonRun> {
        let lambda = self.summary(kind).map(|s| s.lambda);
        self.runs
            .iter()
            .filter(move |r| r.kind == kind && Some(r.lambda) == lambda)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs the comparison. For every regularizer the lambda grid is swept on
/// the first seed; the lambda with the lowest final test loss is then run on
/// the remaining seeds. `on_epoch` sees `(kind, lambda, seed, metrics)`.
pub fn run_comparison(
    arch: Architecture,
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    spec: &Comparison,
    mut on_epoch: impl FnMut(RegularizerKind, f64, u64, &EpochMetrics),
) -> Result<ComparisonResult, TrainFailure> {
    let Some((&first, rest)) = spec.seeds.split_first() else {
        return Err(Error::InvalidArgument("comparison needs at least one seed".into()).into());
    };
    if spec.epochs == 0 {
        return Err(Error::InvalidArgument("comparison needs at least one epoch".into()).into());
    }
    let kinds = [
        RegularizerKind::None,
        RegularizerKind::L1,
        RegularizerKind::L2,
        RegularizerKind::Sensitivity,
    ];
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for kind in kinds {
        let lambdas = spec.lambdas(kind);
        if lambdas.is_empty() {
            return Err(Error::InvalidArgument(format!("empty lambda grid for {kind}")).into());
        }
        let mut one = |lambda: f64, seed: u64| -> Result<ComparisonRun, TrainFailure> {
            let cfg = TrainConfig {
                regularizer: kind,
                lambda,
                seed,
                ..base.clone()
            };
            let mut observer = |m: &EpochMetrics| on_epoch(kind, lambda, seed, m);
            let mut ctx = EpochContext::new(&mut observer);
            let out = train_fixed(arch.build(seed), spec.epochs, train, test, &cfg, &mut ctx)?;
            Ok(ComparisonRun {
                kind,
                lambda,
                seed,
                history: out.history,
            })
        };
        let mut sweep = Vec::new();
        for &lambda in &lambdas {
            sweep.push(one(lambda, first)?);
        }
        let best = sweep
            .iter()
            .min_by(|a, b| a.final_test_loss().total_cmp(&b.final_test_loss()))
            .expect("non-empty grid")
            .lambda;
        let mut finals = vec![sweep
            .iter()
            .find(|r| r.lambda == best)
            .expect("best run exists")
            .final_test_loss()];
        runs.extend(sweep);
        for &seed in rest {
            let run = one(best, seed)?;
            finals.push(run.final_test_loss());
            runs.push(run);
        }
        let (mean, std) = mean_std(&finals);
        summaries.push(KindSummary {
            kind,
            lambda: best,
            final_losses: finals,
            mean,
            std,
        });
    }
    Ok(ComparisonResult { runs, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    #[test]
    fn presets_use_the_published_defaults() {
        for name in RECIPES {
            let r = recipe(name).unwrap();
            assert_eq!(r.config.eta, 0.1);
            assert_eq!(r.config.lambda, 1e-5);
            assert_eq!(r.config.sensitivity.mode, SensitivityMode::Unspecific);
            r.config.validate().unwrap();
        }
        assert_eq!(recipe("lenet300-1.65").unwrap().config.threshold, 1e-3);
        assert_eq!(recipe("fig2-comparison").unwrap().config.threshold, 0.0);
        assert_eq!(recipe("lenet5-0.78").unwrap().architecture, Architecture::Lenet5);
        assert!(recipe("lenet9").is_err());
    }

    #[test]
    fn overfit_signature() {
        let run = |losses: &[f64]| ComparisonRun {
            kind: RegularizerKind::None,
            lambda: 0.0,
            seed: 0,
            history: losses
                .iter()
                .enumerate()
                .map(|(e, &l)| EpochMetrics {
                    phase: 1,
                    epoch: e + 1,
                    train_loss: 0.0,
                    test_loss: l,
                    test_err: 0.0,
                    ratio: Some(1.0),
                    alive_percent: vec![],
                    wall_s: 0.0,
                })
                .collect(),
        };
        assert!(run(&[0.5, 0.3, 0.35]).overfits());
        assert!(!run(&[0.5, 0.3, 0.2]).overfits());
        assert!(!run(&[]).overfits());
    }

    #[test]
    fn comparison_on_blobs() {
        let train = synthetic_blobs(60, 10, 784, 1).unwrap();
        let test = synthetic_blobs(30, 10, 784, 2).unwrap();
        let spec = Comparison {
            epochs: 2,
            seeds: vec![4, 5],
            l1_lambdas: vec![1e-6, 1e-5],
            l2_lambdas: vec![1e-5],
            sensitivity_lambdas: vec![1e-5],
        };
        let base = TrainConfig {
            eta: 0.01,
            ..recipe("fig2-comparison").unwrap().config
        };
        let mut seen = 0;
        let res = run_comparison(Architecture::Lenet300, &train, &test, &base, &spec, |_, _, _, _| seen += 1).unwrap();
        // grid on the first seed, best lambda on the second
        assert_eq!(res.runs.len(), 1 + 2 + 1 + 1 + 4);
        assert_eq!(seen, 2 * res.runs.len());
        for s in &res.summaries {
            assert_eq!(s.final_losses.len(), 2);
            assert_eq!(res.selected_runs(s.kind).count(), 2);
        }
    }
}
