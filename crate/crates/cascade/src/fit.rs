//! Offline fitting: mean models, static covariance, GARCH-X variance and the
//! residual correlation, bundled into one model file.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use cascade_core::forecast::{fit_mean_model, FitReport};
use cascade_core::linalg::Matrix;
use cascade_core::simulate::FittedModels;
use cascade_core::uncertainty::{fit_correlation, fit_diu, fit_garchx_pooled, GarchFitOptions};

use crate::synth::History;

/// What `fit` prints and stores next to the models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub observations: usize,
    pub diu_sigma: Vec<f64>,
    pub garch_log_likelihood: f64,
}

/// Model file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub lags: usize,
    pub exo_lags: usize,
    /// Release that normalizes the variance driver (m³/s).
    pub driver_scale: f64,
    pub models: FittedModels,
    pub summary: FitSummary,
}

impl ModelFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: ModelFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        m.models.validate(m.models.mean.len())?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Fits every model on a history. The variance driver of unit `i` is the
/// upstream release (the boundary inflow for unit 0) divided by
/// `driver_scale`.
pub fn fit_all(
    history: &History,
    lags: usize,
    exo_lags: usize,
    driver_scale: f64,
    garch_opts: &GarchFitOptions,
) -> anyhow::Result<ModelFile> {
    let n = history.units();
    anyhow::ensure!(n >= 1, "history has no units");
    let upstream = history.upstream();
    if exo_lags > 0 {
        anyhow::ensure!(
            upstream.iter().all(|s| s.iter().all(|v| v.is_finite())),
            "release_m3s is required when exo_lags > 0"
        );
    }
    let (mean, report): (_, FitReport) =
        fit_mean_model(&history.inflow, &upstream, lags, exo_lags)?;
    let len = report.residuals[0].len();
    let mut resid = Matrix::zeros(len, n);
    for i in 0..n {
        for t in 0..len {
            resid[(t, i)] = report.residuals[i][t];
        }
    }
    let diu = fit_diu(&resid)?;
    let corr = fit_correlation(&resid)?;
    let drivers: Vec<Vec<f64>> = upstream
        .iter()
        .map(|s| {
            s[report.start..report.start + len]
                .iter()
                .map(|u| u / driver_scale)
                .collect()
        })
        .collect();
    let series: Vec<(&[f64], &[f64])> = report
        .residuals
        .iter()
        .zip(&drivers)
        .map(|(e, u)| (e.as_slice(), u.as_slice()))
        .collect();
    let garch = fit_garchx_pooled(&series, garch_opts)?;
    let ll = cascade_core::uncertainty::garchx_log_likelihood(&garch, &series);
    let summary = FitSummary {
        r2: report.r2,
        rmse: report.rmse,
        mae: report.mae,
        observations: len * n,
        diu_sigma: diu.sigma.clone(),
        garch_log_likelihood: ll,
    };
    Ok(ModelFile {
        lags,
        exo_lags,
        driver_scale,
        models: FittedModels {
            mean,
            diu,
            garch,
            corr,
        },
        summary,
    })
}
