use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io;
use super::manifest::RunManifest;
use crate::backends::{Concurrency, IdentityEmbedder};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::metrics::{
    frechet_distance, reid_rate_from_similarities, ssim, ActivationStats, SsimParams,
    DEFAULT_REID_THRESHOLD,
};

type Samples = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluateOptions {
    pub threshold: f64,
    pub ssim: SsimParams,
    pub exec: Execution,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_REID_THRESHOLD,
            ssim: SsimParams::default(),
            exec: Execution::default(),
        }
    }
}

/// Metrics for one original/anonymized pair, matched by file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub cosine: f64,
    pub ssim: f64,
}

/// Batch metrics. `vdna` is a placeholder column and is always empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub reid_rate: f64,
    pub fid: Option<f64>,
    pub vdna: Option<f64>,
    pub mean_ssim: f64,
    /// Raw per-pair similarities, so any other threshold can be applied later.
    pub pairs: Vec<PairMetrics>,
    pub unmatched: Vec<String>,
    pub failed: Vec<String>,
}

impl MetricReport {
    /// Build from per-pair results. Fréchet distance needs activations
    /// for at least two pairs.
    pub fn from_pairs(
        pairs: Vec<PairMetrics>,
        activations: Option<(Samples, Samples)>,
        threshold: f64,
    ) -> Result<Self> {
        let sims: Vec<f64> = pairs.iter().map(|p| p.cosine).collect();
        let reid_rate = reid_rate_from_similarities(&sims, threshold)?;
        let mean_ssim = pairs.iter().map(|p| p.ssim).sum::<f64>() / pairs.len() as f64;
        let fid = match activations {
            Some((a, b)) if a.len() >= 2 && b.len() >= 2 => Some(frechet_distance(
                &ActivationStats::from_samples(&a)?,
                &ActivationStats::from_samples(&b)?,
            )?),
            _ => None,
        };
        Ok(Self {
            threshold,
            reid_rate,
            fid,
            vdna: None,
            mean_ssim,
            pairs,
            unmatched: Vec::new(),
            failed: Vec::new(),
        })
    }

    /// Plain-text table with the Re-ID, FID, V-DNA and SSIM columns.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10}{:<10}{:<10}{:<10}",
            "Re-ID", "FID", "V-DNA", "SSIM"
        );
        let _ = writeln!(
            out,
            "{:<10}{:<10}{:<10}{:<10}",
            cell(Some(self.reid_rate)),
            cell(self.fid),
            cell(self.vdna),
            cell(Some(self.mean_ssim))
        );
        let _ = writeln!(
            out,
            "pairs: {}  threshold: {}",
            self.pairs.len(),
            self.threshold
        );
        if !self.unmatched.is_empty() {
            let _ = writeln!(out, "unmatched: {}", self.unmatched.join(", "));
        }
        if !self.failed.is_empty() {
            let _ = writeln!(out, "failed: {}", self.failed.join(", "));
        }
        out
    }
}

/// Largest odd window no bigger than the image, so tiny images still score.
fn fit_window(params: &SsimParams, height: usize, width: usize) -> SsimParams {
    let limit = height.min(width);
    if params.window <= limit {
        return *params;
    }
    let window = if limit % 2 == 1 {
        limit
    } else {
        limit.saturating_sub(1)
    }
    .max(1);
    SsimParams { window, ..*params }
}

struct PairResult {
    metrics: PairMetrics,
    activations: (Vec<f64>, Vec<f64>),
}

fn score_pair(
    name: &str,
    original: &Path,
    anonymized: &Path,
    embedder: &dyn IdentityEmbedder,
    params: &SsimParams,
) -> Result<PairResult> {
    let a = io::load_rgb(original)?;
    let b = io::load_rgb(anonymized)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    let (ua, ub) = (io::to_unit(&a), io::to_unit(&b));
    let cosine = embedder.embed(&ua)?.cosine(&embedder.embed(&ub)?)?;
    let s = a.shape();
    let ssim = ssim(
        &io::to_gray(&a),
        &io::to_gray(&b),
        &fit_window(params, s.height, s.width),
    )?;
    Ok(PairResult {
        metrics: PairMetrics {
            name: name.to_string(),
            cosine,
            ssim,
        },
        activations: (embedder.activations(&ua)?, embedder.activations(&ub)?),
    })
}

/// Compare every PNG in `originals` with the same-named file in `anonymized`.
///
/// Files without a counterpart are listed in `unmatched`; pairs that fail to
/// load or score are listed in `failed`. Neither stops the evaluation.
pub fn cmd_evaluate(
    originals: &Path,
    anonymized: &Path,
    embedder: &dyn IdentityEmbedder,
    options: &EvaluateOptions,
) -> Result<MetricReport> {
    let mut matched: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    let mut unmatched = Vec::new();
    let names = |dir: &Path| -> Result<Vec<String>> {
        Ok(io::list_images(dir)?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let other: Vec<String> = names(anonymized)?;
    for name in names(originals)? {
        if other.contains(&name) {
            matched.push((name.clone(), originals.join(&name), anonymized.join(&name)));
        } else {
            unmatched.push(name);
        }
    }
    unmatched.extend(other.into_iter().filter(|n| !originals.join(n).is_file()));
    for name in &unmatched {
        log::warn!("{name}: no counterpart, skipped");
    }

    let exec = if embedder.concurrency() == Concurrency::Serial {
        Execution::Sequential
    } else {
        options.exec
    };
    let results = exec::map(exec, &matched, |(name, a, b)| {
        score_pair(name, a, b, embedder, &options.ssim).map_err(|e| (name.clone(), e))
    });

    let mut pairs = Vec::new();
    let (mut act_a, mut act_b) = (Vec::new(), Vec::new());
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(p) => {
                pairs.push(p.metrics);
                act_a.push(p.activations.0);
                act_b.push(p.activations.1);
            }
            Err((name, e)) => {
                log::error!("{name}: {e}");
                failed.push(name);
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no matching image pairs to evaluate"));
    }
    let mut report = MetricReport::from_pairs(pairs, Some((act_a, act_b)), options.threshold)?;
    report.unmatched = unmatched;
    report.failed = failed;
    Ok(report)
}

/// Store the report in the manifest at `path`, filling per-record metrics
/// where output file names match. A fresh manifest is created if none exists.
pub fn attach_report(report: &MetricReport, path: &Path) -> Result<RunManifest> {
    let mut manifest = if path.is_file() {
        RunManifest::read(path)?
    } else {
        RunManifest::new(None)
    };
    for record in &mut manifest.records {
        let name = record
            .output_path
            .as_deref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned());
        record.metrics = name.and_then(|n| report.pairs.iter().find(|p| p.name == n).cloned());
    }
    manifest.evaluation = Some(report.clone());
    manifest.write(path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(name: &str, cosine: f64) -> PairMetrics {
        PairMetrics {
            name: name.into(),
            cosine,
            ssim: 0.5,
        }
    }

    #[test]
    fn four_pair_fixture() {
        let pairs = ["a", "b", "c", "d"]
            .iter()
            .zip([0.9, 0.3, 0.6, 0.1])
            .map(|(n, c)| pair(n, c))
            .collect();
        let r = MetricReport::from_pairs(pairs, None, 0.5).unwrap();
        assert_eq!(r.reid_rate, 0.5);
        assert_eq!(r.fid, None);
        assert_eq!(r.vdna, None);
    }

    #[test]
    fn table_has_all_columns() {
        let r = MetricReport::from_pairs(vec![pair("a", 1.0)], None, 0.4).unwrap();
        let header = r.to_table().lines().next().unwrap().to_string();
        for col in ["Re-ID", "FID", "V-DNA", "SSIM"] {
            assert!(header.contains(col));
        }
        let json = serde_json::to_value(&r).unwrap();
        for key in ["reid_rate", "fid", "vdna", "mean_ssim"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn window_shrinks_for_small_images() {
        let p = SsimParams::default();
        assert_eq!(fit_window(&p, 64, 64).window, 11);
        assert_eq!(fit_window(&p, 8, 9).window, 7);
        assert_eq!(fit_window(&p, 9, 12).window, 9);
    }
}
