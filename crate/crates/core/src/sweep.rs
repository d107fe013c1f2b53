//! λ sweeps and rate-matched standard-table baselines.

use serde::Serialize;

use crate::dataset::Split;
use crate::entropy::{build_huffman_tables, measure_rate};
use crate::error::{Error, Result};
use crate::jpeg::{ColorTransform, CompressionKernels};
use crate::losses::LossConfig;
use crate::trainer::{Checkpoint, EvalBundle, TrainConfig, TrainMode, Trainer};

/// Outcome of one training run in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub c: f64,
    pub lambda1: f64,
    /// Standard-table quality, for baseline rows.
    pub quality: Option<f64>,
    pub mean_kb: f64,
    pub accuracy: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl SweepRow {
    pub fn from_eval(loss: &LossConfig, quality: Option<f64>, ev: &EvalBundle) -> Self {
        Self {
            lambda: loss.lambda,
            c: loss.c,
            lambda1: loss.lambda1,
            quality,
            mean_kb: ev.mean_kb,
            accuracy: ev.top1,
            psnr: ev.psnr,
            ssim: ev.ssim,
        }
    }
}

/// Trains `cfg` to completion and evaluates the final state.
pub fn train_and_evaluate(cfg: &TrainConfig, data: &Split) -> Result<(Checkpoint, EvalBundle)> {
    let mut t = Trainer::new(cfg, data)?;
    t.run()?;
    let ev = t.evaluate()?;
    Ok((t.checkpoint(), ev))
}

/// Loss settings for each λ; `coupled` ties `c` to `0.01/λ` with `λ₁ = 1`.
pub fn sweep_losses(base: &LossConfig, lambdas: &[f64], coupled: bool) -> Vec<LossConfig> {
    lambdas
        .iter()
        .map(|&lambda| if coupled { LossConfig { penalty: base.penalty, ..LossConfig::coupled(lambda) } } else { LossConfig { lambda, ..*base } })
        .collect()
}

/// Runs one training per loss setting. A failed run is logged and skipped.
pub fn run_sweep(cfg: &TrainConfig, losses: &[LossConfig], data: &Split) -> Vec<(LossConfig, Result<(Checkpoint, EvalBundle)>)> {
    losses
        .iter()
        .map(|l| {
            let run = train_and_evaluate(&TrainConfig { loss: *l, ..cfg.clone() }, data);
            if let Err(e) = &run {
                log::warn!("sweep point lambda={} c={} failed: {e}", l.lambda, l.c);
            }
            (*l, run)
        })
        .collect()
}

/// Mean KB per validation image for the standard tables at `quality`, with
/// Huffman tables fitted on the training split.
pub fn standard_rate(data: &Split, quality: f64, rate_sample: usize, seed: u64) -> Result<f64> {
    let ct = ColorTransform::jpeg();
    let k = CompressionKernels::standard(quality)?;
    let codec = build_huffman_tables(&data.train.images, &ct, &k, rate_sample, seed)?;
    Ok(measure_rate(&data.test.images, &ct, &k, &codec)?.mean_kb())
}

/// Lowest quality in `[1, 100]` whose standard-table rate reaches `target_kb`,
/// located by bisection; returns `(quality, rate)`.
///
/// When even quality 100 stays below the target, quality 100 is returned.
pub fn match_quality(data: &Split, target_kb: f64, rate_sample: usize, seed: u64) -> Result<(f64, f64)> {
    if !(target_kb.is_finite() && target_kb >= 0.0) {
        return Err(Error::InvalidArgument(format!("target rate {target_kb} KB")));
    }
    let rate = |q: f64| standard_rate(data, q, rate_sample, seed);
    let (mut lo, mut hi) = (1.0, 100.0);
    let r_lo = rate(lo)?;
    if r_lo >= target_kb {
        return Ok((lo, r_lo));
    }
    let mut r_hi = rate(hi)?;
    if r_hi < target_kb {
        return Ok((hi, r_hi));
    }
    // tables are integers, so rate is a step function of quality; 0.05 is finer than any step
    while hi - lo > 0.05 {
        let mid = 0.5 * (lo + hi);
        let r = rate(mid)?;
        if r >= target_kb {
            hi = mid;
            r_hi = r;
        } else {
            lo = mid;
        }
    }
    Ok((hi, r_hi))
}

/// A JCC run paired with a standard-table baseline trained at a matched rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchedPair {
    pub jcc: SweepRow,
    pub baseline: SweepRow,
}

impl MatchedPair {
    /// Relative rate gap `|baseline − jcc| / jcc`.
    pub fn rate_gap(&self) -> f64 {
        (self.baseline.mean_kb - self.jcc.mean_kb).abs() / self.jcc.mean_kb.max(f64::MIN_POSITIVE)
    }
}

/// Trains a baseline at the quality whose rate best matches `jcc`'s.
pub fn matched_baseline(cfg: &TrainConfig, jcc: &SweepRow, data: &Split) -> Result<MatchedPair> {
    let (quality, _) = match_quality(data, jcc.mean_kb, cfg.rate_sample, cfg.seed)?;
    let base_cfg = TrainConfig { mode: TrainMode::Baseline, quality: Some(quality), ..cfg.clone() };
    let (ck, ev) = train_and_evaluate(&base_cfg, data)?;
    let baseline = SweepRow { lambda: jcc.lambda, c: jcc.c, lambda1: jcc.lambda1, ..SweepRow::from_eval(&ck.config.loss, Some(quality), &ev) };
    Ok(MatchedPair { jcc: jcc.clone(), baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_dataset, DatasetSpec};

    #[test]
    fn matched_quality_reaches_target() {
        let data = ingest_dataset(&DatasetSpec::synthetic(4, 30, 30, 2)).unwrap();
        let target = standard_rate(&data, 40.0, 30, 0).unwrap();
        let (q, r) = match_quality(&data, target, 30, 0).unwrap();
        assert!(r >= target);
        assert!(q <= 40.0 + 1e-9);
        assert!(standard_rate(&data, 100.0, 30, 0).unwrap() > standard_rate(&data, 12.5, 30, 0).unwrap());
    }

    #[test]
    fn coupled_losses() {
        let l = sweep_losses(&LossConfig::default(), &[1e-3, 1e-1], true);
        assert_eq!(l.len(), 2);
        assert!((l[1].c - 0.1).abs() < 1e-12);
        let u = sweep_losses(&LossConfig::default(), &[0.5], false);
        assert_eq!((u[0].lambda, u[0].c), (0.5, 10.0));
    }
}
