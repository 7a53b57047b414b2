//! Step-to-step similarity of the external and internal attention partials.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, Scalar, Tensor2D};
use crate::reuse::ReuseConfig;
use crate::sim::{
    run_sequence, AttentionRoute, AttnCall, ModelConfig, PromptKind, RunConfig, StepObserver,
    SyntheticModel, UnmaskSchedule,
};

/// `B x B` matrix with entry `(i, j) = cos(next[i], prev[j])`.
pub fn pairwise_step_similarity<T: Scalar>(
    prev: &Tensor2D<T>,
    next: &Tensor2D<T>,
) -> Result<Tensor2D<f64>> {
    if prev.cols() != next.cols() {
        return Err(Error::Shape(format!(
            "similarity between widths {} and {}",
            prev.cols(),
            next.cols()
        )));
    }
    let mut out = Tensor2D::zeros(next.rows(), prev.rows());
    for i in 0..next.rows() {
        for j in 0..prev.rows() {
            out.set(i, j, cosine_similarity(next.row(i), prev.row(j))?);
        }
    }
    Ok(out)
}

pub fn mean_diagonal(m: &Tensor2D<f64>) -> f64 {
    let n = m.rows().min(m.cols());
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| m.get(i, i)).sum::<f64>() / n as f64
}

/// Diagonal summary for one (layer, head) and step pair `(step, step + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRecord {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub mean_diag_out: f64,
    pub mean_diag_in: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityCell {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub i: usize,
    pub j: usize,
    pub sim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StabilityStudy {
    pub summary: Vec<StabilityRecord>,
    pub full_out: Vec<SimilarityCell>,
    pub full_in: Vec<SimilarityCell>,
}

pub const SUMMARY_CSV_HEADER: &str = "layer,head,step,mean_diag_out,mean_diag_in";
pub const FULL_CSV_HEADER: &str = "layer,head,step,i,j,sim";

impl StabilityStudy {
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_CSV_HEADER}\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{:.9},{:.9}\n",
                r.layer, r.head, r.step, r.mean_diag_out, r.mean_diag_in
            ));
        }
        s
    }

    pub fn full_csv(cells: &[SimilarityCell]) -> String {
        let mut s = format!("{FULL_CSV_HEADER}\n");
        for c in cells {
            s.push_str(&format!(
                "{},{},{},{},{},{:.9}\n",
                c.layer, c.head, c.step, c.i, c.j, c.sim
            ));
        }
        s
    }

    /// Per (layer, head), diagonal similarities averaged over step pairs:
    /// `(mean_out, mean_in)`.
    pub fn per_head_means(&self) -> BTreeMap<(usize, usize), (f64, f64)> {
        let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
        for r in &self.summary {
            let e = acc.entry((r.layer, r.head)).or_default();
            e.0 += r.mean_diag_out;
            e.1 += r.mean_diag_in;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|(k, (o, i, n))| (k, (o / n as f64, i / n as f64)))
            .collect()
    }

    /// Fraction of (layer, head) pairs whose external partial is the more stable one.
    pub fn fraction_external_more_stable(&self) -> f64 {
        let means = self.per_head_means();
        if means.is_empty() {
            return 0.0;
        }
        means.values().filter(|(o, i)| o > i).count() as f64 / means.len() as f64
    }
}

// per step (external out, internal out)
type StepPartials = Vec<(Tensor2D<f64>, Tensor2D<f64>)>;

#[derive(Default)]
struct PartialRecorder {
    by_head: BTreeMap<(usize, usize), StepPartials>,
}

impl<T: Scalar> StepObserver<T> for PartialRecorder {
    fn on_attention(&mut self, call: &AttnCall<'_, T>) -> Result<()> {
        let (Some(ext), Some(int)) = (call.external, call.internal) else {
            return Err(Error::Config(
                "similarity study needs both partials at every step".into(),
            ));
        };
        self.by_head
            .entry((call.layer, call.head))
            .or_default()
            .push((ext.out().cast(), int.out().cast()));
        Ok(())
    }
}

/// Denoises the first generated block for `steps` steps under always-recompute and
/// compares each head's external and internal partials between consecutive steps.
/// Fewer than two steps give an empty study.
pub fn stability_study<T: Scalar>(
    model: &SyntheticModel<T>,
    run: &RunConfig,
    steps: usize,
    seed: u64,
) -> Result<StabilityStudy> {
    if steps < 2 {
        return Ok(StabilityStudy::default());
    }
    let cfg = RunConfig {
        seed,
        num_blocks: 1,
        steps_per_block: steps,
        verify: false,
        route: AttentionRoute::Cached,
        ..run.clone()
    };
    let mut rec = PartialRecorder::default();
    run_sequence(
        model,
        &cfg,
        &ReuseConfig::always_recompute(),
        None,
        &mut rec,
    )?;

    let mut study = StabilityStudy::default();
    for (&(layer, head), per_step) in &rec.by_head {
        for (step, pair) in per_step.windows(2).enumerate() {
            let out = pairwise_step_similarity(&pair[0].0, &pair[1].0)?;
            let inn = pairwise_step_similarity(&pair[0].1, &pair[1].1)?;
            study.summary.push(StabilityRecord {
                layer,
                head,
                step,
                mean_diag_out: mean_diagonal(&out),
                mean_diag_in: mean_diagonal(&inn),
            });
            for (m, dest) in [(&out, &mut study.full_out), (&inn, &mut study.full_in)] {
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        dest.push(SimilarityCell {
                            layer,
                            head,
                            step,
                            i,
                            j,
                            sim: m.get(i, j),
                        });
                    }
                }
            }
        }
    }
    Ok(study)
}

/// Setup whose external context cannot change between steps: no positional signal and
/// a constant prompt, so every committed key and value is identical per head. In-block
/// noise keeps the block's own keys moving.
pub fn frozen_context_fixture(seed: u64) -> (ModelConfig, RunConfig) {
    let model = ModelConfig {
        vocab_size: 64,
        num_layers: 2,
        num_heads: 2,
        head_dim: 16,
        seed,
        positional: false,
        head_overrides: Vec::new(),
    };
    let run = RunConfig {
        prompt_len: 48,
        num_blocks: 1,
        block_size: 8,
        steps_per_block: 8,
        unmask: UnmaskSchedule::PerStep(1),
        seed,
        inblock_noise: 2.0,
        prompt: PromptKind::Constant(0),
        ..RunConfig::default()
    };
    (model, run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matrix_orientation() {
        let prev = Tensor2D::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let next = Tensor2D::<f64>::from_rows(&[[0.0, 2.0], [3.0, 3.0]]).unwrap();
        let m = pairwise_step_similarity(&prev, &next).unwrap();
        assert!((m.get(0, 0) - 0.0).abs() < 1e-12);
        assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((m.get(1, 0) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((mean_diagonal(&m) - 0.5f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let a = Tensor2D::<f64>::zeros(2, 2);
        let b = Tensor2D::<f64>::zeros(2, 3);
        assert!(pairwise_step_similarity(&a, &b).is_err());
    }

    #[test]
    fn frozen_context_keeps_external_partial_fixed() {
        let (mc, run) = frozen_context_fixture(3);
        let model = SyntheticModel::<f64>::new(mc).unwrap();
        let study = stability_study(&model, &run, 8, 3).unwrap();
        assert_eq!(study.summary.len(), 2 * 2 * 7);
        assert_eq!(study.full_out.len(), 2 * 2 * 7 * 64);
        for r in &study.summary {
            assert!(r.mean_diag_out >= 0.999, "{r:?}");
        }
        assert_eq!(study.fraction_external_more_stable(), 1.0);
        for (_, (_, inn)) in study.per_head_means() {
            assert!(inn < 0.9, "{inn}");
        }
        let csv = study.summary_csv();
        assert!(csv.starts_with(SUMMARY_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 28);
    }

    #[test]
    fn single_step_gives_empty_study() {
        let (mc, run) = frozen_context_fixture(0);
        let model = SyntheticModel::<f64>::new(mc).unwrap();
        let study = stability_study(&model, &run, 1, 0).unwrap();
        assert!(study.summary.is_empty() && study.full_out.is_empty());
        assert_eq!(study.summary_csv(), format!("{SUMMARY_CSV_HEADER}\n"));
    }
}
