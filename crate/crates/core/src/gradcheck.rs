//! Central-difference gradient checking against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBundle, TrackSet};
use crate::error::Result;
use crate::heads::{Architecture, Model, ModelSpec, ProjectionMode, DEFAULT_LAYERNORM_EPS};
use crate::trainer::{batch_loss, loss_and_grads, LossWeights, Sample};

/// Differences at or below this are treated as exact. Keeps near-zero
/// gradient entries from inflating the relative error.
pub const ABS_FLOOR: f64 = 1e-7;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Absolute error at the worst entry.
    pub worst_abs_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|)`, or 0 when the
/// absolute gap is within [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares every parameter entry's analytic gradient of the batch loss
/// with a central difference of step `h`.
pub fn check_model(model: &Model, samples: &[Sample<'_>], weights: LossWeights, h: f64) -> Result<GradcheckReport> {
    let (_, grads, _) = loss_and_grads(model, samples, weights)?;
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_abs_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let len = model.params().get(id).len();
        for i in 0..len {
            let orig = model.params().get(id).data[i];
            probe.params_mut().get_mut(id).data[i] = orig + h;
            let up = batch_loss(&probe, samples, weights)?;
            probe.params_mut().get_mut(id).data[i] = orig - h;
            let down = batch_loss(&probe, samples, weights)?;
            probe.params_mut().get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id)[i];
            let rel = relative_error(analytic, numeric);
            let abs = (analytic - numeric).abs();
            report.entries += 1;
            // Worst entry by relative error, then by absolute error.
            if (rel, abs) > (report.max_rel_err, report.worst_abs_err) || report.worst_param.is_empty() {
                report.worst_abs_err = abs;
                report.max_rel_err = rel;
                report.worst_param = model.params().get(id).name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Random wild-type/mutant bundle pairs and labels for gradient checks.
pub struct Fixture {
    pub pairs: Vec<(EmbeddingBundle, EmbeddingBundle, f64)>,
}

impl Fixture {
    pub fn random(tracks: TrackSet, d_raw: usize, n: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bundle = |id: String, rng: &mut ChaCha8Rng| {
            tracks.roles().iter().fold(EmbeddingBundle::new(id), |b, &role| {
                b.with_track(role, (0..d_raw).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            })
        };
        let pairs = (0..n)
            .map(|i| {
                let wt = bundle(format!("fx{i}:WT"), &mut rng);
                let mt = bundle(format!("fx{i}:M"), &mut rng);
                let label = rng.gen_range(-3.0..3.0);
                (wt, mt, label)
            })
            .collect();
        Fixture { pairs }
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.pairs
            .iter()
            .map(|(wt, mt, label)| Sample { wt, mt, label: *label })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub architecture: Architecture,
    pub tracks: TrackSet,
    pub d: usize,
    pub samples: usize,
    pub seed: u64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            architecture: Architecture::Ensemble,
            tracks: TrackSet::Seq,
            d: 8,
            samples: 4,
            seed: 0,
            step: DEFAULT_STEP,
        }
    }
}

/// Builds a seeded model with `d_raw = d_proj = d` and checks it on a random
/// fixture.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let spec = ModelSpec {
        architecture: cfg.architecture,
        tracks: cfg.tracks,
        projection: ProjectionMode::Learned,
        d_raw: cfg.d,
        d_proj: cfg.d,
        layernorm_eps: DEFAULT_LAYERNORM_EPS,
    };
    let model = Model::new(spec, cfg.seed)?;
    let fixture = Fixture::random(cfg.tracks, cfg.d, cfg.samples, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    check_model(&model, &fixture.samples(), LossWeights::default(), cfg.step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 0.0), 0.0);
        assert_eq!(relative_error(1e-6, 0.0), 1.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(-1.0, 1.0), 2.0);
    }

    #[test]
    fn small_ensemble_passes() {
        let r = run(&GradcheckConfig { d: 4, ..Default::default() }).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.entries > 0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // A slightly wrong analytic gradient must be flagged.
        let spec = ModelSpec {
            architecture: Architecture::Single(HeadKind::MutConcat),
            tracks: TrackSet::Seq,
            projection: ProjectionMode::Learned,
            d_raw: 3,
            d_proj: 3,
            layernorm_eps: DEFAULT_LAYERNORM_EPS,
        };
        let model = Model::new(spec, 1).unwrap();
        let fx = Fixture::random(TrackSet::Seq, 3, 2, 5);
        let samples = fx.samples();
        let (_, grads, _) = loss_and_grads(&model, &samples, LossWeights::default()).unwrap();
        let id = model.params().ids().next().unwrap();
        let numeric = {
            let mut m = model.clone();
            m.params_mut().get_mut(id).data[0] += 1e-4;
            let up = batch_loss(&m, &samples, LossWeights::default()).unwrap();
            m.params_mut().get_mut(id).data[0] -= 2e-4;
            let down = batch_loss(&m, &samples, LossWeights::default()).unwrap();
            (up - down) / 2e-4
        };
        assert!(relative_error(grads.get(id)[0], numeric) < 1e-4);
        assert!(relative_error(grads.get(id)[0] * 1.01 + 1e-3, numeric) > 1e-4);
    }
}
