//! Ablation harness: interaction-module variants and learned-token counts,
//! trained and evaluated on synthetic sequence sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ami::AmiVariant;
use crate::error::Result;
use crate::evalkit::{evaluate, EvalInput, MetricsReport};
use crate::synthgen::{alternating_blackout, generate_sequence, Motion, SceneSpec, SequenceDataset, Shape};
use crate::tracker::{train, Tracker, TrackerConfig};

/// Token counts of the sweep; 0 is direct interaction between full sequences.
pub const TOKEN_SWEEP: [usize; 4] = [0, 16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub ami: Option<AmiVariant>,
    pub n_tokens: usize,
}

impl Variant {
    pub fn apply(&self, base: &TrackerConfig) -> TrackerConfig {
        TrackerConfig {
            ami_variant: self.ami,
            n_tokens: self.n_tokens,
            ..base.clone()
        }
    }
}

/// Component variants at the base token count, then the token sweep of the
/// full module.
pub fn variants(base_tokens: usize) -> Vec<Variant> {
    let mut v = vec![
        Variant { label: "no-ami".into(), ami: None, n_tokens: base_tokens },
        Variant { label: "gmp-only".into(), ami: Some(AmiVariant::PerceptorOnly), n_tokens: base_tokens },
        Variant { label: "lt-only".into(), ami: Some(AmiVariant::TokensOnly), n_tokens: base_tokens },
    ];
    for nt in TOKEN_SWEEP {
        v.push(Variant {
            label: format!("full-nt{nt}"),
            ami: Some(AmiVariant::Full),
            n_tokens: nt,
        });
    }
    v
}

/// Random scene on the default canvas whose motion keeps the target inside.
pub fn random_scene(rng: &mut ChaCha8Rng, frames: usize) -> SceneSpec {
    let mut spec = SceneSpec {
        frames,
        shape: if rng.random_bool(0.5) { Shape::Box } else { Shape::Disc },
        target_w: rng.random_range(12.0..20.0),
        target_h: rng.random_range(10.0..18.0),
        ..Default::default()
    };
    let (w, h) = (spec.width as f64, spec.height as f64);
    for _ in 0..64 {
        spec.start = Some((rng.random_range(0.3 * w..0.7 * w), rng.random_range(0.3 * h..0.7 * h)));
        spec.motion = match rng.random_range(0..3) {
            0 => Motion::Linear {
                vx: rng.random_range(-0.6..0.6),
                vy: rng.random_range(-0.6..0.6),
            },
            1 => Motion::Sinusoidal {
                ax: rng.random_range(5.0..25.0),
                ay: rng.random_range(5.0..25.0),
                period: rng.random_range(30.0..90.0),
            },
            _ => Motion::RandomWalk { max_step: rng.random_range(0.5..2.0) },
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
    spec.start = None;
    spec.motion = Motion::Linear { vx: 0.0, vy: 0.0 };
    spec
}

/// `count` sequences with alternating single-modality blackouts.
pub fn blackout_set(count: usize, frames: usize, seed: u64) -> Result<Vec<SequenceDataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut spec = random_scene(&mut rng, frames);
            let lead = rng.random_range(5..15);
            spec.events = alternating_blackout(frames, lead, 10, 5);
            generate_sequence(&spec, rng.random())
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub base: TrackerConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
}

/// Tracks every sequence and pools the metrics per frame.
pub fn evaluate_tracker(tracker: &Tracker, sets: &[SequenceDataset]) -> Result<MetricsReport> {
    let inputs = sets
        .iter()
        .map(|ds| {
            Ok(EvalInput {
                preds: tracker.track_sequence(ds, false)?.boxes,
                gt: ds.gt.clone(),
                gt_x: ds.gt_x.clone(),
                visible: ds.visible.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&inputs)
}

/// Trains and evaluates one variant for one seed. Training and held-out
/// data depend only on the seed, so variants see identical data.
pub fn run_one(plan: &AblationPlan, variant: &Variant, seed: u64) -> Result<AblationRow> {
    let train_set = blackout_set(plan.train_sequences, plan.frames, seed.wrapping_mul(2).wrapping_add(1))?;
    let eval_set = blackout_set(plan.eval_sequences, plan.frames, seed.wrapping_mul(2).wrapping_add(2))?;
    let cfg = TrackerConfig {
        seed,
        ..variant.apply(&plan.base)
    };
    let report = train(&train_set, &cfg)?;
    let final_loss = report.final_loss(10);
    let tracker = Tracker::new(cfg, report.params)?;
    Ok(AblationRow {
        variant: variant.label.clone(),
        seed,
        report: evaluate_tracker(&tracker, &eval_set)?,
        final_loss,
    })
}

/// Mean success AUC of each variant over the seeds, in variant order.
pub fn mean_auc(rows: &[AblationRow], variants: &[Variant]) -> Vec<(String, f64)> {
    variants
        .iter()
        .map(|v| {
            let aucs: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v.label)
                .map(|r| r.report.standard.auc)
                .collect();
            (v.label.clone(), aucs.iter().sum::<f64>() / aucs.len().max(1) as f64)
        })
        .collect()
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,success_auc,precision@20,msr_auc,mpr@20,f_score,final_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant,
            r.seed,
            r.report.standard.auc,
            r.report.standard.pr20,
            r.report.dual.auc,
            r.report.dual.pr20,
            r.report.fscore.f,
            r.final_loss
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Modality;

    #[test]
    fn sweep_and_components() {
        let labels: Vec<String> = variants(32).into_iter().map(|v| v.label).collect();
        assert_eq!(
            labels,
            ["no-ami", "gmp-only", "lt-only", "full-nt0", "full-nt16", "full-nt32", "full-nt64"]
        );
        assert_eq!(TOKEN_SWEEP, [0, 16, 32, 64]);
    }

    #[test]
    fn random_scenes_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(random_scene(&mut rng, 60).validate().is_ok());
        }
    }

    #[test]
    fn blackout_sets_alternate_and_repeat() {
        let a = blackout_set(2, 40, 5).unwrap();
        assert_eq!(a, blackout_set(2, 40, 5).unwrap());
        let dark = |m: Modality| {
            a[0].frames
                .iter()
                .filter(|f| match m {
                    Modality::Rgb => f.rgb.max_value() == 0.0,
                    Modality::X => f.x.max_value() == 0.0,
                })
                .count()
        };
        assert!(dark(Modality::Rgb) > 0 && dark(Modality::X) > 0);
    }
}
