#![allow(dead_code)]

use mmgpl::diffcore::{DiffError, Differentiable, GradCheck, GradReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

/// Uniform entries in [-2, 2].
pub fn random(rng: &mut Pcg64, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Positive rows that each sum to one.
pub fn stochastic(rng: &mut Pcg64, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f32> = (0..cols).map(|_| rng.gen_range(0.01f32..1.0)).collect();
        let total: f32 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / total));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Library errors as tape errors, for use inside `differentiable!` bodies.
pub fn lift<T>(r: mmgpl::Result<T>) -> mmgpl::diffcore::Result<T> {
    r.map_err(|e| match e {
        mmgpl::Error::Diff(d) => d,
        other => DiffError::Contract(other.to_string()),
    })
}

/// Runs the finite-difference check on `instances` generated inputs.
pub fn gradcheck<G, F>(name: &str, instances: u64, mut gen: G, f: F) -> GradReport
where
    G: FnMut(&mut Pcg64) -> (Vec<Tensor>, Vec<bool>),
    F: Differentiable,
{
    let mut total = GradReport::default();
    for seed in 0..instances {
        let mut r = rng(seed ^ 0x6772_6164);
        let (inputs, diff) = gen(&mut r);
        let report = GradCheck::default()
            .run(&inputs, &diff, seed, &f)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        total.merge(report);
    }
    total
}

/// Six 16³ two-modality subjects, 8³ patches, 16-dim model.
pub fn tiny(arm: mmgpl::model::Arm) -> (mmgpl::config::RunConfig, mmgpl::run::Prepared) {
    use mmgpl::synthgen::{generate, synth_concepts, SynthSpec};
    let spec = SynthSpec {
        n_subjects: 6,
        dims: [16, 16, 16],
        lesion_centers: vec![vec![[4, 4, 4]], vec![[11, 11, 4]], vec![[4, 11, 11]]],
        lesion_radius: 2.0,
        patch_size: 8,
        ..SynthSpec::default()
    };
    let mut cfg = mmgpl::config::RunConfig::default();
    for (k, v) in [
        ("patch.size", "8"),
        ("model.dim", "16"),
        ("concepts.dim", "16"),
        ("encoder.heads", "2"),
        ("encoder.mlp_hidden", "32"),
        ("train.epochs", "3"),
        ("train.decay_epochs", "[1]"),
        ("train.batch_size", "4"),
        ("train.lr", "0.001"),
    ] {
        cfg.set_text(k, v).unwrap();
    }
    cfg.model.arm = arm;
    let subjects = generate(&spec).unwrap();
    let prepared = mmgpl::run::Prepared::from_subjects(&subjects, synth_concepts(&spec).unwrap(), &cfg).unwrap();
    (cfg, prepared)
}
