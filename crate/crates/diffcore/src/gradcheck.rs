//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of every
//! backward rule it is used to verify.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            rtol: 1e-3,
            atol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest relative error among entries whose absolute error exceeds `atol`.
    pub max_rel: f64,
    pub max_abs: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.failures.extend(other.failures);
    }
}

/// A forward computation that can be replayed at any precision.
///
/// Analytic gradients are taken on an `f32` tape; the numeric side replays the
/// same computation on an `f64` tape so central differences are not swamped by
/// single-precision rounding. Use [`differentiable!`](crate::differentiable) to
/// build one from a closure-like body.
pub trait Differentiable {
    fn eval<T: Real>(&self, tape: &mut Tape<'_, T>, inputs: &[Var]) -> Result<Var>;
}

/// Wraps `|tape, vars| body` into a [`Differentiable`]. Inside the body the
/// element type is named `T`; write constants as `T::lit(0.5)`.
#[macro_export]
macro_rules! differentiable {
    (|$tape:ident, $v:ident| $body:expr) => {{
        #[derive(Clone, Copy)]
        struct Body;
        impl $crate::gradcheck::Differentiable for Body {
            #[allow(unused_variables)]
            fn eval<T: $crate::Real>(
                &self,
                $tape: &mut $crate::Tape<'_, T>,
                $v: &[$crate::Var],
            ) -> $crate::Result<$crate::Var> {
                $body
            }
        }
        Body
    }};
}

impl GradCheck {
    /// Checks d/d(inputs) of `sum(R ⊙ f(inputs))` for a seeded random readout `R`.
    ///
    /// Inputs flagged `false` in `differentiate` enter as constants and are not checked.
    pub fn run<F: Differentiable>(
        &self,
        inputs: &[Tensor],
        differentiate: &[bool],
        readout_seed: u64,
        f: &F,
    ) -> Result<GradReport> {
        assert_eq!(inputs.len(), differentiate.len());
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(differentiate)
            .map(|(t, &d)| tape.leaf(t.clone().with_requires_grad(d)))
            .collect();
        let out = f.eval(&mut tape, &vars)?;
        let (r, c) = tape.dims(out);
        let mut rng = Pcg64::seed_from_u64(readout_seed);
        let readout: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rv = tape.constant(Tensor::new(vec![r, c], readout.iter().map(|&v| v as f32).collect())?);
        let weighted = tape.mul(out, rv)?;
        let loss = tape.sum(weighted);
        tape.backward(loss)?;
        let analytic: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();

        let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
            let mut t = Tape::<f64>::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
            let o = f.eval(&mut t, &vs)?;
            Ok(t.data(o).iter().zip(&readout).map(|(a, b)| a * b).sum())
        };

        let mut report = GradReport::default();
        let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
        for (input, grads) in analytic.iter().enumerate() {
            if !differentiate[input] {
                continue;
            }
            let zeros = vec![0.0; inputs[input].len()];
            let grads = grads.as_deref().unwrap_or(&zeros);
            for (index, &a) in grads.iter().enumerate() {
                let x = work[input].data()[index];
                work[input].data_mut()[index] = x + self.step;
                let fp = eval(&work)?;
                work[input].data_mut()[index] = x - self.step;
                let fm = eval(&work)?;
                work[input].data_mut()[index] = x;
                let numeric = (fp - fm) / (2.0 * self.step);
                let analytic = f64::from(a);
                let abs = (analytic - numeric).abs();
                report.checked += 1;
                report.max_abs = report.max_abs.max(abs);
                if abs > self.atol {
                    let rel = abs / analytic.abs().max(numeric.abs());
                    report.max_rel = report.max_rel.max(rel);
                    if rel >= self.rtol {
                        report.failures.push(Mismatch {
                            input,
                            index,
                            analytic,
                            numeric,
                        });
                    }
                }
            }
        }
        Ok(report)
    }
}
