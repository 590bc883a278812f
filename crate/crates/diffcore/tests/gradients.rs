//! Finite-difference checks for every differentiable op on 25 random instances.

use mmgpl_diffcore::{differentiable, Differentiable, GradCheck, GradReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

const INSTANCES: u64 = 25;

fn random(rng: &mut Pcg64, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Values bounded away from the ReLU kink so the central difference stays on one side.
fn away_from_zero(rng: &mut Pcg64, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f32 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn dim(rng: &mut Pcg64) -> usize {
    rng.gen_range(1..=6)
}

fn check_op<G, F>(name: &str, mut gen: G, f: F)
where
    G: FnMut(&mut Pcg64) -> (Vec<Tensor>, Vec<bool>),
    F: Differentiable,
{
    let mut total = GradReport::default();
    for seed in 0..INSTANCES {
        let mut rng = Pcg64::seed_from_u64(seed ^ 0xd1ff);
        let (inputs, diff) = gen(&mut rng);
        let report = GradCheck::default().run(&inputs, &diff, seed, &f).unwrap();
        total.merge(report);
    }
    assert!(
        total.passed(),
        "{name}: {} of {} entries failed, first {:?}",
        total.failures.len(),
        total.checked,
        total.failures.first()
    );
}

#[test]
fn matmul() {
    check_op(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            (vec![random(r, m, k), random(r, k, n)], vec![true, true])
        },
        differentiable!(|t, v| t.matmul(v[0], v[1])),
    );
}

#[test]
fn matmul_nt() {
    check_op(
        "matmul_nt",
        |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            (vec![random(r, m, k), random(r, n, k)], vec![true, true])
        },
        differentiable!(|t, v| t.matmul_nt(v[0], v[1])),
    );
}

#[test]
fn softmax_both_axes() {
    check_op(
        "softmax",
        |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![random(r, m, n)], vec![true])
        },
        differentiable!(|t, v| {
            let a = t.softmax(v[0], 1, T::lit(0.7))?;
            let b = t.softmax(v[0], 0, T::lit(1.3))?;
            t.add(a, b)
        }),
    );
}

#[test]
fn layernorm() {
    check_op(
        "layernorm",
        |r| {
            let (m, n) = (dim(r), r.gen_range(2..=6));
            (vec![random(r, m, n), random(r, 1, n), random(r, 1, n)], vec![true, true, true])
        },
        differentiable!(|t, v| t.layernorm(v[0], v[1], v[2], T::lit(1e-5))),
    );
}

#[test]
fn cosine_rows() {
    check_op(
        "cosine_rows",
        |r| {
            let (n, m, d) = (dim(r), dim(r), r.gen_range(2..=6));
            (vec![away_from_zero(r, n, d), away_from_zero(r, m, d)], vec![true, true])
        },
        differentiable!(|t, v| t.cosine_rows(v[0], v[1])),
    );
}

#[test]
fn cross_entropy() {
    check_op(
        "cross_entropy",
        |r| {
            let (n, c) = (dim(r), r.gen_range(2..=6));
            (vec![random(r, n, c)], vec![true])
        },
        differentiable!(|t, v| {
            // labels cycle through the classes
            let (n, c) = t.dims(v[0]);
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % c).collect();
            t.cross_entropy(v[0], &labels)
        }),
    );
}

#[test]
fn elementwise_and_broadcast() {
    check_op(
        "add/mul/scale/add_row/scale_rows",
        |r| {
            let (m, n) = (dim(r), dim(r));
            (
                vec![random(r, m, n), random(r, m, n), random(r, 1, n), random(r, m, 1)],
                vec![true, true, true, true],
            )
        },
        differentiable!(|t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            let q = t.scale(p, T::lit(-0.75));
            let b = t.add_row(q, v[2])?;
            t.scale_rows(b, v[3])
        }),
    );
}

#[test]
fn relu_and_gelu() {
    check_op(
        "relu",
        |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![away_from_zero(r, m, n)], vec![true])
        },
        differentiable!(|t, v| Ok(t.relu(v[0]))),
    );
    check_op(
        "gelu",
        |r| {
            let (m, n) = (dim(r), dim(r));
            (vec![random(r, m, n)], vec![true])
        },
        differentiable!(|t, v| Ok(t.gelu(v[0]))),
    );
}

#[test]
fn structural() {
    check_op(
        "transpose/concat/slice/mean/gather/reshape",
        |r| {
            let (m, n) = (dim(r), r.gen_range(2..=6));
            (vec![random(r, m, n), random(r, m, n)], vec![true, true])
        },
        differentiable!(|t, v| {
            let (m, n) = t.dims(v[0]);
            let tr = t.transpose(v[1]);
            let back = t.transpose(tr);
            let cat = t.concat_cols(&[v[0], back])?;
            let sl = t.slice_cols(cat, 1, n)?;
            let rows = t.concat_rows(&[sl, v[0]])?;
            let idx: Vec<usize> = (0..2 * m).rev().step_by(2).chain([0, 0]).collect();
            let g = t.gather_rows(rows, &idx)?;
            let mean0 = t.mean_axis(g, 0)?;
            let mean1 = t.mean_axis(g, 1)?;
            let flat = t.reshape(mean1, 1, idx.len())?;
            let total = t.sum(flat);
            let s = t.scale_rows(mean0, total)?;
            Ok(t.concat_cols(&[s, flat])?)
        }),
    );
}

#[test]
fn normalized_adjacency_and_row_normalize() {
    check_op(
        "normalized_adjacency",
        |r| {
            let n = dim(r);
            let data = (0..n * n).map(|_| r.gen_range(0.0f32..2.0)).collect();
            (vec![Tensor::new(vec![n, n], data).unwrap()], vec![true])
        },
        differentiable!(|t, v| t.normalized_adjacency(v[0])),
    );
    check_op(
        "row_normalize",
        |r| {
            let (m, n) = (dim(r), dim(r));
            let data = (0..m * n).map(|_| r.gen_range(0.1f32..2.0)).collect();
            (vec![Tensor::new(vec![m, n], data).unwrap()], vec![true])
        },
        differentiable!(|t, v| t.row_normalize(v[0])),
    );
}
