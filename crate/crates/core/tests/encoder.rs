use mmgpl::diffcore::{Tape, Tensor, Var};
use mmgpl::encoder::{
    category_mean_matrix, class_logits, concept_logits, encode, encoder_layer, layer_shapes, mhsa, mhsa_with_attention,
    HeadVars, LayerVars,
};
use mmgpl::model::Arm;
use mmgpl::relevance::Mode;
use mmgpl::trainer::train;
use rand::Rng;
use rand_pcg::Pcg64;

mod common;

/// Random layer tensors in field order; gains are near one.
fn layer_tensors(r: &mut Pcg64, dim: usize, hidden: usize) -> Vec<Tensor> {
    layer_shapes(dim, hidden)
        .iter()
        .map(|(name, [rows, cols])| {
            let t = common::random(r, *rows, *cols);
            if name.ends_with("gain") {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 1.0 + 0.1 * v).collect()).unwrap()
            } else {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 0.4 * v).collect()).unwrap()
            }
        })
        .collect()
}

fn bind(tape: &mut Tape<'_>, tensors: &[Tensor]) -> LayerVars {
    let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
    LayerVars::from_slice(&vars)
}

#[test]
fn single_token_attends_to_itself() {
    let mut r = common::rng(1);
    for _ in 0..50 {
        let (heads, dk) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let dim = heads * dk;
        let ts = layer_tensors(&mut r, dim, 4);
        let x = common::random(&mut r, 1, dim);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &ts);
        let xv = tape.constant(x.clone());
        let out = mhsa(&mut tape, xv, &p, heads).unwrap();
        // (x Wv + bv) Wo + bo in f64
        let v: Vec<f64> = (0..dim)
            .map(|j| {
                f64::from(ts[7].at(0, j)) + (0..dim).map(|i| f64::from(x.at(0, i)) * f64::from(ts[6].at(i, j))).sum::<f64>()
            })
            .collect();
        for (o, got) in tape.data(out).iter().enumerate() {
            let want = f64::from(ts[9].at(0, o)) + (0..dim).map(|j| v[j] * f64::from(ts[8].at(j, o))).sum::<f64>();
            assert!((f64::from(*got) - want).abs() < 1e-5 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn zero_input_zero_bias_gives_zero() {
    let mut r = common::rng(2);
    let mut ts = layer_tensors(&mut r, 4, 6);
    for i in [3, 5, 7, 9] {
        ts[i] = Tensor::zeros(&[1, 4]);
    }
    let mut tape = Tape::new();
    let p = bind(&mut tape, &ts);
    let x = tape.constant(Tensor::zeros(&[5, 4]));
    let out = mhsa(&mut tape, x, &p, 2).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = common::rng(3);
    for _ in 0..100 {
        let n = r.gen_range(1..=8);
        let ts = layer_tensors(&mut r, 6, 4);
        let x = common::random(&mut r, n, 6);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &ts);
        let xv = tape.constant(x);
        let (out, attns) = mhsa_with_attention(&mut tape, xv, &p, 3).unwrap();
        assert_eq!(tape.dims(out), (n, 6));
        assert_eq!(attns.len(), 3);
        for a in attns {
            for row in tape.data(a).chunks(n) {
                let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn zero_output_projections_make_identity() {
    let mut r = common::rng(4);
    let mut ts = layer_tensors(&mut r, 4, 8);
    ts[8] = Tensor::zeros(&[4, 4]);
    ts[9] = Tensor::zeros(&[1, 4]);
    ts[14] = Tensor::zeros(&[8, 4]);
    ts[15] = Tensor::zeros(&[1, 4]);
    let x = common::random(&mut r, 5, 4);
    let mut tape = Tape::new();
    let p = bind(&mut tape, &ts);
    let xv = tape.constant(x.clone());
    let out = encoder_layer(&mut tape, xv, &p, 2).unwrap();
    assert_eq!(tape.data(out), x.data());
}

#[test]
fn no_layers_is_the_token_mean() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 3.0]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pooled = encode(&mut tape, xv, &[], 1).unwrap();
    assert_eq!(tape.dims(pooled), (1, 2));
    assert_eq!(tape.data(pooled), &[2.0, 1.0]);
}

#[test]
fn pooled_output_ignores_token_order() {
    let mut r = common::rng(5);
    for _ in 0..50 {
        let n = r.gen_range(2..=6);
        let layers: Vec<Vec<Tensor>> = (0..2).map(|_| layer_tensors(&mut r, 4, 8)).collect();
        let x = common::random(&mut r, n, 4);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let px = Tensor::new(vec![n, 4], (0..n * 4).map(|k| x.at(perm[k / 4], k % 4)).collect()).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let vars: Vec<LayerVars> = layers.iter().map(|l| bind(&mut tape, l)).collect();
            let xv = tape.constant(input.clone());
            let pooled = encode(&mut tape, xv, &vars, 2).unwrap();
            tape.data(pooled).to_vec()
        };
        for (a, b) in run(&x).iter().zip(run(&px)) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

fn head_scores(z: &[f32], w: Tensor, b: Tensor, concepts: Tensor, tau: f32) -> Vec<f32> {
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec()).unwrap());
    let c = tape.constant(concepts);
    let head = HeadVars {
        w: tape.constant(w),
        b: tape.constant(b),
    };
    let out = concept_logits(&mut tape, zv, c, &head, tau).unwrap();
    tape.data(out).to_vec()
}

#[test]
fn cosine_head_examples() {
    let concepts = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let got = head_scores(&[5.0, 0.0], Tensor::identity(2), Tensor::zeros(&[1, 2]), concepts.clone(), 1.0);
    assert_eq!(got, vec![1.0, 0.0]);
    let got = head_scores(&[1.0, 0.0], Tensor::identity(2), Tensor::zeros(&[1, 2]), concepts, 0.5);
    assert_eq!(got, vec![2.0, 0.0]);
}

#[test]
fn class_logits_match_category_means() {
    let mut r = common::rng(6);
    for _ in 0..200 {
        let (classes, per_class) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let rows = r.gen_range(1..=3);
        let scores = common::random(&mut r, rows, classes * per_class);
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let out = class_logits(&mut tape, s, classes, per_class).unwrap();
        for i in 0..rows {
            for c in 0..classes {
                let want = (0..per_class).map(|k| f64::from(scores.at(i, c * per_class + k))).sum::<f64>() / per_class as f64;
                let got = f64::from(tape.data(out)[i * classes + c]);
                assert!((got - want).abs() < 1e-6);
            }
        }
    }
    let uniform = Tensor::filled(&[1, 6], 0.3);
    let mut tape = Tape::new();
    let s = tape.constant(uniform);
    let out = class_logits(&mut tape, s, 3, 2).unwrap();
    assert!(tape.data(out).iter().all(|&v: &f32| (v - 0.3).abs() < 1e-7));
    assert_eq!(category_mean_matrix::<f32>(2, 2).shape(), &[4, 2]);
}

#[test]
fn scaling_the_subject_keeps_the_class() {
    // holds for a bias-free projection, which is how the head starts out
    let mut r = common::rng(7);
    for _ in 0..200 {
        let z = common::random(&mut r, 1, 5);
        let w = common::random(&mut r, 5, 4);
        let concepts = common::random(&mut r, 6, 4);
        let alpha: f32 = r.gen_range(0.01..100.0);
        let scaled: Vec<f32> = z.data().iter().map(|v| v * alpha).collect();
        let base = head_scores(z.data(), w.clone(), Tensor::zeros(&[1, 4]), concepts.clone(), 0.1);
        let moved = head_scores(&scaled, w, Tensor::zeros(&[1, 4]), concepts, 0.1);
        let class = |s: &[f32]| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![1, 6], s.to_vec()).unwrap());
            let l = class_logits(&mut tape, v, 3, 2).unwrap();
            mmgpl::model::argmax(tape.data(l))
        };
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(class(&base), class(&moved));
    }
}

#[test]
fn frozen_encoder_is_bitwise_unchanged() {
    let (mut cfg, data) = common::tiny(Arm::BWG);
    cfg.model.encoder.frozen = true;
    let mut model = data.model(&cfg, 3).unwrap();
    let encoder_ids = model.encoder_params();
    let before: Vec<Vec<u32>> = encoder_ids
        .iter()
        .map(|&id| model.params.get(id).data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let checksum = model.params.checksum();
    let idx: Vec<usize> = (0..data.inputs.len()).collect();
    train(&mut model, &data.inputs, &idx, &cfg.train, 3, |_| {}).unwrap();
    for (id, want) in encoder_ids.iter().zip(&before) {
        let got: Vec<u32> = model.params.get(*id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(&got, want);
    }
    // the rest did train
    assert_ne!(model.params.checksum(), checksum);
}

#[test]
fn every_parameter_receives_gradient() {
    for seed in 0..5 {
        let (cfg, data) = common::tiny(Arm::BWG);
        let model = data.model(&cfg, seed).unwrap();
        let input = &data.inputs[seed as usize];
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let f = model.forward(&mut tape, &bound, input, Mode::Train { label: input.label }).unwrap();
        let loss = tape.cross_entropy(f.logits, &[input.label]).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape);
        for ((_, p), g) in model.params.iter().zip(&grads) {
            let g = g.as_ref().unwrap_or_else(|| panic!("seed {seed}: no gradient for {}", p.name));
            assert!(g.iter().all(|v| v.is_finite()), "{}", p.name);
            assert!(g.iter().any(|&v| v != 0.0), "seed {seed}: zero gradient for {}", p.name);
        }
    }
}
