//! Finite-difference checks of the pipeline stages on 25 random instances each.

use mmgpl::diffcore::{differentiable, Differentiable, Tape, Tensor};
use mmgpl::encoder::{concept_logits, encoder_layer, layer_shapes, mhsa, HeadVars, LayerVars};
use mmgpl::graphprompt::{build_graph, gcn_forward, Activation};
use mmgpl::relevance::{apply_weights, similarity, token_weights, ProjectionVars};
use mmgpl::voltok::{align, tokenize, TokenizerVars};
use rand::Rng;
use rand_pcg::Pcg64;

mod common;
use common::{lift, random, stochastic};

const INSTANCES: u64 = 25;

fn check<G, F>(name: &str, gen: G, f: F)
where
    G: FnMut(&mut Pcg64) -> (Vec<Tensor>, Vec<bool>),
    F: Differentiable,
{
    let report = common::gradcheck(name, INSTANCES, gen, f);
    assert!(
        report.passed(),
        "{name}: {} of {} entries failed, first {:?}",
        report.failures.len(),
        report.checked,
        report.failures.first()
    );
}

fn dim(r: &mut Pcg64) -> usize {
    r.gen_range(1..=5)
}

#[test]
fn gcn_identity() {
    check(
        "gcn_forward",
        |r| {
            let (n, d, o) = (dim(r), dim(r), dim(r));
            (vec![stochastic(r, n, n), random(r, n, d), random(r, d, o)], vec![true, true, true])
        },
        differentiable!(|t, v| lift(gcn_forward(t, v[0], v[1], v[2], Activation::Identity))),
    );
}

#[test]
fn gcn_relu() {
    check(
        "gcn_forward relu",
        |r| loop {
            let (n, d, o) = (dim(r), dim(r), dim(r));
            let inputs = vec![stochastic(r, n, n), random(r, n, d), random(r, d, o)];
            // keep pre-activations off the kink
            let mut tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let pre = gcn_forward(&mut tape, vars[0], vars[1], vars[2], Activation::Identity).unwrap();
            if tape.data(pre).iter().all(|v| v.abs() > 0.05) {
                return (inputs, vec![true, true, true]);
            }
        },
        differentiable!(|t, v| lift(gcn_forward(t, v[0], v[1], v[2], Activation::Relu))),
    );
}

#[test]
fn graph_construction() {
    check(
        "build_graph",
        |r| {
            let (n, c) = (dim(r), dim(r) + 1);
            (vec![stochastic(r, n, c)], vec![true])
        },
        differentiable!(|t, v| lift(build_graph(t, v[0], T::lit(0.3)))),
    );
}

fn layer_inputs(r: &mut Pcg64) -> (Vec<Tensor>, Vec<bool>, usize) {
    let heads = r.gen_range(1..=2);
    let dim = heads * r.gen_range(1..=3);
    let n = r.gen_range(1..=4);
    let mut inputs = vec![random(r, n, dim)];
    for (name, [rows, cols]) in layer_shapes(dim, r.gen_range(1..=5)) {
        let t = random(r, rows, cols);
        let scale = if name.ends_with("gain") { 0.2 } else { 0.5 };
        let offset = if name.ends_with("gain") { 1.0 } else { 0.0 };
        inputs.push(Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| offset + scale * x).collect()).unwrap());
    }
    let n_inputs = inputs.len();
    (inputs, vec![true; n_inputs], heads)
}

#[test]
fn self_attention() {
    for heads in 1..=2 {
        let gen = |r: &mut Pcg64| loop {
            let (i, d, h) = layer_inputs(r);
            if h == heads {
                return (i, d);
            }
        };
        if heads == 1 {
            check("mhsa", gen, differentiable!(|t, v| lift(mhsa(t, v[0], &LayerVars::from_slice(&v[1..]), 1))));
        } else {
            check("mhsa", gen, differentiable!(|t, v| lift(mhsa(t, v[0], &LayerVars::from_slice(&v[1..]), 2))));
        }
    }
}

#[test]
fn transformer_layer() {
    // layer norm over two features is nearly a sign function, too curved for a 1e-3 step
    let gen = |r: &mut Pcg64| loop {
        let (i, d, h) = layer_inputs(r);
        if h == 2 && i[0].shape()[1] >= 4 {
            return (i, d);
        }
    };
    check(
        "encoder_layer",
        gen,
        differentiable!(|t, v| lift(encoder_layer(t, v[0], &LayerVars::from_slice(&v[1..]), 2))),
    );
}

#[test]
fn cosine_head() {
    check(
        "concept_logits",
        |r| {
            let (d, txt, concepts) = (dim(r), dim(r) + 1, dim(r));
            (
                vec![random(r, 1, d), random(r, concepts, txt), random(r, d, txt), random(r, 1, txt)],
                vec![true, true, true, true],
            )
        },
        differentiable!(|t, v| {
            let head = HeadVars { w: v[2], b: v[3] };
            lift(concept_logits(t, v[0], v[1], &head, T::lit(0.5)))
        }),
    );
}

#[test]
fn tokenizer() {
    check(
        "tokenize",
        |r| {
            let (n, len, d) = (dim(r), dim(r), dim(r));
            (
                vec![random(r, n, len), random(r, len, d), random(r, 1, d), random(r, n, d)],
                vec![false, true, true, true],
            )
        },
        differentiable!(|t, v| {
            let p = TokenizerVars {
                proj: v[1],
                bias: v[2],
                pos: v[3],
            };
            lift(tokenize(t, v[0], &p))
        }),
    );
}

#[test]
fn modality_alignment() {
    check(
        "align",
        |r| {
            let (n0, n1, d) = (dim(r), dim(r), dim(r));
            (
                vec![random(r, n0, d), random(r, n1, d), random(r, d, d), random(r, 1, d), random(r, 2, d)],
                vec![true; 5],
            )
        },
        differentiable!(|t, v| lift(align(t, &[(0, v[0]), (1, v[1])], v[2], v[3], v[4]).map(|(x, _)| x))),
    );
}

#[test]
fn concept_similarity() {
    check(
        "similarity",
        |r| {
            let (n, d, txt, concepts) = (dim(r), dim(r), dim(r) + 1, dim(r));
            (
                vec![random(r, n, d), random(r, concepts, txt), random(r, d, txt), random(r, 1, txt)],
                vec![true, true, true, true],
            )
        },
        differentiable!(|t, v| {
            let p = ProjectionVars { w: v[2], b: v[3] };
            lift(similarity(t, v[0], v[1], &p, T::lit(0.5)))
        }),
    );
}

#[test]
fn relevance_weights() {
    check(
        "token_weights",
        |r| {
            let n = dim(r);
            (vec![random(r, n, 6)], vec![true])
        },
        // similarity rows always come out of a softmax, so check through one
        differentiable!(|t, v| {
            let s = t.softmax(v[0], 1, T::lit(0.5))?;
            lift(token_weights(t, s, 1, 3, 2))
        }),
    );
}

#[test]
fn weighted_tokens() {
    check(
        "apply_weights",
        |r| {
            let (n, d) = (dim(r), dim(r));
            (vec![random(r, n, d), random(r, n, 1)], vec![true, true])
        },
        differentiable!(|t, v| lift(apply_weights(t, v[0], v[1]))),
    );
}

