//! Central finite-difference checks for every tape primitive.

mod common;

use common::{gradcheck, random, rng, weighted_sum};
use supervit::numerics::{Graph, Tensor, Var};

const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn check(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var], u64) -> Var) {
    for seed in SEEDS {
        let mut r = rng(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut r)).collect();
        let err = gradcheck(&inputs, |g, v| build(g, v, seed));
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

fn probs(g: &mut Graph<f64>, v: Var) -> Var {
    g.softmax(v)
}

#[test]
fn matmul() {
    check("matmul", &[&[3, 4], &[4, 5]], |g, v, s| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    });
}

#[test]
fn linear_with_bias() {
    check("linear", &[&[2, 3, 4], &[4, 5], &[5]], |g, v, s| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        weighted_sum(g, y, s)
    });
}

#[test]
fn batch_matmul_both_layouts() {
    check("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v, s| {
        let y = g.batch_matmul(v[0], v[1], false).unwrap();
        weighted_sum(g, y, s)
    });
    check("bmm_t", &[&[2, 2, 3, 4], &[2, 2, 5, 4]], |g, v, s| {
        let y = g.batch_matmul(v[0], v[1], true).unwrap();
        weighted_sum(g, y, s)
    });
}

#[test]
fn elementwise() {
    check("add", &[&[3, 4], &[3, 4]], |g, v, s| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    });
    check("mul", &[&[3, 4], &[3, 4]], |g, v, s| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    });
    check("add_broadcast", &[&[2, 3, 4], &[3, 4]], |g, v, s| {
        let y = g.add_broadcast(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    });
    check("scale+mean", &[&[5]], |g, v, _| {
        let y = g.scale(v[0], 3.5);
        let sq = g.mul(y, y).unwrap();
        g.mean(sq)
    });
}

#[test]
fn softmax() {
    check("softmax", &[&[3, 6]], |g, v, s| {
        let y = g.softmax(v[0]);
        weighted_sum(g, y, s)
    });
}

#[test]
fn layer_norm() {
    check("layer_norm", &[&[4, 8], &[8], &[8]], |g, v, s| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        weighted_sum(g, y, s)
    });
}

#[test]
fn gelu() {
    check("gelu", &[&[20]], |g, v, s| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, s)
    });
}

#[test]
fn shape_ops() {
    check("reshape+permute", &[&[2, 3, 4, 5]], |g, v, s| {
        let p = g.permute(v[0], &[0, 2, 1, 3]).unwrap();
        let r = g.reshape(p, &[8, 15]).unwrap();
        weighted_sum(g, r, s)
    });
    check("concat", &[&[2, 1, 3], &[2, 4, 3]], |g, v, s| {
        let c = g.concat(&[v[0], v[1]], 1).unwrap();
        weighted_sum(g, c, s)
    });
    check("broadcast_leading", &[&[1, 3]], |g, v, s| {
        let c = g.broadcast_leading(v[0], 4).unwrap();
        weighted_sum(g, c, s)
    });
    check("gather_rows", &[&[2, 5, 3]], |g, v, s| {
        let c = g.gather_rows(v[0], vec![vec![0, 2, 4], vec![0, 1, 1]]).unwrap();
        weighted_sum(g, c, s)
    });
}

#[test]
fn bilinear_resize() {
    for (h, w) in [(3, 3), (7, 2), (2, 5)] {
        check("resize", &[&[2, 4, 5, 2]], move |g, v, s| {
            let y = g.bilinear_resize(v[0], h, w).unwrap();
            weighted_sum(g, y, s)
        });
    }
}

#[test]
fn cross_entropy_through_softmax() {
    check("cross_entropy", &[&[3, 4]], |g, v, _| {
        let p = probs(g, v[0]);
        g.cross_entropy(p, &[0, 3, 1]).unwrap()
    });
}

#[test]
fn kl_both_arguments() {
    check("kl", &[&[3, 4], &[3, 4]], |g, v, _| {
        let p = probs(g, v[0]);
        let q = probs(g, v[1]);
        g.kl_divergence(p, q).unwrap()
    });
}

#[test]
fn sum_of_x_and_square() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn fan_out_accumulates_like_duplicated_parameter() {
    let mut r = rng(11);
    let x = random(&[3, 3], &mut r);
    let (w1, w2) = (random(&[3, 3], &mut r), random(&[3, 3], &mut r));

    // shared: f(x) = sum(tanh-free branch mix) using x twice
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let (a, b) = (g.constant(w1.clone()), g.constant(w2.clone()));
    let y1 = g.matmul(xv, a).unwrap();
    let y2 = g.matmul(b, xv).unwrap();
    let y1 = g.gelu(y1);
    let s = g.add(y1, y2).unwrap();
    let loss = g.sum(s);
    let shared = g.backward(loss).unwrap().wrt(xv).unwrap().clone();

    // duplicated: two independent copies, gradients summed by hand
    let mut g = Graph::new();
    let x1 = g.param(x.clone());
    let x2 = g.param(x);
    let (a, b) = (g.constant(w1), g.constant(w2));
    let y1 = g.matmul(x1, a).unwrap();
    let y2 = g.matmul(b, x2).unwrap();
    let y1 = g.gelu(y1);
    let s = g.add(y1, y2).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    let mut expected = grads.wrt(x1).unwrap().clone();
    for (e, &v) in expected.data_mut().iter_mut().zip(grads.wrt(x2).unwrap().data()) {
        *e += v;
    }
    assert!(shared.max_abs_diff(&expected) < 1e-14);
}

#[test]
fn querying_foreign_variable_is_rejected() {
    let mut g1 = Graph::<f64>::new();
    let a = g1.param(Tensor::ones(&[2]));
    let s = g1.sum(a);
    let grads = g1.backward(s).unwrap();
    let mut g2 = Graph::<f64>::new();
    let b = g2.param(Tensor::ones(&[2]));
    assert!(grads.get(b).is_err());
    let c = g1.constant(Tensor::ones(&[2]));
    assert!(grads.get(c).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.5, -0.5]);
}
