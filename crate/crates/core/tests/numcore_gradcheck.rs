use copycap::numcore::gradcheck::{check_inputs, check_inputs_with_dropout, FD_STEP};
use copycap::numcore::{Axis, Graph, Mask, Tensor, TensorError, Var, LAYER_NORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so the loss is sensitive to every
/// output entry differently.
fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(y, w)?;
    g.sum(p)
}

const SEEDS: u64 = 12;
const TOL: f64 = 1e-5;

fn assert_check(name: &str, inputs: &[Tensor], seed: u64, build: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>) {
    let report = check_inputs(inputs, FD_STEP, |g, v| {
        let y = build(g, v)?;
        weighted_sum(g, y, seed)
    })
    .unwrap();
    assert!(report.passes(TOL), "{name} seed {seed}: {report:?}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        assert_check("matmul", &[a.clone(), b], seed, |g, v| g.matmul(v[0], v[1]));
        let row = random(&mut rng, &[4]);
        let m = random(&mut rng, &[4, 3]);
        assert_check("matmul_row", &[row.clone(), m], seed, |g, v| g.matmul(v[0], v[1]));
        assert_check("transpose", std::slice::from_ref(&a), seed, |g, v| g.transpose(v[0]));
        let a2 = random(&mut rng, &[3, 4]);
        assert_check("add", &[a.clone(), a2.clone()], seed, |g, v| g.add(v[0], v[1]));
        assert_check("add_row", &[a.clone(), row.clone()], seed, |g, v| g.add_row(v[0], v[1]));
        assert_check("mul", &[a.clone(), a2.clone()], seed, |g, v| g.mul(v[0], v[1]));
        assert_check("scale", std::slice::from_ref(&a), seed, |g, v| g.scale(v[0], -2.5));
        assert_check("tanh", std::slice::from_ref(&a), seed, |g, v| g.tanh(v[0]));
        assert_check("relu", std::slice::from_ref(&a), seed, |g, v| g.relu(v[0]));
        assert_check("log", &[positive(&mut rng, &[3, 4])], seed, |g, v| g.log(v[0]));
        assert_check("softmax", std::slice::from_ref(&a), seed, |g, v| g.softmax(v[0], None));
        assert_check("softmax_masked", std::slice::from_ref(&a), seed, |g, v| g.softmax(v[0], Some(Mask::hiding(4, &[1]))));
        assert_check("log_softmax", std::slice::from_ref(&a), seed, |g, v| g.log_softmax(v[0], None));
        let per_elem = Mask::from_allowed((0..12).map(|i| i % 5 != 0).collect());
        assert_check("log_softmax_masked", std::slice::from_ref(&a), seed, move |g, v| {
            let y = g.log_softmax(v[0], Some(per_elem.clone()))?;
            // Masked positions are placeholders; read only allowed entries.
            let keep: Vec<usize> = (0..12).filter(|i| i % 5 != 0).collect();
            g.pick(y, &keep)
        });
        let x8 = random(&mut rng, &[2, 8]);
        let gain = random(&mut rng, &[8]);
        let shift = random(&mut rng, &[8]);
        assert_check("layer_norm", &[x8, gain, shift], seed, |g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS));
        let c1 = random(&mut rng, &[3, 2]);
        assert_check("concat_cols", &[a.clone(), c1], seed, |g, v| g.concat(&[v[0], v[1]], Axis::Cols));
        let r1 = random(&mut rng, &[2, 4]);
        assert_check("concat_rows", &[a.clone(), r1], seed, |g, v| g.concat(&[v[0], v[1]], Axis::Rows));
        assert_check("gather_rows", std::slice::from_ref(&a), seed, |g, v| g.gather_rows(v[0], &[2, 0, 2]));
        assert_check("slice_rows", std::slice::from_ref(&a), seed, |g, v| g.slice_rows(v[0], 1, 2));
        assert_check("pick", std::slice::from_ref(&a), seed, |g, v| g.pick(v[0], &[0, 5, 5, 11]));
        assert_check("mean", std::slice::from_ref(&a), seed, |g, v| g.mean(v[0]));
        let report = check_inputs_with_dropout(std::slice::from_ref(&a), FD_STEP, Some(seed), |g, v| {
            let y = g.dropout(v[0], 0.3)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(report.passes(TOL), "dropout seed {seed}: {report:?}");
    }
}

#[test]
fn dropout_primitive_backward_uses_its_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 5]);
        let mut g = Graph::new().train_mode(seed);
        let v = g.leaf(x.clone(), true);
        let y = g.dropout(v, 0.3).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        // d sum(mask * x)/dx = mask = y / x elementwise.
        for ((gv, yv), xv) in grads.wrt(v).unwrap().data().iter().zip(g.value(y).data()).zip(x.data()) {
            assert!((gv - yv / xv).abs() < 1e-12);
        }
    }
}

/// LN(x W + e) from the object representation, composed from primitives.
#[test]
fn composite_projection_layer_norm_graph() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let r = random(&mut rng, &[6]);
        let w = random(&mut rng, &[6, 5]);
        let e = random(&mut rng, &[5]);
        let gain = random(&mut rng, &[5]);
        let shift = random(&mut rng, &[5]);
        let report = check_inputs(&[r, w, e, gain, shift], FD_STEP, |g, v| {
            let proj = g.matmul(v[0], v[1])?;
            let sum = g.add(proj, v[2])?;
            let y = g.layer_norm(sum, v[3], v[4], LAYER_NORM_EPS)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn shared_subexpression_equals_expanded_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 3]);
    let w = random(&mut rng, &[3, 3]);

    // Shared: h = tanh(x W); loss = sum(h * h + h)
    let mut g = Graph::new();
    let (vx, vw) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true));
    let xw = g.matmul(vx, vw).unwrap();
    let h = g.tanh(xw).unwrap();
    let hh = g.mul(h, h).unwrap();
    let s = g.add(hh, h).unwrap();
    let loss = g.sum(s).unwrap();
    let shared = g.backward(loss).unwrap();

    // Expanded: every use of h recomputed from scratch.
    let mut e = Graph::new();
    let (ex, ew) = (e.leaf(x, true), e.leaf(w, true));
    let mut hs = Vec::new();
    for _ in 0..3 {
        let xw = e.matmul(ex, ew).unwrap();
        hs.push(e.tanh(xw).unwrap());
    }
    let hh = e.mul(hs[0], hs[1]).unwrap();
    let s = e.add(hh, hs[2]).unwrap();
    let loss = e.sum(s).unwrap();
    let expanded = e.backward(loss).unwrap();

    for (a, b) in [(vx, ex), (vw, ew)] {
        for (p, q) in shared.wrt(a).unwrap().data().iter().zip(expanded.wrt(b).unwrap().data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_for_large_inputs(values in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(values).unwrap());
        let y = g.softmax(x, None).unwrap();
        prop_assert!((g.value(y).sum() - 1.0).abs() < 1e-9);
        prop_assert!(g.value(y).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn layer_norm_output_is_standardized(values in proptest::collection::vec(-50.0f64..50.0, 2..32), shift in -100.0f64..100.0) {
        let d = values.len();
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[d], 1.0));
        let zero = g.constant(Tensor::zeros(&[d]));
        let x = g.constant(Tensor::vector(values.clone()).unwrap());
        let xs = g.constant(Tensor::vector(values.iter().map(|v| v + shift).collect()).unwrap());
        let y = g.layer_norm(x, gain, zero, LAYER_NORM_EPS).unwrap();
        let ys = g.layer_norm(xs, gain, zero, LAYER_NORM_EPS).unwrap();
        let out = g.value(y).data().to_vec();
        let mean = out.iter().sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-9);
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-2 {
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
        for (a, b) in out.iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
