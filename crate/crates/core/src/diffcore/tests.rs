use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, relative_error};
use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    (randn(rng, shape.iter().product()), shape.to_vec())
}

/// Project an arbitrary-shaped output to a scalar with fixed random weights
/// so every output entry contributes a distinct upstream gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, n);
    tape.weighted_sum(out, &w)
}

fn assert_grad_ok<F: Fn(&mut Tape, &[Var]) -> Var>(name: &str, inputs: &[(Vec<f64>, Vec<usize>)], build: F) {
    let r = gradcheck::check(inputs, H, build);
    assert!(r.max_rel_err < TOL, "{name}: max rel err {}", r.max_rel_err);
    assert!(r.checked > 0);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.3; 7], &[1, 7]);
    let s = t.softmax_rows(x);
    for &p in t.value(s) {
        assert!((p - 1.0 / 7.0).abs() < 1e-15);
    }
}

#[test]
fn gru_with_zero_weights() {
    // r = z = σ(0) = 1/2 and the candidate is tanh(0) = 0, so h' = h / 2.
    let hidden = 4;
    let mut t = Tape::new();
    let gi = t.constant(vec![0.0; 2 * 3 * hidden], &[2, 3 * hidden]);
    let gh = t.constant(vec![0.0; 2 * 3 * hidden], &[2, 3 * hidden]);
    let h0 = t.constant(vec![0.0; 2 * hidden], &[2, hidden]);
    let h1 = t.gru_combine(gi, gh, h0);
    assert!(t.value(h1).iter().all(|&v| v == 0.0));
    let prev: Vec<f64> = (0..2 * hidden).map(|i| i as f64 - 3.0).collect();
    let hp = t.constant(prev.clone(), &[2, hidden]);
    let h2 = t.gru_combine(gi, gh, hp);
    for (a, b) in t.value(h2).iter().zip(&prev) {
        assert_eq!(*a, b * 0.5);
    }
}

#[test]
fn linear_bias_gradient_is_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.leaf(randn(&mut rng, 3 * 4), &[3, 4]);
    let w = t.leaf(randn(&mut rng, 4 * 2), &[4, 2]);
    let b = t.leaf(randn(&mut rng, 2), &[2]);
    let y = t.linear(x, w, Some(b));
    let up = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
    let loss = t.weighted_sum(y, &up);
    let g = t.backward(loss);
    // Column sums of the upstream gradient.
    assert_eq!(g.get(b).unwrap(), &[0.5 + 2.0 + 1.5, -1.0 + 0.25 - 0.75]);
}

#[test]
fn cross_entropy_reference_values() {
    let mut t = Tape::new();
    let uniform = t.constant(vec![0.0; 7], &[7]);
    for label in 0..7 {
        let ce = t.cross_entropy(uniform, label);
        assert!((t.scalar(ce) - 7f64.ln()).abs() < 1e-12);
    }
    let mut peaked = vec![0.0; 7];
    peaked[4] = 1000.0;
    let p = t.constant(peaked, &[7]);
    let ce = t.cross_entropy(p, 4);
    assert!(t.scalar(ce).abs() < 1e-12);
    assert!((7f64.ln() - 1.94591).abs() < 1e-5);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..INSTANCES {
        let label = rng.gen_range(0..7);
        let x = input(&mut rng, &[7]);
        let scale = 1.0 + i as f64 * 0.3;
        let x = (x.0.iter().map(|v| v * scale).collect(), x.1);
        assert_grad_ok("cross_entropy", &[x], |t, v| t.cross_entropy(v[0], label));
    }
}

#[test]
fn threshold_forward() {
    let mut t = Tape::new();
    let s = t.leaf(vec![2.0, 0.0, -0.1, 1e-12], &[4, 1]);
    let g = t.straight_through_threshold(s);
    assert_eq!(t.value(g), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn threshold_backward_is_sigmoid_surrogate() {
    for score in [0.5, -1.3, 2.0, 0.0] {
        let mut t = Tape::new();
        let s = t.leaf(vec![score], &[1, 1]);
        let g = t.straight_through_threshold(s);
        let loss = t.scale(g, 0.7);
        let loss = t.sum(loss);
        let grads = t.backward(loss);
        // Finite difference of the smooth surrogate 0.7·σ(s).
        let numeric = 0.7 * (sigmoid(score + H) - sigmoid(score - H)) / (2.0 * H);
        let analytic = grads.get(s).unwrap()[0];
        assert!(relative_error(analytic, numeric) < 1e-8, "{analytic} vs {numeric}");
    }
}

#[test]
fn argmax_forward_and_ties() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.1, 2.0, -1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[3, 3]);
    let y = t.straight_through_argmax(x);
    assert_eq!(t.value(y), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn argmax_backward_is_softmax_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..INSTANCES {
        let x = input(&mut rng, &[2, 3]);
        let w = randn(&mut rng, 6);
        let mut t = Tape::new();
        let xv = t.leaf(x.0.clone(), &x.1);
        let y = t.straight_through_argmax(xv);
        let loss = t.weighted_sum(y, &w);
        let analytic = t.backward(loss).get(xv).unwrap().to_vec();
        // Surrogate: same probe applied to softmax rows.
        let r = gradcheck::check(&[x], H, |t, v| {
            let s = t.softmax_rows(v[0]);
            t.weighted_sum(s, &w)
        });
        assert!(r.max_rel_err < TOL, "instance {i}");
        let mut t2 = Tape::new();
        let xs = t2.leaf(t.value(xv).to_vec(), &[2, 3]);
        let s = t2.softmax_rows(xs);
        let l2 = t2.weighted_sum(s, &w);
        let reference = t2.backward(l2).get(xs).unwrap().to_vec();
        for (a, b) in analytic.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn smooth_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..INSTANCES as u64 {
        let n = rng.gen_range(1..5);
        let k = rng.gen_range(1..6);
        let m = rng.gen_range(1..5);
        let xs = input(&mut rng, &[n, k]);
        let ws = input(&mut rng, &[k, m]);
        let bs = input(&mut rng, &[m]);
        assert_grad_ok("linear", &[xs.clone(), ws, bs], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            probe(t, y, inst)
        });
        let a = input(&mut rng, &[n, k]);
        let b = input(&mut rng, &[n, k]);
        for (name, f) in [
            ("tanh", Tape::tanh as fn(&mut Tape, Var) -> Var),
            ("sigmoid", Tape::sigmoid),
            ("relu", Tape::relu),
            ("softmax", Tape::softmax_rows),
            ("log_softmax", Tape::log_softmax_rows),
        ] {
            assert_grad_ok(name, std::slice::from_ref(&a), |t, v| {
                let y = f(t, v[0]);
                probe(t, y, inst)
            });
        }
        for (name, f) in [
            ("add", Tape::add as fn(&mut Tape, Var, Var) -> Var),
            ("sub", Tape::sub),
            ("mul", Tape::mul),
        ] {
            assert_grad_ok(name, &[a.clone(), b.clone()], |t, v| {
                let y = f(t, v[0], v[1]);
                probe(t, y, inst)
            });
        }
        assert_grad_ok("concat", &[a.clone(), xs.clone()], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]);
            probe(t, y, inst)
        });
        let start = rng.gen_range(0..k);
        let len = rng.gen_range(1..=k - start);
        assert_grad_ok("slice_cols", std::slice::from_ref(&a), |t, v| {
            let y = t.slice_cols(v[0], start, len);
            probe(t, y, inst)
        });
        let rows = rng.gen_range(1..=n);
        assert_grad_ok("slice_rows", std::slice::from_ref(&a), |t, v| {
            let y = t.slice_rows(v[0], rows);
            probe(t, y, inst)
        });
        assert_grad_ok("mean", std::slice::from_ref(&a), |t, v| {
            let y = t.tanh(v[0]);
            t.mean(y)
        });
        assert_grad_ok("scale", std::slice::from_ref(&a), |t, v| {
            let y = t.scale(v[0], -1.7);
            probe(t, y, inst)
        });
        let vocab = rng.gen_range(2..6);
        let ids: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..vocab)).collect();
        let table = input(&mut rng, &[vocab, m]);
        assert_grad_ok("gather_rows", &[table], |t, v| {
            let y = t.gather_rows(v[0], &ids);
            probe(t, y, inst)
        });
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        assert_grad_ok("cross_entropy_rows", std::slice::from_ref(&a), |t, v| {
            let y = t.cross_entropy_rows(v[0], &labels);
            probe(t, y, inst)
        });
    }
}

#[test]
fn conv_and_channel_affine_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..INSTANCES as u64 {
        let batch = rng.gen_range(1..3);
        let hw = rng.gen_range(3..6);
        let c = rng.gen_range(1..4);
        let o = rng.gen_range(1..4);
        let x = input(&mut rng, &[batch, hw, hw, c]);
        let w = input(&mut rng, &[o, 3, 3, c]);
        let b = input(&mut rng, &[o]);
        assert_grad_ok("conv2d", &[x.clone(), w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]);
            probe(t, y, inst)
        });
        let gamma = input(&mut rng, &[batch, c]);
        let beta = input(&mut rng, &[batch, c]);
        assert_grad_ok("channel_affine", &[x, gamma, beta], |t, v| {
            let y = t.channel_affine(v[0], v[1], v[2]);
            probe(t, y, inst)
        });
    }
}

#[test]
fn gru_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for inst in 0..INSTANCES as u64 {
        let n = rng.gen_range(1..4);
        let d = rng.gen_range(1..5);
        let hd = rng.gen_range(1..5);
        let inputs = [
            input(&mut rng, &[n, d]),
            input(&mut rng, &[n, hd]),
            input(&mut rng, &[d, 3 * hd]),
            input(&mut rng, &[3 * hd]),
            input(&mut rng, &[hd, 3 * hd]),
            input(&mut rng, &[3 * hd]),
        ];
        assert_grad_ok("gru", &inputs, |t, v| {
            let gi = t.linear(v[0], v[2], Some(v[3]));
            let gh = t.linear(v[1], v[4], Some(v[5]));
            let h = t.gru_combine(gi, gh, v[1]);
            // Two steps so the recurrent path is exercised.
            let gh2 = t.linear(h, v[4], Some(v[5]));
            let h2 = t.gru_combine(gi, gh2, h);
            probe(t, h2, inst)
        });
    }
}

#[test]
fn gate_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = input(&mut rng, &[3, 4]);
    let s = vec![0.8, -0.4, 1.1];
    // Analytic gradients through the hard gate equal the gradients of the
    // smooth surrogate σ(s)·x evaluated with the hard value in the forward.
    let mut t = Tape::new();
    let xv = t.leaf(x.0.clone(), &x.1);
    let sv = t.leaf(s.clone(), &[3, 1]);
    let g = t.straight_through_threshold(sv);
    assert_eq!(t.value(g), &[1.0, 0.0, 1.0]);
    let y = t.gate_rows(xv, g);
    assert_eq!(&t.value(y)[4..8], &[0.0; 4]);
    let loss = probe(&mut t, y, 9);
    let grads = t.backward(loss);
    let mut rng9 = ChaCha8Rng::seed_from_u64(9);
    let w = randn(&mut rng9, 12);
    for i in 0..3 {
        let dot: f64 = (0..4).map(|j| w[i * 4 + j] * x.0[i * 4 + j]).sum();
        let p = sigmoid(s[i]);
        let expected = dot * p * (1.0 - p);
        assert!((grads.get(sv).unwrap()[i] - expected).abs() < 1e-14);
        let gate = if s[i] > 0.0 { 1.0 } else { 0.0 };
        for j in 0..4 {
            assert_eq!(grads.get(xv).unwrap()[i * 4 + j], w[i * 4 + j] * gate);
        }
    }
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = x·x + x, dy/dx = 2x + 1, with x used three times.
    let mut t = Tape::new();
    let x = t.leaf(vec![1.5, -2.0], &[2]);
    let sq = t.mul(x, x);
    let y = t.add(sq, x);
    let loss = t.sum(y);
    let g = t.backward(loss);
    assert_eq!(g.get(x).unwrap(), &[4.0, -3.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(vec![1.0, 2.0], &[1, 2]);
    let w = t.leaf(vec![0.5, 0.5], &[2, 1]);
    let y = t.linear(c, w, None);
    let loss = t.sum(y);
    let g = t.backward(loss);
    assert!(g.get(c).is_none());
    assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
}

#[test]
#[should_panic(expected = "linear: x [2, 3] incompatible with w [4, 1]")]
fn shape_mismatch_names_shapes() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0; 6], &[2, 3]);
    let w = t.leaf(vec![0.0; 4], &[4, 1]);
    t.linear(x, w, None);
}
