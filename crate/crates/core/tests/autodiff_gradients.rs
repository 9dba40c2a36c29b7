//! Finite-difference checks for every differentiable op on the tape.
//!
//! Each case rebuilds the tape from a flat parameter vector so the oracle
//! sees exactly what backward differentiates.

mod support;

use splatstyle_core::autodiff::{NodeId, Tape};
use splatstyle_core::Grid;
use support::{assert_grad_matches, rand_grid, rand_grid_off_zero, rng};

const H: f32 = 1e-2;
const REL: f64 = 1e-3;
const ABS: f64 = 3e-4;

/// Splits a flat parameter vector into grids of fixed shapes, evaluates the
/// graph, and returns the loss plus analytic gradients in the same layout.
struct Probe {
    shapes: Vec<(usize, usize, usize)>,
}

impl Probe {
    fn new(inputs: &[Grid]) -> (Self, Vec<f32>) {
        let shapes = inputs.iter().map(|g| g.shape()).collect();
        let flat = inputs.iter().flat_map(|g| g.data().iter().copied()).collect();
        (Probe { shapes }, flat)
    }

    fn grids(&self, flat: &[f32]) -> Vec<Grid> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for &(c, h, w) in &self.shapes {
            let n = c * h * w;
            out.push(Grid::from_vec(c, h, w, flat[off..off + n].to_vec()).unwrap());
            off += n;
        }
        out
    }

    fn eval(
        &self,
        build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
        flat: &[f32],
    ) -> (f32, Vec<f32>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = self.grids(flat).into_iter().map(|g| tape.leaf(g)).collect();
        let root = build(&mut tape, &ids);
        let loss = tape.value(root).scalar_value();
        tape.backward(root).unwrap();
        let mut grads = Vec::with_capacity(flat.len());
        for (&id, &(c, h, w)) in ids.iter().zip(&self.shapes) {
            match tape.grad(id) {
                Some(g) => grads.extend_from_slice(g.data()),
                None => grads.extend(std::iter::repeat(0.0).take(c * h * w)),
            }
        }
        (loss, grads)
    }
}

fn run_case(name: &str, inputs: Vec<Grid>, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
    run_case_h(name, inputs, build, H, ABS);
}

fn run_case_h(
    name: &str,
    inputs: Vec<Grid>,
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    h: f32,
    abs: f64,
) {
    let (probe, flat) = Probe::new(&inputs);
    let (_, analytic) = probe.eval(&build, &flat);
    let mut f = |x: &[f32]| probe.eval(&build, x).0;
    assert_grad_matches(name, &mut f, &flat, &analytic, h, REL, abs);
}

#[test]
fn conv2d_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 3, 5, 5, -1.0, 1.0);
        let k = rand_grid(&mut r, 2, 3, 9, -0.5, 0.5);
        let b = rand_grid(&mut r, 2, 1, 1, -0.3, 0.3);
        let target = rand_grid(&mut r, 2, 5, 5, -1.0, 1.0);
        run_case("conv2d", vec![x, k, b], move |t, ids| {
            let out = t.conv2d(ids[0], ids[1], ids[2]).unwrap();
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn relu_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        // Keep inputs away from the kink at zero.
        let x = rand_grid_off_zero(&mut r, 2, 4, 4, 0.08);
        let target = rand_grid(&mut r, 2, 4, 4, -1.0, 1.0);
        run_case("relu", vec![x], move |t, ids| {
            let out = t.relu(ids[0]);
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn dense_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 4, 3, 3, -1.0, 1.0);
        let w = rand_grid(&mut r, 1, 5, 4, -0.5, 0.5);
        let b = rand_grid(&mut r, 5, 1, 1, -0.3, 0.3);
        let target = rand_grid(&mut r, 5, 3, 3, -1.0, 1.0);
        run_case("dense", vec![x, w, b], move |t, ids| {
            let out = t.dense(ids[0], ids[1], ids[2]).unwrap();
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn normalize_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 3, 4, 4, -2.0, 2.0);
        let target = rand_grid(&mut r, 3, 4, 4, -1.0, 1.0);
        run_case("normalize", vec![x], move |t, ids| {
            let out = t.normalize(ids[0]);
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn affine_channel_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 3, 4, 4, -1.0, 1.0);
        let s = rand_grid(&mut r, 3, 1, 1, 0.5, 2.0);
        let t0 = rand_grid(&mut r, 3, 1, 1, -1.0, 1.0);
        let target = rand_grid(&mut r, 3, 4, 4, -1.0, 1.0);
        run_case("affine_channel", vec![x, s, t0], move |t, ids| {
            let out = t.affine_channel(ids[0], ids[1], ids[2]).unwrap();
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn channel_mean_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 3, 4, 4, -2.0, 2.0);
        let target = rand_grid(&mut r, 3, 1, 1, -1.0, 1.0);
        run_case("channel_mean", vec![x], move |t, ids| {
            let out = t.channel_mean(ids[0]);
            let c = t.constant(target.clone());
            t.sse(out, c).unwrap()
        });
    }
}

#[test]
fn channel_std_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 3, 4, 4, -2.0, 2.0);
        let target = rand_grid(&mut r, 3, 1, 1, 0.2, 1.5);
        run_case("channel_std", vec![x], move |t, ids| {
            let out = t.channel_std(ids[0]);
            let c = t.constant(target.clone());
            t.sse(out, c).unwrap()
        });
    }
}

#[test]
fn avg_pool2_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 2, 6, 4, -1.0, 1.0);
        let target = rand_grid(&mut r, 2, 3, 2, -1.0, 1.0);
        run_case("avg_pool2", vec![x], move |t, ids| {
            let out = t.avg_pool2(ids[0]).unwrap();
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn upsample2_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 2, 3, 4, -1.0, 1.0);
        let target = rand_grid(&mut r, 2, 6, 8, -1.0, 1.0);
        run_case("upsample2", vec![x], move |t, ids| {
            let out = t.upsample2(ids[0]);
            let c = t.constant(target.clone());
            t.mse(out, c).unwrap()
        });
    }
}

#[test]
fn mse_gradients_both_sides() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let a = rand_grid(&mut r, 2, 3, 3, -1.0, 1.0);
        let b = rand_grid(&mut r, 2, 3, 3, -1.0, 1.0);
        run_case("mse", vec![a, b], |t, ids| t.mse(ids[0], ids[1]).unwrap());
        let mut r = rng(seed + 100);
        let a = rand_grid(&mut r, 2, 3, 3, -1.0, 1.0);
        let b = rand_grid(&mut r, 2, 3, 3, -1.0, 1.0);
        run_case("sse", vec![a, b], |t, ids| t.sse(ids[0], ids[1]).unwrap());
    }
}

#[test]
fn scale_and_shared_input_gradients() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 2, 3, 3, -1.0, 1.0);
        let target = rand_grid(&mut r, 2, 3, 3, -1.0, 1.0);
        // x feeds add twice; backward must sum both contributions.
        run_case("scale_shared", vec![x], move |t, ids| {
            let doubled = t.add(ids[0], ids[0]).unwrap();
            let scaled = t.scale(doubled, 0.7);
            let c = t.constant(target.clone());
            t.mse(scaled, c).unwrap()
        });
    }
}

#[test]
fn deep_chain_gradients() {
    // conv -> relu -> pool -> conv -> relu -> upsample -> normalize ->
    // affine -> dense -> mse, all leaves trainable. Catches wiring mistakes
    // that per-op checks cannot.
    for seed in 0..3 {
        let mut r = rng(seed);
        let x = rand_grid(&mut r, 2, 6, 6, -1.0, 1.0);
        let k1 = rand_grid(&mut r, 3, 2, 9, -0.5, 0.5);
        let b1 = rand_grid(&mut r, 3, 1, 1, -0.2, 0.2);
        let k2 = rand_grid(&mut r, 2, 3, 9, -0.5, 0.5);
        let b2 = rand_grid(&mut r, 2, 1, 1, -0.2, 0.2);
        let s = rand_grid(&mut r, 2, 1, 1, 0.5, 1.5);
        let sh = rand_grid(&mut r, 2, 1, 1, -0.5, 0.5);
        let w = rand_grid(&mut r, 1, 3, 2, -0.5, 0.5);
        let wb = rand_grid(&mut r, 3, 1, 1, -0.2, 0.2);
        let target = rand_grid(&mut r, 3, 6, 6, -1.0, 1.0);
        // Smaller step: the chain's interior relus put kinks at unknown
        // offsets, and a wide step is more likely to straddle one.
        run_case_h(
            "deep_chain",
            vec![x, k1, b1, k2, b2, s, sh, w, wb],
            move |t, ids| {
                let c1 = t.conv2d(ids[0], ids[1], ids[2]).unwrap();
                let r1 = t.relu(c1);
                let p = t.avg_pool2(r1).unwrap();
                let c2 = t.conv2d(p, ids[3], ids[4]).unwrap();
                let r2 = t.relu(c2);
                let u = t.upsample2(r2);
                let n = t.normalize(u);
                let a = t.affine_channel(n, ids[5], ids[6]).unwrap();
                let d = t.dense(a, ids[7], ids[8]).unwrap();
                let c = t.constant(target.clone());
                t.mse(d, c).unwrap()
            },
            2e-3,
            4e-4,
        );
    }
}

#[test]
fn shared_input_grad_is_exact_double() {
    let mut tape = Tape::new();
    let x = tape.leaf(Grid::from_vec(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.add(x, x).unwrap();
    let zero = tape.constant(Grid::zeros(1, 1, 3));
    let loss = tape.sse(y, zero).unwrap();
    tape.backward(loss).unwrap();
    // d/dx sum((2x)^2) = 8x, exactly representable here.
    let g = tape.grad(x).unwrap();
    assert_eq!(g.data(), &[4.0, -8.0, 16.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Grid::filled(1, 2, 2, 1.0));
    let frozen = tape.constant(Grid::filled(1, 2, 2, 2.0));
    let y = tape.add(x, frozen).unwrap();
    let zero = tape.constant(Grid::zeros(1, 2, 2));
    let loss = tape.mse(y, zero).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_some());
    assert!(tape.grad(frozen).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Grid::filled(1, 2, 2, 1.0));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_errors_name_the_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(Grid::zeros(3, 4, 4));
    let k = tape.leaf(Grid::zeros(2, 4, 9)); // expects 4 input channels
    let b = tape.leaf(Grid::zeros(2, 1, 1));
    let err = tape.conv2d(x, k, b).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");

    let s = tape.leaf(Grid::zeros(2, 1, 1));
    let err = tape.affine_channel(x, s, s).unwrap_err().to_string();
    assert!(err.contains("affine"), "{err}");

    let odd = tape.leaf(Grid::zeros(1, 5, 4));
    assert!(tape.avg_pool2(odd).is_err());
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut r = rng(7);
        let x = rand_grid(&mut r, 3, 8, 8, -1.0, 1.0);
        let k = rand_grid(&mut r, 4, 3, 9, -0.5, 0.5);
        let b = rand_grid(&mut r, 4, 1, 1, -0.2, 0.2);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let ki = tape.leaf(k);
        let bi = tape.leaf(b);
        let out = tape.conv2d(xi, ki, bi).unwrap();
        let n = tape.normalize(out);
        let zero = tape.constant(Grid::zeros(4, 8, 8));
        let loss = tape.mse(n, zero).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.grad(xi).unwrap().data().to_vec(),
            tape.grad(ki).unwrap().data().to_vec(),
        )
    };
    let (a1, a2) = run();
    let (b1, b2) = run();
    assert_eq!(a1, b1);
    assert_eq!(a2, b2);
}
