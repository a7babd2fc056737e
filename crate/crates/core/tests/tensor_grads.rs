//! Finite-difference checks for every tape op's backward pass, at f64 against
//! same-precision central differences and at f32 against an f64 reference.

use rand::Rng;
use stack_attention::real::Real;
use stack_attention::rng::stream;
use stack_attention::tensor::grad_check::{grad_check, grad_check_f32, TapeProgram};
use stack_attention::tensor::tape::{GatherSpec, Tape, Var, GATHER_FILL};
use stack_attention::tensor::Tensor;
use stack_attention::Result;

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "grad-input", &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn check_all(prog: &impl TapeProgram, inputs: &[Tensor<f64>], what: &str) {
    let rep64 = grad_check(prog, inputs, 1e-4, 1e-6).unwrap();
    assert!(rep64.pass, "{}: f64 max rel err {} at {:?}", what, rep64.max_rel_err, rep64.worst);
    let rep32 = grad_check_f32(prog, inputs, 1e-4, 1e-4).unwrap();
    assert!(rep32.pass, "{}: f32 max rel err {} at {:?}", what, rep32.max_rel_err, rep32.worst);
}

fn c<F: Real>(vals: &[f64]) -> Vec<F> {
    vals.iter().map(|&v| F::from_f64(v)).collect()
}

struct Arith;
impl TapeProgram for Arith {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let (a, b) = (x[0], x[1]);
        let s = t.add(a, b)?;
        let d = t.sub(s, b)?;
        let m = t.mul(d, s)?;
        let n = t.neg(m);
        let sc = t.scale(n, F::from_f64(-0.37));
        let row = t.slice_rows(b, 0, 1)?;
        let ar = t.add_row(sc, row)?;
        Ok(t.sum_all(ar))
    }
}

#[test]
fn grad_arith_ops() {
    for seed in 0..6 {
        let a = rand_tensor(vec![3, 4], -2.0, 2.0, 100 + seed);
        let b = rand_tensor(vec![3, 4], -2.0, 2.0, 200 + seed);
        check_all(&Arith, &[a, b], "arith");
    }
}

struct MatmulReshape;
impl TapeProgram for MatmulReshape {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let prod = t.matmul(x[0], x[1])?;
        let tr = t.transpose(prod)?;
        let rs = t.reshape(tr, vec![1, t.numel(tr)])?;
        let sq = t.mul(rs, rs)?;
        Ok(t.sum_all(sq))
    }
}

#[test]
fn grad_matmul_transpose_reshape() {
    for seed in 0..6 {
        let a = rand_tensor(vec![2, 3], -1.5, 1.5, 300 + seed);
        let b = rand_tensor(vec![3, 4], -1.5, 1.5, 400 + seed);
        check_all(&MatmulReshape, &[a, b], "matmul");
    }
}

struct Shuffle;
impl TapeProgram for Shuffle {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let cat = t.concat_rows(&[x[0], x[1]], 1)?; // [5, 3]
        let rows = t.row_gather(cat, vec![4, 0, 2, 2])?;
        let cols = t.slice_cols(rows, 1, 3)?;
        let some = t.slice_rows(cols, 0, 3)?;
        let picked = t.pick_per_row(some, vec![1, 0, 1])?;
        let g = t.gather_fill(
            cat,
            vec![0, 7, GATHER_FILL, 14, 3, GATHER_FILL],
            vec![2, 3],
            F::from_f64(0.25),
        )?;
        let gs = t.sum_all(g);
        let ps = t.sum_all(picked);
        let tot = t.add(gs, ps)?;
        Ok(tot)
    }
}

#[test]
fn grad_gather_slice_concat() {
    for seed in 0..6 {
        let a = rand_tensor(vec![2, 3], -2.0, 2.0, 500 + seed);
        let b = rand_tensor(vec![3, 3], -2.0, 2.0, 600 + seed);
        check_all(&Shuffle, &[a, b], "shuffle");
    }
}

struct ConcatBatched;
impl TapeProgram for ConcatBatched {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        // Two [2, r, 2] parts concatenated along the row axis inside each slab.
        let cat = t.concat_rows(&[x[0], x[1]], 2)?;
        let flat = t.reshape(cat, vec![1, t.numel(cat)])?;
        let sq = t.mul(flat, flat)?;
        Ok(t.sum_all(sq))
    }
}

#[test]
fn grad_concat_batched() {
    for seed in 0..4 {
        let a = rand_tensor(vec![2, 2, 2], -2.0, 2.0, 700 + seed);
        let b = rand_tensor(vec![2, 1, 2], -2.0, 2.0, 800 + seed);
        check_all(&ConcatBatched, &[a, b], "concat-batched");
    }
}

struct SoftmaxFamily;
impl TapeProgram for SoftmaxFamily {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let masked = t.causal_mask(x[0])?;
        let sm = t.softmax(masked)?;
        let lsm = t.log_softmax(x[0])?;
        let w = t.constant(vec![4, 4], c::<F>(&[0.3; 16]));
        let a = t.mul(sm, w)?;
        let b = t.mul(lsm, w)?;
        let s1 = t.sum_all(a);
        let s2 = t.sum_all(b);
        t.add(s1, s2)
    }
}

#[test]
fn grad_softmax_family() {
    for seed in 0..6 {
        let a = rand_tensor(vec![4, 4], -3.0, 3.0, 900 + seed);
        check_all(&SoftmaxFamily, &[a], "softmax");
    }
}

struct LayerNormP;
impl TapeProgram for LayerNormP {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let ln = t.layer_norm(x[0], x[1], x[2], F::from_f64(1e-5))?;
        let sq = t.mul(ln, ln)?;
        Ok(t.sum_all(sq))
    }
}

#[test]
fn grad_layer_norm() {
    for seed in 0..6 {
        let x = rand_tensor(vec![3, 5], -2.0, 2.0, 1000 + seed);
        let g = rand_tensor(vec![1, 5], 0.5, 1.5, 1100 + seed);
        let b = rand_tensor(vec![1, 5], -0.5, 0.5, 1200 + seed);
        check_all(&LayerNormP, &[x, g, b], "layer_norm");
    }
}

struct Activations;
impl TapeProgram for Activations {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let l = t.logistic(x[0]);
        let r = t.relu(x[0]);
        let m = t.mul(l, r)?;
        Ok(t.sum_all(m))
    }
}

#[test]
fn grad_activations() {
    for seed in 0..6 {
        // Keep away from the relu kink at 0.
        let mut x = rand_tensor(vec![2, 6], -2.0, 2.0, 1300 + seed);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        check_all(&Activations, &[x], "activations");
    }
}

struct LogOps;
impl TapeProgram for LogOps {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        // x[0], x[1] are log-space [2, 4] tensors.
        let lae = t.log_add_exp(x[0], x[1])?;
        let partial = t.constant(
            vec![2, 4],
            c::<F>(&[0.5, f64::NEG_INFINITY, -0.25, 1.0, f64::NEG_INFINITY, 0.0, 2.0, -1.0]),
        );
        let lae2 = t.log_add_exp(lae, partial)?;
        let lse = t.logsumexp_last(lae2)?;
        let z = t.constant(vec![1], vec![F::from_f64(6.0)]);
        let lin = t.signed_exp_norm(lse, z)?;
        Ok(t.sum_all(lin))
    }
}

#[test]
fn grad_log_ops() {
    for seed in 0..6 {
        let a = rand_tensor(vec![2, 4], -2.0, 2.0, 1400 + seed);
        let b = rand_tensor(vec![2, 4], -2.0, 2.0, 1500 + seed);
        check_all(&LogOps, &[a, b], "log-ops");
    }
}

struct SignedLog;
impl TapeProgram for SignedLog {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        // x[0] linear with mixed signs -> signed log; combine with a signed
        // constant, then a signed log-matmul against an unsigned operand.
        let sl = t.to_signed_log(x[0]); // [2, 3]
        let konst = t.constant_signed(
            vec![2, 3],
            c::<F>(&[0.1, -0.4, 0.9, f64::NEG_INFINITY, 0.2, -2.0]),
            vec![-1, 1, -1, 1, 1, -1],
        );
        let mixed = t.log_add_exp(sl, konst)?; // signed [2, 3]
        let b = t.to_signed_log(x[1]); // [3, 2] signed log from linear input
        let prod = t.log_matmul(mixed, b, 1)?; // signed [2, 2]
        let z = t.constant(vec![1], vec![F::from_f64(6.0)]);
        let lin = t.signed_exp_norm(prod, z)?;
        let sq = t.mul(lin, lin)?;
        Ok(t.sum_all(sq))
    }
}

#[test]
fn grad_signed_log_ops() {
    for seed in 0..6 {
        let mut a = rand_tensor(vec![2, 3], -2.0, 2.0, 1600 + seed);
        let mut b = rand_tensor(vec![3, 2], -2.0, 2.0, 1700 + seed);
        // to_signed_log is non-differentiable at exactly 0; keep clear of it
        // and of sign flips under the FD step.
        for v in a.data_mut().iter_mut().chain(b.data_mut()) {
            if v.abs() < 0.1 {
                *v = 0.15 * v.signum().max(0.5);
            }
        }
        // f64 only: adversarial signs can put some seeds near exact
        // cancellation, where the function itself is ill-conditioned at f32.
        let rep = grad_check(&SignedLog, &[a, b], 1e-4, 1e-6).unwrap();
        assert!(rep.pass, "signed-log: f64 max rel err {} at {:?}", rep.max_rel_err, rep.worst);
    }
}

/// Signed machinery on cancellation-free data (all strictly positive values,
/// as in the network, where pushed vectors are logistic outputs): must hold at
/// both precisions.
struct SignedBenign;
impl TapeProgram for SignedBenign {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let sl = t.to_signed_log(x[0]); // [2, 3], positive inputs
        let b = t.to_signed_log(x[1]); // [3, 2], positive inputs
        let prod = t.log_matmul(sl, b, 1)?;
        let z = t.constant(vec![1], vec![F::from_f64(2.0)]);
        let lin = t.signed_exp_norm(prod, z)?;
        Ok(t.sum_all(lin))
    }
}

#[test]
fn grad_signed_log_ops_benign() {
    for seed in 0..6 {
        let a = rand_tensor(vec![2, 3], 0.1, 2.0, 1600 + seed);
        let b = rand_tensor(vec![3, 2], 0.1, 2.0, 1700 + seed);
        check_all(&SignedBenign, &[a, b], "signed-benign");
    }
}

struct LogMatmulBatched {
    a_bcast: bool,
    b_bcast: bool,
}
impl TapeProgram for LogMatmulBatched {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let prod = t.log_matmul(x[0], x[1], 3)?;
        let flat = t.reshape(prod, vec![1, t.numel(prod)])?;
        let lse = t.logsumexp_last(flat)?;
        let z = t.constant(vec![1], vec![F::from_f64(10.0)]);
        let lin = t.signed_exp_norm(lse, z)?;
        let _ = (self.a_bcast, self.b_bcast);
        Ok(t.sum_all(lin))
    }
}

#[test]
fn grad_log_matmul_batched_and_broadcast() {
    for seed in 0..4 {
        // Full batch on both sides.
        let a = rand_tensor(vec![3, 2, 4], -3.0, 3.0, 1800 + seed);
        let b = rand_tensor(vec![3, 4, 2], -3.0, 3.0, 1900 + seed);
        check_all(&LogMatmulBatched { a_bcast: false, b_bcast: false }, &[a, b], "lm-batched");
        // Broadcast A.
        let a = rand_tensor(vec![1, 2, 4], -3.0, 3.0, 2000 + seed);
        let b = rand_tensor(vec![3, 4, 2], -3.0, 3.0, 2100 + seed);
        check_all(&LogMatmulBatched { a_bcast: true, b_bcast: false }, &[a, b], "lm-bcast-a");
        // Broadcast B.
        let a = rand_tensor(vec![3, 2, 4], -3.0, 3.0, 2200 + seed);
        let b = rand_tensor(vec![1, 4, 2], -3.0, 3.0, 2300 + seed);
        check_all(&LogMatmulBatched { a_bcast: false, b_bcast: true }, &[a, b], "lm-bcast-b");
    }
}

struct GatherLm;
impl TapeProgram for GatherLm {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        // Two sources feeding a gathered [2, 2, 3] left operand.
        let idx = vec![
            (0u32, 0u32),
            (1, 2),
            (GATHER_FILL, 0),
            (0, 3),
            (1, 0),
            (0, 1),
            (1, 1),
            (GATHER_FILL, 0),
            (0, 2),
            (1, 3),
            (0, 0),
            (1, 2),
        ];
        let prod = t.gather_log_matmul(
            &[x[0], x[1]],
            GatherSpec::Dense(std::sync::Arc::new(idx)),
            2,
            3,
            x[2],
            2,
        )?;
        let flat = t.reshape(prod, vec![1, t.numel(prod)])?;
        let lse = t.logsumexp_last(flat)?;
        let z = t.constant(vec![1], vec![F::from_f64(8.0)]);
        let lin = t.signed_exp_norm(lse, z)?;
        Ok(t.sum_all(lin))
    }
}

#[test]
fn grad_gather_log_matmul() {
    for seed in 0..6 {
        let s0 = rand_tensor(vec![2, 2], -3.0, 3.0, 2400 + seed);
        let s1 = rand_tensor(vec![2, 2], -3.0, 3.0, 2500 + seed);
        let b = rand_tensor(vec![2, 3, 2], -3.0, 3.0, 2600 + seed);
        check_all(&GatherLm, &[s0, s1, b], "gather-lm");
    }
}

struct SupScanP;
impl TapeProgram for SupScanP {
    fn build<F: Real>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        // Raw logits -> softmax actions so FD perturbations stay valid.
        let actions = t.softmax(x[0])?;
        let readings = t.sup_scan(actions, x[1])?;
        let sq = t.mul(readings, readings)?;
        Ok(t.sum_all(sq))
    }
}

#[test]
fn grad_sup_scan() {
    for seed in 0..6 {
        let logits = rand_tensor(vec![5, 3], -1.5, 1.5, 2700 + seed);
        let pushed = rand_tensor(vec![5, 2], -1.0, 1.0, 2800 + seed);
        check_all(&SupScanP, &[logits, pushed], "sup-scan");
    }
}

/// Dropout's rng keeps it out of the FD harness; check its backward directly:
/// the gradient must equal the forward multiplier mask.
#[test]
fn grad_dropout_matches_mask() {
    use stack_attention::tensor::Mode;
    let x = Tensor::new(vec![1, 64], vec![1.0f64; 64]).unwrap().leaf();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let mut rng = stream(5, "drop-grad", &[]);
    let d = tape.dropout(v, 0.3, Mode::Train, &mut rng).unwrap();
    let s = tape.sum_all(d);
    let fwd = tape.data(d).to_vec();
    tape.backward(s).unwrap();
    let g = tape.grad(v).unwrap();
    for (gv, f) in g.iter().zip(&fwd) {
        // forward = x * keep with x = 1, so keep == forward value.
        assert_eq!(gv, f);
    }
    let kept = fwd.iter().filter(|&&v| v != 0.0).count();
    assert!(kept > 20 && kept < 64);
}
