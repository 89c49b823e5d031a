use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one [`Var`] per input tensor and must return
/// a scalar.  The error for each entry is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> GradCheckReport {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(REL_FLOOR);
            let e = (x - y).abs() / denom;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        pass: worst < tol,
    }
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>);

/// Projects an op output onto a fixed random direction so every output
/// entry contributes to the checked gradient.
fn project(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    Ok(tape.sum(tape.mul(y, r)?))
}

/// Moves entries away from the kink at zero so finite differences stay on one side.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    let x6 = randn(&[1, 2, 6, 6]);
    let x4 = randn(&[2, 2, 4, 4]);
    let x3 = randn(&[1, 2, 3, 3]);
    let vec6 = away_from_zero(randn(&[2, 3]));
    let mut cases: Vec<OpCase> = vec![
        (
            "conv2d stride 1",
            vec![x6.clone(), randn(&[3, 2, 3, 3]), randn(&[3])],
            Box::new(|t, v| project(t, t.conv2d(v[0], v[1], v[2], 1, 1)?, 1)),
        ),
        (
            "conv2d stride 2",
            vec![x6.clone(), randn(&[3, 2, 3, 3]), randn(&[3])],
            Box::new(|t, v| project(t, t.conv2d(v[0], v[1], v[2], 2, 1)?, 2)),
        ),
        (
            "conv2d_transpose stride 1",
            vec![x4.clone(), randn(&[2, 3, 3, 3]), randn(&[3])],
            Box::new(|t, v| project(t, t.conv2d_transpose(v[0], v[1], v[2], 1, 1)?, 3)),
        ),
        (
            "conv2d_transpose stride 2",
            vec![x3.clone(), randn(&[2, 3, 4, 4]), randn(&[3])],
            Box::new(|t, v| project(t, t.conv2d_transpose(v[0], v[1], v[2], 2, 1)?, 4)),
        ),
        ("relu", vec![vec6.clone()], Box::new(|t, v| project(t, t.relu(v[0]), 5))),
        ("silu", vec![vec6.clone()], Box::new(|t, v| project(t, t.silu(v[0]), 6))),
        ("softplus", vec![vec6.clone()], Box::new(|t, v| project(t, t.softplus(v[0]), 7))),
        (
            "add",
            vec![vec6.clone(), randn(&[2, 3])],
            Box::new(|t, v| project(t, t.add(v[0], v[1])?, 8)),
        ),
        (
            "sub",
            vec![vec6.clone(), randn(&[2, 3])],
            Box::new(|t, v| project(t, t.sub(v[0], v[1])?, 9)),
        ),
        (
            "mul",
            vec![vec6.clone(), randn(&[2, 3])],
            Box::new(|t, v| project(t, t.mul(v[0], v[1])?, 10)),
        ),
        ("affine", vec![vec6.clone()], Box::new(|t, v| project(t, t.affine(v[0], -1.7, 0.3), 11))),
        ("clamp", vec![vec6.clone()], Box::new(|t, v| project(t, t.clamp(v[0], -0.5, 0.5), 12))),
        (
            "add_channel",
            vec![x4.clone(), randn(&[2, 2])],
            Box::new(|t, v| project(t, t.add_channel(v[0], v[1])?, 13)),
        ),
        (
            "linear",
            vec![randn(&[2, 4]), randn(&[3, 4]), randn(&[3])],
            Box::new(|t, v| project(t, t.linear(v[0], v[1], v[2])?, 14)),
        ),
        (
            "group_norm",
            vec![randn(&[2, 4, 3, 3]), randn(&[4]), randn(&[4])],
            Box::new(|t, v| project(t, t.group_norm(v[0], 2, v[1], v[2])?, 15)),
        ),
        (
            "self_attention",
            vec![
                randn(&[2, 3, 2, 3]),
                randn(&[3, 3]),
                randn(&[3, 3]),
                randn(&[3, 3]),
                randn(&[3, 3]),
            ],
            Box::new(|t, v| project(t, t.self_attention(v[0], v[1], v[2], v[3], v[4])?, 16)),
        ),
        (
            "concat_channels",
            vec![x4.clone(), randn(&[2, 1, 4, 4])],
            Box::new(|t, v| project(t, t.concat_channels(v[0], v[1])?, 17)),
        ),
        (
            "unit_normalize_channels",
            vec![x4.clone()],
            Box::new(|t, v| project(t, t.unit_normalize_channels(v[0])?, 18)),
        ),
        ("sum", vec![vec6.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![vec6.clone()], Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "mse",
            vec![vec6.clone(), randn(&[2, 3])],
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
    ];
    let y = randn(&[2, 3]).scale(2.0);
    let mu = randn(&[2, 3]);
    let sigma = Tensor::uniform(&[2, 3], 0.3, 2.0, &mut rng);
    cases.push((
        "gaussian_bits",
        vec![y, mu, sigma],
        Box::new(|t, v| t.gaussian_bits(v[0], v[1], v[2])),
    ));
    let z = Tensor::randn(&[1, 2, 2, 2], &mut rng).scale(2.0);
    let loc = Tensor::randn(&[2], &mut rng);
    let scale = Tensor::uniform(&[2], 0.3, 2.0, &mut rng);
    cases.push((
        "logistic_bits",
        vec![z, loc, scale],
        Box::new(|t, v| t.logistic_bits(v[0], v[1], v[2])),
    ));
    cases
}

/// Runs a finite-difference check on every differentiable tape operation
/// with small random inputs.
pub fn check_all_ops(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, gradient_check(f, &inputs, tol)?)))
        .collect()
}
