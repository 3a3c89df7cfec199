//! Finite-difference verification of autodiff gradients.

use super::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Threshold the standard suite is judged against.
pub const GRAD_TOLERANCE: f32 = 1e-3;

/// Compare the autodiff gradient of a scalar-valued function against central
/// finite differences, element by element, and return the worst relative
/// error. The relative error of one element is |fd - ad| / max(|fd|, |ad|,
/// 0.01); the floor keeps noise on near-zero gradients from dominating.
///
/// Functions that draw from an active dropout site are rejected: the two
/// evaluations would see different masks.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    let errs = grad_check_elements(&f, x, h, DEFAULT_DENOM_FLOOR)?;
    Ok(errs.into_iter().fold(0.0f32, f32::max))
}

/// Default denominator floor: an element passes when |fd - ad| ≤ tol · floor
/// even if both gradients are near zero. Suits linear ops, whose central
/// differences have no truncation error and strongly correlated rounding.
const DEFAULT_DENOM_FLOOR: f64 = 0.01;

/// Floor for nonlinear cases. Their finite differences carry curvature
/// truncation plus decorrelated single-precision rounding, worth around
/// 1e-5..1e-4 of absolute noise on near-zero gradient elements; the wider
/// floor keeps that honest noise inside the tolerance band while errors of
/// a wrong backward, which scale with the gradients themselves, still fail.
const NONLINEAR_DENOM_FLOOR: f64 = 0.1;

/// [`grad_check`] evaluated at several step sizes, keeping each element's
/// best error. Any single step can lose to forward-pass roundoff (small h)
/// or to curvature (large h); a genuinely wrong gradient disagrees by orders
/// of magnitude at every step, so the elementwise minimum still catches it.
pub fn grad_check_multi_h<F>(f: F, x: &Tensor, steps: &[f32]) -> Result<f32>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    grad_check_multi_h_floored(f, x, steps, DEFAULT_DENOM_FLOOR)
}

fn grad_check_multi_h_floored<F>(f: F, x: &Tensor, steps: &[f32], floor: f64) -> Result<f32>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if steps.is_empty() {
        return Err(Error::Contract("grad_check_multi_h needs at least one step".into()));
    }
    let mut best: Option<Vec<f32>> = None;
    for &h in steps {
        let errs = grad_check_elements(&f, x, h, floor)?;
        best = Some(match best {
            None => errs,
            Some(prev) => prev
                .into_iter()
                .zip(errs)
                .map(|(a, b)| a.min(b))
                .collect(),
        });
    }
    Ok(best
        .expect("steps verified non-empty")
        .into_iter()
        .fold(0.0f32, f32::max))
}

fn grad_check_elements<F>(f: &F, x: &Tensor, h: f32, floor: f64) -> Result<Vec<f32>>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Contract(format!(
            "grad_check step {h} must be positive and finite"
        )));
    }
    let probe = x.detached().with_requires_grad(true);
    let mut graph = Graph::new();
    let loss = f(&mut graph, &probe)?;
    if graph.is_stochastic() {
        return Err(Error::Contract(
            "grad_check on a stochastic graph; run dropout in eval mode".into(),
        ));
    }
    let base_loss = loss.item()?;
    if !base_loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {base_loss} at the base point")));
    }
    graph.backward(&loss)?;
    let analytic = probe
        .grad()
        .ok_or_else(|| Error::Contract("function output does not depend on x".into()))?;

    let base = x.to_vec();
    let shape = x.shape();
    let mut errs = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let xp = base[i] + h;
        let xm = base[i] - h;
        let lp = eval_at(f, &base, &shape, i, xp)?;
        let lm = eval_at(f, &base, &shape, i, xm)?;
        let span = f64::from(xp) - f64::from(xm);
        let fd = (f64::from(lp) - f64::from(lm)) / span;
        let ad = f64::from(analytic[i]);
        if !fd.is_finite() || !ad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at element {i}: fd={fd}, autodiff={ad}"
            )));
        }
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(floor);
        errs.push(rel as f32);
    }
    Ok(errs)
}

fn eval_at<F>(f: &F, base: &[f32], shape: &[usize], i: usize, value: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    let mut data = base.to_vec();
    data[i] = value;
    let t = Tensor::from_vec(data, shape)?;
    let mut graph = Graph::no_grad();
    let out = f(&mut graph, &t)?.item()?;
    if !out.is_finite() {
        return Err(Error::Numeric(format!("loss is {out} near element {i}")));
    }
    Ok(out)
}

/// Outcome of one named check in [`standard_suite`].
pub struct SuiteOutcome {
    pub name: &'static str,
    pub max_rel_err: f32,
}

/// Battery of finite-difference checks covering every differentiable op,
/// each input of the multi-input ops, and two composite blocks. Constants
/// and probe points are drawn from streams keyed by `seed`, so different
/// seeds give independent random instances.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteOutcome>> {
    let mut results = Vec::new();
    results.push(linear_exact_case(seed)?);

    let mut idx: u64 = 1;
    let mut run = |name: &'static str,
                   shape: &[usize],
                   std: f32,
                   h: f32,
                   floor: f64,
                   build: Box<CaseFn>,
                   results: &mut Vec<SuiteOutcome>|
     -> Result<()> {
        let case = idx;
        idx += 1;
        let mut xs = RngStream::new(seed, "gradcheck-x", case, 0);
        let x = Tensor::randn(shape, std, &mut xs);
        let err = check_with_readout(seed, case, &x, h, floor, build.as_ref())?;
        results.push(SuiteOutcome {
            name,
            max_rel_err: err,
        });
        Ok(())
    };

    let mut cs = RngStream::new(seed, "gradcheck-const", 0, 0);

    {
        let c = Tensor::randn(&[3, 5], 0.5, &mut cs);
        run(
            "add",
            &[3, 5],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.add(x, &c)),
            &mut results,
        )?;
    }
    {
        let c = Tensor::randn(&[3, 5], 0.5, &mut cs);
        run(
            "mul",
            &[3, 5],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.mul(x, &c)),
            &mut results,
        )?;
    }
    run(
        "scale",
        &[4, 4],
        0.5,
        0.05,
        DEFAULT_DENOM_FLOOR,
        Box::new(|g, x| Ok(g.scale(x, 0.75))),
        &mut results,
    )?;
    {
        let b = Tensor::randn(&[6, 5], 0.5, &mut cs);
        run(
            "matmul_lhs",
            &[4, 6],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.matmul(x, &b)),
            &mut results,
        )?;
    }
    {
        let a = Tensor::randn(&[4, 6], 0.5, &mut cs);
        run(
            "matmul_rhs",
            &[6, 5],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.matmul(&a, x)),
            &mut results,
        )?;
    }
    {
        let b = Tensor::randn(&[5, 6], 0.5, &mut cs);
        run(
            "matmul_nt_lhs",
            &[4, 6],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.matmul_nt(x, &b)),
            &mut results,
        )?;
    }
    {
        let a = Tensor::randn(&[4, 6], 0.5, &mut cs);
        run(
            "matmul_nt_rhs",
            &[5, 6],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.matmul_nt(&a, x)),
            &mut results,
        )?;
    }
    {
        let w = Tensor::randn(&[3, 6], 0.5, &mut cs);
        let b = Tensor::randn(&[3], 0.5, &mut cs);
        run(
            "linear_input",
            &[4, 6],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.linear(x, &w, Some(&b))),
            &mut results,
        )?;
    }
    {
        let xin = Tensor::randn(&[4, 6], 0.5, &mut cs);
        let b = Tensor::randn(&[3], 0.5, &mut cs);
        run(
            "linear_weight",
            &[3, 6],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, w| g.linear(&xin, w, Some(&b))),
            &mut results,
        )?;
    }
    {
        let xin = Tensor::randn(&[4, 6], 0.5, &mut cs);
        let w = Tensor::randn(&[3, 6], 0.5, &mut cs);
        run(
            "linear_bias",
            &[3],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, b| g.linear(&xin, &w, Some(b))),
            &mut results,
        )?;
    }
    {
        let xin = Tensor::randn(&[4, 5], 0.5, &mut cs);
        run(
            "add_bias",
            &[5],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, b| g.add_bias(&xin, b)),
            &mut results,
        )?;
    }
    {
        let tile = Tensor::randn(&[2, 4], 0.5, &mut cs);
        run(
            "add_tiled_input",
            &[6, 4],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.add_tiled(x, &tile)),
            &mut results,
        )?;
    }
    {
        let xin = Tensor::randn(&[6, 4], 0.5, &mut cs);
        run(
            "add_tiled_tile",
            &[2, 4],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, t| g.add_tiled(&xin, t)),
            &mut results,
        )?;
    }
    run(
        "sum",
        &[3, 4],
        0.5,
        0.05,
        DEFAULT_DENOM_FLOOR,
        Box::new(|g, x| Ok(g.sum(x))),
        &mut results,
    )?;
    run(
        "softmax_rows",
        &[3, 7],
        1.0,
        0.02,
        NONLINEAR_DENOM_FLOOR,
        Box::new(|g, x| g.softmax(x, 1)),
        &mut results,
    )?;
    run(
        "softmax_cols",
        &[5, 3],
        1.0,
        0.02,
        NONLINEAR_DENOM_FLOOR,
        Box::new(|g, x| g.softmax(x, 0)),
        &mut results,
    )?;
    {
        let (gamma, beta) = affine_pair(8, &mut cs);
        run(
            "layer_norm_input",
            &[4, 8],
            1.0,
            0.02,
            NONLINEAR_DENOM_FLOOR,
            Box::new(move |g, x| g.layer_norm(x, &gamma, &beta, 1e-5)),
            &mut results,
        )?;
    }
    {
        let xin = Tensor::randn(&[4, 8], 1.0, &mut cs);
        let (_, beta) = affine_pair(8, &mut cs);
        run(
            "layer_norm_gamma",
            &[8],
            0.5,
            0.02,
            NONLINEAR_DENOM_FLOOR,
            Box::new(move |g, gamma| g.layer_norm(&xin, gamma, &beta, 1e-5)),
            &mut results,
        )?;
    }
    {
        let xin = Tensor::randn(&[4, 8], 1.0, &mut cs);
        let (gamma, _) = affine_pair(8, &mut cs);
        run(
            "layer_norm_beta",
            &[8],
            0.5,
            0.02,
            NONLINEAR_DENOM_FLOOR,
            Box::new(move |g, beta| g.layer_norm(&xin, &gamma, beta, 1e-5)),
            &mut results,
        )?;
    }
    run(
        "gelu",
        &[4, 6],
        1.0,
        0.015,
        NONLINEAR_DENOM_FLOOR,
        Box::new(|g, x| Ok(g.gelu(x))),
        &mut results,
    )?;
    run(
        "block_slice_overlap",
        &[4, 5],
        0.5,
        0.05,
        DEFAULT_DENOM_FLOOR,
        Box::new(|g, x| {
            let a = g.block_slice(x, 0, 2, 0, 3)?;
            let b = g.block_slice(x, 1, 2, 1, 3)?;
            g.concat_cols(&[&a, &b])
        }),
        &mut results,
    )?;
    {
        let c = Tensor::randn(&[2, 4], 0.5, &mut cs);
        run(
            "concat_rows",
            &[3, 4],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.concat_rows(&[x, &c])),
            &mut results,
        )?;
    }
    {
        let c = Tensor::randn(&[3, 2], 0.5, &mut cs);
        run(
            "concat_cols",
            &[3, 4],
            0.5,
            0.05,
            DEFAULT_DENOM_FLOOR,
            Box::new(move |g, x| g.concat_cols(&[&c, x])),
            &mut results,
        )?;
    }
    run(
        "residual_fanout",
        &[4, 5],
        0.5,
        0.015,
        NONLINEAR_DENOM_FLOOR,
        Box::new(|g, x| {
            let a = g.gelu(x);
            g.add(x, &a)
        }),
        &mut results,
    )?;
    {
        let w1 = Tensor::randn(&[8, 6], 0.4, &mut cs);
        let b1 = Tensor::randn(&[8], 0.4, &mut cs);
        let w2 = Tensor::randn(&[3, 8], 0.4, &mut cs);
        let b2 = Tensor::randn(&[3], 0.4, &mut cs);
        run(
            "mlp_two_layer",
            &[4, 6],
            0.5,
            0.015,
            NONLINEAR_DENOM_FLOOR,
            Box::new(move |g, x| {
                let h1 = g.linear(x, &w1, Some(&b1))?;
                let a1 = g.gelu(&h1);
                g.linear(&a1, &w2, Some(&b2))
            }),
            &mut results,
        )?;
    }
    {
        let wq = Tensor::randn(&[8, 8], 0.35, &mut cs);
        let wk = Tensor::randn(&[8, 8], 0.35, &mut cs);
        let wv = Tensor::randn(&[8, 8], 0.35, &mut cs);
        let case = idx;
        let mut xs = RngStream::new(seed, "gradcheck-x", case, 0);
        let x = Tensor::randn(&[5, 8], 0.5, &mut xs);
        // Deepest composite in the suite: three matmuls feeding a softmax
        // leave ~1e-6 of single-precision forward noise on the loss, which
        // central differences at h ≈ 0.02 turn into ~1e-4 of absolute noise
        // on the gradient. A wider denominator floor keeps that noise from
        // failing elements whose true gradient is near zero; a structurally
        // wrong backward still fails because its error scales with the
        // gradient magnitudes themselves, orders of magnitude above the
        // tolerance band (tolerance × floor = 2.5e-4).
        let err = check_with_readout(seed, case, &x, 0.02, 0.25, &move |g, x| {
            let q = g.matmul_nt(x, &wq)?;
            let k = g.matmul_nt(x, &wk)?;
            let v = g.matmul_nt(x, &wv)?;
            let scores = g.matmul_nt(&q, &k)?;
            let scaled = g.scale(&scores, 1.0 / (8.0f32).sqrt());
            let attn = g.softmax(&scaled, 1)?;
            g.matmul(&attn, &v)
        })?;
        results.push(SuiteOutcome {
            name: "attention_head",
            max_rel_err: err,
        });
    }

    Ok(results)
}

type CaseFn = dyn Fn(&mut Graph, &Tensor) -> Result<Tensor>;

/// Weighted-sum readout around `build`, with the loss rescaled to a fixed
/// small magnitude so finite-difference noise stays uniform across cases.
/// The rescale is capped: when the readout happens to cancel to a tiny
/// value, an uncapped factor would amplify forward roundoff past the
/// tolerance band. Checked at a ladder of step sizes from half to four
/// times the base step so one unlucky step cannot fail a correct gradient:
/// small steps lose to forward roundoff, large ones to curvature, and a
/// genuinely wrong gradient disagrees by orders of magnitude at every step.
fn check_with_readout(
    seed: u64,
    case: u64,
    x: &Tensor,
    h: f32,
    floor: f64,
    build: &CaseFn,
) -> Result<f32> {
    let out_shape = {
        let mut g = Graph::no_grad();
        build(&mut g, x)?.shape()
    };
    let mut ws = RngStream::new(seed, "gradcheck-w", case, 0);
    let w = rademacher(&out_shape, &mut ws);
    let l0 = {
        let mut g = Graph::no_grad();
        let y = build(&mut g, x)?;
        let wy = g.mul(&y, &w)?;
        g.sum(&wy).item()?
    };
    let scale = (0.15 / l0.abs().max(1.5e-4)).min(2.0);
    grad_check_multi_h_floored(
        |g, t| {
            let y = build(g, t)?;
            let wy = g.mul(&y, &w)?;
            let s = g.sum(&wy);
            Ok(g.scale(&s, scale))
        },
        x,
        &[0.5 * h, h, 2.0 * h, 4.0 * h],
        floor,
    )
}

/// Readout weights of ±1 keep typical gradient magnitudes away from zero.
fn rademacher(shape: &[usize], stream: &mut RngStream) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| if stream.chance(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_vec(data, shape).expect("shape/data constructed together")
}

fn affine_pair(n: usize, stream: &mut RngStream) -> (Tensor, Tensor) {
    let gamma: Vec<f32> = (0..n).map(|_| 1.0 + 0.3 * stream.normal()).collect();
    let beta: Vec<f32> = (0..n).map(|_| 0.2 * stream.normal()).collect();
    (
        Tensor::from_vec(gamma, &[n]).expect("length matches"),
        Tensor::from_vec(beta, &[n]).expect("length matches"),
    )
}

/// Linear functions have exact central differences. With dyadic inputs, a
/// power-of-two step, and ±1 weights every intermediate is exactly
/// representable, so the check comes out near machine-exact.
fn linear_exact_case(seed: u64) -> Result<SuiteOutcome> {
    let mut s = RngStream::new(seed, "gradcheck-dyadic", 0, 0);
    let data: Vec<f32> = (0..6)
        .map(|_| (s.uniform_i64(-8, 8) as f32) / 8.0)
        .collect();
    let x = Tensor::from_vec(data, &[2, 3])?;
    let w = rademacher(&[2, 3], &mut s);
    let err = grad_check(
        |g, t| {
            let wy = g.mul(t, &w)?;
            let sum = g.sum(&wy);
            Ok(g.scale(&sum, 0.25))
        },
        &x,
        0.25,
    )?;
    Ok(SuiteOutcome {
        name: "linear_exact",
        max_rel_err: err,
    })
}
