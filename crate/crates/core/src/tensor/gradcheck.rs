//! Central finite-difference gradient checks (64-bit only).

use rand::RngExt;

use super::Tensor;
use crate::error::Result;
use crate::rng;

/// Gradients smaller than this are compared in absolute terms: the relative
/// error denominator is `max(|autodiff|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElementError {
    pub input: usize,
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: Vec<ElementError>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ElementError> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare autodiff gradients of the scalar `f` against central differences
/// at `inputs` (value, shape pairs). Each call of `f` receives fresh leaves.
pub fn grad_check<Fun>(f: Fun, inputs: &[(Vec<f64>, Vec<usize>)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    Fun: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = |vals: &[Vec<f64>]| -> Result<Vec<Tensor<f64>>> {
        vals.iter()
            .zip(inputs)
            .map(|(v, (_, shape))| Tensor::param(v.clone(), shape))
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();

    let xs = leaves(&base)?;
    let root = f(&xs)?;
    root.backward()?;
    let analytic: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.grad_vec().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let mut rng = rng::stream(opts.seed, &[0x6c]);
    let mut checked = Vec::new();
    let mut vals = base.clone();
    for (i, values) in base.iter().enumerate() {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        if let Some(k) = opts.max_per_input {
            if k < idx.len() {
                for j in 0..k {
                    let r = rng.random_range(j..idx.len());
                    idx.swap(j, r);
                }
                idx.truncate(k);
                idx.sort_unstable();
            }
        }
        for &e in &idx {
            let orig = values[e];
            vals[i][e] = orig + opts.eps;
            let up = f(&leaves(&vals)?)?.item();
            vals[i][e] = orig - opts.eps;
            let down = f(&leaves(&vals)?)?.item();
            vals[i][e] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let autodiff = analytic[i][e];
            checked.push(ElementError {
                input: i,
                index: e,
                autodiff,
                numeric,
                rel_err: rel_err(autodiff, numeric),
            });
        }
    }
    let max_rel_err = checked.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err < opts.tol,
    })
}

/// A named scalar expression over leaf inputs, used by the primitive suite.
pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// Reduce `y` to a scalar through a fixed pseudo-random projection, so that
/// every output element carries a distinct weight.
fn project(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w: Vec<f64> = (0..y.numel())
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() * 2.0 - 1.0)
        .collect();
    y.mul(&Tensor::new(w, y.shape())?)?.sum()
}

/// One case per differentiable primitive.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case("matmul", &[&[4, 4], &[4, 4]], |x| project(&x[0].matmul(&x[1])?)),
        case("add", &[&[4, 4], &[4, 4]], |x| project(&x[0].add(&x[1])?)),
        case("add_scalar", &[&[4, 4], &[]], |x| project(&x[0].add(&x[1])?)),
        case("sub", &[&[4, 4], &[4, 4]], |x| project(&x[0].sub(&x[1])?)),
        case("mul", &[&[4, 4], &[4, 4]], |x| project(&x[0].mul(&x[1])?)),
        case("mul_scalar", &[&[4, 4], &[]], |x| project(&x[0].mul(&x[1])?)),
        case("scale", &[&[4, 4]], |x| project(&x[0].scale(-1.7)?)),
        case("add_row", &[&[4, 4], &[4]], |x| project(&x[0].add_row(&x[1])?)),
        case("transpose", &[&[4, 4]], |x| project(&x[0].transpose()?)),
        case("reshape", &[&[4, 4]], |x| project(&x[0].reshape(&[2, 8])?)),
        case("gather_rows", &[&[4, 4]], |x| project(&x[0].gather_rows(&[3, 0, 3, 1])?)),
        case("embedding_lookup", &[&[4, 4]], |x| project(&x[0].embedding_lookup(&[2, 2, 0])?)),
        case("slice", &[&[4, 4]], |x| project(&x[0].slice(1, 1, 2)?)),
        case("concat", &[&[4, 4], &[4, 4]], |x| project(&Tensor::concat(&[x[0].clone(), x[1].clone()], 0)?)),
        case("softmax", &[&[4, 4]], |x| project(&x[0].softmax(1)?)),
        case("softmax_axis0", &[&[4, 4]], |x| project(&x[0].softmax(0)?)),
        case("layer_norm", &[&[4, 4], &[4], &[4]], |x| project(&x[0].layer_norm(1, &x[1], &x[2], 1e-6)?)),
        case("gelu", &[&[4, 4]], |x| project(&x[0].gelu()?)),
        case("scaled_dot_attention", &[&[4, 4], &[4, 4], &[4, 4]], |x| {
            project(&Tensor::scaled_dot_attention(&x[0], &x[1], &x[2], 2)?)
        }),
        case("sum", &[&[4, 4]], |x| x[0].mul(&x[0])?.sum()),
        case("mean", &[&[4, 4]], |x| x[0].mul(&x[0])?.mean()),
        case("huber", &[&[4, 4]], |x| x[0].scale(2.5)?.huber(1.0)?.sum()),
    ]
}

/// Run `case` on `instances` random inputs drawn uniformly from [-1, 1].
/// Returns the worst report.
pub fn run_case(c: &Case, instances: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut worst: Option<GradCheckReport> = None;
    for inst in 0..instances {
        let mut r = rng::stream(opts.seed, &[0x67, inst as u64]);
        let inputs: Vec<(Vec<f64>, Vec<usize>)> = c
            .shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                ((0..n).map(|_| r.random_range(-1.0..1.0)).collect(), s.clone())
            })
            .collect();
        let rep = grad_check(&c.f, &inputs, opts)?;
        if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
            worst = Some(rep);
        }
    }
    Ok(worst.expect("instances > 0"))
}
