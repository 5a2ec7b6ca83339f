//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative error, so that gradients that are zero in
/// both routes do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    pub tolerance: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.overall() <= self.tolerance
    }

    pub fn overall(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of scalar `f` with respect to every
/// element of every input against the central difference
/// `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work = inputs.to_vec();
    let mut max_rel_err = vec![0.0; inputs.len()];
    let mut worst: Option<Mismatch> = None;
    let mut worst_err = -1.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            max_rel_err[i] = f64::max(max_rel_err[i], err);
            if err > worst_err {
                worst_err = err;
                worst = Some(Mismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        tolerance: tol,
        worst,
    })
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", t.shape(), &[1]));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random(shape: &[usize], rng: &mut RngState) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_sum_gradient() {
        let mut rng = RngState::new(5);
        let a = random(&[3, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        let report = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.sum(y)
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A step comparable to x makes the central difference of ln(x) inaccurate.
        let x = Tensor::new(&[1], vec![0.05]).unwrap();
        let report = grad_check(
            |g, v| {
                let l = g.log(v[0])?;
                g.sum(l)
            },
            &[x],
            0.049,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.worst.is_some());
    }
}
