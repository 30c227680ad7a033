//! Central finite-difference checking of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes on constant leaves,
//! so it does not share any code path with the reverse sweep it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per-input `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`.
    pub relative_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Fixed projection weights so every output element contributes to the
/// scalar being differentiated.
fn projection(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 + ((i as f64) * 0.7548776662).fract())
        .collect()
}

fn projected<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let w = g.constant_vec(&out.shape(), projection(out.numel()))?;
    Ok(out.mul(&w)?.sum())
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences of step `h`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::<f64>::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.param(t)).collect();
        let loss = projected(&g, f(&g, &vars)?)?;
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                g.grad(*v)
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::<f64>::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| g.constant(t)).collect();
        Ok(projected(&g, f(&g, &vars)?)?.item())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff2 += (a[j] - numeric).powi(2);
            an2 += a[j] * a[j];
            nu2 += numeric * numeric;
        }
        relative_errors.push(diff2.sqrt() / an2.sqrt().max(nu2.sqrt()).max(1e-6));
    }
    Ok(GradReport { relative_errors })
}

/// Signature of a differentiable function under test.
pub type CaseFn = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

/// One op in the standard gradient-check catalogue.
#[derive(Clone)]
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    /// Sampling interval for random inputs.
    pub domain: (f64, f64),
    pub f: CaseFn,
}

impl OpCase {
    fn new(name: &'static str, inputs: &[&[usize]], f: CaseFn) -> Self {
        Self {
            name,
            inputs: inputs.iter().map(|s| s.to_vec()).collect(),
            domain: (-2.0, 2.0),
            f,
        }
    }

    fn positive(mut self) -> Self {
        self.domain = (0.2, 2.0);
        self
    }

    /// Draws inputs and runs [`check`] with `h`.
    pub fn run<R: rand::Rng + ?Sized>(&self, rng: &mut R, h: f64) -> Result<GradReport> {
        let inputs: Vec<Tensor<f64>> = self
            .inputs
            .iter()
            .map(|s| Tensor::uniform(s, self.domain.0, self.domain.1, rng))
            .collect();
        check(&inputs, h, self.f)
    }
}

/// Every differentiable primitive, at small randomized shapes.
pub fn standard_cases() -> Vec<OpCase> {
    const V: &[usize] = &[2, 3, 4];
    vec![
        OpCase::new("add", &[V, V], |_, x| x[0].add(&x[1])),
        OpCase::new("sub", &[V, V], |_, x| x[0].sub(&x[1])),
        OpCase::new("mul", &[V, V], |_, x| x[0].mul(&x[1])),
        OpCase::new("div", &[V, V], |_, x| x[0].div(&x[1])).positive(),
        OpCase::new("add_scalar", &[V], |_, x| Ok(x[0].add_scalar(0.75))),
        OpCase::new("mul_scalar", &[V], |_, x| Ok(x[0].mul_scalar(-1.25))),
        OpCase::new("exp", &[V], |_, x| Ok(x[0].exp())),
        OpCase::new("log", &[V], |_, x| Ok(x[0].log())).positive(),
        OpCase::new("sqrt", &[V], |_, x| Ok(x[0].sqrt())).positive(),
        OpCase::new("relu", &[V], |_, x| Ok(x[0].relu())),
        OpCase::new("leaky_relu", &[V], |_, x| Ok(x[0].leaky_relu(0.2))),
        OpCase::new("silu", &[V], |_, x| Ok(x[0].silu())),
        OpCase::new("sigmoid", &[V], |_, x| Ok(x[0].sigmoid())),
        OpCase::new("tanh", &[V], |_, x| Ok(x[0].tanh())),
        OpCase::new("softplus", &[V], |_, x| Ok(x[0].softplus())),
        OpCase::new("log_sigmoid", &[V], |_, x| Ok(x[0].log_sigmoid())),
        OpCase::new("abs", &[V], |_, x| Ok(x[0].abs())),
        OpCase::new("square", &[V], |_, x| Ok(x[0].square())),
        OpCase::new("matmul", &[&[3, 4], &[4, 5]], |_, x| x[0].matmul(&x[1])),
        OpCase::new(
            "conv2d_s1_p1",
            &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
            |_, x| x[0].conv2d(&x[1], Some(&x[2]), 1, 1),
        ),
        OpCase::new(
            "conv2d_s2_p1",
            &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]],
            |_, x| x[0].conv2d(&x[1], Some(&x[2]), 2, 1),
        ),
        OpCase::new("conv2d_1x1", &[&[1, 3, 4, 4], &[2, 3, 1, 1]], |_, x| {
            x[0].conv2d(&x[1], None, 1, 0)
        }),
        OpCase::new("upsample2x", &[&[2, 2, 3, 3]], |_, x| x[0].upsample2x()),
        OpCase::new("group_norm", &[&[2, 8, 3, 3], &[8], &[8]], |_, x| {
            x[0].group_norm(&x[1], &x[2], 4, 1e-5)
        }),
        OpCase::new("sum", &[V], |_, x| Ok(x[0].sum())),
        OpCase::new("mean", &[V], |_, x| Ok(x[0].mean())),
        OpCase::new("concat", &[&[2, 3, 4], &[2, 1, 4]], |_, x| {
            Var::concat(&[x[0], x[1]], 1)
        }),
        OpCase::new("slice", &[&[3, 5, 2]], |_, x| x[0].slice(1, 1, 3)),
        OpCase::new("reshape", &[V], |_, x| x[0].reshape(&[4, 6])),
        OpCase::new("add_bias", &[&[2, 3, 2, 2], &[3]], |_, x| {
            x[0].add_bias(&x[1])
        }),
        OpCase::new("add_channelwise", &[&[2, 3, 2, 2], &[2, 3]], |_, x| {
            x[0].add_channelwise(&x[1])
        }),
    ]
}
