//! Central-difference verification of tape gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude below which differences are measured absolutely rather than
/// relative to the gradient itself.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter, chosen with `seed`.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, tol: 1e-4, coords_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error for each parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        GradCheck { h, tol, ..Default::default() }
    }

    pub fn with_coords(mut self, per_param: usize, seed: u64) -> Self {
        self.coords_per_param = Some(per_param);
        self.seed = seed;
        self
    }

    /// Compares tape gradients of `f` at `params` against
    /// `(f(θ+h) − f(θ−h)) / 2h`.
    pub fn run<Func>(&self, params: &[Tensor<f64>], f: Func) -> Result<GradCheckReport>
    where
        Func: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
            let out = f(&tape, &vars)?;
            if out.shape().iter().product::<usize>() != 1 {
                return Err(Error::Contract("gradient check needs a scalar function".into()));
            }
            let v = out.item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("function returned {v}")));
            }
            Ok(v)
        };
        eval(params)?;

        let analytic: Vec<Tensor<f64>> = {
            let tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.var(p.clone())).collect();
            let out = f(&tape, &vars)?;
            let grads = tape.backward(out)?;
            vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<f64>> = params.to_vec();
        let mut per_param = Vec::with_capacity(params.len());
        let mut coords_checked = 0;
        for (pi, p) in params.iter().enumerate() {
            let coords: Vec<usize> = match self.coords_per_param {
                Some(c) if c < p.len() => {
                    let mut v = sample(&mut rng, p.len(), c).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..p.len()).collect(),
            };
            let mut worst = 0.0f64;
            for &c in &coords {
                let orig = p.data()[c];
                work[pi].data_mut()[c] = orig + self.h;
                let plus = eval(&work)?;
                work[pi].data_mut()[c] = orig - self.h;
                let minus = eval(&work)?;
                work[pi].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                worst = worst.max(rel_err(analytic[pi].data()[c], numeric));
            }
            coords_checked += coords.len();
            per_param.push(worst);
        }
        let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
        Ok(GradCheckReport { per_param, max_rel_err, coords_checked, tol: self.tol })
    }
}
