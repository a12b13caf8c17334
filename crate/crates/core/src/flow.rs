//! Flow-matching interpolant, Euler integration and guidance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One flow-matching training draw for a flat target vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub eps: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub v_star: Vec<f64>,
}

impl FlowBatch {
    pub fn new(target: &[f64], eps: Vec<f64>, t: f64) -> Result<Self> {
        if eps.len() != target.len() {
            return Err(Error::invalid(format!(
                "noise has {} values, target {}",
                eps.len(),
                target.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
        }
        let x_t = eps.iter().zip(target).map(|(&e, &m)| (1.0 - t) * e + t * m).collect();
        let v_star = eps.iter().zip(target).map(|(&e, &m)| m - e).collect();
        Ok(FlowBatch { eps, t, x_t, v_star })
    }

    /// `t ~ U(0, 1)`, `ε ~ N(0, I)`.
    pub fn draw<R: Rng>(target: &[f64], rng: &mut R) -> Self {
        let t = rng.random::<f64>();
        let eps = gaussian(target.len(), rng);
        FlowBatch::new(target, eps, t).expect("shapes and time are valid by construction")
    }
}

pub fn gaussian<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub trait VelocityField {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F> VelocityField for F
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self(x, t)
    }
}

/// `N` forward-Euler steps from `t = 0` to `t = 1`.
pub fn euler<V: VelocityField>(field: &mut V, x0: Vec<f64>, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::invalid("flow integration needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field.velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::invalid(format!("velocity has {} values, state {}", v.len(), x.len())));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// `v_u + s·(v_c − v_u)`.
pub fn guide(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(&c, &u)| u + scale * (c - u)).collect()
}

/// Classifier-free guidance over a conditional and an unconditional field.
/// At scale 1 the unconditional branch is never evaluated.
pub struct Guided<C, U> {
    pub cond: C,
    pub uncond: U,
    pub scale: f64,
}

impl<C: VelocityField, U: VelocityField> VelocityField for Guided<C, U> {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let c = self.cond.velocity(x, t)?;
        if self.scale == 1.0 {
            return Ok(c);
        }
        let u = self.uncond.velocity(x, t)?;
        Ok(guide(&c, &u, self.scale))
    }
}
