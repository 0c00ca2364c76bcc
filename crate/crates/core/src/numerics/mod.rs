//! Dense tensors, a reverse-mode gradient tape, and the vector utilities used by
//! both the client (synthetic-data SGD, clipping) and the server (ρ-ball
//! sampling and projection).

mod autodiff;
mod tensor;

use rand::Rng;
use rand_distr::StandardNormal;

pub use autodiff::{grad, Gradients, Graph, Var};
#[cfg(test)]
pub(crate) use autodiff::sigmoid;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Flat view of a model's trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Splits the vector into tensors of the given shapes, in order.
    pub fn unflatten(&self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != self.dim() {
            return Err(Error::shape(
                "unflatten",
                format!("{} values for shapes totalling {total}", self.dim()),
            ));
        }
        let mut offset = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), self.0[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect()
    }

    pub fn flatten(tensors: &[Tensor]) -> Self {
        ParamVector(tensors.iter().flat_map(|t| t.data().iter().copied()).collect())
    }

    fn check_dim(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(Error::shape(op, format!("dimension {} vs {}", self.dim(), other.dim())))
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// `params - lr * grads`.
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector> {
    params.check_dim(grads, "sgd_step")?;
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid("lr", format!("must be positive, got {lr}")));
    }
    Ok(ParamVector(
        params.0.iter().zip(&grads.0).map(|(w, g)| w - lr * g).collect(),
    ))
}

/// Scales `g` by `1 / max(1, ‖g‖₂ / bound)`.
pub fn clip_by_norm(g: &ParamVector, bound: f64) -> Result<ParamVector> {
    let mut out = g.clone();
    clip_in_place(out.as_mut_slice(), bound)?;
    Ok(out)
}

pub(crate) fn clip_in_place(g: &mut [f64], bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::invalid("clip bound", format!("must be positive, got {bound}")));
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let divisor = (norm / bound).max(1.0);
    if divisor > 1.0 {
        g.iter_mut().for_each(|v| *v /= divisor);
    }
    Ok(())
}

/// Projects `w` onto the closed ℓ₂ ball of radius `rho` around `center`.
pub fn project_ball(w: &ParamVector, center: &ParamVector, rho: f64) -> Result<ParamVector> {
    let mut out = w.clone();
    project_ball_in_place(&mut out, center, rho)?;
    Ok(out)
}

pub(crate) fn project_ball_in_place(w: &mut ParamVector, center: &ParamVector, rho: f64) -> Result<()> {
    w.check_dim(center, "project_ball")?;
    if !(rho >= 0.0) {
        return Err(Error::invalid("rho", format!("must be non-negative, got {rho}")));
    }
    let dist = w.distance(center);
    if dist <= rho {
        return Ok(());
    }
    if rho == 0.0 {
        w.0.copy_from_slice(&center.0);
        return Ok(());
    }
    let offset: Vec<f64> = w.0.iter().zip(&center.0).map(|(x, c)| x - c).collect();
    let mut scale = rho / dist;
    loop {
        for ((x, c), o) in w.0.iter_mut().zip(&center.0).zip(&offset) {
            *x = c + scale * o;
        }
        // rounding can leave the result a few ulps outside the ball
        if w.distance(center) <= rho {
            return Ok(());
        }
        scale *= 1.0 - 1e-15;
    }
}

/// Draws `w ~ N(center, I)` and projects it radially into the `rho`-ball around `center`.
pub fn sample_ball_weight<R: Rng + ?Sized>(
    center: &ParamVector,
    rho: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if !(rho >= 0.0) {
        return Err(Error::invalid("rho", format!("must be non-negative, got {rho}")));
    }
    if rho == 0.0 {
        return Ok(center.clone());
    }
    let mut w = ParamVector(
        center
            .0
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    project_ball_in_place(&mut w, center, rho)?;
    Ok(w)
}

/// Central-difference gradient estimate of `f` at `params`.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&ParamVector) -> Result<f64, E>,
    params: &ParamVector,
    step: f64,
) -> Result<ParamVector, E>
where
    E: From<Error>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")).into());
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.dim());
    for i in 0..params.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + step;
        let up = f(&probe)?;
        probe.0[i] = orig - step;
        let down = f(&probe)?;
        probe.0[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(ParamVector(out))
}
