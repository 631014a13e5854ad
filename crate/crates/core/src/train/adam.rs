use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            let mut z = ParamSet::new();
            for (k, t) in p.iter() {
                z.insert(k, Tensor::zeros(t.shape()));
            }
            z
        };
        AdamState { m: zeros(params), v: zeros(params), step: 0 }
    }

    /// One bias-corrected update of `params` in place. Element math runs in
    /// 64-bit; results are stored as 32-bit. Every gradient is checked
    /// before anything is modified.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "adam", left: p.shape(), right: g.shape() });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            let mut pd = p.to_vec();
            let mut md = m.to_vec();
            let v = self.v.get_mut(name)?;
            let mut vd = v.to_vec();
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                let mi = cfg.beta1 * md[i] as f64 + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * vd[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
                let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                pd[i] = (pd[i] as f64 - update) as f32;
                md[i] = mi as f32;
                vd[i] = vi as f32;
            }
            let shape = p.shape();
            *p = Tensor::from_vec_unchecked(shape, pd);
            *m = Tensor::from_vec_unchecked(shape, md);
            *v = Tensor::from_vec_unchecked(shape, vd);
        }
        Ok(())
    }
}
