use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::vit::Module;

/// Only matrix weights are decayed; biases, norms and token/positional
/// tables are not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Non-finite gradient: nothing was updated.
    pub rejected: bool,
}

/// Adam with decoupled weight decay: `p *= 1 - lr*wd`, then the
/// bias-corrected adaptive step.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub state: BTreeMap<String, Moments<F>>,
}

impl<F: Float> Default for AdamW<F> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }
}

impl<F: Float> AdamW<F> {
    /// Update every trainable parameter of `groups` from its accumulated
    /// gradient (missing gradients count as zero). With `clip`, gradients
    /// are rescaled to that global norm first.
    pub fn step(
        &mut self,
        groups: &mut [(&str, &mut dyn Module<F>)],
        lr: f64,
        wd: f64,
        clip: Option<f64>,
    ) -> Result<StepReport> {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for (prefix, module) in groups.iter() {
            module.visit(prefix, &mut |_, p| {
                if p.requires_grad() {
                    let g = p.grad_vec().map(|g| g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
                    grads.push(g.unwrap_or_else(|| vec![0.0; p.numel()]));
                }
            });
        }
        let mut sq = 0.0;
        for g in &grads {
            for v in g {
                sq += v * v;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Ok(StepReport {
                grad_norm,
                clipped: false,
                rejected: true,
            });
        }
        let mut scale = 1.0;
        if let Some(c) = clip {
            let coef = c / (grad_norm + 1e-6);
            if coef < 1.0 {
                scale = coef;
            }
        }

        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut i = 0;
        let state = &mut self.state;
        let mut err = None;
        for (prefix, module) in groups.iter_mut() {
            module.visit_mut(prefix, &mut |name, p| {
                if !p.requires_grad() || err.is_some() {
                    return;
                }
                let g = &grads[i];
                i += 1;
                let n = p.numel();
                let st = state.entry(name.clone()).or_insert_with(|| Moments {
                    m: vec![F::zero(); n],
                    v: vec![F::zero(); n],
                });
                if st.m.len() != n {
                    err = Some(Error::shape("adamw", format!("{name}: moments {} vs {n}", st.m.len())));
                    return;
                }
                let decay = if decays(&name) { 1.0 - lr * wd } else { 1.0 };
                let mut data = Vec::with_capacity(n);
                for (j, &pj) in p.data().iter().enumerate() {
                    let gj = g[j] * scale;
                    let m = b1 * st.m[j].to_f64().unwrap_or(0.0) + (1.0 - b1) * gj;
                    let v = b2 * st.v[j].to_f64().unwrap_or(0.0) + (1.0 - b2) * gj * gj;
                    st.m[j] = F::of(m);
                    st.v[j] = F::of(v);
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    let x = pj.to_f64().unwrap_or(f64::NAN) * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    data.push(F::of(x));
                }
                *p = Tensor::param(data, p.shape()).expect("same shape");
            });
        }
        if let Some(e) = err {
            return Err(e);
        }
        Ok(StepReport {
            grad_norm,
            clipped: scale < 1.0,
            rejected: false,
        })
    }
}

/// Clear accumulated gradients of every parameter.
pub fn zero_grads<F: Float>(module: &dyn Module<F>) {
    module.visit("", &mut |_, p| p.zero_grad());
}

/// `target <- m * target + (1 - m) * online`, matched by parameter order.
pub fn ema_update<F: Float>(target: &mut dyn Module<F>, online: &dyn Module<F>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA decay {m} outside [0, 1]")));
    }
    let src = online.named_params();
    let mut i = 0;
    let mut err = None;
    target.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some((sname, s)) = src.get(i) else {
            err = Some(Error::shape("ema_update", format!("online model lacks {name}")));
            return;
        };
        i += 1;
        if sname != &name || s.shape() != t.shape() {
            err = Some(Error::shape(
                "ema_update",
                format!("{name} {:?} vs {sname} {:?}", t.shape(), s.shape()),
            ));
            return;
        }
        let (mf, rest) = (F::of(m), F::of(1.0 - m));
        let data = t.data().iter().zip(s.data()).map(|(&a, &b)| mf * a + rest * b).collect();
        *t = Tensor::new(data, t.shape()).expect("same shape");
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != src.len() {
        return Err(Error::shape("ema_update", format!("{} target vs {} online parameters", i, src.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::Linear;

    fn lin(w: Vec<f64>, b: Vec<f64>, grad: bool) -> Linear<f64> {
        let n = b.len();
        let mk = |d: Vec<f64>, s: &[usize]| {
            let t = Tensor::new(d, s).unwrap();
            if grad {
                t.into_param()
            } else {
                t
            }
        };
        Linear {
            w: mk(w, &[1, n]),
            b: mk(b, &[n]),
        }
    }

    fn set_grad(l: &Linear<f64>, gw: f64, gb: f64) {
        l.w.mul(&Tensor::scalar(gw)).unwrap().sum().unwrap()
            .add(&l.b.mul(&Tensor::scalar(gb)).unwrap().sum().unwrap()).unwrap()
            .backward().unwrap();
    }

    #[test]
    fn zero_grad_zero_wd_is_identity() {
        let mut l = lin(vec![0.3], vec![-0.2], true);
        let mut opt = AdamW::<f64>::default();
        opt.step(&mut [("l", &mut l)], 1e-3, 0.0, None).unwrap();
        assert_eq!(l.w.to_f64(), vec![0.3]);
        assert_eq!(l.b.to_f64(), vec![-0.2]);
    }

    #[test]
    fn decay_only_on_weights() {
        let mut l = lin(vec![2.0], vec![2.0], true);
        let mut opt = AdamW::<f64>::default();
        opt.step(&mut [("l", &mut l)], 0.1, 0.5, None).unwrap();
        assert_eq!(l.w.to_f64(), vec![2.0 * (1.0 - 0.1 * 0.5)]);
        assert_eq!(l.b.to_f64(), vec![2.0]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut l = lin(vec![0.7], vec![0.1], true);
        let mut opt = AdamW::<f64>::default();
        let (lr, wd) = (1e-2, 0.1);
        // oracle state for the weight
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (t, g) in [0.5, -1.5, 0.25].into_iter().enumerate() {
            set_grad(&l, g, 0.0);
            opt.step(&mut [("l", &mut l)], lr, wd, None).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            p *= 1.0 - lr * wd;
            p -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((l.w.to_f64()[0] - p).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut l = lin(vec![1.0], vec![1.0], true);
        l.w.set_grad(vec![f64::NAN]);
        let mut opt = AdamW::<f64>::default();
        let r = opt.step(&mut [("l", &mut l)], 1e-3, 0.0, None).unwrap();
        assert!(r.rejected);
        assert_eq!(opt.t, 0);
        assert_eq!(l.w.to_f64(), vec![1.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut l = lin(vec![0.0], vec![0.0], true);
        set_grad(&l, 30.0, 40.0);
        let mut opt = AdamW::<f64>::default();
        let r = opt.step(&mut [("l", &mut l)], 1e-3, 0.0, Some(1.0)).unwrap();
        assert!(r.clipped);
        assert_eq!(r.grad_norm, 50.0);
        let m = &opt.state["l.w"].m;
        assert!((m[0] - 0.1 * 30.0 / 50.0).abs() < 1e-6);
    }

    #[test]
    fn ema_cases() {
        let online = lin(vec![0.0], vec![0.0], true);
        let mut t = lin(vec![1.0], vec![1.0], false);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.w.to_f64(), vec![1.0]);
        ema_update(&mut t, &online, 0.996).unwrap();
        assert_eq!(t.w.to_f64(), vec![0.996]);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.w.to_f64(), vec![0.0]);
        assert!(!t.w.requires_grad());
        assert!(ema_update(&mut t, &online, 1.5).is_err());
    }

    #[test]
    fn ema_contracts() {
        let online = lin(vec![0.5, -2.0, 3.0], vec![0.0, 1.0, 0.0], true);
        let mut t = lin(vec![-1.0, 4.0, 0.0], vec![2.0, 2.0, 2.0], false);
        let dist = |t: &Linear<f64>| {
            t.w.to_f64().iter().zip(online.w.to_f64()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let mut prev = dist(&t);
        for _ in 0..50 {
            ema_update(&mut t, &online, 0.9).unwrap();
            let d = dist(&t);
            assert!(d <= prev);
            prev = d;
        }
    }
}
