//! Smooth losses `f(Xᵀw)`, regularizers `g(w)` and the per-worker pieces
//! needed to evaluate them from the cached margins `z_k = X_kᵀw`.

use crate::data::LabeledShard;
use crate::dd::Dd;
use crate::error::Error;

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-t})` without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `softplus(a + delta) - softplus(a)` to full relative precision when the
/// change is small.
fn softplus_change(a: f64, delta: f64) -> f64 {
    if delta.abs() <= 1.0 {
        (sigmoid(a) * delta.exp_m1()).ln_1p()
    } else {
        softplus(a + delta) - softplus(a)
    }
}

/// A loss that is a sum of per-instance terms of the margin `z_i = x_iᵀw`.
///
/// Sums come back as double-word partials; see [`crate::dd`].
pub trait SmoothLoss: Sync {
    fn value(&self, labels: &[f64], z: &[f64]) -> Dd;

    /// Per-instance derivative `∂f/∂z_i`.
    fn derivative(&self, labels: &[f64], z: &[f64], out: &mut [f64]);

    /// `value(z_new) - value(z_old)`; implementations may compute it more
    /// accurately than the two sums.
    fn value_change(&self, labels: &[f64], z_old: &[f64], z_new: &[f64]) -> Dd {
        let mut v = self.value(labels, z_new);
        v.merge(-self.value(labels, z_old));
        v
    }

    /// Per-instance second derivative, if the loss provides one.
    fn curvature(&self, _labels: &[f64], _z: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// `C · Σ log(1 + exp(-y_i z_i))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic {
    pub c: f64,
}

impl Default for Logistic {
    fn default() -> Self {
        Self { c: 1.0 }
    }
}

impl SmoothLoss for Logistic {
    fn value(&self, labels: &[f64], z: &[f64]) -> Dd {
        labels.iter().zip(z).map(|(y, z)| self.c * softplus(-y * z)).sum()
    }

    fn derivative(&self, labels: &[f64], z: &[f64], out: &mut [f64]) {
        for ((o, y), z) in out.iter_mut().zip(labels).zip(z) {
            *o = -self.c * y * sigmoid(-y * z);
        }
    }

    fn value_change(&self, labels: &[f64], z_old: &[f64], z_new: &[f64]) -> Dd {
        labels
            .iter()
            .zip(z_old.iter().zip(z_new))
            .map(|(y, (zo, zn))| self.c * softplus_change(-y * zo, -y * (zn - zo)))
            .sum()
    }

    fn curvature(&self, labels: &[f64], z: &[f64], out: &mut [f64]) -> bool {
        for ((o, y), z) in out.iter_mut().zip(labels).zip(z) {
            let t = y * z;
            *o = self.c * sigmoid(t) * sigmoid(-t);
        }
        true
    }
}

/// Local loss value `f_k(z_k)`.
pub fn loss_value_local(loss: &impl SmoothLoss, shard: &LabeledShard, z: &[f64]) -> Dd {
    loss.value(shard.labels(), z)
}

/// The worker's additive share `X_k ∇f_k(z_k)` of the full gradient.
pub fn grad_local(loss: &impl SmoothLoss, shard: &LabeledShard, z: &[f64]) -> Vec<Dd> {
    let mut coef = vec![0.0; shard.n_instances()];
    loss.derivative(shard.labels(), z, &mut coef);
    let mut out = vec![Dd::ZERO; shard.n_features()];
    shard.matrix().accumulate_weighted(&coef, &mut out);
    out
}

/// Worker share of `vᵀ ∇²f̃(w) v`, given `v_dot_x[i] = x_iᵀv`. `None` when the
/// loss has no second derivative.
pub fn hessian_quadform_local(loss: &impl SmoothLoss, shard: &LabeledShard, z: &[f64], v_dot_x: &[f64]) -> Option<Dd> {
    let mut curv = vec![0.0; shard.n_instances()];
    if !loss.curvature(shard.labels(), z, &mut curv) {
        return None;
    }
    Some(curv.iter().zip(v_dot_x).map(|(c, t)| c * t * t).sum())
}

/// A closed convex regularizer with an exact proximal operator.
pub trait Regularizer: Sync {
    fn value(&self, w: &[f64]) -> f64;

    /// `out = argmin_x ½‖x − v‖² + step · g(x)`.
    fn prox(&self, v: &[f64], step: f64, out: &mut [f64]);

    /// Separable regularizers may be evaluated and proxed on any coordinate
    /// block independently.
    fn is_separable(&self) -> bool;

    /// `g(w_new) − g(w)`; separable implementations sum per-coordinate changes.
    fn value_change(&self, w: &[f64], w_new: &[f64]) -> f64 {
        self.value(w_new) - self.value(w)
    }

    /// `g(w + p) − g(w)` without first rounding `w + p`, as a partial sum
    /// over the given block.
    fn step_change(&self, w: &[f64], p: &[f64]) -> Dd {
        let moved: Vec<f64> = w.iter().zip(p).map(|(a, b)| a + b).collect();
        Dd::new(self.value_change(w, &moved))
    }
}

/// `λ‖w‖₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1 {
    pub lambda: f64,
}

impl Default for L1 {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

impl Regularizer for L1 {
    fn value(&self, w: &[f64]) -> f64 {
        self.lambda * w.iter().map(|x| x.abs()).sum::<f64>()
    }

    fn prox(&self, v: &[f64], step: f64, out: &mut [f64]) {
        let t = self.lambda * step;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = soft_threshold(x, t);
        }
    }

    fn is_separable(&self) -> bool {
        true
    }

    fn value_change(&self, w: &[f64], w_new: &[f64]) -> f64 {
        // each |a| − |b| is a single correctly rounded subtraction
        self.lambda * w.iter().zip(w_new).map(|(a, b)| b.abs() - a.abs()).sum::<f64>()
    }

    fn step_change(&self, w: &[f64], p: &[f64]) -> Dd {
        // |w + p| − |w| = sign(w)·p while the sign is kept
        w.iter()
            .zip(p)
            .map(|(&a, &b)| {
                let change = if a != 0.0 && a.signum() * b > -a.abs() {
                    a.signum() * b
                } else {
                    (a + b).abs() - a.abs()
                };
                self.lambda * change
            })
            .sum()
    }
}

/// `g ≡ 0`; its prox is the identity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Zero;

impl Regularizer for Zero {
    fn value(&self, _w: &[f64]) -> f64 {
        0.0
    }

    fn prox(&self, v: &[f64], _step: f64, out: &mut [f64]) {
        out.copy_from_slice(v);
    }

    fn is_separable(&self) -> bool {
        true
    }

    fn value_change(&self, _w: &[f64], _w_new: &[f64]) -> f64 {
        0.0
    }
}

/// Solves `min_p ½‖p − u‖² + g(w + p)/ψ`: `p = prox_{g/ψ}(w + u) − w`.
pub fn prox_step(reg: &impl Regularizer, u: &[f64], w: &[f64], psi: f64, p: &mut [f64]) -> Result<(), Error> {
    if !(psi > 0.0) {
        return Err(Error::Domain(format!("prox step needs psi > 0, got {psi}")));
    }
    let shifted: Vec<f64> = w.iter().zip(u).map(|(a, b)| a + b).collect();
    reg.prox(&shifted, 1.0 / psi, p);
    for (pj, wj) in p.iter_mut().zip(w) {
        *pj -= wj;
    }
    Ok(())
}

/// `Δ = ∇f̃(w)ᵀp + g(w + p) − g(w)`, given the reduced `∇f̃(w)ᵀp`.
pub fn delta_term(reg: &impl Regularizer, grad_dot_p: f64, w: &[f64], p: &[f64]) -> f64 {
    grad_dot_p + reg.step_change(w, p).value()
}
