//! Compact limited-memory BFGS approximation
//! `H = γI − U M⁻¹ Uᵀ` with `U = [γS, Y]` and
//! `M = [[γSᵀS, L], [Lᵀ, −D]]`.
//!
//! Each worker stores the rows of `S` and `Y` for the coordinates it holds and
//! contributes partial inner products over the block it owns. The small Gram
//! blocks and the factorization of `M` are replicated on every worker.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::comm::Communicator;
use crate::dd::{self, Dd};
use crate::error::{CommError, Error};

/// How the diagonal scale `γ` is derived from the newest pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GammaRule {
    /// `γ = sᵀy / sᵀs`, the curvature along the newest step.
    #[default]
    CurvatureRatio,
    /// `γ = sᵀs / sᵀy`.
    InverseCurvatureRatio,
}

impl GammaRule {
    pub fn gamma(self, sts: f64, sty: f64) -> f64 {
        match self {
            GammaRule::CurvatureRatio => sty / sts,
            GammaRule::InverseCurvatureRatio => sts / sty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Admitted,
    /// `sᵀy < δ sᵀs`.
    Rejected,
    /// `sᵀs = 0`.
    Degenerate,
}

/// Linear symmetric operator used as the quadratic model's metric.
pub trait HessianHandle {
    /// `H p` for the coordinates this worker holds.
    fn apply(&self, p: &[f64], comm: &mut dyn Communicator) -> Result<Vec<f64>, CommError>;

    /// Diagonal scale, used to seed the spectral step.
    fn gamma(&self) -> f64;
}

/// Block LDLᵀ factorization of `M` through the Schur complement
/// `γSᵀS + L D⁻¹ Lᵀ = J Jᵀ`.
#[derive(Debug, Clone)]
struct MiddleFactor {
    /// Row-major lower-triangular Cholesky factor `J`.
    chol: Vec<f64>,
    /// Strictly lower `L`, row-major.
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl MiddleFactor {
    fn new(gamma: f64, sts: &[Vec<f64>], sty: &[Vec<f64>]) -> Option<Self> {
        let n = sts.len();
        let diag: Vec<f64> = (0..n).map(|i| sty[i][i]).collect();
        let mut lower = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                lower[i * n + j] = sty[i][j];
            }
        }
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                scale = scale.max((gamma * sts[i][j]).abs()).max(lower[i * n + j].abs());
            }
            scale = scale.max(diag[i].abs());
        }
        if diag.iter().any(|&v| !(v > 1e-12 * scale)) {
            return None;
        }
        // K = γSᵀS + L D⁻¹ Lᵀ
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut v = gamma * sts[i][j];
                for l in 0..j.min(i) {
                    v += lower[i * n + l] * lower[j * n + l] / diag[l];
                }
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let mut chol = vec![0.0; n * n];
        for j in 0..n {
            let mut pivot = k[j * n + j];
            for l in 0..j {
                pivot -= chol[j * n + l] * chol[j * n + l];
            }
            if !(pivot > 1e-12 * scale) {
                return None;
            }
            let root = pivot.sqrt();
            chol[j * n + j] = root;
            for i in j + 1..n {
                let mut v = k[i * n + j];
                for l in 0..j {
                    v -= chol[i * n + l] * chol[j * n + l];
                }
                chol[i * n + j] = v / root;
            }
        }
        Some(Self { chol, lower, diag })
    }

    fn len(&self) -> usize {
        self.diag.len()
    }

    /// Solves `M [a; b] = [r1; r2]` in place.
    fn solve(&self, r: &mut [f64]) {
        let n = self.len();
        let (r1, r2) = r.split_at_mut(n);
        // rhs = r1 + L D⁻¹ r2
        let mut a: Vec<f64> = (0..n)
            .map(|i| {
                r1[i]
                    + (0..i)
                        .map(|j| self.lower[i * n + j] * r2[j] / self.diag[j])
                        .sum::<f64>()
            })
            .collect();
        for i in 0..n {
            let mut v = a[i];
            for l in 0..i {
                v -= self.chol[i * n + l] * a[l];
            }
            a[i] = v / self.chol[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = a[i];
            for l in i + 1..n {
                v -= self.chol[l * n + i] * a[l];
            }
            a[i] = v / self.chol[i * n + i];
        }
        for j in 0..n {
            let lta: f64 = (j + 1..n).map(|i| self.lower[i * n + j] * a[i]).sum();
            r2[j] = (lta - r2[j]) / self.diag[j];
        }
        r1.copy_from_slice(&a);
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    delta: f64,
    rule: GammaRule,
    /// Global coordinates whose rows of `S`, `Y` are stored here.
    stored: Range<usize>,
    /// Sub-block (global coordinates) this worker contributes to inner products.
    owned: Range<usize>,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    /// `SᵀS`, full.
    sts: Vec<Vec<f64>>,
    /// `sty[i][j] = s_iᵀ y_j` for `j ≤ i`.
    sty: Vec<Vec<f64>>,
    gamma: f64,
    fallback_scale: f64,
    factor: Option<MiddleFactor>,
}

impl LbfgsMemory {
    /// `stored` must contain `owned`.
    pub fn new(capacity: usize, delta: f64, rule: GammaRule, stored: Range<usize>, owned: Range<usize>) -> Self {
        assert!(capacity >= 1);
        assert!(stored.start <= owned.start && owned.end <= stored.end);
        Self {
            capacity,
            delta,
            rule,
            stored,
            owned,
            s: VecDeque::new(),
            y: VecDeque::new(),
            sts: Vec::new(),
            sty: Vec::new(),
            gamma: 1.0,
            fallback_scale: 1.0,
            factor: None,
        }
    }

    /// Memory over all `d` coordinates on a single worker.
    pub fn single(capacity: usize, delta: f64, rule: GammaRule, d: usize) -> Self {
        Self::new(capacity, delta, rule, 0..d, 0..d)
    }

    /// The scale used while no pair is stored (`H = aI`).
    pub fn set_fallback_scale(&mut self, a: f64) {
        self.fallback_scale = a;
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stored_range(&self) -> Range<usize> {
        self.stored.clone()
    }

    pub fn owned_range(&self) -> Range<usize> {
        self.owned.clone()
    }

    fn owned_local(&self) -> Range<usize> {
        self.owned.start - self.stored.start..self.owned.end - self.stored.start
    }

    /// Stored pairs, oldest first, as local slices.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.s.iter().zip(&self.y).map(|(s, y)| (s.as_slice(), y.as_slice()))
    }

    /// The stored `s_iᵀ y_i`.
    pub fn curvatures(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.sty[i][i]).collect()
    }

    /// Offers a new pair; one allreduce of length `2·len() + 2`.
    pub fn try_push_pair(
        &mut self,
        s_new: &[f64],
        y_new: &[f64],
        comm: &mut dyn Communicator,
    ) -> Result<PushOutcome, Error> {
        let n = self.len();
        let own = self.owned_local();
        let dot = |a: &[f64], b: &[f64]| dd::dot(&a[own.clone()], &b[own.clone()]);
        let mut parts = Vec::with_capacity(2 * n + 2);
        parts.extend(self.s.iter().map(|s| dot(s, s_new)));
        parts.extend(self.y.iter().map(|y| dot(y, s_new)));
        parts.push(dot(s_new, s_new));
        parts.push(dot(s_new, y_new));
        let buf = comm.allreduce_dd(&parts)?;
        let (sts_new, sty_new) = (buf[2 * n], buf[2 * n + 1]);
        if sts_new == 0.0 {
            return Ok(PushOutcome::Degenerate);
        }
        if !(sty_new >= self.delta * sts_new) {
            return Ok(PushOutcome::Rejected);
        }

        let mut s_row = buf[..n].to_vec();
        let mut y_row = buf[n..2 * n].to_vec();
        if n == self.capacity {
            self.evict_oldest();
            s_row.remove(0);
            y_row.remove(0);
        }
        for (row, v) in self.sts.iter_mut().zip(&s_row) {
            row.push(*v);
        }
        s_row.push(sts_new);
        self.sts.push(s_row);
        // only s_newᵀ y_j (j older or equal) enters L and D
        y_row.push(sty_new);
        self.sty.push(y_row);
        self.s.push_back(s_new.to_vec());
        self.y.push_back(y_new.to_vec());
        self.gamma = self.rule.gamma(sts_new, sty_new);
        self.refactor()?;
        Ok(PushOutcome::Admitted)
    }

    fn evict_oldest(&mut self) {
        self.s.pop_front();
        self.y.pop_front();
        self.sts.remove(0);
        for row in &mut self.sts {
            row.remove(0);
        }
        self.sty.remove(0);
        for row in &mut self.sty {
            row.remove(0);
        }
    }

    fn refactor(&mut self) -> Result<(), Error> {
        loop {
            self.factor = MiddleFactor::new(self.gamma, &self.sts, &self.sty);
            if self.factor.is_some() {
                return Ok(());
            }
            if self.len() <= 1 {
                return Err(Error::Internal("singular middle matrix with one pair".into()));
            }
            self.evict_oldest();
        }
    }

    /// Current `γ`, or the fallback scale when empty.
    pub fn gamma(&self) -> f64 {
        if self.is_empty() {
            self.fallback_scale
        } else {
            self.gamma
        }
    }

    /// Partial `[Sᵀp; Yᵀp]` over the owned block, `p` over stored coordinates.
    pub fn partial_projection(&self, p: &[f64]) -> Vec<Dd> {
        let own = self.owned_local();
        let dot = |a: &[f64]| dd::dot(&a[own.clone()], &p[own.clone()]);
        self.s
            .iter()
            .map(|s| dot(s))
            .chain(self.y.iter().map(|y| dot(y)))
            .collect()
    }

    /// Reduced `[Sᵀp; Yᵀp]`; no round when the memory is empty.
    pub fn reduced_projection(&self, p: &[f64], comm: &mut dyn Communicator) -> Result<Vec<f64>, CommError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        comm.allreduce_dd(&self.partial_projection(p))
    }

    /// `M⁻¹ [γSᵀp; Yᵀp]` from the reduced projection `[Sᵀp; Yᵀp]`.
    fn middle_solve(&self, projection: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut r = projection.to_vec();
        r[..n].iter_mut().for_each(|v| *v *= self.gamma);
        if let Some(f) = &self.factor {
            f.solve(&mut r);
        }
        r
    }

    /// `H p` on stored coordinates given the reduced projection of `p`.
    pub fn apply_with_projection(&self, p: &[f64], projection: &[f64], out: &mut [f64]) {
        let gamma = self.gamma();
        for (o, v) in out.iter_mut().zip(p) {
            *o = gamma * v;
        }
        if self.is_empty() {
            return;
        }
        let n = self.len();
        let v = self.middle_solve(projection);
        for (i, s) in self.s.iter().enumerate() {
            let c = self.gamma * v[i];
            for (o, sj) in out.iter_mut().zip(s) {
                *o -= c * sj;
            }
        }
        for (i, y) in self.y.iter().enumerate() {
            let c = v[n + i];
            for (o, yj) in out.iter_mut().zip(y) {
                *o -= c * yj;
            }
        }
    }

    /// `pᵀHp = γ‖p‖² − rᵀM⁻¹r` from the reduced `‖p‖²` and projection.
    pub fn quad_form_from_projection(&self, norm_sq: f64, projection: &[f64]) -> f64 {
        let mut q = self.gamma() * norm_sq;
        if !self.is_empty() {
            let n = self.len();
            let v = self.middle_solve(projection);
            let r: f64 = (0..n)
                .map(|i| self.gamma * projection[i] * v[i])
                .chain((0..n).map(|i| projection[n + i] * v[n + i]))
                .sum();
            q -= r;
        }
        q
    }
}

impl HessianHandle for LbfgsMemory {
    /// One allreduce of length `2·len()`; none when the memory is empty.
    fn apply(&self, p: &[f64], comm: &mut dyn Communicator) -> Result<Vec<f64>, CommError> {
        let projection = self.reduced_projection(p, comm)?;
        let mut out = vec![0.0; p.len()];
        self.apply_with_projection(p, &projection, &mut out);
        Ok(out)
    }

    fn gamma(&self) -> f64 {
        LbfgsMemory::gamma(self)
    }
}

/// Scale `a₀ = ‖∇f̃‖²_{∇²f̃} / ‖∇f̃‖²` for the initial `H = a₀I`. Returns
/// `(1, true)` when the gradient vanishes or the ratio is unusable.
pub fn compute_a0(grad_norm_sq: f64, quadform: f64) -> (f64, bool) {
    if grad_norm_sq > 0.0 {
        let a = quadform / grad_norm_sq;
        if a > 0.0 && a.is_finite() {
            return (a, false);
        }
    }
    (1.0, true)
}
