//! Alpha-divergences and the two-sided distillation loss used to fine-tune a
//! weight-shared supernet against its unsliced teacher.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// Floor applied to probabilities before any ratio is taken.
pub const PROB_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that `values` is a distribution and floors every entry at
    /// [`PROB_FLOOR`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(shape_err!("empty probability vector"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Numeric(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values.into_iter().map(|v| v.max(PROB_FLOOR)).collect()))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logit".into()));
        }
        let mut v = logits.to_vec();
        softmax_in_place(&mut v);
        Self::new(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceParams {
    pub alpha_plus: f64,
    pub alpha_minus: f64,
}

impl Default for DivergenceParams {
    fn default() -> Self {
        Self {
            alpha_plus: 2.0,
            alpha_minus: -1.0,
        }
    }
}

impl DivergenceParams {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_plus", self.alpha_plus), ("alpha_minus", self.alpha_minus)] {
            check_alpha(a).map_err(|_| Error::Domain(format!("{name} = {a} is a pole of the alpha-divergence")))?;
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha == 0.0 || alpha == 1.0 || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "alpha = {alpha} is not allowed (use kl for the alpha -> 1 limit)"
        )));
    }
    Ok(())
}

fn same_len(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(shape_err!("distributions have {} and {} entries", p.len(), q.len()));
    }
    Ok(())
}

/// `1/(a(a-1)) * sum_i q_i ((p_i/q_i)^a - 1)`.
pub fn d_alpha(p: &ProbVector, q: &ProbVector, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    same_len(p, q)?;
    let sum: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(pi, qi)| qi * ((pi / qi).powf(alpha) - 1.0))
        .sum();
    Ok(sum / (alpha * (alpha - 1.0)))
}

/// `sum_i p_i ln(p_i / q_i)`.
pub fn kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p, q)?;
    Ok(p.values()
        .iter()
        .zip(q.values())
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}

/// `max(D_{alpha+}(p||q), D_{alpha-}(p||q))`.
pub fn d_alpha_clamped(p: &ProbVector, q: &ProbVector, params: &DivergenceParams) -> Result<f64> {
    params.validate()?;
    Ok(d_alpha(p, q, params.alpha_plus)?.max(d_alpha(p, q, params.alpha_minus)?))
}

fn batch_rows<'a>(teacher: &'a Tensor, student: &'a Tensor) -> Result<(usize, usize)> {
    if teacher.dims() != student.dims() {
        return Err(shape_err!(
            "teacher logits {:?} and student logits {:?} differ",
            teacher.dims(),
            student.dims()
        ));
    }
    match teacher.dims() {
        [b, m] => Ok((*b, *m)),
        d => Err(shape_err!("logits must be [batch, classes], got {:?}", d)),
    }
}

/// Batch mean of [`d_alpha_clamped`] between softmaxed teacher (`p`) and
/// student (`q`) logits, both `[batch, classes]`.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, params: &DivergenceParams) -> Result<f64> {
    params.validate()?;
    let (b, m) = batch_rows(teacher_logits, student_logits)?;
    let mut total = 0.0;
    for (t, s) in teacher_logits.data().chunks(m).zip(student_logits.data().chunks(m)) {
        total += d_alpha_clamped(&ProbVector::from_logits(t)?, &ProbVector::from_logits(s)?, params)?;
    }
    Ok(total / b as f64)
}

/// Analytic gradient of [`kd_loss`] with respect to the student logits.
///
/// Per sample, the active branch `a` is whichever of `alpha_plus` and
/// `alpha_minus` attains the max; `dD/dq_i = -(p_i/q_i)^a / a`, chained
/// through the softmax Jacobian `dq_i/dz_j = q_i (delta_ij - q_j)`.
pub fn kd_loss_grad(teacher_logits: &Tensor, student_logits: &Tensor, params: &DivergenceParams) -> Result<Tensor> {
    params.validate()?;
    let (b, m) = batch_rows(teacher_logits, student_logits)?;
    let mut grad = Vec::with_capacity(b * m);
    let mut g = vec![0.0; m];
    for (t, s) in teacher_logits.data().chunks(m).zip(student_logits.data().chunks(m)) {
        let p = ProbVector::from_logits(t)?;
        let q = ProbVector::from_logits(s)?;
        let plus = d_alpha(&p, &q, params.alpha_plus)?;
        let minus = d_alpha(&p, &q, params.alpha_minus)?;
        let a = if plus >= minus {
            params.alpha_plus
        } else {
            params.alpha_minus
        };
        for (gi, (pi, qi)) in g.iter_mut().zip(p.values().iter().zip(q.values())) {
            *gi = -(pi / qi).powf(a) / a;
        }
        let mean: f64 = g.iter().zip(q.values()).map(|(gi, qi)| gi * qi).sum();
        for (gi, qi) in g.iter().zip(q.values()) {
            grad.push(qi * (gi - mean) / b as f64);
        }
    }
    Tensor::new(vec![b, m], grad)
}
