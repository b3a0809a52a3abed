//! Training objectives with analytic gradients with respect to embeddings.
//!
//! Every loss returns a [`LossValue`] whose `grads` follow the order of the
//! differentiable inputs documented on each function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    assert_unit_rows, log_softmax, normalize_rows, normalize_rows_backward, Mat,
};

/// Floor inside the hard-negative log.
pub const HN_EPS: f64 = 1e-6;
/// Floor inside the KoLeo log.
pub const KOLEO_EPS: f64 = 1e-8;
/// Nearest-neighbor distances below this are treated as coincident points.
pub const KOLEO_DUPLICATE_DIST: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Temperatures {
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub tau_contrastive: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_teacher: 0.04,
            tau_student: 0.07,
            tau_contrastive: 0.2,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for t in [self.tau_teacher, self.tau_student, self.tau_contrastive] {
            if !(t > 0.0) {
                return Err(Error::NonPositiveTemperature(t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rel: f64,
    pub lambda_con: f64,
    pub lambda_hn: f64,
}

impl Default for LossWeights {
    /// `λ_con = 1, λ_rel = 10, λ_hn = 5`.
    fn default() -> Self {
        Self {
            lambda_rel: 10.0,
            lambda_con: 1.0,
            lambda_hn: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_rel, self.lambda_con, self.lambda_hn];
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HnMode {
    /// Penalize `−log(1 − max_neg S + ε)` per row.
    #[default]
    Hardest,
    /// `−(1/N) log Σ_i max_neg (1 − S)`, the formula exactly as printed.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Mat>,
    /// Loss was not evaluated (e.g. queue still warming up); value and grads are zero.
    pub skipped: bool,
    /// A log argument hit its floor (coincident KoLeo points).
    pub clamped: bool,
}

impl LossValue {
    fn new(value: f64, grads: Vec<Mat>) -> Self {
        Self {
            value,
            grads,
            skipped: false,
            clamped: false,
        }
    }

    /// Zero loss with zero gradients of the given shapes.
    pub fn skipped(shapes: &[(usize, usize)]) -> Self {
        Self {
            value: 0.0,
            grads: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            skipped: true,
            clamped: false,
        }
    }

    fn check_finite(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() || self.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(self)
    }
}

fn check_cols(m: &Mat, cols: usize) -> Result<()> {
    if m.cols() != cols {
        return Err(Error::DimMismatch {
            expected: cols,
            got: m.cols(),
        });
    }
    Ok(())
}

fn check_same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Cosine similarity of each (internally normalized) row of `h` to every unit row of `queue`.
pub fn similarity_to_queue(h: &Mat, queue: &Mat) -> Result<Mat> {
    check_cols(queue, h.cols())?;
    assert_unit_rows(queue)?;
    let (u, _) = normalize_rows(h)?;
    u.matmul_t(queue)
}

/// Relational distillation: mean over rows of `KL(p_T || p_S)`, where both
/// distributions are temperature softmaxes of cosine similarity to the teacher
/// queue (`τ_T` for teacher rows, `τ_S` for student rows).
///
/// Gradient: `[d/d h_s]`. The teacher is frozen.
pub fn rsd_loss(h_t: &Mat, h_s: &Mat, queue: &Mat, temps: &Temperatures) -> Result<LossValue> {
    temps.validate()?;
    check_same_shape(h_t, h_s)?;
    if queue.rows() < 2 {
        return Err(Error::QueueTooSmall(queue.rows()));
    }
    let sim_t = similarity_to_queue(h_t, queue)?;
    let (u_s, norms_s) = normalize_rows(h_s)?;
    let sim_s = u_s.matmul_t(queue)?;

    let n = h_s.rows();
    let k = queue.rows();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut g_sim = Mat::zeros(n, k);
    for i in 0..n {
        let lp_t = log_softmax(sim_t.row(i), temps.tau_teacher)?;
        let lp_s = log_softmax(sim_s.row(i), temps.tau_student)?;
        let mut kl = 0.0;
        let g = g_sim.row_mut(i);
        for j in 0..k {
            let p_t = lp_t[j].exp();
            let p_s = lp_s[j].exp();
            if p_t > 0.0 {
                kl += p_t * (lp_t[j] - lp_s[j]);
            }
            g[j] = (p_s - p_t) * inv_n / temps.tau_student;
        }
        value += kl;
    }
    value *= inv_n;
    let g_unit = g_sim.matmul(queue)?;
    let grad = normalize_rows_backward(&u_s, &norms_s, &g_unit);
    LossValue::new(value, vec![grad]).check_finite("rsd loss")
}

/// InfoNCE with row-aligned positives `(z_q_i, z_k_i)` and queue negatives.
///
/// With `exclude_positive` the denominator holds only the negatives.
/// Gradients: `[d/d z_q, d/d z_k]`; the queue receives none.
pub fn infonce_loss(
    z_q: &Mat,
    z_k: &Mat,
    queue: &Mat,
    tau: f64,
    exclude_positive: bool,
) -> Result<LossValue> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    check_same_shape(z_q, z_k)?;
    if queue.rows() == 0 {
        return Err(Error::EmptyQueue);
    }
    check_cols(queue, z_q.cols())?;
    assert_unit_rows(queue)?;
    let (u_q, n_q) = normalize_rows(z_q)?;
    let (u_k, n_k) = normalize_rows(z_k)?;
    let neg = u_q.matmul_t(queue)?;

    let n = z_q.rows();
    let scale = 1.0 / (n as f64 * tau);
    let mut value = 0.0;
    let mut g_pos = vec![0.0; n];
    let mut g_neg = Mat::zeros(n, queue.rows());
    for i in 0..n {
        let pos = crate::numerics::dot(u_q.row(i), u_k.row(i));
        let row = neg.row(i);
        if exclude_positive {
            let lp = log_softmax(row, tau)?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // stable log Σ_j exp(s⁻_j/τ)
            let lse = max / tau + row.iter().map(|s| ((s - max) / tau).exp()).sum::<f64>().ln();
            value += lse - pos / tau;
            g_pos[i] = -scale;
            for (g, l) in g_neg.row_mut(i).iter_mut().zip(&lp) {
                *g = l.exp() * scale;
            }
        } else {
            let mut logits = Vec::with_capacity(row.len() + 1);
            logits.push(pos);
            logits.extend_from_slice(row);
            let lp = log_softmax(&logits, tau)?;
            value += -lp[0];
            g_pos[i] = (lp[0].exp() - 1.0) * scale;
            for (g, l) in g_neg.row_mut(i).iter_mut().zip(&lp[1..]) {
                *g = l.exp() * scale;
            }
        }
    }
    value /= n as f64;

    let mut g_uq = g_neg.matmul(queue)?;
    let mut g_uk = Mat::zeros(n, z_k.cols());
    for i in 0..n {
        for ((gq, gk), (q, k)) in g_uq
            .row_mut(i)
            .iter_mut()
            .zip(g_uk.row_mut(i).iter_mut())
            .zip(u_q.row(i).iter().zip(u_k.row(i)))
        {
            *gq += g_pos[i] * k;
            *gk = g_pos[i] * q;
        }
    }
    let grads = vec![
        normalize_rows_backward(&u_q, &n_q, &g_uq),
        normalize_rows_backward(&u_k, &n_k, &g_uk),
    ];
    LossValue::new(value, grads).check_finite("infonce loss")
}

/// Per-row selection of a negative entry: the maximum similarity for
/// [`HnMode::Hardest`], the minimum (largest `1 − S`) for [`HnMode::Literal`].
/// Ties go to the lowest column.
fn select_negatives(s: &Mat, neg_mask: &[bool], mode: HnMode) -> Result<Vec<usize>> {
    (0..s.rows())
        .map(|i| {
            let mut best: Option<usize> = None;
            for j in 0..s.cols() {
                if !neg_mask[i * s.cols() + j] {
                    continue;
                }
                let better = match (best, mode) {
                    (None, _) => true,
                    (Some(b), HnMode::Hardest) => s.get(i, j) > s.get(i, b),
                    (Some(b), HnMode::Literal) => s.get(i, j) < s.get(i, b),
                };
                if better {
                    best = Some(j);
                }
            }
            best.ok_or(Error::RowWithoutNegatives(i))
        })
        .collect()
}

/// Hard-negative loss on a similarity matrix. `neg_mask` is row-major with the
/// same shape as `s`; `true` marks a negative pair.
///
/// Gradient: `[d/d S]`, non-zero only at each row's selected entry.
pub fn hn_loss(s: &Mat, neg_mask: &[bool], mode: HnMode) -> Result<LossValue> {
    if neg_mask.len() != s.rows() * s.cols() {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} entries for {:?} matrix",
            neg_mask.len(),
            s.shape()
        )));
    }
    let n = s.rows() as f64;
    let sel = select_negatives(s, neg_mask, mode)?;
    let mut grad = Mat::zeros(s.rows(), s.cols());
    let value = match mode {
        HnMode::Hardest => {
            let mut total = 0.0;
            for (i, &j) in sel.iter().enumerate() {
                let arg = 1.0 - s.get(i, j) + HN_EPS;
                if !(arg > 0.0) {
                    return Err(Error::NonFinite(format!("hn log argument {arg} in row {i}")));
                }
                total -= arg.ln();
                grad.set(i, j, 1.0 / (n * arg));
            }
            total / n
        }
        HnMode::Literal => {
            let sum: f64 = sel.iter().enumerate().map(|(i, &j)| 1.0 - s.get(i, j)).sum();
            if !(sum > 0.0) {
                return Err(Error::NonFinite(format!("hn log argument {sum}")));
            }
            for (i, &j) in sel.iter().enumerate() {
                grad.set(i, j, 1.0 / (n * sum));
            }
            -sum.ln() / n
        }
    };
    LossValue::new(value, vec![grad]).check_finite("hn loss")
}

/// Hard-negative loss on the cross-view similarity `S_ij = cos(z_a_i, z_b_j)`
/// with every off-diagonal pair a negative.
///
/// Gradients: `[d/d z_a, d/d z_b]`.
pub fn hn_loss_cross_view(z_a: &Mat, z_b: &Mat, mode: HnMode) -> Result<LossValue> {
    check_same_shape(z_a, z_b)?;
    let (u_a, n_a) = normalize_rows(z_a)?;
    let (u_b, n_b) = normalize_rows(z_b)?;
    let s = u_a.matmul_t(&u_b)?;
    let n = s.rows();
    let mask: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let inner = hn_loss(&s, &mask, mode)?;
    let g_s = &inner.grads[0];
    let g_ua = g_s.matmul(&u_b)?;
    let g_ub = g_s.t_matmul(&u_a)?;
    Ok(LossValue::new(
        inner.value,
        vec![
            normalize_rows_backward(&u_a, &n_a, &g_ua),
            normalize_rows_backward(&u_b, &n_b, &g_ub),
        ],
    ))
}

/// Feature distillation: `(1/(N·D)) Σ ||h_s − h_t||²`.
///
/// Gradient: `[d/d h_s]`.
pub fn fkd_loss(h_s: &Mat, h_t: &Mat) -> Result<LossValue> {
    check_same_shape(h_s, h_t)?;
    let denom = (h_s.rows() * h_s.cols()).max(1) as f64;
    let mut grad = Mat::zeros(h_s.rows(), h_s.cols());
    let mut value = 0.0;
    for ((g, a), b) in grad.data_mut().iter_mut().zip(h_s.data()).zip(h_t.data()) {
        let d = a - b;
        value += d * d;
        *g = 2.0 * d / denom;
    }
    LossValue::new(value / denom, vec![grad]).check_finite("fkd loss")
}

/// KoLeo entropy estimate on normalized rows:
/// `−(1/N) Σ_i log(min_{j≠i} ||u_i − u_j|| + ε)`.
///
/// Gradient: `[d/d Z]`. Coincident neighbors contribute no gradient and set `clamped`.
pub fn koleo_loss(z: &Mat) -> Result<LossValue> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::DegenerateSet(n));
    }
    let (u, norms) = normalize_rows(z)?;
    let gram = u.matmul_t(&u)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut clamped = false;
    let mut g_u = Mat::zeros(n, z.cols());
    for i in 0..n {
        let mut nn = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i && gram.get(i, j) > best {
                best = gram.get(i, j);
                nn = j;
            }
        }
        let dist = u
            .row(i)
            .iter()
            .zip(u.row(nn))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        value -= (dist + KOLEO_EPS).ln();
        if dist < KOLEO_DUPLICATE_DIST {
            clamped = true;
            continue;
        }
        let c = -inv_n / ((dist + KOLEO_EPS) * dist);
        for k in 0..z.cols() {
            let d = u.get(i, k) - u.get(nn, k);
            g_u.row_mut(i)[k] += c * d;
            g_u.row_mut(nn)[k] -= c * d;
        }
    }
    let mut out = LossValue::new(value * inv_n, vec![normalize_rows_backward(&u, &norms, &g_u)]);
    out.clamped = clamped;
    out.check_finite("koleo loss")
}

/// Per-component losses feeding [`rdcd_loss`].
///
/// * `rel`: grads `[d/d matched]` (RSD, or FKD in its place)
/// * `con`: grads `[d/d query, d/d key]` (the key gradient is discarded)
/// * `hn`: grads `[d/d query, d/d view2]`
#[derive(Debug, Clone)]
pub struct RdcdComponents {
    pub rel: LossValue,
    pub con: LossValue,
    pub hn: LossValue,
}

/// Weighted sum `λ_rel·rel + λ_con·con + λ_hn·hn`.
///
/// Gradients: `[d/d matched, d/d query, d/d view2]`.
pub fn rdcd_loss(c: &RdcdComponents, w: &LossWeights) -> Result<LossValue> {
    let need = |lv: &LossValue, n: usize, name: &str| -> Result<()> {
        if lv.grads.len() < n {
            return Err(Error::ShapeMismatch(format!("{name} loss needs {n} gradients")));
        }
        Ok(())
    };
    need(&c.rel, 1, "rel")?;
    need(&c.con, 1, "con")?;
    need(&c.hn, 2, "hn")?;
    check_same_shape(&c.con.grads[0], &c.hn.grads[0])?;
    check_same_shape(&c.hn.grads[0], &c.hn.grads[1])?;

    let value = w.lambda_rel * c.rel.value + w.lambda_con * c.con.value + w.lambda_hn * c.hn.value;
    let matched = c.rel.grads[0].scaled(w.lambda_rel);
    let mut query = c.con.grads[0].scaled(w.lambda_con);
    query.add_scaled(&c.hn.grads[0], w.lambda_hn)?;
    let view2 = c.hn.grads[1].scaled(w.lambda_hn);
    Ok(LossValue {
        value,
        grads: vec![matched, query, view2],
        skipped: c.rel.skipped && c.con.skipped && c.hn.skipped,
        clamped: c.rel.clamped || c.con.clamped || c.hn.clamped,
    })
}
