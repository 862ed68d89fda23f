//! Ranking and auxiliary losses with their analytic gradients.
//!
//! Every loss comes in two flavours: a value-only function and a
//! `*_with_grad` variant returning the gradient with respect to each input
//! matrix. The trainer splices the latter into the autodiff tape as custom
//! nodes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{Error, Result};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp together with the softmax weights.
fn logsumexp(xs: &[f64]) -> (f64, Vec<f64>) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    (max + sum.ln(), weights.into_iter().map(|w| w / sum).collect())
}

fn check_batch(op: &'static str, mats: &[ArrayView2<'_, f64>]) -> Result<()> {
    let dim = mats[0].dim();
    if mats.iter().any(|m| m.dim() != dim) {
        let dims: Vec<_> = mats.iter().map(|m| m.dim()).collect();
        return Err(Error::shape(op, format!("{dims:?}")));
    }
    Ok(())
}

fn row_dots(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array1<f64> {
    (&a * &b).sum_axis(Axis(1))
}

/// `sum_b softplus(-(u.p - u.n))`, i.e. `-sum log sigmoid(score_pos - score_neg)`.
pub fn bpr_loss(u: ArrayView2<'_, f64>, pos: ArrayView2<'_, f64>, neg: ArrayView2<'_, f64>) -> Result<f64> {
    check_batch("bpr_loss", &[u, pos, neg])?;
    let diff = row_dots(u, pos) - row_dots(u, neg);
    Ok(diff.iter().map(|&x| softplus(-x)).sum())
}

/// BPR loss with gradients `(d/du, d/dpos, d/dneg)`.
pub fn bpr_loss_with_grad(
    u: ArrayView2<'_, f64>,
    pos: ArrayView2<'_, f64>,
    neg: ArrayView2<'_, f64>,
) -> Result<(f64, [Array2<f64>; 3])> {
    check_batch("bpr_loss", &[u, pos, neg])?;
    let diff = row_dots(u, pos) - row_dots(u, neg);
    let loss = diff.iter().map(|&x| softplus(-x)).sum();
    // d softplus(-x)/dx = -sigmoid(-x)
    let coef = diff.mapv(|x| -sigmoid(-x)).insert_axis(Axis(1));
    let du = (&pos - &neg) * &coef;
    let dp = &u * &coef;
    let dn = &u * &coef.mapv(|c| -c);
    Ok((loss, [du, dp, dn]))
}

/// `lambda * (||U||^2 + ||Ip||^2 + ||In||^2)`.
pub fn emb_reg(u: ArrayView2<'_, f64>, pos: ArrayView2<'_, f64>, neg: ArrayView2<'_, f64>, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!(
            "regularisation weight must be >= 0, got {lambda}"
        )));
    }
    let sq = |m: ArrayView2<'_, f64>| m.iter().map(|x| x * x).sum::<f64>();
    Ok(lambda * (sq(u) + sq(pos) + sq(neg)))
}

pub fn emb_reg_with_grad(
    u: ArrayView2<'_, f64>,
    pos: ArrayView2<'_, f64>,
    neg: ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<(f64, [Array2<f64>; 3])> {
    let loss = emb_reg(u, pos, neg, lambda)?;
    Ok((
        loss,
        [&u * (2.0 * lambda), &pos * (2.0 * lambda), &neg * (2.0 * lambda)],
    ))
}

/// Circle-loss hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircleParams {
    /// Margin `M`; the positive optimum is `1 - M`, the negative one `M`.
    pub margin: f64,
    /// Logit scale `Gamma`.
    pub scale: f64,
    /// Weight of the circle terms in the total loss.
    pub coef: f64,
    /// Confidence of the textual embeddings used as negatives.
    pub conf_textual: f64,
    /// Confidence of the visual embeddings used as negatives.
    pub conf_visual: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams {
            margin: 0.75,
            scale: 1000.0,
            coef: 0.1,
            conf_textual: 0.7,
            conf_visual: 0.3,
        }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.margin)
            || self.scale <= 0.0
            || !unit(self.conf_textual)
            || !unit(self.conf_visual)
            || self.coef < 0.0
        {
            return Err(Error::Config(format!("invalid circle-loss parameters {self:?}")));
        }
        Ok(())
    }

    pub fn confidence(&self, m: Modality) -> f64 {
        match m {
            Modality::Textual => self.conf_textual,
            Modality::Visual => self.conf_visual,
        }
    }
}

/// Cosine similarity per row and its gradients with respect to both rows.
fn cosine_rows(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    what: &'static str,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let n = a.nrows();
    let mut cos = Array1::zeros(n);
    let mut da = Array2::zeros(a.dim());
    let mut db = Array2::zeros(b.dim());
    for r in 0..n {
        let (x, y) = (a.row(r), b.row(r));
        let (nx, ny) = (x.dot(&x).sqrt(), y.dot(&y).sqrt());
        if nx == 0.0 || ny == 0.0 {
            return Err(Error::ZeroNorm(what));
        }
        let c = x.dot(&y) / (nx * ny);
        cos[r] = c;
        Zip::from(da.row_mut(r)).and(&x).and(&y).for_each(|d, &xi, &yi| {
            *d = yi / (nx * ny) - c * xi / (nx * nx);
        });
        Zip::from(db.row_mut(r)).and(&x).and(&y).for_each(|d, &xi, &yi| {
            *d = xi / (nx * ny) - c * yi / (ny * ny);
        });
    }
    Ok((cos, da, db))
}

/// Per-sample quantities of the circle loss for given similarities.
struct CircleTerms {
    logits_pos: Vec<f64>,
    logits_neg: Vec<f64>,
    dpos_dsim: Vec<f64>,
    dneg_dsim: Vec<f64>,
}

fn circle_terms(s_pos: &[f64], s_neg: &[f64], p: &CircleParams, confidence: f64) -> CircleTerms {
    let m = p.margin;
    let (delta_p, delta_n) = (1.0 - m, m);
    let keep = 1.0 - confidence;
    let mut t = CircleTerms {
        logits_pos: Vec::with_capacity(s_pos.len()),
        logits_neg: Vec::with_capacity(s_pos.len()),
        dpos_dsim: Vec::with_capacity(s_pos.len()),
        dneg_dsim: Vec::with_capacity(s_pos.len()),
    };
    for (&sp, &sn) in s_pos.iter().zip(s_neg) {
        let ap_raw = -sp + 1.0 + m;
        let ap = ap_raw.max(0.0);
        let dap = if ap_raw > 0.0 { -1.0 } else { 0.0 };
        t.logits_pos.push(-ap * (sp - delta_p) * p.scale);
        t.dpos_dsim.push(-(dap * (sp - delta_p) + ap) * p.scale);

        let an_raw = sn + m;
        let an = an_raw.max(0.0) * keep;
        let dan = if an_raw > 0.0 { keep } else { 0.0 };
        t.logits_neg.push(an * (sn - delta_n) * p.scale);
        t.dneg_dsim.push((dan * (sn - delta_n) + an) * p.scale);
    }
    t
}

/// Circle loss from precomputed similarities; exposed for direct checks.
pub fn circle_loss_from_similarities(s_pos: &[f64], s_neg: &[f64], p: &CircleParams, confidence: f64) -> f64 {
    let t = circle_terms(s_pos, s_neg, p, confidence);
    let (lse_p, _) = logsumexp(&t.logits_pos);
    let (lse_n, _) = logsumexp(&t.logits_neg);
    softplus(lse_p + lse_n)
}

/// Circle loss that pulls each user towards the fused embedding of its
/// positive item and away from that item's single-modality embedding.
pub fn circle_loss(
    user: ArrayView2<'_, f64>,
    fused_pos: ArrayView2<'_, f64>,
    modal_pos: ArrayView2<'_, f64>,
    p: &CircleParams,
    modality: Modality,
) -> Result<f64> {
    circle_loss_with_grad(user, fused_pos, modal_pos, p, modality).map(|(l, _)| l)
}

/// Circle loss with gradients `(d/duser, d/dfused_pos, d/dmodal_pos)`.
pub fn circle_loss_with_grad(
    user: ArrayView2<'_, f64>,
    fused_pos: ArrayView2<'_, f64>,
    modal_pos: ArrayView2<'_, f64>,
    p: &CircleParams,
    modality: Modality,
) -> Result<(f64, [Array2<f64>; 3])> {
    check_batch("circle_loss", &[user, fused_pos, modal_pos])?;
    if user.nrows() == 0 {
        return Err(Error::invalid("circle loss needs a non-empty batch"));
    }
    let (s_pos, du_pos, dfused) = cosine_rows(user, fused_pos, "circle-loss positive pair")?;
    let (s_neg, du_neg, dmodal) = cosine_rows(user, modal_pos, "circle-loss negative pair")?;
    let t = circle_terms(
        s_pos.as_slice().unwrap(),
        s_neg.as_slice().unwrap(),
        p,
        p.confidence(modality),
    );
    let (lse_p, w_p) = logsumexp(&t.logits_pos);
    let (lse_n, w_n) = logsumexp(&t.logits_neg);
    let z = lse_p + lse_n;
    let loss = softplus(z);
    let dz = sigmoid(z);

    let coef_pos = Array1::from_iter((0..w_p.len()).map(|b| dz * w_p[b] * t.dpos_dsim[b])).insert_axis(Axis(1));
    let coef_neg = Array1::from_iter((0..w_n.len()).map(|b| dz * w_n[b] * t.dneg_dsim[b])).insert_axis(Axis(1));
    let du = &du_pos * &coef_pos + &du_neg * &coef_neg;
    Ok((loss, [du, dfused * &coef_pos, dmodal * &coef_neg]))
}

/// Individual components of the total objective for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bpr: f64,
    pub reg: f64,
    pub circle_textual: f64,
    pub circle_visual: f64,
    pub total: f64,
}

/// `bpr + reg + coef * (circle_textual + circle_visual)`; circle terms are
/// dropped entirely when `use_circle` is false.
pub fn total_loss(
    bpr: f64,
    reg: f64,
    circle_textual: f64,
    circle_visual: f64,
    coef: f64,
    use_circle: bool,
) -> Result<LossComponents> {
    for (name, v) in [
        ("bpr", bpr),
        ("reg", reg),
        ("circle_textual", circle_textual),
        ("circle_visual", circle_visual),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
    }
    let (ct, cv) = if use_circle {
        (circle_textual, circle_visual)
    } else {
        (0.0, 0.0)
    };
    Ok(LossComponents {
        bpr,
        reg,
        circle_textual: ct,
        circle_visual: cv,
        total: bpr + reg + coef * (ct + cv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    #[allow(clippy::approx_constant)]
    fn bpr_equal_scores_is_ln2() {
        let u = array![[1.0, 0.0], [0.5, 0.5]];
        let l = bpr_loss(u.view(), u.view(), u.view()).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l / 2.0 - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bpr_unit_gap() {
        let u = array![[1.0]];
        let l = bpr_loss(u.view(), array![[1.0]].view(), array![[0.0]].view()).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn bpr_decreases_to_zero() {
        let u = array![[1.0]];
        let mut prev = f64::INFINITY;
        for gap in [0.0, 1.0, 5.0, 20.0, 100.0, 800.0] {
            let l = bpr_loss(u.view(), array![[gap]].view(), array![[0.0]].view()).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn reg_examples() {
        let z = Array2::<f64>::zeros((2, 3));
        assert_eq!(emb_reg(z.view(), z.view(), z.view(), 1.0).unwrap(), 0.0);
        let (u, p, n) = (array![[1.0, 1.0]], array![[1.0, 0.0]], array![[0.0, 0.0]]);
        assert_eq!(emb_reg(u.view(), p.view(), n.view(), 0.5).unwrap(), 1.5);
        assert_eq!(emb_reg(u.view(), p.view(), n.view(), 1.0).unwrap(), 3.0);
        assert!(emb_reg(u.view(), p.view(), n.view(), -1.0).is_err());
    }

    #[test]
    fn circle_hand_cases() {
        let p = CircleParams::default();
        // S_pos = 1, S_neg = 0, C_neg = 0.7: logits -562.5 and -168.75.
        let l = circle_loss_from_similarities(&[1.0], &[0.0], &p, 0.7);
        assert!((0.0..1e-300).contains(&l));
        // S_pos = 0, S_neg = 1, C_neg = 0: logits 437.5 and 437.5.
        let l = circle_loss_from_similarities(&[0.0], &[1.0], &p, 0.0);
        assert!((l - 875.0).abs() <= 1e-6 * 875.0);
    }

    #[test]
    fn circle_full_confidence_ignores_negative() {
        let p = CircleParams::default();
        let a = circle_loss_from_similarities(&[0.3], &[0.9], &p, 1.0);
        let b = circle_loss_from_similarities(&[0.3], &[-0.6], &p, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn total_loss_arithmetic() {
        let c = total_loss(1.0, 0.5, 2.0, 3.0, 0.1, true).unwrap();
        assert!((c.total - 2.0).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 0.5, 2.0, 3.0, 0.0, true).unwrap().total, 1.5);
        assert_eq!(total_loss(1.0, 0.5, 2.0, 3.0, 0.1, false).unwrap().total, 1.5);
        match total_loss(1.0, f64::NAN, 0.0, 0.0, 0.1, true).unwrap_err() {
            Error::NonFinite(m) => assert!(m.contains("reg")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn circle_rejects_zero_rows() {
        let p = CircleParams::default();
        let z = array![[0.0, 0.0]];
        let o = array![[1.0, 0.0]];
        assert!(circle_loss(z.view(), o.view(), o.view(), &p, Modality::Textual).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(CircleParams::default().validate().is_ok());
        let bad = CircleParams {
            margin: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
