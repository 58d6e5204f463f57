//! Symmetric image-text InfoNCE, cross-view decorrelation and their
//! weighted sum. Every loss returns its value with exact gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_sum_exp;

pub const TERM_VLP: &str = "vlp";
pub const TERM_VR: &str = "vr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_vlp: f64,
    pub lambda_vr: f64,
    /// Weight of the squared off-diagonal correlations.
    pub lambda_offdiag: f64,
    /// Softmax temperature of the contrastive term.
    pub sigma1: f64,
    /// Reject near-constant features in batch normalization instead of
    /// regularizing them.
    pub strict_norm: bool,
    pub norm_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vlp: 1.0,
            lambda_vr: 0.01,
            lambda_offdiag: 5e-3,
            sigma1: 0.07,
            strict_norm: false,
            norm_eps: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_vlp", self.lambda_vlp),
            ("lambda_vr", self.lambda_vr),
            ("lambda_offdiag", self.lambda_offdiag),
            ("norm_eps", self.norm_eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        check_sigma(self.sigma1)
    }
}

fn check_sigma(sigma1: f64) -> Result<()> {
    if !(sigma1 > 0.0) || !sigma1.is_finite() {
        return Err(Error::config(format!("sigma1 must be positive, got {sigma1}")));
    }
    Ok(())
}

/// Loss value, named terms and gradients with respect to each input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub gradients: BTreeMap<String, Array2<f64>>,
}

#[derive(Serialize)]
struct LossSummary<'a> {
    total: f64,
    terms: &'a BTreeMap<String, f64>,
    grad_norms: BTreeMap<&'a str, f64>,
}

impl LossReport {
    pub fn grad(&self, name: &str) -> Option<&Array2<f64>> {
        self.gradients.get(name)
    }

    pub fn grad_norms(&self) -> BTreeMap<&str, f64> {
        self.gradients
            .iter()
            .map(|(k, g)| (k.as_str(), g.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }

    /// `{total, terms, grad_norms}`; full gradients are never serialized.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&LossSummary {
            total: self.total,
            terms: &self.terms,
            grad_norms: self.grad_norms(),
        })
        .expect("finite report serializes")
    }
}

fn check_batch(v: &ArrayView2<f64>, name: &str) -> Result<()> {
    if v.nrows() == 0 || v.ncols() == 0 {
        return Err(Error::dimension(format!("{name} batch is empty ({:?})", v.dim())));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            name: name.into(),
            message: format!("non-finite embedding entry {x}"),
        });
    }
    Ok(())
}

fn check_same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Column-wise normalization to zero mean and unit L2 norm, keeping what
/// the backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub normalized: Array2<f64>,
    centered: Array2<f64>,
    sigma: Array1<f64>,
    scale: Array1<f64>,
}

/// `(V - mean) / (sigma * sqrt(K))` per column with the population standard
/// deviation. A column whose deviation is below `eps` is an error in strict
/// mode and otherwise uses `sigma + eps`.
pub fn batch_normalize(v: ArrayView2<f64>, strict: bool, eps: f64) -> Result<BatchNorm> {
    check_batch(&v, "batch")?;
    let k = v.nrows() as f64;
    let mean = v.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &v - &mean;
    let sigma = centered.map_axis(Axis(0), |c| (c.dot(&c) / k).sqrt());
    let mut scale = Array1::zeros(v.ncols());
    for (j, &s) in sigma.iter().enumerate() {
        let s = if s < eps {
            if strict {
                return Err(Error::Degenerate(format!(
                    "feature {j} is constant across the batch (std {s:e})"
                )));
            }
            s + eps
        } else {
            s
        };
        scale[j] = s * k.sqrt();
    }
    let normalized = &centered / &scale;
    Ok(BatchNorm {
        normalized,
        centered,
        sigma,
        scale,
    })
}

impl BatchNorm {
    /// Map `dL/dṼ` to `dL/dV`.
    pub fn backward(&self, g: &Array2<f64>) -> Array2<f64> {
        let k = self.centered.nrows() as f64;
        let mut out = Array2::zeros(g.raw_dim());
        for j in 0..g.ncols() {
            let c = self.centered.column(j);
            let gj = g.column(j);
            let s = self.scale[j];
            let mut dc = &gj / s;
            if self.sigma[j] > 0.0 {
                let coef = gj.dot(&c) / (s * s) * k.sqrt() / (k * self.sigma[j]);
                dc = dc - &c * coef;
            }
            let m = dc.mean().unwrap_or(0.0);
            out.column_mut(j).assign(&(dc - m));
        }
        out
    }
}

/// Raw dot-product similarities `S[i][j] = vhat_i . that_j`.
pub fn similarity(vhat: ArrayView2<f64>, that: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_same_shape(&vhat, &that, "similarity")?;
    Ok(vhat.dot(&that.t()))
}

struct RowNorm {
    unit: Array2<f64>,
    norms: Array1<f64>,
}

fn l2_rows(x: ArrayView2<f64>, name: &str) -> Result<RowNorm> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("{name} row {i} has zero norm")));
    }
    let unit = &x / &norms.view().insert_axis(Axis(1));
    Ok(RowNorm { unit, norms })
}

impl RowNorm {
    fn backward(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = g.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let u = self.unit.row(i);
            let proj = u.dot(&row);
            row.zip_mut_with(&u, |a, &b| *a -= b * proj);
            row.mapv_inplace(|a| a / self.norms[i]);
        }
        out
    }
}

/// Row-wise `softmax(L) - I`, summed cross-entropy over rows.
fn ce_rows(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut g = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let r = row.to_vec();
        let lse = log_sum_exp(&r);
        loss += lse - r[i];
        for (j, &l) in r.iter().enumerate() {
            g[[i, j]] = (l - lse).exp() - if i == j { 1.0 } else { 0.0 };
        }
    }
    (loss, g)
}

/// Symmetric InfoNCE over L2-normalized rows with matched index `i` as the
/// positive. Gradients are reported as `vhat` and `that`.
pub fn vlp_loss(vhat: ArrayView2<f64>, that: ArrayView2<f64>, sigma1: f64) -> Result<LossReport> {
    check_sigma(sigma1)?;
    check_batch(&vhat, "vhat")?;
    check_batch(&that, "that")?;
    check_same_shape(&vhat, &that, "vlp_loss")?;
    let k = vhat.nrows() as f64;
    let u = l2_rows(vhat, "vhat")?;
    let t = l2_rows(that, "that")?;
    let logits = u.unit.dot(&t.unit.t()) / sigma1;
    let (l_v2t, g_v2t) = ce_rows(&logits);
    let (l_t2v, g_t2v) = ce_rows(&logits.t().to_owned());
    let loss = (l_v2t + l_t2v) / (2.0 * k);
    let g_s = (g_v2t + g_t2v.t()) / (2.0 * k * sigma1);
    let g_u = g_s.dot(&t.unit);
    let g_t = g_s.t().dot(&u.unit);
    Ok(LossReport {
        total: loss,
        terms: BTreeMap::from([(TERM_VLP.into(), loss)]),
        gradients: BTreeMap::from([
            ("vhat".into(), u.backward(&g_u)),
            ("that".into(), t.backward(&g_t)),
        ]),
    })
}

/// Decorrelation between two views. Gradients are reported as `v1` and `v2`.
pub fn vr_loss(v1: ArrayView2<f64>, v2: ArrayView2<f64>, w: &LossWeights) -> Result<LossReport> {
    check_same_shape(&v1, &v2, "vr_loss")?;
    check_batch(&v1, "v1")?;
    check_batch(&v2, "v2")?;
    if v1.nrows() < 2 {
        return Err(Error::Degenerate(
            "decorrelation needs a batch of at least 2 (variance undefined)".into(),
        ));
    }
    let n1 = batch_normalize(v1, w.strict_norm, w.norm_eps)?;
    let n2 = batch_normalize(v2, w.strict_norm, w.norm_eps)?;
    let c = n1.normalized.t().dot(&n2.normalized);
    let d = c.nrows();
    let mut loss = 0.0;
    let mut g = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let cij = c[[i, j]];
            if i == j {
                loss += (1.0 - cij).powi(2);
                g[[i, j]] = -2.0 * (1.0 - cij);
            } else {
                loss += w.lambda_offdiag * cij * cij;
                g[[i, j]] = 2.0 * w.lambda_offdiag * cij;
            }
        }
    }
    loss /= d as f64;
    g /= d as f64;
    let g1 = n2.normalized.dot(&g.t());
    let g2 = n1.normalized.dot(&g);
    Ok(LossReport {
        total: loss,
        terms: BTreeMap::from([(TERM_VR.into(), loss)]),
        gradients: BTreeMap::from([
            ("v1".into(), n1.backward(&g1)),
            ("v2".into(), n2.backward(&g2)),
        ]),
    })
}

/// Image side of the contrastive term.
#[derive(Debug, Clone, Copy)]
pub enum VlpImage<'a> {
    /// Reuse the first augmented view; its gradients add into `v1`.
    View1,
    /// A separate batch, reported as `vhat_vlp`.
    Separate(ArrayView2<'a, f64>),
}

/// `lambda_vlp * VLP + lambda_vr * VR`.
pub fn total_loss<'a>(
    image: VlpImage<'a>,
    that: ArrayView2<'a, f64>,
    v1: ArrayView2<'a, f64>,
    v2: ArrayView2<'a, f64>,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let vhat = match image {
        VlpImage::View1 => v1,
        VlpImage::Separate(v) => v,
    };
    let vlp = vlp_loss(vhat, that, w.sigma1)?;
    let vr = vr_loss(v1, v2, w)?;
    let mut gradients = BTreeMap::new();
    let g_vhat = &vlp.gradients["vhat"] * w.lambda_vlp;
    let mut g_v1 = &vr.gradients["v1"] * w.lambda_vr;
    match image {
        VlpImage::View1 => g_v1 += &g_vhat,
        VlpImage::Separate(_) => {
            gradients.insert("vhat_vlp".to_string(), g_vhat);
        }
    }
    gradients.insert("that".into(), &vlp.gradients["that"] * w.lambda_vlp);
    gradients.insert("v1".into(), g_v1);
    gradients.insert("v2".into(), &vr.gradients["v2"] * w.lambda_vr);
    Ok(LossReport {
        total: w.lambda_vlp * vlp.total + w.lambda_vr * vr.total,
        terms: BTreeMap::from([(TERM_VLP.into(), vlp.total), (TERM_VR.into(), vr.total)]),
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_two_rows() {
        let v = array![[1.0], [-1.0]];
        let n = batch_normalize(v.view(), true, 1e-8).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((n.normalized[[0, 0]] - r).abs() < 1e-15);
        assert!((n.normalized[[1, 0]] + r).abs() < 1e-15);
    }

    #[test]
    fn strict_mode_names_constant_feature() {
        let v = array![[1.0, 3.0], [2.0, 3.0], [0.0, 3.0]];
        let err = batch_normalize(v.view(), true, 1e-8).unwrap_err();
        assert!(err.to_string().contains("feature 1"), "{err}");
        let n = batch_normalize(v.view(), false, 1e-8).unwrap();
        assert!(n.normalized.column(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vr_examples() {
        let w = LossWeights::default();
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let r = vr_loss(v.view(), v.view(), &w).unwrap();
        assert!((r.total - 5e-3).abs() < 1e-15);
        let neg = -&v;
        let r = vr_loss(v.view(), neg.view(), &w).unwrap();
        assert!((r.total - (4.0 + 5e-3)).abs() < 1e-12);
        assert!(matches!(
            vr_loss(array![[1.0, 2.0]].view(), array![[1.0, 2.0]].view(), &w),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn vlp_examples() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let r = vlp_loss(eye.view(), eye.view(), 1.0).unwrap();
        assert!((r.total - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        let one = array![[0.3, -2.0]];
        assert_eq!(vlp_loss(one.view(), one.view(), 0.07).unwrap().total, 0.0);
        assert!(matches!(vlp_loss(eye.view(), eye.view(), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn report_json_has_norms_only() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let r = total_loss(VlpImage::View1, eye.view(), eye.view(), eye.view(), &LossWeights::default())
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(v["grad_norms"]["v1"].is_number());
        assert!(v["terms"]["vr"].is_number());
        assert_eq!(v.as_object().unwrap().len(), 3);
    }
}
