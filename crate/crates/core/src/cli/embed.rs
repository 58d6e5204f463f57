use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::trainer::{eval_patch, Checkpoint, CheckpointKind, PretrainModel, TrainConfig};
use crate::volumes::{Modality, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub volume_id: String,
    pub modality: Modality,
    pub embedding: Vec<f64>,
}

/// Projected image embeddings of every volume under a pretraining checkpoint.
pub fn embed_volumes(ckpt: &Checkpoint, volumes: &[Volume]) -> Result<Vec<EmbeddingRow>> {
    if ckpt.kind != CheckpointKind::Pretrain {
        return Err(Error::config(format!(
            "embedding needs a pretraining checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::config(format!("checkpoint config: {e}")))?;
    let model = PretrainModel::from_checkpoint(&cfg, ckpt)?;
    volumes
        .iter()
        .map(|v| {
            if !cfg.patch_dims.fits_within(&v.dims) {
                return Err(Error::dimension(format!(
                    "volume `{}` dims {} are smaller than the checkpoint patch dims {}",
                    v.id, v.dims, cfg.patch_dims
                )));
            }
            Ok(EmbeddingRow {
                volume_id: v.id.clone(),
                modality: v.modality,
                embedding: model.embed_image(&eval_patch(v, cfg.patch_dims)?)?,
            })
        })
        .collect()
}

/// Top-two principal components of the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each component, largest first.
    pub variances: [f64; 2],
    pub components: [Vec<f64>; 2],
}

pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Degenerate("projection needs at least one non-empty row".into()));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dimension("embedding rows have unequal widths"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pick = |k: usize| -> (f64, Vec<f64>) {
        match order.get(k) {
            Some(&c) => (
                eig.eigenvalues[c].max(0.0),
                eig.eigenvectors.column(c).iter().copied().collect(),
            ),
            None => (0.0, vec![0.0; d]),
        }
    };
    let (v1, c1) = pick(0);
    let (v2, c2) = pick(1);
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&c1), dot(&c2)]
        })
        .collect();
    Ok(Projection {
        points,
        variances: [v1, v2],
        components: [c1, c2],
    })
}

fn color(m: Modality) -> &'static str {
    match m {
        Modality::CtLike => "#d62728",
        Modality::MriLike => "#1f77b4",
        Modality::EmLike => "#2ca02c",
    }
}

/// Static scatter plot colored by modality, with a legend.
pub fn projection_svg(points: &[[f64; 2]], modalities: &[Modality], variances: [f64; 2]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 400.0;
    const PAD: f64 = 40.0;
    let range = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi - lo)
        } else {
            (lo - 0.5, 1.0)
        }
    };
    let (x0, xs) = range(0);
    let (y0, ys) = range(1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">PC1 (var {:.3e})</text>"#,
        W / 2.0,
        H - 8.0,
        variances[0]
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">PC2 (var {:.3e})</text>"#,
        H / 2.0,
        H / 2.0,
        variances[1]
    );
    for (p, &m) in points.iter().zip(modalities) {
        let cx = PAD + (p[0] - x0) / xs * (W - 2.0 * PAD);
        let cy = H - PAD - (p[1] - y0) / ys * (H - 2.0 * PAD);
        let _ = writeln!(
            s,
            r#"<circle class="point {}" cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{}"/>"#,
            m.as_str(),
            color(m)
        );
    }
    let present: BTreeMap<Modality, ()> = modalities.iter().map(|&m| (m, ())).collect();
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (k, m) in present.keys().enumerate() {
        let y = 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            W - 110.0,
            color(*m),
            W - 100.0,
            y + 4.0,
            m.as_str()
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}
