//! Pose-error metrics: mean/median geodesic angle, per-axis Euler MAE with
//! angle wrapping, and the Frobenius measure ||I - R1 R2^T||_F.

use crate::data::DataSet;
use crate::fisher;
use crate::net::{self, NetParams};
use crate::so3::{euler_from_matrix, frobenius_metric, geodesic_angle_deg, wrap_angle_deg, Rotation};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset split has no labeled samples")]
    NoLabels,
    #[error(transparent)]
    Net(#[from] net::NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub mean_geodesic_deg: f64,
    pub median_geodesic_deg: f64,
    pub mae_pitch_deg: f64,
    pub mae_yaw_deg: f64,
    pub mae_roll_deg: f64,
    pub mae_deg: f64,
    pub mean_frobenius: f64,
}

impl EvalReport {
    /// Flat key=value lines, machine-readable.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.n);
        let _ = writeln!(s, "mean_geodesic_deg={:.6}", self.mean_geodesic_deg);
        let _ = writeln!(s, "median_geodesic_deg={:.6}", self.median_geodesic_deg);
        let _ = writeln!(s, "mae_pitch_deg={:.6}", self.mae_pitch_deg);
        let _ = writeln!(s, "mae_yaw_deg={:.6}", self.mae_yaw_deg);
        let _ = writeln!(s, "mae_roll_deg={:.6}", self.mae_roll_deg);
        let _ = writeln!(s, "mae_deg={:.6}", self.mae_deg);
        let _ = writeln!(s, "mean_frobenius={:.6}", self.mean_frobenius);
        s
    }

    /// Small human-readable table.
    pub fn to_table(&self) -> String {
        format!(
            "samples            {:>10}\n\
             geodesic mean      {:>10.3} deg\n\
             geodesic median    {:>10.3} deg\n\
             MAE pitch          {:>10.3} deg\n\
             MAE yaw            {:>10.3} deg\n\
             MAE roll           {:>10.3} deg\n\
             MAE (avg)          {:>10.3} deg\n\
             frobenius mean     {:>10.4}\n",
            self.n,
            self.mean_geodesic_deg,
            self.median_geodesic_deg,
            self.mae_pitch_deg,
            self.mae_yaw_deg,
            self.mae_roll_deg,
            self.mae_deg,
            self.mean_frobenius
        )
    }
}

/// Metrics for paired (prediction, label) rotations.
pub fn evaluate_predictions(preds: &[Rotation], labels: &[Rotation]) -> Result<EvalReport, EvalError> {
    assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return Err(EvalError::NoLabels);
    }
    let n = preds.len();
    let mut geos = Vec::with_capacity(n);
    let mut frob = 0.0;
    let (mut mp, mut my, mut mr) = (0.0, 0.0, 0.0);
    for (p, l) in preds.iter().zip(labels) {
        geos.push(geodesic_angle_deg(p, l));
        frob += frobenius_metric(p, l);
        let ep = euler_from_matrix(p);
        let el = euler_from_matrix(l);
        mp += wrap_angle_deg(ep.pitch_deg - el.pitch_deg).abs();
        my += wrap_angle_deg(ep.yaw_deg - el.yaw_deg).abs();
        mr += wrap_angle_deg(ep.roll_deg - el.roll_deg).abs();
    }
    let mean_geo = geos.iter().sum::<f64>() / n as f64;
    let mut sorted = geos.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (mp, my, mr) = (mp / n as f64, my / n as f64, mr / n as f64);
    Ok(EvalReport {
        n,
        mean_geodesic_deg: mean_geo,
        median_geodesic_deg: median,
        mae_pitch_deg: mp,
        mae_yaw_deg: my,
        mae_roll_deg: mr,
        mae_deg: (mp + my + mr) / 3.0,
        mean_frobenius: frob / n as f64,
    })
}

/// Runs the regressor over a labeled split (plain images, no augmentation)
/// and scores the predicted modes.
pub fn evaluate_net(params: &NetParams, ds: &DataSet) -> Result<EvalReport, EvalError> {
    let labeled: Vec<_> = ds.samples.iter().filter(|s| s.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(EvalError::NoLabels);
    }
    let preds: Vec<Rotation> = crate::parallel::map_slice(&labeled, |_, s| {
        let a = net::forward(params, &s.image).expect("finite forward");
        fisher::mode(&a)
    });
    let labels: Vec<Rotation> = labeled.iter().map(|s| s.label.unwrap()).collect();
    evaluate_predictions(&preds, &labels)
}
