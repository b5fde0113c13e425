//! Two-segment linear fit of throughput against offered load.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeFit {
    /// Offered rate where the two segments meet.
    pub knee_x: f64,
    pub knee_y: f64,
    pub slope_below: f64,
    pub slope_above: f64,
    pub r_squared: f64,
}

/// Least squares over `y = a + b*x + c*max(0, x - knee)`, with the knee
/// searched on a fine grid between the extreme x values. Needs at least
/// four points.
pub fn fit_knee(points: &[(f64, f64)]) -> Option<KneeFit> {
    if points.len() < 4 {
        return None;
    }
    let xmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !(xmax > xmin) {
        return None;
    }
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();

    const STEPS: usize = 2000;
    let mut best: Option<(f64, [f64; 3], f64)> = None;
    for i in 1..STEPS {
        let knee = xmin + (xmax - xmin) * i as f64 / STEPS as f64;
        let Some(coef) = hinge_lsq(points, knee) else { continue };
        let sse: f64 = points.iter().map(|&(x, y)| (y - eval(coef, knee, x)).powi(2)).sum();
        if best.is_none_or(|b| sse < b.2) {
            best = Some((knee, coef, sse));
        }
    }
    let (knee, [a, b, c], sse) = best?;
    let r_squared = if ss_tot > 0.0 { 1.0 - sse / ss_tot } else { 1.0 };
    Some(KneeFit {
        knee_x: knee,
        knee_y: a + b * knee,
        slope_below: b,
        slope_above: b + c,
        r_squared,
    })
}

fn eval([a, b, c]: [f64; 3], knee: f64, x: f64) -> f64 {
    a + b * x + c * (x - knee).max(0.0)
}

fn hinge_lsq(points: &[(f64, f64)], knee: f64) -> Option<[f64; 3]> {
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for &(x, y) in points {
        let row = [1.0, x, (x - knee).max(0.0)];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    solve3(ata, aty)
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            for c in col..3 {
                m[r][c] -= f * m[col][c];
            }
            v[r] -= f * v[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| m[r][c] * x[c]).sum();
        x[r] = (v[r] - s) / m[r][r];
    }
    Some(x)
}
