//! Post-hoc analyses over a trained encoder: leave-one-class-out ablation,
//! attribution-shift JSD, fidelity budget curves with the characterisation
//! score, class rankings, and the attention-versus-performance correlation.

mod analysis;

pub use analysis::{Analysis, PairFidelity};

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::attribution::{AttributionError, ExplainerKind};
use crate::metrics::MetricsError;
use crate::pipeline::PipelineError;
use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum IntrospectError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("no attribution scores to histogram")]
    EmptyAttributions,
    #[error("rho {0} is not on the fidelity grid")]
    RhoOffGrid(f64),
    #[error("fidelity grid must be strictly increasing within (0, 1]")]
    BadGrid,
    #[error("correlation needs at least {0} classes")]
    TooFewClasses(usize),
}

/// Leave-one-class-out ablation result for one class.
#[derive(Debug, Clone, Serialize)]
pub struct ClassAblationRow {
    pub label: u32,
    pub code: String,
    pub instances: usize,
    pub pr_auc_full: f64,
    pub pr_auc_without: f64,
    /// Signed: removal may help.
    pub drop: f64,
    /// Drop divided by the instance count.
    pub normalised_drop: f64,
}

/// Attribution-distribution shift for one (explainer, class).
#[derive(Debug, Clone, Serialize)]
pub struct JsdShiftRow {
    pub explainer: ExplainerKind,
    pub label: u32,
    pub code: String,
    pub instances: usize,
    pub raw_jsd: f64,
    pub freq_normalised_jsd: f64,
}

/// Histogram of normalised attribution scores over fixed bins on [0, 1],
/// so distributions over different node sets share a support.
pub const JSD_BINS: usize = 20;
pub const JSD_EPS: f64 = 1e-9;

pub fn score_histogram(scores: impl IntoIterator<Item = f64>) -> [f64; JSD_BINS] {
    let mut bins = [0.0; JSD_BINS];
    let mut n = 0usize;
    for s in scores {
        let b = ((s * JSD_BINS as f64) as usize).min(JSD_BINS - 1);
        bins[b] += 1.0;
        n += 1;
    }
    if n > 0 {
        for b in bins.iter_mut() {
            *b /= n as f64;
        }
    }
    bins
}

/// Jensen-Shannon divergence in base 2 (range [0, 1]) with epsilon
/// smoothing so empty bins stay finite.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let smooth = |v: &[f64]| -> Vec<f64> {
        let total: f64 = v.iter().sum::<f64>() + JSD_EPS * v.len() as f64;
        v.iter().map(|x| (x + JSD_EPS) / total).collect()
    };
    let ps = smooth(p);
    let qs = smooth(q);
    let mut div = 0.0;
    for (a, b) in ps.iter().zip(&qs) {
        let m = 0.5 * (a + b);
        div += 0.5 * a * (a / m).log2() + 0.5 * b * (b / m).log2();
    }
    div.clamp(0.0, 1.0)
}

/// Mean fidelity budget curves for one explainer over a pair set.
#[derive(Debug, Clone, Serialize)]
pub struct FidelityCurve {
    pub explainer: ExplainerKind,
    pub rho: Vec<f64>,
    pub s_keep: Vec<f64>,
    pub s_drop: Vec<f64>,
    pub delta_plus: Vec<f64>,
    pub delta_minus: Vec<f64>,
    pub pairs: usize,
    pub skipped_empty: usize,
}

impl FidelityCurve {
    pub fn index_of(&self, rho_star: f64) -> Result<usize, IntrospectError> {
        self.rho
            .iter()
            .position(|r| (r - rho_star).abs() < 1e-9)
            .ok_or(IntrospectError::RhoOffGrid(rho_star))
    }
}

/// The aggregate of necessity and sufficiency at one budget.
#[derive(Debug, Clone, Serialize)]
pub struct CharactScore {
    pub explainer: ExplainerKind,
    pub rho_star: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub value: f64,
    /// Set when the inputs were degenerate or the value was clamped into
    /// [0, 1] (possible because cosine similarities may be negative).
    pub clamped: bool,
}

/// Weighted harmonic mean of necessity `delta_plus` and sufficiency
/// `1 - delta_minus`. Degenerate inputs (`delta_plus <= 0` or
/// `delta_minus >= 1`) give 0.
pub fn charact_value(delta_plus: f64, delta_minus: f64, w_plus: f64, w_minus: f64) -> (f64, bool) {
    let sufficiency = 1.0 - delta_minus;
    if delta_plus <= 0.0 || sufficiency <= 0.0 {
        return (0.0, true);
    }
    let v = (w_plus + w_minus) / (w_plus / delta_plus + w_minus / sufficiency);
    if v > 1.0 {
        (1.0, true)
    } else {
        (v, false)
    }
}

pub fn charact(
    curve: &FidelityCurve,
    rho_star: f64,
    w_plus: f64,
    w_minus: f64,
) -> Result<CharactScore, IntrospectError> {
    let i = curve.index_of(rho_star)?;
    let (value, clamped) = charact_value(curve.delta_plus[i], curve.delta_minus[i], w_plus, w_minus);
    Ok(CharactScore {
        explainer: curve.explainer,
        rho_star,
        w_plus,
        w_minus,
        value,
        clamped,
    })
}

/// Default fidelity grid: 0.05 to 1.0 in 0.05 steps.
pub fn default_rho_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 * 0.05).collect()
}

pub fn validate_grid(grid: &[f64]) -> Result<(), IntrospectError> {
    if grid.is_empty() {
        return Err(IntrospectError::BadGrid);
    }
    for (i, r) in grid.iter().enumerate() {
        if !(*r > 0.0 && *r <= 1.0) || (i > 0 && grid[i - 1] >= *r) {
            return Err(IntrospectError::BadGrid);
        }
    }
    Ok(())
}

/// Classes sorted by descending score; ties break by ascending label id.
pub fn rank_classes(scores: &BTreeMap<u32, f64>) -> Vec<u32> {
    let mut order: Vec<u32> = scores.keys().copied().collect();
    order.sort_by(|a, b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(b))
    });
    order
}

/// Kendall rank correlation between two orderings of the same items.
pub fn kendall_tau(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let pos_b: BTreeMap<u32, usize> = b.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let ranks: Vec<usize> = a.iter().map(|x| pos_b[x]).collect();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            if ranks[i] < ranks[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

/// Scatter point of the attention-versus-ablation comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationPoint {
    pub label: u32,
    pub code: String,
    pub normalised_drop: f64,
    pub attention_jsd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    /// `None` when undefined (a constant input vector).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub points: Vec<CorrelationPoint>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0 + 1.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Correlates per-class normalised PR-AUC drops with frequency-normalised
/// attention JSD shifts.
pub fn attention_performance_correlation(
    ablation: &[ClassAblationRow],
    attention_jsd: &[JsdShiftRow],
) -> Result<CorrelationReport, IntrospectError> {
    let jsd_by_label: BTreeMap<u32, &JsdShiftRow> =
        attention_jsd.iter().map(|r| (r.label, r)).collect();
    let mut points = Vec::new();
    for row in ablation {
        if let Some(j) = jsd_by_label.get(&row.label) {
            points.push(CorrelationPoint {
                label: row.label,
                code: row.code.clone(),
                normalised_drop: row.normalised_drop,
                attention_jsd: j.freq_normalised_jsd,
            });
        }
    }
    if points.len() < 3 {
        return Err(IntrospectError::TooFewClasses(3));
    }
    let x: Vec<f64> = points.iter().map(|p| p.normalised_drop).collect();
    let y: Vec<f64> = points.iter().map(|p| p.attention_jsd).collect();
    Ok(CorrelationReport {
        pearson: pearson(&x, &y),
        spearman: spearman(&x, &y),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsd_identities() {
        let p = [0.25, 0.25, 0.5, 0.0];
        let q = [0.1, 0.2, 0.3, 0.4];
        assert!(jsd(&p, &p) < 1e-12);
        assert!((jsd(&p, &q) - jsd(&q, &p)).abs() < 1e-15);
        // Disjoint supports reach the base-2 maximum.
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert!((jsd(&a, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn jsd_bounds_on_random_histograms() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut p = [0.0; JSD_BINS];
            let mut q = [0.0; JSD_BINS];
            for i in 0..JSD_BINS {
                p[i] = rng.random_range(0.0..1.0);
                q[i] = rng.random_range(0.0..1.0);
            }
            let d = jsd(&p, &q);
            assert!((0.0..=1.0).contains(&d));
            assert!((d - jsd(&q, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn charact_unit_cases() {
        assert_eq!(charact_value(1.0, 0.0, 0.5, 0.5), (1.0, false));
        assert_eq!(charact_value(0.5, 0.5, 0.5, 0.5), (0.5, false));
        assert_eq!(charact_value(0.0, 0.3, 0.5, 0.5).0, 0.0);
        assert_eq!(charact_value(0.4, 1.0, 0.5, 0.5).0, 0.0);
        // Negative sufficiency floors at 0 with the event flagged.
        let (v, clamped) = charact_value(0.4, 1.3, 0.5, 0.5);
        assert_eq!(v, 0.0);
        assert!(clamped);
    }

    #[test]
    fn rank_ties_break_by_label() {
        let scores: BTreeMap<u32, f64> = [(5, 1.0), (8, 1.0), (10, 2.0)].into_iter().collect();
        assert_eq!(rank_classes(&scores), vec![10, 5, 8]);
        let equal: BTreeMap<u32, f64> = [(5, 0.0), (8, 0.0), (10, 0.0)].into_iter().collect();
        assert_eq!(rank_classes(&equal), vec![5, 8, 10]);
    }

    #[test]
    fn rank_invariant_under_monotone_transform() {
        let scores: BTreeMap<u32, f64> = [(5, 0.1), (8, 0.9), (10, 0.4), (11, 0.2)].into_iter().collect();
        let transformed: BTreeMap<u32, f64> =
            scores.iter().map(|(k, v)| (*k, (3.0 * v).exp() + 7.0)).collect();
        assert_eq!(rank_classes(&scores), rank_classes(&transformed));
    }

    #[test]
    fn kendall_tau_self_is_one() {
        let a = vec![5, 8, 10, 11, 12, 18];
        assert_eq!(kendall_tau(&a, &a), 1.0);
        let mut b = a.clone();
        b.reverse();
        assert_eq!(kendall_tau(&a, &b), -1.0);
    }

    #[test]
    fn correlation_on_synthetic_inputs() {
        let mk_rows = |drops: &[f64], jsds: &[f64]| {
            let labels = [5u32, 8, 10, 11];
            let ablation: Vec<ClassAblationRow> = labels
                .iter()
                .zip(drops)
                .map(|(&label, &d)| ClassAblationRow {
                    label,
                    code: format!("C{label}"),
                    instances: 1,
                    pr_auc_full: 0.5,
                    pr_auc_without: 0.5 - d,
                    drop: d,
                    normalised_drop: d,
                })
                .collect();
            let jsd_rows: Vec<JsdShiftRow> = labels
                .iter()
                .zip(jsds)
                .map(|(&label, &j)| JsdShiftRow {
                    explainer: ExplainerKind::Attention,
                    label,
                    code: format!("C{label}"),
                    instances: 1,
                    raw_jsd: j,
                    freq_normalised_jsd: j,
                })
                .collect();
            (ablation, jsd_rows)
        };
        let (a, j) = mk_rows(&[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0, 3.0, 4.0]);
        let rep = attention_performance_correlation(&a, &j).unwrap();
        assert!((rep.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((rep.spearman.unwrap() - 1.0).abs() < 1e-12);
        let (a, j) = mk_rows(&[0.1, 0.2, 0.3, 0.4], &[4.0, 3.0, 2.0, 1.0]);
        let rep = attention_performance_correlation(&a, &j).unwrap();
        assert!((rep.pearson.unwrap() + 1.0).abs() < 1e-12);
        // Constant vectors: undefined, reported as such.
        let (a, j) = mk_rows(&[0.1, 0.1, 0.1, 0.1], &[1.0, 2.0, 3.0, 4.0]);
        let rep = attention_performance_correlation(&a, &j).unwrap();
        assert!(rep.pearson.is_none());
    }

    #[test]
    fn histogram_is_a_distribution() {
        let h = score_histogram([0.0, 0.049, 0.05, 0.5, 0.999, 1.0]);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h[0], 2.0 / 6.0);
        assert_eq!(h[JSD_BINS - 1], 2.0 / 6.0);
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&default_rho_grid()).is_ok());
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.0, 0.5]).is_err());
        assert!(validate_grid(&[0.5, 0.5]).is_err());
        assert!(validate_grid(&[0.5, 1.1]).is_err());
    }
}
