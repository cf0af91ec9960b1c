//! Paired comparisons of per-subject metric tables and pairwise tests on rankings.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Metric values, one row per subject and one column per condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSamples {
    pub conditions: Vec<String>,
    pub subjects: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl PairedSamples {
    pub fn new(conditions: Vec<String>, subjects: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if conditions.len() < 2 || subjects.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 subjects and 2 conditions, got {} and {}",
                subjects.len(),
                conditions.len()
            )));
        }
        if values.len() != subjects.len() || values.iter().any(|r| r.len() != conditions.len()) {
            return Err(Error::InvalidSpec("value matrix does not match subjects x conditions".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("missing or non-finite cell".into()));
        }
        Ok(PairedSamples {
            conditions,
            subjects,
            values,
        })
    }

    fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[c]).collect()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let s = f(c - x) + f(c + x);
        kronrod += GK_WEIGHTS[i] * s;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth >= 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth + 1) + rec(f, m, b, 0.5 * tol, depth + 1)
    }
    rec(&f, a, b, tol, 0)
}

/// `P(range of k standard normals > w)`.
fn range_sf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    let kf = k as f64;
    // W(w) = k * int phi(z) (Phi(z + w) - Phi(z))^(k-1) dz; the difference is
    // formed from upper tails to avoid cancellation.
    let inner = |z: f64| {
        let diff = normal_sf(z) - normal_sf(z + w);
        kf * normal_pdf(z) * diff.powi(k as i32 - 1)
    };
    let cdf = integrate(inner, -9.0 - w, 9.0, 1e-13);
    (1.0 - cdf).clamp(0.0, 1.0)
}

/// Upper tail of the studentized range distribution with `k` groups and `df` error
/// degrees of freedom, by quadrature over the scaled chi density of the standard error.
pub fn studentized_range_sf(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    let nu = df;
    let ln_norm = 0.5 * nu * nu.ln() - ln_gamma(0.5 * nu) - (0.5 * nu - 1.0) * 2f64.ln();
    let density = |s: f64| {
        if s <= 0.0 {
            return 0.0;
        }
        (ln_norm + (nu - 1.0) * s.ln() - 0.5 * nu * s * s).exp()
    };
    let spread = 1.0 / (2.0 * nu).sqrt();
    let hi = 1.0 + 40.0 * spread + 4.0;
    let lo = (1.0 - 40.0 * spread).max(0.0);
    let mid_lo = (1.0 - 5.0 * spread).max(lo);
    let mid_hi = 1.0 + 5.0 * spread;
    let g = |s: f64| density(s) * range_sf(q * s, k);
    let p = integrate(&g, lo, mid_lo, 1e-9) + integrate(&g, mid_lo, mid_hi, 1e-9) + integrate(&g, mid_hi, hi, 1e-9);
    p.clamp(0.0, 1.0)
}

/// Two-sided paired t-test of `a - b`: `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let sd = sample_std(&d);
    if sd == 0.0 {
        return if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) };
    }
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TukeyRow {
    pub condition: String,
    pub mean: f64,
    pub std: f64,
    /// Mean of `condition - baseline`; absent for the baseline row.
    pub mean_difference: Option<f64>,
    pub q: Option<f64>,
    /// HSD-adjusted p-value against the baseline.
    pub p_value: Option<f64>,
    /// Paired t statistic against the baseline, and its unadjusted p-value.
    pub t_statistic: Option<f64>,
    pub t_p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub baseline: String,
    pub ms_error: f64,
    pub df_error: f64,
    pub rows: Vec<TukeyRow>,
}

/// Repeated-measures Tukey comparisons of every condition against `baseline`.
///
/// Subject and condition effects are removed, `MS_error` has `(n-1)(k-1)` degrees of
/// freedom and `q = |mean difference| / sqrt(MS_error / n)`. When the residuals vanish
/// and every mean difference is zero the p-values are 1.
pub fn paired_tukey(samples: &PairedSamples, baseline: &str) -> Result<TukeyResult> {
    let base = samples
        .conditions
        .iter()
        .position(|c| c == baseline)
        .ok_or_else(|| Error::InvalidSpec(format!("unknown baseline condition {baseline}")))?;
    let n = samples.subjects.len();
    let k = samples.conditions.len();
    let col_means: Vec<f64> = (0..k).map(|c| mean(&samples.column(c))).collect();
    let row_means: Vec<f64> = samples.values.iter().map(|r| mean(r)).collect();
    let grand = mean(&col_means);
    let mut ss = 0.0;
    for (i, row) in samples.values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            ss += (v - row_means[i] - col_means[c] + grand).powi(2);
        }
    }
    let df = ((n - 1) * (k - 1)) as f64;
    let ms = ss / df;
    let diffs: Vec<f64> = (0..k).map(|c| col_means[c] - col_means[base]).collect();
    // residual sums of squares are only zero up to rounding
    let scale = samples.values.iter().flatten().map(|v| v * v).sum::<f64>() / (n * k) as f64;
    let degenerate = ms <= 1e-24 * scale.max(f64::MIN_POSITIVE);
    let max_diff = diffs.iter().map(|d| d.abs()).fold(0.0, f64::max);
    if degenerate && max_diff > 1e-12 * scale.sqrt() {
        return Err(Error::DegenerateData("zero within-subject error with nonzero mean differences".into()));
    }
    let rows = (0..k)
        .map(|c| {
            let col = samples.column(c);
            let mut row = TukeyRow {
                condition: samples.conditions[c].clone(),
                mean: col_means[c],
                std: sample_std(&col),
                mean_difference: None,
                q: None,
                p_value: None,
                t_statistic: None,
                t_p_value: None,
            };
            if c != base {
                let (t, tp) = paired_t_test(&col, &samples.column(base));
                let (q, p) = if degenerate {
                    (0.0, 1.0)
                } else {
                    let q = diffs[c].abs() / (ms / n as f64).sqrt();
                    (q, studentized_range_sf(q, k, df))
                };
                row.mean_difference = Some(diffs[c]);
                row.q = Some(q);
                row.p_value = Some(p);
                row.t_statistic = Some(t);
                row.t_p_value = Some(tp);
            }
            row
        })
        .collect();
    Ok(TukeyResult {
        baseline: baseline.to_string(),
        ms_error: ms,
        df_error: df,
        rows,
    })
}

/// Rows `metric,method,mean,std,p_value,t_statistic` for several metric tables.
pub fn tukey_csv(tables: &[(String, TukeyResult)]) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6e}")).unwrap_or_default();
    let mut s = String::from("metric,method,mean,std,p_value,t_statistic\n");
    for (metric, t) in tables {
        for r in &t.rows {
            s.push_str(&format!(
                "{},{},{:.6e},{:.6e},{},{}\n",
                metric,
                r.condition,
                r.mean,
                r.std,
                opt(r.p_value),
                opt(r.t_statistic)
            ));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankingRecord {
    pub rater: String,
    pub subject: String,
    /// Method names from best to worst.
    pub ranking: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRank {
    pub method1: String,
    pub method2: String,
    /// Records ranking `method1` above `method2`.
    pub wins1: usize,
    pub wins2: usize,
    /// Shared log-odds of `method1` winning; absent under the binomial fallback.
    pub log_odds: Option<f64>,
    pub std_error: Option<f64>,
    pub p_value: f64,
    pub fallback: bool,
}

/// Exact two-sided binomial test of `k` successes in `n` trials at probability 1/2.
pub fn binomial_two_sided(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let tail = k.min(n - k);
    let ln_choose = |i: usize| ln_gamma(n as f64 + 1.0) - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0);
    let ln_half = n as f64 * 0.5f64.ln();
    let p: f64 = (0..=tail).map(|i| (ln_choose(i) + ln_half).exp()).sum();
    (2.0 * p).min(1.0)
}

/// Probabilities outside this band count as separation.
const SEPARATION_LIMIT: f64 = 1e-6;

/// Logistic fit of `logit P(win | rater r) = delta + u_r` with `sum u_r = 0`, from
/// per-rater `(wins, trials)`. Returns `(delta, se)` or `None` on (quasi-)separation.
fn fit_rater_logistic(groups: &[(f64, f64)]) -> Option<(f64, f64)> {
    let r = groups.len();
    let x = DMatrix::from_fn(r, r, |i, j| {
        if j == 0 {
            1.0
        } else if i == r - 1 {
            -1.0
        } else if i == j - 1 {
            1.0
        } else {
            0.0
        }
    });
    let mut theta = DVector::zeros(r);
    for _ in 0..100 {
        let eta = &x * &theta;
        let p: Vec<f64> = eta.iter().map(|e: &f64| 1.0 / (1.0 + (-e).exp())).collect();
        if p.iter().any(|&v| !(SEPARATION_LIMIT..=1.0 - SEPARATION_LIMIT).contains(&v)) {
            return None;
        }
        let w = DVector::from_fn(r, |i, _| groups[i].1 * p[i] * (1.0 - p[i]));
        let score = DVector::from_fn(r, |i, _| groups[i].0 - groups[i].1 * p[i]);
        let info = x.transpose() * DMatrix::from_diagonal(&w) * &x;
        let chol = info.clone().cholesky()?;
        let step = chol.solve(&(x.transpose() * score));
        theta += &step;
        if step.amax() < 1e-12 {
            let eta = &x * &theta;
            if eta.iter().any(|e: &f64| {
                let p = 1.0 / (1.0 + (-e).exp());
                !(SEPARATION_LIMIT..=1.0 - SEPARATION_LIMIT).contains(&p)
            }) {
                return None;
            }
            let p: Vec<f64> = eta.iter().map(|e: &f64| 1.0 / (1.0 + (-e).exp())).collect();
            let w = DVector::from_fn(r, |i, _| groups[i].1 * p[i] * (1.0 - p[i]));
            let cov = (x.transpose() * DMatrix::from_diagonal(&w) * &x).try_inverse()?;
            return Some((theta[0], cov[(0, 0)].sqrt()));
        }
    }
    None
}

/// For every pair of methods, tests whether one is ranked above the other more often
/// than chance, with per-rater intercepts.
pub fn pairwise_rank_logistic(records: &[RankingRecord]) -> Result<Vec<PairwiseRank>> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut methods = BTreeSet::new();
    for r in records {
        let set: BTreeSet<&String> = r.ranking.iter().collect();
        if set.len() != r.ranking.len() {
            return Err(Error::Malformed(format!(
                "ranking of {} by {} is not a permutation",
                r.subject, r.rater
            )));
        }
        methods.extend(r.ranking.iter().cloned());
    }
    let methods: Vec<String> = methods.into_iter().collect();
    if methods.len() < 2 {
        return Err(Error::InvalidSpec("need at least two methods".into()));
    }
    let mut out = Vec::new();
    for (a, m1) in methods.iter().enumerate() {
        for m2 in &methods[a + 1..] {
            let mut per_rater: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
            let (mut w1, mut w2) = (0, 0);
            for r in records {
                let p1 = r.ranking.iter().position(|m| m == m1);
                let p2 = r.ranking.iter().position(|m| m == m2);
                let (Some(p1), Some(p2)) = (p1, p2) else { continue };
                let g = per_rater.entry(&r.rater).or_default();
                g.1 += 1.0;
                if p1 < p2 {
                    g.0 += 1.0;
                    w1 += 1;
                } else {
                    w2 += 1;
                }
            }
            let groups: Vec<(f64, f64)> = per_rater.values().cloned().collect();
            let fit = if groups.is_empty() { None } else { fit_rater_logistic(&groups) };
            let row = match fit {
                Some((delta, se)) => PairwiseRank {
                    method1: m1.clone(),
                    method2: m2.clone(),
                    wins1: w1,
                    wins2: w2,
                    log_odds: Some(delta),
                    std_error: Some(se),
                    p_value: if delta == 0.0 { 1.0 } else { erfc((delta / se).abs() / std::f64::consts::SQRT_2) },
                    fallback: false,
                },
                None => PairwiseRank {
                    method1: m1.clone(),
                    method2: m2.clone(),
                    wins1: w1,
                    wins2: w2,
                    log_odds: None,
                    std_error: None,
                    p_value: binomial_two_sided(w1, w1 + w2),
                    fallback: true,
                },
            };
            out.push(row);
        }
    }
    Ok(out)
}

/// Rows `method1,method2,wins1,wins2,p_value,fallback_flag`.
pub fn rank_csv(rows: &[PairwiseRank]) -> String {
    let mut s = String::from("method1,method2,wins1,wins2,p_value,fallback_flag\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6e},{}\n",
            r.method1, r.method2, r.wins1, r.wins2, r.p_value, r.fallback
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn quadrature_of_known_integrals() {
        assert!((integrate(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12) - 2.0).abs() < 1e-11);
        assert!((integrate(|x| (-x * x).exp(), -10.0, 10.0, 1e-12) - std::f64::consts::PI.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn range_of_two_normals() {
        // the range of two standard normals is |N(0, 2)|
        for w in [0.1, 1.0, 2.5, 5.0] {
            let expect = 2.0 * normal_sf(w / 2f64.sqrt());
            assert!((range_sf(w, 2) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn studentized_range_reference_values() {
        // classical table: q_0.05(3, 10) = 3.877, q_0.05(4, 20) = 3.958, q_0.01(4, 30) = 4.799, q_0.01(5, 30) = 5.048
        assert!((studentized_range_sf(3.877, 3, 10.0) - 0.05).abs() < 2e-4);
        assert!((studentized_range_sf(3.958, 4, 20.0) - 0.05).abs() < 2e-4);
        assert!((studentized_range_sf(4.799, 4, 30.0) - 0.01).abs() < 1e-4);
        assert!((studentized_range_sf(5.048, 5, 30.0) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn two_conditions_match_paired_t() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0, 1.0).unwrap();
        for shift in [0.0, 0.3, 0.8, 2.0] {
            let vals: Vec<Vec<f64>> = (0..12)
                .map(|_| {
                    let base = 5.0 + nd.sample(&mut rng);
                    vec![base, base + shift + 0.5 * nd.sample(&mut rng)]
                })
                .collect();
            let s = PairedSamples::new(names(&["u", "m"]), (0..12).map(|i| i.to_string()).collect(), vals).unwrap();
            let t = paired_tukey(&s, "u").unwrap();
            let row = &t.rows[1];
            assert!((row.p_value.unwrap() - row.t_p_value.unwrap()).abs() < 1e-6);
            assert!((row.q.unwrap() - 2f64.sqrt() * row.t_statistic.unwrap().abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_conditions_give_p_one() {
        let vals: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 3]).collect();
        let s = PairedSamples::new(names(&["a", "b", "c"]), names(&["1", "2", "3", "4", "5"]), vals).unwrap();
        let t = paired_tukey(&s, "a").unwrap();
        assert!(t.rows.iter().skip(1).all(|r| r.p_value == Some(1.0)));
        let shifted: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64 + 1.0, i as f64]).collect();
        let s = PairedSamples::new(names(&["a", "b", "c"]), names(&["1", "2", "3", "4", "5"]), shifted).unwrap();
        assert!(matches!(paired_tukey(&s, "a"), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn large_shift_detected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let vals: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let s = 10.0 * nd.sample(&mut rng);
                vec![s + nd.sample(&mut rng), s + nd.sample(&mut rng), s + 5.0 + nd.sample(&mut rng), s + nd.sample(&mut rng)]
            })
            .collect();
        let s = PairedSamples::new(names(&["u", "a", "b", "c"]), (0..20).map(|i| i.to_string()).collect(), vals).unwrap();
        let t = paired_tukey(&s, "u").unwrap();
        assert!(t.rows[2].p_value.unwrap() < 1e-3);
        assert!(t.rows[1].p_value.unwrap() > 0.5 && t.rows[3].p_value.unwrap() > 0.5);
    }

    #[test]
    fn tukey_p_monotone_in_difference() {
        let mut last = 1.0;
        for q in [0.5, 1.0, 2.0, 3.0, 4.0, 6.0] {
            let p = studentized_range_sf(q, 4, 15.0);
            assert!(p < last);
            last = p;
        }
    }

    fn records(rater: &str, wins: usize, losses: usize) -> Vec<RankingRecord> {
        (0..wins + losses)
            .map(|i| RankingRecord {
                rater: rater.into(),
                subject: format!("s{i}"),
                ranking: if i < wins { names(&["A", "B"]) } else { names(&["B", "A"]) },
            })
            .collect()
    }

    #[test]
    fn binomial_values() {
        assert!((binomial_two_sided(87, 87) - 2.0 * 0.5f64.powi(87)).abs() < 1e-40);
        assert_eq!(binomial_two_sided(5, 10), 1.0);
        // P(X <= 1) for n = 5 is 6/32
        assert!((binomial_two_sided(1, 5) - 12.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn rank_76_vs_11() {
        let r = pairwise_rank_logistic(&records("r1", 76, 11)).unwrap();
        let row = &r[0];
        assert_eq!((row.wins1, row.wins2), (76, 11));
        assert!(!row.fallback);
        assert!((row.log_odds.unwrap() - (76.0f64 / 11.0).ln()).abs() < 1e-9);
        assert!(row.p_value < 1e-4);
        assert!(binomial_two_sided(76, 87) < 1e-11);
    }

    #[test]
    fn rank_balanced_and_unanimous() {
        let mut recs = records("r1", 25, 25);
        recs.extend(records("r2", 25, 25));
        let r = pairwise_rank_logistic(&recs).unwrap();
        assert!(r[0].p_value > 0.9);
        let r = pairwise_rank_logistic(&records("r1", 87, 0)).unwrap();
        assert!(r[0].fallback);
        assert!((r[0].p_value - 2.0 * 0.5f64.powi(87)).abs() < 1e-40);
    }

    #[test]
    fn identical_raters_match_pooled_log_odds() {
        let mut recs = records("r1", 30, 10);
        recs.extend(records("r2", 30, 10));
        recs.extend(records("r3", 30, 10));
        let r = pairwise_rank_logistic(&recs).unwrap();
        assert!((r[0].log_odds.unwrap() - 3f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(pairwise_rank_logistic(&[]), Err(Error::NoRecords)));
        let bad = RankingRecord { rater: "r".into(), subject: "s".into(), ranking: names(&["A", "A"]) };
        assert!(matches!(pairwise_rank_logistic(&[bad]), Err(Error::Malformed(_))));
    }
}
