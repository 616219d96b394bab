//! Residual-driven discovery of candidate constraint laws.
//!
//! Residuals of a trained model are tested for dependence on the available
//! features, a complexity-penalized symbolic fit is searched over a typed
//! basis, and surviving laws are validated on disjoint holdout rows before
//! a hierarchy level is proposed. Results are written out for review and
//! never modify a running pack.

mod expr;
mod search;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use expr::{Dimension, Expr, Feature, FeatureKind, Unit, BASE_UNITS};
pub use search::{fit_candidates, GpConfig, SearchConfig};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::trainer::derived_rng;

const STREAM_SPLIT: u64 = 20;
const STREAM_PERMUTE: u64 = 21;

/// Residual `r = truth - prediction` per row with the paired features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub features: Vec<Feature>,
    pub r: Vec<f64>,
    pub r_name: String,
    pub r_unit: Option<Unit>,
    /// Row indices used for fitting; disjoint from `holdout`.
    pub fit: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl ResidualSet {
    /// Splits rows 50/50 by `groups` (rows of one group stay together),
    /// shuffled deterministically by `seed`.
    pub fn new(
        features: Vec<Feature>,
        r: Vec<f64>,
        r_name: impl Into<String>,
        r_unit: Option<Unit>,
        groups: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let n = r.len();
        if groups.len() != n || features.iter().any(|f| f.values.len() != n) {
            return Err(Error::invalid(format!(
                "residual set needs one value per row: {n} residuals, {} group labels, feature lengths {:?}",
                groups.len(),
                features.iter().map(|f| f.values.len()).collect::<Vec<_>>()
            )));
        }
        if r.iter().chain(features.iter().flat_map(|f| &f.values)).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("residual set holds non-finite values".into()));
        }
        let mut ids: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if ids.len() < 2 {
            return Err(Error::invalid("residual split needs at least two groups"));
        }
        ids.shuffle(&mut derived_rng(seed, STREAM_SPLIT, 0));
        let fit_ids: BTreeSet<usize> = ids[..ids.len() / 2].iter().copied().collect();
        let (fit, holdout): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fit_ids.contains(&groups[i]));
        Ok(Self {
            features,
            r,
            r_name: r_name.into(),
            r_unit,
            fit,
            holdout,
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Names and units of the columns a trajectory dataset exposes to discovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub state_names: Vec<String>,
    pub state_units: Vec<Option<Unit>>,
    pub cond_names: Vec<String>,
    pub cond_units: Vec<Option<Unit>>,
    /// Unit of the step between rows.
    pub step_unit: Unit,
    pub step: f64,
}

impl FeatureLayout {
    pub fn oscillator(dt: f64) -> Self {
        let m = Unit::base(0);
        let s = Unit::base(1);
        let kg = Unit::base(2);
        Self {
            state_names: vec!["x".into(), "v".into()],
            state_units: vec![Some(m), Some(m.mul(s.inv()))],
            cond_names: vec!["gamma".into(), "x0".into(), "v0".into()],
            cond_units: vec![Some(kg.mul(s.inv())), Some(m), Some(m.mul(s.inv()))],
            step_unit: s,
            step: dt,
        }
    }

    /// Battery columns are normalized or counts, so dimensionless.
    pub fn battery() -> Self {
        Self {
            state_names: vec!["temp_norm".into(), "capacity_norm".into(), "soh".into(), "cycle".into()],
            state_units: vec![Some(Unit::ONE); 4],
            cond_names: vec!["t_ambient_k".into(), "prefactor".into()],
            cond_units: vec![Some(Unit::base(3)), Some(Unit::base(4))],
            step_unit: Unit::ONE,
            step: 1.0,
        }
    }
}

/// Central difference with one-sided ends.
fn derivative(col: &[f64], h: f64) -> Vec<f64> {
    let n = col.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                0.0
            } else if i == 0 {
                (col[1] - col[0]) / h
            } else if i == n - 1 {
                (col[n - 1] - col[n - 2]) / h
            } else {
                (col[i + 1] - col[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// Residual set of state column `channel` from matched `[T, D]` trajectories.
///
/// Features are the true state columns, their finite-difference time
/// derivatives and the condition columns; each trajectory is one split group.
pub fn compute_residuals(
    truth: &[Tensor<f64>],
    pred: &[Tensor<f64>],
    conds: &[Vec<f64>],
    channel: usize,
    layout: &FeatureLayout,
    seed: u64,
) -> Result<ResidualSet> {
    let d = layout.state_names.len();
    if truth.len() != pred.len() || truth.len() != conds.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "residuals need matched non-empty sets, got {} truth, {} predictions, {} conditions",
            truth.len(),
            pred.len(),
            conds.len()
        )));
    }
    if channel >= d {
        return Err(Error::invalid(format!("residual channel {channel} out of range for {d} state columns")));
    }
    let dc = layout.cond_names.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 2 * d + dc];
    let mut r = Vec::new();
    let mut groups = Vec::new();
    for (g, ((tr, pr), c)) in truth.iter().zip(pred).zip(conds).enumerate() {
        if tr.shape() != pr.shape() || tr.rank() != 2 || tr.shape()[1] != d {
            return Err(Error::shape("compute_residuals", tr.shape(), pr.shape()));
        }
        if c.len() != dc {
            return Err(Error::invalid(format!("condition row {g} has {} entries, layout expects {dc}", c.len())));
        }
        let t = tr.shape()[0];
        for j in 0..d {
            let col: Vec<f64> = (0..t).map(|i| tr.data()[i * d + j]).collect();
            cols[d + j].extend(derivative(&col, layout.step));
            cols[j].extend(col);
        }
        for (k, &cv) in c.iter().enumerate() {
            cols[2 * d + k].extend(std::iter::repeat_n(cv, t));
        }
        r.extend((0..t).map(|i| tr.data()[i * d + channel] - pr.data()[i * d + channel]));
        groups.extend(std::iter::repeat_n(g, t));
    }
    let mut features = Vec::with_capacity(cols.len());
    let mut cols = cols.into_iter();
    for j in 0..d {
        features.push(Feature {
            name: layout.state_names[j].clone(),
            kind: FeatureKind::State,
            unit: layout.state_units[j],
            values: cols.next().expect("state column"),
        });
    }
    for j in 0..d {
        features.push(Feature {
            name: format!("d_{}", layout.state_names[j]),
            kind: FeatureKind::Derivative,
            unit: layout.state_units[j].map(|u| u.mul(layout.step_unit.inv())),
            values: cols.next().expect("derivative column"),
        });
    }
    for k in 0..dc {
        features.push(Feature {
            name: layout.cond_names[k].clone(),
            kind: FeatureKind::Condition,
            unit: layout.cond_units[k],
            values: cols.next().expect("condition column"),
        });
    }
    ResidualSet::new(
        features,
        r,
        format!("r_{}", layout.state_names[channel]),
        layout.state_units[channel],
        &groups,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    pub alpha_sig: f64,
    /// Permutation count; `0` picks enough to resolve the corrected level.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            alpha_sig: 0.01,
            permutations: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTest {
    pub feature: usize,
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub flagged: bool,
}

fn standardized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    if !(sd > 1e-300) || !sd.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x - m) / sd).collect())
}

/// Permutation test of each feature against the fit-split residuals.
///
/// The statistic is the larger of `|corr(z, r)|` and `|corr(z^2, r)|` for the
/// standardized feature `z`, so symmetric dependence such as `r ~ x^2` is
/// caught. Flags use a Bonferroni correction over the features.
pub fn extract_patterns(rs: &ResidualSet, cfg: &PatternConfig) -> Result<Vec<PatternTest>> {
    let n = rs.fit.len();
    if n < 30 {
        return Err(Error::invalid(format!("pattern extraction needs at least 30 fit rows, got {n}")));
    }
    if !(cfg.alpha_sig > 0.0 && cfg.alpha_sig < 1.0) {
        return Err(Error::Config(format!("significance level must lie in (0, 1), got {}", cfg.alpha_sig)));
    }
    let nf = rs.features.len();
    let level = cfg.alpha_sig / nf.max(1) as f64;
    let perms = if cfg.permutations > 0 {
        cfg.permutations
    } else {
        ((2.0 / level).ceil() as usize).max(999)
    };
    let r: Vec<f64> = rs.fit.iter().map(|&i| rs.r[i]).collect();
    let Some(rz) = standardized(&r) else {
        // Constant residual: nothing can correlate with it.
        return Ok(rs
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| PatternTest {
                feature: j,
                name: f.name.clone(),
                statistic: 0.0,
                p_value: 1.0,
                flagged: false,
            })
            .collect());
    };
    let transforms: Vec<Option<[Vec<f64>; 2]>> = rs
        .features
        .iter()
        .map(|f| {
            let z = standardized(&rs.fit.iter().map(|&i| f.values[i]).collect::<Vec<_>>())?;
            let z2 = standardized(&z.iter().map(|v| v * v).collect::<Vec<_>>()).unwrap_or_else(|| vec![0.0; n]);
            Some([z, z2])
        })
        .collect();
    let stat = |t: &[Vec<f64>; 2], r: &[f64]| {
        t.iter()
            .map(|c| (c.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / n as f64).abs())
            .fold(0.0, f64::max)
    };
    let observed: Vec<f64> = transforms.iter().map(|t| t.as_ref().map_or(0.0, |t| stat(t, &rz))).collect();
    let mut exceed = vec![0usize; nf];
    let mut rng = derived_rng(cfg.seed, STREAM_PERMUTE, 0);
    let mut perm = rz.clone();
    for _ in 0..perms {
        perm.shuffle(&mut rng);
        for (j, t) in transforms.iter().enumerate() {
            if let Some(t) = t {
                if stat(t, &perm) >= observed[j] {
                    exceed[j] += 1;
                }
            }
        }
    }
    Ok(rs
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let p = if transforms[j].is_some() {
                (1 + exceed[j]) as f64 / (1 + perms) as f64
            } else {
                1.0
            };
            PatternTest {
                feature: j,
                name: f.name.clone(),
                statistic: observed[j],
                p_value: p,
                flagged: p <= level,
            }
        })
        .collect())
}

pub fn flagged(tests: &[PatternTest]) -> Vec<usize> {
    tests.iter().filter(|t| t.flagged).map(|t| t.feature).collect()
}

/// A fitted law `r ≈ c0 + sum_j c_j term_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLaw {
    pub terms: Vec<Expr>,
    pub term_strings: Vec<String>,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Canonical prefix form with coefficient placeholders `c0, c1, ...`.
    pub expression: String,
    pub complexity: usize,
    /// Fit-split MSE plus the complexity penalty.
    pub score: f64,
    pub fit_r2: f64,
    pub holdout_r2: f64,
    pub level: u8,
}

impl CandidateLaw {
    pub fn predict(&self, feats: &[Feature], row: usize) -> f64 {
        self.intercept
            + self
                .terms
                .iter()
                .zip(&self.coefficients)
                .map(|(t, c)| c * t.eval(feats, row))
                .sum::<f64>()
    }

    /// Coefficient of the term whose canonical form is `term`.
    pub fn coefficient_of(&self, term: &str) -> Option<f64> {
        self.term_strings.iter().position(|s| s == term).map(|i| self.coefficients[i])
    }
}

/// Node count of `c0 + sum_j c_j term_j`; the constant model has complexity 1.
pub fn law_complexity(terms: &[Expr]) -> usize {
    if terms.is_empty() {
        1
    } else {
        2 + terms.iter().map(|t| 2 + t.node_count()).sum::<usize>()
    }
}

pub fn law_expression(term_strings: &[String]) -> String {
    if term_strings.is_empty() {
        return "c0".into();
    }
    let mut s = String::from("(+ c0");
    for (j, t) in term_strings.iter().enumerate() {
        s.push_str(&format!(" (* c{} {t})", j + 1));
    }
    s.push(')');
    s
}

/// `R^2` of `law` on the given rows.
pub fn r2_on(law: &CandidateLaw, rs: &ResidualSet, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&i| rs.r[i]).sum::<f64>() / n;
    let ss_tot: f64 = rows.iter().map(|&i| (rs.r[i] - mean).powi(2)).sum();
    let ss_res: f64 = rows.iter().map(|&i| (rs.r[i] - law.predict(&rs.features, i)).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub dimension: Dimension,
    /// Unit carried by each coefficient so that every term has the residual's unit.
    pub coefficient_units: Vec<Option<String>>,
    pub holdout_r2: f64,
    pub validated: bool,
}

pub const HOLDOUT_R2_MIN: f64 = 0.9;

/// Units check and holdout reproducibility; the law must have been fitted on
/// the fit split only.
pub fn validate(law: &CandidateLaw, rs: &ResidualSet) -> Validation {
    let mut dimension = if rs.r_unit.is_some() {
        Dimension::Consistent
    } else {
        Dimension::Indeterminate
    };
    let mut coefficient_units = Vec::with_capacity(law.terms.len());
    for t in &law.terms {
        match t.unit(&rs.features) {
            Ok(u) => coefficient_units.push(rs.r_unit.map(|ru| ru.mul(u.inv()).to_string())),
            Err(d) => {
                coefficient_units.push(None);
                dimension = match (dimension, d) {
                    (Dimension::Inconsistent, _) | (_, Dimension::Inconsistent) => Dimension::Inconsistent,
                    _ => Dimension::Indeterminate,
                };
            }
        }
    }
    let holdout_r2 = r2_on(law, rs, &rs.holdout);
    Validation {
        dimension,
        coefficient_units,
        holdout_r2,
        validated: dimension == Dimension::Consistent && holdout_r2 >= HOLDOUT_R2_MIN,
    }
}

/// Hierarchy level by template: a sum of at least two squares of distinct
/// features with equal-sign weights (linear terms of the same features
/// allowed, from completing the square) is a conservation law (1); any
/// derivative feature makes it a dynamics law (2); a one-sided hinge is a
/// bound (3); everything else is empirical (4).
pub fn assign_level(terms: &[Expr], coefficients: &[f64], feats: &[Feature]) -> u8 {
    let squares: Vec<(usize, f64)> = terms
        .iter()
        .zip(coefficients)
        .filter_map(|(t, &c)| t.bare_square().map(|i| (i, c)))
        .collect();
    let squared: BTreeSet<usize> = squares.iter().map(|s| s.0).collect();
    let others_ok = terms
        .iter()
        .all(|t| t.bare_square().is_some() || t.bare_var().is_some_and(|i| squared.contains(&i)));
    let same_sign = squares.iter().all(|s| s.1 > 0.0) || squares.iter().all(|s| s.1 < 0.0);
    if squared.len() >= 2 && squared.len() == squares.len() && others_ok && same_sign {
        return 1;
    }
    if terms.iter().any(|t| t.uses_kind(feats, FeatureKind::Derivative)) {
        return 2;
    }
    if terms.iter().any(Expr::is_hinge) {
        return 3;
    }
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawRecord {
    pub expression: String,
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub coefficient_units: Vec<Option<String>>,
    pub residual: String,
    pub residual_unit: Option<String>,
    pub level: u8,
    pub complexity: usize,
    pub fit_r2: f64,
    pub holdout_r2: f64,
    pub dimension: Dimension,
    pub validated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub model_hash: String,
}

/// Pack extension proposal written for human review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub patterns: Vec<PatternTest>,
    pub laws: Vec<LawRecord>,
    pub provenance: Provenance,
}

/// Runs pattern extraction, candidate search and validation end to end.
pub fn discover(rs: &ResidualSet, pcfg: &PatternConfig, scfg: &SearchConfig, provenance: Provenance) -> Result<DiscoveryReport> {
    let patterns = extract_patterns(rs, pcfg)?;
    let flags = flagged(&patterns);
    let laws = if flags.is_empty() {
        Vec::new()
    } else {
        fit_candidates(rs, &flags, scfg)?
    };
    let laws = laws
        .iter()
        .map(|l| {
            let v = validate(l, rs);
            LawRecord {
                expression: l.expression.clone(),
                terms: l.term_strings.clone(),
                coefficients: std::iter::once(l.intercept).chain(l.coefficients.iter().copied()).collect(),
                coefficient_units: std::iter::once(rs.r_unit.map(|u| u.to_string())).chain(v.coefficient_units).collect(),
                residual: rs.r_name.clone(),
                residual_unit: rs.r_unit.map(|u| u.to_string()),
                level: l.level,
                complexity: l.complexity,
                fit_r2: l.fit_r2,
                holdout_r2: v.holdout_r2,
                dimension: v.dimension,
                validated: v.validated,
            }
        })
        .collect();
    Ok(DiscoveryReport {
        patterns,
        laws,
        provenance,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn feature(name: &str, kind: FeatureKind, unit: Option<Unit>, values: Vec<f64>) -> Feature {
        Feature {
            name: name.into(),
            kind,
            unit,
            values,
        }
    }

    /// Rows with features `x` (m), `v` (m/s) and condition `c` (1).
    pub(crate) fn planted(seed: u64, n: usize, law: impl Fn(f64, f64, f64) -> f64, noise: f64) -> ResidualSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Unit::base(0);
        let s = Unit::base(1);
        let mut cols = [Vec::new(), Vec::new(), Vec::new()];
        let mut r = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random_range(-1.0..1.0);
            let v: f64 = rng.random_range(-1.0..1.0);
            let c: f64 = rng.random_range(0.0..1.0);
            r.push(law(x, v, c) + noise * rng.sample::<f64, _>(StandardNormal));
            cols[0].push(x);
            cols[1].push(v);
            cols[2].push(c);
        }
        let [x, v, c] = cols;
        let feats = vec![
            feature("x", FeatureKind::State, Some(m), x),
            feature("v", FeatureKind::State, Some(m.mul(s.inv())), v),
            feature("c", FeatureKind::Condition, Some(Unit::ONE), c),
        ];
        let groups: Vec<usize> = (0..n).collect();
        ResidualSet::new(feats, r, "r", Some(m), &groups, seed).unwrap()
    }

    #[test]
    fn residuals_of_perfect_and_offset_models() {
        let osc = crate::constraints::OscillatorPack::default();
        let truth: Vec<Tensor<f64>> = (0..4).map(|i| osc.solve(0.1 * i as f64, 1.0, 0.0, 20).unwrap()).collect();
        let conds: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64, 1.0, 0.0]).collect();
        let layout = FeatureLayout::oscillator(osc.dt);
        let rs = compute_residuals(&truth, &truth, &conds, 0, &layout, 1).unwrap();
        assert!(rs.r.iter().all(|&v| v == 0.0));
        assert_eq!(rs.len(), 80);
        assert_eq!(rs.features.len(), 7);
        let shifted: Vec<Tensor<f64>> = truth.iter().map(|t| t.map(|v| v + 0.3)).collect();
        let rs = compute_residuals(&truth, &shifted, &conds, 1, &layout, 1).unwrap();
        assert!(rs.r.iter().all(|&v| (v + 0.3).abs() < 1e-12));
        assert_eq!(rs.features[3].unit.unwrap().to_string(), "m s^-2");
        assert!(compute_residuals(&truth, &truth, &conds, 2, &layout, 1).is_err());
        let short = vec![truth[0].narrow0(0, 10).unwrap(); 4];
        assert!(compute_residuals(&truth, &short, &conds, 0, &layout, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_grouped() {
        let rs = planted(3, 100, |x, _, _| x, 0.0);
        let fit: BTreeSet<_> = rs.fit.iter().collect();
        assert!(rs.holdout.iter().all(|i| !fit.contains(i)));
        assert_eq!(rs.fit.len() + rs.holdout.len(), 100);
        assert_eq!(rs.fit.len(), 50);

        let groups: Vec<usize> = (0..40).map(|i| i / 10).collect();
        let f = vec![feature("x", FeatureKind::State, None, vec![0.0; 40])];
        let rs = ResidualSet::new(f, vec![0.0; 40], "r", None, &groups, 9).unwrap();
        let fit_groups: BTreeSet<usize> = rs.fit.iter().map(|&i| groups[i]).collect();
        assert!(rs.holdout.iter().all(|&i| !fit_groups.contains(&groups[i])));
    }

    #[test]
    fn patterns_planted_and_null() {
        let rs = planted(1, 400, |x, _, _| 0.5 * x * x, 0.01);
        let tests = extract_patterns(&rs, &PatternConfig::default()).unwrap();
        assert_eq!(flagged(&tests), vec![0]);

        let rs = planted(2, 400, |_, _, c| 0.3 * c, 0.01);
        let tests = extract_patterns(&rs, &PatternConfig::default()).unwrap();
        let f = flagged(&tests);
        assert!(!f.is_empty() && f.iter().all(|&j| rs.features[j].kind == FeatureKind::Condition));

        let small = planted(4, 40, |_, _, _| 0.0, 1.0);
        assert!(extract_patterns(&small, &PatternConfig::default()).is_err());
    }

    #[test]
    fn white_noise_rarely_flags() {
        let mut hits = 0;
        for seed in 0..20 {
            let rs = planted(100 + seed, 200, |_, _, _| 0.0, 1.0);
            let cfg = PatternConfig {
                seed,
                ..Default::default()
            };
            hits += flagged(&extract_patterns(&rs, &cfg).unwrap()).len();
        }
        // Expected count is below 20 * 3 * 0.01 / 3 = 0.2.
        assert!(hits <= 1, "{hits}");
    }

    #[test]
    fn zero_residual_yields_no_candidates() {
        let rs = planted(5, 100, |_, _, _| 0.0, 0.0);
        assert!(flagged(&extract_patterns(&rs, &PatternConfig::default()).unwrap()).is_empty());
        let laws = fit_candidates(&rs, &[0, 1, 2], &SearchConfig::default()).unwrap();
        assert!(laws.is_empty());
    }

    #[test]
    fn units_examples() {
        let m = Unit::base(0);
        let s = Unit::base(1);
        let feats = vec![
            feature("x", FeatureKind::State, Some(m), vec![1.0; 4]),
            feature("t", FeatureKind::State, Some(s), vec![1.0; 4]),
            feature("q", FeatureKind::State, None, vec![1.0; 4]),
        ];
        let law = |terms: Vec<Expr>| {
            let k = terms.len();
            CandidateLaw {
                term_strings: terms.iter().map(|t| t.prefix(&feats)).collect(),
                expression: String::new(),
                complexity: law_complexity(&terms),
                terms,
                intercept: 0.0,
                coefficients: vec![1.0; k],
                score: 0.0,
                fit_r2: 1.0,
                holdout_r2: 1.0,
                level: 4,
            }
        };
        let rs = ResidualSet::new(feats.clone(), vec![0.0, 1.0, 0.0, 1.0], "r", Some(m), &[0, 1, 2, 3], 0).unwrap();
        let bad = validate(&law(vec![Expr::Add(vec![Expr::var(0), Expr::var(1)])]), &rs);
        assert_eq!(bad.dimension, Dimension::Inconsistent);
        assert!(!bad.validated);
        let unknown = validate(&law(vec![Expr::var(2)]), &rs);
        assert_eq!(unknown.dimension, Dimension::Indeterminate);
        assert!(!unknown.validated);
        let ok = validate(&law(vec![Expr::sq(Expr::var(0))]), &rs);
        assert_eq!(ok.dimension, Dimension::Consistent);
        assert_eq!(ok.coefficient_units, vec![Some("m^-1".to_string())]);
    }

    #[test]
    fn level_templates() {
        let one = Some(Unit::ONE);
        let feats = vec![
            feature("temp_norm", FeatureKind::State, one, vec![]),
            feature("capacity_norm", FeatureKind::State, one, vec![]),
            feature("d_capacity_norm", FeatureKind::Derivative, one, vec![]),
            feature("prefactor", FeatureKind::Condition, one, vec![]),
            feature("soh", FeatureKind::State, one, vec![]),
        ];
        // 0.5 T~^2 + C~^2 = const
        let sos = [Expr::sq(Expr::var(0)), Expr::sq(Expr::var(1))];
        assert_eq!(assign_level(&sos, &[0.5, 1.0], &feats), 1);
        assert_eq!(assign_level(&[sos[0].clone(), sos[1].clone(), Expr::var(0)], &[0.5, 1.0, -0.2], &feats), 1);
        assert_eq!(assign_level(&sos, &[0.5, -1.0], &feats), 4);
        assert_eq!(assign_level(&sos[..1], &[0.5], &feats), 4);
        // dC/dt + A exp(-1/T)
        let arr = Expr::Mul(vec![Expr::var(3), Expr::Exp(Box::new(Expr::Inv(Box::new(Expr::var(0)))))]);
        assert_eq!(assign_level(&[Expr::var(2), arr], &[1.0, 1.0], &feats), 2);
        let bound = Expr::Hinge {
            arg: Box::new(Expr::var(4)),
            knot: 1.0,
            upper: true,
        };
        assert_eq!(assign_level(&[bound], &[1.0], &feats), 3);
        assert_eq!(assign_level(&[Expr::var(3)], &[1.0], &feats), 4);
    }
}
