//! Discrete causal oracle.
//!
//! The learning pipeline rests on an identity between the intervened and the
//! direct conditional label distribution when class content and style
//! interventions are independent. This module makes that identity executable
//! on finite probability tables, plus a two-path measurement of the gap
//! introduced by moving an expectation inside a softmax.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::softmax;
use rand::Rng;

/// Finite joint table P(class, style, label) with an optional independence
/// guarantee between class and style.
#[derive(Debug, Clone)]
pub struct DiscreteScm {
    classes: usize,
    styles: usize,
    labels: usize,
    /// Row-major joint: index (c, z, y) -> c * styles * labels + z * labels + y.
    joint: Vec<f64>,
    independent: bool,
}

const MASS_TOL: f64 = 1e-12;

impl DiscreteScm {
    pub fn new(
        classes: usize,
        styles: usize,
        labels: usize,
        joint: Vec<f64>,
        independent: bool,
    ) -> Result<Self> {
        if classes == 0 || styles == 0 || labels == 0 {
            return Err(Error::Domain("all table dimensions must be >= 1".into()));
        }
        if joint.len() != classes * styles * labels {
            return Err(Error::Dimension(format!(
                "joint table needs {} cells, got {}",
                classes * styles * labels,
                joint.len()
            )));
        }
        if joint.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain("probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("total mass {total} != 1")));
        }
        let scm = Self {
            classes,
            styles,
            labels,
            joint,
            independent,
        };
        if independent {
            // The marginal product identity must hold cell-wise.
            for c in 0..classes {
                for z in 0..styles {
                    let lhs = scm.class_style_mass(c, z);
                    let rhs = scm.class_mass(c) * scm.style_mass(z);
                    if (lhs - rhs).abs() > MASS_TOL {
                        return Err(Error::Domain(format!(
                            "independence violated at (c={c}, z={z}): {lhs} vs {rhs}"
                        )));
                    }
                }
            }
        }
        Ok(scm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn styles(&self) -> usize {
        self.styles
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn is_independent(&self) -> bool {
        self.independent
    }

    fn cell(&self, c: usize, z: usize, y: usize) -> f64 {
        self.joint[c * self.styles * self.labels + z * self.labels + y]
    }

    fn class_style_mass(&self, c: usize, z: usize) -> f64 {
        (0..self.labels).map(|y| self.cell(c, z, y)).sum()
    }

    fn class_mass(&self, c: usize) -> f64 {
        (0..self.styles).map(|z| self.class_style_mass(c, z)).sum()
    }

    fn style_mass(&self, z: usize) -> f64 {
        (0..self.classes)
            .map(|c| self.class_style_mass(c, z))
            .sum()
    }
}

/// Normalized positive draws: a Dirichlet(1)-style random distribution.
fn random_distribution(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Exponential draws normalized; strictly positive with probability 1.
    let mut out: Vec<f64> = (0..len)
        .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Samples a random SCM. With `independent` set, P(class), P(style), and
/// P(label | class, style) are drawn separately and composed, so the product
/// identity holds by construction; otherwise the joint is arbitrary.
pub fn random_scm(
    classes: usize,
    styles: usize,
    labels: usize,
    independent: bool,
    rng: &mut impl Rng,
) -> Result<DiscreteScm> {
    if classes == 0 || styles == 0 || labels == 0 {
        return Err(Error::Domain("all table dimensions must be >= 1".into()));
    }
    let joint = if independent {
        let p_class = random_distribution(classes, rng);
        let p_style = random_distribution(styles, rng);
        let mut joint = Vec::with_capacity(classes * styles * labels);
        for &pc in &p_class {
            for &pz in &p_style {
                let conditional = random_distribution(labels, rng);
                for &py in &conditional {
                    joint.push(pc * pz * py);
                }
            }
        }
        joint
    } else {
        random_distribution(classes * styles * labels, rng)
    };
    // Renormalize the composed product exactly; rounding can leave the sum a
    // few ulps off 1.
    let total: f64 = joint.iter().sum();
    let joint: Vec<f64> = joint.into_iter().map(|p| p / total).collect();
    DiscreteScm::new(classes, styles, labels, joint, independent)
}

/// Backdoor-adjusted label distribution for class value `c`:
/// `sum_z P(Y | c, z) P(z)` by exact table arithmetic.
pub fn do_adjusted(scm: &DiscreteScm, c: usize) -> Result<Vec<f64>> {
    if c >= scm.classes() {
        return Err(Error::Domain(format!("class value {c} out of range")));
    }
    let mut out = vec![0.0; scm.labels()];
    for z in 0..scm.styles() {
        let p_style = scm.style_mass(z);
        if p_style <= 0.0 {
            continue;
        }
        let p_cz = scm.class_style_mass(c, z);
        if p_cz <= 0.0 {
            return Err(Error::SingularConditional(format!(
                "P(c={c}, z={z}) = 0 while P(z={z}) > 0"
            )));
        }
        for (y, o) in out.iter_mut().enumerate() {
            *o += scm.cell(c, z, y) / p_cz * p_style;
        }
    }
    Ok(out)
}

/// Direct conditional `P(Y | c) = P(Y, c) / P(c)`, the joint summed over all
/// styles.
pub fn direct_conditional(scm: &DiscreteScm, c: usize) -> Result<Vec<f64>> {
    if c >= scm.classes() {
        return Err(Error::Domain(format!("class value {c} out of range")));
    }
    let p_c = scm.class_mass(c);
    if p_c <= 0.0 {
        return Err(Error::SingularConditional(format!("P(c={c}) = 0")));
    }
    let out = (0..scm.labels())
        .map(|y| {
            (0..scm.styles())
                .map(|z| scm.cell(c, z, y))
                .sum::<f64>()
                / p_c
        })
        .collect();
    Ok(out)
}

/// Result of one identity check.
#[derive(Debug, Clone, Copy)]
pub struct IdentityVerdict {
    pub max_deviation: f64,
    pub pass: bool,
}

/// Max deviation between the adjusted and the direct conditional over every
/// (class value, label) pair, passing iff it stays within `tol`. Requires
/// the independence flag; the identity is exactly what independence buys.
pub fn verify_identity(scm: &DiscreteScm, tol: f64) -> Result<IdentityVerdict> {
    if !scm.is_independent() {
        return Err(Error::Domain(
            "identity check requires an independence-flagged table".into(),
        ));
    }
    let mut max_dev = 0.0f64;
    for c in 0..scm.classes() {
        let adjusted = do_adjusted(scm, c)?;
        let direct = direct_conditional(scm, c)?;
        for (a, d) in adjusted.iter().zip(&direct) {
            max_dev = max_dev.max((a - d).abs());
        }
    }
    Ok(IdentityVerdict {
        max_deviation: max_dev,
        pass: max_dev <= tol,
    })
}

/// Outcome of a randomized identity-verification run.
#[derive(Debug, Clone)]
pub struct OracleSummary {
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Runs `trials` random independent tables with dimensions sampled in
/// `[1, max_dim]` and reports the worst deviation.
pub fn run_identity_trials(
    trials: usize,
    max_classes: usize,
    max_styles: usize,
    max_labels: usize,
    tolerance: f64,
    seed: u64,
) -> Result<OracleSummary> {
    if trials == 0 {
        return Err(Error::Domain("trial count must be >= 1".into()));
    }
    let mut rng = crate::rng::substream(seed, "oracle.trials", 0);
    let mut max_deviation = 0.0f64;
    for _ in 0..trials {
        let c = rng.random_range(1..=max_classes.max(1));
        let z = rng.random_range(1..=max_styles.max(1));
        let y = rng.random_range(1..=max_labels.max(1));
        let scm = random_scm(c, z, y, true, &mut rng)?;
        max_deviation = max_deviation.max(verify_identity(&scm, tolerance)?.max_deviation);
    }
    Ok(OracleSummary {
        trials,
        max_deviation,
        tolerance,
        pass: max_deviation <= tolerance,
    })
}

/// `||mean_n softmax(W g_n + b) - softmax(W mean_n g_n + b)||_inf`: the gap
/// opened by approximating the expectation inside the softmax.
pub fn nwgm_gap(w: &DenseMatrix, bias: &[f64], g_outputs: &[Vec<f64>]) -> Result<f64> {
    if g_outputs.is_empty() {
        return Err(Error::Domain("nwgm gap needs at least one output".into()));
    }
    let classes = w.rows();
    if bias.len() != classes {
        return Err(Error::Dimension("bias length != classifier rows".into()));
    }
    let dim = w.cols();
    let n = g_outputs.len() as f64;
    let mut mean_softmax = vec![0.0; classes];
    let mut mean_g = vec![0.0; dim];
    for g in g_outputs {
        if g.len() != dim {
            return Err(Error::Dimension("g output dim != classifier cols".into()));
        }
        let logits: Vec<f64> = (0..classes)
            .map(|k| crate::matrix::dot(w.row(k), g) + bias[k])
            .collect();
        for (acc, p) in mean_softmax.iter_mut().zip(softmax(&logits)) {
            *acc += p / n;
        }
        for (acc, &v) in mean_g.iter_mut().zip(g) {
            *acc += v / n;
        }
    }
    let mean_logits: Vec<f64> = (0..classes)
        .map(|k| crate::matrix::dot(w.row(k), &mean_g) + bias[k])
        .collect();
    let softmax_of_mean = softmax(&mean_logits);
    Ok(mean_softmax
        .iter()
        .zip(&softmax_of_mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max))
}
