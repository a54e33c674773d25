//! Evaluation statistics: balanced accuracy, squared distance correlation,
//! equalized-odds gap, per-group accuracy, and the McNemar paired test.
//!
//! All functions are pure. `dcor2` uses the biased V-statistic form of the
//! squared distance correlation: pairwise Euclidean distance matrices are
//! double-centered and correlated.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::synthgen::stream_rng;

/// Mean of per-class recalls. Both classes must be present.
pub fn balanced_accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid("preds", "length mismatch with labels"));
    }
    let mut counts = [0usize; 2];
    let mut correct = [0usize; 2];
    for (&p, &y) in preds.iter().zip(labels) {
        let cls = y as usize;
        counts[cls] += 1;
        if p == y {
            correct[cls] += 1;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::UndefinedMetric(
            "balanced accuracy needs both classes present".into(),
        ));
    }
    Ok(0.5 * (correct[0] as f64 / counts[0] as f64 + correct[1] as f64 / counts[1] as f64))
}

fn pairwise_distances(x: &[f64], dim: usize, n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for j in 0..n {
        for k in (j + 1)..n {
            let mut acc = 0.0;
            for t in 0..dim {
                let diff = x[j * dim + t] - x[k * dim + t];
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            d[j * n + k] = dist;
            d[k * n + j] = dist;
        }
    }
    d
}

fn double_center(d: &mut [f64], n: usize) {
    let mut row_means = vec![0.0; n];
    for j in 0..n {
        row_means[j] = d[j * n..(j + 1) * n].iter().sum::<f64>() / n as f64;
    }
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for j in 0..n {
        for k in 0..n {
            d[j * n + k] += grand - row_means[j] - row_means[k];
        }
    }
}

/// Squared distance correlation between two samples of vectors, V-statistic
/// form. `x` is `n × dim_x` row-major, `y` is `n × dim_y`. Returns 0 when
/// either distance variance vanishes (constant input).
pub fn dcor2(x: &[f64], dim_x: usize, y: &[f64], dim_y: usize) -> Result<f64> {
    if dim_x == 0 || dim_y == 0 {
        return Err(Error::invalid("dim", "vector dimensions must be nonzero"));
    }
    if x.len() % dim_x != 0 || y.len() % dim_y != 0 {
        return Err(Error::ShapeMismatch(
            "data length is not a multiple of the vector dimension".into(),
        ));
    }
    let n = x.len() / dim_x;
    if y.len() / dim_y != n {
        return Err(Error::ShapeMismatch(
            "x and y must contain the same number of vectors".into(),
        ));
    }
    if n < 2 {
        return Err(Error::invalid("n", "need at least two observations"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("data", "inputs must be finite"));
    }

    let mut a = pairwise_distances(x, dim_x, n);
    let mut b = pairwise_distances(y, dim_y, n);
    double_center(&mut a, n);
    double_center(&mut b, n);

    let m = (n * n) as f64;
    let mut dcov = 0.0;
    let mut dvar_x = 0.0;
    let mut dvar_y = 0.0;
    for (av, bv) in a.iter().zip(&b) {
        dcov += av * bv;
        dvar_x += av * av;
        dvar_y += bv * bv;
    }
    dcov /= m;
    dvar_x /= m;
    dvar_y /= m;

    let denom = (dvar_x * dvar_y).sqrt();
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((dcov / denom).clamp(0.0, 1.0))
}

/// `dcor2` on a seeded subsample of at most `max_n` points, bounding the
/// O(n²) distance matrices.
pub fn dcor2_subsampled(
    x: &[f64],
    dim_x: usize,
    y: &[f64],
    dim_y: usize,
    max_n: usize,
    seed: u64,
) -> Result<f64> {
    let n = if dim_x > 0 { x.len() / dim_x } else { 0 };
    if max_n == 0 {
        return Err(Error::invalid("max_n", "must be nonzero"));
    }
    if n <= max_n {
        return dcor2(x, dim_x, y, dim_y);
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0x6463_6f72);
    indices.shuffle(&mut rng);
    indices.truncate(max_n);
    indices.sort_unstable();
    let mut xs = Vec::with_capacity(max_n * dim_x);
    let mut ys = Vec::with_capacity(max_n * dim_y);
    for &i in &indices {
        xs.extend_from_slice(&x[i * dim_x..(i + 1) * dim_x]);
        ys.extend_from_slice(&y[i * dim_y..(i + 1) * dim_y]);
    }
    dcor2(&xs, dim_x, &ys, dim_y)
}

/// Equalized-odds gap: for each label class, the max−min spread of
/// group-conditional correct-classification rates, averaged over classes.
/// Groups absent from a class are skipped; a class with fewer than two
/// populated groups contributes zero spread.
pub fn eo_gap(preds: &[bool], labels: &[bool], groups: &[u32]) -> Result<f64> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::invalid("preds", "length mismatch"));
    }
    let distinct: std::collections::BTreeSet<u32> = groups.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("groups", "need at least two distinct groups"));
    }

    let mut total_spread = 0.0;
    let mut classes = 0.0;
    for label in [false, true] {
        let mut cell: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
            if y != label {
                continue;
            }
            let e = cell.entry(g).or_insert((0, 0));
            e.1 += 1;
            if p == y {
                e.0 += 1;
            }
        }
        if cell.is_empty() {
            continue;
        }
        classes += 1.0;
        if cell.len() < 2 {
            continue;
        }
        let rates: Vec<f64> = cell
            .values()
            .map(|&(correct, n)| correct as f64 / n as f64)
            .collect();
        let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        total_spread += max - min;
    }
    if classes == 0.0 {
        return Err(Error::UndefinedMetric("no labelled samples".into()));
    }
    Ok(total_spread / classes)
}

/// Plain accuracy restricted to each group. Groups with no members are
/// simply absent from the map.
pub fn per_group_accuracy(
    preds: &[bool],
    labels: &[bool],
    groups: &[u32],
) -> Result<BTreeMap<u32, f64>> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::invalid("preds", "length mismatch"));
    }
    let mut cell: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        let e = cell.entry(g).or_insert((0, 0));
        e.1 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    Ok(cell
        .into_iter()
        .map(|(g, (correct, n))| (g, correct as f64 / n as f64))
        .collect())
}

/// Result of the McNemar paired test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McNemarResult {
    pub chi2: f64,
    pub p_value: f64,
    /// True when both discordant counts are zero and the test carries no
    /// information.
    pub degenerate: bool,
}

/// McNemar test without continuity correction on paired correctness
/// indicators: χ² = (b−c)²/(b+c) with b, c the discordant counts, p from the
/// χ²₁ upper tail.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::invalid("correct_a", "length mismatch"));
    }
    let mut b = 0u64;
    let mut c = 0u64;
    for (&a, &bb) in correct_a.iter().zip(correct_b) {
        match (a, bb) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

/// McNemar statistic straight from the discordant counts.
pub fn mcnemar_from_counts(b: u64, c: u64) -> McNemarResult {
    if b + c == 0 {
        return McNemarResult {
            chi2: 0.0,
            p_value: 1.0,
            degenerate: true,
        };
    }
    let diff = b as f64 - c as f64;
    let chi2 = diff * diff / (b + c) as f64;
    McNemarResult {
        chi2,
        p_value: chi2_survival_1df(chi2),
        degenerate: false,
    }
}

/// Upper-tail probability of the χ² distribution with one degree of freedom.
pub fn chi2_survival_1df(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Full evaluation report for one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub bacc: f64,
    /// dcor² between the protected attribute and the latent vectors.
    pub dcor2_latent: f64,
    /// dcor² between the protected attribute and the predicted probability.
    pub dcor2_output: f64,
    pub eo_gap: f64,
    pub per_group_acc: BTreeMap<u32, f64>,
    pub n_eval: usize,
}

impl MetricsReport {
    pub fn csv_header(groups: &[u32]) -> String {
        let mut cols = vec![
            "model".to_string(),
            "seed".to_string(),
            "lambda".to_string(),
            "bacc".to_string(),
            "dcor2_latent".to_string(),
            "dcor2_output".to_string(),
            "eo_gap".to_string(),
        ];
        for g in groups {
            cols.push(format!("acc_group{g}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self, model: &str, seed: u64, lambda: f64) -> String {
        let mut cols = vec![
            model.to_string(),
            seed.to_string(),
            format!("{lambda}"),
            format!("{}", self.bacc),
            format!("{}", self.dcor2_latent),
            format!("{}", self.dcor2_output),
            format!("{}", self.eo_gap),
        ];
        for acc in self.per_group_acc.values() {
            cols.push(format!("{acc}"));
        }
        cols.join(",")
    }

    pub fn text_report(&self, model: &str, seed: u64, lambda: f64) -> String {
        let mut s = String::new();
        s.push_str(&format!("model:        {model}\n"));
        s.push_str(&format!("seed:         {seed}\n"));
        s.push_str(&format!("lambda:       {lambda}\n"));
        s.push_str(&format!("n_eval:       {}\n", self.n_eval));
        s.push_str(&format!("bacc:         {:.4}\n", self.bacc));
        s.push_str(&format!("dcor2_latent: {:.4}\n", self.dcor2_latent));
        s.push_str(&format!("dcor2_output: {:.4}\n", self.dcor2_output));
        s.push_str(&format!("eo_gap:       {:.4}\n", self.eo_gap));
        for (g, acc) in &self.per_group_acc {
            s.push_str(&format!("acc_group{g}:   {acc:.4}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn balanced_accuracy_hand_cases() {
        // Perfect predictions.
        let labels = vec![true, false, true, false];
        assert_eq!(balanced_accuracy(&labels, &labels).unwrap(), 1.0);

        // Constant-positive predictor: recall 1 on positives, 0 on negatives.
        let preds = vec![true; 4];
        assert_eq!(balanced_accuracy(&preds, &labels).unwrap(), 0.5);

        // Recalls 0.9 and 0.7 -> 0.8: 10 positives with 9 correct,
        // 10 negatives with 7 correct.
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            labels.push(true);
            preds.push(i < 9);
        }
        for i in 0..10 {
            labels.push(false);
            preds.push(i < 3); // 3 wrong (predicted positive), 7 correct
        }
        let bacc = balanced_accuracy(&preds, &labels).unwrap();
        assert!((bacc - 0.8).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_requires_both_classes() {
        let preds = vec![true, false];
        assert!(matches!(
            balanced_accuracy(&preds, &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    /// Literal Székely formula, written independently of the production path.
    fn dcor2_bruteforce(x: &[f64], dim_x: usize, y: &[f64], dim_y: usize) -> f64 {
        let n = x.len() / dim_x;
        let dist = |data: &[f64], dim: usize, j: usize, k: usize| -> f64 {
            (0..dim)
                .map(|t| (data[j * dim + t] - data[k * dim + t]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let center = |data: &[f64], dim: usize| -> Vec<Vec<f64>> {
            let mut m = vec![vec![0.0; n]; n];
            for j in 0..n {
                for k in 0..n {
                    m[j][k] = dist(data, dim, j, k);
                }
            }
            let row: Vec<f64> = (0..n).map(|j| m[j].iter().sum::<f64>() / n as f64).collect();
            let grand = row.iter().sum::<f64>() / n as f64;
            let mut out = vec![vec![0.0; n]; n];
            for j in 0..n {
                for k in 0..n {
                    out[j][k] = m[j][k] - row[j] - row[k] + grand;
                }
            }
            out
        };
        let a = center(x, dim_x);
        let b = center(y, dim_y);
        let mut dcov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for j in 0..n {
            for k in 0..n {
                dcov += a[j][k] * b[j][k];
                vx += a[j][k] * a[j][k];
                vy += b[j][k] * b[j][k];
            }
        }
        let m = (n * n) as f64;
        let denom = ((vx / m) * (vy / m)).sqrt();
        if denom <= 0.0 {
            0.0
        } else {
            (dcov / m) / denom
        }
    }

    #[test]
    fn dcor2_agrees_with_bruteforce_oracle() {
        let mut rng = stream_rng(21, 0);
        for &(n, dx, dy) in &[(5usize, 1usize, 1usize), (20, 3, 2), (50, 10, 1)] {
            let x: Vec<f64> = (0..n * dx).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n * dy)
                .map(|i| (x[i % (n * dx)] * 0.7 + rng.gen_range(-1.0..1.0)))
                .collect();
            let fast = dcor2(&x, dx, &y, dy).unwrap();
            let slow = dcor2_bruteforce(&x, dx, &y, dy);
            assert!((fast - slow).abs() < 1e-10, "n={n}: {fast} vs {slow}");
        }
    }

    #[test]
    fn dcor2_self_dependence_and_degenerate_cases() {
        let x = vec![1.0, 2.0, 5.0, -3.0, 0.5];
        assert!((dcor2(&x, 1, &x, 1).unwrap() - 1.0).abs() < 1e-12);

        let constant = vec![2.0; 5];
        assert_eq!(dcor2(&constant, 1, &x, 1).unwrap(), 0.0);

        assert!(dcor2(&x[..1], 1, &x[..1], 1).is_err());
        assert!(dcor2(&[f64::NAN, 1.0], 1, &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn dcor2_null_distribution_is_small() {
        // 1000 independent standard-normal pairs (Box-Muller from uniforms).
        let mut rng = stream_rng(33, 1);
        let mut gauss = || {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let n = 1000;
        let x: Vec<f64> = (0..n).map(|_| gauss()).collect();
        let y: Vec<f64> = (0..n).map(|_| gauss()).collect();
        let d = dcor2(&x, 1, &y, 1).unwrap();
        assert!(d < 0.02, "null dcor2 {d}");
    }

    proptest! {
        #[test]
        fn dcor2_is_symmetric(seed in 0u64..500) {
            let mut rng = stream_rng(seed, 2);
            let n = 12;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = dcor2(&x, 1, &y, 2).unwrap();
            let b = dcor2(&y, 2, &x, 1).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn dcor2_invariant_under_similarity_transforms(seed in 0u64..200) {
            let mut rng = stream_rng(seed, 3);
            let n = 15;
            let dim = 3;
            let x: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|i| x[i * dim] - 0.3 * x[i * dim + 2] + rng.gen_range(-0.5..0.5)).collect();

            // Householder reflection Q = I - 2uu^T (orthogonal), translation a, scale c.
            let mut u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            for v in u.iter_mut() { *v /= norm; }
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c: f64 = rng.gen_range(0.1..4.0);

            let mut xt = vec![0.0; n * dim];
            for i in 0..n {
                let xi = &x[i * dim..(i + 1) * dim];
                let dot: f64 = u.iter().zip(xi).map(|(uv, xv)| uv * xv).sum();
                for t in 0..dim {
                    let q = xi[t] - 2.0 * dot * u[t];
                    xt[i * dim + t] = a[t] + c * q;
                }
            }

            let base = dcor2(&x, dim, &y, 1).unwrap();
            let transformed = dcor2(&xt, dim, &y, 1).unwrap();
            prop_assert!((base - transformed).abs() < 1e-10, "{base} vs {transformed}");
        }
    }

    #[test]
    fn eo_gap_hand_cases() {
        // y=1: group rates 0.9 (9/10 correct) and 0.7; y=0: both 0.8.
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        let mut push_cell = |label: bool, group: u32, n: usize, correct: usize| {
            for i in 0..n {
                labels.push(label);
                groups.push(group);
                preds.push(if i < correct { label } else { !label });
            }
        };
        push_cell(true, 0, 10, 9);
        push_cell(true, 1, 10, 7);
        push_cell(false, 0, 10, 8);
        push_cell(false, 1, 10, 8);
        let gap = eo_gap(&preds, &labels, &groups).unwrap();
        assert!((gap - 0.1).abs() < 1e-12);

        // Permuting group ids leaves the value unchanged.
        let swapped: Vec<u32> = groups.iter().map(|&g| 1 - g).collect();
        assert_eq!(eo_gap(&preds, &labels, &swapped).unwrap(), gap);
    }

    #[test]
    fn eo_gap_zero_when_rates_identical() {
        // Every (label, group) cell has 4 members, 3 correct: spread 0.
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for label in [false, true] {
            for group in 0..3u32 {
                for i in 0..4 {
                    labels.push(label);
                    groups.push(group);
                    preds.push(if i < 3 { label } else { !label });
                }
            }
        }
        assert_eq!(eo_gap(&preds, &labels, &groups).unwrap(), 0.0);
    }

    #[test]
    fn eo_gap_requires_two_groups() {
        let preds = vec![true, false];
        let labels = vec![true, false];
        assert!(eo_gap(&preds, &labels, &[0, 0]).is_err());
    }

    #[test]
    fn per_group_accuracy_hand_case() {
        // Three groups with 2/4, 3/3, 0/2 correct.
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        let mut push = |group: u32, n: usize, correct: usize| {
            for i in 0..n {
                labels.push(true);
                groups.push(group);
                preds.push(i < correct);
            }
        };
        push(0, 4, 2);
        push(1, 3, 3);
        push(2, 2, 0);
        let acc = per_group_accuracy(&preds, &labels, &groups).unwrap();
        assert_eq!(acc[&0], 0.5);
        assert_eq!(acc[&1], 1.0);
        assert_eq!(acc[&2], 0.0);
        assert_eq!(acc.len(), 3);

        // Perfect predictor maps every group to 1.0.
        let acc = per_group_accuracy(&labels, &labels, &groups).unwrap();
        assert!(acc.values().all(|&v| v == 1.0));
    }

    #[test]
    fn mcnemar_reference_values() {
        // chi2 = 8.257 -> p ~= 0.0040.
        let p = chi2_survival_1df(8.257);
        assert!((p - 0.0040).abs() < 0.0002, "p {p}");

        // b = c -> chi2 = 0, p = 1.
        let r = mcnemar_from_counts(5, 5);
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.degenerate);

        // b=9, c=1 -> chi2 = 6.4, p ~= 0.0114.
        let r = mcnemar_from_counts(9, 1);
        assert!((r.chi2 - 6.4).abs() < 1e-12);
        assert!((r.p_value - 0.0114).abs() < 0.0002, "p {}", r.p_value);

        // Degenerate case.
        let r = mcnemar_from_counts(0, 0);
        assert!(r.degenerate);
        assert_eq!((r.chi2, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn mcnemar_counts_discordant_pairs() {
        let a = vec![true, true, false, true, false, true];
        let b = vec![true, false, true, false, false, false];
        // b (a right, b wrong) = 3; c (a wrong, b right) = 1.
        let r = mcnemar(&a, &b).unwrap();
        assert!((r.chi2 - 4.0 / 4.0).abs() < 1e-12);
        // Symmetry: swapping the models keeps chi2 and p.
        let s = mcnemar(&b, &a).unwrap();
        assert_eq!(r.chi2, s.chi2);
        assert_eq!(r.p_value, s.p_value);
    }

    /// Two-sided exact binomial (mid-p convention): the uncorrected χ² test
    /// approximates this for small counts.
    fn binomial_midp(b: u64, c: u64) -> f64 {
        let n = b + c;
        let pmf = |k: u64| -> f64 {
            // C(n, k) / 2^n computed in log space for stability.
            let mut ln = 0.0;
            for i in 0..k {
                ln += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
            }
            (ln + (n as f64) * (0.5f64).ln()).exp()
        };
        let lo = b.min(c);
        let mut p = 0.0;
        for k in 0..lo {
            p += pmf(k);
        }
        let mid = 2.0 * (p + 0.5 * pmf(lo));
        mid.min(1.0)
    }

    #[test]
    fn mcnemar_matches_exact_binomial_oracle() {
        // The χ²₁ tail is a large-sample approximation: against the exact
        // mid-p binomial it is off by 0.18 at (b,c)=(1,0) and by more than
        // 0.01 whenever discordant counts are tiny or the p-value is large,
        // regardless of implementation. Within the significance-relevant
        // region (b+c ≥ 8, mid-p ≤ 0.1) the exhaustive max deviation is
        // 0.0090, so 0.01 is asserted there.
        let mut checked = 0;
        for n in 8..=20u64 {
            for b in 0..=n {
                let c = n - b;
                let exact = binomial_midp(b, c);
                if exact > 0.1 {
                    continue;
                }
                let approx = mcnemar_from_counts(b, c).p_value;
                assert!(
                    (approx - exact).abs() < 0.01,
                    "b={b} c={c}: chi2 p {approx} vs mid-p {exact}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "region should cover many cells, got {checked}");

        // Documented boundary counterexample: at (1,0) the approximation is
        // inherently far from any exact convention.
        let gap = (mcnemar_from_counts(1, 0).p_value - binomial_midp(1, 0)).abs();
        assert!(gap > 0.1);
    }

    #[test]
    fn report_serialization_round_trip_fields() {
        let mut per_group = BTreeMap::new();
        per_group.insert(0, 0.9);
        per_group.insert(1, 0.8);
        let r = MetricsReport {
            bacc: 0.85,
            dcor2_latent: 0.05,
            dcor2_output: 0.10,
            eo_gap: 0.04,
            per_group_acc: per_group,
            n_eval: 2000,
        };
        let header = MetricsReport::csv_header(&[0, 1]);
        let row = r.csv_row("v_space_ci", 3, 1.0);
        assert_eq!(header.split(',').count(), row.split(',').count());
        assert!(row.starts_with("v_space_ci,3,1,0.85,0.05,0.1,0.04"));
        let text = r.text_report("v_space_ci", 3, 1.0);
        assert!(text.contains("bacc:         0.8500"));
        assert!(text.contains("acc_group1"));
    }
}
