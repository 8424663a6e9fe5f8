//! Structural and functional metrics. Coordinates are in Å.

use crate::error::{Error, Result};
use crate::geometry::Rotation;
use nalgebra::{Matrix3, Vector3};
use std::fmt::Write as _;

/// Least-squares rigid superposition of `p` onto `q`: returns (R, d, rmsd)
/// minimizing Σ‖R·p_i + d − q_i‖².
pub fn kabsch_align(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<(Rotation, Vector3<f64>, f64)> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} points vs {}", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(Error::Length(format!("superposition needs ≥ 3 points, got {}", p.len())));
    }
    let n = p.len() as f64;
    let cp = p.iter().sum::<Vector3<f64>>() / n;
    let cq = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - cp) * (b - cq).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let mut s = svd.singular_values;
    s.as_mut_slice().sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    // a rotation is determined once two directions are; collinear sets are not
    if s[0] <= 1e-12 || s[1] <= 1e-9 * s[0] {
        return Err(Error::DegenerateGeometry(
            "point sets are collinear or coincident; rotation is undetermined".into(),
        ));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let rot = Rotation::from_matrix_unchecked(r);
    let trans = cq - r * cp;
    let msd = p
        .iter()
        .zip(q)
        .map(|(a, b)| (r * a + trans - b).norm_squared())
        .sum::<f64>()
        / n;
    Ok((rot, trans, msd.sqrt()))
}

pub fn rmsd_after_alignment(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<f64> {
    kabsch_align(p, q).map(|(_, _, r)| r)
}

/// d0 = 1.24·(N − 15)^{1/3} − 1.8.
pub fn tm_d0(n: usize) -> f64 {
    1.24 * ((n as f64) - 15.0).cbrt() - 1.8
}

/// Positional TM-score after Kabsch superposition; N ≥ 16.
pub fn tm_score(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<f64> {
    if p.len() < 16 {
        return Err(Error::Length(format!("TM-score needs ≥ 16 residues, got {}", p.len())));
    }
    let (rot, trans, _) = kabsch_align(p, q)?;
    let d0 = tm_d0(p.len());
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = (rot.apply(a) + trans - b).norm();
            1.0 / (1.0 + (d / d0).powi(2))
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Amino-acid recovery.
pub fn aar(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} true residues", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class one-vs-rest precision, recall and F1 (0 when undefined).
pub fn ec_per_class(pred: &[usize], truth: &[usize], class: usize) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == class && t == class).count() as f64;
    let pp = pred.iter().filter(|&&p| p == class).count() as f64;
    let ap = truth.iter().filter(|&&t| t == class).count() as f64;
    let precision = if pp > 0.0 { tp / pp } else { 0.0 };
    let recall = if ap > 0.0 { tp / ap } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Exact-match accuracy and macro precision/recall/F1 over the EC classes
/// (1..7) that occur among predictions or labels.
pub fn ec_metrics(pred: &[usize], truth: &[usize]) -> Result<EcMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} true EC labels", pred.len(), truth.len())));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| !(1..=7).contains(&c)) {
        return Err(Error::InvalidTarget(format!("EC label {bad} is not in 1..7")));
    }
    let classes: Vec<usize> = (1..=7).filter(|c| pred.contains(c) || truth.contains(c)).collect();
    let mut sums = (0.0, 0.0, 0.0);
    for &c in &classes {
        let (p, r, f) = ec_per_class(pred, truth, c);
        sums.0 += p;
        sums.1 += r;
        sums.2 += f;
    }
    let k = classes.len() as f64;
    Ok(EcMetrics {
        accuracy: pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64,
        precision: sums.0 / k,
        recall: sums.1 / k,
        f1: sums.2 / k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub top1: f64,
    pub topk: f64,
    pub median: f64,
    /// Groups smaller than k (their whole group was used).
    pub short_groups: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per group: best value, mean of the best k, median; then means over groups.
pub fn aggregate_topk(groups: &[Vec<f64>], k: usize, better: Better) -> Result<TopK> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) || k == 0 {
        return Err(Error::Length("aggregation needs k ≥ 1 and nonempty groups".into()));
    }
    let mut out = TopK {
        top1: 0.0,
        topk: 0.0,
        median: 0.0,
        short_groups: 0,
    };
    for g in groups {
        let mut v = g.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        if better == Better::Higher {
            v.reverse();
        }
        let take = k.min(v.len());
        if take < k {
            out.short_groups += 1;
        }
        out.top1 += v[0];
        out.topk += v[..take].iter().sum::<f64>() / take as f64;
        let mut asc = g.clone();
        asc.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        out.median += median(&asc);
    }
    let n = groups.len() as f64;
    out.top1 /= n;
    out.topk /= n;
    out.median /= n;
    Ok(out)
}

/// Metrics of one generated pocket against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub reaction: String,
    pub sample: String,
    pub crmsd: f64,
    pub tm: Option<f64>,
    pub aar: f64,
    pub ec_pred: usize,
    pub ec_true: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub crmsd: TopK,
    pub tm: Option<TopK>,
    pub aar: TopK,
    pub ec: EcMetrics,
    pub per_class: Vec<(usize, f64, f64, f64)>,
    pub k: usize,
}

pub fn build_report(samples: Vec<SampleMetrics>, k: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Length("no samples to evaluate".into()));
    }
    let mut reactions: Vec<&str> = samples.iter().map(|s| s.reaction.as_str()).collect();
    reactions.sort_unstable();
    reactions.dedup();
    let group = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| -> Vec<Vec<f64>> {
        reactions
            .iter()
            .map(|r| samples.iter().filter(|s| s.reaction == *r).filter_map(f).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect()
    };
    let crmsd = aggregate_topk(&group(&|s| Some(s.crmsd)), k, Better::Lower)?;
    let tm_groups = group(&|s| s.tm);
    let tm = if tm_groups.is_empty() {
        None
    } else {
        Some(aggregate_topk(&tm_groups, k, Better::Higher)?)
    };
    let aar = aggregate_topk(&group(&|s| Some(s.aar)), k, Better::Higher)?;
    let pred: Vec<usize> = samples.iter().map(|s| s.ec_pred).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.ec_true).collect();
    let ec = ec_metrics(&pred, &truth)?;
    let per_class = (1..=7)
        .map(|c| {
            let (p, r, f) = ec_per_class(&pred, &truth, c);
            (c, p, r, f)
        })
        .collect();
    Ok(EvalReport {
        samples,
        crmsd,
        tm,
        aar,
        ec,
        per_class,
        k,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

/// Per-sample rows, then aggregate rows, as TSV.
pub fn format_report_tsv(r: &EvalReport) -> String {
    let mut s = String::from("# samples\nreaction\tsample\tcrmsd\ttm\taar\tec_pred\tec_true\n");
    for m in &r.samples {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{}",
            m.reaction,
            m.sample,
            m.crmsd,
            fmt_opt(m.tm),
            m.aar,
            m.ec_pred,
            m.ec_true
        );
    }
    let _ = writeln!(s, "# aggregates\nmetric\ttop1\ttop{}\tmedian", r.k);
    let mut row = |name: &str, t: &TopK| {
        let _ = writeln!(s, "{name}\t{:.6}\t{:.6}\t{:.6}", t.top1, t.topk, t.median);
    };
    row("crmsd", &r.crmsd);
    if let Some(tm) = &r.tm {
        row("tm", tm);
    }
    row("aar", &r.aar);
    let _ = writeln!(
        s,
        "# ec\naccuracy\tprecision\trecall\tf1\n{:.6}\t{:.6}\t{:.6}\t{:.6}",
        r.ec.accuracy, r.ec.precision, r.ec.recall, r.ec.f1
    );
    s
}

/// Long-form `metric,class,value` rows for external plotting.
pub fn format_plot_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,class,value\n");
    for (name, v) in [
        ("accuracy", r.ec.accuracy),
        ("precision", r.ec.precision),
        ("recall", r.ec.recall),
        ("f1", r.ec.f1),
    ] {
        let _ = writeln!(s, "{name},all,{v:.6}");
    }
    for &(c, p, rc, f) in &r.per_class {
        let _ = writeln!(s, "precision,EC{c},{p:.6}");
        let _ = writeln!(s, "recall,EC{c},{rc:.6}");
        let _ = writeln!(s, "f1,EC{c},{f:.6}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d0_at_32() {
        assert!((tm_d0(32) - 1.3884).abs() < 1e-3);
    }

    #[test]
    fn constant_predictor_on_two_classes() {
        let m = ec_metrics(&[1, 1, 1, 1], &[1, 1, 2, 2]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aar_examples() {
        assert_eq!(aar(&[1, 2, 3, 4], &[1, 2, 3, 5]).unwrap(), 0.75);
        assert!(aar(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn topk_ladder() {
        let g = vec![(1..=10).map(f64::from).collect::<Vec<_>>()];
        let t = aggregate_topk(&g, 10, Better::Lower).unwrap();
        assert_eq!((t.top1, t.topk, t.median), (1.0, 5.5, 5.5));
    }
}
