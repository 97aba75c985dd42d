//! Saliency metrics (KLD, CC, SIM, NSS, AUC-Judd) and per-domain reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-7;
/// Allowed deviation of a normalized map's total from 1.
pub const NORM_TOL: f64 = 1e-3;

/// Where ε enters the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KldForm {
    /// `Σ S ln(ε + S/(ε + Ŝ))`.
    Printed,
    /// `Σ S ln((S + ε)/(Ŝ + ε))`.
    Standard,
}

fn values<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn same_shape<T: Scalar>(metric: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension { op: metric, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

fn require_normalized(metric: &str, v: &[f64]) -> Result<()> {
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > NORM_TOL || v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Usage(format!("{metric} needs a normalized nonnegative map, total is {total}")));
    }
    Ok(())
}

pub fn kld<T: Scalar>(s: &Tensor<T>, pred: &Tensor<T>, eps: f64, form: KldForm) -> Result<f64> {
    same_shape("kld", s, pred)?;
    let (a, b) = (values(s), values(pred));
    require_normalized("kld", &a)?;
    require_normalized("kld", &b)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(&s, &p)| match form {
            KldForm::Printed => s * (eps + s / (eps + p)).ln(),
            KldForm::Standard => s * ((s + eps) / (p + eps)).ln(),
        })
        .sum())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cc<T: Scalar>(s: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    same_shape("cc", s, pred)?;
    let (a, b) = (values(s), values(pred));
    let (ma, sa) = mean_std(&a);
    let (mb, sb) = mean_std(&b);
    if !(sa > 0.0 && sb > 0.0) {
        return Err(Error::UndefinedMetric { metric: "cc", reason: "zero variance" });
    }
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

pub fn sim<T: Scalar>(s: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    same_shape("sim", s, pred)?;
    let (a, b) = (values(s), values(pred));
    require_normalized("sim", &a)?;
    require_normalized("sim", &b)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).sum())
}

fn fixation_mask<T: Scalar>(p: &Tensor<T>) -> Vec<bool> {
    p.data().iter().map(|v| v.as_f64() > 0.5).collect()
}

pub fn nss<T: Scalar>(fix: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    same_shape("nss", fix, pred)?;
    let mask = fixation_mask(fix);
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        return Err(Error::UndefinedMetric { metric: "nss", reason: "no fixations" });
    }
    let b = values(pred);
    let (m, sd) = mean_std(&b);
    if !(sd > 0.0) {
        return Err(Error::UndefinedMetric { metric: "nss", reason: "zero variance" });
    }
    Ok(b.iter().zip(&mask).filter(|(_, &f)| f).map(|(v, _)| (v - m) / sd).sum::<f64>() / k as f64)
}

/// Judd ROC area. Thresholds are the predicted values at fixations; a pixel
/// counts as positive when its value is at or above the threshold.
pub fn auc_judd<T: Scalar>(fix: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    same_shape("auc_judd", fix, pred)?;
    let mask = fixation_mask(fix);
    let k = mask.iter().filter(|&&m| m).count();
    let n = mask.len();
    if k == 0 || k == n {
        return Err(Error::UndefinedMetric { metric: "auc_judd", reason: "needs fixated and non-fixated pixels" });
    }
    let b = values(pred);
    let mut thresholds: Vec<f64> = b.iter().zip(&mask).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
    thresholds.sort_by(|x, y| y.partial_cmp(x).expect("finite saliency"));
    let mut sorted = b.clone();
    sorted.sort_by(|x, y| y.partial_cmp(x).expect("finite saliency"));
    // pixels at or above each threshold, by a merge over the sorted values
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let mut above = 0;
    for (i, &t) in thresholds.iter().enumerate() {
        while above < n && sorted[above] >= t {
            above += 1;
        }
        let tp = thresholds[i..].iter().take_while(|&&v| v >= t).count() + i;
        tpr.push(tp as f64 / k as f64);
        fpr.push(above as f64 / n as f64);
    }
    tpr.push(1.0);
    fpr.push(1.0);
    Ok(trapezoid(&fpr, &tpr))
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// Metrics for one predicted frame; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub domain: String,
    pub sample: String,
    pub frame: usize,
    pub auc_j: Option<f64>,
    pub sim: f64,
    pub cc: Option<f64>,
    pub kld: f64,
    pub nss: Option<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores one frame against its ground-truth map and fixations.
pub fn score_frame<T: Scalar>(
    domain: &str,
    sample: &str,
    frame: usize,
    gt: &Tensor<T>,
    fix: &Tensor<T>,
    pred: &Tensor<T>,
    form: KldForm,
) -> Result<MetricsRow> {
    Ok(MetricsRow {
        domain: domain.to_string(),
        sample: sample.to_string(),
        frame,
        auc_j: defined(auc_judd(fix, pred))?,
        sim: sim(gt, pred)?,
        cc: defined(cc(gt, pred))?,
        kld: kld(gt, pred, DEFAULT_EPS, form)?,
        nss: defined(nss(fix, pred))?,
    })
}

/// Per-domain means. A metric with no defined rows is `None` (absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub domain: String,
    pub n: usize,
    pub auc_j: Option<f64>,
    pub sim: Option<f64>,
    pub cc: Option<f64>,
    pub kld: Option<f64>,
    pub nss: Option<f64>,
    pub excluded_auc: usize,
    pub excluded_cc: usize,
    pub excluded_nss: usize,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut missing) = (0.0, 0usize, 0usize);
    for v in vals {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => missing += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), missing)
}

/// Groups rows by domain in first-seen order.
pub fn report(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut domains: Vec<&str> = Vec::new();
    for r in rows {
        if !domains.contains(&r.domain.as_str()) {
            domains.push(&r.domain);
        }
    }
    domains
        .into_iter()
        .map(|d| {
            let g: Vec<&MetricsRow> = rows.iter().filter(|r| r.domain == d).collect();
            let (auc_j, excluded_auc) = mean_of(g.iter().map(|r| r.auc_j));
            let (cc, excluded_cc) = mean_of(g.iter().map(|r| r.cc));
            let (nss, excluded_nss) = mean_of(g.iter().map(|r| r.nss));
            Summary {
                domain: d.to_string(),
                n: g.len(),
                auc_j,
                sim: mean_of(g.iter().map(|r| Some(r.sim))).0,
                cc,
                kld: mean_of(g.iter().map(|r| Some(r.kld))).0,
                nss,
                excluded_auc,
                excluded_cc,
                excluded_nss,
            }
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 10] =
    ["domain", "n", "auc_j", "sim", "cc", "kld", "nss", "excluded_auc", "excluded_cc", "excluded_nss"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn report_csv(summaries: &[Summary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
    w.write_record(REPORT_COLUMNS).map_err(wrap)?;
    for s in summaries {
        w.write_record([
            s.domain.clone(),
            s.n.to_string(),
            cell(s.auc_j),
            cell(s.sim),
            cell(s.cc),
            cell(s.kld),
            cell(s.nss),
            s.excluded_auc.to_string(),
            s.excluded_cc.to_string(),
            s.excluded_nss.to_string(),
        ])
        .map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parses a report written by [`report_csv`].
pub fn parse_report_csv(text: &[u8]) -> Result<Vec<Summary>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
    let headers = rdr.headers().map_err(|e| Error::format(0, e))?.clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(Error::format(0, "unexpected report header"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(e.position().map_or(0, |p| p.byte()), e))?;
        let at = rec.position().map_or(0, |p| p.byte());
        if rec.len() != REPORT_COLUMNS.len() {
            return Err(Error::format(at, "wrong field count"));
        }
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                return Ok(None);
            }
            rec[i].parse().map(Some).map_err(|_| Error::format(at, format!("bad number `{}`", &rec[i])))
        };
        let count = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| Error::format(at, format!("bad count `{}`", &rec[i])))
        };
        out.push(Summary {
            domain: rec[0].to_string(),
            n: count(1)?,
            auc_j: opt(2)?,
            sim: opt(3)?,
            cc: opt(4)?,
            kld: opt(5)?,
            nss: opt(6)?,
            excluded_auc: count(7)?,
            excluded_cc: count(8)?,
            excluded_nss: count(9)?,
        });
    }
    Ok(out)
}

/// Aligned plain-text table.
pub fn report_text(summaries: &[Summary]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "absent".into());
    let mut rows = vec![["domain", "n", "AUC-J", "SIM", "CC", "KLD", "NSS", "excl"].map(String::from).to_vec()];
    for s in summaries {
        rows.push(vec![
            s.domain.clone(),
            s.n.to_string(),
            fmt(s.auc_j),
            fmt(s.sim),
            fmt(s.cc),
            fmt(s.kld),
            fmt(s.nss),
            format!("{}/{}/{}", s.excluded_auc, s.excluded_cc, s.excluded_nss),
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
