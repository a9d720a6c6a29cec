//! Depth error metrics, per-depth-interval accuracy and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::DepthMap;

const THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

/// Column order of the summary table.
pub const TABLE_COLUMNS: [&str; 7] = ["Abs_Rel", "RMSE", "Sq_Rel", "RMSE_log", "a1", "a2", "a3"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub sq_rel: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub valid_pixels: usize,
}

impl MetricsReport {
    pub fn columns(&self) -> [f64; 7] {
        [self.abs_rel, self.rmse, self.sq_rel, self.rmse_log, self.a1, self.a2, self.a3]
    }
}

/// Running sums from which every metric follows; pooling two sets of sums
/// is exact.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Sums {
    n: usize,
    abs_rel: f64,
    sq_err: f64,
    sq_rel: f64,
    sq_log: f64,
    hits: [usize; 3],
}

impl Sums {
    fn push(&mut self, pred: f64, gt: f64) {
        let err = gt - pred;
        self.n += 1;
        self.abs_rel += err.abs() / gt;
        self.sq_err += err * err;
        self.sq_rel += err * err / gt;
        let dl = pred.ln() - gt.ln();
        self.sq_log += dl * dl;
        let delta = (pred / gt).max(gt / pred);
        for (hit, t) in self.hits.iter_mut().zip(THRESHOLDS) {
            if delta < t {
                *hit += 1;
            }
        }
    }

    fn from_report(r: &MetricsReport) -> Self {
        let n = r.valid_pixels as f64;
        let hit = |a: f64| (a * n).round() as usize;
        Self {
            n: r.valid_pixels,
            abs_rel: r.abs_rel * n,
            sq_err: r.rmse * r.rmse * n,
            sq_rel: r.sq_rel * n,
            sq_log: r.rmse_log * r.rmse_log * n,
            hits: [hit(r.a1), hit(r.a2), hit(r.a3)],
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.n += o.n;
        self.abs_rel += o.abs_rel;
        self.sq_err += o.sq_err;
        self.sq_rel += o.sq_rel;
        self.sq_log += o.sq_log;
        for (a, b) in self.hits.iter_mut().zip(o.hits) {
            *a += b;
        }
    }

    fn report(&self) -> MetricsReport {
        let n = self.n as f64;
        MetricsReport {
            abs_rel: self.abs_rel / n,
            rmse: (self.sq_err / n).sqrt(),
            sq_rel: self.sq_rel / n,
            rmse_log: (self.sq_log / n).sqrt(),
            a1: self.hits[0] as f64 / n,
            a2: self.hits[1] as f64 / n,
            a3: self.hits[2] as f64 / n,
            valid_pixels: self.n,
        }
    }
}

fn check_pixel(pred: f64, gt: f64, index: usize) -> Result<()> {
    for (what, v) in [("prediction depth", pred), ("ground-truth depth", gt)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositive { what, index, value: v });
        }
    }
    Ok(())
}

/// Pixels where both maps hold a value.
pub fn joint_valid_mask(pred: &DepthMap, gt: &DepthMap) -> Vec<bool> {
    pred.data.iter().zip(&gt.data).map(|(p, g)| !p.is_nan() && !g.is_nan()).collect()
}

pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<MetricsReport> {
    gt.same_shape(pred, "metrics")?;
    if mask.len() != gt.len() {
        return Err(invalid("metrics", format!("mask has {} pixels, maps have {}", mask.len(), gt.len())));
    }
    let mut sums = Sums::default();
    for i in (0..gt.len()).filter(|&i| mask[i]) {
        check_pixel(pred.data[i], gt.data[i], i)?;
        sums.push(pred.data[i], gt.data[i]);
    }
    if sums.n == 0 {
        return Err(Error::EmptyMask { what: "metrics" });
    }
    Ok(sums.report())
}

/// Pixel-pooled aggregate of per-sample reports.
pub fn assemble_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let mut total = Sums::default();
    for r in reports {
        total.merge(&Sums::from_report(r));
    }
    if total.n == 0 {
        return Err(Error::EmptyMask { what: "report" });
    }
    Ok(total.report())
}

/// Default interval edges in meters for a given depth ceiling.
pub fn default_bin_edges(d_max: f64) -> Vec<f64> {
    vec![0.0, 25.0, 50.0, 100.0, 200.0, d_max]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Per branch, pixels under each of the three ratio thresholds.
    pub hits: Vec<[usize; 3]>,
}

impl IntervalBin {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `a_j` (j in 1..=3) of a branch; `None` for an empty bin.
    pub fn accuracy(&self, branch: usize, j: usize) -> Option<f64> {
        (self.count > 0).then(|| self.hits[branch][j - 1] as f64 / self.count as f64)
    }
}

/// Accuracy per ground-truth depth interval. Intervals are left-closed and
/// right-open, except that the last one also holds its upper edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub bin_edges: Vec<f64>,
    pub branches: Vec<String>,
    pub bins: Vec<IntervalBin>,
    /// Valid pixels outside every interval.
    pub outside: usize,
}

impl IntervalReport {
    pub fn branch_index(&self, name: &str) -> Option<usize> {
        self.branches.iter().position(|b| b == name)
    }

    pub fn binned_pixels(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Pools another report with identical edges and branches.
    pub fn merge(&mut self, other: &IntervalReport) -> Result<()> {
        if self.bin_edges != other.bin_edges || self.branches != other.branches {
            return Err(invalid("interval report", "cannot merge reports with different bins or branches"));
        }
        self.outside += other.outside;
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            for (ha, hb) in a.hits.iter_mut().zip(&b.hits) {
                for j in 0..3 {
                    ha[j] += hb[j];
                }
            }
        }
        Ok(())
    }
}

fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    let last = edges.len() - 2;
    if d < edges[0] || d > edges[last + 1] {
        return None;
    }
    // First edge strictly above d, minus one.
    let k = edges.partition_point(|e| *e <= d);
    Some((k.max(1) - 1).min(last))
}

/// Bins pixels by ground-truth depth and computes `a1..a3` per branch.
/// Pixels count where the ground truth and every branch are valid.
pub fn interval_accuracy(preds: &[(&str, &DepthMap)], gt: &DepthMap, bin_edges: &[f64]) -> Result<IntervalReport> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("interval accuracy", "bin edges must be strictly increasing, at least two"));
    }
    if preds.is_empty() {
        return Err(invalid("interval accuracy", "no branches"));
    }
    for (_, p) in preds {
        gt.same_shape(p, "interval accuracy")?;
    }
    let mut bins: Vec<IntervalBin> = bin_edges
        .windows(2)
        .map(|w| IntervalBin {
            lo: w[0],
            hi: w[1],
            count: 0,
            hits: vec![[0; 3]; preds.len()],
        })
        .collect();
    let mut outside = 0;
    let mut valid = 0;
    for i in 0..gt.len() {
        let g = gt.data[i];
        if g.is_nan() || preds.iter().any(|(_, p)| p.data[i].is_nan()) {
            continue;
        }
        valid += 1;
        let Some(b) = bin_of(bin_edges, g) else {
            outside += 1;
            continue;
        };
        let bin = &mut bins[b];
        bin.count += 1;
        for (k, (_, p)) in preds.iter().enumerate() {
            let p = p.data[i];
            check_pixel(p, g, i)?;
            let delta = (p / g).max(g / p);
            for (j, t) in THRESHOLDS.iter().enumerate() {
                if delta < *t {
                    bin.hits[k][j] += 1;
                }
            }
        }
    }
    if valid == 0 {
        return Err(Error::EmptyMask { what: "interval accuracy" });
    }
    Ok(IntervalReport {
        bin_edges: bin_edges.to_vec(),
        branches: preds.iter().map(|(n, _)| n.to_string()).collect(),
        bins,
        outside,
    })
}

/// Fixed-width table, one row per labelled report.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{:<10}", "branch");
    for c in TABLE_COLUMNS {
        let _ = write!(out, " {c:>9}");
    }
    let _ = writeln!(out, " {:>9}", "pixels");
    for (name, r) in rows {
        let _ = write!(out, "{name:<10}");
        for v in r.columns() {
            let _ = write!(out, " {v:>9.4}");
        }
        let _ = writeln!(out, " {:>9}", r.valid_pixels);
    }
    out
}

#[derive(Serialize)]
struct JsonRow<'a> {
    branch: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

/// One JSON object per line.
pub fn render_json_lines(rows: &[(String, MetricsReport)]) -> Result<String> {
    let mut out = String::new();
    for (name, r) in rows {
        out.push_str(&serde_json::to_string(&JsonRow { branch: name, report: r })?);
        out.push('\n');
    }
    Ok(out)
}

/// `branch,lo,hi,count,a1,a2,a3`, with empty accuracy fields for empty bins.
pub fn render_interval_csv(report: &IntervalReport) -> String {
    let mut out = String::from("branch,lo,hi,count,a1,a2,a3\n");
    for (k, branch) in report.branches.iter().enumerate() {
        for bin in &report.bins {
            let _ = write!(out, "{branch},{},{},{}", bin.lo, bin.hi, bin.count);
            for j in 1..=3 {
                match bin.accuracy(k, j) {
                    Some(a) => {
                        let _ = write!(out, ",{a:.6}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn depth(data: &[f64]) -> DepthMap {
        DepthMap(Grid::new(1, data.len(), data.to_vec()).unwrap())
    }

    #[test]
    fn perfect_prediction() {
        let g = depth(&[1.0, 5.0, 30.0]);
        let r = compute_metrics(&g, &g, &[true; 3]).unwrap();
        assert_eq!(r.columns(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ratio_two_pixel() {
        let r = compute_metrics(&depth(&[2.0]), &depth(&[1.0]), &[true]).unwrap();
        assert_eq!((r.abs_rel, r.rmse, r.sq_rel), (1.0, 1.0, 1.0));
        assert_eq!(r.rmse_log, 2f64.ln());
        assert_eq!((r.a1, r.a2, r.a3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ratio_one_point_three() {
        let r = compute_metrics(&depth(&[1.0, 1.3]), &depth(&[1.0, 1.0]), &[true, true]).unwrap();
        assert_eq!((r.a1, r.a2, r.a3), (0.5, 1.0, 1.0));
    }

    #[test]
    fn errors() {
        let g = depth(&[1.0]);
        assert!(matches!(compute_metrics(&g, &g, &[false]), Err(Error::EmptyMask { .. })));
        assert!(compute_metrics(&depth(&[0.0]), &g, &[true]).is_err());
    }

    #[test]
    fn pooled_not_averaged() {
        let a = compute_metrics(&depth(&[2.0]), &depth(&[1.0]), &[true]).unwrap();
        let b = compute_metrics(&depth(&[10.0]), &depth(&[10.0]), &[true]).unwrap();
        let pooled = assemble_report(&[a, b]).unwrap();
        let direct = compute_metrics(&depth(&[2.0, 10.0]), &depth(&[1.0, 10.0]), &[true; 2]).unwrap();
        assert!((pooled.rmse - direct.rmse).abs() < 1e-12);
        assert!((pooled.rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert_ne!(pooled.rmse, (a.rmse + b.rmse) / 2.0);
        assert_eq!(assemble_report(&[a]).unwrap(), a);
    }

    #[test]
    fn edge_pixels_go_up() {
        let edges = [0.0, 25.0, 50.0];
        assert_eq!(bin_of(&edges, 25.0), Some(1));
        assert_eq!(bin_of(&edges, 24.9), Some(0));
        assert_eq!(bin_of(&edges, 50.0), Some(1));
        assert_eq!(bin_of(&edges, 50.1), None);
        assert_eq!(bin_of(&edges, -1.0), None);
    }

    #[test]
    fn table_header_order() {
        let g = depth(&[1.0]);
        let r = compute_metrics(&g, &g, &[true]).unwrap();
        let t = render_table(&[("fused".into(), r)]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header[1..8], TABLE_COLUMNS);
    }

    #[test]
    fn csv_marks_empty_bins() {
        let g = depth(&[10.0]);
        let r = interval_accuracy(&[("mono", &g)], &g, &[0.0, 25.0, 50.0]).unwrap();
        let csv = render_interval_csv(&r);
        assert!(csv.contains("mono,0,25,1,1.000000,1.000000,1.000000"));
        assert!(csv.contains("mono,25,50,0,,,"));
    }
}
