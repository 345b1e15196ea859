//! Data files behind the projection and histogram figures: a 2D principal
//! component projection of token features and shared-edge histograms of two
//! feature batches.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Projection,
    Histogram,
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(PlotKind::Projection),
            "histogram" => Ok(PlotKind::Histogram),
            _ => Err(Error::invalid(format!("unknown plot kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRequest {
    pub kind: PlotKind,
    pub input: std::path::PathBuf,
    /// Second feature dump, histogram only.
    pub target: Option<std::path::PathBuf>,
    pub output: std::path::PathBuf,
    pub bins: usize,
}

/// Labelled feature rows, as written by [`write_feature_dump`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureDump {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureDump {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn render_feature_dump(dump: &FeatureDump) -> String {
    let mut s = String::from("label");
    for k in 0..dump.dim() {
        let _ = write!(s, "\tf{k}");
    }
    s.push('\n');
    for (l, r) in dump.labels.iter().zip(&dump.rows) {
        s.push_str(l);
        for v in r {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_feature_dump(dump: &FeatureDump, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_feature_dump(dump))?;
    Ok(())
}

pub fn parse_feature_dump(text: &str) -> Result<FeatureDump> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty feature dump"))?;
    let dim = header.split('\t').count().saturating_sub(1);
    let mut dump = FeatureDump::default();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let label = fields.next().unwrap_or_default().to_string();
        let row = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("feature dump line {}: {e}", i + 2)))?;
        if row.len() != dim {
            return Err(Error::shape(format!(
                "feature dump line {}: {} values, header names {dim}",
                i + 2,
                row.len()
            )));
        }
        dump.labels.push(label);
        dump.rows.push(row);
    }
    Ok(dump)
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<FeatureDump> {
    parse_feature_dump(&fs::read_to_string(path)?)
}

/// Projects rows onto their top two principal axes (after centring). 2D input
/// is returned unchanged. Axis signs are fixed so the largest-magnitude
/// loading is positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = rows.first().map_or(0, Vec::len);
    if d < 2 {
        return Err(Error::invalid(format!("projection needs dimension >= 2, got {d}")));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("ragged feature rows"));
    }
    if d == 2 {
        return Ok(rows.iter().map(|r| [r[0], r[1]]).collect());
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = col.iter().copied().fold(0.0, |acc: f64, v| if v.abs() > acc.abs() { v } else { acc });
            let s = if lead < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| v * s).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let p = |a: &Vec<f64>| (0..d).map(|j| x[(i, j)] * a[j]).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

pub fn render_projection(labels: &[String], coords: &[[f64; 2]]) -> String {
    let mut s = String::from("label\tx\ty\n");
    for (l, c) in labels.iter().zip(coords) {
        let _ = writeln!(s, "{l}\t{}\t{}", c[0], c[1]);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` shared edges.
    pub edges: Vec<f64>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Histogram {
    /// L1 distance between the two normalised histograms, in `[0, 2]`.
    pub fn l1(&self) -> f64 {
        let ns: usize = self.source.iter().sum();
        let nt: usize = self.target.iter().sum();
        self.source
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (*a as f64 / ns as f64 - *b as f64 / nt as f64).abs())
            .sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("bin_lo\tbin_hi\tsource\ttarget\n");
        for k in 0..self.source.len() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                self.edges[k],
                self.edges[k + 1],
                self.source[k],
                self.target[k]
            );
        }
        s
    }
}

fn bin_of(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    if width == 0.0 {
        return 0;
    }
    (((v - lo) / width) as usize).min(bins - 1)
}

/// Bins two batches of scalars over their joint range with equal-width bins.
pub fn histogram(source: &[f64], target: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 1 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("histogram batches must be non-empty"));
    }
    if source.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in histogram batch"));
    }
    let lo = source.iter().chain(target).copied().fold(f64::INFINITY, f64::min);
    let hi = source.iter().chain(target).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|k| if k == bins { hi } else { lo + width * k as f64 })
        .collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for v in xs {
            c[bin_of(*v, lo, width, bins)] += 1;
        }
        c
    };
    Ok(Histogram {
        edges,
        source: count(source),
        target: count(target),
    })
}

/// Histogram over every feature value of two dumps.
pub fn feature_histogram(source: &[Vec<f64>], target: &[Vec<f64>], bins: usize) -> Result<Histogram> {
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<_>>();
    histogram(&flat(source), &flat(target), bins)
}

pub fn run_plot(req: &PlotRequest) -> Result<String> {
    let input = read_feature_dump(&req.input)?;
    let out = match req.kind {
        PlotKind::Projection => render_projection(&input.labels, &project_2d(&input.rows)?),
        PlotKind::Histogram => {
            let path = req
                .target
                .as_ref()
                .ok_or_else(|| Error::invalid("histogram needs a target feature dump"))?;
            let target = read_feature_dump(path)?;
            feature_histogram(&input.rows, &target.rows, req.bins)?.render()
        }
    };
    fs::write(&req.output, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_d_is_identity() {
        let rows = vec![vec![1.0, -2.0], vec![3.5, 0.25]];
        assert_eq!(project_2d(&rows).unwrap(), vec![[1.0, -2.0], [3.5, 0.25]]);
        assert!(project_2d(&[vec![1.0]]).is_err());
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let mut rows = Vec::new();
        for c in 0..2 {
            for _ in 0..40 {
                rows.push((0..d).map(|j| {
                    let centre = if c == 1 && j % 2 == 0 { 100.0 } else { 0.0 };
                    centre + rng.random_range(-0.5..0.5)
                }).collect::<Vec<f64>>());
            }
        }
        let p = project_2d(&rows).unwrap();
        assert_eq!(p.len(), rows.len());
        let centroid = |s: &[[f64; 2]]| {
            let n = s.len() as f64;
            [s.iter().map(|v| v[0]).sum::<f64>() / n, s.iter().map(|v| v[1]).sum::<f64>() / n]
        };
        let (a, b) = (centroid(&p[..40]), centroid(&p[40..]));
        let dist = |x: [f64; 2], y: [f64; 2]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
        let radius = p[..40]
            .iter()
            .map(|v| dist(*v, a))
            .chain(p[40..].iter().map(|v| dist(*v, b)))
            .fold(0.0, f64::max);
        assert!(dist(a, b) > radius);
    }

    #[test]
    fn histogram_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..137).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..59).map(|_| rng.random_range(0.0..5.0)).collect();
        let h = histogram(&a, &b, 7).unwrap();
        assert_eq!(h.edges.len(), 8);
        assert_eq!(h.source.iter().sum::<usize>(), 137);
        assert_eq!(h.target.iter().sum::<usize>(), 59);
        let same = histogram(&a, &a, 7).unwrap();
        assert_eq!(same.source, same.target);
        assert_eq!(same.l1(), 0.0);
        assert!(histogram(&a, &b, 0).is_err());
        assert!(histogram(&[], &b, 3).is_err());
        let flat = histogram(&[1.0, 1.0], &[1.0], 4).unwrap();
        assert_eq!(flat.source[0], 2);
    }

    #[test]
    fn dump_round_trip() {
        let d = FeatureDump {
            labels: vec!["a".into(), "O".into()],
            rows: vec![vec![0.1, -2.5, 3.0], vec![1e-9, 0.0, 7.25]],
        };
        assert_eq!(parse_feature_dump(&render_feature_dump(&d)).unwrap(), d);
        assert!(parse_feature_dump("label\tf0\na\t1\t2\n").is_err());
    }
}
