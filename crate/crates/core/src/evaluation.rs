//! Metrics, feature projection and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::objectives::LabelDistribution;
use crate::trainer::RunReport;

/// `counts[i][j]`: class-`i` samples predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension {
                op: "ConfusionMatrix::from_predictions",
                left: (truth.len(), 1),
                right: (predicted.len(), 1),
            });
        }
        let mut cm = Self::new(num_classes);
        for (row, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            let bad = if t >= num_classes { Some(t) } else if p >= num_classes { Some(p) } else { None };
            if let Some(label) = bad {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes: num_classes,
                });
            }
            cm.counts[t * num_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Usage("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.chunks(self.num_classes.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    /// Within-class accuracy `n(i,i) / n_i`; an empty class is an error.
    pub fn per_class_accuracy(&self) -> Result<Vec<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                if n == 0 {
                    Err(Error::EmptyClass { class: i })
                } else {
                    Ok(self.get(i, i) as f64 / n as f64)
                }
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    /// CSV with a `true\predicted` header row and one row per true class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend((0..self.num_classes).map(|j| j.to_string()));
        w.write_record(&header)?;
        for i in 0..self.num_classes {
            let mut rec = vec![i.to_string()];
            rec.extend((0..self.num_classes).map(|j| self.get(i, j).to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Mean of the within-class accuracies.
pub fn per_class_mean_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let acc = cm.per_class_accuracy()?;
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionComparison {
    pub js_distance: f64,
    pub js_divergence: f64,
    pub l1: f64,
}

pub fn compare_distributions(estimated: &LabelDistribution, truth: &LabelDistribution) -> Result<DistributionComparison> {
    let js_divergence = estimated.js_divergence(truth)?;
    Ok(DistributionComparison {
        js_distance: js_divergence.sqrt(),
        js_divergence,
        l1: estimated.l1_distance(truth)?,
    })
}

pub const PROJECTION_ITERATIONS: usize = 1000;

/// Two leading principal components of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection2d {
    /// `n × 2` centered coordinates.
    pub coordinates: Tensor2,
    /// `2 × d`, unit rows (a zero row for a missing component).
    pub components: Tensor2,
    /// Covariance eigenvalues of the two components.
    pub variances: [f64; 2],
    pub warnings: Vec<String>,
}

fn sym_matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Power iteration for the top eigenpair of a symmetric PSD matrix.
/// The eigenvector sign is fixed so its largest-magnitude entry is positive.
fn leading_eigenpair(m: &[f64], d: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let mut v = start.to_vec();
    normalize(&mut v);
    for _ in 0..PROJECTION_ITERATIONS {
        let mut next = sym_matvec(m, d, &v);
        if normalize(&mut next) == 0.0 {
            return (0.0, vec![0.0; d]);
        }
        v = next;
    }
    let mv = sym_matvec(m, d, &v);
    let lambda: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

/// Projects mean-centered rows onto the two leading covariance eigenvectors,
/// found by power iteration with deflation from a seeded start vector.
pub fn project_features_2d(embeddings: &Tensor2, seed: u64) -> Result<Projection2d> {
    let (n, d) = embeddings.shape();
    if n < 3 || d == 0 {
        return Err(Error::Usage(format!("projection needs at least 3 rows and 1 column, got {n}x{d}")));
    }
    let mean: Vec<f64> = embeddings.column_sums().data().iter().map(|s| s / n as f64).collect();
    let centered = Tensor2::from_vec(
        n,
        d,
        embeddings
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - mean[i % d])
            .collect(),
    )?;
    let mut cov = centered.matmul_tn(&centered)?.scaled(1.0 / (n - 1) as f64).into_vec();

    let mut rng = rng_for(seed, "projection", 0);
    let mut warnings = Vec::new();
    let mut components = Tensor2::zeros(2, d);
    let mut variances = [0.0; 2];
    let scale = cov.iter().map(|x| x.abs()).fold(0.0, f64::max);
    for k in 0..2.min(d) {
        let start: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (lambda, v) = leading_eigenpair(&cov, d, &start);
        if lambda <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            warnings.push(format!("covariance is rank-deficient; component {} zeroed", k + 1));
            continue;
        }
        variances[k] = lambda;
        components.row_mut(k).copy_from_slice(&v);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
    }
    if d < 2 {
        warnings.push("input has one dimension; component 2 zeroed".into());
    }
    let coordinates = centered.matmul_nt(&components)?;
    Ok(Projection2d {
        coordinates,
        components,
        variances,
        warnings,
    })
}

/// `sample_id,label,predicted,pc1,pc2`.
pub fn features_csv(projection: &Projection2d, labels: &[usize], predicted: &[usize]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "label", "predicted", "pc1", "pc2"])?;
    for (i, row) in projection.coordinates.iter_rows().enumerate() {
        w.write_record([
            i.to_string(),
            labels[i].to_string(),
            predicted[i].to_string(),
            row[0].to_string(),
            row[1].to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Table(format!("unknown table format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, PartialOrd)]
struct Column {
    degree: f64,
    task: String,
}

/// Method × task grid of final per-class mean accuracy (percent, two
/// decimals). Rows are sorted by run label, columns by shift degree then
/// task name. Several reports in one cell (e.g. seeds) are averaged.
pub fn render_table(reports: &[RunReport], format: TableFormat) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::Table("no reports to render".into()));
    };
    let schema = first.metrics.schema_version;
    let mut columns: Vec<Column> = Vec::new();
    let mut cells: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    let mut classes_by_column: Vec<usize> = Vec::new();
    for r in reports {
        let m = &r.metrics;
        if m.schema_version != schema {
            return Err(Error::Table(format!(
                "report `{}` has schema {} but `{}` has {schema}",
                m.label, m.schema_version, first.metrics.label
            )));
        }
        let col = Column {
            degree: m.degree,
            task: m.task.clone(),
        };
        let idx = match columns.iter().position(|c| *c == col) {
            Some(i) => i,
            None => {
                columns.push(col);
                classes_by_column.push(m.num_classes);
                columns.len() - 1
            }
        };
        if classes_by_column[idx] != m.num_classes {
            return Err(Error::Table(format!(
                "task `{}` at degree {} mixes {} and {} classes",
                m.task, m.degree, classes_by_column[idx], m.num_classes
            )));
        }
        cells.entry(m.label.clone()).or_default().push((idx, m.summary.per_class_mean_accuracy));
    }
    let mut order: Vec<usize> = (0..columns.len()).collect();
    order.sort_by(|&a, &b| {
        columns[a]
            .degree
            .total_cmp(&columns[b].degree)
            .then_with(|| columns[a].task.cmp(&columns[b].task))
    });
    let header: Vec<String> = std::iter::once("method".to_string())
        .chain(order.iter().map(|&i| format!("{} d={}", columns[i].task, columns[i].degree)))
        .collect();
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|(label, values)| {
            std::iter::once(label.clone())
                .chain(order.iter().map(|&col| {
                    let v: Vec<f64> = values.iter().filter(|(c, _)| *c == col).map(|(_, a)| *a).collect();
                    if v.is_empty() {
                        String::new()
                    } else {
                        format!("{:.2}", 100.0 * v.iter().sum::<f64>() / v.len() as f64)
                    }
                }))
                .collect()
        })
        .collect();

    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header)?;
            for row in &rows {
                w.write_record(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        TableFormat::Markdown => {
            let mut out = String::new();
            let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
            out.push_str(&line(&header));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for row in &rows {
                out.push_str(&line(row));
            }
            Ok(out)
        }
    }
}
