//! Compositional preprocessing for abundance data: zero-prevalence filter,
//! pseudo-count, centred log-ratio transform and a low-variance filter.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MfldaError, Result};
use crate::fd_model::{FunctionalDataSet, Observation, Subject};
use crate::io::{csv_writer, fmt_f64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_zero_fraction: f64,
    pub pseudo_count: f64,
    pub variance_quantile_cut: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_zero_fraction: 0.80,
            pseudo_count: 1.0,
            variance_quantile_cut: 0.05,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.max_zero_fraction) {
            problems.push(format!("max_zero_fraction {} outside [0, 1]", self.max_zero_fraction));
        }
        if !(self.pseudo_count > 0.0 && self.pseudo_count.is_finite()) {
            problems.push(format!("pseudo_count {} must be positive", self.pseudo_count));
        }
        if !(0.0..=1.0).contains(&self.variance_quantile_cut) {
            problems.push(format!(
                "variance_quantile_cut {} outside [0, 1]",
                self.variance_quantile_cut
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MfldaError::Config(problems))
        }
    }
}

fn check_nonnegative(raw: &DMatrix<f64>) -> Result<()> {
    if let Some(((r, c), v)) = raw
        .iter()
        .enumerate()
        .map(|(k, v)| ((k % raw.nrows(), k / raw.nrows()), v))
        .find(|(_, v)| !(**v >= 0.0))
    {
        return Err(MfldaError::Data(format!(
            "abundance at row {r}, column {c} is {v}; values must be non-negative"
        )));
    }
    Ok(())
}

/// Fraction of zero entries per column.
pub fn zero_fractions(raw: &DMatrix<f64>) -> Vec<f64> {
    let n = raw.nrows().max(1) as f64;
    raw.column_iter()
        .map(|c| c.iter().filter(|&&v| v == 0.0).count() as f64 / n)
        .collect()
}

/// Columns whose zero fraction is strictly below `max_zero_fraction`.
pub fn zero_filter(raw: &DMatrix<f64>, max_zero_fraction: f64) -> Result<Vec<usize>> {
    check_nonnegative(raw)?;
    Ok(zero_fractions(raw)
        .iter()
        .enumerate()
        .filter(|(_, &z)| z < max_zero_fraction)
        .map(|(j, _)| j)
        .collect())
}

/// `log(x_i + c) − mean_j log(x_j + c)`.
pub fn clr(row: &[f64], pseudo_count: f64) -> Vec<f64> {
    let logs: Vec<f64> = row.iter().map(|&x| (x + pseudo_count).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len().max(1) as f64;
    logs.into_iter().map(|l| l - mean).collect()
}

/// Sample variance (divisor `n − 1`) of each column.
pub fn column_variances(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.variance() * m.nrows() as f64 / (m.nrows() - 1) as f64).collect()
}

/// Linear-interpolation (type 7) quantile.
pub fn quantile_type7(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Columns whose variance is not below the `quantile_cut` quantile of all
/// column variances.
pub fn variance_filter(m: &DMatrix<f64>, quantile_cut: f64) -> Result<Vec<usize>> {
    if m.nrows() < 2 {
        return Err(MfldaError::Argument("variance filter needs at least 2 samples".into()));
    }
    if m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let var = column_variances(m);
    let cut = quantile_type7(&var, quantile_cut);
    Ok((0..var.len()).filter(|&j| var[j] >= cut).collect())
}

/// Outcome of the full preprocessing chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// CLR-transformed rows restricted to the retained columns.
    pub matrix: DMatrix<f64>,
    /// Retained column indices into the raw matrix, in original order.
    pub retained: Vec<usize>,
    pub zero_fraction: Vec<f64>,
    /// Post-CLR variance of columns that passed the zero filter.
    pub variance: Vec<Option<f64>>,
}

impl Preprocessed {
    /// CSV `feature,zero_fraction,variance,retained`.
    pub fn write_manifest<W: Write>(&self, writer: W, feature_names: &[String]) -> Result<()> {
        let mut w = csv_writer(writer);
        w.write_record(["feature", "zero_fraction", "variance", "retained"])?;
        for (j, name) in feature_names.iter().enumerate() {
            w.write_record([
                name.clone(),
                fmt_f64(self.zero_fraction[j]),
                self.variance[j].map(fmt_f64).unwrap_or_default(),
                self.retained.contains(&j).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Zero filter, then pseudo-count plus CLR per row, then the variance filter.
pub fn preprocess(raw: &DMatrix<f64>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let kept = zero_filter(raw, cfg.max_zero_fraction)?;
    let sub = raw.select_columns(&kept);
    let mut t = DMatrix::zeros(sub.nrows(), sub.ncols());
    for r in 0..sub.nrows() {
        let row: Vec<f64> = sub.row(r).iter().copied().collect();
        for (c, v) in clr(&row, cfg.pseudo_count).into_iter().enumerate() {
            t[(r, c)] = v;
        }
    }
    let keep2 = variance_filter(&t, cfg.variance_quantile_cut)?;
    let vars = if kept.is_empty() { Vec::new() } else { column_variances(&t) };
    let mut variance = vec![None; raw.ncols()];
    for (k, &j) in kept.iter().enumerate() {
        variance[j] = Some(vars[k]);
    }
    Ok(Preprocessed {
        matrix: t.select_columns(&keep2),
        retained: keep2.iter().map(|&k| kept[k]).collect(),
        zero_fraction: zero_fractions(raw),
        variance,
    })
}

/// Wide table: one row per sample, first column the sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct WideTable {
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl WideTable {
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(MfldaError::Data("wide table needs an id column and at least one feature".into()));
        }
        let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut sample_ids = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            sample_ids.push(rec[0].to_string());
            for (k, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    MfldaError::Data(format!(
                        "row {}: `{field}` in column {} is not a number",
                        line + 2,
                        feature_names[k]
                    ))
                })?;
                values.push(v);
            }
        }
        let p = feature_names.len();
        Ok(Self {
            values: DMatrix::from_row_slice(sample_ids.len(), p, &values),
            sample_ids,
            feature_names,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (r, id) in self.sample_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(r).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies [`preprocess`] to a long-format dataset, treating each
/// (subject, time) pair as one composition. Features absent at an observed
/// time count as zero abundance.
pub fn preprocess_dataset(data: &FunctionalDataSet, cfg: &PreprocessConfig) -> Result<(FunctionalDataSet, Preprocessed)> {
    let p = data.n_features();
    let mut rows: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    let mut keys = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        for o in &s.observations {
            let key = (i, o.time.to_bits());
            rows.entry(key).or_insert_with(|| {
                keys.push((i, o.time));
                keys.len() - 1
            });
        }
    }
    let mut raw = DMatrix::zeros(keys.len(), p);
    for (i, s) in data.subjects.iter().enumerate() {
        for o in &s.observations {
            raw[(rows[&(i, o.time.to_bits())], o.feature)] += o.value;
        }
    }
    let pre = preprocess(&raw, cfg)?;
    let mut subjects: Vec<Subject> = data
        .subjects
        .iter()
        .map(|s| Subject {
            id: s.id.clone(),
            label: s.label,
            observations: Vec::new(),
        })
        .collect();
    for (r, &(i, time)) in keys.iter().enumerate() {
        for (k, _) in pre.retained.iter().enumerate() {
            subjects[i].observations.push(Observation {
                time,
                feature: k,
                value: pre.matrix[(r, k)],
            });
        }
    }
    let out = FunctionalDataSet {
        feature_names: pre.retained.iter().map(|&j| data.feature_names[j].clone()).collect(),
        class_names: data.class_names.clone(),
        time_domain: data.time_domain,
        subjects,
    };
    Ok((out, pre))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_filter_examples() {
        let mut m = DMatrix::from_element(10, 3, 1.0);
        m.column_mut(0).fill(0.0);
        for r in 0..8 {
            m[(r, 2)] = 0.0;
        }
        assert_eq!(zero_filter(&m, 0.8).unwrap(), vec![1]);
        m[(0, 1)] = -1.0;
        assert!(matches!(zero_filter(&m, 0.8), Err(MfldaError::Data(_))));
    }

    #[test]
    fn clr_examples() {
        assert!(clr(&[5.0, 5.0, 5.0], 1.0).iter().all(|&v| v.abs() < 1e-15));
        let y = clr(&[0.0, 1.0, 3.0], 1.0);
        let l2 = 2f64.ln();
        assert!((y[0] + l2).abs() < 1e-15);
        assert!(y[1].abs() < 1e-15);
        assert!((y[2] - l2).abs() < 1e-15);
    }

    #[test]
    fn variance_filter_examples() {
        let equal = DMatrix::from_fn(4, 5, |r, _| r as f64);
        assert_eq!(variance_filter(&equal, 0.05).unwrap().len(), 5);
        let distinct = DMatrix::from_fn(3, 100, |r, c| r as f64 * (c + 1) as f64);
        let kept = variance_filter(&distinct, 0.05).unwrap();
        assert_eq!(kept.len(), 95);
        assert_eq!(kept[0], 5);
        assert_eq!(variance_filter(&distinct, 0.0).unwrap().len(), 100);
        assert!(variance_filter(&DMatrix::zeros(1, 3), 0.05).is_err());
    }

    #[test]
    fn type7_quantile() {
        assert_eq!(quantile_type7(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile_type7(&[3.0, 1.0, 2.0], 0.0), 1.0);
        assert_eq!(quantile_type7(&[3.0, 1.0, 2.0], 1.0), 3.0);
    }

    #[test]
    fn pipeline_keeps_original_order() {
        let raw = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, 5.0, 2.0, //
            0.0, 3.0, 5.0, 0.0, //
            0.0, 2.0, 5.0, 9.0, //
            0.0, 7.0, 5.0, 4.0,
        ]);
        let out = preprocess(&raw, &PreprocessConfig::default()).unwrap();
        assert!(!out.retained.contains(&0));
        assert!(out.retained.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(out.matrix.ncols(), out.retained.len());
        assert!(out.variance[0].is_none());
    }
}
