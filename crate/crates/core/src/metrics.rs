//! Relative errors, gains, order statistics and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::error::{Result, RomError};
use crate::pod::InnerProduct;

/// `||rom - fom|| / ||fom||` in the norm of `ip`.
pub fn relative_error(rom: &[f64], fom: &[f64], ip: &InnerProduct) -> Result<f64> {
    if rom.len() != fom.len() || fom.len() != ip.weights.len() {
        return Err(RomError::DimensionMismatch(format!(
            "fields of length {} and {} with {} weights",
            rom.len(),
            fom.len(),
            ip.weights.len()
        )));
    }
    let den = ip.norm(fom);
    if den == 0.0 {
        return Err(RomError::ZeroReference);
    }
    let diff: Vec<f64> = rom.iter().zip(fom).map(|(a, b)| a - b).collect();
    Ok(ip.norm(&diff) / den)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainKind {
    Unsteady,
    Steady,
}

/// Mean over samples of `(E_base - E_dd) / E_base`. Each sample holds a
/// time series (unsteady, averaged first) or a single value (steady).
/// Samples with zero baseline error are skipped.
pub fn gain(base: &[Vec<f64>], dd: &[Vec<f64>], kind: GainKind) -> Result<f64> {
    if base.len() != dd.len() || base.is_empty() {
        return Err(RomError::DimensionMismatch(format!("{} baseline and {} dd samples", base.len(), dd.len())));
    }
    let reduce = |v: &[f64]| -> Result<f64> {
        match kind {
            GainKind::Unsteady => Ok(mean(v)),
            GainKind::Steady if v.len() == 1 => Ok(v[0]),
            GainKind::Steady => Err(RomError::DimensionMismatch("steady samples hold one value".into())),
        }
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for (b, d) in base.iter().zip(dd) {
        if b.len() != d.len() {
            return Err(RomError::DimensionMismatch("error series differ in length".into()));
        }
        let (eb, ed) = (reduce(b)?, reduce(d)?);
        if eb == 0.0 {
            warn!("gain: skipping sample with zero baseline error");
            continue;
        }
        sum += (eb - ed) / eb;
        n += 1;
    }
    if n == 0 {
        return Err(RomError::ZeroReference);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

pub fn statistics_summary(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(Summary { median, min: v[0], max: v[n - 1], count: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeInfo {
    pub name: String,
    /// `[N_u, N_p, N_nut]`.
    pub dims: [usize; 3],
    pub big_dims: [usize; 3],
    pub energy: Option<f64>,
}

/// Errors of one method and field at one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub regime: String,
    pub method: String,
    pub field: String,
    pub split: String,
    pub param: usize,
    pub mu: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRecord {
    pub regime: String,
    pub field: String,
    pub split: String,
    pub method: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub regime: String,
    pub method: String,
    pub field: String,
    pub split: String,
    pub summary: Summary,
}

/// regime -> field -> split -> method -> gain.
pub type GainTable = BTreeMap<String, BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub kind: GainKind,
    /// Time window the averages run over.
    pub window: Option<[f64; 2]>,
    pub regimes: Vec<RegimeInfo>,
    pub gains: GainTable,
    pub errors: Vec<ErrorSeries>,
    pub statistics: Vec<StatRecord>,
}

impl Report {
    pub fn new(kind: GainKind, window: Option<[f64; 2]>) -> Self {
        Self {
            format: FORMAT_VERSION.into(),
            kind,
            window,
            regimes: vec![],
            gains: BTreeMap::new(),
            errors: vec![],
            statistics: vec![],
        }
    }

    pub fn gain_records(&self) -> Vec<GainRecord> {
        let mut out = Vec::new();
        for (regime, fields) in &self.gains {
            for (field, splits) in fields {
                for (split, methods) in splits {
                    for (method, &value) in methods {
                        out.push(GainRecord {
                            regime: regime.clone(),
                            field: field.clone(),
                            split: split.clone(),
                            method: method.clone(),
                            value,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn get_gain(&self, regime: &str, field: &str, split: &str, method: &str) -> Option<f64> {
        self.gains.get(regime)?.get(field)?.get(split)?.get(method).copied()
    }

    pub fn set_gain(&mut self, regime: &str, field: &str, split: &str, method: &str, v: f64) {
        self.gains
            .entry(regime.into())
            .or_default()
            .entry(field.into())
            .or_default()
            .entry(split.into())
            .or_default()
            .insert(method.into(), v);
    }

    /// Error series of `method`, ordered by parameter.
    pub fn series(&self, regime: &str, method: &str, field: &str, split: &str) -> Vec<&ErrorSeries> {
        let mut v: Vec<&ErrorSeries> = self
            .errors
            .iter()
            .filter(|e| e.regime == regime && e.method == method && e.field == field && e.split == split)
            .collect();
        v.sort_by_key(|e| e.param);
        v
    }

    /// Fills gains and statistics from the error series. `baseline` is the
    /// reference method; every other non-projection method gets a gain.
    pub fn compute_gains(&mut self, baseline: &str) -> Result<()> {
        let mut keys: Vec<(String, String, String, String)> = self
            .errors
            .iter()
            .map(|e| (e.regime.clone(), e.method.clone(), e.field.clone(), e.split.clone()))
            .collect();
        keys.sort();
        keys.dedup();
        let mut stats = Vec::new();
        for (regime, method, field, split) in &keys {
            let per_param: Vec<f64> =
                self.series(regime, method, field, split).iter().map(|e| mean(&e.values)).collect();
            if let Some(summary) = statistics_summary(&per_param) {
                stats.push(StatRecord {
                    regime: regime.clone(),
                    method: method.clone(),
                    field: field.clone(),
                    split: split.clone(),
                    summary,
                });
            }
            if method == baseline || method == "projection" {
                continue;
            }
            let b: Vec<Vec<f64>> =
                self.series(regime, baseline, field, split).iter().map(|e| e.values.clone()).collect();
            let d: Vec<Vec<f64>> = self.series(regime, method, field, split).iter().map(|e| e.values.clone()).collect();
            if b.is_empty() {
                continue;
            }
            match gain(&b, &d, self.kind) {
                Ok(g) => self.set_gain(regime, field, split, method, g),
                Err(RomError::ZeroReference) => warn!("no usable baseline errors for {regime}/{field}/{split}"),
                Err(e) => return Err(e),
            }
        }
        self.statistics = stats;
        Ok(())
    }
}

pub const GAINS_HEADER: &str = "regime,field,split,method,value";
pub const ERRORS_HEADER: &str = "regime,method,field,split,param,t,value";

pub fn gains_csv(report: &Report) -> String {
    let mut s = format!("{GAINS_HEADER}\n");
    for g in report.gain_records() {
        let _ = writeln!(s, "{},{},{},{},{}", g.regime, g.field, g.split, g.method, g.value);
    }
    s
}

pub fn errors_csv(report: &Report) -> String {
    let mut s = format!("{ERRORS_HEADER}\n");
    for e in &report.errors {
        for (t, v) in e.times.iter().zip(&e.values) {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", e.regime, e.method, e.field, e.split, e.param, t, v);
        }
    }
    s
}

/// Writes report.json, gains.csv and errors.csv into `dir`.
pub fn emit_reports(report: &Report, dir: &Path) -> Result<()> {
    archive::ensure_dir(dir)?;
    archive::write_json(&dir.join("report.json"), report)?;
    let g = dir.join("gains.csv");
    fs::write(&g, gains_csv(report)).map_err(|e| RomError::io(&g, e))?;
    let e = dir.join("errors.csv");
    fs::write(&e, errors_csv(report)).map_err(|er| RomError::io(&e, er))
}

pub fn load_report(path: &Path) -> Result<Report> {
    let r: Report = archive::read_json(path)?;
    archive::check_version(path, &r.format)?;
    Ok(r)
}

/// Parses errors.csv back into series, in file order.
pub fn parse_errors_csv(text: &str) -> Result<Vec<ErrorSeries>> {
    let mut out: Vec<ErrorSeries> = Vec::new();
    let mut lines = text.lines();
    if lines.next() != Some(ERRORS_HEADER) {
        return Err(RomError::format("errors.csv", "unexpected header"));
    }
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(RomError::format("errors.csv", format!("bad row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| RomError::format("errors.csv", e.to_string()));
        let param: usize = f[4].parse().map_err(|_| RomError::format("errors.csv", format!("bad param {:?}", f[4])))?;
        let (t, v) = (num(f[5])?, num(f[6])?);
        match out.last_mut() {
            Some(e)
                if e.regime == f[0] && e.method == f[1] && e.field == f[2] && e.split == f[3] && e.param == param =>
            {
                e.times.push(t);
                e.values.push(v);
            }
            _ => out.push(ErrorSeries {
                regime: f[0].into(),
                method: f[1].into(),
                field: f[2].into(),
                split: f[3].into(),
                param,
                mu: vec![],
                times: vec![t],
                values: vec![v],
            }),
        }
    }
    Ok(out)
}
