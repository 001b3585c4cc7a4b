//! Panel types, CSV ingestion and cell tabulation.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEVEL_CAP: usize = 20;
pub const DEFAULT_INFINITY_TOKEN: &str = "inf";

/// One unit of a two-period panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub y0: u8,
    pub y1: u8,
    pub d: u8,
    pub x: Vec<f64>,
    pub cluster: Option<String>,
}

impl Unit {
    pub fn new(y0: u8, y1: u8, d: u8) -> Self {
        Unit {
            y0,
            y1,
            d,
            x: Vec::new(),
            cluster: None,
        }
    }

    pub fn with_x(mut self, x: Vec<f64>) -> Self {
        self.x = x;
        self
    }

    pub fn treated(&self) -> bool {
        self.d == 1
    }
}

/// Validated two-period panel. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPeriodPanel {
    units: Vec<Unit>,
    dim_x: usize,
    dropped_rows: usize,
}

impl TwoPeriodPanel {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        let dim_x = units.first().map_or(0, |u| u.x.len());
        let panel = TwoPeriodPanel {
            units,
            dim_x,
            dropped_rows: 0,
        };
        panel.validate()?;
        Ok(panel)
    }

    /// Build from parallel 0/1 arrays with no covariates.
    pub fn from_arrays(y0: &[u8], y1: &[u8], d: &[u8]) -> Result<Self> {
        if y0.len() != y1.len() || y0.len() != d.len() {
            return Err(Error::InvalidInput("array lengths differ".into()));
        }
        let units = (0..y0.len())
            .map(|i| Unit::new(y0[i], y1[i], d[i]))
            .collect();
        Self::new(units)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, u) in self.units.iter().enumerate() {
            for (name, v) in [("y0", u.y0), ("y1", u.y1), ("d1", u.d)] {
                if v > 1 {
                    return Err(Error::NonBinaryValue {
                        row: i + 1,
                        column: name.into(),
                        value: v.to_string(),
                    });
                }
            }
            if u.x.len() != self.dim_x {
                return Err(Error::InvalidInput(format!(
                    "unit {} has {} covariates, expected {}",
                    i + 1,
                    u.x.len(),
                    self.dim_x
                )));
            }
            if let Some(j) = u.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonNumericValue {
                    row: i + 1,
                    column: format!("x[{j}]"),
                    value: u.x[j].to_string(),
                });
            }
        }
        let treated = self.n_treated();
        if treated == 0 {
            return Err(Error::EmptyArm("no treated units (d1 = 1)".into()));
        }
        if treated == self.units.len() {
            return Err(Error::EmptyArm("no control units (d1 = 0)".into()));
        }
        Ok(())
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.treated()).count()
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    /// Rows removed by listwise deletion during loading.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn has_clusters(&self) -> bool {
        self.units.iter().any(|u| u.cluster.is_some())
    }

    /// Dense cluster index per unit. Units without a label form their own cluster.
    pub fn cluster_index(&self) -> (Vec<usize>, usize) {
        cluster_index_of(self.units.iter().map(|u| u.cluster.as_deref()))
    }

    /// Same panel with covariates replaced.
    pub fn with_covariates(&self, x: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != self.n() {
            return Err(Error::InvalidInput("covariate row count differs".into()));
        }
        let units = self
            .units
            .iter()
            .zip(x)
            .map(|(u, x)| Unit { x, ..u.clone() })
            .collect();
        let mut p = Self::new(units)?;
        p.dropped_rows = self.dropped_rows;
        Ok(p)
    }

    /// Covariates `[y0, x]`.
    pub fn augmented_with_y0(&self) -> Self {
        let units: Vec<Unit> = self
            .units
            .iter()
            .map(|u| {
                let mut x = Vec::with_capacity(u.x.len() + 1);
                x.push(u.y0 as f64);
                x.extend_from_slice(&u.x);
                Unit { x, ..u.clone() }
            })
            .collect();
        TwoPeriodPanel {
            units,
            dim_x: self.dim_x + 1,
            dropped_rows: self.dropped_rows,
        }
    }

    /// Same units, covariates removed.
    pub fn without_covariates(&self) -> Self {
        TwoPeriodPanel {
            units: self
                .units
                .iter()
                .map(|u| Unit {
                    x: Vec::new(),
                    ..u.clone()
                })
                .collect(),
            dim_x: 0,
            dropped_rows: self.dropped_rows,
        }
    }
}

pub(crate) fn cluster_index_of<'a>(labels: impl Iterator<Item = Option<&'a str>>) -> (Vec<usize>, usize) {
    let mut map: HashMap<&str, usize> = HashMap::new();
    let mut next = 0usize;
    let mut out = Vec::new();
    for l in labels {
        match l {
            Some(l) => {
                let id = *map.entry(l).or_insert_with(|| {
                    next += 1;
                    next - 1
                });
                out.push(id);
            }
            None => {
                out.push(next);
                next += 1;
            }
        }
    }
    (out, next)
}

/// Column names for a wide two-period file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPeriodSchema {
    pub y0: String,
    pub y1: String,
    pub d: String,
    #[serde(default)]
    pub x: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
}

impl Default for TwoPeriodSchema {
    fn default() -> Self {
        TwoPeriodSchema {
            y0: "y0".into(),
            y1: "y1".into(),
            d: "d1".into(),
            x: Vec::new(),
            cluster: None,
        }
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

fn parse_binary(field: &str, row: usize, name: &str) -> Result<u8> {
    let f = field.trim();
    match f.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(Error::NonBinaryValue {
            row,
            column: name.to_string(),
            value: f.to_string(),
        }),
    }
}

fn parse_number(field: &str, row: usize, name: &str) -> Result<f64> {
    let f = field.trim();
    match f.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumericValue {
            row,
            column: name.to_string(),
            value: f.to_string(),
        }),
    }
}

pub fn load_two_period_csv(path: impl AsRef<Path>, schema: &TwoPeriodSchema) -> Result<TwoPeriodPanel> {
    read_two_period_csv(open(path.as_ref())?, schema)
}

/// Wide two-period CSV from any reader. Rows with a blank or `NA` in a used
/// column are dropped and counted.
pub fn read_two_period_csv<R: Read>(reader: R, schema: &TwoPeriodSchema) -> Result<TwoPeriodPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let iy0 = column(&headers, &schema.y0)?;
    let iy1 = column(&headers, &schema.y1)?;
    let id = column(&headers, &schema.d)?;
    let ix: Vec<usize> = schema
        .x
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let ic = schema.cluster.as_deref().map(|c| column(&headers, c)).transpose()?;

    let mut used = vec![iy0, iy1, id];
    used.extend(&ix);
    used.extend(ic);

    let mut units = Vec::new();
    let mut dropped = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        if used.iter().any(|&c| rec.get(c).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        let y0 = parse_binary(&rec[iy0], row, &schema.y0)?;
        let y1 = parse_binary(&rec[iy1], row, &schema.y1)?;
        let d = parse_binary(&rec[id], row, &schema.d)?;
        let x = ix
            .iter()
            .zip(&schema.x)
            .map(|(&c, name)| parse_number(&rec[c], row, name))
            .collect::<Result<Vec<_>>>()?;
        let cluster = ic.map(|c| rec[c].trim().to_string());
        units.push(Unit {
            y0,
            y1,
            d,
            x,
            cluster,
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} rows with missing values");
    }
    let mut panel = TwoPeriodPanel::new(units)?;
    panel.dropped_rows = dropped;
    Ok(panel)
}

/// One unit of a staggered panel. `s == None` means never treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaggeredUnit {
    pub y: Vec<u8>,
    pub s: Option<usize>,
    pub x: Vec<f64>,
    pub cluster: Option<String>,
}

/// Validated staggered panel with periods `0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredPanel {
    units: Vec<StaggeredUnit>,
    horizon: usize,
    dropped_rows: usize,
}

impl StaggeredPanel {
    pub fn new(units: Vec<StaggeredUnit>, horizon: usize) -> Result<Self> {
        let p = StaggeredPanel {
            units,
            horizon,
            dropped_rows: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon T must be positive".into()));
        }
        let dim_x = self.units.first().map_or(0, |u| u.x.len());
        for (i, u) in self.units.iter().enumerate() {
            if u.y.len() != self.horizon + 1 {
                return Err(Error::InvalidInput(format!(
                    "unit {} has {} outcomes, expected {}",
                    i + 1,
                    u.y.len(),
                    self.horizon + 1
                )));
            }
            if let Some(t) = u.y.iter().position(|&v| v > 1) {
                return Err(Error::NonBinaryValue {
                    row: i + 1,
                    column: format!("y{t}"),
                    value: u.y[t].to_string(),
                });
            }
            if let Some(s) = u.s {
                if s == 0 || s > self.horizon {
                    return Err(Error::InvalidAdoption {
                        row: i + 1,
                        value: s.to_string(),
                        horizon: self.horizon,
                    });
                }
            }
            if u.x.len() != dim_x {
                return Err(Error::InvalidInput(format!(
                    "unit {} has {} covariates, expected {dim_x}",
                    i + 1,
                    u.x.len()
                )));
            }
        }
        if !self.units.iter().any(|u| u.s.is_none()) {
            return Err(Error::NoNeverTreated);
        }
        Ok(())
    }

    pub fn units(&self) -> &[StaggeredUnit] {
        &self.units
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim_x(&self) -> usize {
        self.units.first().map_or(0, |u| u.x.len())
    }

    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn cluster_index(&self) -> (Vec<usize>, usize) {
        cluster_index_of(self.units.iter().map(|u| u.cluster.as_deref()))
    }

    /// Adoption cohorts present in the panel, ascending.
    pub fn cohorts(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.units.iter().filter_map(|u| u.s).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn cohort_size(&self, s: Option<usize>) -> usize {
        self.units.iter().filter(|u| u.s == s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaggeredSchema {
    /// Outcome columns in period order. Empty means auto-detect `y0, y1, ...`.
    #[serde(default)]
    pub y: Vec<String>,
    pub s: String,
    #[serde(default)]
    pub x: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    pub infinity_token: String,
}

impl Default for StaggeredSchema {
    fn default() -> Self {
        StaggeredSchema {
            y: Vec::new(),
            s: "s".into(),
            x: Vec::new(),
            cluster: None,
            infinity_token: DEFAULT_INFINITY_TOKEN.into(),
        }
    }
}

fn detect_outcome_columns(headers: &csv::StringRecord) -> Vec<String> {
    let mut found: Vec<(usize, String)> = headers
        .iter()
        .filter_map(|h| {
            let h = h.trim();
            let rest = h.strip_prefix('y')?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some((rest.parse().ok()?, h.to_string()))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, h)| h).collect()
}

fn parse_adoption(field: &str, row: usize, horizon: usize, token: &str) -> Result<Option<usize>> {
    let f = field.trim();
    if f.eq_ignore_ascii_case(token) {
        return Ok(None);
    }
    let bad = || Error::InvalidAdoption {
        row,
        value: f.to_string(),
        horizon,
    };
    let v: f64 = f.parse().map_err(|_| bad())?;
    if v.fract() != 0.0 || v < 1.0 || v > horizon as f64 {
        return Err(bad());
    }
    Ok(Some(v as usize))
}

pub fn load_staggered_csv(path: impl AsRef<Path>, schema: &StaggeredSchema) -> Result<StaggeredPanel> {
    read_staggered_csv(open(path.as_ref())?, schema)
}

/// Wide staggered CSV: one row per unit, outcome columns for periods `0..=T`.
pub fn read_staggered_csv<R: Read>(reader: R, schema: &StaggeredSchema) -> Result<StaggeredPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let y_names = if schema.y.is_empty() {
        detect_outcome_columns(&headers)
    } else {
        schema.y.clone()
    };
    if y_names.len() < 2 {
        return Err(Error::MissingColumn(
            "at least two outcome columns (y0, y1, ...)".into(),
        ));
    }
    let horizon = y_names.len() - 1;
    let iy: Vec<usize> = y_names
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let is = column(&headers, &schema.s)?;
    let ix: Vec<usize> = schema
        .x
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let ic = schema.cluster.as_deref().map(|c| column(&headers, c)).transpose()?;
    let mut used = iy.clone();
    used.push(is);
    used.extend(&ix);
    used.extend(ic);

    let mut units = Vec::new();
    let mut dropped = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        if used.iter().any(|&c| rec.get(c).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        let y = iy
            .iter()
            .zip(&y_names)
            .map(|(&c, n)| parse_binary(&rec[c], row, n))
            .collect::<Result<Vec<_>>>()?;
        let s = parse_adoption(&rec[is], row, horizon, &schema.infinity_token)?;
        let x = ix
            .iter()
            .zip(&schema.x)
            .map(|(&c, n)| parse_number(&rec[c], row, n))
            .collect::<Result<Vec<_>>>()?;
        let cluster = ic.map(|c| rec[c].trim().to_string());
        units.push(StaggeredUnit { y, s, x, cluster });
    }
    if dropped > 0 {
        warn!("dropped {dropped} rows with missing values");
    }
    let mut p = StaggeredPanel::new(units, horizon)?;
    p.dropped_rows = dropped;
    Ok(p)
}

/// Column names for the long (unit x period) staggered layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongSchema {
    pub unit: String,
    pub period: String,
    pub y: String,
    pub s: String,
    #[serde(default)]
    pub x: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    pub infinity_token: String,
}

impl Default for LongSchema {
    fn default() -> Self {
        LongSchema {
            unit: "unit".into(),
            period: "t".into(),
            y: "y".into(),
            s: "s".into(),
            x: Vec::new(),
            cluster: None,
            infinity_token: DEFAULT_INFINITY_TOKEN.into(),
        }
    }
}

pub fn load_staggered_long_csv(path: impl AsRef<Path>, schema: &LongSchema) -> Result<StaggeredPanel> {
    read_staggered_long_csv(open(path.as_ref())?, schema)
}

/// Long layout pivoted to wide. Periods run from 0 to the largest observed
/// period; units missing any period are dropped. Adoption time, covariates and
/// cluster are taken from each unit's first row.
pub fn read_staggered_long_csv<R: Read>(reader: R, schema: &LongSchema) -> Result<StaggeredPanel> {
    struct Raw {
        row: usize,
        s: String,
        x: Vec<f64>,
        cluster: Option<String>,
        y: BTreeMap<usize, u8>,
        incomplete: bool,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let iu = column(&headers, &schema.unit)?;
    let it = column(&headers, &schema.period)?;
    let iy = column(&headers, &schema.y)?;
    let is = column(&headers, &schema.s)?;
    let ix: Vec<usize> = schema
        .x
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let ic = schema.cluster.as_deref().map(|c| column(&headers, c)).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut raw: HashMap<String, Raw> = HashMap::new();
    let mut max_t = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let id = rec.get(iu).unwrap_or("").trim().to_string();
        if is_missing(&id) {
            continue;
        }
        let entry = raw.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Raw {
                row,
                s: String::new(),
                x: Vec::new(),
                cluster: None,
                y: BTreeMap::new(),
                incomplete: false,
            }
        });
        let mut used = vec![it, iy, is];
        used.extend(&ix);
        used.extend(ic);
        if used.iter().any(|&c| rec.get(c).is_none_or(is_missing)) {
            entry.incomplete = true;
            continue;
        }
        let t = parse_number(&rec[it], row, &schema.period)?;
        if t < 0.0 || t.fract() != 0.0 {
            return Err(Error::NonNumericValue {
                row,
                column: schema.period.clone(),
                value: rec[it].to_string(),
            });
        }
        let t = t as usize;
        max_t = max_t.max(t);
        let y = parse_binary(&rec[iy], row, &schema.y)?;
        entry.y.insert(t, y);
        if entry.s.is_empty() {
            entry.s = rec[is].trim().to_string();
            entry.x = ix
                .iter()
                .zip(&schema.x)
                .map(|(&c, n)| parse_number(&rec[c], row, n))
                .collect::<Result<Vec<_>>>()?;
            entry.cluster = ic.map(|c| rec[c].trim().to_string());
        }
    }
    let horizon = max_t;
    let mut units = Vec::new();
    let mut dropped = 0usize;
    for id in order {
        let r = raw.remove(&id).expect("unit recorded in order");
        if r.incomplete || r.y.len() != horizon + 1 {
            dropped += 1;
            continue;
        }
        let s = parse_adoption(&r.s, r.row, horizon, &schema.infinity_token)?;
        units.push(StaggeredUnit {
            y: r.y.into_values().collect(),
            s,
            x: r.x,
            cluster: r.cluster,
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} units with missing periods or values");
    }
    let mut p = StaggeredPanel::new(units, horizon)?;
    p.dropped_rows = dropped;
    Ok(p)
}

/// Sorted distinct values of each covariate column, and each unit's level
/// index vector. Fails if a column exceeds `cap` levels.
pub(crate) fn discretize(xs: &[&[f64]], dim: usize, cap: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut vals: Vec<f64> = xs.iter().map(|x| x[j]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup();
        if vals.len() > cap {
            return Err(Error::TooManyLevels {
                column: j,
                levels: vals.len(),
                cap,
            });
        }
        levels.push(vals);
    }
    let idx = xs
        .iter()
        .map(|x| {
            (0..dim)
                .map(|j| {
                    levels[j]
                        .binary_search_by(|v| v.total_cmp(&x[j]))
                        .expect("value drawn from its own level set")
                })
                .collect()
        })
        .collect();
    Ok((levels, idx))
}

/// Key of a `CellTable` entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub y0: u8,
    pub y1: u8,
    pub d: u8,
    /// Level index per covariate column; empty when covariates are collapsed.
    pub level: Vec<usize>,
}

/// Counts of units by `(y0, y1, d)` and optionally by covariate level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    pub counts: BTreeMap<CellKey, usize>,
    /// Distinct values per covariate column (empty when collapsed).
    pub levels: Vec<Vec<f64>>,
}

impl CellTable {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Level combinations that appear in the table.
    pub fn level_keys(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.counts.keys().map(|k| k.level.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn count(&self, y0: u8, y1: u8, d: u8, level: &[usize]) -> usize {
        self.counts
            .get(&CellKey {
                y0,
                y1,
                d,
                level: level.to_vec(),
            })
            .copied()
            .unwrap_or(0)
    }

    /// Number of units in arm `d` at covariate level `level`.
    pub fn arm_count(&self, d: u8, level: &[usize]) -> usize {
        let mut n = 0;
        for y0 in 0..2 {
            for y1 in 0..2 {
                n += self.count(y0, y1, d, level);
            }
        }
        n
    }

    /// Mean of `Y_t` in arm `d` at `level`, or `None` if the arm cell is empty.
    pub fn mean(&self, t: usize, d: u8, level: &[usize]) -> Option<f64> {
        let n = self.arm_count(d, level);
        if n == 0 {
            return None;
        }
        let mut ones = 0;
        for other in 0..2 {
            ones += if t == 0 {
                self.count(1, other, d, level)
            } else {
                self.count(other, 1, d, level)
            };
        }
        Some(ones as f64 / n as f64)
    }

    /// Expand back to units, in key order.
    pub fn to_units(&self) -> Vec<Unit> {
        let mut out = Vec::with_capacity(self.total());
        for (k, &c) in &self.counts {
            let x: Vec<f64> = k
                .level
                .iter()
                .enumerate()
                .map(|(j, &l)| self.levels[j][l])
                .collect();
            for _ in 0..c {
                out.push(Unit::new(k.y0, k.y1, k.d).with_x(x.clone()));
            }
        }
        out
    }
}

/// Tabulate a panel. With `discrete_x` false, covariates are collapsed and the
/// table has the eight `(y0, y1, d)` cells (zero counts included).
pub fn to_cells(panel: &TwoPeriodPanel, discrete_x: bool, level_cap: usize) -> Result<CellTable> {
    let mut counts = BTreeMap::new();
    if !discrete_x || panel.dim_x() == 0 {
        for y0 in 0..2 {
            for y1 in 0..2 {
                for d in 0..2 {
                    counts.insert(
                        CellKey {
                            y0,
                            y1,
                            d,
                            level: Vec::new(),
                        },
                        0usize,
                    );
                }
            }
        }
        for u in panel.units() {
            *counts
                .get_mut(&CellKey {
                    y0: u.y0,
                    y1: u.y1,
                    d: u.d,
                    level: Vec::new(),
                })
                .expect("all eight cells inserted") += 1;
        }
        return Ok(CellTable {
            counts,
            levels: Vec::new(),
        });
    }
    let xs: Vec<&[f64]> = panel.units().iter().map(|u| u.x.as_slice()).collect();
    let (levels, idx) = discretize(&xs, panel.dim_x(), level_cap)?;
    for (u, level) in panel.units().iter().zip(idx) {
        *counts
            .entry(CellKey {
                y0: u.y0,
                y1: u.y1,
                d: u.d,
                level,
            })
            .or_insert(0) += 1;
    }
    Ok(CellTable { counts, levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(csv: &str) -> Result<TwoPeriodPanel> {
        read_two_period_csv(csv.as_bytes(), &TwoPeriodSchema::default())
    }

    #[test]
    fn loads_minimal_panel() {
        let p = read("y0,y1,d1\n0,1,1\n1,1,0\n0,0,0\n1,1,1\n").unwrap();
        assert_eq!(p.n(), 4);
        assert_eq!(p.n_treated(), 2);
        assert_eq!(p.units()[1], Unit::new(1, 1, 0));
    }

    #[test]
    fn rejects_non_binary_with_row() {
        let err = read("y0,y1,d1\n0,1,1\n1,2,0\n").unwrap_err();
        match err {
            Error::NonBinaryValue { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y1");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rejects_single_arm() {
        let err = read("y0,y1,d1\n0,1,1\n1,1,1\n").unwrap_err();
        assert_eq!(err.code(), "EMPTY_ARM");
    }

    #[test]
    fn missing_column() {
        let err = read("y0,y1,treat\n0,1,1\n").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "d1"));
    }

    #[test]
    fn listwise_deletion_counts() {
        let p = read("y0,y1,d1\n0,1,1\n,1,0\n0,0,0\nNA,1,1\n1,0,1\n").unwrap();
        assert_eq!(p.n(), 3);
        assert_eq!(p.dropped_rows(), 2);
    }

    #[test]
    fn covariates_and_clusters() {
        let schema = TwoPeriodSchema {
            x: vec!["age".into()],
            cluster: Some("g".into()),
            ..Default::default()
        };
        let p = read_two_period_csv(
            "y0,y1,d1,age,g\n0,1,1,3.5,a\n1,1,0,2,b\n0,0,0,1,a\n".as_bytes(),
            &schema,
        )
        .unwrap();
        assert_eq!(p.dim_x(), 1);
        assert_eq!(p.cluster_index(), (vec![0, 1, 0], 2));
        let bad = read_two_period_csv("y0,y1,d1,age,g\n0,1,1,old,a\n1,1,0,2,b\n".as_bytes(), &schema);
        assert_eq!(bad.unwrap_err().code(), "NON_NUMERIC_VALUE");
    }

    #[test]
    fn validate_is_idempotent() {
        let p = read("y0,y1,d1\n0,1,1\n1,1,0\n").unwrap();
        let q = p.clone();
        p.validate().unwrap();
        assert_eq!(p, q);
        assert_eq!(TwoPeriodPanel::new(p.units().to_vec()).unwrap(), p);
    }

    fn stag(csv: &str) -> Result<StaggeredPanel> {
        read_staggered_csv(csv.as_bytes(), &StaggeredSchema::default())
    }

    #[test]
    fn staggered_wide_infers_horizon() {
        let p = stag("y0,y1,y2,s\n0,1,1,1\n0,0,1,inf\n1,1,1,2\n").unwrap();
        assert_eq!(p.horizon(), 2);
        assert_eq!(p.units()[1].s, None);
        assert_eq!(p.cohorts(), vec![1, 2]);
    }

    #[test]
    fn staggered_rejects_zero_adoption() {
        let err = stag("y0,y1,y2,s\n0,1,1,0\n0,0,1,inf\n").unwrap_err();
        assert!(matches!(err, Error::InvalidAdoption { row: 1, .. }));
    }

    #[test]
    fn staggered_requires_never_treated() {
        let err = stag("y0,y1,y2,s\n0,1,1,1\n0,0,1,2\n").unwrap_err();
        assert_eq!(err.code(), "NO_NEVER_TREATED");
    }

    #[test]
    fn long_layout_pivots() {
        let csv = "unit,t,y,s\n\
                   a,0,0,1\na,1,1,1\na,2,1,1\n\
                   b,1,0,inf\nb,0,0,inf\nb,2,1,inf\n\
                   c,0,1,inf\nc,2,1,inf\n";
        let p = read_staggered_long_csv(csv.as_bytes(), &LongSchema::default()).unwrap();
        assert_eq!(p.horizon(), 2);
        assert_eq!(p.n(), 2);
        assert_eq!(p.dropped_rows(), 1);
        assert_eq!(p.units()[1].y, vec![0, 0, 1]);
    }

    #[test]
    fn cells_without_covariates() {
        let p = read("y0,y1,d1\n0,1,1\n0,1,1\n1,1,0\n0,0,0\n").unwrap();
        let t = to_cells(&p, false, DEFAULT_LEVEL_CAP).unwrap();
        assert_eq!(t.counts.len(), 8);
        assert_eq!(t.total(), 4);
        assert_eq!(t.count(0, 1, 1, &[]), 2);
        assert_eq!(t.mean(1, 1, &[]), Some(1.0));
    }

    #[test]
    fn too_many_levels() {
        let units: Vec<Unit> = (0..30)
            .map(|i| Unit::new(0, (i % 2) as u8, (i % 3 == 0) as u8).with_x(vec![i as f64 * 0.37]))
            .collect();
        let p = TwoPeriodPanel::new(units).unwrap();
        let err = to_cells(&p, true, 10).unwrap_err();
        assert_eq!(err.code(), "TOO_MANY_LEVELS");
        assert_eq!(to_cells(&p, false, 10).unwrap().total(), 30);
    }

    #[test]
    fn cell_round_trip() {
        let units: Vec<Unit> = (0..40)
            .map(|i| {
                Unit::new((i % 2) as u8, (i % 5 < 2) as u8, (i % 3 == 0) as u8)
                    .with_x(vec![(i % 4) as f64, (i % 3) as f64 - 1.0])
            })
            .collect();
        let p = TwoPeriodPanel::new(units).unwrap();
        let t = to_cells(&p, true, DEFAULT_LEVEL_CAP).unwrap();
        let again = to_cells(&TwoPeriodPanel::new(t.to_units()).unwrap(), true, DEFAULT_LEVEL_CAP).unwrap();
        assert_eq!(t, again);
    }
}
