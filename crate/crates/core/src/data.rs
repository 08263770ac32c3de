//! Pilot and simulated datasets: storage, CSV ingestion, diagnostics and
//! nonparametric resampling.
//!
//! CSV schema: a header naming `y`, `t` and `x1..xp` (any column order, `x`
//! indices contiguous from 1), one row per subject, `.` as decimal point.
//! LF and CRLF line endings are both accepted.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Binary,
    Count,
    Continuous,
}

impl OutcomeKind {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::Binary => "binary",
            OutcomeKind::Count => "count",
            OutcomeKind::Continuous => "continuous",
        }
    }

    fn check<T: Scalar>(self, y: T) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            OutcomeKind::Binary => y == T::zero() || y == T::one(),
            OutcomeKind::Count => y >= T::zero() && y.fract() == T::zero(),
            OutcomeKind::Continuous => true,
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OutcomeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(OutcomeKind::Binary),
            "count" => Ok(OutcomeKind::Count),
            "continuous" => Ok(OutcomeKind::Continuous),
            other => Err(Error::InvalidParameter(format!("unknown outcome kind `{other}`"))),
        }
    }
}

/// One subject: covariates, treatment and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub x: Vec<T>,
    pub t: u8,
    pub y: T,
}

/// An immutable sample of `n` observations with a shared covariate
/// dimension. Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    kind: OutcomeKind,
    p: usize,
    x: Vec<T>,
    t: Vec<u8>,
    y: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset from row-major covariates, treatments and outcomes,
    /// checking every invariant.
    pub fn new(kind: OutcomeKind, p: usize, x: Vec<T>, t: Vec<u8>, y: Vec<T>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no observations".into()));
        }
        if t.len() != n || x.len() != n * p {
            return Err(Error::InvalidData(format!(
                "inconsistent lengths: n={n}, t={}, x={} (p={p})",
                t.len(),
                x.len()
            )));
        }
        for (row, &ti) in t.iter().enumerate() {
            if ti > 1 {
                return Err(Error::InvalidTreatment { row: row + 1, value: f64::from(ti) });
            }
        }
        for (row, &yi) in y.iter().enumerate() {
            if !kind.check(yi) {
                return Err(Error::OutcomeOutOfRange { row: row + 1, kind: kind.name(), value: yi.to_f64_lossy() });
            }
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite covariate in row {}", pos / p.max(1) + 1)));
        }
        Ok(Dataset { kind, p, x, t, y })
    }

    pub fn from_observations(kind: OutcomeKind, observations: Vec<Observation<T>>) -> Result<Self> {
        let p = observations.first().map_or(0, |o| o.x.len());
        let n = observations.len();
        let mut x = Vec::with_capacity(n * p);
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for (row, o) in observations.into_iter().enumerate() {
            if o.x.len() != p {
                return Err(Error::InvalidData(format!("row {} has {} covariates, expected {p}", row + 1, o.x.len())));
            }
            x.extend(o.x);
            t.push(o.t);
            y.push(o.y);
        }
        Self::new(kind, p, x, t, y)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    #[inline]
    pub fn x_row(&self, i: usize) -> &[T] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn t(&self, i: usize) -> u8 {
        self.t[i]
    }

    #[inline]
    pub fn y(&self, i: usize) -> T {
        self.y[i]
    }

    pub fn treatments(&self) -> &[u8] {
        &self.t
    }

    pub fn outcomes(&self) -> &[T] {
        &self.y
    }

    pub fn observation(&self, i: usize) -> Observation<T> {
        Observation { x: self.x_row(i).to_vec(), t: self.t[i], y: self.y[i] }
    }

    /// Rows at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut x = Vec::with_capacity(indices.len() * self.p);
        let mut t = Vec::with_capacity(indices.len());
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.x_row(i));
            t.push(self.t[i]);
            y.push(self.y[i]);
        }
        Dataset { kind: self.kind, p: self.p, x, t, y }
    }

    /// Nonparametric bootstrap resample: `n` row indices drawn uniformly with
    /// replacement.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let n = self.n();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        self.select(&idx)
    }

    pub fn validate(&self) -> Diagnostics {
        let mut n_arm = [0usize; 2];
        let mut events = [0.0f64; 2];
        for (&t, &y) in self.t.iter().zip(&self.y) {
            n_arm[t as usize] += 1;
            events[t as usize] += y.to_f64_lossy();
        }
        let tracks_events = matches!(self.kind, OutcomeKind::Binary | OutcomeKind::Count);
        let mut flags = Vec::new();
        if n_arm[0] == 0 {
            flags.push(DiagnosticFlag::ControlArmEmpty);
        }
        if n_arm[1] == 0 {
            flags.push(DiagnosticFlag::TreatedArmEmpty);
        }
        if tracks_events {
            for arm in [1u8, 0] {
                if n_arm[arm as usize] > 0 && events[arm as usize] == 0.0 {
                    flags.push(DiagnosticFlag::NoEvents(arm));
                }
            }
        }
        Diagnostics {
            n: self.n(),
            n_treated: n_arm[1],
            n_control: n_arm[0],
            events_treated: tracks_events.then_some(events[1]),
            events_control: tracks_events.then_some(events[0]),
            flags,
        }
    }

    /// Pooled within-arm sample variance of `y` (each arm centred on its own
    /// mean, divisor `n - 2`).
    pub fn pooled_within_arm_variance(&self) -> Result<T> {
        let mut sum = [T::zero(); 2];
        let mut cnt = [0usize; 2];
        for (&t, &y) in self.t.iter().zip(&self.y) {
            sum[t as usize] += y;
            cnt[t as usize] += 1;
        }
        if cnt[0] == 0 {
            return Err(Error::EmptyArm("control"));
        }
        if cnt[1] == 0 {
            return Err(Error::EmptyArm("treated"));
        }
        if self.n() < 3 {
            return Err(Error::InvalidData("pooled variance needs n >= 3".into()));
        }
        let mean = [sum[0] / T::from_count(cnt[0]), sum[1] / T::from_count(cnt[1])];
        let ss: T = self.t.iter().zip(&self.y).map(|(&t, &y)| (y - mean[t as usize]).powi(2)).sum();
        Ok(ss / T::from_count(self.n() - 2))
    }

    pub fn load_csv(path: impl AsRef<Path>, kind: OutcomeKind) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::read_csv(file, kind)
    }

    pub fn read_csv<R: Read>(reader: R, kind: OutcomeKind) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let y_col = find("y").ok_or_else(|| Error::MissingColumn("y".into()))?;
        let t_col = find("t").ok_or_else(|| Error::MissingColumn("t".into()))?;
        let mut x_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(col, h)| h.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()).map(|k| (k, col)))
            .collect();
        x_cols.sort_unstable();
        for (expect, &(k, _)) in (1..).zip(&x_cols) {
            if k != expect {
                return Err(Error::MissingColumn(format!("x{expect}")));
            }
        }
        let p = x_cols.len();

        let parse = |rec: &csv::StringRecord, col: usize, row: usize| -> Result<f64> {
            let raw = rec.get(col).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumeric { row, column: headers[col].to_string(), value: raw.to_string() })
        };

        let mut x = Vec::new();
        let mut t = Vec::new();
        let mut y = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let tv = parse(&rec, t_col, row)?;
            if tv != 0.0 && tv != 1.0 {
                return Err(Error::InvalidTreatment { row, value: tv });
            }
            let yv = parse(&rec, y_col, row)?;
            if !kind.check(yv) {
                return Err(Error::OutcomeOutOfRange { row, kind: kind.name(), value: yv });
            }
            for &(_, col) in &x_cols {
                x.push(T::lit(parse(&rec, col, row)?));
            }
            t.push(tv as u8);
            y.push(T::lit(yv));
        }
        Self::new(kind, p, x, t, y)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv_to(&mut w).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    /// Writes the CSV form. Floats use the shortest representation that
    /// round-trips exactly.
    pub fn write_csv_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "y,t")?;
        for k in 1..=self.p {
            write!(w, ",x{k}")?;
        }
        writeln!(w)?;
        for i in 0..self.n() {
            write!(w, "{},{}", self.y[i], self.t[i])?;
            for v in self.x_row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticFlag {
    ControlArmEmpty,
    TreatedArmEmpty,
    /// No events among subjects in the given arm.
    NoEvents(u8),
}

impl fmt::Display for DiagnosticFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosticFlag::ControlArmEmpty => f.write_str("control arm empty"),
            DiagnosticFlag::TreatedArmEmpty => f.write_str("treated arm empty"),
            DiagnosticFlag::NoEvents(arm) => write!(f, "no events in arm {arm}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub events_treated: Option<f64>,
    pub events_control: Option<f64>,
    pub flags: Vec<DiagnosticFlag>,
}

impl Diagnostics {
    /// Error for the first empty arm, if any.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.n_control == 0 {
            return Err(Error::EmptyArm("control"));
        }
        if self.n_treated == 0 {
            return Err(Error::EmptyArm("treated"));
        }
        Ok(())
    }
}
