//! S-parameter ingestion and the self-interference matrix.
//!
//! Mutual coupling between array ports is taken directly as the leakage
//! channel from downlink (transmitting) elements into uplink (receiving)
//! elements: `H_self[r][c] = S[up[r]][down[c]]`.
//!
//! Touchstone v1 `.sNp` files are read and written for S-parameters only.
//! Two-port files use the S11 S21 S12 S22 ordering; all other port counts
//! are row-major with continuation lines.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ArrayGeometry;
use crate::linalg::{all_finite, CMatrix};
use crate::SPEED_OF_LIGHT;

/// Largest port count accepted from a Touchstone file.
pub const MAX_PORTS: usize = 64;

/// Entry magnitudes above 1 are tolerated with a warning up to this bound.
pub const PASSIVITY_LIMIT: f64 = 1.01;

/// Absolute tolerance on S = Sᵀ for sources that declare reciprocity.
pub const RECIPROCITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("cannot infer port count from file name `{0}` (expected .sNp)")]
    BadExtension(String),
    #[error("line {line}: malformed option line: {msg}")]
    MalformedOptions { line: usize, msg: String },
    #[error("missing option line")]
    MissingOptions,
    #[error("unsupported parameter type `{0}` (only S-parameters are supported)")]
    UnsupportedParameter(String),
    #[error("line {line}: row length mismatch: {msg}")]
    RowLength { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("frequency list empty")]
    NoFrequencies,
    #[error("port count {0} outside 1..={MAX_PORTS}")]
    PortCount(usize),
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite S-parameter")]
    NonFinite,
    #[error("S[{row}][{col}] has magnitude {magnitude:.6} > {PASSIVITY_LIMIT}")]
    NotPassive {
        row: usize,
        col: usize,
        magnitude: f64,
    },
    #[error("S is not reciprocal: |S[{row}][{col}] - S[{col}][{row}]| = {deviation:e}")]
    NotReciprocal {
        row: usize,
        col: usize,
        deviation: f64,
    },
    #[error("overlapping index sets (element {0} is both uplink and downlink)")]
    OverlappingIndices(usize),
    #[error("element {index} outside 1..={ports}")]
    IndexOutOfRange { index: usize, ports: usize },
    #[error("element {0} listed twice")]
    DuplicateIndex(usize),
    #[error("empty {0} index set")]
    EmptyIndexSet(&'static str),
    #[error("coincident elements {0} and {1}")]
    CoincidentElements(usize, usize),
    #[error("invalid coupling parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Real, imaginary.
    Ri,
    /// Linear magnitude, angle in degrees.
    Ma,
    /// 20·log₁₀ magnitude, angle in degrees.
    Db,
}

impl DataFormat {
    fn keyword(self) -> &'static str {
        match self {
            DataFormat::Ri => "RI",
            DataFormat::Ma => "MA",
            DataFormat::Db => "DB",
        }
    }

    pub fn to_complex(self, a: f64, b: f64) -> Complex64 {
        match self {
            DataFormat::Ri => Complex64::new(a, b),
            DataFormat::Ma => Complex64::from_polar(a, b.to_radians()),
            DataFormat::Db => Complex64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
        }
    }

    pub fn from_complex(self, z: Complex64) -> (f64, f64) {
        match self {
            DataFormat::Ri => (z.re, z.im),
            DataFormat::Ma => (z.norm(), z.arg().to_degrees()),
            DataFormat::Db => (20.0 * z.norm().log10(), z.arg().to_degrees()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyUnit {
    Hz,
    KHz,
    MHz,
    GHz,
}

impl FrequencyUnit {
    pub fn multiplier(self) -> f64 {
        match self {
            FrequencyUnit::Hz => 1.0,
            FrequencyUnit::KHz => 1e3,
            FrequencyUnit::MHz => 1e6,
            FrequencyUnit::GHz => 1e9,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            FrequencyUnit::Hz => "Hz",
            FrequencyUnit::KHz => "kHz",
            FrequencyUnit::MHz => "MHz",
            FrequencyUnit::GHz => "GHz",
        }
    }
}

/// Square matrix of S-parameters at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringMatrix {
    entries: CMatrix,
    frequency_hz: f64,
    reference_impedance_ohm: f64,
}

impl ScatteringMatrix {
    pub fn new(
        entries: CMatrix,
        frequency_hz: f64,
        reference_impedance_ohm: f64,
    ) -> Result<Self, CouplingError> {
        if entries.nrows() != entries.ncols() {
            return Err(CouplingError::NotSquare {
                rows: entries.nrows(),
                cols: entries.ncols(),
            });
        }
        if entries.nrows() == 0 || entries.nrows() > MAX_PORTS {
            return Err(CouplingError::PortCount(entries.nrows()));
        }
        if !all_finite(&entries) {
            return Err(CouplingError::NonFinite);
        }
        for ((row, col), z) in indexed(&entries) {
            let magnitude = z.norm();
            if magnitude > PASSIVITY_LIMIT {
                return Err(CouplingError::NotPassive {
                    row: row + 1,
                    col: col + 1,
                    magnitude,
                });
            }
            if magnitude > 1.0 {
                log::warn!(
                    "S[{}][{}] magnitude {magnitude:.6} exceeds 1 (tolerated as measurement noise)",
                    row + 1,
                    col + 1
                );
            }
        }
        Ok(Self {
            entries,
            frequency_hz,
            reference_impedance_ohm,
        })
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn frequency_hz(&self) -> f64 {
        self.frequency_hz
    }

    pub fn reference_impedance_ohm(&self) -> f64 {
        self.reference_impedance_ohm
    }

    pub fn port_count(&self) -> usize {
        self.entries.nrows()
    }

    /// 1-based access.
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries[(row - 1, col - 1)]
    }

    pub fn check_reciprocal(&self, tolerance: f64) -> Result<(), CouplingError> {
        let n = self.port_count();
        for row in 0..n {
            for col in row + 1..n {
                let deviation = (self.entries[(row, col)] - self.entries[(col, row)]).norm();
                if deviation > tolerance {
                    return Err(CouplingError::NotReciprocal {
                        row: row + 1,
                        col: col + 1,
                        deviation,
                    });
                }
            }
        }
        Ok(())
    }
}

fn indexed(m: &CMatrix) -> impl Iterator<Item = ((usize, usize), Complex64)> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| ((r, c), m[(r, c)])))
}

/// All frequency points of a Touchstone file, converted to rectangular form.
#[derive(Debug, Clone, PartialEq)]
pub struct Touchstone {
    pub n_ports: usize,
    pub reference_impedance_ohm: f64,
    pub frequencies_hz: Vec<f64>,
    pub matrices: Vec<CMatrix>,
}

struct OptionLine {
    unit: FrequencyUnit,
    format: DataFormat,
    z0: f64,
}

fn parse_option_line(line_no: usize, body: &str) -> Result<OptionLine, CouplingError> {
    let malformed = |msg: String| CouplingError::MalformedOptions { line: line_no, msg };
    let mut unit = FrequencyUnit::GHz;
    let mut format = DataFormat::Ma;
    let mut z0 = 50.0;
    let mut tokens = body.split_whitespace();
    while let Some(tok) = tokens.next() {
        match tok.to_ascii_lowercase().as_str() {
            "hz" => unit = FrequencyUnit::Hz,
            "khz" => unit = FrequencyUnit::KHz,
            "mhz" => unit = FrequencyUnit::MHz,
            "ghz" => unit = FrequencyUnit::GHz,
            "s" => {}
            "y" | "z" | "g" | "h" => {
                return Err(CouplingError::UnsupportedParameter(
                    tok.to_ascii_uppercase(),
                ))
            }
            "ri" => format = DataFormat::Ri,
            "ma" => format = DataFormat::Ma,
            "db" => format = DataFormat::Db,
            "r" => {
                let value = tokens
                    .next()
                    .ok_or_else(|| malformed("`R` without impedance".into()))?;
                let parsed: f64 = value
                    .parse()
                    .map_err(|_| malformed(format!("bad impedance `{value}`")))?;
                if parsed.is_nan() || parsed <= 0.0 {
                    return Err(malformed(format!("impedance must be > 0, got {parsed}")));
                }
                z0 = parsed;
            }
            _ => return Err(malformed(format!("unexpected token `{tok}`"))),
        }
    }
    Ok(OptionLine { unit, format, z0 })
}

impl Touchstone {
    /// Parses file contents for a known port count.
    pub fn parse(text: &str, n_ports: usize) -> Result<Self, CouplingError> {
        if n_ports == 0 || n_ports > MAX_PORTS {
            return Err(CouplingError::PortCount(n_ports));
        }
        let per_record = 1 + 2 * n_ports * n_ports;
        let mut options: Option<OptionLine> = None;
        let mut frequencies_hz = Vec::new();
        let mut matrices = Vec::new();
        let mut record: Vec<f64> = Vec::with_capacity(per_record);
        let mut record_line = 0;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = raw.split('!').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(body) = content.strip_prefix('#') {
                // only the first option line counts
                if options.is_none() {
                    options = Some(parse_option_line(line_no, body)?);
                }
                continue;
            }
            let opts = options.as_ref().ok_or(CouplingError::MissingOptions)?;
            let values = content
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| CouplingError::Parse {
                        line: line_no,
                        msg: format!("not a number: `{tok}`"),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;

            if n_ports <= 2 {
                // two-port noise parameters follow once frequency stops increasing
                if n_ports == 2
                    && values.len() == 5
                    && frequencies_hz
                        .last()
                        .is_some_and(|&f| values[0] * opts.unit.multiplier() <= f)
                {
                    break;
                }
                if values.len() != per_record {
                    return Err(CouplingError::RowLength {
                        line: line_no,
                        msg: format!("{} values, expected {per_record}", values.len()),
                    });
                }
            }

            if record.is_empty() {
                record_line = line_no;
            }
            for v in values {
                record.push(v);
                if record.len() == per_record {
                    let (f, m) = decode_record(&record, n_ports, opts)?;
                    if frequencies_hz.last().is_some_and(|&prev| f <= prev) {
                        return Err(CouplingError::Parse {
                            line: record_line,
                            msg: "frequencies must be strictly increasing".into(),
                        });
                    }
                    frequencies_hz.push(f);
                    matrices.push(m);
                    record.clear();
                    record_line = line_no;
                } else if record.len() > per_record {
                    unreachable!();
                }
            }
            if !record.is_empty() && record.len().is_multiple_of(2) {
                // a matrix row never splits a (value, value) pair across lines,
                // and the frequency token shifts the parity
                return Err(CouplingError::RowLength {
                    line: line_no,
                    msg: "value pair split across lines".into(),
                });
            }
        }
        if !record.is_empty() {
            return Err(CouplingError::RowLength {
                line: record_line,
                msg: format!(
                    "incomplete record: {} values, expected {per_record}",
                    record.len()
                ),
            });
        }
        let opts = options.ok_or(CouplingError::MissingOptions)?;
        if frequencies_hz.is_empty() {
            return Err(CouplingError::NoFrequencies);
        }
        Ok(Self {
            n_ports,
            reference_impedance_ohm: opts.z0,
            frequencies_hz,
            matrices,
        })
    }

    /// Matrix at the frequency point nearest to `frequency_hz`, plus the
    /// signed offset `selected - requested`.
    pub fn select(&self, frequency_hz: f64) -> Result<(ScatteringMatrix, f64), CouplingError> {
        let (idx, &f) = self
            .frequencies_hz
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - frequency_hz)
                    .abs()
                    .total_cmp(&(b.1 - frequency_hz).abs())
            })
            .ok_or(CouplingError::NoFrequencies)?;
        let s = ScatteringMatrix::new(self.matrices[idx].clone(), f, self.reference_impedance_ohm)?;
        Ok((s, f - frequency_hz))
    }

    /// Renders the file in the given data format and frequency unit.
    pub fn render(&self, format: DataFormat, unit: FrequencyUnit) -> String {
        let n = self.n_ports;
        let mut out = String::new();
        let _ = writeln!(out, "! {n}-port S-parameters");
        let _ = writeln!(
            out,
            "# {} S {} R {}",
            unit.keyword(),
            format.keyword(),
            self.reference_impedance_ohm
        );
        for (f, m) in self.frequencies_hz.iter().zip(&self.matrices) {
            let freq = f / unit.multiplier();
            let pair = |z: Complex64| {
                let (a, b) = format.from_complex(z);
                format!("{a} {b}")
            };
            if n <= 2 {
                let order: &[(usize, usize)] = if n == 1 {
                    &[(0, 0)]
                } else {
                    &[(0, 0), (1, 0), (0, 1), (1, 1)]
                };
                let cells: Vec<String> = order.iter().map(|&rc| pair(m[rc])).collect();
                let _ = writeln!(out, "{freq} {}", cells.join(" "));
            } else {
                for r in 0..n {
                    let cells: Vec<String> = (0..n).map(|c| pair(m[(r, c)])).collect();
                    for (chunk_idx, chunk) in cells.chunks(4).enumerate() {
                        let lead = if r == 0 && chunk_idx == 0 {
                            format!("{freq} ")
                        } else {
                            " ".repeat(4)
                        };
                        let _ = writeln!(out, "{lead}{}", chunk.join(" "));
                    }
                }
            }
        }
        out
    }
}

fn decode_record(
    record: &[f64],
    n_ports: usize,
    opts: &OptionLine,
) -> Result<(f64, CMatrix), CouplingError> {
    let f = record[0] * opts.unit.multiplier();
    let mut m = CMatrix::zeros(n_ports, n_ports);
    for (k, pair) in record[1..].chunks_exact(2).enumerate() {
        let z = opts.format.to_complex(pair[0], pair[1]);
        let (r, c) = if n_ports == 2 {
            // S11 S21 S12 S22
            (k % 2, k / 2)
        } else {
            (k / n_ports, k % n_ports)
        };
        m[(r, c)] = z;
    }
    Ok((f, m))
}

/// Port count from an `.sNp` extension.
pub fn ports_from_extension(path: &Path) -> Result<usize, CouplingError> {
    let name = path.display().to_string();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .ok_or_else(|| CouplingError::BadExtension(name.clone()))?
        .to_ascii_lowercase();
    ext.strip_prefix('s')
        .and_then(|rest| rest.strip_suffix('p'))
        .and_then(|digits| digits.parse::<usize>().ok())
        .ok_or(CouplingError::BadExtension(name))
}

pub fn read_touchstone(path: impl AsRef<Path>) -> Result<Touchstone, CouplingError> {
    let path = path.as_ref();
    let n = ports_from_extension(path)?;
    Touchstone::parse(&fs::read_to_string(path)?, n)
}

/// Reads a Touchstone file and returns the S-matrix nearest to
/// `frequency_hz` together with the selection offset in Hz.
pub fn load_touchstone(
    path: impl AsRef<Path>,
    frequency_hz: f64,
) -> Result<(ScatteringMatrix, f64), CouplingError> {
    let ts = read_touchstone(path)?;
    let (s, delta) = ts.select(frequency_hz)?;
    if delta != 0.0 {
        log::info!(
            "selected S-parameters at {} Hz ({delta:+} Hz from request)",
            s.frequency_hz()
        );
    }
    Ok((s, delta))
}

pub fn write_touchstone(
    path: impl AsRef<Path>,
    ts: &Touchstone,
    format: DataFormat,
    unit: FrequencyUnit,
) -> io::Result<()> {
    fs::write(path, ts.render(format, unit))
}

/// Mutual-coupling block between disjoint uplink and downlink element sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfInterferenceMatrix {
    entries: CMatrix,
    uplink_indices: Vec<usize>,
    downlink_indices: Vec<usize>,
}

impl SelfInterferenceMatrix {
    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn uplink_indices(&self) -> &[usize] {
        &self.uplink_indices
    }

    pub fn downlink_indices(&self) -> &[usize] {
        &self.downlink_indices
    }
}

/// Checks that two 1-based index sets are non-empty, in range, free of
/// repeats and disjoint.
pub fn validate_partition(
    ports: usize,
    uplink: &[usize],
    downlink: &[usize],
) -> Result<(), CouplingError> {
    if uplink.is_empty() {
        return Err(CouplingError::EmptyIndexSet("uplink"));
    }
    if downlink.is_empty() {
        return Err(CouplingError::EmptyIndexSet("downlink"));
    }
    let mut seen = vec![0u8; ports + 1];
    for (&index, tag) in uplink
        .iter()
        .map(|i| (i, 1u8))
        .chain(downlink.iter().map(|i| (i, 2u8)))
    {
        if index == 0 || index > ports {
            return Err(CouplingError::IndexOutOfRange { index, ports });
        }
        match (seen[index], tag) {
            (0, _) => seen[index] = tag,
            (prev, t) if prev == t => return Err(CouplingError::DuplicateIndex(index)),
            _ => return Err(CouplingError::OverlappingIndices(index)),
        }
    }
    Ok(())
}

pub fn build_h_self(
    s: &ScatteringMatrix,
    uplink_indices: &[usize],
    downlink_indices: &[usize],
) -> Result<SelfInterferenceMatrix, CouplingError> {
    validate_partition(s.port_count(), uplink_indices, downlink_indices)?;
    let entries = CMatrix::from_fn(uplink_indices.len(), downlink_indices.len(), |r, c| {
        s.get(uplink_indices[r], downlink_indices[c])
    });
    Ok(SelfInterferenceMatrix {
        entries,
        uplink_indices: uplink_indices.to_vec(),
        downlink_indices: downlink_indices.to_vec(),
    })
}

/// Distance-decay coupling model for arrays without measured data:
/// `S_ij = c0 · (λ/(2 r_ij))^alpha · exp(−jκ r_ij)`, zero diagonal.
pub fn synthesize_coupling(
    geometry: &ArrayGeometry,
    wavelength_m: f64,
    c0: f64,
    alpha: f64,
) -> Result<ScatteringMatrix, CouplingError> {
    if !(c0 > 0.0 && c0 < 1.0) {
        return Err(CouplingError::InvalidParameter(format!(
            "c0 must lie in (0, 1), got {c0}"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(CouplingError::InvalidParameter(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    if !(wavelength_m > 0.0 && wavelength_m.is_finite()) {
        return Err(CouplingError::InvalidParameter(format!(
            "wavelength must be > 0, got {wavelength_m}"
        )));
    }
    let m = geometry.len();
    let kappa = 2.0 * PI / wavelength_m;
    let positions = geometry.positions();
    let mut s = CMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let r = (positions[i] - positions[j]).norm();
            if r == 0.0 {
                return Err(CouplingError::CoincidentElements(i + 1, j + 1));
            }
            let magnitude = c0 * (wavelength_m / (2.0 * r)).powf(alpha);
            let z = Complex64::from_polar(magnitude, -kappa * r);
            s[(i, j)] = z;
            s[(j, i)] = z;
        }
    }
    let s = ScatteringMatrix::new(s, SPEED_OF_LIGHT / wavelength_m, 50.0)?;
    s.check_reciprocal(RECIPROCITY_TOLERANCE)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_planar_array;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_port_ri_ordering() {
        let text = "! test\n# GHz S RI R 50\n1.0 0 0 0.5 0 0.5 0 0 0\n";
        let ts = Touchstone::parse(text, 2).unwrap();
        assert_eq!(ts.frequencies_hz, vec![1e9]);
        let (s, delta) = ts.select(1e9).unwrap();
        assert_eq!(delta, 0.0);
        assert_eq!(s.get(1, 1), c(0.0, 0.0));
        assert_eq!(s.get(1, 2), c(0.5, 0.0));
        assert_eq!(s.get(2, 1), c(0.5, 0.0));
        assert_eq!(s.get(2, 2), c(0.0, 0.0));

        // S21 differs from S12: confirm which slot lands where
        let text = "# Hz S RI R 50\n100 0.1 0 0.2 0 0.3 0 0.4 0\n";
        let (s, _) = Touchstone::parse(text, 2).unwrap().select(100.0).unwrap();
        assert_eq!(s.get(2, 1), c(0.2, 0.0));
        assert_eq!(s.get(1, 2), c(0.3, 0.0));
    }

    #[test]
    fn polar_formats() {
        assert!((DataFormat::Ma.to_complex(0.5, 90.0) - c(0.0, 0.5)).norm() < 1e-15);
        let z = DataFormat::Db.to_complex(-6.0206, 0.0);
        assert!((z - c(0.5, 0.0)).norm() < 1e-4);
        let text = "# MHz S MA R 75\n2400 0.5 90\n";
        let ts = Touchstone::parse(text, 1).unwrap();
        assert_eq!(ts.reference_impedance_ohm, 75.0);
        assert!((ts.matrices[0][(0, 0)] - c(0.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn option_line_defaults_and_errors() {
        let ts = Touchstone::parse("#\n1 0.5 0\n", 1).unwrap();
        assert_eq!(ts.frequencies_hz, vec![1e9]);
        assert_eq!(ts.reference_impedance_ohm, 50.0);
        assert!(matches!(
            Touchstone::parse("# GHz Y RI R 50\n1 0 0\n", 1),
            Err(CouplingError::UnsupportedParameter(p)) if p == "Y"
        ));
        assert!(matches!(
            Touchstone::parse("# GHz S XX R 50\n1 0 0\n", 1),
            Err(CouplingError::MalformedOptions { line: 1, .. })
        ));
        assert!(matches!(
            Touchstone::parse("# GHz S RI R\n1 0 0\n", 1),
            Err(CouplingError::MalformedOptions { .. })
        ));
        assert!(matches!(
            Touchstone::parse("1 0 0\n", 1),
            Err(CouplingError::MissingOptions)
        ));
        assert!(matches!(
            Touchstone::parse("# GHz S RI R 50\n! nothing\n", 1),
            Err(CouplingError::NoFrequencies)
        ));
    }

    #[test]
    fn row_length_errors() {
        assert!(matches!(
            Touchstone::parse("# GHz S RI R 50\n1 0 0 0.5 0 0.5 0 0\n", 2),
            Err(CouplingError::RowLength { line: 2, .. })
        ));
        // 3-port record cut short
        let text = "# GHz S RI R 50\n1 0 0 0.1 0 0.1 0\n0.1 0 0 0 0.1 0\n";
        assert!(matches!(
            Touchstone::parse(text, 3),
            Err(CouplingError::RowLength { .. })
        ));
        assert!(matches!(
            Touchstone::parse("# GHz S RI R 50\n1 0 x\n", 1),
            Err(CouplingError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn three_port_row_major_with_continuations() {
        let text = "# GHz S RI R 50\n\
                    2.0 0.11 0 0.12 0 0.13 0 ! row 1\n\
                    \x20   0.21 0 0.22 0 0.23 0\n\
                    \x20   0.31 0 0.32 0 0.33 0\n";
        let ts = Touchstone::parse(text, 3).unwrap();
        let m = &ts.matrices[0];
        for r in 0..3 {
            for col in 0..3 {
                let expected = 0.1 * (r + 1) as f64 + 0.01 * (col + 1) as f64;
                assert!((m[(r, col)].re - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nearest_frequency_selection() {
        let text = "# MHz S RI R 50\n100 0.1 0\n200 0.2 0\n300 0.3 0\n";
        let ts = Touchstone::parse(text, 1).unwrap();
        let (s, delta) = ts.select(240e6).unwrap();
        assert_eq!(s.frequency_hz(), 200e6);
        assert_eq!(delta, -40e6);
        assert!(matches!(
            Touchstone::parse("# MHz S RI R 50\n200 0.1 0\n100 0.2 0\n", 1),
            Err(CouplingError::Parse { .. })
        ));
    }

    #[test]
    fn two_port_noise_block_is_skipped() {
        let text = "# GHz S RI R 50\n1 0 0 0.5 0 0.5 0 0 0\n2 0 0 0.4 0 0.4 0 0 0\n\
                    1 1.2 0.3 40 0.1\n";
        let ts = Touchstone::parse(text, 2).unwrap();
        assert_eq!(ts.frequencies_hz.len(), 2);
    }

    #[test]
    fn extension_port_count() {
        assert_eq!(ports_from_extension(Path::new("a/b.s2p")).unwrap(), 2);
        assert_eq!(ports_from_extension(Path::new("x.S16P")).unwrap(), 16);
        assert!(ports_from_extension(Path::new("x.txt")).is_err());
        assert!(ports_from_extension(Path::new("x")).is_err());
    }

    fn sample_matrix() -> ScatteringMatrix {
        let m = CMatrix::from_fn(3, 3, |r, c| {
            Complex64::new(0.1 * (r + 1) as f64, 0.01 * (r + c) as f64)
        });
        ScatteringMatrix::new(m, 1e9, 50.0).unwrap()
    }

    #[test]
    fn h_self_extraction() {
        let text = "# GHz S RI R 50\n1.0 0 0 0.5 0 0.5 0 0 0\n";
        let (s, _) = Touchstone::parse(text, 2).unwrap().select(1e9).unwrap();
        let h = build_h_self(&s, &[1], &[2]).unwrap();
        assert_eq!(h.entries().shape(), (1, 1));
        assert_eq!(h.entries()[(0, 0)], s.get(1, 2));

        assert!(matches!(
            build_h_self(&s, &[1], &[1]),
            Err(CouplingError::OverlappingIndices(1))
        ));
        assert!(build_h_self(&s, &[1], &[3])
            .unwrap_err()
            .to_string()
            .contains("outside"));
        assert!(matches!(
            build_h_self(&s, &[], &[2]),
            Err(CouplingError::EmptyIndexSet(_))
        ));

        let s3 = sample_matrix();
        assert!(matches!(
            build_h_self(&s3, &[1, 1], &[2]),
            Err(CouplingError::DuplicateIndex(1))
        ));
        let h = build_h_self(&s3, &[3, 1], &[2]).unwrap();
        assert_eq!(h.entries()[(0, 0)], s3.get(3, 2));
        assert_eq!(h.entries()[(1, 0)], s3.get(1, 2));
        assert_eq!(h.uplink_indices(), &[3, 1]);
    }

    #[test]
    fn swapped_sets_transpose_for_reciprocal_s() {
        let g = build_planar_array(3, 2, 0.05, 0.05).unwrap();
        let s = synthesize_coupling(&g, 0.1, 0.3, 1.0).unwrap();
        let a = build_h_self(&s, &[1, 4, 5], &[2, 6]).unwrap();
        let b = build_h_self(&s, &[2, 6], &[1, 4, 5]).unwrap();
        assert_eq!(a.entries().transpose(), *b.entries());
    }

    #[test]
    fn synthetic_coupling_decay() {
        let lambda = 0.1;
        let g = build_planar_array(2, 1, 0.5 * lambda, 1.0).unwrap();
        let s = synthesize_coupling(&g, lambda, 0.3, 1.0).unwrap();
        assert!((s.get(1, 2).norm() - 0.3).abs() < 1e-15);
        let g2 = build_planar_array(2, 1, lambda, 1.0).unwrap();
        let s2 = synthesize_coupling(&g2, lambda, 0.3, 1.0).unwrap();
        assert!((s2.get(1, 2).norm() - 0.15).abs() < 1e-15);
        assert!((s.frequency_hz() - SPEED_OF_LIGHT / lambda).abs() < 1e-3);
    }

    #[test]
    fn synthetic_coupling_symmetric_zero_diagonal() {
        let lambda = 0.1;
        let g = build_planar_array(2, 2, 0.5 * lambda, 0.5 * lambda).unwrap();
        let s = synthesize_coupling(&g, lambda, 0.4, 1.5).unwrap();
        let m = s.entries();
        assert_eq!(m, &m.transpose());
        for k in 0..4 {
            assert_eq!(m[(k, k)], Complex64::new(0.0, 0.0));
        }
        // diagonal neighbours at √2·0.5λ
        let expected = 0.4 * (1.0 / 2f64.sqrt()).powf(1.5);
        assert!((s.get(1, 4).norm() - expected).abs() < 1e-15);
        assert!(synthesize_coupling(&g, lambda, 1.0, 1.0).is_err());
        assert!(synthesize_coupling(&g, lambda, 0.3, 0.0).is_err());
    }

    #[test]
    fn passivity_and_reciprocity_checks() {
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.005, 0.0);
        m[(1, 0)] = c(1.005, 0.0);
        assert!(ScatteringMatrix::new(m.clone(), 1.0, 50.0).is_ok());
        m[(0, 1)] = c(1.02, 0.0);
        assert!(matches!(
            ScatteringMatrix::new(m.clone(), 1.0, 50.0),
            Err(CouplingError::NotPassive { row: 1, col: 2, .. })
        ));
        m[(0, 1)] = c(0.5, 0.0);
        m[(1, 0)] = c(0.5, 1e-3);
        let s = ScatteringMatrix::new(m, 1.0, 50.0).unwrap();
        assert!(matches!(
            s.check_reciprocal(RECIPROCITY_TOLERANCE),
            Err(CouplingError::NotReciprocal { .. })
        ));
        assert!(ScatteringMatrix::new(CMatrix::zeros(2, 3), 1.0, 50.0).is_err());
    }

    #[test]
    fn render_parse_round_trip_all_formats() {
        let ts = Touchstone {
            n_ports: 5,
            reference_impedance_ohm: 50.0,
            frequencies_hz: vec![1e9, 1.5e9],
            matrices: vec![
                CMatrix::from_fn(5, 5, |r, c| {
                    Complex64::new(0.01 * (r * 5 + c) as f64, -0.003 * c as f64 + 0.001)
                }),
                CMatrix::from_fn(5, 5, |r, c| {
                    Complex64::new(-0.02 * r as f64, 0.004 * (c + r) as f64 + 0.002)
                }),
            ],
        };
        for fmt in [DataFormat::Ri, DataFormat::Ma, DataFormat::Db] {
            let back = Touchstone::parse(&ts.render(fmt, FrequencyUnit::GHz), 5).unwrap();
            assert_eq!(back.frequencies_hz, ts.frequencies_hz);
            for (a, b) in ts.matrices.iter().zip(&back.matrices) {
                assert!(crate::linalg::max_abs_diff(a, b) < 1e-12, "{fmt:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn h_self_entries_trace_back_to_s(
            n in 2usize..7,
            seed in prop::collection::vec((-0.7f64..0.7, -0.7f64..0.7), 49),
            split in prop::collection::vec(any::<bool>(), 7),
        ) {
            let m = CMatrix::from_fn(n, n, |r, c| {
                let (a, b) = seed[r * 7 + c];
                Complex64::new(a, b)
            });
            let s = ScatteringMatrix::new(m, 1.0, 50.0).unwrap();
            let up: Vec<usize> = (1..=n).filter(|&k| split[k - 1]).collect();
            let down: Vec<usize> = (1..=n).filter(|&k| !split[k - 1]).collect();
            prop_assume!(!up.is_empty() && !down.is_empty());
            let h = build_h_self(&s, &up, &down).unwrap();
            for (r, &u) in up.iter().enumerate() {
                for (c, &d) in down.iter().enumerate() {
                    prop_assert_eq!(h.entries()[(r, c)], s.entries()[(u - 1, d - 1)]);
                }
            }
        }

        #[test]
        fn touchstone_ri_round_trip(
            n in 1usize..6,
            vals in prop::collection::vec((-0.9f64..0.9, -0.9f64..0.9), 25),
        ) {
            let m = CMatrix::from_fn(n, n, |r, c| {
                let (a, b) = vals[r * 5 + c];
                Complex64::new(a * 0.7, b * 0.7)
            });
            let ts = Touchstone { n_ports: n, reference_impedance_ohm: 50.0, frequencies_hz: vec![2.5e9], matrices: vec![m] };
            let back = Touchstone::parse(&ts.render(DataFormat::Ri, FrequencyUnit::Hz), n).unwrap();
            prop_assert!(crate::linalg::max_abs_diff(&ts.matrices[0], &back.matrices[0]) <= 1e-9);
        }

        #[test]
        fn synthetic_coupling_reciprocal_and_passive(
            mx in 1usize..5, my in 1usize..5,
            spacing in 0.5f64..2.0, c0 in 0.01f64..0.5, alpha in 1.0f64..3.0,
        ) {
            prop_assume!(mx * my >= 2);
            let lambda = 0.1;
            let g = build_planar_array(mx, my, spacing * lambda, spacing * lambda).unwrap();
            let s = synthesize_coupling(&g, lambda, c0, alpha).unwrap();
            prop_assert!(s.check_reciprocal(0.0).is_ok());
            prop_assert!(s.entries().iter().all(|z| z.norm() <= 1.0));
        }
    }
}
