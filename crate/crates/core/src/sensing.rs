//! Permuted-Hadamard compressive sensing operator.
//!
//! The operator is `A = S · H · Π / √N`, where `Π` permutes the (zero-padded)
//! signal, `H` is the natural-order ±1 Hadamard matrix and `S` keeps the first
//! `M` rows. With the `1/√N` scale the kept rows are orthonormal, so
//! `A Aᵀ = I_M` whenever the signal fills the whole transform.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};

/// Magic prefix of the binary measurement container.
pub const MEASUREMENT_MAGIC: &[u8; 7] = b"CSMEAS1";

/// In-place unnormalized fast Walsh-Hadamard transform in natural (Sylvester) order.
pub fn fwht_in_place(data: &mut [f64]) -> Result<()> {
    let n = data.len();
    if !n.is_power_of_two() {
        return Err(Error::invalid(format!(
            "Hadamard transform length {n} is not a power of two"
        )));
    }
    let mut half = 1;
    while half < n {
        for block in data.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (s, d) = (*a + *b, *a - *b);
                *a = s;
                *b = d;
            }
        }
        half *= 2;
    }
    Ok(())
}

/// Returns `H · v` for the unnormalized natural-order Hadamard matrix.
pub fn fwht(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Number of kept rows for a compression ratio: `max(1, round(csr · n))`.
pub fn rows_for_ratio(n: usize, csr: f64) -> Result<usize> {
    validate_csr(csr)?;
    Ok(((csr * n as f64).round() as usize).clamp(1, n))
}

pub fn validate_csr(csr: f64) -> Result<()> {
    if !(csr > 0.0 && csr <= 1.0) {
        return Err(Error::invalid(format!(
            "compression ratio {csr} outside the valid range (0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingOperator {
    order: usize,
    num_rows: usize,
    signal_len: usize,
    permutation: Vec<usize>,
    scale: f64,
    seed: u64,
}

impl SensingOperator {
    /// Builds the operator for an `n`-sample signal (`n` a power of two).
    pub fn build(n: usize, csr: f64, seed: u64) -> Result<Self> {
        let rows = rows_for_ratio(n, csr)?;
        Self::with_rows(n, rows, seed)
    }

    /// Builds the operator with an explicit row count, as recorded in a measurement file.
    pub fn with_rows(order: usize, num_rows: usize, seed: u64) -> Result<Self> {
        if order == 0 || !order.is_power_of_two() {
            return Err(Error::invalid(format!(
                "operator order {order} is not a power of two"
            )));
        }
        let mut permutation: Vec<usize> = (0..order).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        permutation.shuffle(&mut rng);
        let mut op = Self::with_permutation(order, num_rows, permutation)?;
        op.seed = seed;
        Ok(op)
    }

    /// Builds the operator from an explicit column permutation. Mostly useful for
    /// tests that need the identity permutation.
    pub fn with_permutation(order: usize, num_rows: usize, permutation: Vec<usize>) -> Result<Self> {
        if order == 0 || !order.is_power_of_two() {
            return Err(Error::invalid(format!(
                "operator order {order} is not a power of two"
            )));
        }
        if num_rows == 0 || num_rows > order {
            return Err(Error::invalid(format!(
                "row count {num_rows} outside 1..={order}"
            )));
        }
        check_len("operator permutation", order, permutation.len())?;
        let mut seen = vec![false; order];
        for &p in &permutation {
            if p >= order || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("column permutation is not a bijection"));
            }
        }
        Ok(Self {
            order,
            num_rows,
            signal_len: order,
            permutation,
            scale: 1.0 / (order as f64).sqrt(),
            seed: 0,
        })
    }

    /// Restricts the operator to signals shorter than the transform order. The
    /// signal is zero-padded before the transform and cropped after the adjoint;
    /// `A Aᵀ = I` no longer holds exactly in that case.
    pub fn with_signal_len(mut self, signal_len: usize) -> Result<Self> {
        if signal_len == 0 || signal_len > self.order {
            return Err(Error::invalid(format!(
                "signal length {signal_len} outside 1..={}",
                self.order
            )));
        }
        self.signal_len = signal_len;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Indices of the kept Hadamard rows (always the top rows).
    pub fn row_selection(&self) -> std::ops::Range<usize> {
        0..self.num_rows
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Compression ratio `M / signal length`.
    pub fn csr(&self) -> f64 {
        self.num_rows as f64 / self.signal_len as f64
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("sensing apply", self.signal_len, x.len())?;
        let mut buf = vec![0.0; self.order];
        for (slot, &src) in buf.iter_mut().zip(&self.permutation) {
            if src < self.signal_len {
                *slot = x[src];
            }
        }
        fwht_in_place(&mut buf)?;
        buf.truncate(self.num_rows);
        buf.iter_mut().for_each(|v| *v *= self.scale);
        Ok(buf)
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("sensing adjoint", self.num_rows, y.len())?;
        let mut buf = vec![0.0; self.order];
        buf[..self.num_rows].copy_from_slice(y);
        fwht_in_place(&mut buf)?;
        let mut x = vec![0.0; self.signal_len];
        for (&v, &dst) in buf.iter().zip(&self.permutation) {
            if dst < self.signal_len {
                x[dst] = v * self.scale;
            }
        }
        Ok(x)
    }

    /// Dense `M × signal_len` matrix, row-major. Intended for small test instances.
    pub fn to_dense(&self) -> Result<Vec<Vec<f64>>> {
        let mut rows = vec![vec![0.0; self.signal_len]; self.num_rows];
        let mut e = vec![0.0; self.signal_len];
        for j in 0..self.signal_len {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            for (row, v) in rows.iter_mut().zip(col) {
                row[j] = v;
            }
            e[j] = 0.0;
        }
        Ok(rows)
    }

    /// Simulates `y = A x + noise` with a seeded Gaussian noise generator.
    pub fn measure(&self, image: &[f64], noise_sigma: f64, noise_seed: u64) -> Result<Measurement> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise sigma {noise_sigma} must be finite and nonnegative"
            )));
        }
        let mut values = self.apply(image)?;
        if noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma)
                .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for v in &mut values {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(Measurement {
            order: self.order,
            values,
            csr: self.csr(),
            noise_sigma,
            operator_seed: self.seed,
        })
    }
}

/// Compressive measurements of one image channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Hadamard order `N` of the operator that produced the values.
    pub order: usize,
    pub values: Vec<f64>,
    pub csr: f64,
    pub noise_sigma: f64,
    pub operator_seed: u64,
}

impl Measurement {
    pub fn num_rows(&self) -> usize {
        self.values.len()
    }

    /// Rebuilds the operator that produced these values for a signal of `signal_len` samples.
    pub fn operator(&self, signal_len: usize) -> Result<SensingOperator> {
        SensingOperator::with_rows(self.order, self.values.len(), self.operator_seed)?
            .with_signal_len(signal_len)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MEASUREMENT_MAGIC)?;
        w.write_all(&(self.order as u64).to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        w.write_all(&self.operator_seed.to_le_bytes())?;
        w.write_all(&self.noise_sigma.to_le_bytes())?;
        w.write_all(&self.csr.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::MeasurementFormat("missing magic".into()))?;
        if &magic != MEASUREMENT_MAGIC {
            return Err(Error::MeasurementFormat("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |what: &str| -> Result<[u8; 8]> {
            r.read_exact(&mut word)
                .map_err(|_| Error::MeasurementFormat(format!("truncated while reading {what}")))?;
            Ok(word)
        };
        let order = u64::from_le_bytes(next("N")?) as usize;
        let rows = u64::from_le_bytes(next("M")?) as usize;
        let operator_seed = u64::from_le_bytes(next("operator seed")?);
        let noise_sigma = f64::from_le_bytes(next("noise sigma")?);
        let csr = f64::from_le_bytes(next("csr")?);
        validate_header(order, rows)?;
        let mut values = Vec::with_capacity(rows);
        for _ in 0..rows {
            values.push(f64::from_le_bytes(next("values")?));
        }
        Ok(Self {
            order,
            values,
            csr,
            noise_sigma,
            operator_seed,
        })
    }

    /// Debug text form: `#`-prefixed header lines followed by one value per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# CSMEAS1")?;
        writeln!(w, "# N {}", self.order)?;
        writeln!(w, "# M {}", self.values.len())?;
        writeln!(w, "# operator_seed {}", self.operator_seed)?;
        writeln!(w, "# noise_sigma {:?}", self.noise_sigma)?;
        writeln!(w, "# csr {:?}", self.csr)?;
        for v in &self.values {
            writeln!(w, "{v:?}")?;
        }
        w.flush()
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let bad = |msg: String| Error::MeasurementFormat(msg);
        let (mut order, mut rows, mut seed, mut sigma, mut csr) = (None, None, None, None, None);
        let mut values = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                let (Some(key), value) = (parts.next(), parts.next()) else {
                    continue;
                };
                let parse_err = |k: &str| bad(format!("bad header value for {k}"));
                match (key, value) {
                    ("N", Some(v)) => order = Some(v.parse::<usize>().map_err(|_| parse_err("N"))?),
                    ("M", Some(v)) => rows = Some(v.parse::<usize>().map_err(|_| parse_err("M"))?),
                    ("operator_seed", Some(v)) => {
                        seed = Some(v.parse::<u64>().map_err(|_| parse_err("operator_seed"))?)
                    }
                    ("noise_sigma", Some(v)) => {
                        sigma = Some(v.parse::<f64>().map_err(|_| parse_err("noise_sigma"))?)
                    }
                    ("csr", Some(v)) => csr = Some(v.parse::<f64>().map_err(|_| parse_err("csr"))?),
                    _ => {}
                }
                continue;
            }
            values.push(
                line.parse::<f64>()
                    .map_err(|_| bad(format!("bad value line {line:?}")))?,
            );
        }
        let missing = |k: &str| bad(format!("missing header field {k}"));
        let order = order.ok_or_else(|| missing("N"))?;
        let rows = rows.ok_or_else(|| missing("M"))?;
        validate_header(order, rows)?;
        if values.len() != rows {
            return Err(bad(format!("header says M={rows} but found {} values", values.len())));
        }
        Ok(Self {
            order,
            values,
            csr: csr.ok_or_else(|| missing("csr"))?,
            noise_sigma: sigma.ok_or_else(|| missing("noise_sigma"))?,
            operator_seed: seed.ok_or_else(|| missing("operator_seed"))?,
        })
    }

    /// Writes the text form for a `.txt` extension and the binary container otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let w = BufWriter::new(file);
        let res = if path.extension().is_some_and(|e| e == "txt") {
            self.write_text(w)
        } else {
            self.write_binary(w)
        };
        res.map_err(|e| Error::io(path, e))
    }

    /// Loads either format, detected from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let head = r.fill_buf().map_err(|e| Error::io(path, e))?;
        if head.starts_with(MEASUREMENT_MAGIC) {
            Self::read_binary(r)
        } else if head.first() == Some(&b'#') {
            Self::read_text(r)
        } else {
            Err(Error::MeasurementFormat(format!(
                "{} is neither a CSMEAS1 container nor its text form",
                path.display()
            )))
        }
    }
}

fn validate_header(order: usize, rows: usize) -> Result<()> {
    if order == 0 || !order.is_power_of_two() {
        return Err(Error::MeasurementFormat(format!("N={order} is not a power of two")));
    }
    if rows == 0 || rows > order {
        return Err(Error::MeasurementFormat(format!("M={rows} outside 1..={order}")));
    }
    Ok(())
}
