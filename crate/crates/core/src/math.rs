//! Dense f64 vectors, matrices and the handful of reductions the simulator needs.
//!
//! Every reduction sums left to right so results are bit-reproducible. Values are
//! checked for NaN/Inf once, when a [`Vec64`] or [`Mat64`] is built; the free
//! functions below operate on plain slices and only check shapes.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Order of the vector norm used to summarise value vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormOrder {
    #[default]
    L1,
    L2,
    Inf,
}

impl NormOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            NormOrder::L1 => "l1",
            NormOrder::L2 => "l2",
            NormOrder::Inf => "linf",
        }
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(NormOrder::L1),
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" | "l_inf" | "max" => Ok(NormOrder::Inf),
            other => Err(Error::invalid_input(format!(
                "unknown norm order `{other}` (expected l1, l2 or linf)"
            ))),
        }
    }
}

/// A finite vector of f64.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(elements: Vec<f64>) -> Result<Self> {
        if let Some(i) = elements.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid_input(format!(
                "non-finite element {} at index {i}",
                elements[i]
            )));
        }
        Ok(Vec64(elements))
    }

    pub fn zeros(len: usize) -> Self {
        Vec64(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vec64::new(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid_input(format!(
                "matrix data has {} elements, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid_input("matrix contains non-finite elements"));
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat64::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// ℓp norm of a non-empty vector.
pub fn lp_norm(v: &[f64], p: NormOrder) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid_input("norm of an empty vector"));
    }
    let norm = match p {
        NormOrder::L1 => v.iter().map(|x| x.abs()).sum::<f64>(),
        NormOrder::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormOrder::Inf => v.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
    };
    Ok(norm)
}

/// Softmax with max subtraction.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid_input("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid_input(format!(
            "dot product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matvec(m: &Mat64, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(Error::invalid_input(format!(
            "matvec of {}x{} matrix with vector of length {}",
            m.rows,
            m.cols,
            v.len()
        )));
    }
    Ok((0..m.rows).map(|r| dot_unchecked(m.row(r), v)).collect())
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}
