//! Linear-in-parameters coefficient functions built from monomials of a
//! scalar scheduling variable. Output i is Σ_j θ_{i,j} ρ^j up to its degree.

use nalgebra::{DMatrix, DVector};

use super::CoefficientMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBasisMap {
    degrees: Vec<usize>,
    params: DVector<f64>,
}

impl CoefficientBasisMap {
    /// One polynomial per output, all parameters zero. The parameter vector
    /// concatenates each output's coefficients from constant to top degree.
    pub fn new(degrees: Vec<usize>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::InvalidInput(
                "basis map needs at least one output".into(),
            ));
        }
        let count = degrees.iter().map(|d| d + 1).sum();
        Ok(Self {
            degrees,
            params: DVector::zeros(count),
        })
    }

    /// `width` outputs of the same degree. The scheduling dimension must be 1;
    /// the argument is explicit so call sites read unambiguously.
    pub fn uniform(width: usize, degree: usize, scheduling_dim: usize) -> Result<Self> {
        if scheduling_dim != 1 {
            return Err(Error::InvalidInput(
                "monomial basis maps support a scalar scheduling variable only".into(),
            ));
        }
        Self::new(vec![degree; width])
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    fn block_offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut offset = 0;
        self.degrees.iter().map(move |&d| {
            let start = offset;
            offset += d + 1;
            (start, d)
        })
    }
}

impl CoefficientMap for CoefficientBasisMap {
    fn scheduling_dim(&self) -> usize {
        1
    }

    fn output_width(&self) -> usize {
        self.degrees.len()
    }

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> DVector<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, values: &DVector<f64>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, basis map needs {}",
                values.len(),
                self.params.len()
            )));
        }
        self.params.copy_from(values);
        Ok(())
    }

    fn eval(&self, rho: &[f64]) -> Result<DVector<f64>> {
        if rho.len() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "basis map expects a scalar scheduling value, got {} entries",
                rho.len()
            )));
        }
        let r = rho[0];
        let mut out = DVector::zeros(self.degrees.len());
        for (i, (start, degree)) in self.block_offsets().enumerate() {
            // Horner evaluation of the block's polynomial.
            let mut acc = self.params[start + degree];
            for j in (0..degree).rev() {
                acc = acc * r + self.params[start + j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    fn eval_with_param_jacobian(&self, rho: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let out = self.eval(rho)?;
        let r = rho[0];
        let mut jac = DMatrix::zeros(self.degrees.len(), self.params.len());
        for (i, (start, degree)) in self.block_offsets().enumerate() {
            let mut power = 1.0;
            for j in 0..=degree {
                jac[(i, start + j)] = power;
                power *= r;
            }
        }
        Ok((out, jac))
    }
}
