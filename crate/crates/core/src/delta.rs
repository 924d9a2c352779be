//! Delta-operator filtering with time-varying coefficients.
//!
//! All filters use the backward-difference operator `δ = T_s⁻¹ (1 − q⁻¹)`,
//! expanded into shift-operator stencils, and the zero pre-window convention:
//! every signal is taken to be zero before its first sample. Under that
//! convention the forward polynomials and the inverse recursions below are
//! exact mutual inverses from the first sample on.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sampling context: everything the delta operator needs to know.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaContext {
    sample_time: f64,
}

impl DeltaContext {
    pub fn new(sample_time: f64) -> Result<Self> {
        if !sample_time.is_finite() || sample_time <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "sample time must be positive and finite, got {sample_time}"
            )));
        }
        Ok(Self { sample_time })
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn nyquist_hz(&self) -> f64 {
        0.5 / self.sample_time
    }
}

/// Polynomial orders of an input-output model: `n_a` output-side coefficients
/// on δ⁰..δ^{n_a−1}, and a monic input side with free coefficients on
/// δ¹..δ^{n_b−1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOrders {
    n_a: usize,
    n_b: usize,
}

impl ModelOrders {
    pub fn new(n_a: usize, n_b: usize) -> Result<Self> {
        if n_a < 1 || n_b < 1 {
            return Err(Error::InvalidInput(format!(
                "model orders must satisfy n_a >= 1 and n_b >= 1, got n_a = {n_a}, n_b = {n_b}"
            )));
        }
        Ok(Self { n_a, n_b })
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Width of a stacked coefficient vector: n_a output-side entries followed
    /// by n_b − 1 input-side entries.
    pub fn coefficient_width(&self) -> usize {
        self.n_a + self.n_b - 1
    }
}

/// Per-sample coefficient values for one data record: row k holds the
/// coefficients in effect at sample k. `a` is N × n_a, `b` is N × (n_b − 1);
/// the input side is monic so its δ⁰ coefficient is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTrajectories {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    orders: ModelOrders,
}

impl CoefficientTrajectories {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, orders: ModelOrders) -> Result<Self> {
        if a.nrows() != b.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient trajectories disagree on length: a has {} rows, b has {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if a.ncols() != orders.n_a() || b.ncols() != orders.n_b() - 1 {
            return Err(Error::DimensionMismatch(format!(
                "coefficient trajectories have {} + {} columns, expected {} + {}",
                a.ncols(),
                b.ncols(),
                orders.n_a(),
                orders.n_b() - 1
            )));
        }
        for m in [&a, &b] {
            if let Some(bad) = m.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "coefficient trajectory entry {bad}"
                )));
            }
        }
        Ok(Self { a, b, orders })
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn orders(&self) -> ModelOrders {
        self.orders
    }
}

thread_local! {
    static INVERSE_SWEEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of sequential inverse-filter passes performed on this thread since
/// the last reset. One pass filters any number of columns simultaneously.
pub fn inverse_sweep_count() -> u64 {
    INVERSE_SWEEPS.with(|c| c.get())
}

pub fn reset_inverse_sweep_count() {
    INVERSE_SWEEPS.with(|c| c.set(0));
}

fn bump_inverse_sweeps() {
    INVERSE_SWEEPS.with(|c| c.set(c.get() + 1));
}

/// Shift-operator stencil of δ^order: weights w such that
/// (δ^order x)(k) = Σ_j w[j] · x(k − j). Entry j is
/// T_s^{−order} · binom(order, j) · (−1)^j.
pub fn delta_weights(order: usize, ctx: &DeltaContext) -> Vec<f64> {
    let scale = ctx.sample_time().powi(-(order as i32));
    let mut w = vec![0.0; order + 1];
    let mut binom = 1.0_f64;
    for (j, slot) in w.iter_mut().enumerate() {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        *slot = scale * binom * sign;
        binom = binom * (order - j) as f64 / (j + 1) as f64;
    }
    w
}

/// Applies δ^order to a signal under the zero pre-window convention.
pub fn delta_signal(x: &DVector<f64>, order: usize, ctx: &DeltaContext) -> DVector<f64> {
    let w = delta_weights(order, ctx);
    let n = x.len();
    DVector::from_fn(n, |k, _| {
        let mut acc = 0.0;
        for (j, wj) in w.iter().enumerate().take(k + 1) {
            acc += wj * x[k - j];
        }
        acc
    })
}

fn stencils(max_order_exclusive: usize, ctx: &DeltaContext) -> Vec<Vec<f64>> {
    (0..max_order_exclusive).map(|i| delta_weights(i, ctx)).collect()
}

/// Applies the time-varying polynomial Σ_i c_i(k) δ^i to a signal, where
/// column i of `coeffs` holds the trajectory of the δ^i coefficient.
pub fn apply_delta_polynomial(
    x: &DVector<f64>,
    coeffs: &DMatrix<f64>,
    ctx: &DeltaContext,
) -> Result<DVector<f64>> {
    if coeffs.nrows() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} samples but coefficient trajectories have {} rows",
            x.len(),
            coeffs.nrows()
        )));
    }
    let lags: Vec<DVector<f64>> =
        (0..coeffs.ncols()).map(|i| delta_signal(x, i, ctx)).collect();
    let n = x.len();
    let mut out = DVector::zeros(n);
    for k in 0..n {
        let mut acc = 0.0;
        for (i, lag) in lags.iter().enumerate() {
            acc += coeffs[(k, i)] * lag[k];
        }
        out[k] = acc;
    }
    Ok(out)
}

/// Output-side polynomial: (A y)(k) = Σ_{i=0}^{n_a−1} a_i(k) (δ^i y)(k).
pub fn apply_a_polynomial(
    y: &DVector<f64>,
    coeffs: &CoefficientTrajectories,
    ctx: &DeltaContext,
) -> Result<DVector<f64>> {
    apply_delta_polynomial(y, coeffs.a(), ctx)
}

/// Monic input-side polynomial: (B u)(k) = u(k) + Σ_{i=1}^{n_b−1} b_i(k) (δ^i u)(k).
pub fn apply_b_polynomial(
    u: &DVector<f64>,
    coeffs: &CoefficientTrajectories,
    ctx: &DeltaContext,
) -> Result<DVector<f64>> {
    if coeffs.len() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} samples but coefficient trajectories have {} rows",
            u.len(),
            coeffs.len()
        )));
    }
    let n = u.len();
    let n_b = coeffs.orders().n_b();
    let lags: Vec<DVector<f64>> = (1..n_b).map(|i| delta_signal(u, i, ctx)).collect();
    let mut out = u.clone();
    for k in 0..n {
        let mut acc = 0.0;
        for (i, lag) in lags.iter().enumerate() {
            acc += coeffs.b()[(k, i)] * lag[k];
        }
        out[k] += acc;
    }
    Ok(out)
}

/// Core inverse recursion. `coeff_cols` column i holds the trajectory of the
/// δ^i coefficient (column 0 included, so a monic filter passes an explicit
/// all-ones leading column). Each column of `w` is filtered independently in
/// a single pass over time; the pass solves
///   Σ_i c_i(k) (δ^i u)(k) = w(k)
/// for u(k) sample by sample, which requires the per-sample leading gain
///   c0(k) = Σ_i c_i(k) T_s^{−i}
/// to stay away from zero. The guard threshold scales with the largest |c0|
/// over the record. There is no stability guarantee: the recursion is exact,
/// and divergence shows up as overflow in the output, not as an error here.
fn inverse_sweep(
    w: &DMatrix<f64>,
    coeff_cols: &DMatrix<f64>,
    ctx: &DeltaContext,
) -> Result<DMatrix<f64>> {
    if coeff_cols.nrows() != w.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} rows but coefficient trajectories have {}",
            w.nrows(),
            coeff_cols.nrows()
        )));
    }
    if coeff_cols.ncols() == 0 {
        return Err(Error::InvalidInput(
            "inverse filter needs at least the order-0 coefficient".into(),
        ));
    }
    bump_inverse_sweeps();

    let n = w.nrows();
    let m = coeff_cols.ncols();
    let wts = stencils(m, ctx);

    let mut c0 = DVector::zeros(n);
    let mut max_gain = 0.0_f64;
    for k in 0..n {
        let mut g = 0.0;
        for i in 0..m {
            g += coeff_cols[(k, i)] * wts[i][0];
        }
        c0[k] = g;
        max_gain = max_gain.max(g.abs());
    }
    let tol = 1e-12 * max_gain.max(1.0);

    let mut u = DMatrix::zeros(n, w.ncols());
    for k in 0..n {
        if !(c0[k].abs() > tol) {
            return Err(Error::SingularLeadingCoefficient {
                step: k + 1,
                gain: c0[k].abs(),
            });
        }
        for col in 0..w.ncols() {
            // Strictly-past contributions of every δ^i term at sample k.
            let mut past = 0.0;
            for i in 1..m {
                let ci = coeff_cols[(k, i)];
                if ci == 0.0 {
                    continue;
                }
                let wt = &wts[i];
                let mut s = 0.0;
                for j in 1..wt.len().min(k + 1) {
                    s += wt[j] * u[(k - j, col)];
                }
                past += ci * s;
            }
            u[(k, col)] = (w[(k, col)] - past) / c0[k];
        }
    }
    Ok(u)
}

fn monic_coeff_cols(coeffs: &CoefficientTrajectories) -> DMatrix<f64> {
    let n = coeffs.len();
    let n_b = coeffs.orders().n_b();
    let mut cols = DMatrix::zeros(n, n_b);
    cols.column_mut(0).fill(1.0);
    for i in 1..n_b {
        cols.set_column(i, &coeffs.b().column(i - 1));
    }
    cols
}

/// Inverts the monic input-side polynomial: returns u with (B u)(k) = w(k).
pub fn inverse_monic_filter(
    w: &DVector<f64>,
    coeffs: &CoefficientTrajectories,
    ctx: &DeltaContext,
) -> Result<DVector<f64>> {
    let w_mat = DMatrix::from_column_slice(w.len(), 1, w.as_slice());
    let u = inverse_sweep(&w_mat, &monic_coeff_cols(coeffs), ctx)?;
    Ok(u.column(0).into_owned())
}

/// Same recursion as [`inverse_monic_filter`] applied to every column of `w`
/// in one pass over time.
pub fn inverse_monic_filter_multi(
    w: &DMatrix<f64>,
    coeffs: &CoefficientTrajectories,
    ctx: &DeltaContext,
) -> Result<DMatrix<f64>> {
    inverse_sweep(w, &monic_coeff_cols(coeffs), ctx)
}

pub(crate) fn inverse_monic_sweep_raw(
    w: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ctx: &DeltaContext,
) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    let mut cols = DMatrix::zeros(n, b.ncols() + 1);
    cols.column_mut(0).fill(1.0);
    for i in 0..b.ncols() {
        cols.set_column(i + 1, &b.column(i));
    }
    inverse_sweep(w, &cols, ctx)
}

/// Inverts a non-monic input-side polynomial given its full coefficient
/// trajectories (column i of `b_raw` multiplies δ^i, order 0 included).
pub fn generalized_inverse_filter(
    w: &DVector<f64>,
    b_raw: &DMatrix<f64>,
    ctx: &DeltaContext,
) -> Result<DVector<f64>> {
    let w_mat = DMatrix::from_column_slice(w.len(), 1, w.as_slice());
    let u = inverse_sweep(&w_mat, b_raw, ctx)?;
    Ok(u.column(0).into_owned())
}
