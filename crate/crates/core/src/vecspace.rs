//! Dense vector/operator arithmetic, norm and seminorm evaluation, small
//! dense solves, quotient-space solves, and rate regression.
//!
//! Everything here is a pure function over immutable inputs; dimensions are
//! tabular-problem sized, so all solves are dense LU with partial pivoting.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use libm::{fabs, log};

/// Errors from vector-space operations.
#[derive(Debug, Clone, PartialEq)]
pub enum VecSpaceError {
    DimensionMismatch { expected: usize, got: usize },
    NonFinite,
    /// A linear system was singular or too ill-conditioned to trust, and the
    /// Neumann fallback did not converge either. For resolvent solves this
    /// signals a non-contractive operator.
    SingularSystem,
    /// The supplied distribution is not stationary for the kernel.
    NotStationary { residual: f64 },
    NonPositiveWeight,
    TooFewPoints { got: usize },
    /// Rate regression requires strictly positive ordinates.
    NonPositiveOrdinate,
}

impl fmt::Display for VecSpaceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VecSpaceError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            VecSpaceError::NonFinite => write!(f, "non-finite entry"),
            VecSpaceError::SingularSystem => {
                write!(f, "singular or non-contractive linear system")
            }
            VecSpaceError::NotStationary { residual } => {
                write!(f, "distribution is not stationary (residual {residual:e})")
            }
            VecSpaceError::NonPositiveWeight => write!(f, "weights must be strictly positive"),
            VecSpaceError::TooFewPoints { got } => {
                write!(f, "need at least 3 points for a slope fit, got {got}")
            }
            VecSpaceError::NonPositiveOrdinate => {
                write!(f, "rate regression requires y > 0")
            }
        }
    }
}

impl core::error::Error for VecSpaceError {}

/// A dense real vector; the iterate type for every solver and operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    values: Vec<f64>,
}

impl DenseVector {
    /// Builds a vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self, VecSpaceError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(VecSpaceError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self { values: vec![value; dim] }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self { values: (0..dim).map(f).collect() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &x| m.max(fabs(x)))
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `self + c * other`, checked for matching dimensions.
    pub fn add_scaled(&self, c: f64, other: &DenseVector) -> Result<DenseVector, VecSpaceError> {
        check_dim(self.dim(), other.dim())?;
        Ok(DenseVector {
            values: self
                .values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector, VecSpaceError> {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, c: f64) -> DenseVector {
        DenseVector { values: self.values.iter().map(|x| c * x).collect() }
    }
}

impl core::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), VecSpaceError> {
    if expected != got {
        Err(VecSpaceError::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// Evaluation rule for the norm or seminorm a run is measured in.
#[derive(Debug, Clone, PartialEq)]
pub enum NormSpec {
    /// `max_i |v_i|`
    Sup,
    /// `max_i |v_i| / w_i` with strictly positive weights.
    WeightedSup(Vec<f64>),
    /// `max v - min v`; a norm on the quotient modulo constant vectors.
    Span,
    /// `max_u <u, v>` over an explicit symmetric functional set; the
    /// domination factor bounds every functional's dual sup norm (its
    /// l1 norm).
    CoordinateSet { functionals: Vec<Vec<f64>>, domination: f64 },
}

impl NormSpec {
    /// Builds a coordinate-set seminorm, checking the domination bound.
    pub fn coordinate_set(
        functionals: Vec<Vec<f64>>,
        domination: f64,
    ) -> Result<Self, VecSpaceError> {
        for u in &functionals {
            let l1: f64 = u.iter().map(|x| fabs(*x)).sum();
            if !l1.is_finite() || l1 > domination + 1e-12 {
                return Err(VecSpaceError::NonPositiveWeight);
            }
        }
        Ok(NormSpec::CoordinateSet { functionals, domination })
    }

    /// Evaluates the norm of `v`.
    pub fn eval(&self, v: &DenseVector) -> Result<f64, VecSpaceError> {
        match self {
            NormSpec::Sup => Ok(v.sup_norm()),
            NormSpec::WeightedSup(w) => {
                check_dim(w.len(), v.dim())?;
                let mut m = 0.0f64;
                for (x, wi) in v.as_slice().iter().zip(w.iter()) {
                    if *wi <= 0.0 {
                        return Err(VecSpaceError::NonPositiveWeight);
                    }
                    m = m.max(fabs(*x) / wi);
                }
                Ok(m)
            }
            NormSpec::Span => {
                let s = v.as_slice();
                if s.is_empty() {
                    return Ok(0.0);
                }
                let mut lo = s[0];
                let mut hi = s[0];
                for &x in &s[1..] {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                Ok(hi - lo)
            }
            NormSpec::CoordinateSet { functionals, .. } => {
                let mut m = f64::NEG_INFINITY;
                for u in functionals {
                    check_dim(u.len(), v.dim())?;
                    let val: f64 = u.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
                    m = m.max(val);
                }
                Ok(if m.is_finite() { m } else { 0.0 })
            }
        }
    }
}

/// A dense rectangular matrix (payoff matrices and covariance blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, VecSpaceError> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in &rows {
            check_dim(ncols, r.len())?;
            for &x in r {
                if !x.is_finite() {
                    return Err(VecSpaceError::NonFinite);
                }
                data.push(x);
            }
        }
        Ok(Self { rows: nrows, cols: ncols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A square linear operator stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    dim: usize,
    data: Vec<f64>,
}

impl LinearOperator {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, VecSpaceError> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in &rows {
            check_dim(dim, r.len())?;
            for &x in r {
                if !x.is_finite() {
                    return Err(VecSpaceError::NonFinite);
                }
                data.push(x);
            }
        }
        Ok(Self { dim, data })
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self, VecSpaceError> {
        check_dim(dim * dim, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(VecSpaceError::NonFinite);
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scale(&self, c: f64) -> LinearOperator {
        LinearOperator { dim: self.dim, data: self.data.iter().map(|x| c * x).collect() }
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &DenseVector) -> Result<DenseVector, VecSpaceError> {
        check_dim(self.dim, v.dim())?;
        let x = v.as_slice();
        let out = (0..self.dim)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        Ok(DenseVector { values: out })
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &LinearOperator) -> Result<LinearOperator, VecSpaceError> {
        check_dim(self.dim, other.dim)?;
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * d..(k + 1) * d];
                let out_row = &mut out[i * d..(i + 1) * d];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(LinearOperator { dim: d, data: out })
    }

    /// Solves `(I - A) x = v` to within `tol` in sup norm.
    ///
    /// Uses a dense LU solve; when the factorization looks too
    /// ill-conditioned to trust (estimate above 1e12) or fails outright, a
    /// Neumann-series iteration takes over. Failure of both paths signals a
    /// non-contractive operator.
    pub fn resolvent_apply(
        &self,
        v: &DenseVector,
        tol: f64,
    ) -> Result<DenseVector, VecSpaceError> {
        check_dim(self.dim, v.dim())?;
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { 1.0 } else { 0.0 };
                m[i * d + j] = id - self.data[i * d + j];
            }
        }
        if let Ok(lu) = LuFactors::factor(d, m) {
            if lu.condition_estimate() <= 1e12 {
                let x = DenseVector { values: lu.solve(v.as_slice()) };
                if residual_ok(self, &x, v, tol) {
                    return Ok(x);
                }
            }
        }
        self.neumann_solve(v, tol)
    }

    fn neumann_solve(&self, v: &DenseVector, tol: f64) -> Result<DenseVector, VecSpaceError> {
        let mut x = v.clone();
        // x_{k+1} = v + A x_k converges iff the spectral radius is < 1.
        for _ in 0..200_000 {
            let next = self.apply(&x)?.add_scaled(1.0, v)?;
            let diff = next.sub(&x)?.sup_norm();
            if !diff.is_finite() {
                return Err(VecSpaceError::SingularSystem);
            }
            x = next;
            if diff <= tol * 0.5 && residual_ok(self, &x, v, tol) {
                return Ok(x);
            }
        }
        Err(VecSpaceError::SingularSystem)
    }

    /// Dense inverse of `(I - A)`, column by column.
    pub fn resolvent_matrix(&self, tol: f64) -> Result<LinearOperator, VecSpaceError> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for j in 0..d {
            let mut e = DenseVector::zeros(d);
            e.as_mut_slice()[j] = 1.0;
            let col = self.resolvent_apply(&e, tol)?;
            for i in 0..d {
                out[i * d + j] = col[i];
            }
        }
        Ok(LinearOperator { dim: d, data: out })
    }

    pub fn transpose(&self) -> LinearOperator {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[j * d + i] = self.data[i * d + j];
            }
        }
        LinearOperator { dim: d, data: out }
    }
}

fn residual_ok(a: &LinearOperator, x: &DenseVector, v: &DenseVector, tol: f64) -> bool {
    match a.apply(x) {
        Ok(ax) => match x.sub(&ax).and_then(|ix| ix.sub(v)) {
            Ok(r) => r.sup_norm() <= tol,
            Err(_) => false,
        },
        Err(_) => false,
    }
}

/// Solution of the quotient-space system used by span-seminorm problems.
///
/// `solution` satisfies `(I - P) x = v - offset * 1` with the
/// stationary-weighted mean of `x` equal to zero, and `offset` equals the
/// stationary average of `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotientSolve {
    pub solution: DenseVector,
    pub offset: f64,
}

/// Solves `(I - P) x = v - mu * 1`, `xi' x = 0` for a row-stochastic `P`
/// with stationary distribution `xi`; `mu = xi' v`.
pub fn quotient_solve(
    p: &LinearOperator,
    xi: &[f64],
    v: &DenseVector,
) -> Result<QuotientSolve, VecSpaceError> {
    let d = p.dim();
    check_dim(d, xi.len())?;
    check_dim(d, v.dim())?;
    // The system is only consistent when xi is stationary for P.
    let mut residual = 0.0f64;
    for j in 0..d {
        let col: f64 = (0..d).map(|i| xi[i] * p.get(i, j)).sum();
        residual = residual.max(fabs(col - xi[j]));
    }
    if residual > 1e-8 {
        return Err(VecSpaceError::NotStationary { residual });
    }
    // Augmented (d+1) x (d+1) system: [(I - P), 1; xi', 0] [x; mu] = [v; 0].
    let n = d + 1;
    let mut m = vec![0.0; n * n];
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            m[i * n + j] = id - p.get(i, j);
        }
        m[i * n + d] = 1.0;
        m[d * n + i] = xi[i];
    }
    let mut rhs = vec![0.0; n];
    rhs[..d].copy_from_slice(v.as_slice());
    let lu = LuFactors::factor(n, m).map_err(|_| VecSpaceError::SingularSystem)?;
    let sol = lu.solve(&rhs);
    let x = DenseVector::new(sol[..d].to_vec())?;
    let mu = sol[d];
    Ok(QuotientSolve { solution: x, offset: mu })
}

/// Stationary distribution of a row-stochastic irreducible kernel.
pub fn stationary_distribution(p: &LinearOperator) -> Result<Vec<f64>, VecSpaceError> {
    let d = p.dim();
    // (P' - I) xi = 0 with the last equation replaced by sum(xi) = 1.
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            m[i * d + j] = p.get(j, i) - id;
        }
    }
    for j in 0..d {
        m[(d - 1) * d + j] = 1.0;
    }
    let mut rhs = vec![0.0; d];
    rhs[d - 1] = 1.0;
    let lu = LuFactors::factor(d, m).map_err(|_| VecSpaceError::SingularSystem)?;
    let mut xi = lu.solve(&rhs);
    for x in &mut xi {
        if !x.is_finite() {
            return Err(VecSpaceError::SingularSystem);
        }
        // Clip the tiny negative values a near-reducible chain can produce.
        if *x < 0.0 {
            if *x < -1e-9 {
                return Err(VecSpaceError::SingularSystem);
            }
            *x = 0.0;
        }
    }
    let total: f64 = xi.iter().sum();
    if total <= 0.0 {
        return Err(VecSpaceError::SingularSystem);
    }
    for x in &mut xi {
        *x /= total;
    }
    Ok(xi)
}

/// Least-squares slope of `log y` against `log n`.
pub fn rate_slope(points: &[(u64, f64)]) -> Result<f64, VecSpaceError> {
    if points.len() < 3 {
        return Err(VecSpaceError::TooFewPoints { got: points.len() });
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(n, y) in points {
        if n == 0 {
            return Err(VecSpaceError::NonPositiveOrdinate);
        }
        if !(y > 0.0) || !y.is_finite() {
            return Err(VecSpaceError::NonPositiveOrdinate);
        }
        xs.push(log(n as f64));
        ys.push(log(y));
    }
    let k = xs.len() as f64;
    let xbar: f64 = xs.iter().sum::<f64>() / k;
    let ybar: f64 = ys.iter().sum::<f64>() / k;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - xbar) * (y - ybar);
        den += (x - xbar) * (x - xbar);
    }
    if den == 0.0 {
        return Err(VecSpaceError::TooFewPoints { got: points.len() });
    }
    Ok(num / den)
}

/// Dense LU factorization with partial pivoting.
pub(crate) struct LuFactors {
    dim: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub(crate) fn factor(dim: usize, mut m: Vec<f64>) -> Result<Self, VecSpaceError> {
        debug_assert_eq!(m.len(), dim * dim);
        let mut perm: Vec<usize> = (0..dim).collect();
        for k in 0..dim {
            let mut piv = k;
            let mut best = fabs(m[k * dim + k]);
            for i in (k + 1)..dim {
                let cand = fabs(m[i * dim + k]);
                if cand > best {
                    best = cand;
                    piv = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(VecSpaceError::SingularSystem);
            }
            if piv != k {
                perm.swap(piv, k);
                for j in 0..dim {
                    m.swap(piv * dim + j, k * dim + j);
                }
            }
            let pivot = m[k * dim + k];
            for i in (k + 1)..dim {
                let factor = m[i * dim + k] / pivot;
                m[i * dim + k] = factor;
                for j in (k + 1)..dim {
                    m[i * dim + j] -= factor * m[k * dim + j];
                }
            }
        }
        Ok(Self { dim, lu: m, perm })
    }

    /// Cheap condition proxy: ratio of extreme pivot magnitudes.
    pub(crate) fn condition_estimate(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for k in 0..self.dim {
            let d = fabs(self.lu[k * self.dim + k]);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub(crate) fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut x: Vec<f64> = self.perm.iter().map(|&i| rhs[i]).collect();
        for i in 1..d {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * d + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..d).rev() {
            let mut acc = x[i];
            for j in (i + 1)..d {
                acc -= self.lu[i * d + j] * x[j];
            }
            x[i] = acc / self.lu[i * d + i];
        }
        x
    }
}
