//! Training data, its spectral decomposition, and the purely data-dependent
//! quantities: difficulty `Q`, the imbalance threshold `C~`, and the
//! predicted sharpness `S_D`. Also hosts the synthetic generators and CSV
//! ingestion.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, thin_svd, DenseMatrix, ThinSvd};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Guard used inside `Q = sum d_i^2 / max(sigma_i^2, Q_GUARD)`.
pub const Q_GUARD: f64 = 1e-9;

/// Default relative cutoff for discarding trailing singular values.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    x: DenseMatrix<T>,
    y: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: DenseMatrix<T>, y: Vec<T>) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                context: "Dataset::new",
                expected: x.rows(),
                got: y.len(),
            });
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { context: "Dataset" });
        }
        if y.iter().all(|&v| v == T::zero()) {
            return Err(Error::ZeroLabels);
        }
        Ok(Dataset { x, y })
    }

    pub fn x(&self) -> &DenseMatrix<T> {
        &self.x
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    /// Sample count N.
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn cast_from_f64(src: &Dataset<f64>) -> Self {
        Dataset {
            x: DenseMatrix::from_f64_matrix(src.x()),
            y: src.y().iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

/// Spectral view of a dataset: thin SVD of X, label coefficients
/// `d_i = e_i^T y`, the out-of-column-space remainder, and difficulty Q.
#[derive(Clone, Debug)]
pub struct SpectralData<T> {
    pub svd: ThinSvd<T>,
    pub d_coeffs: Vec<T>,
    pub y_perp_norm: T,
    /// Guarded difficulty; `None` when the data matrix has rank zero.
    pub q: Option<T>,
    pub sum_d_sq: T,
    n: usize,
}

impl<T: Scalar> SpectralData<T> {
    pub fn rank(&self) -> usize {
        self.svd.rank
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.svd.right_vectors.rows()
    }

    pub fn sigma(&self, i: usize) -> T {
        self.svd.singular_values[i]
    }

    pub fn sigma1(&self) -> T {
        self.svd.singular_values[0]
    }

    /// Irreducible part of the loss, `||y_perp||^2 / (2N)`. Training targets
    /// the projection of y onto col(X); this constant is reported alongside.
    pub fn loss_floor(&self) -> T {
        self.y_perp_norm * self.y_perp_norm / (T::from_usize(2) * T::from_usize(self.n))
    }

    /// Left singular vector `e_i` as an owned column.
    pub fn left_vector(&self, i: usize) -> Vec<T> {
        self.svd.left_vectors.column(i)
    }

    /// Right singular vector `w_i` as an owned column.
    pub fn right_vector(&self, i: usize) -> Vec<T> {
        self.svd.right_vectors.column(i)
    }
}

/// Spectral decomposition with the guarded difficulty.
pub fn decompose<T: Scalar>(ds: &Dataset<T>) -> Result<SpectralData<T>> {
    let svd = thin_svd(ds.x(), T::from_f64(DEFAULT_RANK_TOL))?;
    let r = svd.rank;
    let mut d_coeffs = Vec::with_capacity(r);
    for i in 0..r {
        d_coeffs.push(dot(&svd.left_vectors.column(i), ds.y()));
    }
    let mut y_par = vec![T::zero(); ds.n()];
    for i in 0..r {
        let e = svd.left_vectors.column(i);
        for (yp, &ei) in y_par.iter_mut().zip(&e) {
            *yp += d_coeffs[i] * ei;
        }
    }
    let y_perp: Vec<T> = ds
        .y()
        .iter()
        .zip(&y_par)
        .map(|(&y, &p)| y - p)
        .collect();
    let y_perp_norm = norm(&y_perp);
    let sum_d_sq = d_coeffs.iter().map(|&d| d * d).sum::<T>();
    let guard = T::from_f64(Q_GUARD);
    let q = if r == 0 {
        None
    } else {
        Some(
            (0..r)
                .map(|i| {
                    let s2 = svd.singular_values[i] * svd.singular_values[i];
                    d_coeffs[i] * d_coeffs[i] / s2.max(guard)
                })
                .sum::<T>(),
        )
    };
    Ok(SpectralData {
        svd,
        d_coeffs,
        y_perp_norm,
        q,
        sum_d_sq,
        n: ds.n(),
    })
}

/// Dataset difficulty `Q = sum d_i^2 / max(sigma_i^2, 1e-9)`.
pub fn difficulty<T: Scalar>(sd: &SpectralData<T>) -> Result<T> {
    sd.q.ok_or(Error::UndefinedDifficulty {
        reason: "data matrix has rank zero",
    })
}

/// Imbalance threshold `C~ = sigma_1 Q / sqrt(sum d^2) - sqrt(sum d^2) / sigma_1`.
pub fn c_tilde<T: Scalar>(sd: &SpectralData<T>) -> Result<T> {
    let q = difficulty(sd)?;
    if !(sd.sum_d_sq > T::zero()) {
        return Err(Error::UndefinedDifficulty {
            reason: "labels orthogonal to col(X)",
        });
    }
    let s = sd.sum_d_sq.sqrt();
    Ok(sd.sigma1() * q / s - s / sd.sigma1())
}

/// Predicted sharpness `S_D = sigma_1^2 Q^{(D-1)/D} / N`.
pub fn predicted_sharpness<T: Scalar>(sd: &SpectralData<T>, depth: usize, n: usize) -> Result<T> {
    if depth < 2 {
        return Err(Error::InvalidArgument("depth must be >= 2".into()));
    }
    let q = difficulty(sd)?;
    if !(q > T::zero()) {
        return Err(Error::UndefinedDifficulty {
            reason: "Q must be positive",
        });
    }
    let expo = T::from_f64((depth as f64 - 1.0) / depth as f64);
    Ok(sd.sigma1() * sd.sigma1() * q.powf(expo) / T::from_usize(n))
}

/// Two-row synthetic generator: two orthonormalized uniform random
/// directions, rows `common +- signal`, labels built from the eigenvectors
/// of `X X^T` (ascending eigenvalue order) scaled by `(alpha, beta)`.
pub fn synth_minimal_data(
    d: usize,
    common_size: f64,
    signal_size: f64,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<Dataset<f64>> {
    if d < 2 {
        return Err(Error::InvalidArgument(
            "minimal generator needs d >= 2".into(),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut c: Vec<f64> = (0..d).map(|_| rng.next_f64()).collect();
    let mut o: Vec<f64> = (0..d).map(|_| rng.next_f64()).collect();
    let mut nc = 0.0;
    for &x in &c {
        nc += x * x;
    }
    let nc = nc.sqrt();
    for x in &mut c {
        *x /= nc;
    }
    let mut proj = 0.0;
    for i in 0..d {
        proj += o[i] * c[i];
    }
    for i in 0..d {
        o[i] -= proj * c[i];
    }
    let mut no = 0.0;
    for &x in &o {
        no += x * x;
    }
    let no = no.sqrt();
    for x in &mut o {
        *x /= no;
    }
    let row0: Vec<f64> = (0..d)
        .map(|i| common_size * c[i] + signal_size * o[i])
        .collect();
    let row1: Vec<f64> = (0..d)
        .map(|i| common_size * c[i] - signal_size * o[i])
        .collect();
    let (mut g00, mut g01, mut g11) = (0.0, 0.0, 0.0);
    for i in 0..d {
        g00 += row0[i] * row0[i];
        g01 += row0[i] * row1[i];
        g11 += row1[i] * row1[i];
    }
    let ((_, v1), (_, v2)) = eigh2(g00, g01, g11);
    let y = vec![
        alpha * v1.0 + beta * v2.0,
        alpha * v1.1 + beta * v2.1,
    ];
    let x = DenseMatrix::from_rows(&[row0, row1])?;
    Dataset::new(x, y)
}

/// Closed-form eigendecomposition of `[[a, b], [b, c]]`, ascending, with
/// each eigenvector's first non-tiny entry made positive. Uses only
/// IEEE-exact operations so results are mirrorable bit-for-bit.
fn eigh2(a: f64, b: f64, c: f64) -> ((f64, (f64, f64)), (f64, (f64, f64))) {
    let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
    let l1 = (a + c - disc) / 2.0;
    let l2 = (a + c + disc) / 2.0;
    let v1 = evec2(a, b, c, l1).unwrap_or((1.0, 0.0));
    let v2 = evec2(a, b, c, l2).unwrap_or((0.0, 1.0));
    ((l1, v1), (l2, v2))
}

fn evec2(a: f64, b: f64, c: f64, lam: f64) -> Option<(f64, f64)> {
    let (x1, y1) = (b, lam - a);
    let (x2, y2) = (lam - c, b);
    let n1 = x1 * x1 + y1 * y1;
    let n2 = x2 * x2 + y2 * y2;
    let (mut x, mut y, n) = if n1 >= n2 {
        (x1, y1, n1)
    } else {
        (x2, y2, n2)
    };
    if n == 0.0 {
        return None;
    }
    let nn = n.sqrt();
    x /= nn;
    y /= nn;
    let flip = if x.abs() > 1e-12 { x < 0.0 } else { y < 0.0 };
    if flip {
        x = -x;
        y = -y;
    }
    Some((x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// y entries i.i.d. standard normal.
    Gaussian,
    /// Exactly ceil(N/2) labels +1 and floor(N/2) labels -1, order shuffled.
    PlusMinusBalanced,
}

/// i.i.d. standard-normal X with labels per `label_mode`.
pub fn synth_gaussian(
    n: usize,
    d: usize,
    label_mode: LabelMode,
    seed: u64,
) -> Result<Dataset<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("need N, d >= 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.next_gaussian()).collect();
    let x = DenseMatrix::new(n, d, data)?;
    let y = match label_mode {
        LabelMode::Gaussian => (0..n).map(|_| rng.next_gaussian()).collect(),
        LabelMode::PlusMinusBalanced => {
            let mut y: Vec<f64> = (0..n)
                .map(|i| if i < n.div_ceil(2) { 1.0 } else { -1.0 })
                .collect();
            for i in (1..n).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                y.swap(i, j);
            }
            y
        }
    };
    Dataset::new(x, y)
}

/// Column selection for CSV ingestion.
#[derive(Clone, Debug, Default)]
pub struct CsvColumns {
    /// Header names of the feature columns; empty means "all but the label".
    pub features: Vec<String>,
    /// Header name of the label column; `None` means the last column.
    pub label: Option<String>,
}

/// Loads a header-ed numeric CSV: feature columns then a label column,
/// '.'-decimal floats, optional per-feature standardization
/// (mean 0, variance 1, std guarded at 1e-12).
pub fn load_csv(path: &Path, columns: &CsvColumns, standardize: bool) -> Result<Dataset<f64>> {
    let path_str = path.display().to_string();
    let ing = |row: usize, message: String| Error::Ingestion {
        path: path_str.clone(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ing(0, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ing(0, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(ing(0, "empty header row".into()));
    }
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ing(0, format!("missing column `{name}`")))
    };
    let label_idx = match &columns.label {
        Some(name) => col_index(name)?,
        None => headers.len() - 1,
    };
    let feature_idx: Vec<usize> = if columns.features.is_empty() {
        (0..headers.len()).filter(|&i| i != label_idx).collect()
    } else {
        columns
            .features
            .iter()
            .map(|name| col_index(name))
            .collect::<Result<_>>()?
    };
    if feature_idx.is_empty() {
        return Err(ing(0, "no feature columns".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ing(row_no + 1, e.to_string()))?;
        let parse = |idx: usize| -> Result<f64> {
            let cell = record.get(idx).ok_or_else(|| {
                ing(
                    row_no + 1,
                    format!("missing cell in column `{}`", headers[idx]),
                )
            })?;
            cell.parse::<f64>().map_err(|_| {
                ing(
                    row_no + 1,
                    format!("non-numeric cell `{cell}` in column `{}`", headers[idx]),
                )
            })
        };
        let mut row = Vec::with_capacity(feature_idx.len());
        for &idx in &feature_idx {
            row.push(parse(idx)?);
        }
        rows.push(row);
        labels.push(parse(label_idx)?);
    }
    if rows.is_empty() {
        return Err(ing(0, "need at least one data row".into()));
    }

    if standardize {
        let n = rows.len() as f64;
        let d = feature_idx.len();
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-12);
            for row in &mut rows {
                row[j] = (row[j] - mean) / std;
            }
        }
    }

    let x = DenseMatrix::from_rows(&rows)?;
    Dataset::new(x, labels)
}

/// Writes the generator/ingestion CSV format: header `f0,...,f{d-1},y`,
/// shortest-round-trip binary64 literals.
pub fn save_csv(ds: &Dataset<f64>, path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    let header: Vec<String> = (0..ds.dim())
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("y".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..ds.n() {
        let mut cells: Vec<String> = ds.x().row(i).iter().map(|v| format!("{v}")).collect();
        cells.push(format!("{}", ds.y()[i]));
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// The exact 2x2 instance used by the edge-of-stability replication runs.
pub fn eos_dataset() -> Dataset<f64> {
    let x = DenseMatrix::from_rows(&[
        vec![1.54099607, -0.2934289],
        vec![-2.17878938, 0.56843126],
    ])
    .expect("static dims");
    Dataset::new(x, vec![-1.08452237, -1.39859545]).expect("static data")
}
