//! Dense matrix arithmetic and hand-derived forward/backward passes for every
//! layer type the model uses, plus a central-finite-difference gradient-check
//! harness.
//!
//! Training arithmetic is 64-bit throughout; the 32-bit view used for
//! serialization lives in [`crate::codec`]. All functions here are pure over
//! owned buffers and safe to call concurrently on disjoint data.

use crate::error::{MoecError, Result};
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MoecError::shape(
                "from_vec",
                format!("{}x{} needs {} entries, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Convenience constructor for tests: one inner vec per row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Matrix {
        let mut out = self.clone();
        map_in_place(&mut out.data, f);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MoecError::shape(
                "add_assign",
                format!("{}x{} += {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Apply `f` element-wise; row-parallel when the `parallel` feature is on.
/// Each element is produced by exactly one task, so the result is identical
/// to the serial path.
fn map_in_place(data: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
    #[cfg(feature = "parallel")]
    {
        if data.len() >= 4096 {
            data.par_chunks_mut(2048).for_each(|chunk| {
                for v in chunk {
                    *v = f(*v);
                }
            });
            return;
        }
    }
    for v in data.iter_mut() {
        *v = f(*v);
    }
}

/// y = x · w, i-k-j kernel parallelized over 128-row slabs. Every output row
/// is produced by one task with a fixed k-order, so results are bit-identical
/// to the serial path and independent of thread count.
pub fn matmul(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols != w.rows {
        return Err(MoecError::shape(
            "matmul",
            format!("{}x{} · {}x{}", x.rows, x.cols, w.rows, w.cols),
        ));
    }
    let mut y = Matrix::zeros(x.rows, w.cols);
    let cols = w.cols;
    let inner = x.cols;
    const SLAB: usize = 128;
    let slab = |t: usize, yt: &mut [f64]| {
        let row0 = t * SLAB;
        for (r, yrow) in yt.chunks_exact_mut(cols).enumerate() {
            let xrow = &x.data[(row0 + r) * inner..(row0 + r + 1) * inner];
            for (k, &a) in xrow.iter().enumerate() {
                let wrow = &w.data[k * cols..(k + 1) * cols];
                for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                    *yv += a * wv;
                }
            }
        }
    };
    run_slabs(&mut y.data, SLAB * cols, slab);
    Ok(y)
}

/// Apply `kernel(slab_index, slab)` over fixed-size row slabs, in parallel
/// when available. Slabs are disjoint, so threading never changes results.
fn run_slabs(data: &mut [f64], slab: usize, kernel: impl Fn(usize, &mut [f64]) + Sync) {
    if data.is_empty() || slab == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() > slab {
            data.par_chunks_mut(slab)
                .enumerate()
                .for_each(|(i, chunk)| kernel(i, chunk));
            return;
        }
    }
    for (i, chunk) in data.chunks_mut(slab).enumerate() {
        kernel(i, chunk);
    }
}

fn run_rows(data: &mut [f64], cols: usize, kernel: impl Fn(usize, &mut [f64]) + Sync) {
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() / cols >= 64 {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| kernel(i, row));
            return;
        }
    }
    for (i, row) in data.chunks_mut(cols).enumerate() {
        kernel(i, row);
    }
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

/// Cached forward inputs needed by [`linear_backward`].
#[derive(Debug, Clone)]
pub struct LinearTape {
    x: Matrix,
}

impl LinearTape {
    pub fn input(&self) -> &Matrix {
        &self.x
    }
}

/// Gradients of a linear layer's parameters.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dw: Matrix,
    pub db: Vec<f64>,
}

/// y = x·W + b.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<(Matrix, LinearTape)> {
    let y = linear_apply(x, w, b)?;
    Ok((y, LinearTape { x: x.clone() }))
}

/// Tape-free y = x·W + b for inference.
pub fn linear_apply(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols {
        return Err(MoecError::shape(
            "linear_apply",
            format!("bias len {} vs {} cols", b.len(), w.cols),
        ));
    }
    let mut y = matmul(x, w)?;
    for r in 0..y.rows {
        let row = y.row_mut(r);
        for (v, bv) in row.iter_mut().zip(b) {
            *v += *bv;
        }
    }
    Ok(y)
}

/// dx = dy·Wᵀ, dW = xᵀ·dy, db = column-sum(dy).
pub fn linear_backward(w: &Matrix, tape: &LinearTape, dy: &Matrix) -> Result<(Matrix, LinearGrads)> {
    let x = &tape.x;
    if dy.rows != x.rows || dy.cols != w.cols || x.cols != w.rows {
        return Err(MoecError::shape(
            "linear_backward",
            format!(
                "x {}x{}, w {}x{}, dy {}x{}",
                x.rows, x.cols, w.rows, w.cols, dy.rows, dy.cols
            ),
        ));
    }
    // dx[i][k] = Σ_j dy[i][j] · w[k][j]
    let mut dx = Matrix::zeros(x.rows, x.cols);
    let in_dim = x.cols;
    let out_dim = w.cols;
    run_rows(&mut dx.data, in_dim, |i, dxrow| {
        let dyrow = &dy.data[i * out_dim..(i + 1) * out_dim];
        for (k, dv) in dxrow.iter_mut().enumerate() {
            let wrow = &w.data[k * out_dim..(k + 1) * out_dim];
            let mut acc = 0.0;
            for (dyv, wv) in dyrow.iter().zip(wrow) {
                acc += dyv * wv;
            }
            *dv = acc;
        }
    });
    // dW[k][j] = Σ_i x[i][k]·dy[i][j], accumulated as a fixed number of
    // batch-slice partials reduced in slice order. The slice count never
    // depends on thread availability, so results are identical whether the
    // partials run serially or in parallel.
    let batch = x.rows;
    const DW_SLICES: usize = 8;
    let slice_rows = batch.div_ceil(DW_SLICES).max(1);
    let partial = |s: usize| -> (Matrix, Vec<f64>) {
        let mut dw = Matrix::zeros(w.rows, w.cols);
        let mut db = vec![0.0; out_dim];
        let lo = s * slice_rows;
        let hi = ((s + 1) * slice_rows).min(batch);
        for i in lo..hi {
            let dyrow = &dy.data[i * out_dim..(i + 1) * out_dim];
            for (dv, &g) in db.iter_mut().zip(dyrow) {
                *dv += g;
            }
            let xrow = &x.data[i * in_dim..(i + 1) * in_dim];
            for (k, &a) in xrow.iter().enumerate() {
                let dwrow = &mut dw.data[k * out_dim..(k + 1) * out_dim];
                for (dv, &g) in dwrow.iter_mut().zip(dyrow) {
                    *dv += a * g;
                }
            }
        }
        (dw, db)
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<(Matrix, Vec<f64>)> = (0..DW_SLICES).into_par_iter().map(partial).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<(Matrix, Vec<f64>)> = (0..DW_SLICES).map(partial).collect();

    let mut dw = Matrix::zeros(w.rows, w.cols);
    let mut db = vec![0.0; out_dim];
    for (pw, pb) in partials {
        for (a, b) in dw.data.iter_mut().zip(pw.data.iter()) {
            *a += *b;
        }
        for (a, b) in db.iter_mut().zip(pb.iter()) {
            *a += *b;
        }
    }
    Ok((dx, LinearGrads { dw, db }))
}

/// A fully-connected layer: weight matrix (in×out) plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            w: Matrix::zeros(in_dim, out_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearTape)> {
        linear_forward(x, &self.w, &self.b)
    }

    pub fn backward(&self, tape: &LinearTape, dy: &Matrix) -> Result<(Matrix, LinearGrads)> {
        linear_backward(&self.w, tape, dy)
    }
}

// ---------------------------------------------------------------------------
// Sine activation
// ---------------------------------------------------------------------------

/// Cached derivative factors ω·cos(ω·x) for [`sine_backward`]. Filled by a
/// single `sin_cos` sweep during the forward pass.
#[derive(Debug, Clone)]
pub struct SineTape {
    dfactor: Matrix,
}

/// y = sin(omega·x).
pub fn sine_forward(x: &Matrix, omega: f64) -> Result<(Matrix, SineTape)> {
    if omega <= 0.0 {
        return Err(MoecError::InvalidArgument(format!("omega must be > 0, got {omega}")));
    }
    let mut y = x.clone();
    let mut dfactor = Matrix::zeros(x.rows, x.cols);
    let write = |(yv, dv): (&mut f64, &mut f64)| {
        let (s, c) = (omega * *yv).sin_cos();
        *yv = s;
        *dv = omega * c;
    };
    #[cfg(feature = "parallel")]
    {
        if y.data.len() >= 4096 {
            y.data
                .par_chunks_mut(2048)
                .zip(dfactor.data.par_chunks_mut(2048))
                .for_each(|(ys, ds)| ys.iter_mut().zip(ds.iter_mut()).for_each(&write));
            return Ok((y, SineTape { dfactor }));
        }
    }
    y.data.iter_mut().zip(dfactor.data.iter_mut()).for_each(write);
    Ok((y, SineTape { dfactor }))
}

/// Tape-free y = sin(omega·x) for inference.
pub fn sine_apply(x: &Matrix, omega: f64) -> Matrix {
    x.map(|v| (omega * v).sin())
}

/// dx = dy ⊙ omega·cos(omega·x) (the factor is cached on the tape).
pub fn sine_backward(tape: &SineTape, _omega: f64, dy: &Matrix) -> Result<Matrix> {
    if dy.rows != tape.dfactor.rows || dy.cols != tape.dfactor.cols {
        return Err(MoecError::shape("sine_backward", "dy shape mismatch"));
    }
    let mut dx = tape.dfactor.clone();
    zip_map_in_place(&mut dx.data, &dy.data, |d, g| g * d);
    Ok(dx)
}

/// dst[i] = f(dst[i], src[i]), chunk-parallel; each element is written by
/// exactly one task.
fn zip_map_in_place(dst: &mut [f64], src: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    #[cfg(feature = "parallel")]
    {
        if dst.len() >= 4096 {
            dst.par_chunks_mut(2048)
                .zip(src.par_chunks(2048))
                .for_each(|(d, s)| {
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv = f(*dv, sv);
                    }
                });
            return;
        }
    }
    for (dv, &sv) in dst.iter_mut().zip(src) {
        *dv = f(*dv, sv);
    }
}

// ---------------------------------------------------------------------------
// ReLU activation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReluTape {
    x: Matrix,
}

/// y = max(x, 0).
pub fn relu_forward(x: &Matrix) -> (Matrix, ReluTape) {
    let y = x.map(|v| v.max(0.0));
    (y, ReluTape { x: x.clone() })
}

/// dx = dy ⊙ 1[x > 0]; the subgradient at exactly 0 is 0.
pub fn relu_backward(tape: &ReluTape, dy: &Matrix) -> Result<Matrix> {
    if dy.rows != tape.x.rows || dy.cols != tape.x.cols {
        return Err(MoecError::shape("relu_backward", "dy shape mismatch"));
    }
    let mut dx = tape.x.clone();
    zip_map_in_place(&mut dx.data, &dy.data, |x, g| if x > 0.0 { g } else { 0.0 });
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax, stabilized by row-max subtraction.
pub fn softmax_forward(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    let cols = probs.cols;
    run_rows(&mut probs.data, cols, |_i, row| {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    });
    probs
}

/// Exact softmax Jacobian-vector product:
/// dlogits = probs ⊙ (dy − Σ_j dy_j·probs_j).
pub fn softmax_backward(probs: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if dy.rows != probs.rows || dy.cols != probs.cols {
        return Err(MoecError::shape("softmax_backward", "dy shape mismatch"));
    }
    let mut dlogits = Matrix::zeros(probs.rows, probs.cols);
    for i in 0..probs.rows {
        let p = probs.row(i);
        let g = dy.row(i);
        let dot: f64 = p.iter().zip(g).map(|(pv, gv)| pv * gv).sum();
        let out = dlogits.row_mut(i);
        for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(g) {
            *o = pv * (gv - dot);
        }
    }
    Ok(dlogits)
}

// ---------------------------------------------------------------------------
// MSE loss
// ---------------------------------------------------------------------------

/// loss = (1/B)·Σ (target−pred)², dpred = (2/B)(pred−target).
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(MoecError::InvalidArgument("mse_loss on empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(MoecError::shape(
            "mse_loss",
            format!("pred {} vs target {}", pred.len(), target.len()),
        ));
    }
    let b = pred.len() as f64;
    let mut loss = 0.0;
    let mut dpred = vec![0.0; pred.len()];
    for ((d, &p), &t) in dpred.iter_mut().zip(pred).zip(target) {
        let diff = p - t;
        loss += diff * diff;
        *d = 2.0 * diff / b;
    }
    Ok((loss / b, dpred))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare an analytic gradient against central finite differences of a
/// scalar-valued function, returning the worst relative error over all
/// coordinates.
///
/// The relative error at coordinate i is |a_i − fd_i| / max(|a_i|, |fd_i|, 1e-4).
pub fn grad_check<F>(f: F, analytic: &[f64], point: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(MoecError::InvalidArgument(format!(
            "epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(MoecError::shape(
            "grad_check",
            format!("gradient len {} vs point len {}", analytic.len(), point.len()),
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let fp = f(&probe);
        probe[i] = orig - epsilon;
        let fm = f(&probe);
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(1e-4);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent naive triple-loop matmul oracle.
    fn naive_matmul(x: &Matrix, w: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut acc = 0.0;
                for k in 0..x.cols() {
                    acc += x.get(i, k) * w.get(k, j);
                }
                y.set(i, j, acc);
            }
        }
        y
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_identity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (y, _) = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let w = Matrix::from_rows(&[vec![2.0], vec![3.0]]);
        let (y, _) = linear_forward(&x, &w, &[1.0]).unwrap();
        assert_eq!(y.get(0, 0), 6.0);
    }

    #[test]
    fn linear_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 4, 2);
        let (y, _) = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        let oracle = naive_matmul(&x, &w);
        for i in 0..3 {
            for j in 0..2 {
                assert!((y.get(i, j) - oracle.get(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        assert!(linear_forward(&x, &w, &[0.0]).is_err());
    }

    #[test]
    fn linear_backward_identity_and_db() {
        let x = Matrix::from_rows(&[vec![3.0, -1.0]]);
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (_, tape) = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        let dy = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let (dx, grads) = linear_backward(&w, &tape, &dy).unwrap();
        assert_eq!(dx.row(0), &[1.0, 0.0]);
        // db equals sum of dy rows
        assert_eq!(grads.db, vec![1.0, 0.0]);

        let dy2 = Matrix::from_rows(&[vec![0.5, -2.0], vec![1.5, 4.0]]);
        let x2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (_, tape2) = linear_forward(&x2, &w, &[0.0, 0.0]).unwrap();
        let (_, g2) = linear_backward(&w, &tape2, &dy2).unwrap();
        assert_eq!(g2.db, vec![2.0, 2.0]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(&mut rng, 5, 3);
        let w = rand_matrix(&mut rng, 3, 2);
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
        // scalar objective: weighted sum of outputs
        let c = rand_matrix(&mut rng, 5, 2);

        let (y, tape) = linear_forward(&x, &w, &b).unwrap();
        let _ = y;
        let (dx, grads) = linear_backward(&w, &tape, &c).unwrap();

        // pack (x, w, b) into one parameter vector for the harness
        let mut point = Vec::new();
        point.extend_from_slice(x.as_slice());
        point.extend_from_slice(w.as_slice());
        point.extend_from_slice(&b);
        let mut analytic = Vec::new();
        analytic.extend_from_slice(dx.as_slice());
        analytic.extend_from_slice(grads.dw.as_slice());
        analytic.extend_from_slice(&grads.db);

        let f = |p: &[f64]| {
            let xm = Matrix::from_vec(5, 3, p[0..15].to_vec()).unwrap();
            let wm = Matrix::from_vec(3, 2, p[15..21].to_vec()).unwrap();
            let bv = &p[21..23];
            let (ym, _) = linear_forward(&xm, &wm, bv).unwrap();
            ym.as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let err = grad_check(f, &analytic, &point, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sine_basics() {
        let x = Matrix::from_rows(&[vec![0.0]]);
        let (y, _) = sine_forward(&x, 17.0).unwrap();
        assert_eq!(y.get(0, 0), 0.0);

        let x = Matrix::from_rows(&[vec![std::f64::consts::PI / 60.0]]);
        let (y, _) = sine_forward(&x, 30.0).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 4, 3);
        let c = rand_matrix(&mut rng, 4, 3);
        let omega = 30.0;
        let (_, tape) = sine_forward(&x, omega).unwrap();
        let dx = sine_backward(&tape, omega, &c).unwrap();
        let f = |p: &[f64]| {
            let xm = Matrix::from_vec(4, 3, p.to_vec()).unwrap();
            let (ym, _) = sine_forward(&xm, omega).unwrap();
            ym.as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let err = grad_check(f, dx.as_slice(), x.as_slice(), 1e-6).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn relu_basics() {
        let x = Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]);
        let (y, tape) = relu_forward(&x);
        assert_eq!(y.row(0), &[0.0, 0.0, 2.0]);
        let dy = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]);
        let dx = relu_backward(&tape, &dy).unwrap();
        // subgradient at 0 is 0 by convention
        assert_eq!(dx.row(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // keep |x| > 1e-3 so the FD probe never crosses the kink
        let x = Matrix::from_fn(4, 3, |_, _| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let c = rand_matrix(&mut rng, 4, 3);
        let (_, tape) = relu_forward(&x);
        let dx = relu_backward(&tape, &c).unwrap();
        let f = |p: &[f64]| {
            let xm = Matrix::from_vec(4, 3, p.to_vec()).unwrap();
            let (ym, _) = relu_forward(&xm);
            ym.as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let err = grad_check(f, dx.as_slice(), x.as_slice(), 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_uniform_and_degenerate() {
        let logits = Matrix::from_rows(&[vec![0.7, 0.7, 0.7, 0.7]]);
        let p = softmax_forward(&logits);
        for j in 0..4 {
            assert!((p.get(0, j) - 0.25).abs() < 1e-15);
        }
        let one = softmax_forward(&Matrix::from_rows(&[vec![-3.2]]));
        assert_eq!(one.get(0, 0), 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Matrix::from_fn(16, 5, |_, _| rng.gen_range(-30.0..30.0));
        let p = softmax_forward(&logits);
        for i in 0..16 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rand_matrix(&mut rng, 4, 5);
        let c = rand_matrix(&mut rng, 4, 5);
        let probs = softmax_forward(&logits);
        let dlogits = softmax_backward(&probs, &c).unwrap();
        let f = |p: &[f64]| {
            let lm = Matrix::from_vec(4, 5, p.to_vec()).unwrap();
            let pm = softmax_forward(&lm);
            pm.as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let err = grad_check(f, dlogits.as_slice(), logits.as_slice(), 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn mse_basics() {
        let (l, _) = mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        let (l, d) = mse_loss(&[0.0], &[2.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(d, vec![-4.0]);
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn mse_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pred: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, dpred) = mse_loss(&pred, &target).unwrap();
        let f = |p: &[f64]| mse_loss(p, &target).unwrap().0;
        let err = grad_check(f, &dpred, &pred, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        assert!(grad_check(|_| 0.0, &[0.0], &[0.0], 1e-8).is_err());
        assert!(grad_check(|_| 0.0, &[0.0], &[0.0], 1e-2).is_err());
    }

    #[test]
    fn ops_stay_finite_for_large_inputs() {
        let x = Matrix::from_rows(&[vec![1e6, -1e6, 123456.0]]);
        let (y, _) = sine_forward(&x, 30.0).unwrap();
        assert!(y.is_finite());
        let (y, _) = relu_forward(&x);
        assert!(y.is_finite());
        let p = softmax_forward(&x);
        assert!(p.is_finite());
        let w = Matrix::from_rows(&[vec![1e6], vec![1e6], vec![1e6]]);
        let (y, _) = linear_forward(&x, &w, &[1e6]).unwrap();
        assert!(y.is_finite());
    }
}
