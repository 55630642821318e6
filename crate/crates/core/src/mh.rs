//! Multi-hypothesis motion compensation.
//!
//! For a block at `pos` the hypothesis matrix `H` (`N x K`) collects every
//! candidate block of the reference frame on a stride grid around `pos`.
//! The prediction is `x_mc = H w`, where the weights `w` come either from a
//! Tikhonov-regularized least-squares fit against a matching target or from
//! a small learned two-layer head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{BlockPos, Frame};
use crate::layers::{relu_backward, relu_forward, Linear};
use crate::linalg::Cholesky;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub radius: usize,
    pub stride: usize,
}

impl Default for SearchWindow {
    fn default() -> Self {
        Self {
            radius: 8,
            stride: 2,
        }
    }
}

impl SearchWindow {
    pub fn new(radius: usize, stride: usize) -> Result<Self> {
        let w = Self { radius, stride };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.radius < self.stride {
            return Err(Error::Config(format!(
                "search window needs radius >= stride >= 1, got radius {} stride {}",
                self.radius, self.stride
            )));
        }
        Ok(())
    }

    /// Steps on each side of the centre.
    fn steps(&self) -> isize {
        (self.radius / self.stride) as isize
    }

    /// Hypothesis count `K = (2 floor(radius / stride) + 1)^2`.
    pub fn hypotheses(&self) -> usize {
        let side = 2 * (self.radius / self.stride) + 1;
        side * side
    }

    /// Nominal `(dy, dx)` offsets, `dy` major.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let q = self.steps();
        let s = self.stride as isize;
        (-q..=q)
            .flat_map(|i| (-q..=q).map(move |j| (i * s, j * s)))
            .collect()
    }
}

/// Candidate blocks for one target block.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet<T> {
    /// `[N, K]`, column `k` is the rasterized candidate for `offsets[k]`.
    h: Tensor<T>,
    offsets: Vec<(isize, isize)>,
}

impl<T: Scalar> HypothesisSet<T> {
    /// Builds a set from explicit columns, each of length `n`.
    pub fn from_columns(columns: &[Tensor<T>]) -> Result<Self> {
        let k = columns.len();
        let n = columns.first().map_or(0, Tensor::len);
        if k == 0 || n == 0 {
            return Err(Error::Config(
                "hypothesis set needs at least one non-empty column".into(),
            ));
        }
        let mut h = vec![T::zero(); n * k];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::dim("hypothesis column length", n, col.len()));
            }
            for (i, &v) in col.data().iter().enumerate() {
                h[i * k + j] = v;
            }
        }
        Ok(Self {
            h: Tensor::new(&[n, k], h)?,
            offsets: vec![(0, 0); k],
        })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.h
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn block_len(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn column(&self, k: usize) -> Tensor<T> {
        let kk = self.count();
        Tensor::from_vec(self.h.data().iter().skip(k).step_by(kk).copied().collect())
    }

    /// `H^T v`.
    pub fn project(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = (self.block_len(), self.count());
        if v.len() != n {
            return Err(Error::dim("hypothesis projection", n, v.len()));
        }
        let mut out = vec![T::zero(); k];
        T::gemm(
            k,
            n,
            1,
            T::one(),
            self.h.data(),
            1,
            k as isize,
            v.data(),
            1,
            1,
            T::zero(),
            &mut out,
            1,
            1,
        );
        Ok(Tensor::from_vec(out))
    }

    /// `H w`.
    pub fn combine(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = (self.block_len(), self.count());
        if w.len() != k {
            return Err(Error::dim("hypothesis weights", k, w.len()));
        }
        let mut out = vec![T::zero(); n];
        T::gemm(
            n,
            k,
            1,
            T::one(),
            self.h.data(),
            k as isize,
            1,
            w.data(),
            1,
            1,
            T::zero(),
            &mut out,
            1,
            1,
        );
        Ok(Tensor::from_vec(out))
    }

    /// `H^T H`, row-major `K x K`.
    pub fn gram(&self) -> Vec<T> {
        let (n, k) = (self.block_len(), self.count());
        let mut out = vec![T::zero(); k * k];
        T::gemm(
            k,
            n,
            k,
            T::one(),
            self.h.data(),
            1,
            k as isize,
            self.h.data(),
            k as isize,
            1,
            T::zero(),
            &mut out,
            k as isize,
            1,
        );
        out
    }

    /// Squared Euclidean norm of every column.
    pub fn column_norms_sq(&self) -> Tensor<T> {
        let k = self.count();
        let mut out = vec![T::zero(); k];
        for row in self.h.data().chunks_exact(k) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v * v;
            }
        }
        Tensor::from_vec(out)
    }
}

/// Collects the `K` candidate blocks around `pos` in `reference`. Candidate
/// origins are clamped into the frame, so edge blocks repeat columns but `K`
/// stays fixed.
pub fn gather_hypotheses<T: Scalar>(
    reference: &Frame<T>,
    pos: BlockPos,
    block_size: usize,
    window: &SearchWindow,
) -> Result<HypothesisSet<T>> {
    window.validate()?;
    let (w, h) = (reference.width(), reference.height());
    let (r0, c0) = pos;
    if block_size == 0 || r0 + block_size > h || c0 + block_size > w {
        return Err(Error::Bounds(format!(
            "block {block_size}x{block_size} at ({r0},{c0}) lies outside the {w}x{h} reference frame"
        )));
    }
    let offsets = window.offsets();
    let k = offsets.len();
    let n = block_size * block_size;
    let max_r = (h - block_size) as isize;
    let max_c = (w - block_size) as isize;
    let data = reference.data();
    let mut hm = vec![T::zero(); n * k];
    for (j, &(dy, dx)) in offsets.iter().enumerate() {
        let r = (r0 as isize + dy).clamp(0, max_r) as usize;
        let c = (c0 as isize + dx).clamp(0, max_c) as usize;
        for by in 0..block_size {
            let src = &data[(r + by) * w + c..][..block_size];
            for (bx, &v) in src.iter().enumerate() {
                hm[(by * block_size + bx) * k + j] = v;
            }
        }
    }
    Ok(HypothesisSet {
        h: Tensor::new(&[n, k], hm)?,
        offsets,
    })
}

/// Default Tikhonov weight `1e-2 * trace(H^T H) / K`.
pub fn default_tikhonov<T: Scalar>(hyp: &HypothesisSet<T>) -> T {
    let trace: T = hyp.column_norms_sq().data().iter().copied().sum();
    T::of(1e-2) * trace / T::of(hyp.count() as f64)
}

/// Factored normal equations `(H^T H + lambda I) w = H^T t` for one
/// hypothesis set, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct LsqSolver<T> {
    chol: Cholesky<T>,
}

impl<T: Scalar> LsqSolver<T> {
    pub fn new(hyp: &HypothesisSet<T>, tikhonov_lambda: T) -> Result<Self> {
        if tikhonov_lambda < T::zero() || !tikhonov_lambda.is_finite() {
            return Err(Error::Config(format!(
                "Tikhonov lambda must be a finite non-negative value, got {tikhonov_lambda}"
            )));
        }
        let k = hyp.count();
        let mut a = hyp.gram();
        for i in 0..k {
            a[i * k + i] += tikhonov_lambda;
        }
        let chol = Cholesky::factor(&a, k)
            .map_err(|_| Error::Singular("multi-hypothesis least squares"))?;
        Ok(Self { chol })
    }

    /// Weights fitting `target`.
    pub fn weights(&self, hyp: &HypothesisSet<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        let rhs = hyp.project(target)?;
        Ok(Tensor::from_vec(self.chol.solve(rhs.data())))
    }

    /// The prediction map is the symmetric operator `H A^-1 H^T`, so its
    /// vector-Jacobian product has the same form.
    pub fn apply_projector(&self, hyp: &HypothesisSet<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.weights(hyp, v)?;
        hyp.combine(&w)
    }
}

/// Closed-form multi-hypothesis prediction. Returns `(w, H w)`.
pub fn lsq_predict<T: Scalar>(
    hyp: &HypothesisSet<T>,
    target: &Tensor<T>,
    tikhonov_lambda: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if target.len() != hyp.block_len() {
        return Err(Error::dim(
            "lsq_predict target",
            hyp.block_len(),
            target.len(),
        ));
    }
    let solver = LsqSolver::new(hyp, tikhonov_lambda)?;
    let w = solver.weights(hyp, target)?;
    let x_mc = hyp.combine(&w)?;
    Ok((w, x_mc))
}

/// Learned weighting head: `w = fc2(relu(fc1(f)))` with the feature vector
/// `f = [H^T x / N, |h_k|^2 / N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct McHead<T> {
    /// `2K -> 2K`
    pub fc1: Linear<T>,
    /// `2K -> K`
    pub fc2: Linear<T>,
}

/// Intermediate values of one [`McHead`] evaluation.
#[derive(Clone, Debug)]
pub struct McHeadTrace<T> {
    pub features: Tensor<T>,
    pub pre_hidden: Tensor<T>,
    pub hidden: Tensor<T>,
    pub weights: Tensor<T>,
    pub x_mc: Tensor<T>,
}

impl<T: Scalar> McHead<T> {
    pub fn zeros(k: usize) -> Self {
        Self {
            fc1: Linear::zeros(2 * k, 2 * k),
            fc2: Linear::zeros(2 * k, k),
        }
    }

    /// Random hidden layer; the output layer starts near the uniform
    /// average of all hypotheses.
    pub fn init<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let fc1 = Linear::init(2 * k, 2 * k, 2.0, rng);
        let mut fc2 = Linear::init(2 * k, k, 0.01, rng);
        fc2.bias = Tensor::full(&[k], T::one() / T::of(k as f64));
        Self { fc1, fc2 }
    }

    pub fn hypotheses(&self) -> usize {
        self.fc2.n_out()
    }

    fn check(&self, hyp: &HypothesisSet<T>) -> Result<()> {
        let k = hyp.count();
        if self.fc2.n_out() != k || self.fc1.n_in() != 2 * k || self.fc1.n_out() != self.fc2.n_in()
        {
            return Err(Error::dim("McHead hypothesis count", self.fc2.n_out(), k));
        }
        Ok(())
    }

    pub fn features(hyp: &HypothesisSet<T>, estimate: &Tensor<T>) -> Result<Tensor<T>> {
        let scale = T::one() / T::of(hyp.block_len() as f64);
        let corr = hyp.project(estimate)?;
        let norms = hyp.column_norms_sq();
        let f = corr
            .data()
            .iter()
            .chain(norms.data())
            .map(|&v| v * scale)
            .collect();
        Ok(Tensor::from_vec(f))
    }

    pub fn forward(&self, hyp: &HypothesisSet<T>, estimate: &Tensor<T>) -> Result<McHeadTrace<T>> {
        self.check(hyp)?;
        let features = Self::features(hyp, estimate)?;
        let pre_hidden = self.fc1.forward(&features)?;
        let hidden = relu_forward(&pre_hidden);
        let weights = self.fc2.forward(&hidden)?;
        let x_mc = hyp.combine(&weights)?;
        Ok(McHeadTrace {
            features,
            pre_hidden,
            hidden,
            weights,
            x_mc,
        })
    }

    /// Backpropagates `d loss / d x_mc`. Returns the parameter gradients
    /// (as an `McHead`) and `d loss / d estimate`.
    pub fn backward(
        &self,
        hyp: &HypothesisSet<T>,
        trace: &McHeadTrace<T>,
        d_x_mc: &Tensor<T>,
    ) -> Result<(McHead<T>, Tensor<T>)> {
        self.check(hyp)?;
        let k = hyp.count();
        let d_w = hyp.project(d_x_mc)?;
        let g2 = self.fc2.backward(&trace.hidden, &d_w)?;
        let d_pre = relu_backward(&trace.pre_hidden, &g2.d_input)?;
        let g1 = self.fc1.backward(&trace.features, &d_pre.d_input)?;
        let scale = T::one() / T::of(hyp.block_len() as f64);
        let d_corr = Tensor::from_vec(g1.d_input.data()[..k].iter().map(|&v| v * scale).collect());
        let d_estimate = hyp.combine(&d_corr)?;
        let [w1, b1] = take2(g1.d_params);
        let [w2, b2] = take2(g2.d_params);
        Ok((
            McHead {
                fc1: Linear {
                    weight: w1,
                    bias: b1,
                },
                fc2: Linear {
                    weight: w2,
                    bias: b2,
                },
            },
            d_estimate,
        ))
    }
}

pub(crate) fn take2<T>(v: Vec<T>) -> [T; 2] {
    v.try_into()
        .unwrap_or_else(|_| panic!("layer produced other than two parameter gradients"))
}

/// Learned multi-hypothesis prediction. Returns `(w, H w)`.
pub fn learned_predict<T: Scalar>(
    hyp: &HypothesisSet<T>,
    estimate: &Tensor<T>,
    params: &McHead<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let t = params.forward(hyp, estimate)?;
    Ok((t.weights, t.x_mc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_frame(w: usize, h: usize, seed: u64) -> Frame<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_window_has_81_offsets() {
        let w = SearchWindow::default();
        assert_eq!(w.hypotheses(), 81);
        let offs = w.offsets();
        assert_eq!(offs.len(), 81);
        assert_eq!(offs[0], (-8, -8));
        assert_eq!(offs[40], (0, 0));
        assert_eq!(offs[80], (8, 8));
        assert!(offs.iter().all(|&(a, b)| a % 2 == 0 && b % 2 == 0));
    }

    #[test]
    fn window_validation() {
        assert!(SearchWindow::new(1, 2).is_err());
        assert!(SearchWindow::new(2, 0).is_err());
        assert_eq!(SearchWindow::new(3, 2).unwrap().hypotheses(), 9);
    }

    #[test]
    fn zero_offset_column_is_colocated_block() {
        let f = noise_frame(64, 48, 1);
        let hyp = gather_hypotheses(&f, (16, 32), 16, &SearchWindow::default()).unwrap();
        assert_eq!(hyp.count(), 81);
        assert_eq!(hyp.column(40), f.block((16, 32), 16).unwrap());
    }

    #[test]
    fn corner_block_clamps() {
        let f = noise_frame(32, 32, 2);
        let hyp = gather_hypotheses(&f, (0, 0), 16, &SearchWindow::default()).unwrap();
        assert_eq!(hyp.count(), 81);
        // offset (-8,-8) clamps to the origin block
        assert_eq!(hyp.column(0), f.block((0, 0), 16).unwrap());
        // offset (8,8) clamps to (8,8)? it is inside for a 32x32 frame (max origin 16)
        assert_eq!(hyp.column(80), f.block((8, 8), 16).unwrap());
        assert!(gather_hypotheses(&f, (17, 0), 16, &SearchWindow::default()).is_err());
    }

    #[test]
    fn single_constant_hypothesis() {
        let hyp = HypothesisSet::from_columns(&[Tensor::full(&[256], 1.0f64)]).unwrap();
        let target = Tensor::full(&[256], 0.5);
        let (w, x) = lsq_predict(&hyp, &target, 0.0).unwrap();
        assert_eq!(w.data(), &[0.5]);
        assert_eq!(x, target);
    }

    #[test]
    fn lsq_singular_without_regularization() {
        let col = Tensor::full(&[16], 1.0f64);
        let hyp = HypothesisSet::from_columns(&[col.clone(), col]).unwrap();
        assert!(matches!(
            lsq_predict(&hyp, &Tensor::zeros(&[16]), 0.0),
            Err(Error::Singular(_))
        ));
        assert!(lsq_predict(&hyp, &Tensor::zeros(&[16]), 1e-3).is_ok());
        assert!(lsq_predict(&hyp, &Tensor::zeros(&[16]), -1.0).is_err());
    }

    #[test]
    fn learned_zero_params_return_bias() {
        let f = noise_frame(48, 48, 3);
        let window = SearchWindow::new(2, 2).unwrap();
        let hyp = gather_hypotheses(&f, (16, 16), 16, &window).unwrap();
        let mut head = McHead::<f64>::zeros(9);
        head.fc2.bias = Tensor::from_vec((0..9).map(|i| i as f64 * 0.1).collect());
        let (w, x) = learned_predict(&hyp, &f.block((16, 16), 16).unwrap(), &head).unwrap();
        assert_eq!(w, head.fc2.bias);
        assert_eq!(x, hyp.combine(&head.fc2.bias).unwrap());
        assert!(learned_predict(&hyp, &Tensor::zeros(&[256]), &McHead::zeros(81)).is_err());
    }

    #[test]
    fn gather_is_pure() {
        let f = noise_frame(40, 40, 4);
        let a = gather_hypotheses(&f, (16, 16), 8, &SearchWindow::default()).unwrap();
        let b = gather_hypotheses(&f, (16, 16), 8, &SearchWindow::default()).unwrap();
        assert_eq!(a, b);
    }
}
