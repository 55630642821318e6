//! Block-based compressive measurement.
//!
//! A single row-orthonormal Gaussian matrix `phi` of shape `M x N`
//! (`N = B * B`) is applied independently to every rasterized `B x B` block.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifies the generator used by [`MeasurementMatrix::gaussian_orthonormal`].
/// Written to model and measurement files so other implementations can
/// reproduce the matrix.
pub const MATRIX_RNG_ID: &str = "chacha20/seed_from_u64/standard-normal-ziggurat/row-mgs";

/// Noise SNR values above this are treated as this value.
pub const MAX_SNR_DB: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    /// Block side length `B` in pixels.
    pub block_size: usize,
    /// Subsampling factor `N / M`.
    pub compression_factor: usize,
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            compression_factor: 16,
            noise_snr_db: None,
        }
    }
}

impl SensingConfig {
    pub fn with_cr(compression_factor: usize) -> Self {
        Self {
            compression_factor,
            ..Self::default()
        }
    }

    /// Pixels per block, `N = B^2`.
    pub fn block_len(&self) -> usize {
        self.block_size * self.block_size
    }

    /// Measurements per block, `M = N / CR`.
    pub fn measurements(&self) -> usize {
        self.block_len() / self.compression_factor.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.block_len();
        if self.block_size == 0 || self.compression_factor == 0 {
            return Err(Error::Config(
                "block size and compression factor must be positive".into(),
            ));
        }
        if !n.is_multiple_of(self.compression_factor) {
            return Err(Error::Config(format!(
                "block length {n} is not divisible by compression factor {}",
                self.compression_factor
            )));
        }
        if self.compression_factor < 2 {
            return Err(Error::Config(format!(
                "compression factor {} leaves M >= N; measurement must be compressive",
                self.compression_factor
            )));
        }
        Ok(())
    }
}

/// The measurement matrix together with the seed that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix<T> {
    entries: Tensor<T>,
    seed: u64,
}

impl<T: Scalar> MeasurementMatrix<T> {
    /// Gaussian draws from a seeded ChaCha20 stream followed by modified
    /// Gram-Schmidt over the rows. Works for any `m <= n`, including the
    /// square case used by round-trip checks.
    pub fn gaussian_orthonormal(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::Config(format!(
                "cannot build {m} orthonormal rows in dimension {n}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        for i in 0..m {
            let (done, rest) = rows.split_at_mut(i);
            let row = &mut rest[0];
            // two passes keep orthogonality at machine precision
            for _ in 0..2 {
                for prev in done.iter() {
                    let proj: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (a, b) in row.iter_mut().zip(prev) {
                        *a -= proj * b;
                    }
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Singular("measurement matrix orthonormalization"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let data = rows.into_iter().flatten().map(T::of).collect();
        Ok(Self {
            entries: Tensor::new(&[m, n], data)?,
            seed,
        })
    }

    /// Wraps explicit entries, e.g. ones loaded from a model file.
    pub fn from_entries(entries: Tensor<T>, seed: u64) -> Result<Self> {
        if entries.shape().len() != 2 {
            return Err(Error::dim(
                "measurement matrix rank",
                2,
                entries.shape().len(),
            ));
        }
        Ok(Self { entries, seed })
    }

    pub fn rows(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    /// `phi^T y`, the adjoint map back to pixel space.
    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if y.len() != m {
            return Err(Error::dim("adjoint measurement length", m, y.len()));
        }
        let mut out = vec![T::zero(); n];
        T::gemm(
            n,
            m,
            1,
            T::one(),
            self.entries.data(),
            1,
            n as isize,
            y.data(),
            1,
            1,
            T::zero(),
            &mut out,
            1,
            1,
        );
        Ok(Tensor::from_vec(out))
    }
}

/// Builds the shared block measurement matrix for a configuration.
pub fn make_matrix<T: Scalar>(config: &SensingConfig, seed: u64) -> Result<MeasurementMatrix<T>> {
    config.validate()?;
    MeasurementMatrix::gaussian_orthonormal(config.measurements(), config.block_len(), seed)
}

/// `y = phi * x` for one rasterized block.
pub fn measure<T: Scalar>(phi: &MeasurementMatrix<T>, block: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = (phi.rows(), phi.cols());
    if block.len() != n {
        return Err(Error::dim("measure block length", n, block.len()));
    }
    let mut out = vec![T::zero(); m];
    T::gemm(
        m,
        n,
        1,
        T::one(),
        phi.entries.data(),
        n as isize,
        1,
        block.data(),
        1,
        1,
        T::zero(),
        &mut out,
        1,
        1,
    );
    Ok(Tensor::from_vec(out))
}

/// Noise standard deviation giving the requested SNR for a measurement
/// vector of energy `energy` and length `m`.
pub fn noise_sigma(energy: f64, m: usize, snr_db: f64) -> f64 {
    let snr_db = snr_db.min(MAX_SNR_DB);
    (energy / (m as f64 * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `y + n` with `n ~ N(0, sigma^2 I)` and `sigma^2 = |y|^2 / (M 10^(snr/10))`.
pub fn add_noise<T: Scalar>(y: &Tensor<T>, snr_db: f64, seed: u64) -> Result<Tensor<T>> {
    let energy = y.norm_sq().as_f64();
    if energy <= 0.0 || !energy.is_finite() {
        return Err(Error::DegenerateSignal(format!(
            "SNR is undefined for a measurement vector with energy {energy}"
        )));
    }
    let sigma = noise_sigma(energy, y.len(), snr_db);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = y.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += T::of(sigma * z);
    }
    Ok(out)
}

/// Residual measurement `d = y - phi * x_mc`.
pub fn residual_measure<T: Scalar>(
    y: &Tensor<T>,
    phi: &MeasurementMatrix<T>,
    x_mc: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y.len() != phi.rows() {
        return Err(Error::dim(
            "residual measurement length",
            phi.rows(),
            y.len(),
        ));
    }
    let predicted = measure(phi, x_mc)?;
    y.sub(&predicted)
}
