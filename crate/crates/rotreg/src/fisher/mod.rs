//! Matrix Fisher distribution MF(R; A) over SO(3): density p(R) =
//! exp(tr(A^T R)) / F(A) under Haar measure normalized so F(0) = 1.
//!
//! Everything flows through the proper singular values s = (s1, s2, s3) of A
//! (s3 signed). The normalizer reduces to a single 1D integral via the
//! quaternion-Bingham correspondence: with lambda_0 = s1+s2+s3, a = s2+s3,
//! b = s2-s3,
//!
//!   F(s) = int_0^1 exp(s1 (2t - 1)) I0(a t) I0(b (1 - t)) dt
//!
//! which is evaluated with adaptive Gauss-Kronrod quadrature, log-shifted by
//! lambda_0 so concentrations up to |s_i| ~ 200 stay inside f64 range. The
//! partial derivatives of log F (needed for the expected rotation, entropy
//! and all loss gradients) are integrated on the same nodes by
//! differentiating under the integral sign.

mod bessel;
mod quad;

pub use quad::QuadError;

use crate::so3::{proper_svd, quat_to_matrix, ProperSvd, Quaternion, Rotation};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("normalizer quadrature failed: {0}")]
    Quadrature(#[from] QuadError),
    #[error("rejection sampler acceptance rate {rate:.2e} below 1e-4; concentration too extreme for this oracle")]
    AcceptanceTooLow { rate: f64 },
    #[error("non-finite parameter matrix")]
    NonFiniteParams,
}

/// The unconstrained 3x3 parameter A of MF(R; A).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherParams(Matrix3<f64>);

impl FisherParams {
    pub fn new(a: Matrix3<f64>) -> Self {
        FisherParams(a)
    }

    pub fn zeros() -> Self {
        FisherParams(Matrix3::zeros())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        FisherParams(self.0 * c)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Derived quantities of one distribution, computed once per parameter matrix.
#[derive(Debug, Clone)]
pub struct FisherStats {
    pub svd: ProperSvd,
    pub mode: Rotation,
    /// Bingham-dual concentrations (z1, z2, z3), all <= 0.
    pub z: Vector3<f64>,
    /// log F(A).
    pub log_f: f64,
    /// d log F / d s_i.
    pub dlogf_ds: Vector3<f64>,
    /// H = log F - sum_i s_i d log F / d s_i, in nats; <= 0, = 0 iff A = 0.
    pub entropy: f64,
    /// True when s2 + s3 ~ 0, where the mode is not unique.
    pub degenerate: bool,
}

impl FisherStats {
    pub fn compute(p: &FisherParams) -> Result<Self, FisherError> {
        if !p.is_finite() {
            return Err(FisherError::NonFiniteParams);
        }
        let svd = proper_svd(p.matrix());
        let (log_f, dlogf_ds) = normalizer_integrals(&svd.s)?;
        let entropy = log_f - svd.s.dot(&dlogf_ds);
        Ok(FisherStats {
            mode: mode_from_svd(&svd),
            z: bingham_z(&svd),
            degenerate: is_degenerate(&svd),
            svd,
            log_f,
            dlogf_ds,
            entropy,
        })
    }

    /// E_p[R] = U diag(d log F / d s) V^T; this is also d log F / d A.
    pub fn expected_rotation(&self) -> Matrix3<f64> {
        self.svd.u * Matrix3::from_diagonal(&self.dlogf_ds) * self.svd.v.transpose()
    }
}

/// The rotation maximizing tr(A^T R): U diag(1, 1, det(UV)) V^T, which with
/// the proper SVD is just U V^T.
pub fn mode(p: &FisherParams) -> Rotation {
    mode_from_svd(&proper_svd(p.matrix()))
}

fn mode_from_svd(svd: &ProperSvd) -> Rotation {
    Rotation::from_matrix_unchecked(svd.u * svd.v.transpose())
}

/// Mode uniqueness fails when s2 + s3 = 0.
pub fn is_degenerate(svd: &ProperSvd) -> bool {
    svd.s[1] + svd.s[2] <= 1e-12 * svd.s[0].max(1.0)
}

/// Bingham-dual concentration vector: z_i = lambda_i - lambda_0 with
/// lambda_0 = s1+s2+s3, lambda_1 = s1-s2-s3, lambda_2 = -s1+s2-s3,
/// lambda_3 = -s1-s2+s3. Always 0 >= z1 >= z2 >= z3 for descending s.
pub fn bingham_z(svd: &ProperSvd) -> Vector3<f64> {
    let s = &svd.s;
    Vector3::new(
        -2.0 * (s[1] + s[2]),
        -2.0 * (s[0] + s[2]),
        -2.0 * (s[0] + s[1]),
    )
}

/// Shared quadrature for log F and d log F / d s.
fn normalizer_integrals(s: &Vector3<f64>) -> Result<(f64, Vector3<f64>), FisherError> {
    debug_assert!(s[0] >= s[1] && s[1] >= s[2].abs() - 1e-9, "s not proper-descending: {s:?}");
    if s.amax() < 1e-300 {
        return Ok((0.0, Vector3::zeros()));
    }
    let s1 = s[0];
    let a = s[1] + s[2];
    let b = s[1] - s[2];
    let lam0 = s[0] + s[1] + s[2];
    let integrand = |t: f64| {
        let e = s1 * (2.0 * t - 1.0) + bessel::log_i0(a * t) + bessel::log_i0(b * (1.0 - t)) - lam0;
        let w = e.exp();
        let ra = bessel::i1_over_i0(a * t);
        let rb = bessel::i1_over_i0(b * (1.0 - t));
        let g2 = t * ra + (1.0 - t) * rb;
        let g3 = t * ra - (1.0 - t) * rb;
        [w, w * (2.0 * t - 1.0), w * g2, w * g3]
    };
    let (vals, _err) = quad::adaptive_gk15(&integrand, 0.0, 1.0, 1e-13, 1e-300, 4000)?;
    let f0 = vals[0];
    let log_f = lam0 + f0.ln();
    let d = Vector3::new(vals[1] / f0, vals[2] / f0, vals[3] / f0);
    Ok((log_f, d))
}

/// log F(s) for descending proper singular values.
pub fn log_normalizer(s: &Vector3<f64>) -> Result<f64, FisherError> {
    normalizer_integrals(s).map(|(lf, _)| lf)
}

/// Componentwise d log F / d s_i. Component i equals E_p[(U^T R V)_{ii}].
pub fn dlog_normalizer_ds(s: &Vector3<f64>) -> Result<Vector3<f64>, FisherError> {
    normalizer_integrals(s).map(|(_, d)| d)
}

/// Differential entropy (nats) relative to normalized Haar measure.
pub fn entropy(p: &FisherParams) -> Result<f64, FisherError> {
    Ok(FisherStats::compute(p)?.entropy)
}

/// E_p[R] = U diag(d log F / d s) V^T.
pub fn expected_rotation(p: &FisherParams) -> Result<Matrix3<f64>, FisherError> {
    Ok(FisherStats::compute(p)?.expected_rotation())
}

/// Negative log likelihood of a ground-truth rotation and its gradient with
/// respect to A: loss = log F(A) - tr(A^T R), grad = E_p[R] - R.
pub fn nll_loss(p: &FisherParams, r_gt: &Rotation) -> Result<(f64, Matrix3<f64>), FisherError> {
    let stats = FisherStats::compute(p)?;
    Ok(nll_loss_with_stats(p, &stats, r_gt))
}

/// NLL given precomputed stats for `p`.
pub fn nll_loss_with_stats(
    p: &FisherParams,
    stats: &FisherStats,
    r_gt: &Rotation,
) -> (f64, Matrix3<f64>) {
    let loss = stats.log_f - p.matrix().dot(r_gt.matrix());
    let grad = stats.expected_rotation() - r_gt.matrix();
    (loss, grad)
}

/// Cross entropy between two matrix Fisher distributions,
/// L = -E_{p_t}[log p_s] = log F(A_s) - tr(A_s^T E_{p_t}[R]),
/// with gradient wrt A_s = E_{p_s}[R] - E_{p_t}[R]. The teacher side is a
/// constant of the optimization.
pub fn cross_entropy(
    p_t: &FisherParams,
    p_s: &FisherParams,
) -> Result<(f64, Matrix3<f64>), FisherError> {
    let t_stats = FisherStats::compute(p_t)?;
    let s_stats = FisherStats::compute(p_s)?;
    Ok(cross_entropy_with_stats(&t_stats.expected_rotation(), p_s, &s_stats))
}

/// Cross entropy given the teacher's expected rotation and student stats.
pub fn cross_entropy_with_stats(
    teacher_expected_r: &Matrix3<f64>,
    p_s: &FisherParams,
    s_stats: &FisherStats,
) -> (f64, Matrix3<f64>) {
    let loss = s_stats.log_f - p_s.matrix().dot(teacher_expected_r);
    let grad = s_stats.expected_rotation() - teacher_expected_r;
    (loss, grad)
}

/// Exact sampling via the Bingham dual on S^3 with an angular-central-Gaussian
/// rejection envelope. Returns the samples and the observed acceptance rate.
pub fn sample_n<R: Rng + ?Sized>(
    p: &FisherParams,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Rotation>, f64), FisherError> {
    use rand_distr::StandardNormal;
    let svd = proper_svd(p.matrix());
    let s = &svd.s;
    // Bingham exponent after shifting: exp(-q^T diag(ash) q) on (w, x, y, z).
    let ash = [
        0.0,
        2.0 * (s[1] + s[2]),
        2.0 * (s[0] + s[2]),
        2.0 * (s[0] + s[1]),
    ];
    // Envelope ACG(Omega), Omega = I + (2/b) diag(ash); b in (0, 4] solves
    // sum_i 1/(b + 2 ash_i) = 1.
    let b = {
        let f = |b: f64| ash.iter().map(|&a| 1.0 / (b + 2.0 * a)).sum::<f64>() - 1.0;
        let (mut lo, mut hi) = (1e-12, 4.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let omega = [
        1.0 + 2.0 * ash[0] / b,
        1.0 + 2.0 * ash[1] / b,
        1.0 + 2.0 * ash[2] / b,
        1.0 + 2.0 * ash[3] / b,
    ];
    let ln_m = (b - 4.0) / 2.0 + 2.0 * (4.0 / b).ln();

    let mut out = Vec::with_capacity(n);
    let mut trials: u64 = 0;
    while out.len() < n {
        trials += 1;
        let mut q = [0.0f64; 4];
        let mut nrm = 0.0;
        for i in 0..4 {
            let g: f64 = rng.sample(StandardNormal);
            q[i] = g / omega[i].sqrt();
            nrm += q[i] * q[i];
        }
        if nrm < 1e-24 {
            continue;
        }
        let inv = nrm.sqrt().recip();
        for qi in &mut q {
            *qi *= inv;
        }
        let quad_a: f64 = (0..4).map(|i| ash[i] * q[i] * q[i]).sum();
        let quad_omega: f64 = (0..4).map(|i| omega[i] * q[i] * q[i]).sum();
        let ln_accept = -quad_a + 2.0 * quad_omega.ln() - ln_m;
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        if u.ln() <= ln_accept {
            let m = quat_to_matrix(&Quaternion::new(q[0], q[1], q[2], q[3]))
                .expect("unit quaternion");
            out.push(Rotation::from_matrix_unchecked(
                svd.u * m.matrix() * svd.v.transpose(),
            ));
        }
        if trials >= 20_000 && (out.len() as f64) < 1e-4 * trials as f64 {
            return Err(FisherError::AcceptanceTooLow {
                rate: out.len() as f64 / trials as f64,
            });
        }
    }
    Ok((out, n as f64 / trials as f64))
}

/// Single exact sample.
pub fn sample<R: Rng + ?Sized>(p: &FisherParams, rng: &mut R) -> Result<Rotation, FisherError> {
    sample_n(p, 1, rng).map(|(mut v, _)| v.pop().expect("one sample"))
}

/// Plain Monte-Carlo estimate of F(A) = E_Haar[exp(tr(A^T R))] with its
/// standard error. Test oracle; deterministic given the seed, fan-out over
/// chunks with a fixed-order reduction.
pub fn mc_normalizer_oracle(p: &FisherParams, n: usize, seed: u64) -> (f64, f64) {
    use crate::parallel::map_range;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const CHUNK: usize = 1 << 14;
    let chunks = n.div_ceil(CHUNK);
    let a = *p.matrix();
    let partials = map_range(chunks, |c| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(c as u64 + 1)));
        let m = CHUNK.min(n - c * CHUNK);
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..m {
            let r = crate::so3::sample_uniform_rotation(&mut rng);
            let x = a.dot(r.matrix()).exp();
            sum += x;
            sum_sq += x * x;
        }
        (sum, sum_sq)
    });
    let (sum, sum_sq) = partials
        .iter()
        .fold((0.0, 0.0), |(s, q), &(ps, pq)| (s + ps, q + pq));
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}
