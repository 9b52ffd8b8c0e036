//! Adaptive Gauss-Kronrod (G7-K15) quadrature for small fixed-size vector
//! integrands. All components are integrated on shared nodes; the interval
//! with the worst error estimate is split until every component meets
//! max(abs_tol, rel_tol * |integral|).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("quadrature did not converge: worst relative error {achieved:.3e} after {segments} segments")]
    NotConverged { achieved: f64, segments: usize },
}

// QUADPACK dqk15 abscissae (positive half) and weights.
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
// 7-point Gauss weights for XGK indices 1, 3, 5, 7.
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

struct Segment<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: f64,
}

fn gk15_segment<const N: usize, F: Fn(f64) -> [f64; N]>(f: &F, a: f64, b: f64) -> Segment<N> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = [0.0; N];
    let mut gauss = [0.0; N];
    for (j, &x) in XGK.iter().enumerate() {
        let (fl, fr) = if j == 7 {
            let v = f(c);
            (v, [0.0; N])
        } else {
            (f(c - h * x), f(c + h * x))
        };
        for i in 0..N {
            let s = if j == 7 { fl[i] } else { fl[i] + fr[i] };
            kron[i] += WGK[j] * s;
            // Gauss nodes are XGK indices 1, 3, 5 and the center (7).
            if j % 2 == 1 {
                gauss[i] += WG[j / 2] * s;
            }
        }
    }
    let mut err = 0.0f64;
    let mut value = [0.0; N];
    for i in 0..N {
        value[i] = kron[i] * h;
        err = err.max((kron[i] - gauss[i]).abs() * h);
    }
    Segment { a, b, value, error: err }
}

/// Integrates `f` over [a, b] componentwise.
pub fn adaptive_gk15<const N: usize, F: Fn(f64) -> [f64; N]>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_segments: usize,
) -> Result<([f64; N], f64), QuadError> {
    let mut segs = vec![gk15_segment(f, a, b)];
    loop {
        let mut total = [0.0; N];
        let mut total_err = 0.0;
        let mut worst = 0usize;
        let mut worst_err = -1.0;
        for (i, s) in segs.iter().enumerate() {
            for k in 0..N {
                total[k] += s.value[k];
            }
            total_err += s.error;
            if s.error > worst_err {
                worst_err = s.error;
                worst = i;
            }
        }
        let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if total_err <= abs_tol.max(rel_tol * scale) {
            return Ok((total, total_err));
        }
        if segs.len() >= max_segments {
            return Err(QuadError::NotConverged {
                achieved: total_err / scale.max(f64::MIN_POSITIVE),
                segments: segs.len(),
            });
        }
        let s = segs.swap_remove(worst);
        let m = 0.5 * (s.a + s.b);
        segs.push(gk15_segment(f, s.a, m));
        segs.push(gk15_segment(f, m, s.b));
    }
}
