//! Renderer and benchmark-data properties: golden fixture, in-plane
//! equivariance, symmetry sweep, mirror consistency, continuity and pose
//! identifiability.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rotreg::augment::{blur3, flip_horizontal, flip_rotation, rotate_image, Image};
use rotreg::data::{render, IMAGE_SIZE};
use rotreg::parallel::map_slice;
use rotreg::so3::{
    geodesic_angle_deg, inplane_rotation, quat_to_matrix, sample_uniform_quaternion,
    sample_uniform_rotation, super_fibonacci_rotations, Quaternion, Rotation,
};

#[test]
fn golden_identity_render() {
    let img = render(&Rotation::identity(), IMAGE_SIZE);
    let bytes = include_bytes!("fixtures/golden_identity.f32le");
    assert_eq!(bytes.len(), IMAGE_SIZE * IMAGE_SIZE * 4);
    for (i, px) in img.pixels.iter().enumerate() {
        let expect = f32::from_le_bytes([
            bytes[4 * i],
            bytes[4 * i + 1],
            bytes[4 * i + 2],
            bytes[4 * i + 3],
        ]);
        assert_eq!(*px, expect, "pixel {i} deviates from the golden render");
    }
}

/// render(M_theta R) agrees with rotate_image(render(R), theta): the
/// equivariance grounding the rotation-consistency alignment.
#[test]
fn render_inplane_equivariance() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let r = sample_uniform_rotation(&mut rng);
        for theta in [-30.0, -18.0, 12.0, 30.0] {
            let direct = render(&(inplane_rotation(theta) * r), IMAGE_SIZE);
            let rotated = rotate_image(&render(&r, IMAGE_SIZE), theta);
            let mut acc = 0.0;
            let mut n = 0usize;
            for i in 0..direct.pixels.len() {
                if rotated.mask[i] {
                    acc += (direct.pixels[i] - rotated.pixels[i]).abs() as f64;
                    n += 1;
                }
            }
            worst = worst.max(acc / n as f64);
        }
    }
    assert!(worst < 0.03, "equivariance mean abs diff {worst}");
}

/// No nontrivial octahedral rotation leaves the rendered object unchanged.
#[test]
fn no_octahedral_self_symmetry() {
    let mut octa = Vec::new();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for p in perms {
        for sx in [-1.0f64, 1.0] {
            for sy in [-1.0f64, 1.0] {
                for sz in [-1.0f64, 1.0] {
                    let mut m = Matrix3::zeros();
                    m[(0, p[0])] = sx;
                    m[(1, p[1])] = sy;
                    m[(2, p[2])] = sz;
                    if (m.determinant() - 1.0).abs() < 1e-9 {
                        octa.push(Rotation::from_matrix_unchecked(m));
                    }
                }
            }
        }
    }
    assert_eq!(octa.len(), 24);
    let base = render(&Rotation::identity(), IMAGE_SIZE);
    let mut nontrivial = 0;
    for g in &octa {
        if geodesic_angle_deg(g, &Rotation::identity()) < 1e-9 {
            continue;
        }
        nontrivial += 1;
        let diff = render(g, IMAGE_SIZE).mean_abs_diff(&base);
        assert!(diff > 0.01, "near-symmetry under {:?}: diff {diff}", g.matrix());
    }
    assert_eq!(nontrivial, 23);
}

/// Mirroring the image equals rendering the conjugated label: the object is
/// mirror-symmetric about its body-x plane by construction, which is what
/// makes the flip label rule exact.
#[test]
fn flip_label_rule_is_exact_for_renderer() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    for _ in 0..40 {
        let r = sample_uniform_rotation(&mut rng);
        let mirrored = flip_horizontal(&render(&r, IMAGE_SIZE));
        let conjugated = render(&flip_rotation(&r), IMAGE_SIZE);
        assert!(conjugated.mean_abs_diff(&mirrored) < 1e-6);
    }
}

#[test]
fn render_is_continuous_in_pose() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for _ in 0..40 {
        let r = sample_uniform_rotation(&mut rng);
        // Small rotation just under one degree.
        let q = Quaternion::new(1.0, 0.004, 0.005, 0.004);
        let n = q.norm();
        let d = quat_to_matrix(&Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n)).unwrap();
        let r2 = d * r;
        assert!(geodesic_angle_deg(&r, &r2) < 1.0);
        let diff = render(&r, IMAGE_SIZE).mean_abs_diff(&render(&r2, IMAGE_SIZE));
        assert!(diff < 0.05, "continuity violated: {diff}");
    }
}

fn quat_of(r: &Rotation) -> [f64; 4] {
    let m = r.matrix();
    let t = m.trace();
    if t > 0.0 {
        let s = (t + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    }
}

/// One Lloyd relaxation pass over the quaternion double cover: assign Haar
/// samples to the nearest center, move each center to its cell's
/// sign-aligned mean quaternion. Tightens the covering of the codebook.
fn lloyd_pass(centers: Vec<Rotation>, n_samples: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let qc: Vec<[f64; 4]> = centers.iter().map(quat_of).collect();
    let samples: Vec<[f64; 4]> = (0..n_samples)
        .map(|_| {
            let q = sample_uniform_quaternion(&mut rng);
            [q.w, q.x, q.y, q.z]
        })
        .collect();
    let assigned: Vec<usize> = map_slice(&samples, |_, s| {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, c) in qc.iter().enumerate() {
            let dot = (s[0] * c[0] + s[1] * c[1] + s[2] * c[2] + s[3] * c[3]).abs();
            if dot > best.0 {
                best = (dot, i);
            }
        }
        best.1
    });
    let mut acc = vec![[0.0f64; 4]; centers.len()];
    for (s, &a) in samples.iter().zip(&assigned) {
        let c = &qc[a];
        let dot = s[0] * c[0] + s[1] * c[1] + s[2] * c[2] + s[3] * c[3];
        let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
        for k in 0..4 {
            acc[a][k] += sign * s[k];
        }
    }
    acc.iter()
        .zip(&qc)
        .map(|(a, c)| {
            let nrm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]).sqrt();
            let q = if nrm > 1e-9 { [a[0] / nrm, a[1] / nrm, a[2] / nrm, a[3] / nrm] } else { *c };
            quat_to_matrix(&Quaternion::new(q[0], q[1], q[2], q[3])).expect("unit")
        })
        .collect()
}

/// Identifiability: image-space nearest neighbor over 10^4 rendered poses
/// recovers the pose of a fresh render within 10 degrees for >= 99% of
/// queries. The codebook is a low-discrepancy covering tightened by three
/// Lloyd passes; images are compared after one box blur.
#[test]
fn pose_identifiable_by_nearest_render() {
    let mut codebook = super_fibonacci_rotations(10_000);
    for pass in 0..3 {
        codebook = lloyd_pass(codebook, 400_000, 100 + pass);
    }
    let renders: Vec<Image> = map_slice(&codebook, |_, r| blur3(&render(r, IMAGE_SIZE)));

    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let queries: Vec<Rotation> = (0..1000).map(|_| sample_uniform_rotation(&mut rng)).collect();
    let fails: usize = map_slice(&queries, |_, q| {
        let qi = blur3(&render(q, IMAGE_SIZE));
        let mut best = (f64::INFINITY, 0usize);
        for (i, ri) in renders.iter().enumerate() {
            let mut d = 0.0f64;
            for k in 0..qi.pixels.len() {
                let e = (qi.pixels[k] - ri.pixels[k]) as f64;
                d += e * e;
                if d > best.0 {
                    break;
                }
            }
            if d < best.0 {
                best = (d, i);
            }
        }
        usize::from(geodesic_angle_deg(q, &codebook[best.1]) > 10.0)
    })
    .iter()
    .sum();
    let rate = 1.0 - fails as f64 / 1000.0;
    println!("identifiability: {} / 1000 recovered within 10 deg", 1000 - fails);
    assert!(rate >= 0.99, "recovery rate {rate}");
}
