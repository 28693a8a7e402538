//! Real spherical harmonics up to band 4 and view-dependent decoding.
//!
//! Convention: orthonormal real harmonics without the Condon-Shortley phase,
//! band-major order with `m` running from `-l` to `l`. Negative `m` uses the
//! `sin(|m| phi)` branch and positive `m` the `cos(m phi)` branch, so band 1
//! is `C1 * (y, z, x)` with `C1 = sqrt(3 / 4pi)`. Every constant below is the
//! product of the normalization `sqrt((2l+1)/4pi * (l-|m|)!/(l+|m|)!)`, the
//! factor `sqrt(2)` for `m != 0`, and the leading coefficient of the
//! polynomial it multiplies.

use std::ops::{Add, Mul, Sub};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 4;

/// `Y_0^0 = 1 / (2 sqrt(pi))`
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_XY: f64 = 1.092_548_430_592_079_2;
const C2_ZZ: f64 = 0.315_391_565_252_520_05;
const C2_XX: f64 = 0.546_274_215_296_039_6;
const C3_A: f64 = 0.590_043_589_926_643_5;
const C3_B: f64 = 2.890_611_442_640_554;
const C3_C: f64 = 0.457_045_799_464_465_8;
const C3_D: f64 = 0.373_176_332_590_115_4;
const C3_E: f64 = 1.445_305_721_320_277;
const C4_A: f64 = 2.503_342_941_796_704_6;
const C4_B: f64 = 1.770_130_769_779_930_4;
const C4_C: f64 = 0.946_174_695_757_560_1;
const C4_D: f64 = 0.669_046_543_557_289_2;
const C4_E: f64 = 0.105_785_546_915_204_31;
const C4_F: f64 = 0.473_087_347_878_780_04;
const C4_G: f64 = 0.625_835_735_449_176_1;

const UNIT_TOL: f64 = 1e-6;

pub fn num_coeffs(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 1)
}

/// Scalar type the basis polynomials are evaluated over.
pub(crate) trait Poly:
    Copy
    + Add<Output = Self>
    + Add<f64, Output = Self>
    + Sub<Output = Self>
    + Sub<f64, Output = Self>
    + Mul<Output = Self>
    + Mul<f64, Output = Self>
{
    fn constant(c: f64) -> Self;
}

impl Poly for f64 {
    fn constant(c: f64) -> Self {
        c
    }
}

/// Value with its gradient with respect to the three direction components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Dual3 { v, d }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual3 {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual3 {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Add<f64> for Dual3 {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        Dual3 { v: self.v + o, d: self.d }
    }
}

impl Sub<f64> for Dual3 {
    type Output = Self;
    fn sub(self, o: f64) -> Self {
        Dual3 { v: self.v - o, d: self.d }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual3 {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Mul<f64> for Dual3 {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        Dual3 {
            v: self.v * o,
            d: [self.d[0] * o, self.d[1] * o, self.d[2] * o],
        }
    }
}

impl Poly for Dual3 {
    fn constant(c: f64) -> Self {
        Dual3 { v: c, d: [0.0; 3] }
    }
}

/// Writes the first `(lmax+1)^2` basis values into `out`. No input checks.
pub(crate) fn eval_basis<T: Poly>(x: T, y: T, z: T, lmax: usize, out: &mut [T]) {
    debug_assert!(lmax <= MAX_DEGREE && out.len() >= num_coeffs(lmax));
    out[0] = T::constant(SH_C0);
    if lmax == 0 {
        return;
    }
    out[1] = y * C1;
    out[2] = z * C1;
    out[3] = x * C1;
    if lmax == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = xy * C2_XY;
    out[5] = yz * C2_XY;
    out[6] = (zz * 3.0 - 1.0) * C2_ZZ;
    out[7] = xz * C2_XY;
    out[8] = (xx - yy) * C2_XX;
    if lmax == 2 {
        return;
    }
    out[9] = y * (xx * 3.0 - yy) * C3_A;
    out[10] = xy * z * C3_B;
    out[11] = y * (zz * 5.0 - 1.0) * C3_C;
    out[12] = z * (zz * 5.0 - 3.0) * C3_D;
    out[13] = x * (zz * 5.0 - 1.0) * C3_C;
    out[14] = z * (xx - yy) * C3_E;
    out[15] = x * (xx - yy * 3.0) * C3_A;
    if lmax == 3 {
        return;
    }
    out[16] = xy * (xx - yy) * C4_A;
    out[17] = yz * (xx * 3.0 - yy) * C4_B;
    out[18] = xy * (zz * 7.0 - 1.0) * C4_C;
    out[19] = yz * (zz * 7.0 - 3.0) * C4_D;
    out[20] = ((zz * 35.0 - 30.0) * zz + 3.0) * C4_E;
    out[21] = xz * (zz * 7.0 - 3.0) * C4_D;
    out[22] = (xx - yy) * (zz * 7.0 - 1.0) * C4_F;
    out[23] = xz * (xx - yy * 3.0) * C4_B;
    out[24] = (xx * (xx - yy * 3.0) - yy * (xx * 3.0 - yy)) * C4_G;
}

/// Basis values for one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ShBasis {
    pub lmax: usize,
    pub values: Vec<f64>,
}

fn check_dir(dir: &Vector3<f64>) -> Result<()> {
    let n = dir.norm();
    if !((n - 1.0).abs() <= UNIT_TOL) {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(())
}

fn check_degree(lmax: usize) -> Result<()> {
    if lmax > MAX_DEGREE {
        return Err(Error::UnsupportedDegree(lmax));
    }
    Ok(())
}

pub fn sh_basis(dir: &Vector3<f64>, lmax: usize) -> Result<ShBasis> {
    check_degree(lmax)?;
    check_dir(dir)?;
    let mut values = vec![0.0; num_coeffs(lmax)];
    eval_basis(dir.x, dir.y, dir.z, lmax, &mut values);
    Ok(ShBasis { lmax, values })
}

/// Basis values and their derivatives with respect to the direction components,
/// the direction being treated as three independent variables.
pub(crate) fn basis_with_gradient(dir: &Vector3<f64>, lmax: usize) -> Vec<Dual3> {
    let mut out = vec![Dual3::constant(0.0); num_coeffs(lmax)];
    eval_basis(
        Dual3::var(dir.x, 0),
        Dual3::var(dir.y, 1),
        Dual3::var(dir.z, 2),
        lmax,
        &mut out,
    );
    out
}

/// `lmax` for a coefficient count, if it is a supported perfect square.
pub fn degree_for(k: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|l| num_coeffs(*l) == k)
}

/// Dot product of each `k`-long channel block with the basis.
pub(crate) fn dot_channels(coeffs: &[f64], basis: &[f64], out: &mut [f64]) {
    let k = basis.len();
    for (o, c) in out.iter_mut().zip(coeffs.chunks_exact(k)) {
        *o = c.iter().zip(basis).map(|(a, b)| a * b).sum();
    }
}

/// RGB of a `3 x K` coefficient block: `max(c . Y + 0.5, 0)` per channel.
pub fn sh_eval_color(coeffs: &[f64], dir: &Vector3<f64>) -> Result<[f64; 3]> {
    if coeffs.len() % 3 != 0 {
        return Err(Error::LengthMismatch {
            expected: 3 * (coeffs.len() / 3 + 1),
            got: coeffs.len(),
        });
    }
    let k = coeffs.len() / 3;
    let lmax = degree_for(k).ok_or(Error::LengthMismatch {
        expected: num_coeffs(degree_for_floor(k)),
        got: k,
    })?;
    let basis = sh_basis(dir, lmax)?;
    let mut rgb = [0.0; 3];
    dot_channels(coeffs, &basis.values, &mut rgb);
    Ok(rgb.map(color_from_dot))
}

pub(crate) fn color_from_dot(v: f64) -> f64 {
    (v + 0.5).max(0.0)
}

fn degree_for_floor(k: usize) -> usize {
    (0..=MAX_DEGREE).rev().find(|l| num_coeffs(*l) <= k).unwrap_or(0)
}

/// Features of a `D x K` coefficient block: `h . Y`, unclamped.
pub fn sh_eval_features(coeffs: &[f64], dim: usize, dir: &Vector3<f64>) -> Result<Vec<f64>> {
    if dim == 0 || coeffs.len() % dim != 0 {
        return Err(Error::LengthMismatch {
            expected: dim * (coeffs.len() / dim.max(1)),
            got: coeffs.len(),
        });
    }
    let k = coeffs.len() / dim;
    let lmax = degree_for(k).ok_or(Error::LengthMismatch {
        expected: num_coeffs(degree_for_floor(k)),
        got: k,
    })?;
    let basis = sh_basis(dir, lmax)?;
    let mut out = vec![0.0; dim];
    dot_channels(coeffs, &basis.values, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|v| v as f64).product()
    }

    /// Associated Legendre P_l^m(t) without the Condon-Shortley phase, by the
    /// standard upward recurrence in l.
    fn legendre(l: usize, m: usize, t: f64) -> f64 {
        let s = (1.0 - t * t).max(0.0).sqrt();
        let mut pmm = 1.0;
        for i in 0..m {
            pmm *= (2 * i + 1) as f64 * s;
        }
        if l == m {
            return pmm;
        }
        let mut pm1 = t * (2 * m + 1) as f64 * pmm;
        if l == m + 1 {
            return pm1;
        }
        let mut pm0 = pmm;
        for ll in (m + 2)..=l {
            let p = ((2 * ll - 1) as f64 * t * pm1 - (ll + m - 1) as f64 * pm0) / (ll - m) as f64;
            pm0 = pm1;
            pm1 = p;
        }
        pm1
    }

    /// Independent spherical-coordinate evaluation of the same convention.
    fn oracle_basis(dir: &Vector3<f64>, lmax: usize) -> Vec<f64> {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let mut out = Vec::new();
        for l in 0..=lmax {
            for m in -(l as i64)..=(l as i64) {
                let am = m.unsigned_abs() as usize;
                let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am)
                    / factorial(l + am))
                .sqrt();
                let p = legendre(l, am, theta.cos());
                let v = match m.signum() {
                    0 => k * p,
                    1 => std::f64::consts::SQRT_2 * k * (am as f64 * phi).cos() * p,
                    _ => std::f64::consts::SQRT_2 * k * (am as f64 * phi).sin() * p,
                };
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn dc_only_degree_zero() {
        let b = sh_basis(&Vector3::new(0.0, 1.0, 0.0), 0).unwrap();
        assert_eq!(b.values.len(), 1);
        assert!((b.values[0] - 0.282_094_8).abs() < 1e-7);
        assert!((SH_C0 - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-16);
    }

    #[test]
    fn band_one_on_z_axis() {
        let b = sh_basis(&Vector3::new(0.0, 0.0, 1.0), 1).unwrap();
        let expected = oracle_basis(&Vector3::z(), 1);
        assert!((expected[2] - 0.488_602_5).abs() < 1e-7);
        for (a, e) in b.values.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(b.values[0].to_bits(), SH_C0.to_bits());
        assert_eq!(b.values[1], 0.0);
        assert_eq!(b.values[3], 0.0);
    }

    #[test]
    fn matches_legendre_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = random_dir(&mut rng);
            let b = sh_basis(&d, 4).unwrap();
            let o = oracle_basis(&d, 4);
            for (k, (a, e)) in b.values.iter().zip(&o).enumerate() {
                assert!((a - e).abs() < 1e-12, "coefficient {k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn orthonormal_under_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let k = num_coeffs(4);
        let mut gram = vec![0.0; k * k];
        let mut vals = vec![0.0; k];
        for _ in 0..n {
            // uniform on the sphere via normalized Gaussian vector
            let g: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(rand_distr::StandardNormal));
            let d = g / g.norm();
            eval_basis(d.x, d.y, d.z, 4, &mut vals);
            for i in 0..k {
                for j in i..k {
                    gram[i * k + j] += vals[i] * vals[j];
                }
            }
        }
        let target = 1.0 / (4.0 * std::f64::consts::PI);
        for i in 0..k {
            for j in i..k {
                let mean = gram[i * k + j] / n as f64;
                let expect = if i == j { target } else { 0.0 };
                // about five standard errors at 1e6 samples
                assert!((mean - expect).abs() < 1.5e-3, "({i},{j}) {mean}");
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            sh_basis(&Vector3::new(0.0, 0.0, 1.1), 2),
            Err(Error::NonUnitDirection(_))
        ));
        let err = sh_basis(&Vector3::z(), 5).unwrap_err();
        assert!(err.to_string().contains("unsupported degree"));
        assert!(sh_eval_color(&[0.0; 3 * 5], &Vector3::z()).is_err());
        assert!(sh_eval_features(&[0.0; 4 * 8], 4, &Vector3::z()).is_err());
    }

    #[test]
    fn color_dc_offset_and_clamp() {
        let mut c = vec![0.0; 3 * 25];
        c[0] = 0.5 / 0.282_094_8;
        let rgb = sh_eval_color(&c, &Vector3::x()).unwrap();
        assert!((rgb[0] - 1.0).abs() < 1e-6);
        assert_eq!(rgb[1], 0.5);
        assert_eq!(rgb[2], 0.5);

        let rgb = sh_eval_color(&vec![0.0; 75], &Vector3::y()).unwrap();
        assert_eq!(rgb, [0.5; 3]);

        let mut c = vec![0.0; 75];
        c[0] = -10.0;
        assert_eq!(sh_eval_color(&c, &Vector3::z()).unwrap()[0], 0.0);
    }

    #[test]
    fn features_zero_and_isotropic_dc() {
        assert_eq!(sh_eval_features(&[0.0; 36], 4, &Vector3::x()).unwrap(), vec![0.0; 4]);
        let mut h = vec![0.0; 36];
        for ch in 0..4 {
            h[ch * 9] = ch as f64 - 1.5;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = sh_eval_features(&h, 4, &random_dir(&mut rng)).unwrap();
        let b = sh_eval_features(&h, 4, &random_dir(&mut rng)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn odd_bands_flip_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut h = vec![0.0; 4 * 25];
        for ch in 0..4 {
            for l in [1usize, 3] {
                for k in l * l..(l + 1) * (l + 1) {
                    h[ch * 25 + k] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let d = random_dir(&mut rng);
        let a = sh_eval_features(&h, 4, &d).unwrap();
        let b = sh_eval_features(&h, 4, &-d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = random_dir(&mut rng);
        let duals = basis_with_gradient(&d, 4);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let mut vp = vec![0.0; 25];
            let mut vm = vec![0.0; 25];
            eval_basis(p.x, p.y, p.z, 4, &mut vp);
            eval_basis(m.x, m.y, m.z, 4, &mut vm);
            for k in 0..25 {
                let fd = (vp[k] - vm[k]) / (2.0 * h);
                assert!((duals[k].d[axis] - fd).abs() < 1e-7, "k {k} axis {axis}");
            }
        }
    }

    proptest! {
        #[test]
        fn parity(v in prop::array::uniform3(-1.0f64..1.0)) {
            let v = Vector3::from(v);
            prop_assume!(v.norm() > 0.1);
            let d = v / v.norm();
            let a = sh_basis(&d, 4).unwrap();
            let b = sh_basis(&-d, 4).unwrap();
            for l in 0..=4usize {
                let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                for k in l * l..(l + 1) * (l + 1) {
                    prop_assert!((b.values[k] - sign * a.values[k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn features_are_linear(
            h1 in prop::collection::vec(-2.0f64..2.0, 36),
            h2 in prop::collection::vec(-2.0f64..2.0, 36),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            v in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let v = Vector3::from(v);
            prop_assume!(v.norm() > 0.1);
            let d = v / v.norm();
            let mix: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
            let f = sh_eval_features(&mix, 4, &d).unwrap();
            let f1 = sh_eval_features(&h1, 4, &d).unwrap();
            let f2 = sh_eval_features(&h2, 4, &d).unwrap();
            for c in 0..4 {
                prop_assert!((f[c] - (a * f1[c] + b * f2[c])).abs() < 1e-9);
            }
        }

        #[test]
        fn degree_zero_is_isotropic(c in prop::collection::vec(-5.0f64..5.0, 3), v in prop::array::uniform3(-1.0f64..1.0)) {
            let v = Vector3::from(v);
            prop_assume!(v.norm() > 0.1);
            let a = sh_eval_color(&c, &(v / v.norm())).unwrap();
            let b = sh_eval_color(&c, &Vector3::z()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn coefficient_gradient_is_the_basis(v in prop::array::uniform3(-1.0f64..1.0), ch in 0usize..4, k in 0usize..9) {
            // features are linear in h, so a unit coefficient reads back its basis value
            let v = Vector3::from(v);
            prop_assume!(v.norm() > 0.1);
            let d = v / v.norm();
            let mut h = vec![0.0; 36];
            h[ch * 9 + k] = 1.0;
            let f = sh_eval_features(&h, 4, &d).unwrap();
            let b = sh_basis(&d, 2).unwrap();
            prop_assert_eq!(f[ch], b.values[k]);
        }
    }
}
