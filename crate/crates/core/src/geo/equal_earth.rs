//! Equal Earth projection on the unit sphere.
//!
//! Forward:
//!
//! ```text
//! θ = asin(√3/2 · sin φ)
//! x = 2√3 · λ · cos θ / (3 · (9·A4·θ⁸ + 7·A3·θ⁶ + 3·A2·θ² + A1))
//! y = A4·θ⁹ + A3·θ⁷ + A2·θ³ + A1·θ
//! ```
//!
//! with A1 = 1.340264, A2 = -0.081106, A3 = 0.000893, A4 = 0.003796
//! (Šavrič, Patterson & Jenny, 2018). The inverse solves the y polynomial for θ
//! with Newton's method starting from θ₀ = y / A1.

use super::GeoCoordinate;
use crate::error::{Error, Result};

pub const A1: f64 = 1.340264;
pub const A2: f64 = -0.081106;
pub const A3: f64 = 0.000893;
pub const A4: f64 = 0.003796;

const M: f64 = 0.866_025_403_784_438_6; // √3 / 2
const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX_ITER: usize = 20;

/// Parametric latitude at the poles, asin(√3/2) = π/3.
const THETA_MAX: f64 = std::f64::consts::FRAC_PI_3;

/// Half-width of the projection's image (equator, λ = ±π).
pub const X_MAX: f64 = 2.0 * 1.732_050_807_568_877_2 * std::f64::consts::PI / (3.0 * A1);

/// Half-height of the projection's image (north pole).
pub const Y_MAX: f64 = poly_y(THETA_MAX);

/// Equal Earth image of a coordinate, unit-sphere scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

impl ProjectedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Affine map of the bounding rectangle onto [-1, 1]².
    pub fn normalized(&self) -> [f64; 2] {
        [self.x / X_MAX, self.y / Y_MAX]
    }
}

#[inline]
const fn poly_y(t: f64) -> f64 {
    let t2 = t * t;
    let t6 = t2 * t2 * t2;
    t * (A1 + A2 * t2 + t6 * (A3 + A4 * t2))
}

#[inline]
fn poly_dy(t: f64) -> f64 {
    let t2 = t * t;
    let t6 = t2 * t2 * t2;
    A1 + 3.0 * A2 * t2 + t6 * (7.0 * A3 + 9.0 * A4 * t2)
}

pub fn equal_earth_forward(c: GeoCoordinate) -> ProjectedPoint {
    let lam = c.lon_rad();
    let theta = (M * c.lat_rad().sin()).asin();
    let x = 2.0 * 3f64.sqrt() * lam * theta.cos() / (3.0 * poly_dy(theta));
    ProjectedPoint::new(x, poly_y(theta))
}

/// Inverse projection; points outside the projection's image are rejected.
pub fn equal_earth_inverse(p: ProjectedPoint) -> Result<GeoCoordinate> {
    const SLACK: f64 = 1e-12;
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::Domain(format!("non-finite projected point {p:?}")));
    }
    if p.y.abs() > Y_MAX * (1.0 + SLACK) {
        return Err(Error::Domain(format!(
            "y = {} outside projection image (|y| <= {Y_MAX})",
            p.y
        )));
    }
    let y = p.y.clamp(-Y_MAX, Y_MAX);
    let mut theta = y / A1;
    for _ in 0..NEWTON_MAX_ITER {
        let delta = (poly_y(theta) - y) / poly_dy(theta);
        theta -= delta;
        if delta.abs() < NEWTON_TOL {
            break;
        }
    }
    let theta = theta.clamp(-THETA_MAX, THETA_MAX);
    let lam = 3.0 * p.x * poly_dy(theta) / (2.0 * 3f64.sqrt() * theta.cos());
    let pi = std::f64::consts::PI;
    if lam.abs() > pi * (1.0 + SLACK) {
        return Err(Error::Domain(format!(
            "point {p:?} lies outside the projection outline"
        )));
    }
    let phi = (theta.sin() / M).clamp(-1.0, 1.0).asin();
    GeoCoordinate::new(phi.to_degrees(), lam.clamp(-pi, pi).to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(lat: f64, lon: f64) -> GeoCoordinate {
        GeoCoordinate::new(lat, lon).unwrap()
    }

    #[test]
    fn bounding_constants_match_forward() {
        let corner = equal_earth_forward(c(0.0, -180.0));
        assert!((corner.x + X_MAX).abs() < 1e-15);
        let pole = equal_earth_forward(c(90.0, 0.0));
        assert!((pole.y - Y_MAX).abs() < 1e-15);
        assert!((X_MAX - 2.706_629_983_696).abs() < 1e-11);
        assert!((Y_MAX - 1.317_362_759_157).abs() < 1e-11);
    }

    #[test]
    fn origin_maps_to_origin() {
        let p = equal_earth_forward(c(0.0, 0.0));
        assert_eq!((p.x, p.y), (0.0, 0.0));
        let g = equal_earth_inverse(ProjectedPoint::new(0.0, 0.0)).unwrap();
        assert_eq!((g.lat(), g.lon()), (0.0, 0.0));
    }

    #[test]
    fn reflections_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let lat = rng.random_range(-90.0..=90.0);
            let lon = rng.random_range(-179.9..179.9);
            let p = equal_earth_forward(c(lat, lon));
            let q = equal_earth_forward(c(-lat, lon));
            let r = equal_earth_forward(c(lat, -lon));
            assert_eq!((q.x, q.y), (p.x, -p.y));
            assert_eq!((r.x, r.y), (-p.x, p.y));
        }
    }

    #[test]
    fn paris_matches_direct_formula() {
        // independent evaluation of the published formulas, written out term by term
        let phi = 48.8566f64.to_radians();
        let lam = 2.3522f64.to_radians();
        let theta = ((3.0f64).sqrt() / 2.0 * phi.sin()).asin();
        let denom = 3.0
            * (9.0 * 0.003796 * theta.powi(8)
                + 7.0 * 0.000893 * theta.powi(6)
                + 3.0 * -0.081106 * theta.powi(2)
                + 1.340264);
        let x = 2.0 * 3.0f64.sqrt() * lam * theta.cos() / denom;
        let y = 0.003796 * theta.powi(9)
            + 0.000893 * theta.powi(7)
            + -0.081106 * theta.powi(3)
            + 1.340264 * theta;
        let p = equal_earth_forward(c(48.8566, 2.3522));
        assert!((p.x - x).abs() < 1e-14, "{} vs {}", p.x, x);
        assert!((p.y - y).abs() < 1e-14, "{} vs {}", p.y, y);
        // frozen values from the oracle above
        assert!((p.x - 0.029_444_331_182).abs() < 1e-11);
        assert!((p.y - 0.923_361_048_335).abs() < 1e-11);
    }

    #[test]
    fn inverse_at_pole_matches_bisection() {
        // bisection oracle on the monotone y(θ)
        let target = Y_MAX;
        let (mut lo, mut hi) = (0.0f64, THETA_MAX);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if poly_y(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lat_oracle = ((0.5 * (lo + hi)).sin() / M).min(1.0).asin().to_degrees();
        let g = equal_earth_inverse(ProjectedPoint::new(0.0, Y_MAX)).unwrap();
        assert!((g.lat() - 90.0).abs() < 1e-6);
        assert!((g.lat() - lat_oracle).abs() < 1e-6);
        let g = equal_earth_inverse(ProjectedPoint::new(0.0, -Y_MAX)).unwrap();
        assert!((g.lat() + 90.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_matches_bisection_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let y = rng.random_range(-Y_MAX..Y_MAX);
            let (mut lo, mut hi) = (-THETA_MAX, THETA_MAX);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if poly_y(mid) < y {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let lat = ((0.5 * (lo + hi)).sin() / M).asin().to_degrees();
            let g = equal_earth_inverse(ProjectedPoint::new(0.0, y)).unwrap();
            assert!((g.lat() - lat).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_rejects_points_outside_image() {
        assert!(equal_earth_inverse(ProjectedPoint::new(0.0, Y_MAX * 1.01)).is_err());
        assert!(equal_earth_inverse(ProjectedPoint::new(X_MAX * 1.01, 0.0)).is_err());
        // rectangle corner lies outside the curved outline
        assert!(equal_earth_inverse(ProjectedPoint::new(X_MAX, Y_MAX)).is_err());
        assert!(equal_earth_inverse(ProjectedPoint::new(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn round_trip_small_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let g = c(
                rng.random_range(-89.9..=89.9),
                rng.random_range(-180.0..180.0),
            );
            let back = equal_earth_inverse(equal_earth_forward(g)).unwrap();
            assert!((back.lat() - g.lat()).abs() < 1e-10);
            assert!((back.lon() - g.lon()).abs() < 1e-10);
        }
    }
}
