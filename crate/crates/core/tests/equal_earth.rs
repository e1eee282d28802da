use geoalign::geo::{equal_earth_forward, equal_earth_inverse, GeoCoordinate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(lat: f64, lon: f64) -> GeoCoordinate {
    GeoCoordinate::new(lat, lon).unwrap()
}

#[test]
fn round_trip_ten_thousand_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let g = c(
            rng.random_range(-89.9..=89.9),
            rng.random_range(-180.0..180.0),
        );
        let back = equal_earth_inverse(equal_earth_forward(g)).unwrap();
        worst = worst
            .max((back.lat() - g.lat()).abs())
            .max((back.lon() - g.lon()).abs());
    }
    assert!(worst < 1e-10, "worst round-trip error {worst:e} deg");
}

/// Unit-sphere area element is cos φ dλ dφ; an equal-area map has the same
/// Jacobian determinant.
#[test]
fn jacobian_determinant_is_cos_lat() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let h = 1e-5;
    for _ in 0..1000 {
        let (lat, lon) = (
            rng.random_range(-85.0..85.0),
            rng.random_range(-179.0..179.0),
        );
        let f = |la: f64, lo: f64| equal_earth_forward(c(la, lo));
        let (xl, xr) = (f(lat, lon - h), f(lat, lon + h));
        let (yd, yu) = (f(lat - h, lon), f(lat + h, lon));
        let step = 2.0 * h.to_radians();
        let (dx_dl, dy_dl) = ((xr.x - xl.x) / step, (xr.y - xl.y) / step);
        let (dx_dp, dy_dp) = ((yu.x - yd.x) / step, (yu.y - yd.y) / step);
        let det = dx_dl * dy_dp - dx_dp * dy_dl;
        let want = lat.to_radians().cos();
        assert!(
            ((det - want) / want).abs() < 1e-5,
            "lat {lat} lon {lon}: {det} vs {want}"
        );
    }
}

proptest! {
    #[test]
    fn forward_is_odd_in_both_axes(lat in -89.9f64..89.9, lon in -179.9f64..179.9) {
        let p = equal_earth_forward(c(lat, lon));
        let q = equal_earth_forward(c(-lat, -lon));
        prop_assert!((p.x + q.x).abs() < 1e-12 && (p.y + q.y).abs() < 1e-12);
    }

    #[test]
    fn y_is_monotone_in_latitude(a in -89.9f64..89.9, b in -89.9f64..89.9, lon in -179.9f64..179.9) {
        prop_assume!(a < b);
        prop_assert!(equal_earth_forward(c(a, lon)).y < equal_earth_forward(c(b, lon)).y);
    }
}
