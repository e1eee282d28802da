//! Spherical and planar geospatial math.
//!
//! Coordinates live on a spherical Earth of radius [`EARTH_RADIUS_M`]. The
//! planar representation is the Equal Earth projection on the unit sphere
//! (see [`equal_earth`]), and geocells are a uniform quadtree over the
//! projection's bounding rectangle (see [`cell`]).

pub mod cell;
pub mod equal_earth;

pub use cell::{cell_centroid, cell_of, CellId, MAX_LEVEL};
pub use equal_earth::{equal_earth_forward, equal_earth_inverse, ProjectedPoint, X_MAX, Y_MAX};

use crate::error::{Error, Result};

/// IUGG mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A location in decimal degrees.
///
/// Latitude is validated into [-90, 90]; longitude is wrapped into [-180, 180).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoordinate {
    lat: f64,
    lon: f64,
}

impl GeoCoordinate {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite coordinate ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Domain(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(Self {
            lat,
            lon: wrap_longitude(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat_rad(&self) -> f64 {
        self.lat.to_radians()
    }

    pub fn lon_rad(&self) -> f64 {
        self.lon.to_radians()
    }
}

fn wrap_longitude(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Great-circle distance in meters on the spherical Earth.
pub fn haversine_distance(a: GeoCoordinate, b: GeoCoordinate) -> f64 {
    let (lat1, lat2) = (a.lat_rad(), b.lat_rad());
    let dlat = lat2 - lat1;
    let dlon = b.lon_rad() - a.lon_rad();
    let s_lat = (dlat * 0.5).sin();
    let s_lon = (dlon * 0.5).sin();
    let h = (s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt())
}
