//! WGS 84 / Antarctic Polar Stereographic (EPSG:3031).
//!
//! Ellipsoidal polar stereographic, variant B: the scale is true on the
//! standard parallel 71°S, the central meridian is 0° and there is no false
//! easting or northing. The South Pole maps to the origin; the 0° meridian
//! runs along +y and 90°E along +x.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

/// WGS 84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS 84 inverse flattening.
pub const WGS84_INV_F: f64 = 298.257_223_563;
/// Latitude of true scale (degrees).
pub const STANDARD_PARALLEL: f64 = -71.0;
/// Central meridian (degrees).
pub const CENTRAL_MERIDIAN: f64 = 0.0;

const MAX_INVERSE_ITERS: usize = 50;
const INVERSE_TOL_RAD: f64 = 1e-12;

/// Easting/northing in meters on the EPSG:3031 plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

struct Ellipsoid {
    e: f64,
    /// a * m_c / t_c, the radius factor applied to t.
    rho_per_t: f64,
}

fn ellipsoid() -> &'static Ellipsoid {
    use std::sync::OnceLock;
    static E: OnceLock<Ellipsoid> = OnceLock::new();
    E.get_or_init(|| {
        let f = 1.0 / WGS84_INV_F;
        let e = (f * (2.0 - f)).sqrt();
        // Work in the mirrored (north-polar) frame: phi' = -phi.
        let phi_c = -STANDARD_PARALLEL.to_radians();
        let sin_c = phi_c.sin();
        let m_c = phi_c.cos() / (1.0 - e * e * sin_c * sin_c).sqrt();
        let t_c = iso_t(phi_c, e);
        Ellipsoid {
            e,
            rho_per_t: WGS84_A * m_c / t_c,
        }
    })
}

/// t(phi) = tan(pi/4 - phi/2) / ((1 - e sin phi)/(1 + e sin phi))^(e/2), phi in the north-polar frame.
fn iso_t(phi: f64, e: f64) -> f64 {
    let es = e * phi.sin();
    (FRAC_PI_4 - phi / 2.0).tan() / ((1.0 - es) / (1.0 + es)).powf(e / 2.0)
}

/// Forward projection of a Southern Hemisphere position.
pub fn project_aps(lat: f64, lon: f64) -> Result<ProjectedPoint> {
    if !lat.is_finite() || !lon.is_finite() || !(-90.0..0.0).contains(&lat) || lon.abs() > 180.0 {
        return Err(Error::OutOfDomain { lat, lon });
    }
    let el = ellipsoid();
    let phi = -lat.to_radians();
    let rho = if lat == -90.0 {
        0.0
    } else {
        el.rho_per_t * iso_t(phi, el.e)
    };
    let lam = (lon - CENTRAL_MERIDIAN).to_radians();
    let (s, c) = lam.sin_cos();
    Ok(ProjectedPoint {
        x: rho * s,
        y: rho * c,
    })
}

/// Inverse projection. Returns `(lat, lon)` in degrees; at the pole the
/// longitude is reported as 0.
pub fn inverse_aps(p: ProjectedPoint) -> Result<(f64, f64)> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::NonFinite(format!("projected point ({}, {})", p.x, p.y)));
    }
    let rho = p.x.hypot(p.y);
    if rho == 0.0 {
        return Ok((-90.0, 0.0));
    }
    let el = ellipsoid();
    let t = rho / el.rho_per_t;
    let half_e = el.e / 2.0;
    let mut phi = FRAC_PI_2 - 2.0 * t.atan();
    for _ in 0..MAX_INVERSE_ITERS {
        let es = el.e * phi.sin();
        let next = FRAC_PI_2 - 2.0 * (t * ((1.0 - es) / (1.0 + es)).powf(half_e)).atan();
        let done = (next - phi).abs() < INVERSE_TOL_RAD;
        phi = next;
        if done {
            break;
        }
    }
    let lon = p.x.atan2(p.y).to_degrees() + CENTRAL_MERIDIAN;
    Ok((-phi.to_degrees(), lon))
}
