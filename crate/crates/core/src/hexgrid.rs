//! Hierarchical hexagonal grid over a locally projected plane.
//!
//! Geographic points are first projected onto a flat metric frame centred at
//! [`GridSpec::origin`]. Each resolution is a pointy-top hexagonal lattice
//! addressed by axial coordinates `(q, r)`; going one resolution coarser
//! multiplies the edge length by √7 (so cell area by 7) and keeps only the
//! index-7 sublattice spanned by `2u + v` and `-u + 3v`.
//!
//! The sublattice is rotated by `atan(√3 / 5)` relative to its children, so
//! every resolution carries its own basis rotation. The reference resolution
//! is the unrotated one: at that resolution `u = (√3·e, 0)` and
//! `v = (√3/2·e, 3/2·e)`.
//!
//! Children are only approximately nested in their parents; the guarantee is
//! that a child's centre lies within one coarse edge length of its parent's
//! centre.

use std::fmt;

use crate::error::{Error, Result};

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Highest supported resolution.
pub const MAX_RESOLUTION: u8 = 15;

/// Axial coordinates must satisfy `|q|, |r| < 2^27` to be packable.
pub const COORD_LIMIT: i64 = 1 << 27;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lng: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lng: f64) -> Result<Self> {
        let p = GeoPoint { lat, lng };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::domain(format!("latitude {} out of range", self.lat)));
        }
        if !self.lng.is_finite() || !(-180.0..=180.0).contains(&self.lng) {
            return Err(Error::domain(format!("longitude {} out of range", self.lng)));
        }
        Ok(())
    }
}

/// Metres east (`x`) and north (`y`) of the projection origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

impl ProjectedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        ProjectedPoint { x, y }
    }

    pub fn dist(&self, other: &ProjectedPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist2(&self, other: &ProjectedPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// One hexagonal cell: a resolution plus axial lattice coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HexCellId {
    pub resolution: u8,
    pub q: i64,
    pub r: i64,
}

impl HexCellId {
    pub fn new(resolution: u8, q: i64, r: i64) -> Result<Self> {
        let c = HexCellId { resolution, q, r };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution > MAX_RESOLUTION {
            return Err(Error::domain(format!(
                "resolution {} exceeds {MAX_RESOLUTION}",
                self.resolution
            )));
        }
        if self.q.abs() >= COORD_LIMIT || self.r.abs() >= COORD_LIMIT {
            return Err(Error::domain(format!(
                "axial coordinates ({}, {}) overflow the 28-bit packing",
                self.q, self.r
            )));
        }
        Ok(())
    }

    /// Packs into a 64-bit identifier.
    ///
    /// Layout: bits 60..64 hold the resolution, bits 30..58 hold `q` and bits
    /// 0..28 hold `r`, both as 28-bit two's complement. All other bits are
    /// zero.
    pub fn pack(&self) -> Result<u64> {
        self.validate()?;
        const MASK: u64 = (1 << 28) - 1;
        let q = (self.q as u64) & MASK;
        let r = (self.r as u64) & MASK;
        Ok(((self.resolution as u64) << 60) | (q << 30) | r)
    }

    pub fn unpack(id: u64) -> Result<Self> {
        const MASK: u64 = (1 << 28) - 1;
        if id & ((0b11 << 58) | (0b11 << 28)) != 0 {
            return Err(Error::domain(format!("{id:016X} has reserved bits set")));
        }
        let sign_extend = |v: u64| -> i64 { ((v << 36) as i64) >> 36 };
        let cell = HexCellId {
            resolution: (id >> 60) as u8,
            q: sign_extend((id >> 30) & MASK),
            r: sign_extend(id & MASK),
        };
        cell.validate()?;
        Ok(cell)
    }

    /// The packed identifier as 16 uppercase hex digits.
    pub fn to_hex(&self) -> Result<String> {
        Ok(format!("{:016X}", self.pack()?))
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let id = u64::from_str_radix(s, 16)
            .map_err(|e| Error::domain(format!("bad cell id {s:?}: {e}")))?;
        Self::unpack(id)
    }
}

impl fmt::Display for HexCellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pack() {
            Ok(id) => write!(f, "{id:016X}"),
            Err(_) => write!(f, "res{}({}, {})", self.resolution, self.q, self.r),
        }
    }
}

/// Projection origin and cell size calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: GeoPoint,
    pub ref_resolution: u8,
    /// Hexagon edge length in metres at `ref_resolution`.
    pub ref_edge_m: f64,
}

impl GridSpec {
    /// Edge length at resolution 7, from a regular hexagon of ≈5.16 km².
    pub const DEFAULT_REF_EDGE_M: f64 = 1406.0;
    pub const DEFAULT_REF_RESOLUTION: u8 = 7;

    pub fn new(origin: GeoPoint) -> Self {
        GridSpec {
            origin,
            ref_resolution: Self::DEFAULT_REF_RESOLUTION,
            ref_edge_m: Self::DEFAULT_REF_EDGE_M,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.origin.validate()?;
        if self.ref_resolution > MAX_RESOLUTION {
            return Err(Error::domain("reference resolution exceeds 15"));
        }
        if !(self.ref_edge_m.is_finite() && self.ref_edge_m > 0.0) {
            return Err(Error::domain(format!(
                "reference edge length {} must be positive",
                self.ref_edge_m
            )));
        }
        Ok(())
    }

    /// Edge length `e_ρ = ref_edge_m · 7^((ref − ρ)/2)`.
    pub fn edge_m(&self, resolution: u8) -> f64 {
        let steps = self.ref_resolution as i32 - resolution as i32;
        let mut e = self.ref_edge_m;
        // repeated multiplication, so consecutive ratios are √7 to one ulp
        let sqrt7 = 7f64.sqrt();
        if steps >= 0 {
            for _ in 0..steps {
                e *= sqrt7;
            }
        } else {
            for _ in 0..(-steps) {
                e /= sqrt7;
            }
        }
        e
    }

    /// Area of one regular hexagon at `resolution`.
    pub fn cell_area_m2(&self, resolution: u8) -> f64 {
        let e = self.edge_m(resolution);
        1.5 * SQRT3 * e * e
    }

    /// Basis rotation at `resolution`, in radians.
    fn rotation(&self, resolution: u8) -> (f64, f64) {
        let phi = SQRT3.atan2(5.0);
        let theta = (self.ref_resolution as f64 - resolution as f64) * phi;
        theta.sin_cos()
    }

    /// Lattice basis vectors `(u, v)` at `resolution`.
    pub fn basis(&self, resolution: u8) -> (ProjectedPoint, ProjectedPoint) {
        let e = self.edge_m(resolution);
        let (s, c) = self.rotation(resolution);
        let rot = |x: f64, y: f64| ProjectedPoint::new(c * x - s * y, s * x + c * y);
        (rot(SQRT3 * e, 0.0), rot(SQRT3 / 2.0 * e, 1.5 * e))
    }
}

/// Equirectangular projection around `spec.origin`.
pub fn project(p: GeoPoint, spec: &GridSpec) -> Result<ProjectedPoint> {
    p.validate()?;
    spec.validate()?;
    let lat0 = spec.origin.lat.to_radians();
    let x = EARTH_RADIUS_M * (p.lng - spec.origin.lng).to_radians() * lat0.cos();
    let y = EARTH_RADIUS_M * (p.lat - spec.origin.lat).to_radians();
    Ok(ProjectedPoint::new(x, y))
}

/// Inverse of [`project`].
pub fn unproject(p: ProjectedPoint, spec: &GridSpec) -> Result<GeoPoint> {
    spec.validate()?;
    if !(p.x.is_finite() && p.y.is_finite()) {
        return Err(Error::domain("projected point is not finite"));
    }
    let lat0 = spec.origin.lat.to_radians();
    let lat = spec.origin.lat + (p.y / EARTH_RADIUS_M).to_degrees();
    let lng = spec.origin.lng + (p.x / (EARTH_RADIUS_M * lat0.cos())).to_degrees();
    GeoPoint::new(lat, lng)
}

/// Rounds fractional axial coordinates to the containing hexagon.
///
/// The cube component with the largest rounding residual is recomputed from
/// the other two, which also settles ties deterministically.
pub fn cube_round(qf: f64, rf: f64) -> (i64, i64) {
    let sf = -qf - rf;
    let mut q = qf.round();
    let mut r = rf.round();
    let s = sf.round();
    let dq = (q - qf).abs();
    let dr = (r - rf).abs();
    let ds = (s - sf).abs();
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i64, r as i64)
}

/// The cell at `resolution` whose centre is nearest to `p`.
pub fn cell_of(p: ProjectedPoint, resolution: u8, spec: &GridSpec) -> Result<HexCellId> {
    if resolution > MAX_RESOLUTION {
        return Err(Error::domain(format!("resolution {resolution} exceeds 15")));
    }
    let e = spec.edge_m(resolution);
    let (s, c) = spec.rotation(resolution);
    // undo the basis rotation, then invert the unrotated axial basis
    let x = c * p.x + s * p.y;
    let y = -s * p.x + c * p.y;
    let rf = y / (1.5 * e);
    let qf = x / (SQRT3 * e) - rf / 2.0;
    let (q, r) = cube_round(qf, rf);
    HexCellId::new(resolution, q, r)
}

pub fn centroid(c: HexCellId, spec: &GridSpec) -> ProjectedPoint {
    let (u, v) = spec.basis(c.resolution);
    let (q, r) = (c.q as f64, c.r as f64);
    ProjectedPoint::new(q * u.x + r * v.x, q * u.y + r * v.y)
}

/// The coarser-resolution cell obtained by rounding onto the index-7
/// sublattice.
pub fn parent(c: HexCellId) -> Result<HexCellId> {
    if c.resolution == 0 {
        return Err(Error::domain("resolution 0 cells have no parent"));
    }
    let (q, r) = (c.q as f64, c.r as f64);
    let (pq, pr) = cube_round((3.0 * q + r) / 7.0, (-q + 2.0 * r) / 7.0);
    HexCellId::new(c.resolution - 1, pq, pr)
}

/// Walks up the hierarchy until `resolution`.
pub fn ancestor(mut c: HexCellId, resolution: u8) -> Result<HexCellId> {
    if resolution > c.resolution {
        return Err(Error::domain("ancestor resolution must not exceed the cell's"));
    }
    while c.resolution > resolution {
        c = parent(c)?;
    }
    Ok(c)
}
