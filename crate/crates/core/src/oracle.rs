//! Brute-force ground truth over a dense grid of joint-space cell centers.
//!
//! The grid enumerates the colliding set at a fixed resolution; distances are
//! exact minimizations over the colliding cell centers. Nothing in here is
//! used to produce training data.

use crate::geometry::{is_colliding, Configuration, RobotModel, Scene};
use rayon::prelude::*;
use std::io::{Read, Write};
use thiserror::Error;

/// Refuse grids above this many cells.
pub const MAX_CELLS: usize = 100_000_000;

pub const GRID_MAGIC: &[u8; 8] = b"QFLOWGRD";
const GRID_VERSION: u32 = 2;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("resolution must be at least 2 per axis and match dof {dof}: {resolution:?}")]
    BadResolution { dof: usize, resolution: Vec<usize> },
    #[error("grid of {0} cells exceeds the {MAX_CELLS} cell guard")]
    TooLarge(usize),
    #[error("query has {got} joints, grid has {expected}")]
    DofMismatch { expected: usize, got: usize },
    #[error("query outside grid bounds on joint {0}")]
    OutOfBounds(usize),
    #[error("gradient undefined: query is colliding (d_min = 0)")]
    GradientUndefined,
    #[error("gradient undefined: scene has no colliding configurations")]
    FreeScene,
    #[error("grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense collision census of the joint box.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionGrid {
    resolution: Vec<usize>,
    bounds: Vec<(f64, f64)>,
    flags: Vec<bool>,
    colliding_points: Vec<Configuration>,
}

/// Brute-force CDF value and minimal-distance set for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleAnswer {
    pub query: Configuration,
    /// `+inf` when the scene has no colliding cell.
    pub d_min: f64,
    pub minimal_set: Vec<Configuration>,
}

impl OracleAnswer {
    pub fn is_free_scene(&self) -> bool {
        self.d_min.is_infinite()
    }
}

impl CollisionGrid {
    pub fn dof(&self) -> usize {
        self.resolution.len()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn colliding_points(&self) -> &[Configuration] {
        &self.colliding_points
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn colliding_fraction(&self) -> f64 {
        self.colliding_points.len() as f64 / self.flags.len() as f64
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        self.resolution
            .iter()
            .zip(&self.bounds)
            .map(|(&n, &(lo, hi))| (hi - lo) / n as f64)
            .collect()
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.cell_widths().iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Default minimal-set tolerance: 1.5 cell diagonals.
    pub fn default_tolerance(&self) -> f64 {
        1.5 * self.cell_diagonal()
    }

    /// Flat index to per-axis index; axis 0 varies slowest.
    fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dof()];
        for k in (0..self.dof()).rev() {
            idx[k] = flat % self.resolution[k];
            flat /= self.resolution[k];
        }
        idx
    }

    pub fn cell_center(&self, flat: usize) -> Configuration {
        center_of(&self.unravel(flat), &self.resolution, &self.bounds)
    }

    /// Flat index of the cell containing `q`.
    pub fn cell_of(&self, q: &[f64]) -> Result<usize, OracleError> {
        if q.len() != self.dof() {
            return Err(OracleError::DofMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        let mut flat = 0;
        for (k, (&v, (&n, &(lo, hi)))) in q
            .iter()
            .zip(self.resolution.iter().zip(&self.bounds))
            .enumerate()
        {
            if !(v >= lo && v <= hi) {
                return Err(OracleError::OutOfBounds(k));
            }
            let i = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
            flat = flat * n + i.min(n - 1);
        }
        Ok(flat)
    }

    /// Centers of colliding cells that share a face with a free cell.
    pub fn boundary_points(&self) -> Vec<Configuration> {
        let mut strides = vec![1; self.dof()];
        for k in (0..self.dof().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.resolution[k + 1];
        }
        (0..self.flags.len())
            .filter(|&i| self.flags[i])
            .filter(|&i| {
                let idx = self.unravel(i);
                (0..self.dof()).any(|k| {
                    (idx[k] > 0 && !self.flags[i - strides[k]])
                        || (idx[k] + 1 < self.resolution[k] && !self.flags[i + strides[k]])
                })
            })
            .map(|i| self.cell_center(i))
            .collect()
    }

    fn from_flags(resolution: Vec<usize>, bounds: Vec<(f64, f64)>, flags: Vec<bool>) -> Self {
        let mut grid = Self {
            resolution,
            bounds,
            flags,
            colliding_points: Vec::new(),
        };
        grid.colliding_points = grid
            .flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| grid.cell_center(i))
            .collect();
        grid
    }

    /// Compact binary form: magic, version, dof, per-axis (cells, lo, hi),
    /// then the flags packed eight to a byte, least significant bit first,
    /// then a CRC-32 of everything before it.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), OracleError> {
        let mut buf = Vec::new();
        self.write_body(&mut buf)?;
        buf.extend_from_slice(&crc32fast::hash(&buf).to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    fn write_body<W: Write>(&self, mut w: W) -> Result<(), OracleError> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        w.write_all(&(self.dof() as u32).to_le_bytes())?;
        for (&n, &(lo, hi)) in self.resolution.iter().zip(&self.bounds) {
            w.write_all(&(n as u64).to_le_bytes())?;
            w.write_all(&lo.to_le_bytes())?;
            w.write_all(&hi.to_le_bytes())?;
        }
        let mut packed = vec![0u8; self.flags.len().div_ceil(8)];
        for (i, &f) in self.flags.iter().enumerate() {
            if f {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, OracleError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < GRID_MAGIC.len() + 4 {
            return Err(OracleError::Format("truncated grid".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(OracleError::Format("checksum mismatch".into()));
        }
        let mut r = body;
        let grid = Self::read_body(&mut r)?;
        if !r.is_empty() {
            return Err(OracleError::Format("trailing bytes".into()));
        }
        Ok(grid)
    }

    fn read_body<R: Read>(mut r: R) -> Result<Self, OracleError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(OracleError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != GRID_VERSION {
            return Err(OracleError::Format(format!("unsupported version {version}")));
        }
        let dof = read_u32(&mut r)? as usize;
        if dof == 0 || dof > 16 {
            return Err(OracleError::Format(format!("implausible dof {dof}")));
        }
        let mut resolution = Vec::with_capacity(dof);
        let mut bounds = Vec::with_capacity(dof);
        for _ in 0..dof {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            resolution.push(u64::from_le_bytes(b8) as usize);
            r.read_exact(&mut b8)?;
            let lo = f64::from_le_bytes(b8);
            r.read_exact(&mut b8)?;
            bounds.push((lo, f64::from_le_bytes(b8)));
        }
        let cells = checked_cells(dof, &resolution)?;
        let mut packed = vec![0u8; cells.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let flags = (0..cells).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self::from_flags(resolution, bounds, flags))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, OracleError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn center_of(idx: &[usize], resolution: &[usize], bounds: &[(f64, f64)]) -> Configuration {
    idx.iter()
        .zip(resolution.iter().zip(bounds))
        .map(|(&i, (&n, &(lo, hi)))| lo + (i as f64 + 0.5) * (hi - lo) / n as f64)
        .collect()
}

fn checked_cells(dof: usize, resolution: &[usize]) -> Result<usize, OracleError> {
    if resolution.len() != dof || resolution.iter().any(|&n| n < 2) {
        return Err(OracleError::BadResolution {
            dof,
            resolution: resolution.to_vec(),
        });
    }
    let mut cells: usize = 1;
    for &n in resolution {
        cells = cells.saturating_mul(n);
    }
    if cells > MAX_CELLS {
        return Err(OracleError::TooLarge(cells));
    }
    Ok(cells)
}

/// Exhaustive census of cell centers over the robot's joint box.
pub fn build_collision_grid(
    model: &RobotModel,
    scene: &Scene,
    resolution: &[usize],
) -> Result<CollisionGrid, OracleError> {
    let cells = checked_cells(model.dof(), resolution)?;
    let bounds = model.joint_limits().to_vec();
    let res = resolution.to_vec();
    let flags: Vec<bool> = (0..cells)
        .into_par_iter()
        .with_min_len(4096)
        .map(|flat| {
            let mut idx = vec![0; res.len()];
            let mut f = flat;
            for k in (0..res.len()).rev() {
                idx[k] = f % res[k];
                f /= res[k];
            }
            is_colliding(model, scene, &center_of(&idx, &res, &bounds))
        })
        .collect();
    Ok(CollisionGrid::from_flags(res, bounds, flags))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Exact (at grid resolution) configuration-space distance to the colliding
/// set and every colliding cell center within `tol` of the minimum.
pub fn oracle_cdf(grid: &CollisionGrid, q: &[f64], tol: f64) -> Result<OracleAnswer, OracleError> {
    let cell = grid.cell_of(q)?;
    if grid.flags[cell] {
        return Ok(OracleAnswer {
            query: q.to_vec(),
            d_min: 0.0,
            minimal_set: vec![grid.cell_center(cell)],
        });
    }
    let dists: Vec<f64> = grid.colliding_points.iter().map(|p| dist(q, p)).collect();
    let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let minimal_set = if d_min.is_finite() {
        grid.colliding_points
            .iter()
            .zip(&dists)
            .filter(|(_, &d)| d <= d_min + tol)
            .map(|(p, _)| p.clone())
            .collect()
    } else {
        Vec::new()
    };
    Ok(OracleAnswer {
        query: q.to_vec(),
        d_min,
        minimal_set,
    })
}

/// Uniform-weight mean of unit directions from the minimal set toward `q`.
pub fn oracle_gradient(grid: &CollisionGrid, q: &[f64], tol: f64) -> Result<Vec<f64>, OracleError> {
    let ans = oracle_cdf(grid, q, tol)?;
    if ans.is_free_scene() {
        return Err(OracleError::FreeScene);
    }
    if ans.d_min == 0.0 {
        return Err(OracleError::GradientUndefined);
    }
    Ok(mean_unit_direction(q, &ans.minimal_set))
}

pub(crate) fn mean_unit_direction(q: &[f64], set: &[Configuration]) -> Vec<f64> {
    let mut g = vec![0.0; q.len()];
    for p in set {
        let d = dist(q, p);
        for (gk, (qk, pk)) in g.iter_mut().zip(q.iter().zip(p)) {
            *gk += (qk - pk) / d;
        }
    }
    let n = set.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}
