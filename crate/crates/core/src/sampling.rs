//! Coordinate-batch construction: normalized local/global lattices, patch
//! extension into neighbor cells, folding, per-cell rotation, and the
//! boundary-loss sampling regions.

use crate::error::{Error, Result};

/// One macro cell: grid index, normalized global center, volume-fraction
/// target, objective weight matrix, rotation angle in radians.
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub index: (usize, usize),
    pub global_xy: (f64, f64),
    pub vf_target: f64,
    pub tensor_weights: [[f64; 3]; 3],
    pub rotation: f64,
}

/// Macro lattice of cells; cell_specs indexed row-major (j * n_cells_x + i).
#[derive(Debug, Clone)]
pub struct MacroGrid {
    pub n_cells_x: usize,
    pub n_cells_y: usize,
    /// Elements per cell edge (square micro mesh).
    pub micro_res: usize,
    pub cell_specs: Vec<CellSpec>,
}

/// Cell-center global coordinate, normalized to [-0.5, 0.5] along the
/// longest axis with the shorter axis scaled proportionally.
pub fn global_center(n_cells_x: usize, n_cells_y: usize, i: usize, j: usize) -> (f64, f64) {
    let longest = n_cells_x.max(n_cells_y) as f64;
    (
        ((i as f64 + 0.5) - n_cells_x as f64 / 2.0) / longest,
        ((j as f64 + 0.5) - n_cells_y as f64 / 2.0) / longest,
    )
}

impl MacroGrid {
    pub fn new(
        n_cells_x: usize,
        n_cells_y: usize,
        micro_res: usize,
        cell_specs: Vec<CellSpec>,
    ) -> Result<Self> {
        if n_cells_x < 1 || n_cells_y < 1 || micro_res < 1 {
            return Err(Error::InvalidArgument(
                "grid dimensions and micro_res must be >= 1".into(),
            ));
        }
        if cell_specs.len() != n_cells_x * n_cells_y {
            return Err(Error::Dimension(format!(
                "expected {} cell specs, got {}",
                n_cells_x * n_cells_y,
                cell_specs.len()
            )));
        }
        for spec in &cell_specs {
            if !(spec.vf_target > 0.0 && spec.vf_target < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "vf_target must be in (0, 1), got {} at cell {:?}",
                    spec.vf_target, spec.index
                )));
            }
            for a in 0..3 {
                for b in (a + 1)..3 {
                    if (spec.tensor_weights[a][b] - spec.tensor_weights[b][a]).abs() > 1e-12 {
                        return Err(Error::InvalidArgument(format!(
                            "tensor_weights must be symmetric at cell {:?}",
                            spec.index
                        )));
                    }
                }
            }
        }
        Ok(Self {
            n_cells_x,
            n_cells_y,
            micro_res,
            cell_specs,
        })
    }

    /// Builds the grid from a per-cell field function returning
    /// (vf_target, tensor_weights, rotation); global centers are derived.
    pub fn from_fn(
        n_cells_x: usize,
        n_cells_y: usize,
        micro_res: usize,
        f: impl Fn(usize, usize) -> (f64, [[f64; 3]; 3], f64),
    ) -> Result<Self> {
        let mut specs = Vec::with_capacity(n_cells_x * n_cells_y);
        for j in 0..n_cells_y {
            for i in 0..n_cells_x {
                let (vf_target, tensor_weights, rotation) = f(i, j);
                specs.push(CellSpec {
                    index: (i, j),
                    global_xy: global_center(n_cells_x, n_cells_y, i, j),
                    vf_target,
                    tensor_weights,
                    rotation,
                });
            }
        }
        Self::new(n_cells_x, n_cells_y, micro_res, specs)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells_x * self.n_cells_y
    }

    pub fn cell(&self, i: usize, j: usize) -> &CellSpec {
        &self.cell_specs[j * self.n_cells_x + i]
    }

    pub fn cell_by_index(&self, idx: usize) -> &CellSpec {
        &self.cell_specs[idx]
    }

    pub fn has_rotation(&self) -> bool {
        self.cell_specs.iter().any(|s| s.rotation != 0.0)
    }
}

/// Rows of (x, y, u, w) network inputs with per-sample cell assignment.
/// `width` is 4 for micro-scale batches and 2 for macro-scale batches
/// (which use only the leading x, y entries).
#[derive(Debug, Clone)]
pub struct CoordinateBatch {
    pub rows: Vec<[f64; 4]>,
    /// Linear index (j * n_cells_x + i) of the owning cell per row.
    pub owner_cell: Vec<usize>,
    /// True where the sample's physical point lies inside the center cell's
    /// unit range (used for per-cell volume measurement).
    pub in_center: Vec<bool>,
    /// (rows_y, rows_x) of the underlying sampling lattice.
    pub grid_shape: (usize, usize),
    pub width: usize,
}

impl CoordinateBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Nearest-integer fold with ties broken toward the center cell (zero).
pub fn fold_offset(c: f64) -> i64 {
    let r = c.round(); // half away from zero
    if (c - c.trunc()).abs() == 0.5 {
        c.trunc() as i64
    } else {
        r as i64
    }
}

/// Physical-frame local coordinate to the owner cell's material frame.
fn rotate_material(qx: f64, qy: f64, theta: f64) -> (f64, f64) {
    if theta == 0.0 {
        return (qx, qy);
    }
    let (s, c) = theta.sin_cos();
    (c * qx + s * qy, -s * qx + c * qy)
}

fn clamp_cell(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Folds one physical patch point into its owning cell and returns the
/// finished batch row. Missing neighbors at the domain edge are clamped so
/// the edge cell acts as its own neighbor.
fn fold_point(spec: &CellSpec, grid: &MacroGrid, px: f64, py: f64) -> ([f64; 4], usize, bool) {
    let dx = fold_offset(px);
    let dy = fold_offset(py);
    let oi = clamp_cell(spec.index.0 as i64 + dx, grid.n_cells_x);
    let oj = clamp_cell(spec.index.1 as i64 + dy, grid.n_cells_y);
    let owner = oj * grid.n_cells_x + oi;
    let owner_spec = grid.cell_by_index(owner);
    let qx = px - dx as f64;
    let qy = py - dy as f64;
    let (u, w) = rotate_material(qx, qy, owner_spec.rotation);
    let (gx, gy) = owner_spec.global_xy;
    ([gx, gy, u, w], owner, dx == 0 && dy == 0)
}

const ALLOWED_EXTENSIONS: [f64; 3] = [1.0, 1.2, 1.6];

/// Uniform lattice of element-center samples covering the physical patch
/// [-ext/2, ext/2]^2 around the cell at spacing 1/micro_res; each sample is
/// folded into its containing cell and expressed in that cell's material
/// frame. Rows are ordered row-major with the y index outermost.
pub fn build_cell_patch(spec: &CellSpec, grid: &MacroGrid, extension: f64) -> Result<CoordinateBatch> {
    if !ALLOWED_EXTENSIONS.iter().any(|&e| (e - extension).abs() < 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "extension must be one of {:?}, got {}",
            ALLOWED_EXTENSIONS, extension
        )));
    }
    if spec.rotation != 0.0 && extension < 1.6 - 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "rotated cell {:?} requires extension 1.6, got {}",
            spec.index, extension
        )));
    }
    let res = grid.micro_res as f64;
    let m = (extension * res).ceil() as usize;
    let mut rows = Vec::with_capacity(m * m);
    let mut owner_cell = Vec::with_capacity(m * m);
    let mut in_center = Vec::with_capacity(m * m);
    let half = extension / 2.0;
    for jy in 0..m {
        let py = (jy as f64 + 0.5) / res - half;
        for ix in 0..m {
            let px = (ix as f64 + 0.5) / res - half;
            let (row, owner, center) = fold_point(spec, grid, px, py);
            rows.push(row);
            owner_cell.push(owner);
            in_center.push(center);
        }
    }
    Ok(CoordinateBatch {
        rows,
        owner_cell,
        in_center,
        grid_shape: (m, m),
        width: 4,
    })
}

/// Boundary-loss sampling regions at a chosen lattice resolution per cell
/// edge. Returns aligned (center, neighbor) batches over the annulus
/// 0.5 < max(|p_u|, |p_w|) <= 0.6.
pub fn build_boundary_regions_at(
    spec: &CellSpec,
    grid: &MacroGrid,
    res: usize,
) -> (CoordinateBatch, CoordinateBatch) {
    let ext = 1.2;
    let resf = res as f64;
    let m = (ext * resf).ceil() as usize;
    let half = ext / 2.0;
    let mut center = CoordinateBatch {
        rows: Vec::new(),
        owner_cell: Vec::new(),
        in_center: Vec::new(),
        grid_shape: (0, 1),
        width: 4,
    };
    let mut neighbor = center.clone();
    let center_idx = spec.index.1 * grid.n_cells_x + spec.index.0;
    for jy in 0..m {
        let py = (jy as f64 + 0.5) / resf - half;
        for ix in 0..m {
            let px = (ix as f64 + 0.5) / resf - half;
            if px.abs().max(py.abs()) <= 0.5 {
                continue;
            }
            // center cell extrapolated beyond its unit range
            let (u, w) = rotate_material(px, py, spec.rotation);
            center.rows.push([spec.global_xy.0, spec.global_xy.1, u, w]);
            center.owner_cell.push(center_idx);
            center.in_center.push(false);
            // same physical point folded into the neighbor cell
            let (row, owner, in_c) = fold_point(spec, grid, px, py);
            neighbor.rows.push(row);
            neighbor.owner_cell.push(owner);
            neighbor.in_center.push(in_c);
        }
    }
    center.grid_shape = (center.rows.len(), 1);
    neighbor.grid_shape = (neighbor.rows.len(), 1);
    (center, neighbor)
}

/// Boundary regions at the optimization-time lattice spacing 1/micro_res.
pub fn build_boundary_regions(spec: &CellSpec, grid: &MacroGrid) -> (CoordinateBatch, CoordinateBatch) {
    build_boundary_regions_at(spec, grid, grid.micro_res)
}

/// Full-domain batch at factor x micro_res samples per cell edge, extension
/// 1.0 per cell, suitable for rendering. Rows are ordered row-major over the
/// global lattice with the y index outermost.
pub fn upsample_grid(grid: &MacroGrid, factor: usize) -> Result<CoordinateBatch> {
    if factor < 1 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let res = factor * grid.micro_res;
    let total_x = grid.n_cells_x * res;
    let total_y = grid.n_cells_y * res;
    let mut rows = Vec::with_capacity(total_x * total_y);
    let mut owner_cell = Vec::with_capacity(total_x * total_y);
    for jy in 0..total_y {
        let cj = jy / res;
        let py = ((jy % res) as f64 + 0.5) / res as f64 - 0.5;
        for ix in 0..total_x {
            let ci = ix / res;
            let px = ((ix % res) as f64 + 0.5) / res as f64 - 0.5;
            let spec = grid.cell(ci, cj);
            let (u, w) = rotate_material(px, py, spec.rotation);
            rows.push([spec.global_xy.0, spec.global_xy.1, u, w]);
            owner_cell.push(cj * grid.n_cells_x + ci);
        }
    }
    let n = rows.len();
    Ok(CoordinateBatch {
        rows,
        owner_cell,
        in_center: vec![true; n],
        grid_shape: (total_y, total_x),
        width: 4,
    })
}

/// Macro-network input batch: one (x, y) row per cell center, row-major.
pub fn macro_centers_batch(grid: &MacroGrid) -> CoordinateBatch {
    let mut rows = Vec::with_capacity(grid.n_cells());
    for j in 0..grid.n_cells_y {
        for i in 0..grid.n_cells_x {
            let (x, y) = grid.cell(i, j).global_xy;
            rows.push([x, y, 0.0, 0.0]);
        }
    }
    let n = rows.len();
    CoordinateBatch {
        rows,
        owner_cell: (0..n).collect(),
        in_center: vec![true; n],
        grid_shape: (grid.n_cells_y, grid.n_cells_x),
        width: 2,
    }
}
