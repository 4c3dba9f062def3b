//! Energy-based periodic homogenization of a square unit cell.
//!
//! Solves three unit-test-strain load cases on a SIMP-interpolated mesh of
//! bilinear square elements with periodic boundary conditions, and returns
//! the homogenized elasticity tensor together with its per-element
//! sensitivities.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::{Error, Result};

/// 3x3 symmetric elasticity tensor in 2D Voigt order (11, 22, 12).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticityTensor {
    pub m: [[f64; 3]; 3],
}

impl ElasticityTensor {
    pub fn zero() -> Self {
        Self { m: [[0.0; 3]; 3] }
    }

    pub fn from_rows(m: [[f64; 3]; 3]) -> Self {
        Self { m }
    }

    /// Plane-stress base tensor for E = e0, Poisson ratio nu.
    pub fn base(e0: f64, nu: f64) -> Self {
        let f = e0 / (1.0 - nu * nu);
        Self {
            m: [
                [f, f * nu, 0.0],
                [f * nu, f, 0.0],
                [0.0, 0.0, f * (1.0 - nu) / 2.0],
            ],
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = self.m;
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Self { m }
    }

    /// Bulk modulus (E11 + E22 + 2 E12) / 4 of the tensor.
    pub fn bulk_modulus(&self) -> f64 {
        (self.m[0][0] + self.m[1][1] + 2.0 * self.m[0][1]) / 4.0
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.m[0][1] - self.m[1][0]).abs() <= tol
            && (self.m[0][2] - self.m[2][0]).abs() <= tol
            && (self.m[1][2] - self.m[2][1]).abs() <= tol
    }
}

/// Per-element density layout for a rectangular mesh; element e = j * nx + i.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub nx: usize,
    pub ny: usize,
    pub rho: Vec<f64>,
}

impl DensityGrid {
    pub fn new(nx: usize, ny: usize, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != nx * ny {
            return Err(Error::Dimension(format!(
                "density grid {}x{} needs {} entries, got {}",
                nx,
                ny,
                nx * ny,
                rho.len()
            )));
        }
        Ok(Self { nx, ny, rho })
    }

    pub fn uniform(nx: usize, ny: usize, v: f64) -> Self {
        Self {
            nx,
            ny,
            rho: vec![v; nx * ny],
        }
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }
}

/// Modified SIMP interpolation factor c0 + rho^p (1 - c0).
pub fn simp(rho: f64, p: f64, c0: f64) -> f64 {
    c0 + rho.powf(p) * (1.0 - c0)
}

/// Element stiffness for a unit-thickness bilinear square element,
/// plane stress, E = 1. Nodes ordered counterclockwise from the lower-left
/// corner; dofs interleaved (u0, v0, u1, v1, u2, v2, u3, v3).
pub fn base_element_stiffness(nu: f64) -> [[f64; 8]; 8] {
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    // closed-form integration; index pattern for the ccw node ordering
    const IDX: [[usize; 8]; 8] = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    let f = 1.0 / (1.0 - nu * nu);
    let mut ke = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            ke[i][j] = f * k[IDX[i][j]];
        }
    }
    ke
}

/// Nodal displacements of the three unit test strains (11, 22, 12) on the
/// unit element; the shear case uses the symmetric field (y/2, x/2).
pub const UNIT_STRAIN_DISPS: [[f64; 8]; 3] = [
    [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    [0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0],
];

/// Result of the three periodic unit-test-strain solves on one cell.
#[derive(Debug, Clone)]
pub struct UnitCellSolve {
    /// Fluctuation displacement per test strain, length 2 * nx * ny each.
    pub fields: [Vec<f64>; 3],
    pub grid: DensityGrid,
    pub simp_p: f64,
    pub e_min: f64,
    pub nu: f64,
    /// Relative equilibrium residual, max over the three load cases.
    pub residual: f64,
}

/// Per-element derivative of the homogenized tensor.
#[derive(Debug, Clone)]
pub struct SensitivityField {
    pub d: Vec<[[f64; 3]; 3]>,
}

fn element_nodes(nx: usize, ny: usize, i: usize, j: usize) -> [usize; 4] {
    let node = |i: usize, j: usize| (j % ny) * nx + (i % nx);
    [
        node(i, j),
        node(i + 1, j),
        node(i + 1, j + 1),
        node(i, j + 1),
    ]
}

fn element_dofs(nodes: &[usize; 4]) -> [usize; 8] {
    let mut d = [0usize; 8];
    for a in 0..4 {
        d[2 * a] = 2 * nodes[a];
        d[2 * a + 1] = 2 * nodes[a] + 1;
    }
    d
}

/// Assembles the SIMP-interpolated periodic stiffness matrix and solves the
/// three unit-test-strain load cases. One node (node 0) is pinned to remove
/// rigid translations.
pub fn solve_unit_cell(grid: &DensityGrid, simp_p: f64, e_min: f64, nu: f64) -> Result<UnitCellSolve> {
    let (nx, ny) = (grid.nx, grid.ny);
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument(format!(
            "unit cell mesh must have at least 2 elements per edge, got {}x{}",
            nx, ny
        )));
    }
    for (e, &r) in grid.rho.iter().enumerate() {
        if !(-1e-12..=1.0 + 1e-12).contains(&r) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "density out of [0, 1] at element {}: {}",
                e, r
            )));
        }
    }
    if grid.rho.iter().all(|&r| r == 0.0) {
        return Err(Error::Fe("all-void density grid is singular".into()));
    }

    let ke0 = base_element_stiffness(nu);
    let n_dofs = 2 * nx * ny;
    let pinned = [0usize, 1usize];

    let mut triplets: Vec<Triplet<usize, usize, f64>> =
        Vec::with_capacity(grid.n_elements() * 64 + 2);
    let mut forces = vec![vec![0.0f64; n_dofs]; 3];

    for j in 0..ny {
        for i in 0..nx {
            let e = j * nx + i;
            let scale = simp(grid.rho[e], simp_p, e_min);
            let dofs = element_dofs(&element_nodes(nx, ny, i, j));
            for a in 0..8 {
                let ga = dofs[a];
                let a_pinned = pinned.contains(&ga);
                for b in 0..8 {
                    let gb = dofs[b];
                    if !a_pinned && !pinned.contains(&gb) {
                        triplets.push(Triplet::new(ga, gb, scale * ke0[a][b]));
                    }
                }
                if !a_pinned {
                    for (t, u0) in UNIT_STRAIN_DISPS.iter().enumerate() {
                        let mut f = 0.0;
                        for b in 0..8 {
                            f += ke0[a][b] * u0[b];
                        }
                        forces[t][ga] += scale * f;
                    }
                }
            }
        }
    }
    for &d in &pinned {
        triplets.push(Triplet::new(d, d, 1.0));
    }

    let k = SparseColMat::<usize, f64>::try_new_from_triplets(n_dofs, n_dofs, &triplets)
        .map_err(|e| Error::Fe(format!("stiffness assembly failed: {:?}", e)))?;
    let llt = k
        .sp_cholesky(Side::Lower)
        .map_err(|e| Error::Fe(format!("sparse Cholesky failed: {:?}", e)))?;

    let rhs = Mat::<f64>::from_fn(n_dofs, 3, |r, c| forces[c][r]);
    let sol = llt.solve(&rhs);

    // relative equilibrium residual per load case
    let mut residual: f64 = 0.0;
    for t in 0..3 {
        let x = Mat::<f64>::from_fn(n_dofs, 1, |r, _| sol[(r, t)]);
        let kx = &k * &x;
        let mut rn = 0.0f64;
        let mut fn2 = 0.0f64;
        for r in 0..n_dofs {
            let d = kx[(r, 0)] - forces[t][r];
            rn += d * d;
            fn2 += forces[t][r] * forces[t][r];
        }
        let rel = if fn2 > 0.0 { (rn / fn2).sqrt() } else { rn.sqrt() };
        residual = residual.max(rel);
    }
    if residual > 1e-8 {
        return Err(Error::Fe(format!(
            "unit cell solve residual {:.3e} exceeds 1e-8",
            residual
        )));
    }

    let fields = [
        (0..n_dofs).map(|r| sol[(r, 0)]).collect(),
        (0..n_dofs).map(|r| sol[(r, 1)]).collect(),
        (0..n_dofs).map(|r| sol[(r, 2)]).collect(),
    ];
    Ok(UnitCellSolve {
        fields,
        grid: grid.clone(),
        simp_p,
        e_min,
        nu,
        residual,
    })
}

/// Gathers the per-element mutual-energy vectors d_t = u0_t - chi_t.
fn element_energy_disps(solve: &UnitCellSolve, i: usize, j: usize) -> [[f64; 8]; 3] {
    let dofs = element_dofs(&element_nodes(solve.grid.nx, solve.grid.ny, i, j));
    let mut d = [[0.0; 8]; 3];
    for t in 0..3 {
        for a in 0..8 {
            d[t][a] = UNIT_STRAIN_DISPS[t][a] - solve.fields[t][dofs[a]];
        }
    }
    d
}

fn mutual_energies(ke0: &[[f64; 8]; 8], d: &[[f64; 8]; 3]) -> [[f64; 3]; 3] {
    let mut kd = [[0.0; 8]; 3];
    for t in 0..3 {
        for a in 0..8 {
            let mut s = 0.0;
            for b in 0..8 {
                s += ke0[a][b] * d[t][b];
            }
            kd[t][a] = s;
        }
    }
    let mut q = [[0.0; 3]; 3];
    for ti in 0..3 {
        for tj in ti..3 {
            let mut s = 0.0;
            for a in 0..8 {
                s += d[ti][a] * kd[tj][a];
            }
            q[ti][tj] = s;
            q[tj][ti] = s;
        }
    }
    q
}

/// E^H_ij = (1/|Y|) sum_e E_e (u0_i - chi_i)^T ke0 (u0_j - chi_j).
pub fn homogenized_tensor(solve: &UnitCellSolve) -> ElasticityTensor {
    let ke0 = base_element_stiffness(solve.nu);
    let n = solve.grid.n_elements() as f64;
    let mut m = [[0.0; 3]; 3];
    for j in 0..solve.grid.ny {
        for i in 0..solve.grid.nx {
            let e = j * solve.grid.nx + i;
            let scale = simp(solve.grid.rho[e], solve.simp_p, solve.e_min);
            let d = element_energy_disps(solve, i, j);
            let q = mutual_energies(&ke0, &d);
            for a in 0..3 {
                for b in 0..3 {
                    m[a][b] += scale * q[a][b] / n;
                }
            }
        }
    }
    ElasticityTensor { m }
}

/// dE^H_ij/drho_e = (1/|Y|) p rho^(p-1) (1 - c0) (u0_i - chi_i)^T ke0 (u0_j - chi_j).
pub fn tensor_sensitivity(solve: &UnitCellSolve, simp_p: f64, e_min: f64) -> SensitivityField {
    let ke0 = base_element_stiffness(solve.nu);
    let n = solve.grid.n_elements() as f64;
    let mut out = vec![[[0.0; 3]; 3]; solve.grid.n_elements()];
    for j in 0..solve.grid.ny {
        for i in 0..solve.grid.nx {
            let e = j * solve.grid.nx + i;
            let rho = solve.grid.rho[e];
            let dscale = simp_p * rho.powf(simp_p - 1.0) * (1.0 - e_min);
            let d = element_energy_disps(solve, i, j);
            let q = mutual_energies(&ke0, &d);
            for a in 0..3 {
                for b in 0..3 {
                    out[e][a][b] = dscale * q[a][b] / n;
                }
            }
        }
    }
    SensitivityField { d: out }
}

/// 2D one-phase-plus-void Hashin-Shtrikman upper bound on the bulk modulus,
/// plane stress: kappa0 = E/(2(1-nu)), mu0 = E/(2(1+nu)).
pub fn hs_upper_bound(vf: f64, e0: f64, nu: f64) -> f64 {
    let kappa0 = e0 / (2.0 * (1.0 - nu));
    let mu0 = e0 / (2.0 * (1.0 + nu));
    vf * kappa0 * mu0 / ((1.0 - vf) * kappa0 + mu0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent quadrature oracle: 2x2 Gauss integration of B^T C B over
    /// the unit square.
    fn ke_quadrature(nu: f64) -> [[f64; 8]; 8] {
        let c = ElasticityTensor::base(1.0, nu).m;
        let gp = [0.5 - 0.5 / 3.0f64.sqrt(), 0.5 + 0.5 / 3.0f64.sqrt()];
        let mut ke = [[0.0; 8]; 8];
        for &x in &gp {
            for &y in &gp {
                // shape gradients for N = [(1-x)(1-y), x(1-y), xy, (1-x)y]
                let dn = [
                    [-(1.0 - y), -(1.0 - x)],
                    [1.0 - y, -x],
                    [y, x],
                    [-y, 1.0 - x],
                ];
                let mut b = [[0.0; 8]; 3];
                for a in 0..4 {
                    b[0][2 * a] = dn[a][0];
                    b[1][2 * a + 1] = dn[a][1];
                    b[2][2 * a] = dn[a][1];
                    b[2][2 * a + 1] = dn[a][0];
                }
                for p in 0..8 {
                    for q in 0..8 {
                        let mut s = 0.0;
                        for r in 0..3 {
                            for t in 0..3 {
                                s += b[r][p] * c[r][t] * b[t][q];
                            }
                        }
                        ke[p][q] += 0.25 * s;
                    }
                }
            }
        }
        ke
    }

    #[test]
    fn base_stiffness_matches_quadrature_oracle() {
        for &nu in &[0.0, 0.2, 0.3, 0.45] {
            let ke = base_element_stiffness(nu);
            let oracle = ke_quadrature(nu);
            for i in 0..8 {
                for j in 0..8 {
                    assert!(
                        (ke[i][j] - oracle[i][j]).abs() < 1e-12,
                        "nu={} entry ({},{}): {} vs {}",
                        nu,
                        i,
                        j,
                        ke[i][j],
                        oracle[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn base_stiffness_symmetric_with_rigid_modes() {
        let ke = base_element_stiffness(0.3);
        for i in 0..8 {
            for j in 0..8 {
                assert!((ke[i][j] - ke[j][i]).abs() < 1e-14);
            }
        }
        // translations in x and y produce zero force
        for t in 0..2 {
            for i in 0..8 {
                let s: f64 = (0..4).map(|a| ke[i][2 * a + t]).sum();
                assert!(s.abs() < 1e-13, "rigid mode {} row {}: {}", t, i, s);
            }
        }
    }

    #[test]
    fn homogeneous_cell_reproduces_base_tensor() {
        let grid = DensityGrid::uniform(4, 4, 1.0);
        let solve = solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap();
        for f in &solve.fields {
            let m = f.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            assert!(m < 1e-10, "fluctuations should vanish, max {}", m);
        }
        let eh = homogenized_tensor(&solve);
        let expected = ElasticityTensor::base(1.0, 0.3);
        assert!(eh.max_abs_diff(&expected) < 1e-9, "{:?}", eh);
        assert_relative_eq!(eh.m[0][0], 1.0989, epsilon = 1e-4);
        assert_relative_eq!(eh.m[0][1], 0.3297, epsilon = 1e-4);
        assert_relative_eq!(eh.m[2][2], 0.3846, epsilon = 1e-4);
    }

    #[test]
    fn uniform_density_scales_base_tensor() {
        for &v in &[0.25, 0.5, 0.75] {
            let grid = DensityGrid::uniform(5, 5, v);
            let solve = solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap();
            let eh = homogenized_tensor(&solve);
            let expected = ElasticityTensor::base(1.0, 0.3).scale(simp(v, 3.0, 1e-9));
            assert!(
                eh.max_abs_diff(&expected) < 1e-10,
                "v={} diff {}",
                v,
                eh.max_abs_diff(&expected)
            );
        }
    }

    #[test]
    fn soft_inclusion_has_nonzero_fluctuations() {
        // a 2x2 periodic checkerboard is degenerate (every node sees the same
        // neighborhood), so use a single soft inclusion instead
        let mut rho = vec![1.0; 16];
        rho[5] = 0.2;
        let grid = DensityGrid::new(4, 4, rho).unwrap();
        let solve = solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap();
        let m = solve.fields[0].iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(m > 1e-6);
        assert!(solve.residual <= 1e-8);
    }

    #[test]
    fn all_void_grid_rejected() {
        let grid = DensityGrid::uniform(3, 3, 0.0);
        assert!(solve_unit_cell(&grid, 3.0, 1e-9, 0.3).is_err());
    }

    #[test]
    fn tensor_symmetric_psd_on_random_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho: Vec<f64> = (0..36).map(|_| rng.gen_range(0.05..1.0)).collect();
        let grid = DensityGrid::new(6, 6, rho).unwrap();
        let eh = homogenized_tensor(&solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap());
        assert!(eh.is_symmetric(1e-10));
        // PSD via leading principal minors (with tolerance)
        let m = eh.m;
        assert!(m[0][0] >= -1e-12);
        assert!(m[0][0] * m[1][1] - m[0][1] * m[1][0] >= -1e-12);
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!(det >= -1e-12);
    }

    #[test]
    fn sensitivity_uniform_grid_is_uniform_and_matches_fd() {
        let grid = DensityGrid::uniform(4, 4, 0.6);
        let solve = solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap();
        let sens = tensor_sensitivity(&solve, 3.0, 1e-9);
        for e in 1..sens.d.len() {
            for a in 0..3 {
                for b in 0..3 {
                    assert!((sens.d[e][a][b] - sens.d[0][a][b]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rho: Vec<f64> = (0..36).map(|_| rng.gen_range(0.2..0.9)).collect();
        let grid = DensityGrid::new(6, 6, rho.clone()).unwrap();
        let solve = solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap();
        let sens = tensor_sensitivity(&solve, 3.0, 1e-9);
        let h = 1e-5;
        for &e in &[0usize, 7, 20, 35] {
            let mut lo = rho.clone();
            let mut hi = rho.clone();
            lo[e] -= h;
            hi[e] += h;
            let eh_lo = homogenized_tensor(
                &solve_unit_cell(&DensityGrid::new(6, 6, lo).unwrap(), 3.0, 1e-9, 0.3).unwrap(),
            );
            let eh_hi = homogenized_tensor(
                &solve_unit_cell(&DensityGrid::new(6, 6, hi).unwrap(), 3.0, 1e-9, 0.3).unwrap(),
            );
            for a in 0..3 {
                for b in 0..3 {
                    let fd = (eh_hi.m[a][b] - eh_lo.m[a][b]) / (2.0 * h);
                    let an = sens.d[e][a][b];
                    let scale = fd.abs().max(an.abs());
                    if scale > 1e-8 {
                        assert!(
                            (fd - an).abs() / scale < 1e-3,
                            "element {} entry ({},{}): fd {} analytic {}",
                            e,
                            a,
                            b,
                            fd,
                            an
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sensitivity_zero_at_void_density() {
        let mut rho = vec![0.5; 16];
        rho[5] = 0.0;
        let grid = DensityGrid::new(4, 4, rho).unwrap();
        let solve = solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap();
        let sens = tensor_sensitivity(&solve, 3.0, 1e-9);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(sens.d[5][a][b], 0.0);
            }
        }
    }

    #[test]
    fn hs_bound_limits_and_value() {
        assert_relative_eq!(hs_upper_bound(1.0, 1.0, 0.3), 1.0 / 1.4, epsilon = 1e-12);
        assert_eq!(hs_upper_bound(0.0, 1.0, 0.3), 0.0);
        assert_relative_eq!(hs_upper_bound(0.5, 1.0, 0.3), 0.18519, epsilon = 1e-5);
        // monotonic in vf
        let mut prev = -1.0;
        for i in 0..=20 {
            let v = hs_upper_bound(i as f64 / 20.0, 1.0, 0.3);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn bulk_modulus_of_solid_cell_attains_hs_bound() {
        let grid = DensityGrid::uniform(4, 4, 1.0);
        let eh = homogenized_tensor(&solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap());
        assert_relative_eq!(eh.bulk_modulus(), hs_upper_bound(1.0, 1.0, 0.3), epsilon = 1e-9);
    }

    #[test]
    fn random_cells_respect_hs_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let rho: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            if rho.iter().all(|&r| r == 0.0) {
                continue;
            }
            let vf = rho.iter().sum::<f64>() / 64.0;
            let grid = DensityGrid::new(8, 8, rho).unwrap();
            let eh = homogenized_tensor(&solve_unit_cell(&grid, 3.0, 1e-9, 0.3).unwrap());
            assert!(eh.bulk_modulus() <= hs_upper_bound(vf, 1.0, 0.3) + 1e-9);
        }
    }
}
