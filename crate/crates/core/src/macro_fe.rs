//! Macro-scale finite elements: one bilinear quad per microstructure cell,
//! anisotropic per-element constitutive tensors, compliance and
//! displacement-matching objectives with adjoint sensitivities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::homogenize::{simp, ElasticityTensor, SensitivityField};

/// Macro mesh, boundary conditions, and targets. Elements are unit squares,
/// element e = j * n_cells_x + i; nodes (n_cells_x+1) x (n_cells_y+1) with
/// node(i, j) = j * (n_cells_x + 1) + i and interleaved dofs.
#[derive(Debug, Clone)]
pub struct MacroProblem {
    pub n_cells_x: usize,
    pub n_cells_y: usize,
    /// Dofs pinned to zero displacement.
    pub fixed_dofs: Vec<usize>,
    /// Per-dof point loads (tractions pre-lumped to nodes).
    pub loads: Vec<f64>,
    /// 0/1 mask selecting the dofs entering the displacement objective.
    pub gamma: Vec<f64>,
    /// Target displacement; zero outside the mask support.
    pub u_target: Vec<f64>,
    pub vf_macro: f64,
    pub vf_micro: f64,
    /// Cells whose densities are pinned solid downstream.
    pub solid_mask: Option<Vec<bool>>,
}

impl MacroProblem {
    pub fn n_cells(&self) -> usize {
        self.n_cells_x * self.n_cells_y
    }

    pub fn n_dofs(&self) -> usize {
        2 * (self.n_cells_x + 1) * (self.n_cells_y + 1)
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.n_cells_x + 1) + i
    }

    fn element_dofs(&self, i: usize, j: usize) -> [usize; 8] {
        let nodes = [
            self.node(i, j),
            self.node(i + 1, j),
            self.node(i + 1, j + 1),
            self.node(i, j + 1),
        ];
        let mut d = [0usize; 8];
        for a in 0..4 {
            d[2 * a] = 2 * nodes[a];
            d[2 * a + 1] = 2 * nodes[a] + 1;
        }
        d
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_dofs();
        if self.n_cells_x == 0 || self.n_cells_y == 0 {
            return Err(Error::InvalidArgument("macro mesh must be nonempty".into()));
        }
        if self.fixed_dofs.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 fixed dofs to pin rigid modes, got {}",
                self.fixed_dofs.len()
            )));
        }
        if self.loads.len() != n || self.gamma.len() != n || self.u_target.len() != n {
            return Err(Error::Dimension(format!(
                "loads/gamma/u_target must have {} entries, got {}/{}/{}",
                n,
                self.loads.len(),
                self.gamma.len(),
                self.u_target.len()
            )));
        }
        if self.fixed_dofs.iter().any(|&d| d >= n) {
            return Err(Error::InvalidArgument("fixed dof out of range".into()));
        }
        if self.loads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("macro load vector".into()));
        }
        if self.gamma.iter().any(|&g| g != 0.0 && g != 1.0) {
            return Err(Error::InvalidArgument("gamma entries must be 0 or 1".into()));
        }
        if let Some(mask) = &self.solid_mask {
            if mask.len() != self.n_cells() {
                return Err(Error::Dimension("solid mask length mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Displacement solution with the retained factorization for adjoint reuse.
pub struct MacroSolve {
    pub u: Vec<f64>,
    pub compliance: f64,
    pub residual: f64,
    chol: Cholesky<f64, Dyn>,
    n_cells_x: usize,
    n_cells_y: usize,
    fixed: Vec<bool>,
}

/// Strain-displacement matrices of the unit-square bilinear quad at the
/// four 2x2 Gauss points, each with weight 1/4.
fn gauss_b_matrices() -> [[[f64; 8]; 3]; 4] {
    let gp = [0.5 - 0.5 / 3.0f64.sqrt(), 0.5 + 0.5 / 3.0f64.sqrt()];
    let mut out = [[[0.0; 8]; 3]; 4];
    let mut g = 0;
    for &x in &gp {
        for &y in &gp {
            let dn = [
                [-(1.0 - y), -(1.0 - x)],
                [1.0 - y, -x],
                [y, x],
                [-y, 1.0 - x],
            ];
            for a in 0..4 {
                out[g][0][2 * a] = dn[a][0];
                out[g][1][2 * a + 1] = dn[a][1];
                out[g][2][2 * a] = dn[a][1];
                out[g][2][2 * a + 1] = dn[a][0];
            }
            g += 1;
        }
    }
    out
}

/// 8x8 element stiffness of a unit-square bilinear quad with the given
/// constitutive tensor, by 2x2 Gauss quadrature (exact for this element).
pub fn element_stiffness_from_tensor(c: &ElasticityTensor) -> [[f64; 8]; 8] {
    let bs = gauss_b_matrices();
    let mut ke = [[0.0; 8]; 8];
    for b in &bs {
        for p in 0..8 {
            for q in 0..8 {
                let mut s = 0.0;
                for r in 0..3 {
                    for t in 0..3 {
                        s += b[r][p] * c.m[r][t] * b[t][q];
                    }
                }
                ke[p][q] += 0.25 * s;
            }
        }
    }
    ke
}

/// G[r][t] = sum_g w_g (B a)_r (B b)_t, so that a^T ke(C) b = sum_rt C_rt G_rt.
pub fn strain_products(a: &[f64; 8], b: &[f64; 8]) -> [[f64; 3]; 3] {
    let bs = gauss_b_matrices();
    let mut g = [[0.0; 3]; 3];
    for bm in &bs {
        let mut ea = [0.0; 3];
        let mut eb = [0.0; 3];
        for r in 0..3 {
            for p in 0..8 {
                ea[r] += bm[r][p] * a[p];
                eb[r] += bm[r][p] * b[p];
            }
        }
        for r in 0..3 {
            for t in 0..3 {
                g[r][t] += 0.25 * ea[r] * eb[t];
            }
        }
    }
    g
}

/// E_M = [c0 + rho_M^p (1 - c0)] E^H per cell.
pub fn simp_interpolate_macro(
    rho_m: &[f64],
    eh: &[ElasticityTensor],
    p: f64,
    c0: f64,
) -> Result<Vec<ElasticityTensor>> {
    if rho_m.len() != eh.len() {
        return Err(Error::Dimension(format!(
            "macro densities ({}) and tensors ({}) differ in length",
            rho_m.len(),
            eh.len()
        )));
    }
    for &r in rho_m {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!(
                "macro density out of [0, 1]: {}",
                r
            )));
        }
    }
    Ok(rho_m
        .iter()
        .zip(eh)
        .map(|(&r, t)| t.scale(simp(r, p, c0)))
        .collect())
}

/// Assembles and solves K u = f with homogeneous Dirichlet conditions at the
/// fixed dofs. Returns the solve with compliance c = 1/2 u^T K u and the
/// factorization retained for adjoint solves.
pub fn solve_macro(problem: &MacroProblem, tensors: &[ElasticityTensor]) -> Result<MacroSolve> {
    problem.validate()?;
    if tensors.len() != problem.n_cells() {
        return Err(Error::Dimension(format!(
            "expected {} cell tensors, got {}",
            problem.n_cells(),
            tensors.len()
        )));
    }
    let n = problem.n_dofs();
    let mut fixed = vec![false; n];
    for &d in &problem.fixed_dofs {
        fixed[d] = true;
    }

    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..problem.n_cells_y {
        for i in 0..problem.n_cells_x {
            let e = j * problem.n_cells_x + i;
            let ke = element_stiffness_from_tensor(&tensors[e]);
            let dofs = problem.element_dofs(i, j);
            for a in 0..8 {
                for b in 0..8 {
                    k[(dofs[a], dofs[b])] += ke[a][b];
                }
            }
        }
    }
    // homogeneous Dirichlet: zero row/column, unit diagonal, zero load
    let mut f = DVector::<f64>::from_column_slice(&problem.loads);
    for d in 0..n {
        if fixed[d] {
            for q in 0..n {
                k[(d, q)] = 0.0;
                k[(q, d)] = 0.0;
            }
            k[(d, d)] = 1.0;
            f[d] = 0.0;
        }
    }

    let chol = Cholesky::new(k.clone())
        .ok_or_else(|| Error::Fe("macro stiffness is not positive definite".into()))?;
    let u = chol.solve(&f);

    let r = &k * &u - &f;
    let fnorm = f.norm();
    let residual = if fnorm > 0.0 { r.norm() / fnorm } else { r.norm() };
    if residual > 1e-8 {
        return Err(Error::Fe(format!(
            "macro solve residual {:.3e} exceeds 1e-8",
            residual
        )));
    }

    let compliance = 0.5 * u.dot(&f);
    Ok(MacroSolve {
        u: u.as_slice().to_vec(),
        compliance,
        residual,
        chol,
        n_cells_x: problem.n_cells_x,
        n_cells_y: problem.n_cells_y,
        fixed,
    })
}

impl MacroSolve {
    /// Solves K lambda = rhs with the retained factorization; the rhs is
    /// zeroed at the fixed dofs first.
    pub fn solve_adjoint(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.u.len() {
            return Err(Error::Dimension("adjoint rhs length mismatch".into()));
        }
        let mut r = DVector::<f64>::from_column_slice(rhs);
        for (d, &fx) in self.fixed.iter().enumerate() {
            if fx {
                r[d] = 0.0;
            }
        }
        Ok(self.chol.solve(&r).as_slice().to_vec())
    }

    /// Gathers one element's displacement (or adjoint) vector.
    pub fn gather_element(&self, field: &[f64], i: usize, j: usize) -> [f64; 8] {
        let nn_x = self.n_cells_x + 1;
        let node = |i: usize, j: usize| j * nn_x + i;
        let nodes = [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)];
        let mut ue = [0.0; 8];
        for a in 0..4 {
            ue[2 * a] = field[2 * nodes[a]];
            ue[2 * a + 1] = field[2 * nodes[a] + 1];
        }
        ue
    }

    /// Per-cell strain products G_e of the solution with itself, so that
    /// u_e^T ke(C) u_e = sum_rt C_rt G_e[r][t].
    pub fn cell_strain_products(&self) -> Vec<[[f64; 3]; 3]> {
        let mut out = Vec::with_capacity(self.n_cells_x * self.n_cells_y);
        for j in 0..self.n_cells_y {
            for i in 0..self.n_cells_x {
                let ue = self.gather_element(&self.u, i, j);
                out.push(strain_products(&ue, &ue));
            }
        }
        out
    }
}

fn contract(c: &[[f64; 3]; 3], g: &[[f64; 3]; 3]) -> f64 {
    let mut s = 0.0;
    for r in 0..3 {
        for t in 0..3 {
            s += c[r][t] * g[r][t];
        }
    }
    s
}

/// dC/drho_M^i = -1/2 p rho^(p-1) (1-c0) u_i^T ke(E^H_i) u_i and
/// dC/drho_m^j = -1/2 [c0 + rho_M^p (1-c0)] u_i^T ke(dE^H/drho_m^j) u_i.
pub fn compliance_sensitivities(
    solve: &MacroSolve,
    rho_m_macro: &[f64],
    eh: &[ElasticityTensor],
    deh: &[SensitivityField],
    p: f64,
    c0: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n_cells = solve.n_cells_x * solve.n_cells_y;
    if rho_m_macro.len() != n_cells || eh.len() != n_cells || deh.len() != n_cells {
        return Err(Error::Dimension(format!(
            "per-cell inputs must have {} entries, got {}/{}/{}",
            n_cells,
            rho_m_macro.len(),
            eh.len(),
            deh.len()
        )));
    }
    let g = solve.cell_strain_products();
    let mut d_macro = Vec::with_capacity(n_cells);
    let mut d_micro = Vec::with_capacity(n_cells);
    for e in 0..n_cells {
        let rho = rho_m_macro[e];
        let energy = contract(&eh[e].m, &g[e]);
        d_macro.push(-0.5 * p * rho.powf(p - 1.0) * (1.0 - c0) * energy);
        let scale = simp(rho, p, c0);
        d_micro.push(
            deh[e]
                .d
                .iter()
                .map(|dm| -0.5 * scale * contract(dm, &g[e]))
                .collect(),
        );
    }
    Ok((d_macro, d_micro))
}

/// F = ||gamma o u - u_t||^2 with u_t zero outside the mask support.
pub fn displacement_objective(solve: &MacroSolve, gamma: &[f64], u_target: &[f64]) -> Result<f64> {
    if gamma.len() != solve.u.len() || u_target.len() != solve.u.len() {
        return Err(Error::Dimension("gamma/u_target length mismatch".into()));
    }
    Ok(solve
        .u
        .iter()
        .zip(gamma)
        .zip(u_target)
        .map(|((&u, &g), &t)| {
            let d = g * u - t;
            d * d
        })
        .sum())
}

/// Adjoint gradient of the displacement objective w.r.t. micro densities:
/// solve K lambda = 2 gamma o (u - u_t), then
/// dF/dx_j = -scale_M lambda_e^T ke(dE^H/dx_j) u_e per cell.
pub fn displacement_sensitivities(
    solve: &MacroSolve,
    gamma: &[f64],
    u_target: &[f64],
    rho_m_macro: &[f64],
    deh: &[SensitivityField],
    p: f64,
    c0: f64,
) -> Result<Vec<Vec<f64>>> {
    let n_cells = solve.n_cells_x * solve.n_cells_y;
    if gamma.len() != solve.u.len() || u_target.len() != solve.u.len() {
        return Err(Error::Dimension("gamma/u_target length mismatch".into()));
    }
    if rho_m_macro.len() != n_cells || deh.len() != n_cells {
        return Err(Error::Dimension("per-cell inputs length mismatch".into()));
    }
    let rhs: Vec<f64> = solve
        .u
        .iter()
        .zip(gamma)
        .zip(u_target)
        .map(|((&u, &g), &t)| 2.0 * g * (g * u - t))
        .collect();
    let lambda = solve.solve_adjoint(&rhs)?;

    let mut out = Vec::with_capacity(n_cells);
    for j in 0..solve.n_cells_y {
        for i in 0..solve.n_cells_x {
            let e = j * solve.n_cells_x + i;
            let ue = solve.gather_element(&solve.u, i, j);
            let le = solve.gather_element(&lambda, i, j);
            let g = strain_products(&le, &ue);
            let scale = simp(rho_m_macro[e], p, c0);
            out.push(
                deh[e]
                    .d
                    .iter()
                    .map(|dm| -scale * contract(dm, &g))
                    .collect(),
            );
        }
    }
    Ok(out)
}
