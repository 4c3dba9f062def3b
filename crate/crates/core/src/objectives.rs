//! Loss terms, target-tensor machinery, penalty schedules, and normalization
//! constants for the three optimization modes.

use crate::error::{Error, Result};
use crate::homogenize::{simp, ElasticityTensor};

/// Penalty ramps: alpha grows linearly from alpha_start to alpha_end over
/// all epochs; beta stays 0 through beta_start_epoch and then ramps linearly
/// to beta_end at the final epoch. Epochs are 1-based.
#[derive(Debug, Clone, Copy)]
pub struct Schedules {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta_start_epoch: usize,
    pub beta_end: f64,
    pub total_epochs: usize,
}

impl Schedules {
    pub fn new(total_epochs: usize) -> Self {
        Self {
            alpha_start: 1.0,
            alpha_end: 100.0,
            beta_start_epoch: 50,
            beta_end: 1.0,
            total_epochs,
        }
    }

    pub fn alpha(&self, epoch: usize) -> f64 {
        if self.total_epochs <= 1 {
            return self.alpha_end;
        }
        let t = (epoch.min(self.total_epochs) - 1) as f64 / (self.total_epochs - 1) as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * t
    }

    pub fn beta(&self, epoch: usize) -> f64 {
        if epoch <= self.beta_start_epoch {
            return 0.0;
        }
        if self.total_epochs <= self.beta_start_epoch {
            // clamped ramp: activation epoch past the run end
            return 0.0;
        }
        let t = (epoch.min(self.total_epochs) - self.beta_start_epoch) as f64
            / (self.total_epochs - self.beta_start_epoch) as f64;
        self.beta_end * t.min(1.0)
    }
}

/// Per-epoch loss terms; total is the weighted sum of the present terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub objective_term: f64,
    pub volume_term: f64,
    pub boundary_term: f64,
    pub displacement_term: f64,
    pub total: f64,
}

/// Optimization modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    InverseHomogField,
    Concurrent,
    Metamaterial,
}

/// c = -sum_ij w_ij E_ij over the full symmetric matrices, so that each
/// off-diagonal weight entry carries its combined (doubled) coefficient.
/// Returns the value and the constant gradient dc/dE.
pub fn weighted_tensor_objective(eh: &ElasticityTensor, weights: &[[f64; 3]; 3]) -> (f64, [[f64; 3]; 3]) {
    let mut c = 0.0;
    let mut grad = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c -= weights[i][j] * eh.m[i][j];
            grad[i][j] = -weights[i][j];
        }
    }
    (c, grad)
}

/// Stress-transformation (Bond) matrix for a geometry rotation by theta.
fn bond_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let (c2, s2, cs) = (c * c, s * s, c * s);
    [
        [c2, s2, -2.0 * cs],
        [s2, c2, 2.0 * cs],
        [cs, -cs, c2 - s2],
    ]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                r[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    r
}

fn mat3_transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

/// Voigt transformation E' = T(theta) E T(theta)^T: the stiffness of the
/// same material with its geometry rotated by theta.
pub fn rotate_tensor(eh: &ElasticityTensor, theta: f64) -> ElasticityTensor {
    let t = bond_matrix(theta);
    ElasticityTensor::from_rows(mat3_mul(&mat3_mul(&t, &eh.m), &mat3_transpose(&t)))
}

/// Pulls a gradient w.r.t. the rotated tensor back to the unrotated frame:
/// for E' = T E T^T, dc/dE = T^T (dc/dE') T.
pub fn rotate_gradient_back(grad: &[[f64; 3]; 3], theta: f64) -> [[f64; 3]; 3] {
    let t = bond_matrix(theta);
    mat3_mul(&mat3_mul(&mat3_transpose(&t), grad), &t)
}

/// alpha (V/V* - 1)^2 and its derivative w.r.t. V. The caller distributes
/// the V-derivative uniformly over the cell's unit-range samples (1/N each).
pub fn volume_penalty(vf_current: f64, vf_target: f64, alpha: f64) -> (f64, f64) {
    assert!(vf_target > 0.0, "vf_target must be positive");
    let dev = vf_current / vf_target - 1.0;
    (alpha * dev * dev, 2.0 * alpha * dev / vf_target)
}

/// Mean L1 mismatch (1/n) sum |T(X_neigh) - T(X_center)| with per-sample
/// subgradients; the subgradient at equality is 0.
pub fn boundary_loss(
    center_densities: &[f64],
    neighbor_densities: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if center_densities.len() != neighbor_densities.len() {
        return Err(Error::Dimension(format!(
            "boundary batches differ in length: {} vs {}",
            center_densities.len(),
            neighbor_densities.len()
        )));
    }
    let n = center_densities.len();
    if n == 0 {
        return Ok((0.0, Vec::new(), Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_center = vec![0.0; n];
    let mut d_neighbor = vec![0.0; n];
    for i in 0..n {
        let diff = neighbor_densities[i] - center_densities[i];
        loss += diff.abs() * inv_n;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_neighbor[i] = sign * inv_n;
        d_center[i] = -sign * inv_n;
    }
    Ok((loss, d_center, d_neighbor))
}

/// Objective value of a homogeneous cell at the target volume fraction; by
/// the uniform-field identity this is SIMP(vf) x base tensor, no FE solve.
pub fn normalization_constant(
    vf_target: f64,
    weights: &[[f64; 3]; 3],
    simp_p: f64,
    e_min: f64,
    nu: f64,
) -> Result<f64> {
    if !(vf_target > 0.0 && vf_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "vf_target must be in (0, 1], got {}",
            vf_target
        )));
    }
    let eh = ElasticityTensor::base(1.0, nu).scale(simp(vf_target, simp_p, e_min));
    let (c0, _) = weighted_tensor_objective(&eh, weights);
    if c0.abs() < 1e-300 {
        return Err(Error::InvalidArgument(
            "degenerate weights give a zero normalization constant".into(),
        ));
    }
    Ok(c0)
}

/// Per-mode scalar inputs to the combined loss.
#[derive(Debug, Clone)]
pub enum LossInputs<'a> {
    /// Per selected cell: normalized objective c_i/|c0_i|, (vf, vf_target)
    /// pairs, and raw boundary losses.
    InverseHomogField {
        normalized_objectives: &'a [f64],
        volume: &'a [(f64, f64)],
        boundary: &'a [f64],
    },
    /// Single normalized compliance plus macro and per-cell micro volume
    /// deviations and boundary losses.
    Concurrent {
        normalized_compliance: f64,
        macro_volume: (f64, f64),
        micro_volume: &'a [(f64, f64)],
        boundary: &'a [f64],
    },
    /// Per-cell normalized bulk objectives plus the displacement mismatch.
    Metamaterial {
        normalized_objectives: &'a [f64],
        displacement: f64,
        volume: &'a [(f64, f64)],
        boundary: &'a [f64],
    },
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn mean_volume_penalty(pairs: &[(f64, f64)], alpha: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(vf, vf_t)| volume_penalty(vf, vf_t, alpha).0)
        .sum::<f64>()
        / pairs.len() as f64
}

/// Assembles the per-epoch loss breakdown for the given mode. The boundary
/// term is reported raw; beta weighting enters only the total.
pub fn combined_loss(inputs: &LossInputs, schedules: &Schedules, epoch: usize) -> LossBreakdown {
    let alpha = schedules.alpha(epoch);
    let beta = schedules.beta(epoch);
    match inputs {
        LossInputs::InverseHomogField {
            normalized_objectives,
            volume,
            boundary,
        } => {
            let objective_term = mean(normalized_objectives);
            let volume_term = mean_volume_penalty(volume, alpha);
            let boundary_term = mean(boundary);
            LossBreakdown {
                objective_term,
                volume_term,
                boundary_term,
                displacement_term: 0.0,
                total: objective_term + volume_term + beta * boundary_term,
            }
        }
        LossInputs::Concurrent {
            normalized_compliance,
            macro_volume,
            micro_volume,
            boundary,
        } => {
            let objective_term = *normalized_compliance;
            let volume_term = volume_penalty(macro_volume.0, macro_volume.1, alpha).0
                + mean_volume_penalty(micro_volume, alpha);
            let boundary_term = mean(boundary);
            LossBreakdown {
                objective_term,
                volume_term,
                boundary_term,
                displacement_term: 0.0,
                total: objective_term + volume_term + beta * boundary_term,
            }
        }
        LossInputs::Metamaterial {
            normalized_objectives,
            displacement,
            volume,
            boundary,
        } => {
            let objective_term = mean(normalized_objectives);
            let volume_term = mean_volume_penalty(volume, alpha);
            let boundary_term = mean(boundary);
            let displacement_term = *displacement;
            LossBreakdown {
                objective_term,
                volume_term,
                boundary_term,
                displacement_term,
                total: objective_term + alpha * displacement_term + volume_term + beta * boundary_term,
            }
        }
    }
}

/// The bulk-modulus maximization preset: c = -(E11 + E12 + E21 + E22).
pub const BULK_WEIGHTS: [[f64; 3]; 3] = [
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 0.0, 0.0],
];
