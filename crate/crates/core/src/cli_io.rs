//! Config parsing and result export: TOML run configs with strict schemas,
//! PGM density images, and CSV convergence/cell reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::driver::{
    BatchScheme, CellEvaluation, ConvergenceLog, NetworkSpec, RotationMode, RunConfig,
};
use crate::error::{Error, Result};
use crate::macro_fe::MacroProblem;
use crate::objectives::{Mode, BULK_WEIGHTS};
use crate::sampling::MacroGrid;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    mode: String,
    grid: GridSection,
    #[serde(default)]
    network: NetworkSection,
    #[serde(default)]
    optimization: OptimSection,
    fields: FieldsSection,
    macro_network: Option<NetworkSection>,
    macro_problem: Option<MacroProblemSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    n_cells_x: usize,
    n_cells_y: usize,
    micro_res: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NetworkSection {
    n_kernels: usize,
    seed: u64,
    freq_scale: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            n_kernels: 5000,
            seed: 0,
            freq_scale: 25.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OptimSection {
    epochs: usize,
    lr: f64,
    threshold: f64,
    simp_p: f64,
    e_min: f64,
    nu: f64,
    batch_scheme: String,
    rotation_mode: String,
    checkpoint_every: usize,
    disable_boundary_loss: bool,
    freeze_micro: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.002,
            threshold: 0.4,
            simp_p: 3.0,
            e_min: 1e-9,
            nu: 0.3,
            batch_scheme: "full".into(),
            rotation_mode: "geometry".into(),
            checkpoint_every: 25,
            disable_boundary_loss: false,
            freeze_micro: false,
        }
    }
}

/// A per-cell scalar field: exactly one of constant, ramp, or table.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalarField {
    constant: Option<f64>,
    ramp: Option<Ramp>,
    table: Option<Vec<f64>>,
}

/// Linear interpolation from `from` at the first cell to `to` at the last
/// cell along the given axis ("x" or "y").
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Ramp {
    from: f64,
    to: f64,
    along: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightField {
    preset: Option<String>,
    matrix: Option<[[f64; 3]; 3]>,
    /// Per-entry ramps keyed E11, E12, E13, E22, E23, E33 (symmetric fill),
    /// overriding the base preset/matrix entries.
    ramps: Option<BTreeMap<String, Ramp>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldsSection {
    vf: ScalarField,
    weights: Option<WeightField>,
    /// Rotation angles in degrees.
    rotation: Option<ScalarField>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MacroProblemSection {
    fixed_dofs: Vec<usize>,
    /// Sparse (dof, value) point loads.
    loads: Vec<(usize, f64)>,
    #[serde(default = "default_half")]
    vf_macro: f64,
    #[serde(default = "default_half")]
    vf_micro: f64,
    #[serde(default)]
    gamma_dofs: Vec<usize>,
    #[serde(default)]
    u_target: Vec<(usize, f64)>,
    #[serde(default)]
    solid_cells: Vec<(usize, usize)>,
}

fn default_half() -> f64 {
    0.5
}

impl Ramp {
    fn value_at(&self, i: usize, j: usize, nx: usize, ny: usize) -> Result<f64> {
        let t = match self.along.as_str() {
            "x" => {
                if nx > 1 {
                    i as f64 / (nx - 1) as f64
                } else {
                    0.0
                }
            }
            "y" => {
                if ny > 1 {
                    j as f64 / (ny - 1) as f64
                } else {
                    0.0
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "ramp axis must be \"x\" or \"y\", got {:?}",
                    other
                )))
            }
        };
        Ok(self.from + (self.to - self.from) * t)
    }
}

impl ScalarField {
    fn resolve(&self, name: &str, nx: usize, ny: usize) -> Result<Vec<f64>> {
        let given = [self.constant.is_some(), self.ramp.is_some(), self.table.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if given != 1 {
            return Err(Error::Config(format!(
                "field {:?} needs exactly one of constant/ramp/table",
                name
            )));
        }
        if let Some(c) = self.constant {
            return Ok(vec![c; nx * ny]);
        }
        if let Some(r) = &self.ramp {
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    out.push(r.value_at(i, j, nx, ny)?);
                }
            }
            return Ok(out);
        }
        let table = self.table.as_ref().unwrap();
        if table.len() != nx * ny {
            return Err(Error::Config(format!(
                "field {:?} table needs {} entries, got {}",
                name,
                nx * ny,
                table.len()
            )));
        }
        Ok(table.clone())
    }
}

fn voigt_entry(key: &str) -> Result<(usize, usize)> {
    match key {
        "E11" => Ok((0, 0)),
        "E12" => Ok((0, 1)),
        "E13" => Ok((0, 2)),
        "E22" => Ok((1, 1)),
        "E23" => Ok((1, 2)),
        "E33" => Ok((2, 2)),
        other => Err(Error::Config(format!(
            "unknown weight entry {:?} (expected E11/E12/E13/E22/E23/E33)",
            other
        ))),
    }
}

fn resolve_weights(
    field: &Option<WeightField>,
    nx: usize,
    ny: usize,
) -> Result<Vec<[[f64; 3]; 3]>> {
    let n = nx * ny;
    let (base, ramps) = match field {
        None => (BULK_WEIGHTS, None),
        Some(f) => {
            let base = match (&f.preset, &f.matrix) {
                (Some(p), None) => match p.as_str() {
                    "bulk" => BULK_WEIGHTS,
                    other => {
                        return Err(Error::Config(format!("unknown weight preset {:?}", other)))
                    }
                },
                (None, Some(m)) => {
                    for a in 0..3 {
                        for b in 0..3 {
                            if (m[a][b] - m[b][a]).abs() > 1e-12 {
                                return Err(Error::Config(
                                    "weights.matrix must be symmetric".into(),
                                ));
                            }
                        }
                    }
                    *m
                }
                (None, None) => [[0.0; 3]; 3],
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "weights: give either preset or matrix, not both".into(),
                    ))
                }
            };
            (base, f.ramps.as_ref())
        }
    };
    let mut out = vec![base; n];
    if let Some(ramps) = ramps {
        for (key, ramp) in ramps {
            let (a, b) = voigt_entry(key)?;
            for j in 0..ny {
                for i in 0..nx {
                    let v = ramp.value_at(i, j, nx, ny)?;
                    let w = &mut out[j * nx + i];
                    w[a][b] = v;
                    w[b][a] = v;
                }
            }
        }
    }
    Ok(out)
}

fn parse_batch_scheme(s: &str, n_cells: usize) -> Result<BatchScheme> {
    if s == "full" {
        return Ok(BatchScheme::Full);
    }
    let parse_k = |rest: &str| -> Result<usize> {
        let k: usize = rest
            .parse()
            .map_err(|_| Error::Config(format!("invalid batch group count in {:?}", s)))?;
        if k < 1 || k > n_cells {
            return Err(Error::Config(format!(
                "batch group count {} must be in [1, {}]",
                k, n_cells
            )));
        }
        Ok(k)
    };
    if let Some(rest) = s.strip_prefix("minibatch:") {
        return Ok(BatchScheme::MiniBatch(parse_k(rest)?));
    }
    if let Some(rest) = s.strip_prefix("miniepoch:") {
        return Ok(BatchScheme::MiniEpoch(parse_k(rest)?));
    }
    Err(Error::Config(format!(
        "batch_scheme must be \"full\", \"minibatch:k\", or \"miniepoch:k\", got {:?}",
        s
    )))
}

fn build_macro_problem(
    section: &MacroProblemSection,
    nx: usize,
    ny: usize,
) -> Result<MacroProblem> {
    let n_dofs = 2 * (nx + 1) * (ny + 1);
    let mut loads = vec![0.0; n_dofs];
    for &(dof, v) in &section.loads {
        if dof >= n_dofs {
            return Err(Error::Config(format!("load dof {} out of range", dof)));
        }
        loads[dof] += v;
    }
    let mut gamma = vec![0.0; n_dofs];
    for &dof in &section.gamma_dofs {
        if dof >= n_dofs {
            return Err(Error::Config(format!("gamma dof {} out of range", dof)));
        }
        gamma[dof] = 1.0;
    }
    let mut u_target = vec![0.0; n_dofs];
    for &(dof, v) in &section.u_target {
        if dof >= n_dofs {
            return Err(Error::Config(format!("u_target dof {} out of range", dof)));
        }
        u_target[dof] = v;
    }
    let solid_mask = if section.solid_cells.is_empty() {
        None
    } else {
        let mut mask = vec![false; nx * ny];
        for &(i, j) in &section.solid_cells {
            if i >= nx || j >= ny {
                return Err(Error::Config(format!("solid cell ({}, {}) out of range", i, j)));
            }
            mask[j * nx + i] = true;
        }
        Some(mask)
    };
    Ok(MacroProblem {
        n_cells_x: nx,
        n_cells_y: ny,
        fixed_dofs: section.fixed_dofs.clone(),
        loads,
        gamma,
        u_target,
        vf_macro: section.vf_macro,
        vf_micro: section.vf_micro,
        solid_mask,
    })
}

/// Parses a TOML run config with strict unknown-key rejection and the
/// documented defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {}", e)))?;

    let mode = match file.mode.as_str() {
        "inverse_homog_field" => Mode::InverseHomogField,
        "concurrent" => Mode::Concurrent,
        "metamaterial" => Mode::Metamaterial,
        other => return Err(Error::Config(format!("unknown mode {:?}", other))),
    };
    let (nx, ny) = (file.grid.n_cells_x, file.grid.n_cells_y);
    if nx < 1 || ny < 1 || file.grid.micro_res < 2 {
        return Err(Error::Config(
            "grid needs n_cells_x, n_cells_y >= 1 and micro_res >= 2".into(),
        ));
    }

    let vf = file.fields.vf.resolve("vf", nx, ny)?;
    for &v in &vf {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!("vf value {} outside (0, 1)", v)));
        }
    }
    let weights = resolve_weights(&file.fields.weights, nx, ny)?;
    let rotation_deg = match &file.fields.rotation {
        Some(f) => f.resolve("rotation", nx, ny)?,
        None => vec![0.0; nx * ny],
    };

    let grid = MacroGrid::from_fn(nx, ny, file.grid.micro_res, |i, j| {
        let e = j * nx + i;
        (vf[e], weights[e], rotation_deg[e].to_radians())
    })?;

    let mut config = RunConfig::new(mode, grid);
    config.network = NetworkSpec {
        n_kernels: file.network.n_kernels,
        seed: file.network.seed,
        freq_scale: file.network.freq_scale,
    };
    let opt = &file.optimization;
    config.epochs = opt.epochs;
    config.lr = opt.lr;
    config.threshold = opt.threshold;
    config.simp_p = opt.simp_p;
    config.e_min = opt.e_min;
    config.nu = opt.nu;
    config.batch_scheme = parse_batch_scheme(&opt.batch_scheme, nx * ny)?;
    config.rotation_mode = match opt.rotation_mode.as_str() {
        "geometry" => RotationMode::Geometry,
        "tensor" => RotationMode::Tensor,
        other => return Err(Error::Config(format!("unknown rotation_mode {:?}", other))),
    };
    config.checkpoint_every = opt.checkpoint_every.max(1);
    config.disable_boundary_loss = opt.disable_boundary_loss;
    config.freeze_micro = opt.freeze_micro;
    if opt.epochs < 1 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }

    config.macro_network = file.macro_network.as_ref().map(|m| NetworkSpec {
        n_kernels: m.n_kernels,
        seed: m.seed,
        freq_scale: m.freq_scale,
    });
    config.macro_problem = match &file.macro_problem {
        Some(s) => Some(build_macro_problem(s, nx, ny)?),
        None => None,
    };
    match mode {
        Mode::Concurrent => {
            if config.macro_problem.is_none() || config.macro_network.is_none() {
                return Err(Error::Config(
                    "concurrent mode requires [macro_problem] and [macro_network]".into(),
                ));
            }
        }
        Mode::Metamaterial => {
            if config.macro_problem.is_none() {
                return Err(Error::Config("metamaterial mode requires [macro_problem]".into()));
            }
        }
        Mode::InverseHomogField => {}
    }
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Writes a binary PGM (P5) image: density 1 -> black (0), 0 -> white (255),
/// pixel = 255 (1 - rho) with ties rounded down. Rows are written in input
/// order (row 0 first).
pub fn export_density_image(
    densities: &[f64],
    grid_shape: (usize, usize),
    path: &Path,
) -> Result<()> {
    let (h, w) = grid_shape;
    if densities.len() != h * w {
        return Err(Error::Dimension(format!(
            "image shape {}x{} needs {} densities, got {}",
            w,
            h,
            h * w,
            densities.len()
        )));
    }
    let mut bytes = Vec::with_capacity(h * w + 32);
    bytes.extend_from_slice(format!("P5\n{} {}\n255\n", w, h).as_bytes());
    for &rho in densities {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("density {} outside [0, 1]", rho)));
        }
        let v = (255.0 * (1.0 - rho) - 0.5).ceil().clamp(0.0, 255.0) as u8;
        bytes.push(v);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Convergence CSV: epoch, objective, volume, boundary, total, seconds.
pub fn export_convergence_csv(log: &ConvergenceLog, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,objective,volume,boundary,total,seconds\n");
    for r in &log.records {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.6}\n",
            r.epoch,
            r.breakdown.objective_term,
            r.breakdown.volume_term,
            r.breakdown.boundary_term,
            r.breakdown.total,
            r.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.17e}", v),
        None => "nan".into(),
    }
}

/// Per-cell CSV: i, j, vf_target, vf_measured, E11, E12, E13, E22, E23, E33,
/// bulk, hs_bound, ratio. All-void cells carry nan tensor entries and ratio.
pub fn export_cells_csv(evals: &[CellEvaluation], path: &Path) -> Result<()> {
    let mut out =
        String::from("i,j,vf_target,vf_measured,E11,E12,E13,E22,E23,E33,bulk,hs_bound,ratio\n");
    for e in evals {
        let t = e.tensor.as_ref();
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{},{},{},{},{},{},{:.17e},{:.17e},{}\n",
            e.index.0,
            e.index.1,
            e.vf_target,
            e.vf_measured,
            fmt_opt(t.map(|t| t.m[0][0])),
            fmt_opt(t.map(|t| t.m[0][1])),
            fmt_opt(t.map(|t| t.m[0][2])),
            fmt_opt(t.map(|t| t.m[1][1])),
            fmt_opt(t.map(|t| t.m[1][2])),
            fmt_opt(t.map(|t| t.m[2][2])),
            e.bulk,
            e.hs_bound,
            fmt_opt(e.ratio),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Run metadata: config echo facts, seed, parameter count, wall time.
pub fn export_metadata(config: &RunConfig, n_trainable: usize, seconds: f64, path: &Path) -> Result<()> {
    let mode = match config.mode {
        Mode::InverseHomogField => "inverse_homog_field",
        Mode::Concurrent => "concurrent",
        Mode::Metamaterial => "metamaterial",
    };
    let out = format!(
        "mode = \"{}\"\nn_cells_x = {}\nn_cells_y = {}\nmicro_res = {}\n\
         n_kernels = {}\nseed = {}\nfreq_scale = {}\nepochs = {}\nlr = {}\n\
         threshold = {}\nn_trainable = {}\nwall_seconds = {:.3}\n",
        mode,
        config.grid.n_cells_x,
        config.grid.n_cells_y,
        config.grid.micro_res,
        config.network.n_kernels,
        config.network.seed,
        config.network.freq_scale,
        config.epochs,
        config.lr,
        config.threshold,
        n_trainable,
        seconds
    );
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    const MINIMAL: &str = r#"
        mode = "inverse_homog_field"
        [grid]
        n_cells_x = 4
        n_cells_y = 4
        micro_res = 20
        [fields]
        vf = { constant = 0.5 }
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.epochs, 300);
        assert_relative_eq!(c.lr, 0.002);
        assert_relative_eq!(c.threshold, 0.4);
        assert_relative_eq!(c.simp_p, 3.0);
        assert_relative_eq!(c.e_min, 1e-9);
        assert_eq!(c.network.n_kernels, 5000);
        assert_relative_eq!(c.network.freq_scale, 25.0);
        assert_eq!(c.batch_scheme, BatchScheme::Full);
        assert_eq!(c.grid.cell(0, 0).tensor_weights, BULK_WEIGHTS);
        assert_relative_eq!(c.grid.cell(2, 1).vf_target, 0.5);
    }

    #[test]
    fn out_of_range_vf_rejected() {
        let bad = MINIMAL.replace("0.5", "1.5");
        let err = parse_config_str(&bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{:?}", err);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{}\nnot_a_key = 1\n", MINIMAL);
        assert!(parse_config_str(&bad).is_err());
        let bad2 = MINIMAL.replace("[fields]", "[fields]\nbogus = 2");
        assert!(parse_config_str(&bad2).is_err());
    }

    #[test]
    fn vf_ramp_matches_linear_interpolation() {
        let text = MINIMAL.replace(
            "vf = { constant = 0.5 }",
            "vf = { ramp = { from = 0.4, to = 0.56, along = \"x\" } }",
        );
        let c = parse_config_str(&text).unwrap();
        for i in 0..4 {
            let expected = 0.4 + (0.56 - 0.4) * i as f64 / 3.0;
            for j in 0..4 {
                assert_relative_eq!(c.grid.cell(i, j).vf_target, expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn weight_entry_ramp_expands() {
        let text = MINIMAL.replace(
            "[fields]",
            "[fields.weights]\npreset = \"bulk\"\n[fields.weights.ramps]\nE11 = { from = 0.3, to = 1.0, along = \"x\" }\n[fields]",
        );
        let c = parse_config_str(&text).unwrap();
        for i in 0..4 {
            let expected = 0.3 + 0.7 * i as f64 / 3.0;
            assert_relative_eq!(c.grid.cell(i, 2).tensor_weights[0][0], expected, epsilon = 1e-14);
            // untouched entries keep the preset values
            assert_relative_eq!(c.grid.cell(i, 2).tensor_weights[0][1], 1.0);
        }
    }

    #[test]
    fn batch_scheme_strings() {
        let c = parse_config_str(&MINIMAL.replace(
            "[fields]",
            "[optimization]\nbatch_scheme = \"miniepoch:4\"\n[fields]",
        ))
        .unwrap();
        assert_eq!(c.batch_scheme, BatchScheme::MiniEpoch(4));
        assert!(parse_config_str(&MINIMAL.replace(
            "[fields]",
            "[optimization]\nbatch_scheme = \"miniepoch:99\"\n[fields]",
        ))
        .is_err());
    }

    #[test]
    fn rotation_degrees_converted() {
        let text = MINIMAL.replace(
            "vf = { constant = 0.5 }",
            "vf = { constant = 0.5 }\nrotation = { constant = 45.0 }",
        );
        let c = parse_config_str(&text).unwrap();
        assert_relative_eq!(c.grid.cell(0, 0).rotation, std::f64::consts::FRAC_PI_4);
    }

    #[test]
    fn concurrent_requires_macro_sections() {
        let bad = MINIMAL.replace("inverse_homog_field", "concurrent");
        assert!(parse_config_str(&bad).is_err());
    }

    #[test]
    fn macro_problem_expansion() {
        let text = format!(
            "{}\n[macro_problem]\nfixed_dofs = [0, 1, 21]\nloads = [[5, -1.0]]\n\
             gamma_dofs = [7]\nu_target = [[7, 0.25]]\nsolid_cells = [[0, 0]]\n",
            MINIMAL.replace("inverse_homog_field", "metamaterial")
        );
        let c = parse_config_str(&text).unwrap();
        let p = c.macro_problem.unwrap();
        assert_eq!(p.loads.len(), 2 * 5 * 5);
        assert_relative_eq!(p.loads[5], -1.0);
        assert_eq!(p.gamma[7], 1.0);
        assert_relative_eq!(p.u_target[7], 0.25);
        assert!(p.solid_mask.unwrap()[0]);
    }

    #[test]
    fn pgm_header_and_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");

        export_density_image(&[0.0, 1.0, 1.0, 0.0], (2, 2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P5\n2 2\n255\n".get(..9).unwrap());
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 0, 255]);

        // constant 0.5: 127.5 with ties rounded down -> 127
        export_density_image(&[0.5; 4], (2, 2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 4..].iter().all(|&b| b == 127));

        assert!(export_density_image(&[1.5], (1, 1), &path).is_err());
        assert!(export_density_image(&[0.5; 3], (2, 2), &path).is_err());
    }

    #[test]
    fn csv_exports_round_trip() {
        use crate::driver::EpochRecord;
        use crate::homogenize::ElasticityTensor;
        use crate::objectives::LossBreakdown;

        let dir = tempdir().unwrap();
        let conv = dir.path().join("conv.csv");
        let log = ConvergenceLog {
            records: vec![EpochRecord {
                epoch: 1,
                breakdown: LossBreakdown {
                    objective_term: -0.5,
                    volume_term: 0.25,
                    boundary_term: 0.125,
                    displacement_term: 0.0,
                    total: -0.25,
                },
                per_cell: vec![],
                seconds: 0.5,
            }],
        };
        export_convergence_csv(&log, &conv).unwrap();
        let text = std::fs::read_to_string(&conv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,objective,volume,boundary,total,seconds");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "1");
        assert_relative_eq!(row[1].parse::<f64>().unwrap(), -0.5);
        assert_relative_eq!(row[4].parse::<f64>().unwrap(), -0.25);

        let cells = dir.path().join("cells.csv");
        let eh = ElasticityTensor::base(1.0, 0.3).scale(0.3);
        let evals = vec![
            CellEvaluation {
                index: (0, 0),
                vf_target: 0.5,
                vf_measured: 0.48,
                tensor: Some(eh),
                bulk: eh.bulk_modulus(),
                hs_bound: 0.18,
                ratio: Some(eh.bulk_modulus() / 0.18),
            },
            CellEvaluation {
                index: (1, 0),
                vf_target: 0.5,
                vf_measured: 0.0,
                tensor: None,
                bulk: 0.0,
                hs_bound: 0.18,
                ratio: None,
            },
        ];
        export_cells_csv(&evals, &cells).unwrap();
        let text = std::fs::read_to_string(&cells).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 3);
        let r0: Vec<&str> = rows[1].split(',').collect();
        assert_relative_eq!(r0[4].parse::<f64>().unwrap(), eh.m[0][0]);
        // ratio column recomputes as bulk / hs_bound
        let bulk: f64 = r0[10].parse().unwrap();
        let bound: f64 = r0[11].parse().unwrap();
        let ratio: f64 = r0[12].parse().unwrap();
        assert_relative_eq!(ratio, bulk / bound, epsilon = 1e-12);
        assert!(rows[2].ends_with("nan"));
    }
}
