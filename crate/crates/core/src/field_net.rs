//! The density network T(X) = sigma(W sin(K X + 1)) with analytic
//! forward/backward passes and an Adam optimizer.
//!
//! The micro-scale network takes 4 inputs (x, y, u, w); the macro-scale
//! network of the concurrent mode takes 2 inputs (x, y).

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sampling::CoordinateBatch;

/// Trainable frequency kernels K (n_kernels x input_dim, row-major) and
/// output weights W (n_kernels).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub k: Vec<f64>,
    pub w: Vec<f64>,
    pub n_kernels: usize,
    pub input_dim: usize,
}

/// Gradient accumulator with the same shapes as [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub k: Vec<f64>,
    pub w: Vec<f64>,
}

impl NetworkGrads {
    pub fn zeros(params: &NetworkParams) -> Self {
        Self {
            k: vec![0.0; params.k.len()],
            w: vec![0.0; params.w.len()],
        }
    }

    pub fn add(&mut self, other: &NetworkGrads) {
        for (a, b) in self.k.iter_mut().zip(&other.k) {
            *a += b;
        }
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.k.iter().all(|v| v.is_finite()) && self.w.iter().all(|v| v.is_finite())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// K entries ~ uniform(-freq_scale, freq_scale), W ~ uniform(-0.1, 0.1),
/// deterministic for a fixed seed.
pub fn init_params(n_kernels: usize, input_dim: usize, seed: u64, freq_scale: f64) -> NetworkParams {
    assert!(n_kernels >= 1, "n_kernels must be >= 1");
    assert!(input_dim == 2 || input_dim == 4, "input_dim must be 2 or 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = (0..n_kernels * input_dim)
        .map(|_| rng.gen_range(-1.0..1.0) * freq_scale)
        .collect();
    let w = (0..n_kernels).map(|_| rng.gen_range(-0.1..0.1)).collect();
    NetworkParams {
        k,
        w,
        n_kernels,
        input_dim,
    }
}

impl NetworkParams {
    pub fn n_trainable(&self) -> usize {
        self.k.len() + self.w.len()
    }

    fn check_batch(&self, batch: &CoordinateBatch) -> Result<()> {
        if batch.width != self.input_dim {
            return Err(Error::Dimension(format!(
                "batch width {} does not match network input_dim {}",
                batch.width, self.input_dim
            )));
        }
        Ok(())
    }

    /// rho_r = sigma( sum_k W_k sin((K x_r)_k + 1) ), strictly in (0, 1).
    pub fn forward(&self, batch: &CoordinateBatch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let dim = self.input_dim;
        let mut out = Vec::with_capacity(batch.len());
        for row in &batch.rows {
            let mut z = 0.0;
            for kk in 0..self.n_kernels {
                let base = kk * dim;
                let mut a = 1.0;
                for d in 0..dim {
                    a += self.k[base + d] * row[d];
                }
                z += self.w[kk] * a.sin();
            }
            out.push(sigmoid(z));
        }
        Ok(out)
    }

    /// Exact analytic gradients of sum_r dl_drho[r] * rho_r w.r.t. K and W.
    pub fn backward(&self, batch: &CoordinateBatch, dl_drho: &[f64]) -> Result<NetworkGrads> {
        self.check_batch(batch)?;
        if dl_drho.len() != batch.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match batch length {}",
                dl_drho.len(),
                batch.len()
            )));
        }
        let dim = self.input_dim;
        let mut grads = NetworkGrads::zeros(self);
        let mut sincos = vec![(0.0f64, 0.0f64); self.n_kernels];
        for (row, &g) in batch.rows.iter().zip(dl_drho) {
            if g == 0.0 {
                continue;
            }
            let mut z = 0.0;
            for kk in 0..self.n_kernels {
                let base = kk * dim;
                let mut a = 1.0;
                for d in 0..dim {
                    a += self.k[base + d] * row[d];
                }
                let (s, c) = a.sin_cos();
                sincos[kk] = (s, c);
                z += self.w[kk] * s;
            }
            let sig = sigmoid(z);
            let dsig = sig * (1.0 - sig);
            let gr = g * dsig;
            for kk in 0..self.n_kernels {
                let (s, c) = sincos[kk];
                grads.w[kk] += gr * s;
                let wc = gr * self.w[kk] * c;
                let base = kk * dim;
                for d in 0..dim {
                    grads.k[base + d] += wc * row[d];
                }
            }
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: u32) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"MSCK")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(self.n_kernels as u32).to_le_bytes())?;
        f.write_all(&(self.input_dim as u32).to_le_bytes())?;
        f.write_all(&seed.to_le_bytes())?;
        f.write_all(&epoch.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * (self.k.len() + self.w.len()));
        for v in self.k.iter().chain(self.w.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Returns (params, seed, epoch) from a checkpoint written by [`save`].
    pub fn load(path: &Path) -> Result<(NetworkParams, u64, u32)> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"MSCK" {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        f.read_exact(&mut b4)?;
        let n_kernels = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b4)?;
        let input_dim = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        f.read_exact(&mut b4)?;
        let epoch = u32::from_le_bytes(b4);
        if n_kernels == 0 || !(input_dim == 2 || input_dim == 4) {
            return Err(Error::Checkpoint(format!(
                "invalid header: n_kernels={} input_dim={}",
                n_kernels, input_dim
            )));
        }
        let n = n_kernels * input_dim + n_kernels;
        let mut data = vec![0u8; 8 * n];
        f.read_exact(&mut data)?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (k, w) = vals.split_at(n_kernels * input_dim);
        Ok((
            NetworkParams {
                k: k.to_vec(),
                w: w.to_vec(),
                n_kernels,
                input_dim,
            },
            seed,
            epoch,
        ))
    }
}

/// Adam optimizer state; moments share the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m_k: Vec<f64>,
    pub v_k: Vec<f64>,
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams, lr: f64) -> Self {
        Self {
            m_k: vec![0.0; params.k.len()],
            v_k: vec![0.0; params.k.len()],
            m_w: vec![0.0; params.w.len()],
            v_w: vec![0.0; params.w.len()],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Rejects non-finite gradients.
pub fn adam_step(state: &mut AdamState, params: &mut NetworkParams, grads: &NetworkGrads) -> Result<()> {
    if grads.k.len() != params.k.len() || grads.w.len() != params.w.len() {
        return Err(Error::Dimension("gradient/parameter shape mismatch".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients passed to adam_step".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (beta1, beta2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    fn update(
        p: &mut [f64],
        g: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        beta1: f64,
        beta2: f64,
        lr: f64,
        eps: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    update(
        &mut params.k, &grads.k, &mut state.m_k, &mut state.v_k, beta1, beta2, lr, eps, bc1, bc2,
    );
    update(
        &mut params.w, &grads.w, &mut state.m_w, &mut state.v_w, beta1, beta2, lr, eps, bc1, bc2,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::CoordinateBatch;
    use approx::assert_relative_eq;

    fn batch_from_rows(rows: Vec<[f64; 4]>, width: usize) -> CoordinateBatch {
        let n = rows.len();
        CoordinateBatch {
            rows,
            owner_cell: vec![0; n],
            in_center: vec![true; n],
            grid_shape: (n, 1),
            width,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(50, 4, 123, 25.0);
        let b = init_params(50, 4, 123, 25.0);
        assert_eq!(a, b);
        let c = init_params(50, 4, 124, 25.0);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_half_density() {
        let mut p = init_params(20, 4, 1, 25.0);
        p.w.iter_mut().for_each(|w| *w = 0.0);
        let batch = batch_from_rows(vec![[0.1, -0.2, 0.3, 0.4], [0.0; 4]], 4);
        for rho in p.forward(&batch).unwrap() {
            assert_relative_eq!(rho, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_kernel_hand_value() {
        let p = NetworkParams {
            k: vec![1.0, 0.0, 0.0, 0.0],
            w: vec![1.0],
            n_kernels: 1,
            input_dim: 4,
        };
        let batch = batch_from_rows(vec![[0.0; 4]], 4);
        let rho = p.forward(&batch).unwrap()[0];
        assert_relative_eq!(rho, sigmoid(1.0f64.sin()), epsilon = 1e-15);
        assert_relative_eq!(rho, 0.698775, epsilon = 1e-6);
    }

    #[test]
    fn zero_frequency_scale_gives_constant_field() {
        let p = init_params(30, 4, 9, 0.0);
        let batch = batch_from_rows(
            vec![[0.1, 0.2, -0.3, 0.4], [-0.5, 0.5, 0.0, 0.1], [0.0; 4]],
            4,
        );
        let out = p.forward(&batch).unwrap();
        for v in &out {
            assert_relative_eq!(*v, out[0], epsilon = 1e-15);
        }
    }

    #[test]
    fn outputs_strictly_in_unit_interval() {
        let p = init_params(200, 4, 5, 25.0);
        let rows: Vec<[f64; 4]> = (0..50)
            .map(|i| {
                let t = i as f64 / 50.0 - 0.5;
                [t, -t, t * 0.7, t * 0.3]
            })
            .collect();
        let out = p.forward(&batch_from_rows(rows, 4)).unwrap();
        for v in out {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn backward_zero_gradient_and_additivity() {
        let p = init_params(15, 4, 2, 10.0);
        let rows: Vec<[f64; 4]> = (0..8).map(|i| [i as f64 * 0.1 - 0.4; 4]).collect();
        let b_all = batch_from_rows(rows.clone(), 4);
        let g0 = p.backward(&b_all, &vec![0.0; 8]).unwrap();
        assert!(g0.k.iter().all(|&v| v == 0.0) && g0.w.iter().all(|&v| v == 0.0));

        let dl: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let g_all = p.backward(&b_all, &dl).unwrap();
        let b1 = batch_from_rows(rows[..4].to_vec(), 4);
        let b2 = batch_from_rows(rows[4..].to_vec(), 4);
        let mut g_sum = p.backward(&b1, &dl[..4]).unwrap();
        g_sum.add(&p.backward(&b2, &dl[4..]).unwrap());
        for (a, b) in g_all.k.iter().zip(&g_sum.k) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in g_all.w.iter().zip(&g_sum.w) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = init_params(8, 4, 11, 5.0);
        let rows: Vec<[f64; 4]> = vec![
            [0.1, -0.2, 0.3, 0.05],
            [-0.4, 0.4, -0.1, 0.2],
            [0.0, 0.25, -0.3, -0.45],
        ];
        let batch = batch_from_rows(rows, 4);
        let dl = vec![0.7, -1.3, 0.4];
        let grads = p.backward(&batch, &dl).unwrap();
        let loss = |p: &NetworkParams| -> f64 {
            p.forward(&batch)
                .unwrap()
                .iter()
                .zip(&dl)
                .map(|(r, g)| r * g)
                .sum()
        };
        let h = 1e-6;
        for i in 0..p.k.len() {
            let mut lo = p.clone();
            let mut hi = p.clone();
            lo.k[i] -= h;
            hi.k[i] += h;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * h);
            let scale = fd.abs().max(grads.k[i].abs()).max(1e-10);
            assert!(
                (fd - grads.k[i]).abs() / scale < 1e-5,
                "K[{}]: fd {} analytic {}",
                i,
                fd,
                grads.k[i]
            );
        }
        for i in 0..p.w.len() {
            let mut lo = p.clone();
            let mut hi = p.clone();
            lo.w[i] -= h;
            hi.w[i] += h;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * h);
            let scale = fd.abs().max(grads.w[i].abs()).max(1e-10);
            assert!(
                (fd - grads.w[i]).abs() / scale < 1e-6,
                "W[{}]: fd {} analytic {}",
                i,
                fd,
                grads.w[i]
            );
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = init_params(10, 4, 3, 25.0);
        let p0 = p.clone();
        let mut st = AdamState::new(&p, 0.002);
        let g = NetworkGrads::zeros(&p);
        adam_step(&mut st, &mut p, &g).unwrap();
        assert_eq!(p, p0);
        assert!(st.m_k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = init_params(4, 2, 3, 25.0);
        let p0 = p.clone();
        let mut st = AdamState::new(&p, 0.002);
        let g = NetworkGrads {
            k: vec![1.0; p.k.len()],
            w: vec![-1.0; p.w.len()],
        };
        adam_step(&mut st, &mut p, &g).unwrap();
        for (a, b) in p.k.iter().zip(&p0.k) {
            assert_relative_eq!(b - a, 0.002, epsilon = 1e-8);
        }
        for (a, b) in p.w.iter().zip(&p0.w) {
            assert_relative_eq!(a - b, 0.002, epsilon = 1e-8);
        }
    }

    #[test]
    fn adam_matches_scalar_reference_trace() {
        // independent scalar Adam oracle
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let grads = [0.5, -0.2];
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut p = NetworkParams {
            k: vec![1.0, 0.0],
            w: vec![0.0],
            n_kernels: 1,
            input_dim: 2,
        };
        let mut st = AdamState::new(&p, lr);
        for &g in &grads {
            let gr = NetworkGrads {
                k: vec![g, 0.0],
                w: vec![0.0],
            };
            adam_step(&mut st, &mut p, &gr).unwrap();
        }
        assert_relative_eq!(p.k[0], theta, epsilon = 1e-14);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = init_params(3, 2, 1, 25.0);
        let mut st = AdamState::new(&p, 0.002);
        let mut g = NetworkGrads::zeros(&p);
        g.w[0] = f64::NAN;
        assert!(adam_step(&mut st, &mut p, &g).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let p = init_params(17, 4, 99, 25.0);
        p.save(&path, 99, 42).unwrap();
        let (q, seed, epoch) = NetworkParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(seed, 99);
        assert_eq!(epoch, 42);
    }
}
