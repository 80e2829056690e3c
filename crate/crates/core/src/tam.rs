//! Task-aware modulation of predicted kernels.
//!
//! A small MLP, shared over pixels and taps, maps each base tap value together
//! with the task embedding to a positive multiplier
//! `m = 2·sigmoid(MLP([K_p(q); e_t]))`. With a zero output layer the
//! multiplier is exactly 1, so modulation starts as the identity.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::activation::{gelu, gelu_with_grad, sigmoid};
use crate::error::{Error, Result};
use crate::kernel::{KernelField, TAPS};
use crate::param::{Parameters, Tensor};
use crate::rng::Rng;
use crate::scalar::{lane_sum, Scalar};

pub const DEFAULT_EMBEDDING_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;

/// Pixels per reduction tile for parameter gradients. Fixed so the summation
/// order never depends on the thread count.
const GRAD_TILE_PIXELS: usize = 256;

/// One learned embedding per task id, stored `[num_tasks, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbeddingTable<T> {
    pub entries: Tensor<T>,
}

impl<T: Scalar> TaskEmbeddingTable<T> {
    pub fn new(num_tasks: usize, dim: usize, rng: &mut Rng) -> Self {
        Self { entries: Tensor::uniform(&[num_tasks, dim], 1.0, rng) }
    }

    pub fn zeros(num_tasks: usize, dim: usize) -> Self {
        Self { entries: Tensor::zeros(&[num_tasks, dim]) }
    }

    pub fn num_tasks(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape[1]
    }

    pub fn embedding(&self, task: usize) -> Result<&[T]> {
        if task >= self.num_tasks() {
            return Err(Error::UnknownTask(task));
        }
        let d = self.dim();
        Ok(&self.entries.data[task * d..(task + 1) * d])
    }

    pub fn embedding_mut(&mut self, task: usize) -> Result<&mut [T]> {
        if task >= self.num_tasks() {
            return Err(Error::UnknownTask(task));
        }
        let d = self.dim();
        Ok(&mut self.entries.data[task * d..(task + 1) * d])
    }
}

impl<T: Scalar> Parameters<T> for TaskEmbeddingTable<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("entries".into(), &self.entries)]
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("entries".into(), &mut self.entries)]
    }
}

/// MLP `(1 + d) → h → 1` with GELU hidden activation.
///
/// `w1` is `[h, 1 + d]`; column 0 multiplies the tap value, the rest the task
/// embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TamParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> TamParams<T> {
    /// First layer uniform in `±sqrt(1 / fan_in)`; output layer zero, so the
    /// modulation is identically 1 at initialization.
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidParameter("TAM hidden width must be positive".into()));
        }
        let fan_in = (1 + dim) as f64;
        Ok(Self {
            w1: Tensor::uniform(&[hidden, 1 + dim], (1.0 / fan_in).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden]),
            b2: Tensor::zeros(&[1]),
        })
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, 1 + dim]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.w1.shape[1] - 1
    }

    /// Task-dependent hidden offset `W1[:, 1:] · e + b1`.
    fn task_offset(&self, e: &[T]) -> Vec<T> {
        let cols = self.dim() + 1;
        (0..self.hidden())
            .map(|j| {
                let row = &self.w1.data[j * cols..(j + 1) * cols];
                row[1..].iter().zip(e).fold(self.b1.data[j], |acc, (&w, &x)| acc + w * x)
            })
            .collect()
    }

    /// Column 0 of `w1`, the weights on the tap value.
    fn tap_weights(&self) -> Vec<T> {
        let cols = self.dim() + 1;
        (0..self.hidden()).map(|j| self.w1.data[j * cols]).collect()
    }

    /// Writes `m` for every tap value in `k`. Hidden units form the outer
    /// loop so the inner loop runs over contiguous taps.
    fn eval_tile(&self, k: &[T], a: &[T], offset: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = self.b2.data[0]);
        for ((&aj, &oj), &wj) in a.iter().zip(offset).zip(&self.w2.data) {
            for (o, &kv) in out.iter_mut().zip(k) {
                *o += wj * gelu(aj * kv + oj);
            }
        }
        let two = T::lit(2.0);
        out.iter_mut().for_each(|o| *o = two * sigmoid(*o));
    }

    fn fingerprint(&self, e: &[T]) -> u64 {
        let mut h = DefaultHasher::new();
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in &t.data {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        for v in e {
            v.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }
}

impl<T: Scalar> Parameters<T> for TamParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// Per-pixel, per-tap multipliers in `(0, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationField<T> {
    field: KernelField<T>,
}

impl<T: Scalar> ModulationField<T> {
    pub fn from_field(field: KernelField<T>) -> Self {
        Self { field }
    }
    pub fn ones(height: usize, width: usize) -> Self {
        Self { field: KernelField::filled(height, width, T::one()) }
    }
    pub fn as_field(&self) -> &KernelField<T> {
        &self.field
    }
    pub fn weights(&self) -> &[T] {
        self.field.weights()
    }
}

/// Forward state needed by [`tam_backward`].
#[derive(Clone, Debug)]
pub struct TamCache<T> {
    pub kernels: KernelField<T>,
    pub modulation: ModulationField<T>,
    pub task: usize,
    fingerprint: u64,
}

/// `m_p(q) = g_TAM(K_p(q), e_t)` for every pixel and tap.
pub fn modulation<T: Scalar>(
    k: &KernelField<T>,
    task: usize,
    table: &TaskEmbeddingTable<T>,
    params: &TamParams<T>,
) -> Result<ModulationField<T>> {
    modulation_with_cache(k, task, table, params).map(|c| c.modulation)
}

pub fn modulation_with_cache<T: Scalar>(
    k: &KernelField<T>,
    task: usize,
    table: &TaskEmbeddingTable<T>,
    params: &TamParams<T>,
) -> Result<TamCache<T>> {
    let e = table.embedding(task)?;
    if e.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs TAM input dim {}",
            e.len(),
            params.dim()
        )));
    }
    let offset = params.task_offset(e);
    let a = params.tap_weights();
    let mut m = vec![T::zero(); k.weights().len()];
    m.par_chunks_mut(GRAD_TILE_PIXELS * TAPS)
        .zip(k.weights().par_chunks(GRAD_TILE_PIXELS * TAPS))
        .for_each(|(out, kin)| params.eval_tile(kin, &a, &offset, out));
    let modulation = ModulationField { field: KernelField::new(k.height(), k.width(), m)? };
    Ok(TamCache { kernels: k.clone(), modulation, task, fingerprint: params.fingerprint(e) })
}

/// `K̃ = K ⊙ m`.
pub fn modulate<T: Scalar>(k: &KernelField<T>, m: &ModulationField<T>) -> Result<KernelField<T>> {
    k.zip_map(&m.field, |a, b| a * b)
}

/// Gradients of a scalar loss through `K̃ = K ⊙ g_TAM(K, e_t)`.
#[derive(Clone, Debug)]
pub struct TamGrads<T> {
    pub d_kernels: KernelField<T>,
    pub d_params: TamParams<T>,
    /// Gradient for the embedding row of the cached task.
    pub d_embedding: Vec<T>,
}

/// Reverse pass. With `through_modulation = false` the multiplier is treated
/// as a constant (only the direct product path contributes to `d_kernels`).
pub fn tam_backward<T: Scalar>(
    cache: &TamCache<T>,
    table: &TaskEmbeddingTable<T>,
    params: &TamParams<T>,
    d_modulated: &KernelField<T>,
    through_modulation: bool,
) -> Result<TamGrads<T>> {
    let e = table.embedding(cache.task)?;
    if params.fingerprint(e) != cache.fingerprint {
        return Err(Error::StaleCache);
    }
    d_modulated.ensure_dims(cache.kernels.height(), cache.kernels.width())?;
    let hidden = params.hidden();
    let cols = params.dim() + 1;
    let offset = params.task_offset(e);
    let kw = cache.kernels.weights();
    let mw = cache.modulation.weights();
    let gw = d_modulated.weights();
    let tile = GRAD_TILE_PIXELS * TAPS;

    let a = params.tap_weights();

    // Per tile: (dK, dw1_col0, dc, dw2, db2)
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>, T)> = (0..kw.len().div_ceil(tile))
        .into_par_iter()
        .map(|ti| {
            let lo = ti * tile;
            let hi = (lo + tile).min(kw.len());
            let (k, m, g) = (&kw[lo..hi], &mw[lo..hi], &gw[lo..hi]);
            let mut dk: Vec<T> = g.iter().zip(m).map(|(&g, &m)| g * m).collect();
            let mut dw1c0 = vec![T::zero(); hidden];
            let mut dc = vec![T::zero(); hidden];
            let mut dw2 = vec![T::zero(); hidden];
            if !through_modulation {
                return (dk, dw1c0, dc, dw2, T::zero());
            }
            let half = T::lit(0.5);
            // ∂L/∂z with m = 2·sigmoid(z): m' = m (1 − m/2)
            let dz: Vec<T> =
                k.iter().zip(m).zip(g).map(|((&k, &m), &g)| g * k * m * (T::one() - half * m)).collect();
            let db2 = lane_sum(&dz);
            let n = k.len();
            let (mut t_act, mut t_pre, mut t_w1) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
            for j in 0..hidden {
                let (aj, oj, wj) = (a[j], offset[j], params.w2.data[j]);
                let taps = k.iter().zip(&dz).zip(dk.iter_mut());
                let scratch = t_act.iter_mut().zip(t_pre.iter_mut()).zip(t_w1.iter_mut());
                for (((&kv, &dzv), dkv), ((ta, tp), tw)) in taps.zip(scratch) {
                    let (act, slope) = gelu_with_grad(aj * kv + oj);
                    let dpre = dzv * wj * slope;
                    *ta = dzv * act;
                    *tp = dpre;
                    *tw = dpre * kv;
                    *dkv += dpre * aj;
                }
                dw2[j] = lane_sum(&t_act);
                dc[j] = lane_sum(&t_pre);
                dw1c0[j] = lane_sum(&t_w1);
            }
            (dk, dw1c0, dc, dw2, db2)
        })
        .collect();

    let mut d_params = TamParams::zeros(params.dim(), hidden);
    let mut dk = Vec::with_capacity(kw.len());
    let mut dc = vec![T::zero(); hidden];
    for (pdk, pw1, pc, pw2, pb2) in partials {
        dk.extend(pdk);
        for j in 0..hidden {
            d_params.w1.data[j * cols] += pw1[j];
            dc[j] += pc[j];
            d_params.w2.data[j] += pw2[j];
        }
        d_params.b2.data[0] += pb2;
    }
    let mut d_embedding = vec![T::zero(); params.dim()];
    for j in 0..hidden {
        d_params.b1.data[j] = dc[j];
        for (q, &ev) in e.iter().enumerate() {
            d_params.w1.data[j * cols + 1 + q] = dc[j] * ev;
            d_embedding[q] += params.w1.data[j * cols + 1 + q] * dc[j];
        }
    }
    Ok(TamGrads {
        d_kernels: KernelField::new(cache.kernels.height(), cache.kernels.width(), dk)?,
        d_params,
        d_embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_setup(seed: u64, h: usize, w: usize, d: usize, hid: usize) -> (KernelField<f64>, TaskEmbeddingTable<f64>, TamParams<f64>) {
        let mut rng = Rng::new(seed);
        let k = KernelField::from_fn(h, w, |_, _, _| rng.range(-1.0, 1.0));
        let table = TaskEmbeddingTable::new(3, d, &mut rng);
        let mut p = TamParams::new(d, hid, &mut rng).unwrap();
        for v in p.w2.data.iter_mut().chain(p.b1.data.iter_mut()).chain(p.b2.data.iter_mut()) {
            *v = rng.range(-0.8, 0.8);
        }
        (k, table, p)
    }

    #[test]
    fn zero_output_layer_gives_unit_modulation() {
        let mut rng = Rng::new(1);
        let k = KernelField::from_fn(4, 4, |_, _, _| rng.range(-3.0, 3.0));
        let table = TaskEmbeddingTable::<f64>::new(3, 4, &mut rng);
        let p = TamParams::new(4, 8, &mut rng).unwrap();
        for task in 0..3 {
            let m = modulation(&k, task, &table, &p).unwrap();
            assert!(m.weights().iter().all(|&v| v == 1.0));
        }
        assert!(matches!(modulation(&k, 3, &table, &p), Err(Error::UnknownTask(3))));
    }

    #[test]
    fn tasks_are_distinguishable() {
        let (k, table, p) = random_setup(2, 3, 3, 4, 6);
        let m0 = modulation(&k, 0, &table, &p).unwrap();
        let m1 = modulation(&k, 1, &table, &p).unwrap();
        assert!(m0.weights().iter().zip(m1.weights()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn tiny_forward_matches_hand_computation() {
        let table = TaskEmbeddingTable { entries: Tensor::from_vec(&[1, 2], vec![0.5, -1.0]).unwrap() };
        let p = TamParams {
            w1: Tensor::from_vec(&[2, 3], vec![0.3, -0.2, 0.1, -0.6, 0.4, 0.25]).unwrap(),
            b1: Tensor::from_vec(&[2], vec![0.05, -0.1]).unwrap(),
            w2: Tensor::from_vec(&[2], vec![0.7, -0.9]).unwrap(),
            b2: Tensor::from_vec(&[1], vec![0.2]).unwrap(),
        };
        let k = KernelField::filled(1, 1, 0.8f64);
        let m = modulation(&k, 0, &table, &p).unwrap();
        let g = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let h0 = 0.3 * 0.8 + (-0.2) * 0.5 + 0.1 * (-1.0) + 0.05;
        let h1 = -0.6 * 0.8 + 0.4 * 0.5 + 0.25 * (-1.0) - 0.1;
        let z = 0.7 * g(h0) - 0.9 * g(h1) + 0.2;
        let want = 2.0 / (1.0 + (-z).exp());
        assert!(m.weights().iter().all(|&v| (v - want).abs() <= 1e-7));
    }

    #[test]
    fn modulate_cases() {
        let mut rng = Rng::new(3);
        let k = KernelField::from_fn(3, 4, |_, _, _| rng.range(-1.0, 1.0));
        assert_eq!(modulate(&k, &ModulationField::ones(3, 4)).unwrap(), k);
        let twos = ModulationField::from_field(KernelField::filled(3, 4, 2.0));
        let kt = modulate(&KernelField::<f64>::identity(3, 4), &twos).unwrap();
        assert!(kt.weights().chunks(9).all(|p| p[4] == 2.0 && p.iter().filter(|v| **v == 0.0).count() == 8));
        let m = ModulationField::from_field(KernelField::from_fn(3, 4, |_, _, _| rng.range(0.1, 1.9)));
        let kt = modulate(&k, &m).unwrap();
        for i in 0..k.weights().len() {
            assert_eq!(kt.weights()[i], k.weights()[i] * m.weights()[i]);
        }
        assert!(modulate(&k, &ModulationField::ones(4, 3)).is_err());
    }

    #[test]
    fn modulation_is_positive_and_bounded_and_keeps_sign() {
        let (k, table, mut p) = random_setup(4, 5, 5, 3, 5);
        p.b2.data[0] = 30.0;
        let m = modulation(&k, 1, &table, &p).unwrap();
        assert!(m.weights().iter().all(|&v| v > 0.0 && v <= 2.0));
        let kt = modulate(&k, &m).unwrap();
        for (a, b) in k.weights().iter().zip(kt.weights()) {
            assert!(a.signum() == b.signum() || *a == 0.0);
        }
    }

    /// Scalar loss `Σ w ⊙ K̃` with fixed random weights `w`.
    fn loss(k: &KernelField<f64>, task: usize, t: &TaskEmbeddingTable<f64>, p: &TamParams<f64>, w: &[f64]) -> f64 {
        let m = modulation(k, task, t, p).unwrap();
        let kt = modulate(k, &m).unwrap();
        kt.weights().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let (k, table, p) = random_setup(5, 2, 2, 2, 3);
        let mut rng = Rng::new(55);
        let w: Vec<f64> = (0..k.weights().len()).map(|_| rng.range(-1.0, 1.0)).collect();
        let task = 1;
        let cache = modulation_with_cache(&k, task, &table, &p).unwrap();
        let up = KernelField::new(2, 2, w.clone()).unwrap();
        let g = tam_backward(&cache, &table, &p, &up, true).unwrap();
        let step = 1e-4;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * step);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel <= 1e-3 || (fd - analytic).abs() < 1e-8, "fd {fd} vs analytic {analytic}");
        };
        for i in 0..k.weights().len() {
            let mut kp = k.clone();
            kp.weights_mut()[i] += step;
            let mut km = k.clone();
            km.weights_mut()[i] -= step;
            check(g.d_kernels.weights()[i], loss(&kp, task, &table, &p, &w), loss(&km, task, &table, &p, &w));
        }
        let names: Vec<String> = p.tensors().iter().map(|(n, _)| n.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let n = p.tensors()[ti].1.len();
            for j in 0..n {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].1.data[j] += step;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].1.data[j] -= step;
                let analytic = g.d_params.tensors()[ti].1.data[j];
                let _ = name;
                check(analytic, loss(&k, task, &table, &pp, &w), loss(&k, task, &table, &pm, &w));
            }
        }
        for q in 0..table.dim() {
            let mut tp = table.clone();
            tp.embedding_mut(task).unwrap()[q] += step;
            let mut tm = table.clone();
            tm.embedding_mut(task).unwrap()[q] -= step;
            check(g.d_embedding[q], loss(&k, task, &tp, &p, &w), loss(&k, task, &tm, &p, &w));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (k, table, p) = random_setup(6, 3, 3, 2, 3);
        let cache = modulation_with_cache(&k, 0, &table, &p).unwrap();
        let g = tam_backward(&cache, &table, &p, &KernelField::filled(3, 3, 0.0), true).unwrap();
        assert!(g.d_kernels.weights().iter().all(|&v| v == 0.0));
        assert_eq!(g.d_params.global_norm(), 0.0);
        assert!(g.d_embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detaching_modulation_changes_kernel_grads() {
        let (k, table, p) = random_setup(7, 3, 3, 2, 3);
        let cache = modulation_with_cache(&k, 2, &table, &p).unwrap();
        let up = KernelField::filled(3, 3, 1.0);
        let full = tam_backward(&cache, &table, &p, &up, true).unwrap();
        let direct = tam_backward(&cache, &table, &p, &up, false).unwrap();
        assert!(full.d_kernels.max_abs_diff_with(&direct.d_kernels) > 1e-6);
        for (d, m) in direct.d_kernels.weights().iter().zip(cache.modulation.weights()) {
            assert_eq!(*d, *m);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (k, table, mut p) = random_setup(8, 3, 3, 2, 3);
        let cache = modulation_with_cache(&k, 0, &table, &p).unwrap();
        p.w2.data[0] += 0.1;
        assert!(matches!(
            tam_backward(&cache, &table, &p, &KernelField::filled(3, 3, 1.0), true),
            Err(Error::StaleCache)
        ));
    }
}
