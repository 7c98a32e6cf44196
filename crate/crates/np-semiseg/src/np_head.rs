//! Class memory banks, centers, the latent head, and center snapshots.
//!
//! Reduced per-pixel feature vectors are routed into a fixed-capacity FIFO
//! bank per class according to their (real or pseudo) labels. The mean of
//! each bank is that class's center. Banks are training-time state only;
//! after training a [`CenterSnapshot`] of the context/target centers is
//! all inference needs.

use crate::rng::StreamRng;
use crate::segmodel::{LinearLayer, LinearVars, ParamFeed};
use crate::tape::{Tape, Var};
use crate::tensor::{real, Parameter, Real, Tensor};
use crate::{LabelMap, NpError, Result, IGNORE_LABEL};
use std::collections::VecDeque;
use std::io::{Read, Write};

/// Variance head outputs are floored here to keep the KL bounded.
pub const VAR_FLOOR: f64 = 1e-4;

/// Default memory bank capacity.
pub const DEFAULT_BANK_CAPACITY: usize = 2560;

/// How the per-pixel aggregation over class centers is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    /// Distance-softmax weighted combination of centers (the full model).
    #[default]
    Attention,
    /// Plain mean of the populated centers, independent of the query map
    /// (the ablation baseline).
    Mean,
}

impl Aggregator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Aggregator::Attention),
            "mean" => Ok(Aggregator::Mean),
            other => Err(NpError::Config(format!(
                "aggregator must be 'attention' or 'mean', got '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Attention => "attention",
            Aggregator::Mean => "mean",
        }
    }
}

/// Fixed-capacity FIFO ring of reduced feature vectors for one class.
#[derive(Debug, Clone)]
pub struct ClassMemoryBank {
    pub class_id: usize,
    capacity: usize,
    buf: VecDeque<Vec<f32>>,
}

impl ClassMemoryBank {
    pub fn new(class_id: usize, capacity: usize) -> Self {
        ClassMemoryBank {
            class_id,
            capacity,
            buf: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append one vector, evicting the oldest entry at capacity.
    pub fn insert(&mut self, v: Vec<f32>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(v);
    }

    /// Arithmetic mean of the stored vectors, or `None` when empty.
    pub fn mean(&self, dim: usize) -> Option<Vec<f32>> {
        if self.buf.is_empty() {
            return None;
        }
        let mut acc = vec![0.0f32; dim];
        for v in &self.buf {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let inv = 1.0 / self.buf.len() as f32;
        for a in &mut acc {
            *a *= inv;
        }
        Some(acc)
    }
}

/// One memory bank per class.
#[derive(Debug, Clone)]
pub struct BankSet {
    pub dim: usize,
    banks: Vec<ClassMemoryBank>,
}

impl BankSet {
    pub fn new(n_class: usize, dim: usize, capacity: usize) -> Self {
        BankSet {
            dim,
            banks: (0..n_class)
                .map(|c| ClassMemoryBank::new(c, capacity))
                .collect(),
        }
    }

    pub fn n_class(&self) -> usize {
        self.banks.len()
    }

    pub fn bank(&self, class: usize) -> &ClassMemoryBank {
        &self.banks[class]
    }

    pub fn clear(&mut self) {
        let (n, cap) = (self.banks.len(), self.banks[0].capacity);
        self.banks = (0..n).map(|c| ClassMemoryBank::new(c, cap)).collect();
    }

    /// Insert each pixel's feature vector into the bank of its label, in
    /// row-major pixel order. Ignore-labelled pixels are skipped.
    pub fn insert_map(&mut self, reduced: &Tensor<f32>, labels: &LabelMap) -> Result<()> {
        if reduced.shape().len() != 3 || reduced.shape()[0] != self.dim {
            return Err(NpError::Shape(format!(
                "bank insert expects [{}, H, W], got {:?}",
                self.dim,
                reduced.shape()
            )));
        }
        let (h, w) = (reduced.shape()[1], reduced.shape()[2]);
        if labels.h != h || labels.w != w {
            return Err(NpError::Shape(format!(
                "bank insert labels {}x{} vs map {h}x{w}",
                labels.h, labels.w
            )));
        }
        let n = h * w;
        for pix in 0..n {
            let lab = labels.data[pix];
            if lab == IGNORE_LABEL {
                continue;
            }
            if lab as usize >= self.banks.len() {
                return Err(NpError::Data(format!(
                    "label {lab} out of range for {} classes",
                    self.banks.len()
                )));
            }
            let mut v = Vec::with_capacity(self.dim);
            for d in 0..self.dim {
                v.push(reduced.data()[d * n + pix]);
            }
            self.banks[lab as usize].insert(v);
        }
        Ok(())
    }

    /// Per-class means; unpopulated classes are flagged, never an error.
    pub fn compute_centers(&self) -> CenterSet {
        let mut centers = Vec::with_capacity(self.banks.len());
        let mut populated = Vec::with_capacity(self.banks.len());
        for b in &self.banks {
            match b.mean(self.dim) {
                Some(c) => {
                    centers.push(c);
                    populated.push(true);
                }
                None => {
                    centers.push(vec![0.0; self.dim]);
                    populated.push(false);
                }
            }
        }
        CenterSet {
            dim: self.dim,
            centers,
            populated,
        }
    }

    pub fn total_stored(&self) -> usize {
        self.banks.iter().map(|b| b.len()).sum()
    }
}

/// Per-class center vectors with population flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    pub dim: usize,
    pub centers: Vec<Vec<f32>>,
    pub populated: Vec<bool>,
}

impl CenterSet {
    pub fn empty(n_class: usize, dim: usize) -> Self {
        CenterSet {
            dim,
            centers: vec![vec![0.0; dim]; n_class],
            populated: vec![false; n_class],
        }
    }

    pub fn any_populated(&self) -> bool {
        self.populated.iter().any(|&p| p)
    }

    /// Populated centers in class order, cast to the kernel scalar.
    pub fn populated_centers<T: Real>(&self) -> Vec<Vec<T>> {
        self.centers
            .iter()
            .zip(&self.populated)
            .filter(|(_, &p)| p)
            .map(|(c, _)| c.iter().map(|&x| T::from_f32_exact(x)).collect())
            .collect()
    }
}

/// Per-image diagonal Gaussian over the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f32>,
    pub var: Vec<f32>,
}

impl LatentDistribution {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let floor = VAR_FLOOR as f32;
        if self.mu.len() != self.var.len() {
            return Err(NpError::Shape("latent mu/var length mismatch".into()));
        }
        if !self.mu.iter().chain(self.var.iter()).all(|v| v.is_finite()) {
            return Err(NpError::Numeric("non-finite latent distribution".into()));
        }
        if self.var.iter().any(|&v| v < floor * 0.999) {
            return Err(NpError::Numeric(format!(
                "latent variance below floor {floor}"
            )));
        }
        Ok(())
    }
}

/// Pooled features -> two-layer MLP trunk -> mean and variance heads.
/// The variance head is softplus + floor so variances stay positive.
#[derive(Debug, Clone)]
pub struct LatentMlp {
    pub trunk1: LinearLayer,
    pub trunk2: LinearLayer,
    pub mu_head: LinearLayer,
    pub var_head: LinearLayer,
}

pub struct LatentMlpVars {
    trunk1: LinearVars,
    trunk2: LinearVars,
    mu_head: LinearVars,
    var_head: LinearVars,
}

impl LatentMlp {
    /// Trunk width is tied to the latent dimension (2 * d_t).
    pub fn new(in_dim: usize, d_t: usize, rng: &mut StreamRng) -> Self {
        let hidden = 2 * d_t;
        LatentMlp {
            trunk1: LinearLayer::new(in_dim, hidden, rng),
            trunk2: LinearLayer::new(hidden, hidden, rng),
            mu_head: LinearLayer::new(hidden, d_t, rng),
            var_head: LinearLayer::new(hidden, d_t, rng),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.trunk1.params();
        p.extend(self.trunk2.params());
        p.extend(self.mu_head.params());
        p.extend(self.var_head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.trunk1.params_mut();
        p.extend(self.trunk2.params_mut());
        p.extend(self.mu_head.params_mut());
        p.extend(self.var_head.params_mut());
        p
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> LatentMlpVars {
        LatentMlpVars {
            trunk1: self.trunk1.bind(feed),
            trunk2: self.trunk2.bind(feed),
            mu_head: self.mu_head.bind(feed),
            var_head: self.var_head.bind(feed),
        }
    }
}

impl LatentMlpVars {
    /// Maps a pooled `[R]` vector to `(mu, var)` vars of the latent
    /// dimension, `var = softplus(raw) + VAR_FLOOR`.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, pooled: Var) -> Result<(Var, Var)> {
        let dim = tape.shape(pooled)[0];
        let row = tape.reshape(pooled, &[1, dim])?;
        let h = self.trunk1.forward(tape, row)?;
        let h = tape.relu(h)?;
        let h = self.trunk2.forward(tape, h)?;
        let h = tape.relu(h)?;
        let mu = self.mu_head.forward(tape, h)?;
        let raw = self.var_head.forward(tape, h)?;
        let var = tape.softplus(raw)?;
        let var = tape.add_scalar(var, real::<T>(VAR_FLOOR))?;
        let d_t = tape.shape(mu)[1];
        Ok((tape.reshape(mu, &[d_t])?, tape.reshape(var, &[d_t])?))
    }
}

/// Reparameterized draws: `z_t = mu + sqrt(var) * eps_t`. `eps` holds T
/// pre-drawn standard-normal vectors so identical streams replay exactly;
/// gradients flow to `mu` and `var`.
pub fn sample_latents<T: Real>(
    tape: &Tape<T>,
    mu: Var,
    var: Var,
    eps: &[Tensor<f32>],
) -> Result<Vec<Var>> {
    let sd = tape.sqrt(var)?;
    let mut out = Vec::with_capacity(eps.len());
    for e in eps {
        let scaled = tape.mul_const(sd, &e.cast::<T>())?;
        out.push(tape.add(mu, scaled)?);
    }
    Ok(out)
}

/// Draw the T standard-normal vectors consumed by [`sample_latents`].
pub fn draw_eps(t: usize, d_t: usize, rng: &mut StreamRng) -> Vec<Tensor<f32>> {
    (0..t)
        .map(|_| Tensor::from_vec((0..d_t).map(|_| rng.normal_f32()).collect()))
        .collect()
}

// ---- center snapshot persistence ----

const SNAPSHOT_MAGIC: &[u8; 4] = b"NPSS";
const SNAPSHOT_VERSION: u16 = 1;

/// Persisted per-class context/target centers; everything inference needs
/// once training is done.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSnapshot {
    pub r: u32,
    pub n_class: u32,
    pub d_c: u32,
    pub context: CenterSet,
    pub target: CenterSet,
}

impl CenterSnapshot {
    /// Exact byte length of the serialized form.
    pub fn byte_len(&self) -> usize {
        let k = self.n_class as usize;
        let r = self.r as usize;
        4 + 2 + 3 * 4 + 2 * (k * r * 4 + k)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&self.r.to_le_bytes())?;
        w.write_all(&self.n_class.to_le_bytes())?;
        w.write_all(&self.d_c.to_le_bytes())?;
        for set in [&self.context, &self.target] {
            for c in &set.centers {
                for &v in c {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            for &p in &set.populated {
                w.write_all(&[p as u8])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut rd: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(NpError::Format("not a center snapshot (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        rd.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != SNAPSHOT_VERSION {
            return Err(NpError::Format(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let mut b4 = [0u8; 4];
        rd.read_exact(&mut b4)?;
        let r = u32::from_le_bytes(b4);
        rd.read_exact(&mut b4)?;
        let n_class = u32::from_le_bytes(b4);
        rd.read_exact(&mut b4)?;
        let d_c = u32::from_le_bytes(b4);
        if r == 0 || n_class == 0 {
            return Err(NpError::Format("snapshot with zero extents".into()));
        }
        let mut read_set = |rd: &mut R| -> Result<CenterSet> {
            let mut centers = Vec::with_capacity(n_class as usize);
            for _ in 0..n_class {
                let mut c = Vec::with_capacity(r as usize);
                for _ in 0..r {
                    rd.read_exact(&mut b4)?;
                    c.push(f32::from_le_bytes(b4));
                }
                centers.push(c);
            }
            let mut populated = Vec::with_capacity(n_class as usize);
            let mut b1 = [0u8; 1];
            for _ in 0..n_class {
                rd.read_exact(&mut b1)?;
                populated.push(b1[0] != 0);
            }
            Ok(CenterSet {
                dim: r as usize,
                centers,
                populated,
            })
        };
        let context = read_set(&mut rd)?;
        let target = read_set(&mut rd)?;
        Ok(CenterSnapshot {
            r,
            n_class,
            d_c,
            context,
            target,
        })
    }
}
