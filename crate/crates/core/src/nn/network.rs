use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dsbn::{self, BnCache, DomainBranch, DomainId};
use super::layers::{self, Conv2d, Linear};
use super::tensor::{Matrix, Tensor4};
use super::Real;

/// Shape of the network: `{conv3x3 -> DSBN -> ReLU -> avgpool2}` per entry of
/// `blocks`, global average pooling, then `FC -> ReLU -> FC` producing one
/// logit per rating level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub blocks: Vec<usize>,
    pub hidden: usize,
    pub levels: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            blocks: vec![8, 16],
            hidden: 32,
            levels: 5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 || self.blocks.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "degenerate architecture {self:?}"
            )));
        }
        if self.blocks.contains(&0) {
            return Err(Error::InvalidArgument(
                "conv blocks need >= 1 channel".into(),
            ));
        }
        if self.levels < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 rating levels".into(),
            ));
        }
        Ok(())
    }

    /// Smallest input side length that survives all pooling stages.
    pub fn min_side(&self) -> usize {
        1 << self.blocks.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    /// Normalisation layer; `slot` indexes [`DomainBranch::layers`].
    Norm {
        slot: usize,
        channels: usize,
    },
    Relu,
    AvgPool,
    GlobalPool,
    Linear(Linear<T>),
}

/// Identifies one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    /// Weight of the conv or linear layer at this layer index.
    Weight(usize),
    Bias(usize),
    /// Affine scale of normalisation slot `.1` in the branch of `.0`.
    Gamma(DomainId, usize),
    Beta(DomainId, usize),
}

impl ParamId {
    pub fn domain(&self) -> Option<&DomainId> {
        match self {
            ParamId::Gamma(d, _) | ParamId::Beta(d, _) => Some(d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    SourceTrain,
    Adapt,
}

/// Set of trainable parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mask {
    ids: BTreeSet<ParamId>,
}

impl Mask {
    pub fn contains(&self, id: &ParamId) -> bool {
        self.ids.contains(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamId> {
        self.ids.iter()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            ids: self.ids.union(&other.ids).cloned().collect(),
        }
    }

    /// Number of scalar parameters covered by the mask.
    pub fn scalar_count<T: Real>(&self, net: &Network<T>) -> usize {
        self.ids
            .iter()
            .filter_map(|id| net.param(id))
            .map(<[T]>::len)
            .sum()
    }
}

impl FromIterator<ParamId> for Mask {
    fn from_iter<I: IntoIterator<Item = ParamId>>(iter: I) -> Self {
        Mask {
            ids: iter.into_iter().collect(),
        }
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
///
/// Only parameters of the domain that was forwarded appear; every other
/// branch has an implicit zero gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    domain: DomainId,
    entries: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn domain(&self) -> &DomainId {
        &self.domain
    }

    pub fn get(&self, id: &ParamId) -> Option<&[T]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &[T])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` entry-wise, inserting parameters not yet present.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (id, g) in &other.entries {
            match self.entries.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
                None => {
                    self.entries.insert(id.clone(), g.clone());
                }
            }
        }
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Vec<T>> {
        self.entries
    }
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Conv { in_dims: [usize; 4], cols: Vec<T> },
    Norm(BnCache<T>),
    Relu(Tensor4<T>),
    Pool([usize; 4]),
    Linear(Tensor4<T>),
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    revision: u64,
    domain: DomainId,
    mode: Mode,
    caches: Vec<LayerCache<T>>,
    logits: Matrix<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn domain(&self) -> &DomainId {
        &self.domain
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    /// Batch `(mean, variance)` per normalisation layer, in network order.
    pub fn batch_statistics(&self) -> Vec<(&[f64], &[f64])> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Norm(bc) => Some((bc.batch_mean.as_slice(), bc.batch_var.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// Post-activation values of every ReLU, in network order.
    pub fn relu_outputs(&self) -> Vec<&Tensor4<T>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Relu(y) => Some(y),
                _ => None,
            })
            .collect()
    }
}

/// Shared feature extractor and head plus one normalisation branch per domain.
#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: Architecture,
    layers: Vec<Layer<T>>,
    branches: BTreeMap<DomainId, DomainBranch<T>>,
    revision: u64,
}

impl<T: Real> Network<T> {
    /// He-initialised network with a single branch for `source`.
    pub fn new(arch: Architecture, source: DomainId, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |fan_in: usize, n: usize| -> Vec<T> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            (0..n)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect()
        };
        let mut layers = Vec::new();
        let mut ch = arch.in_channels;
        for (slot, &out) in arch.blocks.iter().enumerate() {
            layers.push(Layer::Conv(Conv2d {
                in_channels: ch,
                out_channels: out,
                weight: draw(ch * 9, out * ch * 9),
                bias: vec![T::zero(); out],
            }));
            layers.push(Layer::Norm {
                slot,
                channels: out,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::AvgPool);
            ch = out;
        }
        layers.push(Layer::GlobalPool);
        layers.push(Layer::Linear(Linear {
            in_features: ch,
            out_features: arch.hidden,
            weight: draw(ch, arch.hidden * ch),
            bias: vec![T::zero(); arch.hidden],
        }));
        layers.push(Layer::Relu);
        layers.push(Layer::Linear(Linear {
            in_features: arch.hidden,
            out_features: arch.levels,
            weight: draw(arch.hidden, arch.levels * arch.hidden),
            bias: vec![T::zero(); arch.levels],
        }));
        let mut branches = BTreeMap::new();
        branches.insert(source, DomainBranch::new(&arch.blocks));
        Ok(Self {
            arch,
            layers,
            branches,
            revision: 0,
        })
    }

    /// Assembles a network from explicit parts (checkpoint loading).
    pub fn from_parts(
        arch: Architecture,
        layers: Vec<Layer<T>>,
        branches: BTreeMap<DomainId, DomainBranch<T>>,
    ) -> Result<Self> {
        arch.validate()?;
        let template = Network::<T>::new(arch.clone(), DomainId::new("_"), 0)?;
        if template.layers.len() != layers.len() {
            return Err(Error::Shape(
                "layer count does not match architecture".into(),
            ));
        }
        for (a, b) in template.layers.iter().zip(&layers) {
            let ok = match (a, b) {
                (Layer::Conv(x), Layer::Conv(y)) => {
                    x.in_channels == y.in_channels
                        && x.out_channels == y.out_channels
                        && y.weight.len() == x.weight.len()
                        && y.bias.len() == x.bias.len()
                }
                (Layer::Linear(x), Layer::Linear(y)) => {
                    x.in_features == y.in_features
                        && x.out_features == y.out_features
                        && y.weight.len() == x.weight.len()
                        && y.bias.len() == x.bias.len()
                }
                (x, y) => x == y,
            };
            if !ok {
                return Err(Error::Shape(
                    "layer shapes do not match architecture".into(),
                ));
            }
        }
        for (id, br) in &branches {
            let chans: Vec<usize> = br.layers.iter().map(|l| l.channels()).collect();
            if chans != arch.blocks
                || br.layers.iter().any(|l| {
                    l.beta.len() != l.channels()
                        || l.running_mean.len() != l.channels()
                        || l.running_var.len() != l.channels()
                })
            {
                return Err(Error::Shape(format!(
                    "branch `{id}` does not match architecture"
                )));
            }
        }
        Ok(Self {
            arch,
            layers,
            branches,
            revision: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainId> {
        self.branches.keys()
    }

    pub fn branch(&self, domain: &DomainId) -> Option<&DomainBranch<T>> {
        self.branches.get(domain)
    }

    pub fn branch_mut(&mut self, domain: &DomainId) -> Option<&mut DomainBranch<T>> {
        self.revision += 1;
        self.branches.get_mut(domain)
    }

    /// Replaces the state of an existing branch.
    pub fn set_branch(&mut self, domain: &DomainId, branch: DomainBranch<T>) -> Result<()> {
        let slot = self
            .branches
            .get_mut(domain)
            .ok_or_else(|| Error::MissingDomain(domain.to_string()))?;
        if branch.layers.len() != slot.layers.len() {
            return Err(Error::Shape("branch layer count mismatch".into()));
        }
        *slot = branch;
        self.revision += 1;
        Ok(())
    }

    /// Registers `new_domain` with a copy of `source`'s branch.
    pub fn add_domain_branch(&mut self, new_domain: DomainId, source: &DomainId) -> Result<()> {
        if self.branches.contains_key(&new_domain) {
            return Err(Error::DomainExists(new_domain.to_string()));
        }
        let copy = self
            .branches
            .get(source)
            .ok_or_else(|| Error::MissingDomain(source.to_string()))?
            .clone();
        self.branches.insert(new_domain, copy);
        self.revision += 1;
        Ok(())
    }

    pub fn reset_branch_statistics(&mut self, domain: &DomainId) -> Result<()> {
        self.branch_mut(domain)
            .ok_or_else(|| Error::MissingDomain(domain.to_string()))?
            .reset_statistics();
        Ok(())
    }

    /// Total normalised channels across layers.
    pub fn norm_channel_count(&self) -> usize {
        self.arch.blocks.iter().sum()
    }

    /// All parameter tensors in declaration order: shared layers first, then
    /// each branch's affine parameters.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.shared_param_ids();
        for d in self.branches.keys() {
            for slot in 0..self.arch.blocks.len() {
                ids.push(ParamId::Gamma(d.clone(), slot));
                ids.push(ParamId::Beta(d.clone(), slot));
            }
        }
        ids
    }

    fn shared_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, Layer::Conv(_) | Layer::Linear(_)) {
                ids.push(ParamId::Weight(i));
                ids.push(ParamId::Bias(i));
            }
        }
        ids
    }

    pub fn param(&self, id: &ParamId) -> Option<&[T]> {
        match id {
            ParamId::Weight(i) => match self.layers.get(*i)? {
                Layer::Conv(c) => Some(&c.weight),
                Layer::Linear(l) => Some(&l.weight),
                _ => None,
            },
            ParamId::Bias(i) => match self.layers.get(*i)? {
                Layer::Conv(c) => Some(&c.bias),
                Layer::Linear(l) => Some(&l.bias),
                _ => None,
            },
            ParamId::Gamma(d, s) => Some(&self.branches.get(d)?.layers.get(*s)?.gamma),
            ParamId::Beta(d, s) => Some(&self.branches.get(d)?.layers.get(*s)?.beta),
        }
    }

    /// Mutable access; invalidates outstanding forward traces.
    pub fn param_mut(&mut self, id: &ParamId) -> Option<&mut [T]> {
        self.revision += 1;
        match id {
            ParamId::Weight(i) => match self.layers.get_mut(*i)? {
                Layer::Conv(c) => Some(&mut c.weight),
                Layer::Linear(l) => Some(&mut l.weight),
                _ => None,
            },
            ParamId::Bias(i) => match self.layers.get_mut(*i)? {
                Layer::Conv(c) => Some(&mut c.bias),
                Layer::Linear(l) => Some(&mut l.bias),
                _ => None,
            },
            ParamId::Gamma(d, s) => Some(&mut self.branches.get_mut(d)?.layers.get_mut(*s)?.gamma),
            ParamId::Beta(d, s) => Some(&mut self.branches.get_mut(d)?.layers.get_mut(*s)?.beta),
        }
    }

    /// Trainable parameters for a phase: everything shared plus the source
    /// branch when training on the source, only the branch's affine
    /// parameters when adapting.
    pub fn freeze_mask(&self, phase: Phase, domain: &DomainId) -> Result<Mask> {
        if !self.branches.contains_key(domain) {
            return Err(Error::MissingDomain(domain.to_string()));
        }
        let mut ids = match phase {
            Phase::SourceTrain => self.shared_param_ids(),
            Phase::Adapt => Vec::new(),
        };
        for slot in 0..self.arch.blocks.len() {
            ids.push(ParamId::Gamma(domain.clone(), slot));
            ids.push(ParamId::Beta(domain.clone(), slot));
        }
        Ok(ids.into_iter().collect())
    }

    /// Hash over shared parameters and every branch not listed in `exclude`
    /// (affine parameters and running statistics, bit patterns).
    pub fn fingerprint(&self, exclude: &[DomainId]) -> u64 {
        let mut h = DefaultHasher::new();
        let mut put = |xs: &[T]| {
            xs.len().hash(&mut h);
            for x in xs {
                x.as_f64().to_bits().hash(&mut h);
            }
        };
        for id in self.shared_param_ids() {
            put(self.param(&id).expect("shared id resolves"));
        }
        for (d, br) in &self.branches {
            if exclude.contains(d) {
                continue;
            }
            for l in &br.layers {
                put(&l.gamma);
                put(&l.beta);
                put(&l.running_mean);
                put(&l.running_var);
            }
            put(&[br.epsilon, br.ema_alpha]);
        }
        h.finish()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.arch.in_channels
            )));
        }
        let min = self.arch.min_side();
        if h < min || w < min {
            return Err(Error::Shape(format!(
                "input {h}x{w} is smaller than the minimum {min}x{min}"
            )));
        }
        Ok(())
    }

    fn to_logits(&self, h: Tensor4<T>) -> Matrix<T> {
        let b = h.batch();
        Matrix::new(b, self.arch.levels, h.into_data()).expect("head emits one logit per level")
    }

    /// Dispatches on `mode`; evaluation traces cannot be used for backward.
    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        domain: &DomainId,
        mode: Mode,
    ) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        match mode {
            Mode::Train => self.forward_train(x, domain),
            Mode::Eval => {
                let logits = self.forward_eval(x, domain)?;
                let trace = ForwardTrace {
                    revision: self.revision,
                    domain: domain.clone(),
                    mode,
                    caches: Vec::new(),
                    logits: logits.clone(),
                };
                Ok((logits, trace))
            }
        }
    }

    /// Training-mode forward: normalises with batch statistics and updates the
    /// branch's running statistics.
    pub fn forward_train(
        &mut self,
        x: &Tensor4<T>,
        domain: &DomainId,
    ) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        self.check_input(x)?;
        let branch = self
            .branches
            .get_mut(domain)
            .ok_or_else(|| Error::MissingDomain(domain.to_string()))?;
        let (eps, alpha) = (branch.epsilon, branch.ema_alpha);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => {
                    let (y, cols) = c.forward(&h);
                    caches.push(LayerCache::Conv {
                        in_dims: h.dims(),
                        cols,
                    });
                    y
                }
                Layer::Norm { slot, .. } => {
                    let (y, bc) = dsbn::normalize_train(&h, &mut branch.layers[*slot], eps, alpha);
                    caches.push(LayerCache::Norm(bc));
                    y
                }
                Layer::Relu => {
                    let y = layers::relu_forward(&h);
                    caches.push(LayerCache::Relu(y.clone()));
                    y
                }
                Layer::AvgPool => {
                    caches.push(LayerCache::Pool(h.dims()));
                    layers::avg_pool_forward(&h)
                }
                Layer::GlobalPool => {
                    caches.push(LayerCache::Pool(h.dims()));
                    layers::global_pool_forward(&h)
                }
                Layer::Linear(l) => {
                    let y = l.forward(&h);
                    caches.push(LayerCache::Linear(h));
                    y
                }
            };
        }
        let logits = self.to_logits(h);
        let trace = ForwardTrace {
            revision: self.revision,
            domain: domain.clone(),
            mode: Mode::Train,
            caches,
            logits: logits.clone(),
        };
        Ok((logits, trace))
    }

    /// Evaluation-mode forward with running statistics; no state changes.
    pub fn forward_eval(&self, x: &Tensor4<T>, domain: &DomainId) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let branch = self
            .branches
            .get(domain)
            .ok_or_else(|| Error::MissingDomain(domain.to_string()))?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h).0,
                Layer::Norm { slot, .. } => {
                    dsbn::normalize_eval(&h, &branch.layers[*slot], branch.epsilon, domain)?
                }
                Layer::Relu => layers::relu_forward(&h),
                Layer::AvgPool => layers::avg_pool_forward(&h),
                Layer::GlobalPool => layers::global_pool_forward(&h),
                Layer::Linear(l) => l.forward(&h),
            };
        }
        Ok(self.to_logits(h))
    }

    /// Per-channel mean of the activations entering the first normalisation
    /// layer (independent of the branch).
    pub fn first_norm_input_means(&self, x: &Tensor4<T>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => h = c.forward(&h).0,
                Layer::Norm { .. } => return Ok(dsbn::channel_statistics(&h).0),
                _ => unreachable!("a convolution precedes the first normalisation layer"),
            }
        }
        unreachable!("architecture always contains a normalisation layer")
    }

    /// Gradients of `sum(logits * grad_logits)` with respect to every
    /// parameter used by the forward pass.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Matrix<T>,
    ) -> Result<Gradients<T>> {
        self.backward_filtered(trace, grad_logits, |_| true)
    }

    /// As [`Network::backward`], restricted to the parameters in `mask`;
    /// layers below the lowest masked parameter are skipped.
    pub fn backward_masked(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Matrix<T>,
        mask: &Mask,
    ) -> Result<Gradients<T>> {
        self.backward_filtered(trace, grad_logits, |id| mask.contains(id))
    }

    fn backward_filtered(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Matrix<T>,
        want: impl Fn(&ParamId) -> bool,
    ) -> Result<Gradients<T>> {
        if trace.mode != Mode::Train {
            return Err(Error::TraceMismatch(
                "backward needs a training-mode trace".into(),
            ));
        }
        if trace.revision != self.revision {
            return Err(Error::TraceMismatch(
                "parameters changed since the forward pass".into(),
            ));
        }
        if trace.caches.len() != self.layers.len() {
            return Err(Error::TraceMismatch("trace layer count differs".into()));
        }
        let branch = self
            .branches
            .get(&trace.domain)
            .ok_or_else(|| Error::MissingDomain(trace.domain.to_string()))?;
        let b = trace.logits.rows();
        if grad_logits.rows() != b || grad_logits.cols() != self.arch.levels {
            return Err(Error::Shape(format!(
                "grad_logits is {}x{}, expected {b}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                self.arch.levels
            )));
        }

        let domain = &trace.domain;
        let wants_layer = |i: usize| -> bool {
            match &self.layers[i] {
                Layer::Conv(_) | Layer::Linear(_) => {
                    want(&ParamId::Weight(i)) || want(&ParamId::Bias(i))
                }
                Layer::Norm { slot, .. } => {
                    want(&ParamId::Gamma(domain.clone(), *slot))
                        || want(&ParamId::Beta(domain.clone(), *slot))
                }
                _ => false,
            }
        };
        let lowest = match (0..self.layers.len()).find(|i| wants_layer(*i)) {
            Some(i) => i,
            None => {
                return Ok(Gradients {
                    domain: domain.clone(),
                    entries: BTreeMap::new(),
                })
            }
        };

        let mut entries = BTreeMap::new();
        let mut dy = Tensor4::new([b, self.arch.levels, 1, 1], grad_logits.data().to_vec())?;
        for i in (lowest..self.layers.len()).rev() {
            let want_dx = i > lowest;
            let next = match (&self.layers[i], &trace.caches[i]) {
                (Layer::Conv(c), LayerCache::Conv { in_dims, cols }) => {
                    let (ws, bs) = (want(&ParamId::Weight(i)), want(&ParamId::Bias(i)));
                    let mut dw = vec![T::zero(); c.weight.len()];
                    let mut db = vec![T::zero(); c.bias.len()];
                    let dx = c.backward(
                        *in_dims,
                        cols,
                        &dy,
                        (ws || bs).then_some((&mut dw, &mut db)),
                        want_dx,
                    );
                    if ws {
                        entries.insert(ParamId::Weight(i), dw);
                    }
                    if bs {
                        entries.insert(ParamId::Bias(i), db);
                    }
                    dx
                }
                (Layer::Linear(l), LayerCache::Linear(x)) => {
                    let (ws, bs) = (want(&ParamId::Weight(i)), want(&ParamId::Bias(i)));
                    let mut dw = vec![T::zero(); l.weight.len()];
                    let mut db = vec![T::zero(); l.bias.len()];
                    let dx = l.backward(x, &dy, (ws || bs).then_some((&mut dw, &mut db)), want_dx);
                    if ws {
                        entries.insert(ParamId::Weight(i), dw);
                    }
                    if bs {
                        entries.insert(ParamId::Bias(i), db);
                    }
                    dx
                }
                (Layer::Norm { slot, channels }, LayerCache::Norm(cache)) => {
                    let gid = ParamId::Gamma(domain.clone(), *slot);
                    let bid = ParamId::Beta(domain.clone(), *slot);
                    let (gs, bs) = (want(&gid), want(&bid));
                    let mut dg = vec![T::zero(); *channels];
                    let mut dbeta = vec![T::zero(); *channels];
                    let dx = dsbn::normalize_backward(
                        cache,
                        &branch.layers[*slot].gamma,
                        &dy,
                        (gs || bs).then_some((&mut dg, &mut dbeta)),
                    );
                    if gs {
                        entries.insert(gid, dg);
                    }
                    if bs {
                        entries.insert(bid, dbeta);
                    }
                    Some(dx)
                }
                (Layer::Relu, LayerCache::Relu(y)) => Some(layers::relu_backward(y, &dy)),
                (Layer::AvgPool, LayerCache::Pool(d)) => Some(layers::avg_pool_backward(*d, &dy)),
                (Layer::GlobalPool, LayerCache::Pool(d)) => {
                    Some(layers::global_pool_backward(*d, &dy))
                }
                _ => {
                    return Err(Error::TraceMismatch(format!(
                        "cache kind differs at layer {i}"
                    )))
                }
            };
            if !want_dx {
                break;
            }
            dy = next.expect("input gradient requested");
        }
        Ok(Gradients {
            domain: domain.clone(),
            entries,
        })
    }

    /// Converts every parameter and statistic to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let cv = |xs: &[T]| -> Vec<U> { xs.iter().map(|x| U::from_f64(x.as_f64())).collect() };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    weight: cv(&c.weight),
                    bias: cv(&c.bias),
                }),
                Layer::Linear(c) => Layer::Linear(Linear {
                    in_features: c.in_features,
                    out_features: c.out_features,
                    weight: cv(&c.weight),
                    bias: cv(&c.bias),
                }),
                Layer::Norm { slot, channels } => Layer::Norm {
                    slot: *slot,
                    channels: *channels,
                },
                Layer::Relu => Layer::Relu,
                Layer::AvgPool => Layer::AvgPool,
                Layer::GlobalPool => Layer::GlobalPool,
            })
            .collect();
        let branches = self
            .branches
            .iter()
            .map(|(d, br)| {
                (
                    d.clone(),
                    DomainBranch {
                        epsilon: U::from_f64(br.epsilon.as_f64()),
                        ema_alpha: U::from_f64(br.ema_alpha.as_f64()),
                        layers: br
                            .layers
                            .iter()
                            .map(|s| dsbn::BnState {
                                gamma: cv(&s.gamma),
                                beta: cv(&s.beta),
                                running_mean: cv(&s.running_mean),
                                running_var: cv(&s.running_var),
                                initialized: s.initialized,
                            })
                            .collect(),
                    },
                )
            })
            .collect();
        Network {
            arch: self.arch.clone(),
            layers,
            branches,
            revision: 0,
        }
    }
}
