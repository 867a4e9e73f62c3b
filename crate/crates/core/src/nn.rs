//! Parameter storage and the handful of layers the network is built from.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. A forward pass runs
//! against a [`Ctx`], which materializes each parameter as a leaf tensor on
//! first use and queues batch-norm running-statistic updates so the store
//! itself is only read during the pass.

use std::cell::RefCell;

use esm_tensor::{ConvSpec, DeconvSpec, Element, NormMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Running statistics are stored but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: String, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, shape, data, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (ParamId, &'a Param<T>)> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix))
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, data) in updates {
            self.params[id.0].data = data;
        }
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.data.iter_mut().for_each(|v| *v = T::zero());
            n += 1;
        }
        n
    }
}

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct Builder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Builder { store, rng, prefix: prefix.to_string() }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Kaiming-uniform (fan-in) weights: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn kaiming(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64c(self.rng.random_range(-bound..bound))).collect();
        let full = self.full_name(name);
        self.store.register(full, shape, data, true)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64, trainable: bool) -> ParamId {
        let n = shape.iter().product();
        let full = self.full_name(name);
        self.store.register(full, shape, vec![T::from_f64c(value); n], trainable)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-forward-pass parameter binding.
pub struct Ctx<'a, T: Element> {
    store: &'a ParamStore<T>,
    train: bool,
    track: bool,
    momentum: f64,
    eps: f64,
    leaves: RefCell<Vec<Option<Tensor<T>>>>,
    updates: RefCell<Vec<(ParamId, Vec<T>)>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    /// Training mode: batch statistics, gradients tracked.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true, true)
    }

    /// Inference mode: running statistics, no gradients.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false, false)
    }

    pub fn new(store: &'a ParamStore<T>, train: bool, track: bool) -> Self {
        Ctx {
            store,
            train,
            track,
            momentum: 0.1,
            eps: 1e-5,
            leaves: RefCell::new(vec![None; store.len()]),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_norm(mut self, momentum: f64, eps: f64) -> Self {
        self.momentum = momentum;
        self.eps = eps;
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `tensor` in place of the stored value of `id` for this pass.
    pub fn bind(&self, id: ParamId, tensor: Tensor<T>) {
        self.leaves.borrow_mut()[id.0] = Some(tensor);
    }

    pub fn param(&self, id: ParamId) -> Tensor<T> {
        if let Some(t) = &self.leaves.borrow()[id.0] {
            return t.clone();
        }
        let p = self.store.get(id);
        let t = if self.track && p.trainable {
            Tensor::param(p.data.clone(), &p.shape)
        } else {
            Tensor::new(p.data.clone(), &p.shape)
        }
        .expect("stored parameter shapes are valid");
        self.leaves.borrow_mut()[id.0] = Some(t.clone());
        t
    }

    pub fn buffer(&self, id: ParamId) -> &[T] {
        &self.store.get(id).data
    }

    fn norm_mode(&self) -> NormMode {
        if self.train {
            NormMode::Train { momentum: self.momentum }
        } else {
            NormMode::Eval
        }
    }

    /// Gradients of every trainable parameter touched in this pass.
    pub fn grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let t = t.as_ref()?;
                let g = t.grad()?;
                Some((ParamId(i), g))
            })
            .collect()
    }

    /// Running-statistic updates queued by batch norm in training mode.
    pub fn take_updates(&self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Identity,
}

impl Act {
    pub fn apply<T: Element>(self, x: Tensor<T>) -> Tensor<T> {
        match self {
            Act::Gelu => x.gelu(),
            Act::Identity => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        dims: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let mut shape = vec![c_out, c_in / groups];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let fan_in = (c_in / groups) * kernel.pow(dims as u32);
        let weight = b.kaiming("weight", shape, fan_in);
        let bias = bias.then(|| b.constant("bias", vec![c_out], 0.0, true));
        Conv { weight, bias, spec: ConvSpec::new(dims).stride(stride).padding(kernel / 2).groups(groups) }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let bias = self.bias.map(|id| ctx.param(id));
        Ok(x.conv(&ctx.param(self.weight), bias.as_ref(), self.spec)?)
    }
}

/// 3×3 (or 3×3×3) stride-2 transposed convolution whose output is cropped or
/// padded to an explicit target size.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dims: usize,
    pub stride: usize,
}

impl Deconv {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, dims: usize, c_in: usize, c_out: usize, stride: usize, bias: bool) -> Self {
        let mut shape = vec![c_in, c_out];
        shape.extend(std::iter::repeat_n(3, dims));
        let weight = b.kaiming("weight", shape, c_in * 3usize.pow(dims as u32));
        let bias = bias.then(|| b.constant("bias", vec![c_out], 0.0, true));
        Deconv { weight, bias, dims, stride }
    }

    /// Upsamples `x` so its spatial size equals `target`.
    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
        let spatial = &x.shape()[2..];
        if target.len() != self.dims || spatial.len() != self.dims {
            return Err(Error::Shape(format!("deconv target {target:?} for input {:?}", x.shape())));
        }
        let mut pads = Vec::with_capacity(self.dims);
        for (&t, &s) in target.iter().zip(spatial) {
            // k = 3, padding 1: base = (s - 1) * stride + 1
            let base = (s - 1) * self.stride + 1;
            if t < base || t - base >= self.stride {
                return Err(Error::Shape(format!("deconv cannot map spatial {spatial:?} to {target:?} at stride {}", self.stride)));
            }
            pads.push(t - base);
        }
        let spec = DeconvSpec::new(self.dims).stride(self.stride).padding(1).output_padding_axes(&pads);
        let bias = self.bias.map(|id| ctx.param(id));
        Ok(x.deconv(&ctx.param(self.weight), bias.as_ref(), spec)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        BatchNorm {
            gamma: b.constant("gamma", vec![channels], 1.0, true),
            beta: b.constant("beta", vec![channels], 0.0, true),
            running_mean: b.constant("running_mean", vec![channels], 0.0, false),
            running_var: b.constant("running_var", vec![channels], 1.0, false),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.batch_norm(
            &ctx.param(self.gamma),
            &ctx.param(self.beta),
            ctx.buffer(self.running_mean),
            ctx.buffer(self.running_var),
            ctx.norm_mode(),
            ctx.eps,
        )?;
        if let Some((m, v)) = out.running {
            let mut q = ctx.updates.borrow_mut();
            q.push((self.running_mean, m));
            q.push((self.running_var, v));
        }
        Ok(out.output)
    }
}

/// Convolution (or stride-2 deconvolution), optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
    pub act: Act,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        dims: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        act: Act,
    ) -> Self {
        let conv = Conv::new(&mut b.sub("conv"), dims, c_in, c_out, kernel, stride, 1, !norm);
        let norm = norm.then(|| BatchNorm::new(&mut b.sub("bn"), c_out));
        ConvBlock { conv, norm, act }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(ctx, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(ctx, &y)?;
        }
        Ok(self.act.apply(y))
    }
}

#[derive(Clone, Debug)]
pub struct DeconvBlock {
    pub deconv: Deconv,
    pub norm: Option<BatchNorm>,
    pub act: Act,
}

impl DeconvBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, dims: usize, c_in: usize, c_out: usize, norm: bool, act: Act) -> Self {
        let deconv = Deconv::new(&mut b.sub("deconv"), dims, c_in, c_out, 2, !norm);
        let norm = norm.then(|| BatchNorm::new(&mut b.sub("bn"), c_out));
        DeconvBlock { deconv, norm, act }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
        let mut y = self.deconv.forward(ctx, x, target)?;
        if let Some(n) = &self.norm {
            y = n.forward(ctx, &y)?;
        }
        Ok(self.act.apply(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_init_are_deterministic() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = seeded_rng(4);
            let mut b = Builder::new(&mut store, &mut rng, "net");
            let c = Conv::new(&mut b.sub("c0"), 2, 3, 4, 3, 1, 1, true);
            (store, c)
        };
        let (s1, c1) = build();
        let (s2, _) = build();
        assert_eq!(s1.get(c1.weight).name, "net.c0.weight");
        assert_eq!(s1.get(c1.bias.unwrap()).name, "net.c0.bias");
        assert_eq!(s1.get(c1.weight).data, s2.get(c1.weight).data);
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(s1.get(c1.weight).data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn deconv_hits_any_target_with_ceil_halving() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(1);
        let d = Deconv::new(&mut Builder::new(&mut store, &mut rng, "d"), 3, 2, 1, 2, true);
        let ctx = Ctx::eval(&store);
        for full in [[2usize, 4, 8], [1, 1, 2], [3, 5, 7]] {
            let half: Vec<usize> = full.iter().map(|&n| n.div_ceil(2)).collect();
            let mut shape = vec![1, 2];
            shape.extend(&half);
            let x = Tensor::<f64>::zeros(&shape).unwrap();
            let y = d.forward(&ctx, &x, &full).unwrap();
            assert_eq!(&y.shape()[2..], &full);
        }
    }

    #[test]
    fn batch_norm_queues_running_updates_only_in_training() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(1);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng, "bn"), 2);
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]).unwrap();
        let ctx = Ctx::train(&store);
        bn.forward(&ctx, &x).unwrap();
        let updates = ctx.take_updates();
        assert_eq!(updates.len(), 2);
        let ctx = Ctx::eval(&store);
        bn.forward(&ctx, &x).unwrap();
        assert!(ctx.take_updates().is_empty());
        store.apply_updates(updates);
        // channel 0 holds 1, 2, 5, 6 -> mean 3.5, scaled by momentum 0.1
        assert!((store.get(bn.running_mean).data[0] - 0.35).abs() < 1e-12);
    }
}
