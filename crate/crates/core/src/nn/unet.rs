//! One U-shaped fully convolutional half of the W-Net.

use super::layers::{
    concat_channels, split_channels, Batch, BatchNorm, Conv3x3, Depthwise, Dropout, MaxPool,
    Pointwise, Relu, TensorSlot, UpConv,
};
use super::real::Real;
use crate::tensor::Rng;

/// A 3x3 convolution, dense or depthwise-separable.
#[derive(Clone, Debug)]
pub enum ConvBlock<T> {
    Dense(Conv3x3<T>),
    Separable(Depthwise<T>, Pointwise<T>),
}

impl<T: Real> ConvBlock<T> {
    pub fn new(c_in: usize, c_out: usize, separable: bool, rng: &mut Rng) -> Self {
        if separable {
            ConvBlock::Separable(Depthwise::new(c_in, rng), Pointwise::new(c_in, c_out, rng))
        } else {
            ConvBlock::Dense(Conv3x3::new(c_in, c_out, rng))
        }
    }

    /// Kernel weights, biases excluded.
    pub fn weight_count(&self) -> usize {
        match self {
            ConvBlock::Dense(c) => c.weight_count(),
            ConvBlock::Separable(d, p) => d.c * 9 + p.weight_count(),
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, ConvBlock::Separable(..))
    }

    fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        match self {
            ConvBlock::Dense(c) => c.forward(&x),
            ConvBlock::Separable(d, p) => {
                let mid = d.forward(x);
                p.forward(mid)
            }
        }
    }

    fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        match self {
            ConvBlock::Dense(c) => c.backward(dy),
            ConvBlock::Separable(d, p) => {
                let mid = p.backward(dy);
                d.backward(&mid)
            }
        }
    }

    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        match self {
            ConvBlock::Dense(c) => c.slots(prefix, out),
            ConvBlock::Separable(d, p) => {
                d.slots(&format!("{prefix}.dw"), out);
                p.slots(&format!("{prefix}.pw"), out);
            }
        }
    }
}

/// conv -> ReLU -> BN -> conv -> ReLU -> BN -> dropout.
#[derive(Clone, Debug)]
pub struct Module<T> {
    pub conv_a: ConvBlock<T>,
    pub conv_b: ConvBlock<T>,
    relu_a: Relu,
    relu_b: Relu,
    pub bn_a: Option<BatchNorm<T>>,
    pub bn_b: Option<BatchNorm<T>>,
    dropout: Dropout,
}

impl<T: Real> Module<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        separable: bool,
        batch_norm: bool,
        dropout_p: f64,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv_a: ConvBlock::new(c_in, c_out, separable, rng),
            conv_b: ConvBlock::new(c_out, c_out, separable, rng),
            relu_a: Relu::default(),
            relu_b: Relu::default(),
            bn_a: batch_norm.then(|| BatchNorm::new(c_out)),
            bn_b: batch_norm.then(|| BatchNorm::new(c_out)),
            dropout: Dropout::new(dropout_p),
        }
    }

    pub fn forward(&mut self, x: Batch<T>, rng: Option<&mut Rng>) -> Batch<T> {
        let training = rng.is_some();
        let mut h = self.conv_a.forward(x);
        h = self.relu_a.forward(h);
        if let Some(bn) = &mut self.bn_a {
            h = bn.forward(h, training);
        }
        h = self.conv_b.forward(h);
        h = self.relu_b.forward(h);
        if let Some(bn) = &mut self.bn_b {
            h = bn.forward(h, training);
        }
        self.dropout.forward(h, rng)
    }

    pub fn backward(&mut self, dy: Batch<T>) -> Batch<T> {
        let mut g = self.dropout.backward(dy);
        if let Some(bn) = &mut self.bn_b {
            g = bn.backward(g);
        }
        g = self.relu_b.backward(g);
        g = self.conv_b.backward(&g);
        if let Some(bn) = &mut self.bn_a {
            g = bn.backward(g);
        }
        g = self.relu_a.backward(g);
        self.conv_a.backward(&g)
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        self.conv_a.slots(&format!("{prefix}.conv_a"), out);
        if let Some(bn) = &mut self.bn_a {
            bn.slots(&format!("{prefix}.bn_a"), out);
        }
        self.conv_b.slots(&format!("{prefix}.conv_b"), out);
        if let Some(bn) = &mut self.bn_b {
            bn.slots(&format!("{prefix}.bn_b"), out);
        }
    }
}

/// Shape of a single U.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetShape {
    pub c_in: usize,
    pub c_out: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Separable convolutions in every module except the first and last.
    pub separable: bool,
    pub batch_norm: bool,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub shape: UNetShape,
    pub down: Vec<Module<T>>,
    pools: Vec<MaxPool>,
    pub ups: Vec<UpConv<T>>,
    /// Expansive modules, deepest first.
    pub up_modules: Vec<Module<T>>,
    pub head: Pointwise<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(shape: UNetShape, dropout_p: f64, rng: &mut Rng) -> Self {
        let ch = |l: usize| shape.base_channels << l;
        let d = shape.depth;
        let mut down = Vec::with_capacity(d + 1);
        for l in 0..=d {
            let c_in = if l == 0 { shape.c_in } else { ch(l - 1) };
            let sep = shape.separable && l != 0;
            down.push(Module::new(c_in, ch(l), sep, shape.batch_norm, dropout_p, rng));
        }
        let mut ups = Vec::with_capacity(d);
        let mut up_modules = Vec::with_capacity(d);
        for l in (0..d).rev() {
            ups.push(UpConv::new(ch(l + 1), ch(l), rng));
            let sep = shape.separable && l != 0;
            up_modules.push(Module::new(
                2 * ch(l),
                ch(l),
                sep,
                shape.batch_norm,
                dropout_p,
                rng,
            ));
        }
        Self {
            shape,
            down,
            pools: vec![MaxPool::default(); d],
            ups,
            up_modules,
            head: Pointwise::new(ch(0), shape.c_out, rng),
        }
    }

    /// All modules in data-flow order.
    pub fn modules(&self) -> impl Iterator<Item = &Module<T>> {
        self.down.iter().chain(self.up_modules.iter())
    }

    /// Number of convolution layers, counting a separable pair as one.
    pub fn conv_layer_count(&self) -> usize {
        2 * (self.down.len() + self.up_modules.len()) + self.ups.len() + 1
    }

    /// `rng` selects training mode (batch statistics and dropout).
    pub fn forward(&mut self, x: Batch<T>, mut rng: Option<&mut Rng>) -> Batch<T> {
        let d = self.shape.depth;
        let mut skips = Vec::with_capacity(d);
        let mut h = x;
        for l in 0..=d {
            h = self.down[l].forward(h, rng.as_deref_mut());
            if l < d {
                let pooled = self.pools[l].forward(&h);
                skips.push(h);
                h = pooled;
            }
        }
        for i in 0..d {
            let up = self.ups[i].forward(h);
            let skip = skips.pop().expect("one skip per level");
            h = self.up_modules[i].forward(concat_channels(&up, &skip), rng.as_deref_mut());
        }
        self.head.forward(h)
    }

    /// Backward through the whole U; returns the input gradient.
    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let d = self.shape.depth;
        let mut g = self.head.backward(dy);
        let mut skip_grads = Vec::with_capacity(d);
        for i in (0..d).rev() {
            let gc = self.up_modules[i].backward(g);
            let c_up = self.ups[i].c_out;
            let (g_up, g_skip) = split_channels(&gc, c_up);
            skip_grads.push(g_skip);
            g = self.ups[i].backward(&g_up);
        }
        // expansive modules run deepest first, so skip_grads[l] is level l
        for l in (0..=d).rev() {
            if l < d {
                g = self.pools[l].backward(&g);
                let s = &skip_grads[l];
                for (a, b) in g.data.iter_mut().zip(&s.data) {
                    *a += *b;
                }
            }
            g = self.down[l].backward(g);
        }
        g
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        for (l, m) in self.down.iter_mut().enumerate() {
            m.slots(&format!("{prefix}.down{l}"), out);
        }
        let d = self.shape.depth;
        for (i, (u, m)) in self.ups.iter_mut().zip(self.up_modules.iter_mut()).enumerate() {
            let level = d - 1 - i;
            u.slots(&format!("{prefix}.upconv{level}"), out);
            m.slots(&format!("{prefix}.up{level}"), out);
        }
        self.head.slots(&format!("{prefix}.head"), out);
    }
}
