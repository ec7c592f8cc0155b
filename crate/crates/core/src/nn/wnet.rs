//! The W-Net: an encoder U producing a K-way soft segmentation and a
//! decoder U reconstructing the image from it.

use super::layers::{softmax_backward, softmax_channels, Batch, TensorSlot};
use super::real::Real;
use super::unet::{UNet, UNetShape};
use crate::error::{Error, Result};
use crate::ncut::SoftSegmentation;
use crate::tensor::{ImageTensor, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WNetConfig {
    pub input_size: usize,
    pub channels: usize,
    pub k: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub separable: bool,
    pub dropout_p: f64,
    pub batch_norm: bool,
}

impl Default for WNetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: 3,
            k: 8,
            depth: 3,
            base_channels: 8,
            separable: true,
            dropout_p: 0.65,
            batch_norm: true,
        }
    }
}

impl WNetConfig {
    /// The full-size architecture: 224 px input, four pooling levels,
    /// 64 channels at the top.
    pub fn full_size() -> Self {
        Self {
            input_size: 224,
            depth: 4,
            base_channels: 64,
            k: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.k == 0 || self.channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("k, channels and base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Modules across both U's.
    pub fn module_count(&self) -> usize {
        2 * (2 * self.depth + 1)
    }

    fn encoder_shape(&self) -> UNetShape {
        UNetShape {
            c_in: self.channels,
            c_out: self.k,
            depth: self.depth,
            base_channels: self.base_channels,
            separable: self.separable,
            batch_norm: self.batch_norm,
        }
    }

    fn decoder_shape(&self) -> UNetShape {
        UNetShape {
            c_in: self.k,
            c_out: self.channels,
            ..self.encoder_shape()
        }
    }
}

/// Which half of the network a stored tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct WNet<T> {
    pub config: WNetConfig,
    pub encoder: UNet<T>,
    pub decoder: UNet<T>,
    probs: Option<Batch<T>>,
}

impl<T: Real> WNet<T> {
    pub fn build(config: WNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            encoder: UNet::new(config.encoder_shape(), config.dropout_p, rng),
            decoder: UNet::new(config.decoder_shape(), config.dropout_p, rng),
            probs: None,
        })
    }

    pub fn conv_layer_count(&self) -> usize {
        self.encoder.conv_layer_count() + self.decoder.conv_layer_count()
    }

    fn check_input(&self, x: &Batch<T>, c: usize) -> Result<()> {
        let s = self.config.input_size;
        if x.c != c || x.h != s || x.w != s || x.n == 0 {
            return Err(Error::Shape(format!(
                "network expects N x {c} x {s} x {s}, got {} x {} x {} x {}",
                x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Encoder pass returning per-pixel class probabilities. `rng` selects
    /// training mode.
    pub fn encode(&mut self, x: &Batch<T>, rng: Option<&mut Rng>) -> Result<Batch<T>> {
        self.check_input(x, self.config.channels)?;
        let logits = self.encoder.forward(x.clone(), rng);
        let p = softmax_channels(&logits);
        self.probs = Some(p.clone());
        Ok(p)
    }

    /// Accumulates encoder gradients given `dL/dp` for the last [`encode`].
    ///
    /// [`encode`]: Self::encode
    pub fn encode_backward(&mut self, dp: &Batch<T>) {
        let p = self.probs.as_ref().expect("encode before encode_backward");
        let dlogits = softmax_backward(p, dp);
        self.encoder.backward(&dlogits);
    }

    pub fn decode(&mut self, p: &Batch<T>, rng: Option<&mut Rng>) -> Result<Batch<T>> {
        self.check_input(p, self.config.k)?;
        Ok(self.decoder.forward(p.clone(), rng))
    }

    /// Accumulates decoder gradients and returns `dL/dp`.
    pub fn decode_backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        self.decoder.backward(dy)
    }

    /// Inference-mode soft segmentation of a single image.
    pub fn forward_encode(&mut self, img: &ImageTensor) -> Result<SoftSegmentation> {
        let x = image_to_batch(img);
        let p = self.encode(&x, None)?;
        batch_to_soft(&p)
    }

    /// Inference-mode reconstruction from a soft segmentation.
    pub fn forward_decode(&mut self, p: &SoftSegmentation) -> Result<ImageTensor> {
        let x = soft_to_batch(p);
        let y = self.decode(&x, None)?;
        Ok(batch_to_image(&y, 0))
    }

    /// Every stored tensor, encoder first, in a fixed order.
    pub fn slots(&mut self) -> Vec<(Half, TensorSlot<'_, T>)> {
        let mut enc = Vec::new();
        self.encoder.slots("enc", &mut enc);
        let mut dec = Vec::new();
        self.decoder.slots("dec", &mut dec);
        enc.into_iter()
            .map(|s| (Half::Encoder, s))
            .chain(dec.into_iter().map(|s| (Half::Decoder, s)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, s) in self.slots() {
            if let Some(g) = s.grad {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Plain SGD on the trainable tensors of the selected halves.
    pub fn sgd_step(&mut self, lr: f64, encoder: bool, decoder: bool) {
        let lr = T::from_f64(lr);
        for (half, s) in self.slots() {
            let on = match half {
                Half::Encoder => encoder,
                Half::Decoder => decoder,
            };
            if let (true, Some(g)) = (on, s.grad) {
                for (v, d) in s.value.iter_mut().zip(g.iter()) {
                    *v -= lr * *d;
                }
            }
        }
    }

    /// Named copies of every stored tensor in `f64`.
    pub fn export(&mut self) -> Vec<(String, Vec<f64>)> {
        self.slots()
            .into_iter()
            .map(|(_, s)| (s.name, s.value.iter().map(|v| v.as_f64()).collect()))
            .collect()
    }

    /// Overwrites every stored tensor; names and lengths must match exactly.
    pub fn import(&mut self, tensors: &[(String, Vec<f64>)]) -> Result<()> {
        let slots = self.slots();
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((_, slot), (name, data)) in slots.into_iter().zip(tensors) {
            if slot.name != *name || slot.value.len() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} ({}) does not match {} ({})",
                    data.len(),
                    slot.name,
                    slot.value.len()
                )));
            }
            for (dst, src) in slot.value.iter_mut().zip(data) {
                *dst = T::from_f64(*src);
            }
        }
        Ok(())
    }

    /// The same network in another precision.
    pub fn cast<U: Real>(&mut self) -> WNet<U> {
        let mut other = WNet::<U>::build(self.config, &mut Rng::new(0)).expect("validated config");
        other
            .import(&self.export())
            .expect("identical layout");
        other
    }
}

/// `H x W x C` image to a `1 x C x H x W` batch.
pub fn image_to_batch<T: Real>(img: &ImageTensor) -> Batch<T> {
    images_to_batch(std::slice::from_ref(img))
}

pub fn images_to_batch<T: Real>(imgs: &[ImageTensor]) -> Batch<T> {
    let (h, w, c) = (imgs[0].height(), imgs[0].width(), imgs[0].channels());
    let hw = h * w;
    let mut b = Batch::zeros(imgs.len(), c, h, w);
    for (i, img) in imgs.iter().enumerate() {
        let dst = b.image_mut(i);
        for (px, pix) in img.data().chunks_exact(c).enumerate() {
            for (ch, v) in pix.iter().enumerate() {
                dst[ch * hw + px] = T::from_f64(*v);
            }
        }
    }
    b
}

pub fn batch_to_image<T: Real>(b: &Batch<T>, index: usize) -> ImageTensor {
    let hw = b.plane();
    let src = b.image(index);
    ImageTensor::from_fn(b.h, b.w, b.c, |y, x, c| src[c * hw + y * b.w + x].as_f64())
}

pub fn soft_to_batch<T: Real>(p: &SoftSegmentation) -> Batch<T> {
    let (h, w, k) = (p.height(), p.width(), p.k());
    let hw = h * w;
    let mut b = Batch::zeros(1, k, h, w);
    for (px, row) in p.probs().chunks_exact(k).enumerate() {
        for (c, v) in row.iter().enumerate() {
            b.data[c * hw + px] = T::from_f64(*v);
        }
    }
    b
}

/// Image `index` of a probability batch as a pixel-major soft segmentation.
pub fn batch_image_to_soft<T: Real>(b: &Batch<T>, index: usize) -> Result<SoftSegmentation> {
    let hw = b.plane();
    let src = b.image(index);
    let mut probs = vec![0.0; hw * b.c];
    for c in 0..b.c {
        for px in 0..hw {
            probs[px * b.c + c] = src[c * hw + px].as_f64();
        }
    }
    SoftSegmentation::new(b.h, b.w, b.c, probs)
}

fn batch_to_soft<T: Real>(b: &Batch<T>) -> Result<SoftSegmentation> {
    batch_image_to_soft(b, 0)
}

/// Channel-major gradient for image `index` from a pixel-major one.
pub fn pixel_major_into_batch<T: Real>(g: &[f64], b: &mut Batch<T>, index: usize, scale: f64) {
    let hw = b.plane();
    let c = b.c;
    let dst = b.image_mut(index);
    for px in 0..hw {
        for ch in 0..c {
            dst[ch * hw + px] = T::from_f64(g[px * c + ch] * scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WNetConfig {
        WNetConfig {
            input_size: 8,
            channels: 3,
            k: 4,
            depth: 2,
            base_channels: 2,
            ..WNetConfig::default()
        }
    }

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        ImageTensor::from_fn(size, size, 3, |_, _, _| rng.uniform())
    }

    #[test]
    fn full_size_config_has_46_conv_layers_in_18_modules() {
        let cfg = WNetConfig::full_size();
        assert_eq!(cfg.module_count(), 18);
        let net = WNet::<f32>::build(cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(net.conv_layer_count(), 46);
        // modules 1, 9, 10 and 18 are the dense ones
        let pattern: Vec<bool> = net
            .encoder
            .modules()
            .chain(net.decoder.modules())
            .map(|m| m.conv_a.is_separable())
            .collect();
        let dense: Vec<usize> = pattern
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(dense, vec![1, 9, 10, 18]);
    }

    #[test]
    fn indivisible_size_rejected() {
        let cfg = WNetConfig {
            input_size: 60,
            ..WNetConfig::default()
        };
        assert!(matches!(
            WNet::<f32>::build(cfg, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn separable_weight_count() {
        let net = WNet::<f32>::build(WNetConfig::default(), &mut Rng::new(0)).unwrap();
        let m = &net.encoder.down[1];
        assert!(m.conv_a.is_separable());
        assert_eq!(m.conv_a.weight_count(), 8 * 9 + 8 * 16);
        assert_eq!(net.encoder.down[0].conv_a.weight_count(), 3 * 8 * 9);
    }

    #[test]
    fn desk_config_output_shapes() {
        let mut net = WNet::<f32>::build(WNetConfig::default(), &mut Rng::new(1)).unwrap();
        let img = random_image(64, 2);
        let p = net.forward_encode(&img).unwrap();
        assert_eq!((p.height(), p.width(), p.k()), (64, 64, 8));
        for u in 0..p.pixel_count() {
            let s: f64 = p.pixel(u).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let r = net.forward_decode(&p).unwrap();
        assert_eq!((r.height(), r.width(), r.channels()), (64, 64, 3));
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut net = WNet::<f32>::build(tiny(), &mut Rng::new(3)).unwrap();
        net.encoder.head.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let p = net.forward_encode(&random_image(8, 4)).unwrap();
        assert!(p.probs().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn forward_is_deterministic() {
        let img = random_image(8, 5);
        let run = || {
            let mut net = WNet::<f32>::build(tiny(), &mut Rng::new(6)).unwrap();
            net.forward_encode(&img).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut net = WNet::<f32>::build(tiny(), &mut Rng::new(0)).unwrap();
        assert!(matches!(
            net.forward_encode(&random_image(16, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn export_import_round_trip() {
        let mut a = WNet::<f32>::build(tiny(), &mut Rng::new(1)).unwrap();
        let mut b = WNet::<f32>::build(tiny(), &mut Rng::new(2)).unwrap();
        b.import(&a.export()).unwrap();
        assert_eq!(a.export(), b.export());
        let names: Vec<String> = a.export().into_iter().map(|(n, _)| n).collect();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        assert!(names.iter().all(|n| n.starts_with("enc.") || n.starts_with("dec.")));
    }

    /// Full-network input-and-parameter gradient of the reconstruction
    /// loss in double precision against central differences.
    #[test]
    fn reconstruction_gradient_matches_finite_differences_f64() {
        let cfg = WNetConfig {
            dropout_p: 0.3,
            ..tiny()
        };
        let mut net = WNet::<f64>::build(cfg, &mut Rng::new(11)).unwrap();
        let imgs = [random_image(8, 12), random_image(8, 13)];
        let x: Batch<f64> = images_to_batch(&imgs);
        let loss = |net: &mut WNet<f64>| {
            let mut rng = Rng::new(99);
            let p = net.encode(&x, Some(&mut rng)).unwrap();
            let y = net.decode(&p, Some(&mut rng)).unwrap();
            let n = y.data.len() as f64;
            let l: f64 = y.data.iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            let dy: Vec<f64> = y.data.iter().zip(&x.data).map(|(a, b)| 2.0 * (a - b) / n).collect();
            (l, Batch { data: dy, ..y })
        };
        net.zero_grad();
        let (_, dy) = loss(&mut net);
        let dp = net.decode_backward(&dy);
        net.encode_backward(&dp);
        let mut analytic = Vec::new();
        for (_, s) in net.slots() {
            if let Some(g) = s.grad {
                analytic.push((s.name.clone(), g.clone()));
            }
        }
        let mut pick = Rng::new(7);
        let h = 1e-6;
        let (mut num2, mut diff2) = (0.0, 0.0);
        for _ in 0..60 {
            let t = pick.below(analytic.len());
            let (name, grads) = &analytic[t];
            let i = pick.below(grads.len());
            let bump = |net: &mut WNet<f64>, d: f64| {
                for (_, s) in net.slots() {
                    if s.name == *name {
                        s.value[i] += d;
                    }
                }
            };
            bump(&mut net, h);
            let lp = loss(&mut net).0;
            bump(&mut net, -2.0 * h);
            let lm = loss(&mut net).0;
            bump(&mut net, h);
            let numeric = (lp - lm) / (2.0 * h);
            num2 += numeric * numeric;
            diff2 += (numeric - grads[i]).powi(2);
        }
        let rel = (diff2 / num2).sqrt();
        assert!(rel < 1e-6, "relative error {rel}");
    }
}
