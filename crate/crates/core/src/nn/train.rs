//! Alternating minibatch SGD: a soft-Ncut step on the encoder followed by
//! a reconstruction step on both halves.

use std::io::Write;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::layers::Batch;
use super::wnet::{images_to_batch, pixel_major_into_batch, WNet, WNetConfig};
use crate::affinity::{build_affinity, AffinityParams, SparseAffinity};
use crate::error::{Error, Result};
use crate::ncut::{soft_ncut, soft_ncut_with_grad, SoftSegmentation};
use crate::tensor::{ImageTensor, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Run the encoder-only soft-Ncut step each iteration.
    pub ncut_step: bool,
    pub affinity: AffinityParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            max_iters: 2000,
            ..Self::full_size()
        }
    }
}

impl TrainConfig {
    pub fn full_size() -> Self {
        Self {
            batch_size: 10,
            lr_initial: 0.003,
            lr_decay_every: 1000,
            lr_decay_factor: 10.0,
            max_iters: 50_000,
            seed: 0,
            ncut_step: true,
            affinity: AffinityParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("batch size and decay interval must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        self.affinity.validate()
    }

    /// Step-decayed rate for the 0-based iteration `iter`.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        self.lr_initial / self.lr_decay_factor.powi((iter / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub j_reconstr: f64,
    pub j_softncut: f64,
    pub lr: f64,
}

pub fn write_trace(rows: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iter,j_reconstr,j_softncut,lr")?;
    for r in rows {
        writeln!(out, "{},{:.9e},{:.9e},{:.6e}", r.iter, r.j_reconstr, r.j_softncut, r.lr)?;
    }
    Ok(())
}

pub fn save_trace(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_trace(rows, &mut buf).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Training state: the network, its data and the number of completed
/// iterations.
pub struct Trainer {
    pub net: WNet<f32>,
    pub config: TrainConfig,
    pub iteration: usize,
    pub trace: Vec<TraceRow>,
    images: Vec<ImageTensor>,
    affinities: Vec<Option<SparseAffinity>>,
}

impl Trainer {
    /// Images must already match the network input size.
    pub fn new(net_config: WNetConfig, config: TrainConfig, images: Vec<ImageTensor>) -> Result<Self> {
        let net = WNet::build(net_config, &mut Rng::stream(config.seed, u64::MAX))?;
        Self::from_net(net, config, images, 0)
    }

    pub fn resume(ck: &Checkpoint, config: TrainConfig, images: Vec<ImageTensor>) -> Result<Self> {
        if ck.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                ck.seed, config.seed
            )));
        }
        let net = ck.restore()?;
        Self::from_net(net, config, images, ck.iteration as usize)
    }

    fn from_net(
        net: WNet<f32>,
        config: TrainConfig,
        images: Vec<ImageTensor>,
        iteration: usize,
    ) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let s = net.config.input_size;
        for img in &images {
            if img.height() != s || img.width() != s || img.channels() != net.config.channels {
                return Err(Error::Shape(format!(
                    "training image {}x{}x{} does not match network input {s}x{s}x{}",
                    img.height(),
                    img.width(),
                    img.channels(),
                    net.config.channels
                )));
            }
        }
        let n = images.len();
        Ok(Self {
            net,
            config,
            iteration,
            trace: Vec::new(),
            images,
            affinities: vec![None; n],
        })
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(&mut self.net, self.iteration as u64, self.config.seed)
    }

    fn affinity(&mut self, i: usize) -> Result<&SparseAffinity> {
        if self.affinities[i].is_none() {
            self.affinities[i] = Some(build_affinity(&self.images[i], &self.config.affinity)?);
        }
        Ok(self.affinities[i].as_ref().expect("just filled"))
    }

    /// Minibatch indices for an iteration: without replacement when the
    /// dataset is large enough.
    fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let n = self.images.len();
        let bs = self.config.batch_size;
        if bs <= n {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..bs {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(bs);
            idx
        } else {
            (0..bs).map(|_| rng.below(n)).collect()
        }
    }

    fn soft_losses(
        &mut self,
        p: &Batch<f32>,
        batch: &[usize],
        grad: Option<&mut Batch<f32>>,
    ) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for (b, &i) in batch.iter().enumerate() {
            let soft = soft_view(p, b)?;
            let w = self.affinity(i)?;
            match grad.as_deref_mut() {
                Some(g) => {
                    let (loss, dl) = soft_ncut_with_grad(&soft, w)?;
                    pixel_major_into_batch(&dl, g, b, scale);
                    total += loss;
                }
                None => total += soft_ncut(&soft, w)?,
            }
        }
        Ok(total * scale)
    }

    /// Encoder-only soft-Ncut update; returns the minibatch loss.
    pub fn ncut_step(&mut self, x: &Batch<f32>, batch: &[usize], lr: f64, rng: &mut Rng) -> Result<f64> {
        self.net.zero_grad();
        let p = self.net.encode(x, Some(rng))?;
        let mut dp = Batch::zeros(p.n, p.c, p.h, p.w);
        let loss = self.soft_losses(&p, batch, Some(&mut dp))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "j_softncut",
                iteration: self.iteration,
            });
        }
        self.net.encode_backward(&dp);
        self.net.sgd_step(lr, true, false);
        Ok(loss)
    }

    /// Reconstruction update of both halves. Returns the mean squared
    /// error and the encoder output it was computed from.
    pub fn reconstruction_step(&mut self, x: &Batch<f32>, lr: f64, rng: &mut Rng) -> Result<(f64, Batch<f32>)> {
        self.net.zero_grad();
        let p = self.net.encode(x, Some(rng))?;
        let y = self.net.decode(&p, Some(rng))?;
        let (loss, dy) = mse_with_grad(&y, x);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "j_reconstr",
                iteration: self.iteration,
            });
        }
        let dp = self.net.decode_backward(&dy);
        self.net.encode_backward(&dp);
        self.net.sgd_step(lr, true, true);
        Ok((loss, p))
    }

    /// One full iteration; appends a trace row.
    pub fn step(&mut self) -> Result<TraceRow> {
        let it = self.iteration as u64;
        let seed = self.config.seed;
        let batch = self.sample(&mut Rng::stream(seed, 3 * it));
        let imgs: Vec<ImageTensor> = batch.iter().map(|i| self.images[*i].clone()).collect();
        let x: Batch<f32> = images_to_batch(&imgs);
        let lr = self.config.learning_rate(self.iteration);
        let ncut = if self.config.ncut_step {
            Some(self.ncut_step(&x, &batch, lr, &mut Rng::stream(seed, 3 * it + 1))?)
        } else {
            None
        };
        let (j_reconstr, p) = self.reconstruction_step(&x, lr, &mut Rng::stream(seed, 3 * it + 2))?;
        let j_softncut = match ncut {
            Some(v) => v,
            None => self.soft_losses(&p, &batch, None)?,
        };
        let row = TraceRow {
            iter: self.iteration,
            j_reconstr,
            j_softncut,
            lr,
        };
        self.trace.push(row);
        self.iteration += 1;
        Ok(row)
    }

    /// Runs until `max_iters` iterations have completed.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.max_iters)
    }

    pub fn run_until(&mut self, iters: usize) -> Result<()> {
        while self.iteration < iters {
            let row = self.step()?;
            if row.iter % 100 == 0 {
                log::info!(
                    "iter {} j_reconstr {:.5} j_softncut {:.5} lr {:.2e}",
                    row.iter,
                    row.j_reconstr,
                    row.j_softncut,
                    row.lr
                );
            }
        }
        Ok(())
    }
}

/// Smallest probability passed to the loss. Saturated single-precision
/// softmax outputs can underflow to exactly 0 for a whole class.
const PROB_FLOOR: f64 = 1e-30;

/// Pixel-major view of one image of a probability batch.
fn soft_view(p: &Batch<f32>, b: usize) -> Result<SoftSegmentation> {
    let hw = p.plane();
    let src = p.image(b);
    let mut probs = vec![0.0; hw * p.c];
    for c in 0..p.c {
        for px in 0..hw {
            let v = src[c * hw + px] as f64;
            probs[px * p.c + c] = if v < PROB_FLOOR { PROB_FLOOR } else { v };
        }
    }
    SoftSegmentation::from_raw(p.h, p.w, p.c, probs)
}

/// Mean squared error over every element and its gradient.
pub fn mse_with_grad(y: &Batch<f32>, x: &Batch<f32>) -> (f64, Batch<f32>) {
    let n = y.data.len() as f64;
    let mut loss = 0.0;
    let mut dy = Batch::zeros(y.n, y.c, y.h, y.w);
    let scale = (2.0 / n) as f32;
    for ((d, a), b) in dy.data.iter_mut().zip(&y.data).zip(&x.data) {
        let diff = a - b;
        loss += (diff as f64) * (diff as f64);
        *d = scale * diff;
    }
    (loss / n, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> WNetConfig {
        WNetConfig {
            input_size: 8,
            depth: 2,
            base_channels: 2,
            k: 3,
            ..WNetConfig::default()
        }
    }

    fn images(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| {
                ImageTensor::from_fn(8, 8, 3, |_, x, c| {
                    if x < 4 { 0.1 * (c + i) as f64 } else { 0.9 - 0.1 * c as f64 }
                })
            })
            .collect()
    }

    fn tc() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_iters: 6,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_size_learning_rate_schedule() {
        let c = TrainConfig::full_size();
        assert_eq!(c.learning_rate(0), 0.003);
        assert_eq!(c.learning_rate(999), 0.003);
        assert!((c.learning_rate(1000) - 0.0003).abs() < 1e-18);
        assert!((c.learning_rate(2500) - 0.00003).abs() < 1e-18);
        assert_eq!((c.batch_size, c.max_iters), (10, 50_000));
    }

    #[test]
    fn ncut_step_leaves_decoder_untouched() {
        let mut t = Trainer::new(tiny_net(), tc(), images(3)).unwrap();
        let before: Vec<_> = t
            .net
            .export()
            .into_iter()
            .filter(|(n, _)| n.starts_with("dec."))
            .collect();
        let enc_before: Vec<_> = t
            .net
            .export()
            .into_iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .collect();
        let x = images_to_batch(&images(2));
        t.ncut_step(&x, &[0, 1], 0.1, &mut Rng::new(1)).unwrap();
        let after: Vec<_> = t
            .net
            .export()
            .into_iter()
            .filter(|(n, _)| n.starts_with("dec."))
            .collect();
        let enc_after: Vec<_> = t
            .net
            .export()
            .into_iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .collect();
        assert_eq!(before, after);
        assert_ne!(enc_before, enc_after);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut full = Trainer::new(tiny_net(), tc(), images(3)).unwrap();
        full.run().unwrap();
        let mut again = Trainer::new(tiny_net(), tc(), images(3)).unwrap();
        again.run().unwrap();
        assert_eq!(full.checkpoint().to_bytes(), again.checkpoint().to_bytes());
        assert_eq!(full.trace, again.trace);

        let mut first = Trainer::new(tiny_net(), tc(), images(3)).unwrap();
        first.run_until(3).unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(&ck, tc(), images(3)).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
        assert_eq!(resumed.trace[..], full.trace[3..]);
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut t = Trainer::new(tiny_net(), tc(), images(3)).unwrap();
        t.run_until(2).unwrap();
        t.net.decoder.head.weight.value[0] = f32::NAN;
        let err = t.run().unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { what: "j_reconstr", iteration: 2 }),
            "{err}"
        );
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            Trainer::new(tiny_net(), tc(), vec![]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(
            &[TraceRow {
                iter: 0,
                j_reconstr: 0.5,
                j_softncut: 1.0,
                lr: 0.003,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,j_reconstr,j_softncut,lr\n0,"));
    }
}
