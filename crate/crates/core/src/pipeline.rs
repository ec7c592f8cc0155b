//! Command implementations behind the `wnet` binary: synthetic corpus
//! generation, training, the post-processing chain and evaluation.
//!
//! Every command writes into a run directory together with
//! `manifest.txt`, which lists the command, seed, config hash and the
//! SHA-256 of every input and output file, and `config.txt`, the full
//! effective configuration.
//!
//! Binary formats, all little-endian:
//!
//! ```text
//! <id>.ucm.bin  b"WNETUCM1" | u32 height | u32 width | f64 level per pixel (row-major)
//! <id>.q.bin    b"WNETQMAP" | u32 height | u32 width | u32 K | f64 Q (pixel-major)
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{hex_digest, PipelineConfig};
use crate::contour::{boundary_strengths, build_ucm, initial_regions, threshold_ucm, BoundaryMap, Merge, UcmHierarchy};
use crate::crf::{crf_argmax, mean_field, write_q_dump};
use crate::error::{Error, Result};
use crate::io::{load_bsds_seg, load_label_map, load_pnm, save_label_map, save_pnm};
use crate::metrics::{ods_ois, records_csv, summary_table, threshold_grid, EvalRecord};
use crate::ncut::SoftSegmentation;
use crate::nn::train::write_trace;
use crate::nn::{Checkpoint, Trainer, WNet};
use crate::resample::{resize_bilinear, resize_nearest};
use crate::synth::{generate_corpus, write_corpus};
use crate::tensor::{ImageTensor, LabelMap};

pub const UCM_MAGIC: &[u8; 8] = b"WNETUCM1";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Last post-processing stage to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Encode,
    Crf,
    Cues,
    Ucm,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encode" => Ok(Stage::Encode),
            "crf" => Ok(Stage::Crf),
            "cues" => Ok(Stage::Cues),
            "ucm" => Ok(Stage::Ucm),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?}; expected encode, crf, cues or ucm"
            ))),
        }
    }
}

/// Intermediate results of the chain on one image. Maps are on the
/// network grid unless noted.
#[derive(Clone, Debug)]
pub struct Segmented {
    /// Original image size.
    pub height: usize,
    pub width: usize,
    pub encoder: SoftSegmentation,
    pub q: Option<SoftSegmentation>,
    pub regions: Option<LabelMap>,
    pub boundary: Option<BoundaryMap>,
    pub hierarchy: Option<UcmHierarchy>,
}

impl Segmented {
    fn upsample(&self, labels: &LabelMap) -> LabelMap {
        resize_nearest(labels, self.height, self.width)
    }

    pub fn encoder_labels(&self) -> LabelMap {
        self.upsample(&self.encoder.argmax())
    }

    pub fn crf_labels(&self) -> Option<LabelMap> {
        self.q.as_ref().map(|q| self.upsample(&crf_argmax(q)))
    }

    /// Segmentation at UCM level `t`, at original size.
    pub fn at_threshold(&self, t: f64) -> Option<LabelMap> {
        self.hierarchy.as_ref().map(|h| self.upsample(&threshold_ucm(h, t)))
    }

    /// The hierarchy resampled to original size.
    pub fn hierarchy_full(&self) -> Option<UcmHierarchy> {
        let h = self.hierarchy.as_ref()?;
        let (sh, sw) = (h.initial.height(), h.initial.width());
        let initial = self.upsample(&h.initial);
        let ucm = (0..self.height * self.width)
            .map(|i| {
                let (y, x) = (i / self.width, i % self.width);
                let sy = (((y as f64 + 0.5) * sh as f64 / self.height as f64) as usize).min(sh - 1);
                let sx = (((x as f64 + 0.5) * sw as f64 / self.width as f64) as usize).min(sw - 1);
                h.ucm[sy * sw + sx]
            })
            .collect();
        Some(UcmHierarchy {
            initial,
            merges: h.merges.clone(),
            ucm,
        })
    }
}

fn check_channels(img: &ImageTensor, net: &WNet<f32>, what: &str) -> Result<()> {
    let want = net.config.channels;
    if img.channels() != want {
        let hint = if want == 3 { "an RGB PPM (P6)" } else { "a grayscale PGM (P5)" };
        return Err(Error::Shape(format!(
            "{what} has {} channel(s) but the checkpoint was trained on {want}; convert it to {hint}",
            img.channels()
        )));
    }
    Ok(())
}

/// Runs the chain up to `stage`. The image is resized bilinearly to the
/// network input size first.
pub fn segment_image(
    net: &mut WNet<f32>,
    img: &ImageTensor,
    cfg: &PipelineConfig,
    stage: Stage,
) -> Result<Segmented> {
    check_channels(img, net, "input image")?;
    let s = net.config.input_size;
    let small = resize_bilinear(img, s, s);
    let encoder = net.forward_encode(&small)?;
    let mut out = Segmented {
        height: img.height(),
        width: img.width(),
        encoder,
        q: None,
        regions: None,
        boundary: None,
        hierarchy: None,
    };
    if stage < Stage::Crf {
        return Ok(out);
    }
    let q = mean_field(&out.encoder, &small, &cfg.crf)?;
    if stage < Stage::Cues {
        out.q = Some(q);
        return Ok(out);
    }
    let regions = initial_regions(&crf_argmax(&q), cfg.min_area);
    let boundary = boundary_strengths(&small, &regions, &cfg.cues, &cfg.spectral)?;
    out.q = Some(q);
    if stage >= Stage::Ucm {
        out.hierarchy = Some(build_ucm(&regions, &boundary)?);
    }
    out.regions = Some(regions);
    out.boundary = Some(boundary);
    Ok(out)
}

/// Copy of `img` as RGB with pixels on a label change painted red.
pub fn boundary_overlay(img: &ImageTensor, labels: &LabelMap) -> ImageTensor {
    let (h, w) = (labels.height(), labels.width());
    let on = |y: usize, x: usize| {
        let l = labels.get(y, x);
        (x + 1 < w && labels.get(y, x + 1) != l) || (y + 1 < h && labels.get(y + 1, x) != l)
    };
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        if on(y, x) {
            [1.0, 0.0, 0.0][c]
        } else if img.channels() == 1 {
            img.get(y, x, 0)
        } else {
            img.get(y, x, c)
        }
    })
}

pub fn write_ucm_binary(height: usize, width: usize, ucm: &[f64], mut out: impl Write) -> std::io::Result<()> {
    out.write_all(UCM_MAGIC)?;
    out.write_all(&(height as u32).to_le_bytes())?;
    out.write_all(&(width as u32).to_le_bytes())?;
    for v in ucm {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Returns `(height, width, levels)`.
pub fn read_ucm_binary(mut input: impl Read) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<ucm stream>", e))?;
    if bytes.len() < 16 || &bytes[..8] != UCM_MAGIC {
        return Err(Error::format(0, "missing WNETUCM1 header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 8 {
        return Err(Error::format(16, format!("expected {} level bytes, found {}", h * w * 8, body.len())));
    }
    let v = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, v))
}

/// 8-bit preview with levels in `[0, 1]` mapped to `[0, 255]`.
pub fn ucm_preview(height: usize, width: usize, ucm: &[f64]) -> ImageTensor {
    ImageTensor::from_fn(height, width, 1, |y, x, _| ucm[y * width + x].clamp(0.0, 1.0))
}

pub fn parse_merges(text: &str) -> Result<Vec<Merge>> {
    let mut merges = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let at = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(at, format!("expected `a b strength`, found {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        merges.push(Merge {
            a: f[0].parse().map_err(|_| bad())?,
            b: f[1].parse().map_err(|_| bad())?,
            strength: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(merges)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Missing(format!("{} is not a directory", dir.display())));
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Image id: the file name without its extension.
pub fn image_id(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// PNM images in `dir` in name order; `*.gt.pgm` label maps are skipped.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            let n = file_name(p);
            p.is_file() && (n.ends_with(".ppm") || n.ends_with(".pgm")) && !n.ends_with(".gt.pgm")
        })
        .collect())
}

/// Manifest text; each file is recorded with its SHA-256.
struct Manifest {
    text: String,
}

impl Manifest {
    fn new(command: &str, cfg: &PipelineConfig) -> Self {
        let mut text = String::new();
        writeln!(text, "command = {command}").unwrap();
        writeln!(text, "seed = {}", cfg.train.seed).unwrap();
        writeln!(text, "config_hash = {}", cfg.hash()).unwrap();
        Self { text }
    }

    fn entry(&mut self, key: &str, value: impl std::fmt::Display) {
        writeln!(self.text, "{key} = {value}").unwrap();
    }

    fn file(&mut self, kind: &str, path: &Path, label: &str) -> Result<()> {
        let digest = hex_digest(&read_bytes(path)?);
        writeln!(self.text, "{kind} = {label} sha256:{digest}").unwrap();
        Ok(())
    }

    fn save(&self, dir: &Path, cfg: &PipelineConfig) -> Result<()> {
        write_file(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
        write_file(&dir.join(MANIFEST_FILE), self.text.as_bytes())
    }
}

/// Writes the synthetic corpus of `cfg.synth_count` images seeded by
/// `seed`.
pub fn cmd_synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let images = generate_corpus(cfg.synth_count, &cfg.synth, cfg.train.seed)?;
    write_corpus(&images, &cfg.synth, out_dir)?;
    let mut m = Manifest::new("synth", cfg);
    let mut written = Vec::new();
    for s in &images {
        for ext in ["ppm", "gt.pgm", "txt"] {
            let name = format!("{}.{ext}", s.id);
            let path = out_dir.join(&name);
            m.file("output", &path, &name)?;
            written.push(path);
        }
    }
    m.save(out_dir, cfg)?;
    Ok(written)
}

fn load_training_set(cfg: &PipelineConfig, dir: &Path, m: &mut Manifest) -> Result<Vec<ImageTensor>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Missing(format!("no PNM images in {}", dir.display())));
    }
    m.entry("input_dir", dir.display());
    let s = cfg.wnet.input_size;
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = load_pnm(p)?;
        if img.channels() != cfg.wnet.channels {
            return Err(Error::Shape(format!(
                "{} has {} channel(s) but wnet.channels = {}",
                p.display(),
                img.channels(),
                cfg.wnet.channels
            )));
        }
        m.file("input", p, &file_name(p))?;
        out.push(resize_bilinear(&img, s, s));
    }
    Ok(out)
}

/// Trains on every image in `data_dir` until `train.iterations` have
/// completed. With `resume`, continues from `run_dir/checkpoint.bin`.
/// The checkpoint and trace are rewritten every `save_every` iterations.
pub fn cmd_train(
    cfg: &PipelineConfig,
    data_dir: &Path,
    run_dir: &Path,
    resume: bool,
    save_every: usize,
) -> Result<Checkpoint> {
    let mut m = Manifest::new("train", cfg);
    let images = load_training_set(cfg, data_dir, &mut m)?;
    create_dir(run_dir)?;
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let trace_path = run_dir.join(TRACE_FILE);
    let mut prior_trace = String::new();
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != cfg.wnet {
            return Err(Error::Checkpoint(
                "checkpoint architecture differs from the configured wnet.* keys".into(),
            ));
        }
        // keep the rows written before the checkpoint
        let text = std::fs::read_to_string(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
        for line in text.lines().skip(1) {
            let iter: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(0, format!("bad trace row {line:?}")))?;
            if iter < ck.iteration {
                prior_trace.push_str(line);
                prior_trace.push('\n');
            }
        }
        m.entry("resumed_from", ck.iteration);
        Trainer::resume(&ck, cfg.train, images)?
    } else {
        Trainer::new(cfg.wnet, cfg.train, images)?
    };
    let save = |trainer: &mut Trainer| -> Result<Checkpoint> {
        let ck = trainer.checkpoint();
        ck.save(&ck_path)?;
        let mut buf = Vec::new();
        write_trace(&trainer.trace, &mut buf).expect("writing to memory");
        let mut text = String::from_utf8(buf).expect("ascii");
        let body = text.split_off(text.find('\n').map_or(text.len(), |i| i + 1));
        text.push_str(&prior_trace);
        text.push_str(&body);
        write_file(&trace_path, text.as_bytes())?;
        Ok(ck)
    };
    let every = save_every.max(1);
    while trainer.iteration < cfg.train.max_iters {
        let next = ((trainer.iteration / every + 1) * every).min(cfg.train.max_iters);
        trainer.run_until(next)?;
        save(&mut trainer)?;
    }
    let ck = save(&mut trainer)?;
    m.entry("iterations", ck.iteration);
    m.file("output", &ck_path, CHECKPOINT_FILE)?;
    m.file("output", &trace_path, TRACE_FILE)?;
    m.save(run_dir, cfg)?;
    Ok(ck)
}

/// Expands directories into their images.
pub fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_images(p)?);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Missing(format!("input {} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::Missing("no input images".into()));
    }
    Ok(out)
}

/// Saves a label map and its boundary overlay.
fn put_labels(
    dir: &Path,
    img: &ImageTensor,
    written: &mut Vec<PathBuf>,
    name: String,
    labels: &LabelMap,
) -> Result<()> {
    let path = dir.join(&name);
    save_label_map(labels, &path)?;
    written.push(path);
    let opath = dir.join(name.replace(".pgm", ".overlay.ppm"));
    save_pnm(&boundary_overlay(img, labels), &opath)?;
    written.push(opath);
    Ok(())
}

/// Runs the chain up to `stage` on each input and writes, per image id:
/// `<id>.encoder.pgm`; from `crf` on `<id>.crf.pgm` and `<id>.q.bin`;
/// from `cues` on `<id>.regions.pgm` and `<id>.boundary.pgm`; at `ucm`
/// `<id>.ucm.bin`, `<id>.ucm.pgm`, `<id>.merges.txt` and
/// `<id>.seg_t<t>.pgm` per requested threshold. Each label output also
/// gets a red boundary overlay. Label maps are 16-bit PGMs at the
/// original image size.
pub fn cmd_segment(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
    stage: Stage,
) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut net = ck.restore()?;
    let paths = collect_inputs(inputs)?;
    create_dir(out_dir)?;
    let mut m = Manifest::new("segment", cfg);
    m.entry("stage", format!("{stage:?}").to_lowercase());
    m.file("checkpoint", checkpoint, &file_name(checkpoint))?;
    let mut written = Vec::new();
    for p in &paths {
        let id = image_id(p);
        let img = load_pnm(p)?;
        m.file("input", p, &file_name(p))?;
        let seg = segment_image(&mut net, &img, cfg, stage).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("{}: {msg}", p.display())),
            other => other,
        })?;
        put_labels(out_dir, &img, &mut written, format!("{id}.encoder.pgm"), &seg.encoder_labels())?;
        if let Some(crf) = seg.crf_labels() {
            put_labels(out_dir, &img, &mut written, format!("{id}.crf.pgm"), &crf)?;
            let path = out_dir.join(format!("{id}.q.bin"));
            let mut buf = Vec::new();
            write_q_dump(seg.q.as_ref().expect("crf ran"), &mut buf).expect("writing to memory");
            write_file(&path, &buf)?;
            written.push(path);
        }
        if let (Some(regions), Some(boundary)) = (&seg.regions, &seg.boundary) {
            let path = out_dir.join(format!("{id}.regions.pgm"));
            save_label_map(&seg.upsample(regions), &path)?;
            written.push(path);
            let path = out_dir.join(format!("{id}.boundary.pgm"));
            let preview = ucm_preview(boundary.height, boundary.width, &boundary.strength);
            save_pnm(&preview, &path)?;
            written.push(path);
        }
        if let Some(full) = seg.hierarchy_full() {
            let path = out_dir.join(format!("{id}.ucm.bin"));
            let mut buf = Vec::new();
            write_ucm_binary(seg.height, seg.width, &full.ucm, &mut buf).expect("writing to memory");
            write_file(&path, &buf)?;
            written.push(path);
            let path = out_dir.join(format!("{id}.ucm.pgm"));
            save_pnm(&ucm_preview(seg.height, seg.width, &full.ucm), &path)?;
            written.push(path);
            let path = out_dir.join(format!("{id}.merges.txt"));
            let mut buf = Vec::new();
            crate::contour::ucm::write_merges(&full, &mut buf).expect("writing to memory");
            write_file(&path, &buf)?;
            written.push(path);
            for &t in &cfg.segment_thresholds {
                put_labels(out_dir, &img, &mut written, format!("{id}.seg_t{t:.2}.pgm"), &threshold_ucm(&full, t))?;
            }
        }
    }
    written.sort();
    written.dedup();
    for p in &written {
        m.file("output", p, &file_name(p))?;
    }
    m.save(out_dir, cfg)?;
    Ok(written)
}

/// Ground-truth annotations for `id`: `<id>.gt.pgm`, `<id>.pgm` or
/// `<id>.seg` in `gt_dir`, or every `.seg` / `.pgm` file in `gt_dir/<id>/`.
pub fn find_ground_truth(gt_dir: &Path, id: &str) -> Result<Option<Vec<LabelMap>>> {
    for name in [format!("{id}.gt.pgm"), format!("{id}.pgm"), format!("{id}.seg")] {
        let p = gt_dir.join(&name);
        if p.is_file() {
            return Ok(Some(vec![load_gt(&p)?]));
        }
    }
    let sub = gt_dir.join(id);
    if sub.is_dir() {
        let gts = sorted_entries(&sub)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "seg" || e == "pgm"))
            .map(|p| load_gt(&p))
            .collect::<Result<Vec<_>>>()?;
        if !gts.is_empty() {
            return Ok(Some(gts));
        }
    }
    Ok(None)
}

fn load_gt(p: &Path) -> Result<LabelMap> {
    if p.extension().is_some_and(|e| e == "seg") {
        load_bsds_seg(p)
    } else {
        load_label_map(p)
    }
}

/// A prediction to score: a hierarchy or a single flat segmentation.
enum Prediction {
    Hierarchy(UcmHierarchy),
    Flat(LabelMap),
}

impl Prediction {
    fn at(&self, t: f64) -> LabelMap {
        match self {
            Prediction::Hierarchy(h) => threshold_ucm(h, t),
            Prediction::Flat(l) => l.clone(),
        }
    }
}

/// Hierarchies are `<id>.regions.pgm` plus `<id>.merges.txt`; without any
/// regions file every `*.pgm` in the directory is a flat segmentation.
fn load_predictions(dir: &Path) -> Result<Vec<(String, Prediction)>> {
    let entries = sorted_entries(dir)?;
    let regions: Vec<&PathBuf> = entries
        .iter()
        .filter(|p| file_name(p).ends_with(".regions.pgm"))
        .collect();
    let mut out = Vec::new();
    if regions.is_empty() {
        for p in entries.iter().filter(|p| p.is_file() && file_name(p).ends_with(".pgm")) {
            out.push((image_id(p), Prediction::Flat(load_label_map(p)?)));
        }
    } else {
        for p in regions {
            let name = file_name(p);
            let id = name.trim_end_matches(".regions.pgm").to_string();
            let initial = load_label_map(p)?;
            let mpath = dir.join(format!("{id}.merges.txt"));
            let merges = if mpath.is_file() {
                let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
                parse_merges(&text)?
            } else {
                Vec::new()
            };
            let n = initial.max_label().map_or(0, |l| l + 1);
            if merges.iter().any(|mg| mg.a >= n || mg.b >= n) {
                return Err(Error::Structural(format!(
                    "{id}: merge list names a region missing from {name}"
                )));
            }
            let ucm = vec![0.0; initial.len()];
            out.push((id, Prediction::Hierarchy(UcmHierarchy { initial, merges, ucm })));
        }
    }
    if out.is_empty() {
        return Err(Error::Missing(format!("no predictions in {}", dir.display())));
    }
    Ok(out)
}

/// Scores every prediction in `pred_dir` against `gt_dir` on the
/// `eval.step` grid. Writes `eval.csv` and `summary.txt` to `out_dir`.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    pred_dir: &Path,
    gt_dir: &Path,
    out_dir: &Path,
) -> Result<(Vec<EvalRecord>, String)> {
    let preds = load_predictions(pred_dir)?;
    if !gt_dir.is_dir() {
        return Err(Error::Missing(format!("{} is not a directory", gt_dir.display())));
    }
    let mut gts = Vec::with_capacity(preds.len());
    let mut missing = Vec::new();
    for (id, _) in &preds {
        match find_ground_truth(gt_dir, id)? {
            Some(g) => gts.push(g),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(format!(
            "no ground truth in {} for image(s): {}",
            gt_dir.display(),
            missing.join(", ")
        )));
    }
    let grid = threshold_grid(cfg.eval_step)?;
    let mut records = Vec::with_capacity(preds.len());
    for ((id, pred), gt) in preds.iter().zip(&gts) {
        let rec = EvalRecord::from_hierarchy(id.clone(), &grid, gt, |t| pred.at(t))
            .map_err(|e| match e {
                Error::Shape(msg) => Error::Shape(format!("{id}: {msg}")),
                other => other,
            })?;
        records.push(rec);
    }
    let summary = ods_ois(&records)?;
    let table = summary_table(&summary, "wnet");
    create_dir(out_dir)?;
    let csv = out_dir.join("eval.csv");
    write_file(&csv, records_csv(&records).as_bytes())?;
    let sum = out_dir.join("summary.txt");
    write_file(&sum, table.as_bytes())?;
    let mut m = Manifest::new("eval", cfg);
    m.entry("predictions", pred_dir.display());
    m.entry("ground_truth", gt_dir.display());
    m.file("output", &csv, "eval.csv")?;
    m.file("output", &sum, "summary.txt")?;
    m.save(out_dir, cfg)?;
    Ok((records, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names() {
        assert_eq!("crf".parse::<Stage>().unwrap(), Stage::Crf);
        assert!(Stage::Encode < Stage::Ucm);
        assert!("all".parse::<Stage>().is_err());
    }

    #[test]
    fn ucm_binary_round_trip() {
        let v = vec![0.0, 0.25, 1.0, 0.125, 0.5, 0.75];
        let mut buf = Vec::new();
        write_ucm_binary(2, 3, &v, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(read_ucm_binary(&buf[..]).unwrap(), (2, 3, v));
        assert!(read_ucm_binary(&buf[..20]).is_err());
    }

    #[test]
    fn overlay_marks_label_changes_red() {
        let img = ImageTensor::from_fn(2, 4, 1, |_, _, _| 0.5);
        let labels = LabelMap::from_fn(2, 4, |_, x| u32::from(x >= 2));
        let o = boundary_overlay(&img, &labels);
        assert_eq!(o.channels(), 3);
        assert_eq!((o.get(0, 1, 0), o.get(0, 1, 1), o.get(0, 1, 2)), (1.0, 0.0, 0.0));
        assert_eq!(o.get(0, 0, 0), 0.5);
        assert_eq!(o.get(1, 3, 1), 0.5);
    }

    #[test]
    fn merges_parse() {
        let m = parse_merges("0 1 0.2\n0 2 0.7\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!((m[1].a, m[1].b, m[1].strength), (0, 2, 0.7));
        assert!(parse_merges("0 1\n").is_err());
    }
}
