//! Synthetic image classification tasks with a tunable semantic depth.
//!
//! Every class owns a coarse layout (one value per patch cell and channel)
//! and a fine texture (an oriented grating inside each patch, random phase
//! per patch). `semantic_depth` blends the two: 0 puts all class evidence in
//! the layout, 1 puts it all in the texture. Each sample also gets a random
//! layout clutter field that carries no label information, plus pixel noise.
//!
//! Class templates come from stream 0 of the seed; sample `i` uses stream
//! `i + 1`, with train samples at `0..train_size` and test samples after
//! them, so the two splits never share a sample.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::write_tensors;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{patchify, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub semantic_depth: f64,
    /// Standard deviation of the label-free layout clutter.
    pub clutter: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Extra seed mixed into the template stream so that upstream and
    /// downstream tasks built from the same run seed differ.
    pub template_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_classes: 10,
            train_size: 1000,
            test_size: 500,
            semantic_depth: 1.0,
            clutter: 0.5,
            noise: 0.3,
            template_seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "a task needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.semantic_depth) {
            return Err(Error::Config(format!(
                "semantic_depth {} outside [0, 1]",
                self.semantic_depth
            )));
        }
        if !(self.clutter >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("clutter and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` images.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patches(&self, cfg: &ViTConfig) -> Result<Vec<Tensor>> {
        self.images.iter().map(|im| patchify(cfg, im)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Writes `<name>.bin` holding one `[n, C, H, W]` tensor and
    /// `<name>_labels.csv`.
    pub fn export(&self, dir: &Path, name: &str) -> Result<()> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Validation("cannot export an empty dataset".into()))?;
        let mut shape = vec![self.len()];
        shape.extend_from_slice(first.shape());
        let data = self.images.iter().flat_map(|t| t.data().iter().copied()).collect();
        let stacked = Tensor::new(shape, data)?;
        let meta = serde_json::json!({
            "kind": "dataset",
            "name": name,
            "num_classes": self.num_classes,
        });
        write_tensors(&dir.join(format!("{}.bin", name)), &meta, &[&stacked])?;
        let mut csv = String::from("index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(csv, "{},{}", i, l).unwrap();
        }
        let path = dir.join(format!("{}_labels.csv", name));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }
}

/// Class templates of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    /// Per class `[C, grid, grid]` layout values.
    pub layouts: Vec<Tensor>,
    /// Per class (orientation, cycles per patch, channel weights).
    pub textures: Vec<(f64, f64, Vec<f64>)>,
}

fn stream(seed: u64, template_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ template_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn templates(spec: &TaskSpec, cfg: &ViTConfig, seed: u64) -> Templates {
    let mut rng = stream(seed, spec.template_seed, 0);
    let g = cfg.patch_grid;
    let c = cfg.image_channels;
    let layouts = (0..spec.num_classes)
        .map(|_| {
            let v = (0..c * g * g).map(|_| gauss(&mut rng)).collect();
            Tensor::new(vec![c, g, g], v).expect("sized")
        })
        .collect();
    let max_freq = (cfg.patch_size as f64 / 2.0).max(1.0);
    let textures = (0..spec.num_classes)
        .map(|k| {
            let theta = PI * (k as f64 + rng.random::<f64>() * 0.5) / spec.num_classes as f64;
            let freq = 1.0 + rng.random::<f64>() * (max_freq - 1.0);
            let mut w: Vec<f64> = (0..c).map(|_| gauss(&mut rng)).collect();
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            w.iter_mut().for_each(|x| *x *= (c as f64).sqrt() / n);
            (theta, freq, w)
        })
        .collect();
    Templates { layouts, textures }
}

fn render(
    spec: &TaskSpec,
    cfg: &ViTConfig,
    t: &Templates,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (c, g, ps) = (cfg.image_channels, cfg.patch_grid, cfg.patch_size);
    let side = g * ps;
    let depth = spec.semantic_depth;
    let clutter: Vec<f64> = (0..c * g * g).map(|_| gauss(rng) * spec.clutter).collect();
    let phases: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    let layout = t.layouts[label].data();
    let (theta, freq, ref w) = t.textures[label];
    let (ct, st) = (theta.cos(), theta.sin());
    let mut data = vec![0.0; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                let cell = (y / ps) * g + x / ps;
                let (py, px) = ((y % ps) as f64, (x % ps) as f64);
                let wave = (2.0 * PI * freq * (px * ct + py * st) / ps as f64 + phases[cell]).cos();
                let v = (1.0 - depth) * layout[ch * g * g + cell]
                    + depth * w[ch] * wave
                    + clutter[ch * g * g + cell]
                    + spec.noise * gauss(rng);
                data[ch * side * side + y * side + x] = v;
            }
        }
    }
    Tensor::new(vec![c, side, side], data).expect("sized")
}

/// Train and test splits of a task.
pub fn generate_task(spec: &TaskSpec, cfg: &ViTConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    cfg.validate()?;
    let t = templates(spec, cfg, seed);
    let make = |range: std::ops::Range<usize>| {
        let mut images = Vec::with_capacity(range.len());
        let mut labels = Vec::with_capacity(range.len());
        for i in range {
            let label = i % spec.num_classes;
            let mut rng = stream(seed, spec.template_seed, i as u64 + 1);
            images.push(render(spec, cfg, &t, label, &mut rng));
            labels.push(label);
        }
        Dataset {
            images,
            labels,
            num_classes: spec.num_classes,
        }
    };
    let train = make(0..spec.train_size);
    let test = make(spec.train_size..spec.train_size + spec.test_size);
    Ok((train, test))
}

/// Features computed from the generating templates: per class, the
/// correlation of the cell means with its layout and the phase-invariant
/// energy of its grating. A linear model on these separates the classes.
pub fn oracle_features(cfg: &ViTConfig, t: &Templates, image: &Tensor) -> Vec<f64> {
    let (c, g, ps) = (cfg.image_channels, cfg.patch_grid, cfg.patch_size);
    let side = g * ps;
    let px = image.data();
    let mut cells = vec![0.0; c * g * g];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                cells[ch * g * g + (y / ps) * g + x / ps] += px[ch * side * side + y * side + x];
            }
        }
    }
    cells.iter_mut().for_each(|v| *v /= (ps * ps) as f64);
    let mut out = Vec::with_capacity(2 * t.layouts.len());
    for l in &t.layouts {
        out.push(l.data().iter().zip(&cells).map(|(a, b)| a * b).sum::<f64>() / cells.len() as f64);
    }
    for (theta, freq, w) in &t.textures {
        let (ct, st) = (theta.cos(), theta.sin());
        let mut energy = 0.0;
        for cell in 0..g * g {
            let (gy, gx) = (cell / g, cell % g);
            let (mut re, mut im) = (0.0, 0.0);
            for ch in 0..c {
                for y in 0..ps {
                    for x in 0..ps {
                        let arg = 2.0 * PI * freq * (x as f64 * ct + y as f64 * st) / ps as f64;
                        let v = w[ch] * px[ch * side * side + (gy * ps + y) * side + gx * ps + x];
                        re += v * arg.cos();
                        im += v * arg.sin();
                    }
                }
            }
            energy += (re * re + im * im).sqrt();
        }
        out.push(energy / (g * g * ps * ps * c) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TaskSpec, ViTConfig) {
        (
            TaskSpec {
                num_classes: 3,
                train_size: 12,
                test_size: 6,
                ..TaskSpec::default()
            },
            ViTConfig::default(),
        )
    }

    #[test]
    fn deterministic_and_balanced() {
        let (spec, cfg) = small();
        let (a, at) = generate_task(&spec, &cfg, 5).unwrap();
        let (b, bt) = generate_task(&spec, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(at, bt);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 4);
        assert_eq!(a.images[0].shape(), &[3, 16, 16]);
        let (c, _) = generate_task(&spec, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_train_size() {
        assert_eq!(TaskSpec::default().train_size, 1000);
    }

    #[test]
    fn rejects_degenerate_spec() {
        let (mut spec, cfg) = small();
        spec.num_classes = 0;
        assert!(generate_task(&spec, &cfg, 0).is_err());
    }

    #[test]
    fn test_split_differs_from_train() {
        let (spec, cfg) = small();
        let (tr, te) = generate_task(&spec, &cfg, 1).unwrap();
        for a in &te.images {
            assert!(tr.images.iter().all(|b| a != b));
        }
    }
}
