use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ViTConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Arc<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Arc::new(Tensor::uniform(&[fan_in, fan_out], bound, rng))
}

fn zeros(n: usize) -> Arc<Tensor> {
    Arc::new(Tensor::zeros(&[n]))
}

fn ones(n: usize) -> Arc<Tensor> {
    Arc::new(Tensor::filled(&[n], 1.0))
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Arc<Tensor>,
    pub ln1_b: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub bq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub bk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub bv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub bo: Arc<Tensor>,
    pub ln2_g: Arc<Tensor>,
    pub ln2_b: Arc<Tensor>,
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl Block {
    fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        Block {
            ln1_g: ones(d),
            ln1_b: zeros(d),
            wq: xavier(d, d, rng),
            bq: zeros(d),
            wk: xavier(d, d, rng),
            bk: zeros(d),
            wv: xavier(d, d, rng),
            bv: zeros(d),
            wo: xavier(d, d, rng),
            bo: zeros(d),
            ln2_g: ones(d),
            ln2_b: zeros(d),
            w1: xavier(d, h, rng),
            b1: zeros(h),
            w2: xavier(h, d, rng),
            b2: zeros(d),
        }
    }

    fn fields(&self) -> [&Arc<Tensor>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Arc<Tensor>; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBlock {
        let mut leaf = |t: &Arc<Tensor>| g.leaf_shared(t.clone(), trainable);
        BoundBlock {
            ln1_g: leaf(&self.ln1_g),
            ln1_b: leaf(&self.ln1_b),
            wq: leaf(&self.wq),
            bq: leaf(&self.bq),
            wk: leaf(&self.wk),
            bk: leaf(&self.bk),
            wv: leaf(&self.wv),
            bv: leaf(&self.bv),
            wo: leaf(&self.wo),
            bo: leaf(&self.bo),
            ln2_g: leaf(&self.ln2_g),
            ln2_b: leaf(&self.ln2_b),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }
}

/// A block's parameters as graph nodes.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundBlock {
    pub fn vars(&self) -> [Var; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo,
            self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// Backbone parameters. Tensors sit behind `Arc` so binding a model onto a
/// graph shares storage instead of copying it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViT {
    pub config: ViTConfig,
    pub patch_w: Arc<Tensor>,
    pub patch_b: Arc<Tensor>,
    pub cls: Arc<Tensor>,
    pub pos: Arc<Tensor>,
    pub blocks: Vec<Block>,
    pub norm_g: Arc<Tensor>,
    pub norm_b: Arc<Tensor>,
}

impl ViT {
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_w = xavier(config.patch_dim(), d, &mut rng);
        let cls = Arc::new(Tensor::normal(&[1, d], 0.02, &mut rng));
        let pos = Arc::new(Tensor::normal(&[config.num_tokens(), d], 0.02, &mut rng));
        let blocks = (0..config.num_layers).map(|_| Block::init(&config, &mut rng)).collect();
        Ok(ViT {
            patch_b: zeros(d),
            patch_w,
            cls,
            pos,
            blocks,
            norm_g: ones(d),
            norm_b: zeros(d),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{}.{}", i, name), t));
            }
        }
        out.push(("norm_g".to_string(), &self.norm_g));
        out.push(("norm_b".to_string(), &self.norm_b));
        out
    }

    /// Mutable parameter handles, in the same order as [`ViT::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        out
    }

    /// Rebuilds a model from tensors in [`ViT::named_params`] order.
    pub fn from_named(config: ViTConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = ViT::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((slot, (want_name, want_shape)), (name, t)) in
            model.params_mut().into_iter().zip(expected).zip(tensors)
        {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    name,
                    t.shape(),
                    want_name,
                    want_shape
                )));
            }
            *slot = Arc::new(t);
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every backbone tensor on `g`. With `trainable == false` the
    /// backbone is frozen: none of its leaves can receive a gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundViT {
        BoundViT {
            patch_w: g.leaf_shared(self.patch_w.clone(), trainable),
            patch_b: g.leaf_shared(self.patch_b.clone(), trainable),
            cls: g.leaf_shared(self.cls.clone(), trainable),
            pos: g.leaf_shared(self.pos.clone(), trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            norm_g: g.leaf_shared(self.norm_g.clone(), trainable),
            norm_b: g.leaf_shared(self.norm_b.clone(), trainable),
            config: self.config.clone(),
        }
    }

    /// Splits a `[C, H, W]` image into `[num_patches, patch_dim]`, patches in
    /// row-major grid order, each patch flattened channel-major.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        patchify(&self.config, image)
    }
}

pub fn patchify(cfg: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    let side = cfg.image_side();
    let want = [cfg.image_channels, side, side];
    if image.shape() != want {
        return Err(Error::shape(
            "patchify",
            format!("image {:?} does not match expected {:?}", image.shape(), want),
        ));
    }
    let ps = cfg.patch_size;
    let src = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..cfg.patch_grid {
        for gx in 0..cfg.patch_grid {
            for c in 0..cfg.image_channels {
                for y in 0..ps {
                    let row = gy * ps + y;
                    let base = c * side * side + row * side + gx * ps;
                    out.extend_from_slice(&src[base..base + ps]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Backbone parameters as graph nodes.
#[derive(Clone, Debug)]
pub struct BoundViT {
    pub config: ViTConfig,
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
    pub norm_g: Var,
    pub norm_b: Var,
}

impl BoundViT {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.push(self.norm_g);
        v.push(self.norm_b);
        v
    }

    /// Patch embedding, CLS prepend and positional embedding: `[N_x, d]`.
    pub fn embed(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let x = g.linear(patches, self.patch_w, self.patch_b)?;
        let x = g.concat_rows(&[self.cls, x])?;
        g.add(x, self.pos)
    }

    /// Final LayerNorm on the CLS row followed by the classification head.
    pub fn classify(&self, g: &mut Graph, head: &BoundHead, z: Var) -> Result<Var> {
        let cls = g.slice_rows(z, 0, 1)?;
        let cls = g.layer_norm(cls, self.norm_g, self.norm_b, self.config.ln_eps)?;
        g.linear(cls, head.w, head.b)
    }
}

/// Linear classification head on the final CLS feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w: Arc<Tensor>,
    pub b: Arc<Tensor>,
}

impl Head {
    pub fn zeros(embed_dim: usize, num_classes: usize) -> Self {
        Head {
            w: Arc::new(Tensor::zeros(&[embed_dim, num_classes])),
            b: Arc::new(Tensor::zeros(&[num_classes])),
        }
    }

    pub fn init(embed_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Head {
            w: xavier(embed_dim, num_classes, &mut rng),
            b: Arc::new(Tensor::zeros(&[num_classes])),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.b.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHead {
        BoundHead {
            w: g.leaf_shared(self.w.clone(), trainable),
            b: g.leaf_shared(self.b.clone(), trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub w: Var,
    pub b: Var,
}
