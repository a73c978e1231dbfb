//! Appearance and semantic encoders plus the camera/viewpoint side table.
//!
//! The appearance encoder is a small conv → BN → ReLU stack followed by
//! global average pooling. The semantic branch has three interchangeable
//! sources: a miniature vision transformer trained jointly, a frozen random
//! projection of the downsampled image, or precomputed embeddings looked up
//! by sample key from a JSON-lines manifest.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Init};
use crate::ops;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceConfig {
    pub stages: Vec<ConvStage>,
    /// `[H, W]`.
    pub input_size: [usize; 2],
    /// Conv biases are redundant in front of batch norm, so they are off
    /// unless asked for.
    pub conv_bias: bool,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| ConvStage { channels, stride: 2 })
                .collect(),
            input_size: [64, 64],
            conv_bias: false,
        }
    }
}

impl AppearanceConfig {
    pub fn d_a(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model.appearance.stages must not be empty".into()));
        }
        if let Some(i) = self.stages.iter().position(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config(format!(
                "model.appearance.stages[{i}] needs channels >= 1 and stride >= 1"
            )));
        }
        if self.input_size.contains(&0) {
            return Err(Error::Config("model.appearance.input_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMode {
    MiniVit,
    RandomProjection,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub mode: SemanticMode,
    pub patch_size: usize,
    pub d_s: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of each transformer MLP as a multiple of `d_s`.
    pub mlp_ratio: usize,
    pub manifest_path: Option<PathBuf>,
    /// Seed of the frozen matrix in `random_projection` mode.
    pub projection_seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            mode: SemanticMode::MiniVit,
            patch_size: 8,
            d_s: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            manifest_path: None,
            projection_seed: 0,
        }
    }
}

impl SemanticConfig {
    pub fn validate(&self, input_size: [usize; 2]) -> Result<()> {
        if self.d_s == 0 {
            return Err(Error::Config("model.semantic.d_s must be >= 1".into()));
        }
        match self.mode {
            SemanticMode::MiniVit | SemanticMode::RandomProjection => {
                let p = self.patch_size;
                if p == 0 || input_size[0] % p != 0 || input_size[1] % p != 0 {
                    return Err(Error::Config(format!(
                        "model.semantic.patch_size {p} must divide the input size {input_size:?}"
                    )));
                }
            }
            SemanticMode::Manifest => {
                if self.manifest_path.is_none() {
                    return Err(Error::Config("model.semantic.manifest_path is required in manifest mode".into()));
                }
            }
        }
        if self.mode == SemanticMode::MiniVit {
            if self.depth == 0 || self.mlp_ratio == 0 {
                return Err(Error::Config("model.semantic.depth and mlp_ratio must be >= 1".into()));
            }
            if self.heads == 0 || self.d_s % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model.semantic.heads {} must divide d_s {}",
                    self.heads, self.d_s
                )));
            }
        }
        Ok(())
    }

    fn num_patches(&self, input_size: [usize; 2]) -> usize {
        (input_size[0] / self.patch_size) * (input_size[1] / self.patch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SideInfoConfig {
    pub enabled: bool,
    pub num_cameras: usize,
    pub num_viewpoints: usize,
}

impl Default for SideInfoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_cameras: 4,
            num_viewpoints: 2,
        }
    }
}

impl SideInfoConfig {
    pub fn rows(&self) -> usize {
        self.num_cameras * self.num_viewpoints
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.rows() == 0 {
            return Err(Error::Config(
                "model.side_info.num_cameras and num_viewpoints must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Precomputed semantic embeddings keyed by sample key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingLine {
    key: String,
    embedding: Vec<f64>,
}

impl EmbeddingTable {
    /// Reads `{"key", "embedding"}` lines; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut table = EmbeddingTable::default();
        let mut first_line: HashMap<String, usize> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
            if table.vectors.is_empty() {
                table.dim = rec.embedding.len();
            } else if rec.embedding.len() != table.dim {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: embedding has {} values, expected {}", rec.embedding.len(), table.dim),
                ));
            }
            if let Some(prev) = first_line.insert(rec.key.clone(), lineno) {
                return Err(Error::format(
                    path,
                    format!("duplicate key `{}` on lines {prev} and {lineno}", rec.key),
                ));
            }
            table.vectors.insert(rec.key, rec.embedding);
        }
        Ok(table)
    }
}

pub fn init_appearance<R: Rng>(init: &mut Init<'_, R>, cfg: &AppearanceConfig) {
    let mut cin = 3;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let fan_in = (cin * KERNEL * KERNEL) as f64;
        init.normal(
            &format!("app.stage{i}.conv.weight"),
            &[stage.channels, cin, KERNEL, KERNEL],
            (2.0 / fan_in).sqrt(),
        );
        if cfg.conv_bias {
            init.constant(&format!("app.stage{i}.conv.bias"), &[stage.channels], 0.0);
        }
        init.batch_norm(&format!("app.stage{i}.bn"), stage.channels);
        cin = stage.channels;
    }
}

fn check_images(images: &Tensor, input_size: [usize; 2]) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != input_size[0] || s[3] != input_size[1] {
        return Err(Error::shape("encoder input", s, &[0, 3, input_size[0], input_size[1]]));
    }
    Ok(())
}

/// `T_a`: conv stages then global average pooling, `N×d_a`.
pub fn appearance_forward(g: &mut Graph<'_>, cfg: &AppearanceConfig, images: &Tensor) -> Result<Var> {
    check_images(images, cfg.input_size)?;
    let mut x = g.constant(images.clone());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let w = g.param(&format!("app.stage{i}.conv.weight"))?;
        let b = if cfg.conv_bias {
            Some(g.param(&format!("app.stage{i}.conv.bias"))?)
        } else {
            None
        };
        x = ops::conv2d(&mut g.tape, x, w, b, stage.stride, KERNEL / 2)?;
        x = g.batch_norm(&format!("app.stage{i}.bn"), x)?;
        x = ops::relu(&mut g.tape, x)?;
    }
    ops::global_avg_pool(&mut g.tape, x)
}

pub fn init_semantic<R: Rng>(init: &mut Init<'_, R>, cfg: &SemanticConfig, input_size: [usize; 2]) {
    let d = cfg.d_s;
    let p = cfg.patch_size;
    match cfg.mode {
        SemanticMode::MiniVit => {
            let tokens = cfg.num_patches(input_size) + 1;
            init.linear("sem.patch", 3 * p * p, d, true);
            init.normal("sem.cls", &[1, d], 0.02);
            init.normal("sem.pos", &[tokens, d], 0.02);
            for b in 0..cfg.depth {
                let pre = format!("sem.block{b}");
                init.layer_norm(&format!("{pre}.ln1"), d);
                // A key bias shifts every score in a row equally, so it would never learn.
                init.linear(&format!("{pre}.attn.qkv"), d, 3 * d, false);
                init.linear(&format!("{pre}.attn.proj"), d, d, true);
                init.layer_norm(&format!("{pre}.ln2"), d);
                init.linear(&format!("{pre}.mlp.fc1"), d, cfg.mlp_ratio * d, true);
                init.linear(&format!("{pre}.mlp.fc2"), cfg.mlp_ratio * d, d, true);
            }
            init.layer_norm("sem.ln", d);
        }
        SemanticMode::RandomProjection => {
            init.buffers.insert("sem.projection", random_projection(cfg, input_size));
        }
        SemanticMode::Manifest => {}
    }
}

/// Frozen `(3·H/p·W/p)×d_s` Gaussian map determined by `projection_seed`.
pub fn random_projection(cfg: &SemanticConfig, input_size: [usize; 2]) -> Tensor {
    let din = 3 * cfg.num_patches(input_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
    let mut t = Tensor::randn(&[din, cfg.d_s], (1.0 / din as f64).sqrt(), &mut rng);
    t.requires_grad = false;
    t
}

/// Splits `N×3×H×W` into `(N·P)×(3·p·p)` patch rows, grid in row-major
/// order and each patch flattened as channel, row, column.
pub fn patchify(images: &Tensor, p: usize) -> Tensor {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let d = images.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    let plane = &d[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for y in 0..p {
                        let row = (py * p + y) * w + px * p;
                        out.extend_from_slice(&plane[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * gh * gw, c * p * p], out).expect("patch layout")
}

/// Block-averages each channel by `p`, then flattens per sample to `N×(3·H/p·W/p)`.
fn downsample_flat(images: &Tensor, p: usize) -> Tensor {
    let patches = patchify(images, p);
    let pp = (p * p) as f64;
    let s = images.shape();
    let n = s[0];
    let per_sample = patches.rows() / n;
    let mut out = vec![0.0; n * per_sample * 3];
    for (r, row) in patches.data().chunks_exact(3 * p * p).enumerate() {
        let (sample, cell) = (r / per_sample, r % per_sample);
        for ch in 0..3 {
            let mean = row[ch * p * p..(ch + 1) * p * p].iter().sum::<f64>() / pp;
            out[sample * per_sample * 3 + ch * per_sample + cell] = mean;
        }
    }
    Tensor::new(vec![n, per_sample * 3], out).expect("downsample layout")
}

/// `T_s`, `N×d_s`, from the configured semantic source.
pub fn semantic_forward(
    g: &mut Graph<'_>,
    cfg: &SemanticConfig,
    input_size: [usize; 2],
    images: &Tensor,
    keys: &[String],
    table: Option<&EmbeddingTable>,
) -> Result<Var> {
    match cfg.mode {
        SemanticMode::MiniVit => {
            check_images(images, input_size)?;
            mini_vit(g, cfg, images)
        }
        SemanticMode::RandomProjection => {
            check_images(images, input_size)?;
            let x = g.constant(downsample_flat(images, cfg.patch_size));
            let w = g.constant(g.buffers.get("sem.projection")?.clone());
            ops::linear(&mut g.tape, x, w, None)
        }
        SemanticMode::Manifest => {
            let table = table.ok_or_else(|| Error::invalid("manifest mode needs a loaded embedding table"))?;
            if table.dim != cfg.d_s && !table.vectors.is_empty() {
                return Err(Error::shape("semantic manifest", &[table.dim], &[cfg.d_s]));
            }
            let mut data = Vec::with_capacity(keys.len() * cfg.d_s);
            for k in keys {
                let v = table.vectors.get(k).ok_or_else(|| Error::MissingKey(k.clone()))?;
                data.extend_from_slice(v);
            }
            Ok(g.constant(Tensor::new(vec![keys.len(), cfg.d_s], data)?))
        }
    }
}

fn mini_vit(g: &mut Graph<'_>, cfg: &SemanticConfig, images: &Tensor) -> Result<Var> {
    let n = images.shape()[0];
    let patches = g.constant(patchify(images, cfg.patch_size));
    let emb = g.linear("sem.patch", patches)?;
    let cls = g.param("sem.cls")?;
    let pos = g.param("sem.pos")?;
    let tokens = g.tape.shape(pos)[0];
    let mut x = ops::assemble_tokens(&mut g.tape, emb, cls, pos, n)?;
    for b in 0..cfg.depth {
        let pre = format!("sem.block{b}");
        let h = g.layer_norm(&format!("{pre}.ln1"), x)?;
        let qkv = g.linear(&format!("{pre}.attn.qkv"), h)?;
        let a = ops::self_attention(&mut g.tape, qkv, n, cfg.heads)?;
        let a = g.linear(&format!("{pre}.attn.proj"), a)?;
        x = ops::add(&mut g.tape, x, a)?;
        let h = g.layer_norm(&format!("{pre}.ln2"), x)?;
        let h = g.linear(&format!("{pre}.mlp.fc1"), h)?;
        let h = ops::gelu(&mut g.tape, h)?;
        let h = g.linear(&format!("{pre}.mlp.fc2"), h)?;
        x = ops::add(&mut g.tape, x, h)?;
    }
    let cls_out = ops::select_rows(&mut g.tape, x, tokens, 0)?;
    g.layer_norm("sem.ln", cls_out)
}

pub fn init_side_info<R: Rng>(init: &mut Init<'_, R>, cfg: &SideInfoConfig, d_f: usize) {
    if cfg.enabled {
        init.constant("side.table", &[cfg.rows(), d_f], 0.0);
    }
}

/// Row `camera·num_viewpoints + viewpoint` of the side table per sample,
/// or zeros when side information is disabled.
pub fn side_info_embed(
    g: &mut Graph<'_>,
    cfg: &SideInfoConfig,
    d_f: usize,
    cameras: &[usize],
    viewpoints: &[usize],
) -> Result<Var> {
    if cameras.len() != viewpoints.len() {
        return Err(Error::shape("side_info_embed", &[cameras.len()], &[viewpoints.len()]));
    }
    if !cfg.enabled {
        return Ok(g.constant(Tensor::zeros(&[cameras.len(), d_f])));
    }
    let mut rows = Vec::with_capacity(cameras.len());
    for (&c, &v) in cameras.iter().zip(viewpoints) {
        if c >= cfg.num_cameras || v >= cfg.num_viewpoints {
            return Err(Error::invalid(format!(
                "camera {c} / viewpoint {v} outside the {}×{} side table",
                cfg.num_cameras, cfg.num_viewpoints
            )));
        }
        rows.push(c * cfg.num_viewpoints + v);
    }
    let table = g.param("side.table")?;
    ops::gather_rows(&mut g.tape, table, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_layout() {
        // 1×3×2×4 image, patch 2: two patches side by side.
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let img = Tensor::new(vec![1, 3, 2, 4], data).unwrap();
        let p = patchify(&img, 2);
        assert_eq!(p.shape(), &[2, 12]);
        assert_eq!(&p.row(0)[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.row(1)[..4], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.row(0)[4..8], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn downsample_is_block_mean() {
        let img = Tensor::new(vec![1, 3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let d = downsample_flat(&img, 2);
        assert_eq!(d.data(), &[1.5, 5.5, 9.5]);
    }

    #[test]
    fn semantic_validation_names_fields() {
        let cfg = SemanticConfig {
            patch_size: 7,
            ..Default::default()
        };
        let msg = cfg.validate([64, 64]).unwrap_err().to_string();
        assert!(msg.contains("model.semantic.patch_size"), "{msg}");
        let cfg = SemanticConfig {
            mode: SemanticMode::Manifest,
            ..Default::default()
        };
        assert!(cfg.validate([64, 64]).unwrap_err().to_string().contains("manifest_path"));
    }
}
