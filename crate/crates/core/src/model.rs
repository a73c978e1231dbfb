//! The composed network: encoders, fusion, AFEM, side table and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    self, AppearanceConfig, EmbeddingTable, SemanticConfig, SemanticMode, SideInfoConfig,
};
use crate::error::{Error, Result};
use crate::fusion;
use crate::losses;
use crate::nn::{Graph, Init};
use crate::ops::Mode;
use crate::tape::Var;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub appearance: AppearanceConfig,
    pub semantic: SemanticConfig,
    pub d_f: usize,
    /// AFEM channel groups; must divide `d_f`.
    pub groups: usize,
    pub use_semantic: bool,
    pub use_afem: bool,
    pub side_info: SideInfoConfig,
    pub classifier_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            appearance: AppearanceConfig::default(),
            semantic: SemanticConfig::default(),
            d_f: 256,
            groups: 32,
            use_semantic: true,
            use_afem: true,
            side_info: SideInfoConfig::default(),
            classifier_init_std: 0.001,
        }
    }
}

/// Reduced models of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Appearance branch only; AFEM has nothing to refine.
    NoSem,
    /// Semantic features are fused but not enhanced: `T = T_u`.
    NoAfem,
    /// No camera/viewpoint side table.
    NoCv,
    /// Appearance only and no side table.
    Baseline,
}

impl Ablation {
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::NoSem => {
                cfg.use_semantic = false;
                cfg.use_afem = false;
            }
            Ablation::NoAfem => cfg.use_afem = false,
            Ablation::NoCv => cfg.side_info.enabled = false,
            Ablation::Baseline => {
                cfg.use_semantic = false;
                cfg.use_afem = false;
                cfg.side_info.enabled = false;
            }
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-sem" => Ok(Ablation::NoSem),
            "no-afem" => Ok(Ablation::NoAfem),
            "no-cv" => Ok(Ablation::NoCv),
            "baseline" => Ok(Ablation::Baseline),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected no-sem, no-afem, no-cv or baseline)"
            ))),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.appearance.validate()?;
        if self.use_semantic {
            self.semantic.validate(self.appearance.input_size)?;
        }
        self.side_info.validate()?;
        if self.d_f == 0 {
            return Err(Error::Config("model.d_f must be >= 1".into()));
        }
        if self.use_afem {
            if !self.use_semantic {
                return Err(Error::Config("model.use_afem needs model.use_semantic".into()));
            }
            if self.groups == 0 || self.d_f % self.groups != 0 {
                return Err(Error::Config(format!(
                    "model.groups {} must be >= 1 and divide d_f {}",
                    self.groups, self.d_f
                )));
            }
        }
        if !(self.classifier_init_std >= 0.0) {
            return Err(Error::Config("model.classifier_init_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// One batch of decoded, possibly augmented samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `N×3×H×W` in `[0, 1]`.
    pub images: Tensor,
    pub keys: Vec<String>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub viewpoints: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// The five feature stages of one forward pass, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub t_a: Var,
    pub t_s: Option<Var>,
    pub t_u: Var,
    /// AFEM input after projection, BN and ReLU.
    pub y: Option<Var>,
    pub t_s_prime: Option<Var>,
    pub side: Var,
    pub t: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub features: FeatureBundle,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub num_ids: usize,
    pub params: ParamSet,
    /// Batch-norm running statistics and the frozen projection, if any.
    pub buffers: ParamSet,
    pub embeddings: Option<EmbeddingTable>,
}

impl Model {
    /// Builds and initialises a model; manifest mode loads its embedding
    /// table from `semantic.manifest_path`.
    pub fn new(config: ModelConfig, num_ids: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_ids < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {num_ids}")));
        }
        let embeddings = match (&config.semantic.manifest_path, config.semantic.mode) {
            (Some(path), SemanticMode::Manifest) if config.use_semantic => {
                let table = EmbeddingTable::load(path)?;
                if !table.vectors.is_empty() && table.dim != config.semantic.d_s {
                    return Err(Error::shape("semantic manifest", &[table.dim], &[config.semantic.d_s]));
                }
                Some(table)
            }
            _ => None,
        };
        Self::with_embeddings(config, num_ids, seed, embeddings)
    }

    pub fn with_embeddings(
        config: ModelConfig,
        num_ids: usize,
        seed: u64,
        embeddings: Option<EmbeddingTable>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut rng,
        };
        let c = &config;
        encoders::init_appearance(&mut init, &c.appearance);
        let d_a = c.appearance.d_a();
        let mut din = d_a;
        if c.use_semantic {
            encoders::init_semantic(&mut init, &c.semantic, c.appearance.input_size);
            din += c.semantic.d_s;
        }
        fusion::init_fusion(&mut init, din, c.d_f);
        if c.use_afem {
            fusion::init_afem(&mut init, c.semantic.d_s, c.d_f, c.groups);
        }
        encoders::init_side_info(&mut init, &c.side_info, c.d_f);
        init.normal("cls.weight", &[c.d_f, num_ids], c.classifier_init_std);
        Ok(Self {
            config,
            num_ids,
            params,
            buffers,
            embeddings,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<ForwardOut> {
        let c = &self.config;
        let t_a = encoders::appearance_forward(g, &c.appearance, &batch.images)?;
        let t_s = if c.use_semantic {
            Some(encoders::semantic_forward(
                g,
                &c.semantic,
                c.appearance.input_size,
                &batch.images,
                &batch.keys,
                self.embeddings.as_ref(),
            )?)
        } else {
            None
        };
        let t_u = fusion::fuse(g, t_s, t_a)?;
        let (t_s_prime, y) = match t_s {
            Some(s) if c.use_afem => {
                let (out, y) = fusion::afem_forward(g, s, c.groups)?;
                (Some(out), Some(y))
            }
            _ => (None, None),
        };
        let side = encoders::side_info_embed(g, &c.side_info, c.d_f, &batch.cameras, &batch.viewpoints)?;
        let t = fusion::final_feature(g, t_u, t_s_prime, c.side_info.enabled.then_some(side))?;
        let w = g.param("cls.weight")?;
        let logits = losses::classify(&mut g.tape, t, w)?;
        Ok(ForwardOut {
            features: FeatureBundle {
                t_a,
                t_s,
                t_u,
                y,
                t_s_prime,
                side,
                t,
            },
            logits,
        })
    }

    /// Final features `T` in eval mode.
    pub fn embed(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, &self.buffers, Mode::Eval);
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out.features.t).clone())
    }

    /// Parameters that never receive gradient: biases feeding train-mode
    /// batch norm are cancelled by the mean subtraction.
    pub fn structurally_zero_grad(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| *n == "afem.proj.bias" || (n.starts_with("app.stage") && n.ends_with("conv.bias")))
            .map(str::to_string)
            .collect()
    }
}
