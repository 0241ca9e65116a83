//! The full trainable model: one aggregator per feature layer, the
//! alignment stack, the identity head, and the class centers.
//!
//! Parameter groups are addressed by stable dotted names (for the
//! optimizer, gradient checking and checkpointing). The class centers are
//! deliberately not a named group: they follow their own update rule, not
//! the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ata::{AtaParams, Reduction};
use crate::data::types::{derive_global, GlobalFeature, ImageRecord, LayerTag};
use crate::error::Result;
use crate::fga::{fga_forward, FgaParams, TokenSet};
use crate::losses::{ClassCenters, IdentityHead};
use crate::numerics::matrix::{Matrix, Real};

/// Architecture hyper-parameters; everything a fresh [`ModelParams`] needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Clusters per layer (token count M).
    pub num_clusters: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    /// Common dimension the alignment blocks operate in.
    pub token_dim: usize,
    /// Softmax temperature τ of the token attention.
    pub temperature: f64,
    pub num_classes: usize,
    /// Learning rate of the class-center update rule.
    pub center_rate: f64,
    pub reduction: Reduction,
}

impl ModelConfig {
    pub fn new(coarse_dim: usize, fine_dim: usize, num_classes: usize) -> Self {
        Self {
            num_clusters: 8,
            coarse_dim,
            fine_dim,
            token_dim: coarse_dim,
            temperature: 4.0,
            num_classes,
            center_rate: 0.5,
            reduction: Reduction::Max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub fga_coarse: FgaParams<T>,
    pub fga_fine: FgaParams<T>,
    pub ata: AtaParams<T>,
    pub identity: IdentityHead<T>,
    pub centers: ClassCenters<T>,
}

/// One image pushed through the per-image half of the model: pooled global
/// feature plus one token set per layer. Pair-independent, so cacheable.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T> {
    pub global: GlobalFeature<T>,
    pub coarse_tokens: TokenSet<T>,
    pub fine_tokens: TokenSet<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fga_coarse: FgaParams::init(config.num_clusters, config.coarse_dim, rng),
            fga_fine: FgaParams::init(config.num_clusters, config.fine_dim, rng),
            ata: AtaParams::init(
                config.coarse_dim,
                config.fine_dim,
                config.token_dim,
                T::from_f64(config.temperature),
                rng,
            )?,
            identity: IdentityHead::init(config.num_classes, config.coarse_dim, rng),
            centers: ClassCenters::init(
                config.num_classes,
                config.coarse_dim,
                T::from_f64(config.center_rate),
            ),
        })
    }

    /// Global feature (pooled from the coarse layer, the backbone's final
    /// one) and per-layer tokens for one image.
    pub fn embed(&self, record: &ImageRecord<T>) -> Result<ImageEmbedding<T>> {
        let coarse = record.layer(LayerTag::Coarse)?;
        let fine = record.layer(LayerTag::Fine)?;
        let global = derive_global(coarse);
        let (coarse_tokens, _) = fga_forward(coarse, &self.fga_coarse)?;
        let (fine_tokens, _) = fga_forward(fine, &self.fga_fine)?;
        Ok(ImageEmbedding {
            global,
            coarse_tokens,
            fine_tokens,
        })
    }

    /// Names of all optimizer-owned parameter groups, in a stable order.
    pub fn group_names() -> Vec<String> {
        let mut names = Vec::new();
        for layer in ["fga_coarse", "fga_fine"] {
            for f in ["centers", "biases", "anchors"] {
                names.push(format!("{}.{}", layer, f));
            }
        }
        for block in ["ata.block_pair", "ata.block_c2f"] {
            for f in [
                "wq", "wk", "wv", "wo", "w1", "w2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
            ] {
                names.push(format!("{}.{}", block, f));
            }
        }
        names.push("ata.proj_coarse".into());
        names.push("ata.proj_fine".into());
        names.push("identity.weight".into());
        names.push("identity.bias".into());
        names
    }

    pub fn group(&self, name: &str) -> Option<&Matrix<T>> {
        let (head, rest) = name.split_once('.')?;
        match head {
            "fga_coarse" | "fga_fine" => {
                let fga = if head == "fga_coarse" {
                    &self.fga_coarse
                } else {
                    &self.fga_fine
                };
                match rest {
                    "centers" => Some(&fga.centers),
                    "biases" => Some(&fga.biases),
                    "anchors" => Some(&fga.anchors),
                    _ => None,
                }
            }
            "ata" => match rest {
                "proj_coarse" => Some(&self.ata.proj_coarse),
                "proj_fine" => Some(&self.ata.proj_fine),
                _ => {
                    let (block, field) = rest.split_once('.')?;
                    let b = match block {
                        "block_pair" => &self.ata.block_pair,
                        "block_c2f" => &self.ata.block_c2f,
                        _ => return None,
                    };
                    match field {
                        "wq" => Some(&b.wq),
                        "wk" => Some(&b.wk),
                        "wv" => Some(&b.wv),
                        "wo" => Some(&b.wo),
                        "w1" => Some(&b.w1),
                        "w2" => Some(&b.w2),
                        "ln1_gain" => Some(&b.ln1_gain),
                        "ln1_bias" => Some(&b.ln1_bias),
                        "ln2_gain" => Some(&b.ln2_gain),
                        "ln2_bias" => Some(&b.ln2_bias),
                        _ => None,
                    }
                }
            },
            "identity" => match rest {
                "weight" => Some(&self.identity.weight),
                "bias" => Some(&self.identity.bias),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let (head, rest) = name.split_once('.')?;
        match head {
            "fga_coarse" | "fga_fine" => {
                let fga = if head == "fga_coarse" {
                    &mut self.fga_coarse
                } else {
                    &mut self.fga_fine
                };
                match rest {
                    "centers" => Some(&mut fga.centers),
                    "biases" => Some(&mut fga.biases),
                    "anchors" => Some(&mut fga.anchors),
                    _ => None,
                }
            }
            "ata" => match rest {
                "proj_coarse" => Some(&mut self.ata.proj_coarse),
                "proj_fine" => Some(&mut self.ata.proj_fine),
                _ => {
                    let (block, field) = rest.split_once('.')?;
                    let b = match block {
                        "block_pair" => &mut self.ata.block_pair,
                        "block_c2f" => &mut self.ata.block_c2f,
                        _ => return None,
                    };
                    match field {
                        "wq" => Some(&mut b.wq),
                        "wk" => Some(&mut b.wk),
                        "wv" => Some(&mut b.wv),
                        "wo" => Some(&mut b.wo),
                        "w1" => Some(&mut b.w1),
                        "w2" => Some(&mut b.w2),
                        "ln1_gain" => Some(&mut b.ln1_gain),
                        "ln1_bias" => Some(&mut b.ln1_bias),
                        "ln2_gain" => Some(&mut b.ln2_gain),
                        "ln2_bias" => Some(&mut b.ln2_bias),
                        _ => None,
                    }
                }
            },
            "identity" => match rest {
                "weight" => Some(&mut self.identity.weight),
                "bias" => Some(&mut self.identity.bias),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn temperature(&self) -> T {
        self.ata.temperature
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        let fga = |p: &FgaParams<T>| FgaParams {
            centers: p.centers.to_f64(),
            biases: p.biases.to_f64(),
            anchors: p.anchors.to_f64(),
        };
        let block = |b: &crate::ata::AttentionBlockParams<T>| crate::ata::AttentionBlockParams {
            wq: b.wq.to_f64(),
            wk: b.wk.to_f64(),
            wv: b.wv.to_f64(),
            wo: b.wo.to_f64(),
            w1: b.w1.to_f64(),
            w2: b.w2.to_f64(),
            ln1_gain: b.ln1_gain.to_f64(),
            ln1_bias: b.ln1_bias.to_f64(),
            ln2_gain: b.ln2_gain.to_f64(),
            ln2_bias: b.ln2_bias.to_f64(),
        };
        ModelParams {
            fga_coarse: fga(&self.fga_coarse),
            fga_fine: fga(&self.fga_fine),
            ata: AtaParams {
                block_pair: block(&self.ata.block_pair),
                block_c2f: block(&self.ata.block_c2f),
                proj_coarse: self.ata.proj_coarse.to_f64(),
                proj_fine: self.ata.proj_fine.to_f64(),
                temperature: self.ata.temperature.as_f64(),
            },
            identity: IdentityHead {
                weight: self.identity.weight.to_f64(),
                bias: self.identity.bias.to_f64(),
            },
            centers: ClassCenters {
                centers: self.centers.centers.to_f64(),
                rate: self.centers.rate.as_f64(),
            },
        }
    }
}
