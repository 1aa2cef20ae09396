//! Frozen dual-branch transformer encoder.
//!
//! Both branches are pre-norm transformer stacks with bidirectional
//! attention. The vision branch embeds a patch grid and prepends a class
//! token; the text branch looks up token ids and pools from the final
//! position. At interaction layers a block of prompt rows is prefixed to the
//! feature tokens and stripped again after the layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MitpError, Result};
use crate::numerics::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Rng, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub num_heads: usize,
    pub n_patches: usize,
    pub raw_dim: usize,
    pub n_text_tokens: usize,
    pub vocab_size: usize,
    pub d_joint: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            d_v: 32,
            d_t: 24,
            num_heads: 4,
            n_patches: 16,
            raw_dim: 16,
            n_text_tokens: 12,
            vocab_size: 64,
            d_joint: 16,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("num_heads", self.num_heads),
            ("n_patches", self.n_patches),
            ("raw_dim", self.raw_dim),
            ("n_text_tokens", self.n_text_tokens),
            ("vocab_size", self.vocab_size),
            ("d_joint", self.d_joint),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MitpError::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.d_v % self.num_heads != 0 || self.d_t % self.num_heads != 0 {
            return Err(MitpError::Config(format!(
                "num_heads {} must divide d_v {} and d_t {}",
                self.num_heads, self.d_v, self.d_t
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(MitpError::Config("encoder.init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Vision => self.d_v,
            Modality::Text => self.d_t,
        }
    }

    /// Closed-form parameter count of one branch.
    pub fn branch_param_count(&self, modality: Modality) -> usize {
        let d = self.width(modality);
        let h = d * self.mlp_ratio;
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        let embed = match modality {
            Modality::Vision => self.raw_dim * d + d + (self.n_patches + 1) * d,
            Modality::Text => self.vocab_size * d + self.n_text_tokens * d,
        };
        embed + self.num_layers * per_layer + 2 * d + d * self.d_joint
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Vision => Modality::Text,
            Modality::Text => Modality::Vision,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Interaction,
    Extraction,
}

/// Per-layer role tags derived from the interaction layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRoles {
    roles: Vec<LayerRole>,
    interaction: Vec<usize>,
}

impl LayerRoles {
    /// Interaction layers must be strictly increasing, inside the stack, and
    /// equally spaced when there is more than one.
    pub fn new(num_layers: usize, interaction: &[usize]) -> Result<Self> {
        if let Some(&bad) = interaction.iter().find(|&&l| l >= num_layers) {
            return Err(MitpError::Config(format!(
                "interaction layer {bad} outside a {num_layers}-layer encoder"
            )));
        }
        if interaction.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MitpError::Config(format!(
                "interaction layers {interaction:?} must be strictly increasing"
            )));
        }
        if interaction.len() > 2 {
            let gap = interaction[1] - interaction[0];
            if interaction.windows(2).any(|w| w[1] - w[0] != gap) {
                return Err(MitpError::Config(format!(
                    "interaction layers {interaction:?} must be equally spaced"
                )));
            }
        }
        let mut roles = vec![LayerRole::Extraction; num_layers];
        for &l in interaction {
            roles[l] = LayerRole::Interaction;
        }
        Ok(Self {
            roles,
            interaction: interaction.to_vec(),
        })
    }

    pub fn role(&self, layer: usize) -> LayerRole {
        self.roles[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.roles.len()
    }

    pub fn interaction_layers(&self) -> &[usize] {
        &self.interaction
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
}

#[derive(Debug, Clone)]
pub enum Embedding {
    Vision {
        patch_proj: ParamId,
        class_token: ParamId,
        pos: ParamId,
    },
    Text {
        table: ParamId,
        pos: ParamId,
    },
}

/// Parameter handles of one frozen branch.
#[derive(Debug, Clone)]
pub struct BranchWeights {
    pub modality: Modality,
    pub width: usize,
    pub num_heads: usize,
    pub embedding: Embedding,
    pub layers: Vec<LayerParams>,
    pub ln_post_g: ParamId,
    pub ln_post_b: ParamId,
    pub proj: ParamId,
}

impl BranchWeights {
    fn init(config: &EncoderConfig, modality: Modality, rng: &mut Rng, store: &mut ParamStore) -> Self {
        let d = config.width(modality);
        let hidden = d * config.mlp_ratio;
        let std = config.init_std;
        let pre = modality.prefix();
        let mut add = |name: String, t: Tensor| store.add(name, ParamGroup::Backbone, t, true);

        let embedding = match modality {
            Modality::Vision => Embedding::Vision {
                patch_proj: add(format!("{pre}.patch_proj"), rng.gaussian(&[config.raw_dim, d], std)),
                class_token: add(format!("{pre}.class_token"), rng.gaussian(&[1, d], std)),
                pos: add(format!("{pre}.pos"), rng.gaussian(&[config.n_patches + 1, d], std)),
            },
            Modality::Text => Embedding::Text {
                table: add(format!("{pre}.token_table"), rng.gaussian(&[config.vocab_size, d], std)),
                pos: add(format!("{pre}.pos"), rng.gaussian(&[config.n_text_tokens, d], std)),
            },
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                let n = |s: &str| format!("{pre}.layers.{l}.{s}");
                LayerParams {
                    ln1_g: add(n("ln1.gain"), Tensor::full(&[d], 1.0)),
                    ln1_b: add(n("ln1.bias"), Tensor::zeros(&[d])),
                    w_qkv: add(n("attn.w_qkv"), rng.gaussian(&[d, 3 * d], std)),
                    b_qkv: add(n("attn.b_qkv"), Tensor::zeros(&[3 * d])),
                    w_o: add(n("attn.w_o"), rng.gaussian(&[d, d], std)),
                    b_o: add(n("attn.b_o"), Tensor::zeros(&[d])),
                    ln2_g: add(n("ln2.gain"), Tensor::full(&[d], 1.0)),
                    ln2_b: add(n("ln2.bias"), Tensor::zeros(&[d])),
                    w_fc1: add(n("mlp.w_fc1"), rng.gaussian(&[d, hidden], std)),
                    b_fc1: add(n("mlp.b_fc1"), Tensor::zeros(&[hidden])),
                    w_fc2: add(n("mlp.w_fc2"), rng.gaussian(&[hidden, d], std)),
                    b_fc2: add(n("mlp.b_fc2"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        let ln_post_g = add(format!("{pre}.ln_post.gain"), Tensor::full(&[d], 1.0));
        let ln_post_b = add(format!("{pre}.ln_post.bias"), Tensor::zeros(&[d]));
        let proj = add(format!("{pre}.proj"), rng.gaussian(&[d, config.d_joint], std));
        Self {
            modality,
            width: d,
            num_heads: config.num_heads,
            embedding,
            layers,
            ln_post_g,
            ln_post_b,
            proj,
        }
    }

    fn check_width(&self, g: &Graph, seq: NodeId, op: &'static str) -> Result<()> {
        match g.shape(seq) {
            [_, w] if *w == self.width => Ok(()),
            s => Err(MitpError::shape(op, s, &[0, self.width])),
        }
    }

    /// One pre-norm transformer block over the whole sequence.
    pub fn layer_forward(&self, g: &mut Graph, store: &ParamStore, layer: usize, seq: NodeId) -> Result<NodeId> {
        self.check_width(g, seq, "layer_forward")?;
        let p = self
            .layers
            .get(layer)
            .ok_or_else(|| MitpError::invalid("layer_forward", format!("no layer {layer}")))?;
        let d = self.width;
        let heads = self.num_heads;
        let hd = d / heads;
        let mut pid = |id| g.param(store, id);
        let (ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o) =
            (pid(p.ln1_g), pid(p.ln1_b), pid(p.w_qkv), pid(p.b_qkv), pid(p.w_o), pid(p.b_o));
        let (ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2) =
            (pid(p.ln2_g), pid(p.ln2_b), pid(p.w_fc1), pid(p.b_fc1), pid(p.w_fc2), pid(p.b_fc2));

        let h = g.layer_norm(seq, ln1_g, ln1_b, LN_EPS)?;
        let qkv = g.matmul(h, w_qkv)?;
        let qkv = g.add_row(qkv, b_qkv)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_out = Vec::with_capacity(heads);
        for i in 0..heads {
            let q = g.slice_cols(qkv, i * hd, (i + 1) * hd)?;
            let k = g.slice_cols(qkv, d + i * hd, d + (i + 1) * hd)?;
            let v = g.slice_cols(qkv, 2 * d + i * hd, 2 * d + (i + 1) * hd)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            head_out.push(g.matmul(attn, v)?);
        }
        let attn = if heads == 1 { head_out[0] } else { g.concat_cols(&head_out)? };
        let attn = g.matmul(attn, w_o)?;
        let attn = g.add_row(attn, b_o)?;
        let x = g.add(seq, attn)?;

        let h = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let f = g.matmul(h, w_fc1)?;
        let f = g.add_row(f, b_fc1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w_fc2)?;
        let f = g.add_row(f, b_fc2)?;
        g.add(x, f)
    }

    /// Runs `layer` on the feature tokens, with `prompt` rows prefixed when
    /// given. Returns the prompt rows of the output (if any) and the feature
    /// rows.
    pub fn prompted_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        feats: NodeId,
        prompt: Option<NodeId>,
    ) -> Result<(Option<NodeId>, NodeId)> {
        let Some(prompt) = prompt else {
            return Ok((None, self.layer_forward(g, store, layer, feats)?));
        };
        self.check_width(g, prompt, "prompted_layer")?;
        let l = g.shape(prompt)[0];
        let n = g.shape(feats)[0];
        let seq = g.concat_rows(&[prompt, feats])?;
        let out = self.layer_forward(g, store, layer, seq)?;
        let p_hat = g.slice_rows(out, 0, l)?;
        let feats = g.slice_rows(out, l, l + n)?;
        Ok((Some(p_hat), feats))
    }

    /// Final layer norm on the pooled token, projection to the joint space
    /// and unit normalisation. Vision pools the class token (row 0), text
    /// the last position.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, feats: NodeId) -> Result<NodeId> {
        let n = g.shape(feats)[0];
        let row = match self.modality {
            Modality::Vision => 0,
            Modality::Text => n - 1,
        };
        let tok = g.slice_rows(feats, row, row + 1)?;
        let (lg, lb, proj) = (
            g.param(store, self.ln_post_g),
            g.param(store, self.ln_post_b),
            g.param(store, self.proj),
        );
        let h = g.layer_norm(tok, lg, lb, LN_EPS)?;
        let z = g.matmul(h, proj)?;
        g.l2_normalize(z)
    }

    /// Runs the whole stack with prompts attached at the scheduled layers.
    pub fn branch_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: NodeId,
        roles: &LayerRoles,
        schedule: &BTreeMap<usize, NodeId>,
    ) -> Result<BranchOutput> {
        for &l in schedule.keys() {
            if l >= roles.num_layers() || roles.role(l) != LayerRole::Interaction {
                return Err(MitpError::invalid(
                    "branch_forward",
                    format!("prompt scheduled at extraction layer {l}"),
                ));
            }
        }
        let mut feats = tokens;
        let mut prompt_outputs = BTreeMap::new();
        for layer in 0..self.layers.len() {
            let (p_hat, next) = self.prompted_layer(g, store, layer, feats, schedule.get(&layer).copied())?;
            if let Some(p) = p_hat {
                prompt_outputs.insert(layer, p);
            }
            feats = next;
        }
        let pooled = self.pool(g, store, feats)?;
        Ok(BranchOutput { pooled, prompt_outputs })
    }

    /// Runs layers `range` without prompts.
    pub fn run_layers(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut feats: NodeId,
        range: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        for layer in range {
            feats = self.layer_forward(g, store, layer, feats)?;
        }
        Ok(feats)
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Unit-norm 1×d_joint row.
    pub pooled: NodeId,
    /// Prompt rows of each interaction layer's output.
    pub prompt_outputs: BTreeMap<usize, NodeId>,
}

/// The frozen vision and text branches.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub vision: BranchWeights,
    pub text: BranchWeights,
}

impl DualEncoder {
    /// Registers seeded Gaussian weights (frozen) in `store`. The same seed
    /// and config always give the same weights.
    pub fn new(config: &EncoderConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let vision = BranchWeights::init(config, Modality::Vision, &mut root.fork("encoder.vision"), store);
        let text = BranchWeights::init(config, Modality::Text, &mut root.fork("encoder.text"), store);
        Ok(Self {
            config: config.clone(),
            vision,
            text,
        })
    }

    pub fn branch(&self, modality: Modality) -> &BranchWeights {
        match modality {
            Modality::Vision => &self.vision,
            Modality::Text => &self.text,
        }
    }

    /// Replaces backbone weights with those in a weight file.
    pub fn load_weights(&self, store: &mut ParamStore, path: &Path) -> Result<usize> {
        crate::weights::load_into(store, path)
    }

    /// Patch embedding plus positional embedding, class token at row 0.
    pub fn embed_image(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor) -> Result<NodeId> {
        let cfg = &self.config;
        if patches.shape() != [cfg.n_patches, cfg.raw_dim] {
            return Err(MitpError::shape("embed_image", patches.shape(), &[cfg.n_patches, cfg.raw_dim]));
        }
        let Embedding::Vision {
            patch_proj,
            class_token,
            pos,
        } = self.vision.embedding
        else {
            unreachable!("vision branch has a vision embedding")
        };
        let x = g.constant(patches.clone());
        let w = g.param(store, patch_proj);
        let x = g.matmul(x, w)?;
        let cls = g.param(store, class_token);
        let seq = g.concat_rows(&[cls, x])?;
        let pos = g.param(store, pos);
        g.add(seq, pos)
    }

    /// Token lookup plus positional embedding. Sequences shorter than
    /// `n_text_tokens` use the leading positions.
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        let cfg = &self.config;
        if ids.is_empty() || ids.len() > cfg.n_text_tokens {
            return Err(MitpError::invalid(
                "embed_text",
                format!("sequence length {} not in 1..={}", ids.len(), cfg.n_text_tokens),
            ));
        }
        if let Some((i, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= cfg.vocab_size) {
            return Err(MitpError::invalid(
                "embed_text",
                format!("token id {id} at index {i} outside vocabulary of {}", cfg.vocab_size),
            ));
        }
        let Embedding::Text { table, pos } = self.text.embedding else {
            unreachable!("text branch has a text embedding")
        };
        let table = g.param(store, table);
        let x = g.gather_rows(table, ids)?;
        let pos = g.param(store, pos);
        let pos = if ids.len() == cfg.n_text_tokens {
            pos
        } else {
            g.slice_rows(pos, 0, ids.len())?
        };
        g.add(x, pos)
    }

    /// Frozen forward of the first `layers` layers of a branch, outside any
    /// training graph.
    pub fn encode_prefix(&self, store: &ParamStore, modality: Modality, input: &BranchInput, layers: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let tokens = match (modality, input) {
            (Modality::Vision, BranchInput::Patches(p)) => self.embed_image(&mut g, store, p)?,
            (Modality::Text, BranchInput::Tokens(ids)) => self.embed_text(&mut g, store, ids)?,
            _ => return Err(MitpError::invalid("encode_prefix", "input does not match branch")),
        };
        let out = self.branch(modality).run_layers(&mut g, store, tokens, 0..layers)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone)]
pub enum BranchInput<'a> {
    Patches(&'a Tensor),
    Tokens(&'a [usize]),
}
