//! A frozen dual encoder plus the trainable parts a variant attaches to it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{HubInput, RunConfig, Variant};
use crate::classifier::{build_class_embeddings, logits_node, loss_multi_node, loss_uni_node, ClassPromptSet, Task};
use crate::datasets::Example;
use crate::encoder::{BranchInput, DualEncoder, EncoderConfig, LayerRoles, Modality};
use crate::error::{MitpError, Result};
use crate::memory_hub::{MemoryHub, Mlp2};
use crate::numerics::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Rng, Tensor};
use crate::prompt_bank::{PromptBank, PROMPT_INIT_STD};

/// Plain MLP exchange: `p_m_next = MLP_m([p_m ; p̃_m'])`, with `p̃` from the
/// same cross projections the hub uses.
#[derive(Debug, Clone)]
pub struct NaiveInteraction {
    pub cross_t2v: Mlp2,
    pub cross_v2t: Mlp2,
    pub mlp_v: Mlp2,
    pub mlp_t: Mlp2,
}

impl NaiveInteraction {
    pub fn init(rng: &mut Rng, d_v: usize, d_t: usize, hidden: usize, store: &mut ParamStore) -> Self {
        let grp = ParamGroup::MemoryHub;
        Self {
            cross_t2v: Mlp2::init("naive.cross_t2v", grp, d_t, hidden, d_v, rng, store),
            cross_v2t: Mlp2::init("naive.cross_v2t", grp, d_v, hidden, d_t, rng, store),
            mlp_v: Mlp2::init("naive.mlp_v", grp, 2 * d_v, hidden, d_v, rng, store),
            mlp_t: Mlp2::init("naive.mlp_t", grp, 2 * d_t, hidden, d_t, rng, store),
        }
    }

    pub fn param_count(d_v: usize, d_t: usize, hidden: usize) -> usize {
        Mlp2::param_count(d_t, hidden, d_v)
            + Mlp2::param_count(d_v, hidden, d_t)
            + Mlp2::param_count(2 * d_v, hidden, d_v)
            + Mlp2::param_count(2 * d_t, hidden, d_t)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, p_v: NodeId, p_t: NodeId) -> Result<(NodeId, NodeId)> {
        let t2v = self.cross_t2v.forward(g, store, p_t)?;
        let v2t = self.cross_v2t.forward(g, store, p_v)?;
        let in_v = g.concat_cols(&[p_v, t2v])?;
        let in_t = g.concat_cols(&[p_t, v2t])?;
        Ok((self.mlp_v.forward(g, store, in_v)?, self.mlp_t.forward(g, store, in_t)?))
    }
}

/// One trainable prompt per interaction layer and branch.
#[derive(Debug, Clone)]
pub struct DeepPrompts {
    pub vision: Vec<ParamId>,
    pub text: Vec<ParamId>,
}

impl DeepPrompts {
    pub fn init(rng: &mut Rng, layers: &[usize], length: usize, d_v: usize, d_t: usize, store: &mut ParamStore) -> Self {
        let mut make = |m: &str, d: usize| -> Vec<ParamId> {
            layers
                .iter()
                .map(|l| {
                    store.add(
                        format!("deep_prompts.{m}.{l}"),
                        ParamGroup::PromptBank,
                        rng.gaussian(&[length, d], PROMPT_INIT_STD),
                        false,
                    )
                })
                .collect()
        };
        let vision = make("vision", d_v);
        let text = make("text", d_t);
        Self { vision, text }
    }
}

#[derive(Debug, Clone)]
pub enum Interaction {
    None,
    Bank(PromptBank),
    Hub(PromptBank, MemoryHub),
    Naive(PromptBank, NaiveInteraction),
    Deep(DeepPrompts),
}

/// Frozen features at the first interaction layer (or at the top of the
/// stack when there is none).
#[derive(Debug, Clone)]
pub struct Prefix {
    pub vision: Tensor,
    pub text: Option<Tensor>,
}

/// Where a forward pass starts.
#[derive(Debug, Clone, Copy)]
pub enum ForwardInput<'a> {
    Cached(&'a Prefix),
    /// From raw inputs, with the embedding and prefix layers in the graph.
    Raw(&'a Example),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub encoder: DualEncoder,
    pub roles: LayerRoles,
    pub interaction: Interaction,
    pub classes: ClassPromptSet,
}

impl Model {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = DualEncoder::new(&config.encoder, config.backbone_seed, &mut store)?;
        if let Some(path) = &config.backbone_weights {
            encoder.load_weights(&mut store, path)?;
        }
        let roles = config.layer_roles()?;
        let classes = build_class_embeddings(&encoder, &store, &config.class_prompts()?)?;

        let root = Rng::new(config.seed);
        let (l, d_v, d_t, h) = (
            config.prompt_length,
            config.encoder.d_v,
            config.encoder.d_t,
            config.hub_hidden(),
        );
        let mut bank = || PromptBank::init(&mut root.fork("prompt_bank"), l, d_t, d_v, &mut store);
        let interaction = match config.ablation_variant {
            Variant::Baseline => Interaction::None,
            Variant::PromptsOnly => Interaction::Bank(bank()?),
            Variant::MitpFull => {
                let bank = bank()?;
                let mut hub = MemoryHub::init(&mut root.fork("memory_hub"), d_v, d_t, h, config.similarity, &mut store);
                hub.mmd_bandwidth = config.mmd_bandwidth;
                Interaction::Hub(bank, hub)
            }
            Variant::NaiveMlpInteraction => {
                let bank = bank()?;
                let naive = NaiveInteraction::init(&mut root.fork("naive"), d_v, d_t, h, &mut store);
                Interaction::Naive(bank, naive)
            }
            Variant::DeepPromptTuning => Interaction::Deep(DeepPrompts::init(
                &mut root.fork("deep_prompts"),
                &config.interaction_layers,
                l,
                d_v,
                d_t,
                &mut store,
            )),
        };
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            roles,
            interaction,
            classes,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.ablation_variant
    }

    pub fn task(&self) -> Task {
        self.config.task()
    }

    fn layers(&self) -> &[usize] {
        self.roles.interaction_layers()
    }

    /// Depth of the cached frozen prefix.
    pub fn prefix_depth(&self) -> usize {
        self.layers().first().copied().unwrap_or(self.encoder.config.num_layers)
    }

    /// The text branch only matters when prompts cross over, and only up to
    /// the second-to-last interaction layer.
    fn needs_text(&self) -> bool {
        self.variant().exchanges() && self.layers().len() >= 2
    }

    pub fn prefix(&self, ex: &Example) -> Result<Prefix> {
        let depth = self.prefix_depth();
        let vision = self
            .encoder
            .encode_prefix(&self.store, Modality::Vision, &BranchInput::Patches(&ex.patches), depth)?;
        let text = if self.needs_text() {
            Some(
                self.encoder
                    .encode_prefix(&self.store, Modality::Text, &BranchInput::Tokens(&ex.tokens), depth)?,
            )
        } else {
            None
        };
        Ok(Prefix { vision, text })
    }

    fn start(&self, g: &mut Graph, store: &ParamStore, input: ForwardInput) -> Result<(NodeId, Option<NodeId>)> {
        match input {
            ForwardInput::Cached(p) => {
                let v = g.constant(p.vision.clone());
                let t = p.text.as_ref().map(|t| g.constant(t.clone()));
                Ok((v, t))
            }
            ForwardInput::Raw(ex) => {
                let depth = self.prefix_depth();
                let v = self.encoder.embed_image(g, store, &ex.patches)?;
                let v = self.encoder.vision.run_layers(g, store, v, 0..depth)?;
                let t = if self.needs_text() {
                    let t = self.encoder.embed_text(g, store, &ex.tokens)?;
                    Some(self.encoder.text.run_layers(g, store, t, 0..depth)?)
                } else {
                    None
                };
                Ok((v, t))
            }
        }
    }

    fn exchange(&self, g: &mut Graph, store: &ParamStore, p_v: NodeId, p_t: NodeId) -> Result<(NodeId, NodeId)> {
        match &self.interaction {
            Interaction::Hub(_, hub) => hub.hub_step(g, store, p_v, p_t),
            Interaction::Naive(_, naive) => naive.step(g, store, p_v, p_t),
            _ => unreachable!("only exchanging variants call exchange"),
        }
    }

    /// Unit 1×d_joint vision representation.
    pub fn forward_pooled(&self, g: &mut Graph, input: ForwardInput) -> Result<NodeId> {
        self.forward_pooled_with(g, &self.store, input)
    }

    /// [`Model::forward_pooled`] reading parameters from `store`, which must
    /// share this model's layout.
    pub fn forward_pooled_with(&self, g: &mut Graph, store: &ParamStore, input: ForwardInput) -> Result<NodeId> {
        let enc = &self.encoder;
        let n_layers = enc.config.num_layers;
        let (mut fv, mut ft) = self.start(g, store, input)?;
        let layers = self.layers().to_vec();
        let Some(&last) = layers.last() else {
            return enc.vision.pool(g, store, fv);
        };

        let (mut p_v, mut p_t) = match &self.interaction {
            Interaction::Bank(bank) | Interaction::Hub(bank, _) | Interaction::Naive(bank, _) => {
                let (v, t) = bank.initial_prompts(g, store)?;
                (Some(v), Some(t))
            }
            Interaction::Deep(_) | Interaction::None => (None, None),
        };

        let mut prev = layers[0];
        for (j, &l) in layers.iter().enumerate() {
            let is_last = l == last;
            fv = enc.vision.run_layers(g, store, fv, prev..l)?;
            let prompt_v = match &self.interaction {
                Interaction::Deep(deep) => g.param(store, deep.vision[j]),
                _ => p_v.expect("bank variants carry a vision prompt"),
            };
            let (hat_v, next_fv) = enc.vision.prompted_layer(g, store, l, fv, Some(prompt_v))?;
            fv = next_fv;
            let hat_v = hat_v.expect("prompt attached");
            prev = l + 1;
            if is_last {
                break;
            }
            match &self.interaction {
                Interaction::Hub(..) | Interaction::Naive(..) => {
                    let prompt_t = p_t.expect("bank variants carry a text prompt");
                    let text = ft.as_mut().expect("text prefix for exchanging variants");
                    let from = if j == 0 { l } else { layers[j - 1] + 1 };
                    *text = enc.text.run_layers(g, store, *text, from..l)?;
                    let (hat_t, next_ft) = enc.text.prompted_layer(g, store, l, *text, Some(prompt_t))?;
                    *text = next_ft;
                    let hat_t = hat_t.expect("prompt attached");
                    let (in_v, in_t) = match self.config.hub_input {
                        HubInput::PostLayer => (hat_v, hat_t),
                        HubInput::PreLayer => (prompt_v, prompt_t),
                    };
                    let (nv, nt) = self.exchange(g, store, in_v, in_t)?;
                    p_v = Some(nv);
                    p_t = Some(nt);
                }
                Interaction::Bank(_) => {
                    if self.config.hub_input == HubInput::PostLayer {
                        p_v = Some(hat_v);
                    }
                }
                Interaction::Deep(_) | Interaction::None => {}
            }
        }
        fv = enc.vision.run_layers(g, store, fv, prev..n_layers)?;
        enc.vision.pool(g, store, fv)
    }

    /// Returns `(loss, logits)` for one example.
    pub fn example_loss(&self, g: &mut Graph, input: ForwardInput, labels: &[usize]) -> Result<(NodeId, NodeId)> {
        self.example_loss_with(g, &self.store, input, labels)
    }

    pub fn example_loss_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: ForwardInput,
        labels: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let x = self.forward_pooled_with(g, store, input)?;
        let logits = logits_node(g, x, &self.classes, self.config.tau)?;
        let loss = match self.task() {
            Task::SingleLabel => loss_uni_node(g, logits, labels[0])?,
            Task::MultiLabel => loss_multi_node(g, logits, labels)?,
        };
        Ok((loss, logits))
    }

    /// Makes every parameter trainable (the fine-tune-everything reference).
    pub fn unfreeze_all(&mut self) {
        for grp in ParamGroup::ALL {
            self.store.set_group_frozen(grp, false);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub groups: BTreeMap<String, GroupCount>,
    pub trainable_total: usize,
    pub frozen_total: usize,
    pub total: usize,
    pub trainable_fraction: f64,
}

/// Closed-form `(trainable, frozen)` count per group for a config.
pub fn expected_census(config: &RunConfig) -> BTreeMap<ParamGroup, GroupCount> {
    let e: &EncoderConfig = &config.encoder;
    let (l, d_v, d_t, h) = (config.prompt_length, e.d_v, e.d_t, config.hub_hidden());
    let n_layers = config.interaction_layers.len();
    let bank = PromptBank::param_count(l, d_t, d_v);
    let (prompt, hub) = match config.ablation_variant {
        Variant::Baseline => (0, 0),
        Variant::PromptsOnly => (bank, 0),
        Variant::MitpFull => (bank, MemoryHub::param_count(d_v, d_t, h)),
        Variant::NaiveMlpInteraction => (bank, NaiveInteraction::param_count(d_v, d_t, h)),
        Variant::DeepPromptTuning => (n_layers * l * (d_v + d_t), 0),
    };
    let backbone = e.branch_param_count(Modality::Vision) + e.branch_param_count(Modality::Text);
    BTreeMap::from([
        (ParamGroup::Backbone, GroupCount { trainable: 0, frozen: backbone }),
        (ParamGroup::PromptBank, GroupCount { trainable: prompt, frozen: 0 }),
        (ParamGroup::MemoryHub, GroupCount { trainable: hub, frozen: 0 }),
        (ParamGroup::Classifier, GroupCount::default()),
    ])
}

/// Enumerates parameters by group and checks every group against the closed
/// form.
pub fn param_census(model: &Model) -> Result<ParamCensus> {
    let mut counts: BTreeMap<ParamGroup, GroupCount> = ParamGroup::ALL.iter().map(|&g| (g, GroupCount::default())).collect();
    for (_, p) in model.store.iter() {
        let c = counts.get_mut(&p.group).expect("all groups present");
        if p.frozen {
            c.frozen += p.numel();
        } else {
            c.trainable += p.numel();
        }
    }
    let expected = expected_census(&model.config);
    for (grp, got) in &counts {
        let want = expected[grp];
        for (what, a, b) in [("trainable", got.trainable, want.trainable), ("frozen", got.frozen, want.frozen)] {
            if a != b {
                return Err(MitpError::Census {
                    group: format!("{} ({what})", grp.as_str()),
                    enumerated: a,
                    expected: b,
                });
            }
        }
    }
    let trainable_total: usize = counts.values().map(|c| c.trainable).sum();
    let frozen_total: usize = counts.values().map(|c| c.frozen).sum();
    let total = trainable_total + frozen_total;
    Ok(ParamCensus {
        groups: counts.into_iter().map(|(g, c)| (g.as_str().to_string(), c)).collect(),
        trainable_total,
        frozen_total,
        total,
        trainable_fraction: trainable_total as f64 / total as f64,
    })
}
