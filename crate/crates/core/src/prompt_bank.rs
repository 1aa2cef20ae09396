//! The single trainable seed prompt and its projection into the vision
//! width. All later prompts are generated from these.

use crate::error::{MitpError, Result};
use crate::numerics::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Rng, Tensor};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct PromptBank {
    pub length: usize,
    /// L×d_t seed prompt of the text branch.
    pub text_seed: ParamId,
    /// d_t×d_v projection weight.
    pub proj_w: ParamId,
    /// d_v projection bias.
    pub proj_b: ParamId,
}

impl PromptBank {
    /// Seed prompt and projection weight ~ N(0, 0.02²), bias zero.
    pub fn init(rng: &mut Rng, length: usize, d_t: usize, d_v: usize, store: &mut ParamStore) -> Result<Self> {
        if length == 0 || d_t == 0 || d_v == 0 {
            return Err(MitpError::Config(format!(
                "prompt bank needs positive sizes, got L={length} d_t={d_t} d_v={d_v}"
            )));
        }
        let text_seed = store.add(
            "prompt_bank.text_seed",
            ParamGroup::PromptBank,
            rng.gaussian(&[length, d_t], PROMPT_INIT_STD),
            false,
        );
        let proj_w = store.add(
            "prompt_bank.proj_w",
            ParamGroup::PromptBank,
            rng.gaussian(&[d_t, d_v], PROMPT_INIT_STD),
            false,
        );
        let proj_b = store.add("prompt_bank.proj_b", ParamGroup::PromptBank, Tensor::zeros(&[d_v]), false);
        Ok(Self {
            length,
            text_seed,
            proj_w,
            proj_b,
        })
    }

    pub fn param_count(length: usize, d_t: usize, d_v: usize) -> usize {
        length * d_t + d_t * d_v + d_v
    }

    pub fn text_prompt(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        g.param(store, self.text_seed)
    }

    /// Row-wise affine map `p_t · W + b` into the vision width.
    pub fn project_text_to_vision(&self, g: &mut Graph, store: &ParamStore, p_t: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let x = g.matmul(p_t, w)?;
        g.add_row(x, b)
    }

    /// `(p_v, p_t)` for the first interaction layer.
    pub fn initial_prompts(&self, g: &mut Graph, store: &ParamStore) -> Result<(NodeId, NodeId)> {
        let p_t = self.text_prompt(g, store);
        let p_v = self.project_text_to_vision(g, store, p_t)?;
        Ok((p_v, p_t))
    }
}
