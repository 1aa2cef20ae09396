//! Similarity-gated prompt generation shared by every interaction layer.
//!
//! For each modality `m` (with `m'` the other one):
//!
//! ```text
//! p̃        = MLP_{m'→m}(p_{m'})
//! map_intra = ReLU(sim_intra(MLP_m(p_m), p_m))
//! map_inter = ReLU(sim_inter(p_m, p̃))
//! z, r      = softmax(map_intra), softmax(map_inter)      (over tokens)
//! p_m_next  = z ⊙ p_m + (1 − z) ⊙ r ⊙ p̃                  (per token)
//! ```
//!
//! Similarities are per token: row `i` of one matrix against row `i` of
//! the other, giving one score per prompt token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Modality;
use crate::error::{MitpError, Result};
use crate::numerics::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Rng, RowSimilarity, Tensor};

/// Xavier-normal standard deviation for a `fan_in × fan_out` weight.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SimilarityType {
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "mmd")]
    Mmd,
    /// Covariance within a modality, Pearson's r across modalities.
    #[serde(rename = "cov-pearsonr")]
    CovPearsonr,
}

impl SimilarityType {
    pub const ALL: [SimilarityType; 3] = [SimilarityType::Cosine, SimilarityType::Mmd, SimilarityType::CovPearsonr];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityType::Cosine => "cosine",
            SimilarityType::Mmd => "mmd",
            SimilarityType::CovPearsonr => "cov-pearsonr",
        }
    }

    pub fn intra(self) -> RowSimilarity {
        match self {
            SimilarityType::Cosine => RowSimilarity::Cosine,
            SimilarityType::Mmd => RowSimilarity::Mmd,
            SimilarityType::CovPearsonr => RowSimilarity::Covariance,
        }
    }

    pub fn inter(self) -> RowSimilarity {
        match self {
            SimilarityType::Cosine => RowSimilarity::Cosine,
            SimilarityType::Mmd => RowSimilarity::Mmd,
            SimilarityType::CovPearsonr => RowSimilarity::Pearson,
        }
    }
}

impl fmt::Display for SimilarityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityType {
    type Err = MitpError;

    fn from_str(s: &str) -> Result<Self> {
        SimilarityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MitpError::Config(format!("unknown similarity `{s}` (cosine | mmd | cov-pearsonr)")))
    }
}

/// Linear → ReLU → linear. Weights are Xavier-normal, biases zero.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Mlp2 {
    pub fn init(
        name: &str,
        group: ParamGroup,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut Rng,
        store: &mut ParamStore,
    ) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), group, rng.gaussian(&[d_in, hidden], xavier_std(d_in, hidden)), false),
            b1: store.add(format!("{name}.b1"), group, Tensor::zeros(&[hidden]), false),
            w2: store.add(format!("{name}.w2"), group, rng.gaussian(&[hidden, d_out], xavier_std(hidden, d_out)), false),
            b2: store.add(format!("{name}.b2"), group, Tensor::zeros(&[d_out]), false),
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, hidden: usize, d_out: usize) -> usize {
        d_in * hidden + hidden + hidden * d_out + d_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        match g.shape(x) {
            [_, w] if *w == self.d_in => {}
            s => return Err(MitpError::shape("mlp", s, &[0, self.d_in])),
        }
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

/// Per-token similarity scores of two L×d matrices.
pub fn similarity_scores(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    kind: RowSimilarity,
    mmd_bandwidth: Option<f64>,
) -> Result<NodeId> {
    g.row_similarity(a, b, kind, mmd_bandwidth)
}

/// Plain-value version of [`similarity_scores`].
pub fn similarity_values(a: &Tensor, b: &Tensor, kind: RowSimilarity) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = g.row_similarity(a, b, kind, None)?;
    Ok(g.value(s).data().to_vec())
}

/// `z = softmax(map_intra)`, `r = softmax(map_inter)` over the token axis.
pub fn activation(g: &mut Graph, map_intra: NodeId, map_inter: NodeId) -> Result<(NodeId, NodeId)> {
    Ok((g.softmax(map_intra, 0)?, g.softmax(map_inter, 0)?))
}

/// Row i of the result is `z_i · p_m[i] + (1 − z_i) · r_i · p̃[i]`.
pub fn generate_next(g: &mut Graph, p_m: NodeId, p_tilde: NodeId, z: NodeId, r: NodeId) -> Result<NodeId> {
    if g.shape(p_m) != g.shape(p_tilde) {
        return Err(MitpError::shape("generate_next", g.shape(p_m), g.shape(p_tilde)));
    }
    let keep = g.mul_col(p_m, z)?;
    let one_minus_z = g.one_minus(z)?;
    let gate = g.mul(one_minus_z, r)?;
    let inject = g.mul_col(p_tilde, gate)?;
    g.add(keep, inject)
}

#[derive(Debug, Clone, Copy)]
pub enum Direction {
    TextToVision,
    VisionToText,
}

/// Intermediate values of one modality's half of a hub step.
#[derive(Debug, Clone, Copy)]
pub struct HubTrace {
    pub p_tilde: NodeId,
    pub map_intra: NodeId,
    pub map_inter: NodeId,
    pub z: NodeId,
    pub r: NodeId,
    pub next: NodeId,
}

#[derive(Debug, Clone)]
pub struct MemoryHub {
    pub cross_t2v: Mlp2,
    pub cross_v2t: Mlp2,
    pub intra_v: Mlp2,
    pub intra_t: Mlp2,
    pub hidden: usize,
    pub similarity: SimilarityType,
    /// Fixed RBF bandwidth for MMD; `None` uses the per-row median heuristic.
    pub mmd_bandwidth: Option<f64>,
}

impl MemoryHub {
    pub fn default_hidden(d_v: usize, d_t: usize) -> usize {
        (d_v.min(d_t) / 2).max(1)
    }

    pub fn init(
        rng: &mut Rng,
        d_v: usize,
        d_t: usize,
        hidden: usize,
        similarity: SimilarityType,
        store: &mut ParamStore,
    ) -> Self {
        let grp = ParamGroup::MemoryHub;
        Self {
            cross_t2v: Mlp2::init("hub.cross_t2v", grp, d_t, hidden, d_v, rng, store),
            cross_v2t: Mlp2::init("hub.cross_v2t", grp, d_v, hidden, d_t, rng, store),
            intra_v: Mlp2::init("hub.intra_v", grp, d_v, hidden, d_v, rng, store),
            intra_t: Mlp2::init("hub.intra_t", grp, d_t, hidden, d_t, rng, store),
            hidden,
            similarity,
            mmd_bandwidth: None,
        }
    }

    pub fn param_count(d_v: usize, d_t: usize, hidden: usize) -> usize {
        Mlp2::param_count(d_t, hidden, d_v)
            + Mlp2::param_count(d_v, hidden, d_t)
            + Mlp2::param_count(d_v, hidden, d_v)
            + Mlp2::param_count(d_t, hidden, d_t)
    }

    /// Projects the other modality's prompt into this modality's width.
    pub fn cross_project(&self, g: &mut Graph, store: &ParamStore, p_src: NodeId, direction: Direction) -> Result<NodeId> {
        match direction {
            Direction::TextToVision => self.cross_t2v.forward(g, store, p_src),
            Direction::VisionToText => self.cross_v2t.forward(g, store, p_src),
        }
    }

    fn intra_proj(&self, modality: Modality) -> &Mlp2 {
        match modality {
            Modality::Vision => &self.intra_v,
            Modality::Text => &self.intra_t,
        }
    }

    /// `(map_intra, map_inter)` for prompt `p_m` of `modality` and the
    /// projected other-modality prompt `p_tilde`.
    pub fn mapping(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        modality: Modality,
        p_m: NodeId,
        p_tilde: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let projected = self.intra_proj(modality).forward(g, store, p_m)?;
        let intra = similarity_scores(g, projected, p_m, self.similarity.intra(), self.mmd_bandwidth)?;
        let inter = similarity_scores(g, p_m, p_tilde, self.similarity.inter(), self.mmd_bandwidth)?;
        Ok((g.relu(intra)?, g.relu(inter)?))
    }

    fn half_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        modality: Modality,
        p_m: NodeId,
        p_other: NodeId,
    ) -> Result<HubTrace> {
        let direction = match modality {
            Modality::Vision => Direction::TextToVision,
            Modality::Text => Direction::VisionToText,
        };
        let p_tilde = self.cross_project(g, store, p_other, direction)?;
        let (map_intra, map_inter) = self.mapping(g, store, modality, p_m, p_tilde)?;
        let (z, r) = activation(g, map_intra, map_inter)?;
        let next = generate_next(g, p_m, p_tilde, z, r)?;
        Ok(HubTrace {
            p_tilde,
            map_intra,
            map_inter,
            z,
            r,
            next,
        })
    }

    /// Both next-layer prompts from the same pair of inputs.
    pub fn hub_step(&self, g: &mut Graph, store: &ParamStore, p_v: NodeId, p_t: NodeId) -> Result<(NodeId, NodeId)> {
        let (v, t) = self.hub_step_traced(g, store, p_v, p_t)?;
        Ok((v.next, t.next))
    }

    pub fn hub_step_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p_v: NodeId,
        p_t: NodeId,
    ) -> Result<(HubTrace, HubTrace)> {
        if g.shape(p_v)[0] != g.shape(p_t)[0] {
            return Err(MitpError::shape("hub_step", g.shape(p_v), g.shape(p_t)));
        }
        let v = self.half_step(g, store, Modality::Vision, p_v, p_t)?;
        let t = self.half_step(g, store, Modality::Text, p_t, p_v)?;
        Ok((v, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_names_round_trip() {
        for t in SimilarityType::ALL {
            assert_eq!(t.as_str().parse::<SimilarityType>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
        }
        assert!("cov_pearsonr".parse::<SimilarityType>().is_err());
    }

    #[test]
    fn cov_pearsonr_splits_roles() {
        assert_eq!(SimilarityType::CovPearsonr.intra(), RowSimilarity::Covariance);
        assert_eq!(SimilarityType::CovPearsonr.inter(), RowSimilarity::Pearson);
    }

    #[test]
    fn hub_count_closed_form() {
        let mut store = ParamStore::new();
        MemoryHub::init(&mut Rng::new(1), 32, 24, 12, SimilarityType::Cosine, &mut store);
        assert_eq!(store.trainable_count(), MemoryHub::param_count(32, 24, 12));
    }
}
