//! Finite-difference gradient suites: every graph primitive, a full hub
//! step per similarity type, and the end-to-end loss of a small model with
//! two interaction layers.

use serde::Serialize;

use super::config::{RunConfig, Variant};
use super::model::{ForwardInput, Model};
use crate::datasets::generate_synthetic;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::memory_hub::{MemoryHub, SimilarityType};
use crate::numerics::{
    grad_check, grad_check_params, GradCheckReport, Graph, NodeId, ParamGroup, ParamStore, Rng, RowSimilarity, Tensor,
};

/// Fixed RBF bandwidth for checked MMD graphs. The median heuristic makes
/// the bandwidth a non-differentiable function of the inputs.
pub const CHECK_MMD_BANDWIDTH: f64 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub report: GradCheckReport,
}

/// Max relative error of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub suite: &'static str,
    pub checks: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn summarize(results: &[CheckResult]) -> Vec<SuiteSummary> {
    let mut out: Vec<SuiteSummary> = Vec::new();
    for r in results {
        let s = match out.iter_mut().position(|s| s.suite == r.suite) {
            Some(i) => &mut out[i],
            None => {
                out.push(SuiteSummary {
                    suite: r.suite,
                    checks: 0,
                    max_rel_error: 0.0,
                    passed: true,
                });
                out.last_mut().expect("just pushed")
            }
        };
        s.checks += 1;
        s.max_rel_error = s.max_rel_error.max(r.report.max_rel_error);
        s.passed &= r.report.passed;
    }
    out
}

/// Reduces any node to a scalar through a fixed random weighting, so every
/// output entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Rng::new(seed).fork("gradsuite.weights").gaussian(&shape, 1.0));
    let m = g.mul(x, w)?;
    g.sum(m)
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// Shifts entries away from zero so ReLU kinks are not straddled.
fn off_kink(t: Tensor) -> Tensor {
    t.map(|x| if x.abs() < 0.1 { x + 0.2 * x.signum() } else { x })
}

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = Rng::new(17).fork("gradsuite.primitives");
    let mut m = |r: usize, c: usize| rng.gaussian(&[r, c], 1.0);
    let (a, b, c34, c43, v4, v3) = (m(3, 4), m(3, 4), m(3, 4), m(4, 3), m(1, 4).reshape(&[4]).unwrap(), m(3, 1).reshape(&[3]).unwrap());
    let pos = a.map(|x| x.abs() + 0.5);
    let (wide, wide2) = (m(3, 6), m(3, 6));
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![a.clone(), c43.clone()], Box::new(|g, x| { let y = g.matmul(x[0], x[1])?; weighted_sum(g, y, 1) })),
        ("matmul_nt", vec![a.clone(), b.clone()], Box::new(|g, x| { let y = g.matmul_nt(x[0], x[1])?; weighted_sum(g, y, 2) })),
        ("add", vec![a.clone(), b.clone()], Box::new(|g, x| { let y = g.add(x[0], x[1])?; weighted_sum(g, y, 3) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, x| { let y = g.sub(x[0], x[1])?; weighted_sum(g, y, 4) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, x| { let y = g.mul(x[0], x[1])?; weighted_sum(g, y, 5) })),
        ("add_row", vec![a.clone(), v4.clone()], Box::new(|g, x| { let y = g.add_row(x[0], x[1])?; weighted_sum(g, y, 6) })),
        ("mul_col", vec![a.clone(), v3.clone()], Box::new(|g, x| { let y = g.mul_col(x[0], x[1])?; weighted_sum(g, y, 7) })),
        ("scale", vec![a.clone()], Box::new(|g, x| { let y = g.scale(x[0], -1.7)?; weighted_sum(g, y, 8) })),
        ("add_scalar", vec![a.clone()], Box::new(|g, x| { let y = g.add_scalar(x[0], 0.3)?; weighted_sum(g, y, 9) })),
        ("one_minus", vec![a.clone()], Box::new(|g, x| { let y = g.one_minus(x[0])?; weighted_sum(g, y, 10) })),
        ("relu", vec![off_kink(a.clone())], Box::new(|g, x| { let y = g.relu(x[0])?; weighted_sum(g, y, 11) })),
        ("gelu", vec![a.clone()], Box::new(|g, x| { let y = g.gelu(x[0])?; weighted_sum(g, y, 12) })),
        ("exp", vec![a.clone()], Box::new(|g, x| { let y = g.exp(x[0])?; weighted_sum(g, y, 13) })),
        ("ln", vec![pos.clone()], Box::new(|g, x| { let y = g.ln(x[0], 1e-30)?; weighted_sum(g, y, 14) })),
        ("softplus", vec![a.clone()], Box::new(|g, x| { let y = g.softplus(x[0])?; weighted_sum(g, y, 15) })),
        ("sigmoid", vec![a.clone()], Box::new(|g, x| { let y = g.sigmoid(x[0])?; weighted_sum(g, y, 16) })),
        ("softmax_rows", vec![a.clone()], Box::new(|g, x| { let y = g.softmax(x[0], 1)?; weighted_sum(g, y, 17) })),
        ("softmax_cols", vec![a.clone()], Box::new(|g, x| { let y = g.softmax(x[0], 0)?; weighted_sum(g, y, 18) })),
        (
            "layer_norm",
            vec![a.clone(), v4.clone(), v4.map(|x| 0.5 * x)],
            Box::new(|g, x| { let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?; weighted_sum(g, y, 19) }),
        ),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new(|g, x| { let y = g.concat_rows(&[x[0], x[1]])?; weighted_sum(g, y, 20) })),
        ("slice_rows", vec![a.clone()], Box::new(|g, x| { let y = g.slice_rows(x[0], 1, 3)?; weighted_sum(g, y, 21) })),
        ("concat_cols", vec![a.clone(), c34.clone()], Box::new(|g, x| { let y = g.concat_cols(&[x[0], x[1]])?; weighted_sum(g, y, 22) })),
        ("slice_cols", vec![a.clone()], Box::new(|g, x| { let y = g.slice_cols(x[0], 1, 3)?; weighted_sum(g, y, 23) })),
        ("add_n", vec![a.clone(), b.clone(), c34.clone()], Box::new(|g, x| { let y = g.add_n(&[x[0], x[1], x[2]])?; weighted_sum(g, y, 24) })),
        ("sum", vec![a.clone()], Box::new(|g, x| { let y = g.mul(x[0], x[0])?; g.sum(y) })),
        ("mean", vec![a.clone()], Box::new(|g, x| { let y = g.mul(x[0], x[0])?; g.mean(y) })),
        ("sum_axis", vec![a.clone()], Box::new(|g, x| { let y = g.sum_axis(x[0], 0)?; weighted_sum(g, y, 25) })),
        ("mean_axis", vec![a.clone()], Box::new(|g, x| { let y = g.mean_axis(x[0], 1)?; weighted_sum(g, y, 26) })),
        ("var_axis", vec![a.clone()], Box::new(|g, x| { let y = g.var_axis(x[0], 1, 1)?; weighted_sum(g, y, 27) })),
        ("l2_normalize", vec![a.clone()], Box::new(|g, x| { let y = g.l2_normalize(x[0])?; weighted_sum(g, y, 28) })),
        ("pick", vec![v4.clone()], Box::new(|g, x| { let e = g.exp(x[0])?; g.pick(e, 2) })),
        ("gather_rows", vec![c43.clone()], Box::new(|g, x| { let y = g.gather_rows(x[0], &[2, 0, 2, 3])?; weighted_sum(g, y, 29) })),
    ];
    for kind in [RowSimilarity::Cosine, RowSimilarity::Covariance, RowSimilarity::Pearson, RowSimilarity::Mmd] {
        let bw = (kind == RowSimilarity::Mmd).then_some(CHECK_MMD_BANDWIDTH);
        let name = match kind {
            RowSimilarity::Cosine => "row_similarity.cosine",
            RowSimilarity::Covariance => "row_similarity.covariance",
            RowSimilarity::Pearson => "row_similarity.pearson",
            RowSimilarity::Mmd => "row_similarity.mmd",
        };
        cases.push((
            name,
            vec![wide.clone(), wide2.clone()],
            Box::new(move |g, x| {
                let y = g.row_similarity(x[0], x[1], kind, bw)?;
                weighted_sum(g, y, 30)
            }),
        ));
    }
    cases
}

/// One check per graph primitive.
pub fn primitive_suite(tolerance: f64) -> Result<Vec<CheckResult>> {
    primitive_cases()
        .into_iter()
        .map(|(name, inputs, build)| {
            Ok(CheckResult {
                suite: "primitives",
                name: name.to_string(),
                report: grad_check(&inputs, build, tolerance)?,
            })
        })
        .collect()
}

/// One full hub step per similarity type, differentiated with respect to
/// both input prompts and every hub weight.
pub fn hub_suite(tolerance: f64) -> Result<Vec<CheckResult>> {
    let (l, d_v, d_t, h) = (3, 6, 5, 4);
    SimilarityType::ALL
        .into_iter()
        .map(|sim| {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(23).fork("gradsuite.hub");
            let p_v = store.add("check.p_v", ParamGroup::PromptBank, rng.gaussian(&[l, d_v], 1.0), false);
            let p_t = store.add("check.p_t", ParamGroup::PromptBank, rng.gaussian(&[l, d_t], 1.0), false);
            let mut hub = MemoryHub::init(&mut rng, d_v, d_t, h, sim, &mut store);
            hub.mmd_bandwidth = Some(CHECK_MMD_BANDWIDTH);
            // Zero biases with dead hidden units give exactly-zero rows, where
            // cosine is discontinuous; redraw everything away from that point.
            for p in store.iter_mut().filter(|p| p.name.starts_with("hub.")) {
                p.tensor = rng.gaussian(p.tensor.shape(), 0.5);
            }
            let report = grad_check_params(
                &mut store,
                |g, store| {
                    let (v, t) = (g.param(store, p_v), g.param(store, p_t));
                    let (nv, nt) = hub.hub_step(g, store, v, t)?;
                    let (sv, st) = (weighted_sum(g, nv, 40)?, weighted_sum(g, nt, 41)?);
                    g.add(sv, st)
                },
                tolerance,
            )?;
            Ok(CheckResult {
                suite: "memory_hub",
                name: format!("hub_step.{sim}"),
                report,
            })
        })
        .collect()
}

/// Small config with two interaction layers, used by the end-to-end check.
pub fn end_to_end_config() -> RunConfig {
    let encoder = EncoderConfig {
        num_layers: 4,
        d_v: 8,
        d_t: 8,
        num_heads: 2,
        n_patches: 3,
        raw_dim: 4,
        n_text_tokens: 4,
        vocab_size: 16,
        d_joint: 6,
        ..EncoderConfig::default()
    };
    let mut config = RunConfig {
        encoder: encoder.clone(),
        interaction_layers: vec![1, 2],
        prompt_length: 2,
        ablation_variant: Variant::MitpFull,
        hub_hidden: Some(4),
        mmd_bandwidth: Some(CHECK_MMD_BANDWIDTH),
        ..RunConfig::default()
    };
    if let super::config::DataSource::Synthetic(spec) = &mut config.data {
        spec.num_classes = 3;
        spec.n_patches = encoder.n_patches;
        spec.raw_dim = encoder.raw_dim;
        spec.n_text_tokens = encoder.n_text_tokens;
        spec.vocab_size = encoder.vocab_size;
        spec.n_train = 3;
        spec.n_val = 3;
        spec.n_test = 3;
    }
    config
}

/// Loss of one example through the full prompted forward pass, with
/// respect to every trainable parameter.
pub fn end_to_end_suite(tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut config = end_to_end_config();
    let mut out = Vec::new();
    for sim in SimilarityType::ALL {
        config.similarity = sim;
        let splits = match &config.data {
            super::config::DataSource::Synthetic(spec) => generate_synthetic(spec, 5)?,
            _ => unreachable!("end-to-end config is synthetic"),
        };
        let mut model = Model::build(&config)?;
        let ex = splits.train.examples[0].clone();
        let mut store = std::mem::take(&mut model.store);
        let mut rng = Rng::new(29).fork("gradsuite.end_to_end");
        for p in store.iter_mut().filter(|p| !p.frozen) {
            p.tensor = rng.gaussian(p.tensor.shape(), 0.3);
        }
        let report = grad_check_params(
            &mut store,
            |g, store| Ok(model.example_loss_with(g, store, ForwardInput::Raw(&ex), &ex.labels)?.0),
            tolerance,
        )?;
        model.store = store;
        out.push(CheckResult {
            suite: "end_to_end",
            name: format!("mitp_full.{sim}"),
            report,
        });
    }
    Ok(out)
}

/// Every suite, in order.
pub fn gradient_suites(tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut all = primitive_suite(tolerance)?;
    all.extend(hub_suite(tolerance)?);
    all.extend(end_to_end_suite(tolerance)?);
    Ok(all)
}
