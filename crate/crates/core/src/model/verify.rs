//! Finite-difference checks of every layer and of the composed model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Dropout, ModelConfig, PeriCite};
use crate::attention::{bidirectional_attention, self_attention, AttentionProjection, CrossTextAttention, Stream, StreamState};
use crate::corpus::{CitationInstance, Intent, Vocabulary};
use crate::error::Result;
use crate::fusion::{fuse_on_graph, SpatialAttentionBlock};
use crate::numeric::{compare_gradients, Gradients, Graph, Matrix, ParamStore, Var};

/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

const WIDTH: usize = 8;
const POSITIONS: usize = 4;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
}

/// Weighted sum of an output so every coordinate gets a distinct gradient.
fn probe(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

fn check<F>(layer: &'static str, store: &ParamStore, tolerance: f64, eps: f64, fault: bool, f: F) -> Result<LayerCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut analytic: Gradients = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    if fault {
        let target = analytic
            .iter()
            .find(|(_, m)| m.data().iter().any(|v| v.abs() > 1e-3))
            .map(|(id, _)| id);
        if let Some(id) = target {
            let m = analytic.get_mut(id);
            let k = m.data().iter().position(|v| v.abs() > 1e-3).unwrap_or(0);
            m.data_mut()[k] *= 1.5;
        }
    }
    let report = compare_gradients(store, &[], eps, &analytic, f)?;
    Ok(LayerCheck {
        layer,
        max_rel_error: report.max_rel_error,
        tolerance,
        coordinates: report.coordinates,
        passed: report.max_rel_error <= tolerance,
    })
}

/// Checks self attention, cross-text attention, the fusion enhancement
/// path, the classifier head and the whole model at `d_model` 8 over 4
/// positions. With `inject_fault` one analytic coordinate is corrupted, so
/// the first check must fail.
pub fn verify_gradients(eps: f64, seed: u64, inject_fault: bool) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // inputs are parameters too so their gradients are checked as well
    let mut store = ParamStore::new();
    let xm = store.add("x.main", random(&mut rng, POSITIONS, WIDTH));
    let xp = store.add("x.peripheral", random(&mut rng, POSITIONS, WIDTH));
    let weights = random(&mut rng, POSITIONS, WIDTH);
    let attn = AttentionProjection::new(&mut store, "attn", WIDTH, 2, 4, 4, &mut rng)?;
    let cta = CrossTextAttention::new(&mut store, "cta", WIDTH, 2, 4, 4, &mut rng)?;
    let enhance_main = SpatialAttentionBlock::new(&mut store, "enhance.main", WIDTH, &mut rng)?;
    let enhance_peripheral = SpatialAttentionBlock::new(&mut store, "enhance.peripheral", WIDTH, &mut rng)?;
    let cls_w = store.add_glorot("classifier.w", WIDTH, 6, &mut rng);
    let cls_b = store.add("classifier.b", random(&mut rng, 1, 6));

    let states = |g: &mut Graph| {
        let (a, b) = (g.param(xm), g.param(xp));
        (StreamState::new(g, a, Stream::Main), StreamState::new(g, b, Stream::Peripheral))
    };

    results.push(check("self attention", &store, LAYER_TOLERANCE, eps, inject_fault, |g| {
        let (m, _) = states(g);
        let out = self_attention(g, &m, &attn)?.value;
        probe(g, out, &weights)
    })?);
    results.push(check("cross-text attention", &store, LAYER_TOLERANCE, eps, false, |g| {
        let (m, p) = states(g);
        let out = bidirectional_attention(g, &m, &p, &cta)?.combined;
        probe(g, out, &weights)
    })?);
    let valid = vec![true; POSITIONS];
    results.push(check("fusion enhancement", &store, LAYER_TOLERANCE, eps, false, |g| {
        let (m, p) = states(g);
        let e1 = enhance_main.forward(g, m.x, &valid)?;
        let e2 = enhance_peripheral.forward(g, p.x, &valid)?;
        let fused = fuse_on_graph(g, e1, e2)?.fused;
        probe(g, fused, &weights)
    })?);
    results.push(check("classifier", &store, LAYER_TOLERANCE, eps, false, |g| {
        let x = g.param(xm);
        let pool = g.constant(Matrix::filled(1, POSITIONS, 1.0 / POSITIONS as f64));
        let pooled = g.matmul(pool, x)?;
        let (w, b) = (g.param(cls_w), g.param(cls_b));
        let logits = g.linear(pooled, w, b)?;
        g.cross_entropy(logits, 3)
    })?);

    let config = ModelConfig {
        d_model: WIDTH,
        heads: 2,
        d_k: 4,
        d_v: 4,
        ffn_dim: 16,
        seq_len: POSITIONS,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::build(vec![vec!["method", "result", "prior", "extend", "data"]], 64);
    let model = PeriCite::new(config, vocab)?;
    let inst = CitationInstance {
        core_id: "gradcheck".into(),
        first_sentence: "prior data".into(),
        cited_sentence: "#AUTHOR_TAG extend method".into(),
        second_sentence: "result data".into(),
        label: Intent::Extension,
        synthetic: false,
    };
    let input = model.encode(&inst);
    results.push(check("full model", model.store(), MODEL_TOLERANCE, eps, false, |g| {
        model.loss_on_graph(g, &input, inst.label, &mut Dropout::off())
    })?);
    Ok(results)
}
