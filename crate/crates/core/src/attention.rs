//! Scaled dot-product attention over text streams: self-attention within a
//! stream, cross attention between the main and peripheral streams, and the
//! bidirectional sum of the two cross directions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, ParamId, ParamStore, Var};

/// Additive score for masked-out key positions.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Main,
    Peripheral,
}

/// Contextual representation of one stream inside a graph.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub x: Var,
    pub stream: Stream,
    /// Key positions that may be attended to; padding is `false`.
    pub valid: Vec<bool>,
}

impl StreamState {
    pub fn new(g: &Graph, x: Var, stream: Stream) -> Self {
        let n = g.shape(x).0;
        StreamState {
            x,
            stream,
            valid: vec![true; n],
        }
    }

    pub fn with_mask(x: Var, stream: Stream, valid: Vec<bool>) -> Self {
        StreamState { x, stream, valid }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadProjection {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Per-head query/key/value projections plus the output projection that
/// maps the concatenated heads back to `d_model`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionProjection {
    heads: Vec<HeadProjection>,
    output: ParamId,
    d_model: usize,
    d_k: usize,
    d_v: usize,
}

impl AttentionProjection {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_k == 0 || d_v == 0 {
            return Err(Error::Config(format!(
                "attention needs positive dimensions (d_model {d_model}, heads {heads}, d_k {d_k}, d_v {d_v})"
            )));
        }
        let heads = (0..heads)
            .map(|h| HeadProjection {
                query: store.add_glorot(format!("{prefix}.head{h}.query"), d_model, d_k, rng),
                key: store.add_glorot(format!("{prefix}.head{h}.key"), d_model, d_k, rng),
                value: store.add_glorot(format!("{prefix}.head{h}.value"), d_model, d_v, rng),
            })
            .collect::<Vec<_>>();
        let output = store.add_glorot(format!("{prefix}.output"), heads.len() * d_v, d_model, rng);
        Ok(AttentionProjection {
            heads,
            output,
            d_model,
            d_k,
            d_v,
        })
    }

    /// Assembles a projection from existing parameters, validating shapes.
    pub fn from_parts(store: &ParamStore, heads: Vec<HeadProjection>, output: ParamId) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
        let (d_model, d_k) = store.get(first.query).shape();
        let d_v = store.get(first.value).cols();
        for h in &heads {
            for (id, cols) in [(h.query, d_k), (h.key, d_k), (h.value, d_v)] {
                let m = store.get(id);
                if m.shape() != (d_model, cols) {
                    return Err(Error::shape("attention projection", format!("{d_model}x{cols}"), m.shape_str()));
                }
            }
        }
        let out = store.get(output);
        if out.shape() != (heads.len() * d_v, d_model) {
            return Err(Error::shape(
                "attention output projection",
                format!("{}x{d_model}", heads.len() * d_v),
                out.shape_str(),
            ));
        }
        Ok(AttentionProjection {
            heads,
            output,
            d_model,
            d_k,
            d_v,
        })
    }

    pub fn heads(&self) -> &[HeadProjection] {
        &self.heads
    }

    pub fn output(&self) -> ParamId {
        self.output
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    /// Every value projection, for ablations that silence a projection set.
    pub fn value_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.heads.iter().map(|h| h.value)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `N_query × d_model` after the output projection.
    pub value: Var,
    /// One row-stochastic `N_query × N_source` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head attention with queries from `query` (projected by
/// `query_proj`) and keys/values from `source` (projected by `source_proj`).
/// The output projection belongs to the query side.
pub fn attend(
    g: &mut Graph,
    query: &StreamState,
    query_proj: &AttentionProjection,
    source: &StreamState,
    source_proj: &AttentionProjection,
) -> Result<AttentionOutput> {
    if query_proj.d_k != source_proj.d_k || query_proj.heads.len() != source_proj.heads.len() {
        return Err(Error::shape(
            "attention key dimension",
            format!("{} heads x d_k {}", query_proj.heads.len(), query_proj.d_k),
            format!("{} heads x d_k {}", source_proj.heads.len(), source_proj.d_k),
        ));
    }
    let (n_q, d_q) = g.shape(query.x);
    let (n_s, d_s) = g.shape(source.x);
    if d_q != query_proj.d_model || d_s != source_proj.d_model {
        return Err(Error::shape(
            "attention input",
            format!("{n_q}x{d_q} / {n_s}x{d_s}"),
            format!("d_model {} / {}", query_proj.d_model, source_proj.d_model),
        ));
    }
    if source.valid.len() != n_s {
        return Err(Error::shape("attention mask", format!("{n_s} positions"), format!("{} flags", source.valid.len())));
    }
    let mask = key_mask(n_q, &source.valid).map(|m| g.constant(m));
    let inv_sqrt_dk = 1.0 / (query_proj.d_k as f64).sqrt();

    let mut head_values = Vec::with_capacity(query_proj.heads.len());
    let mut weights = Vec::with_capacity(query_proj.heads.len());
    for (qh, sh) in query_proj.heads.iter().zip(&source_proj.heads) {
        let wq = g.param(qh.query);
        let wk = g.param(sh.key);
        let wv = g.param(sh.value);
        let q = g.matmul(query.x, wq)?;
        let k = g.matmul(source.x, wk)?;
        let v = g.matmul(source.x, wv)?;
        let scores = g.matmul_nt(q, k)?;
        let mut scores = g.scale(scores, inv_sqrt_dk);
        if let Some(mask) = mask {
            scores = g.add(scores, mask)?;
        }
        let w = g.softmax_rows(scores);
        head_values.push(g.matmul(w, v)?);
        weights.push(w);
    }
    let concat = if head_values.len() == 1 {
        head_values[0]
    } else {
        g.concat_cols(&head_values)?
    };
    let wo = g.param(query_proj.output);
    let value = g.matmul(concat, wo)?;
    Ok(AttentionOutput { value, weights })
}

fn key_mask(n_query: usize, valid: &[bool]) -> Option<Matrix> {
    if valid.iter().all(|&v| v) || !valid.iter().any(|&v| v) {
        return None;
    }
    Some(Matrix::from_fn(n_query, valid.len(), |_, c| if valid[c] { 0.0 } else { MASKED_SCORE }))
}

/// `softmax(Q Kᵀ / √d_k) V` with Q, K, V all drawn from `x`.
pub fn self_attention(g: &mut Graph, x: &StreamState, proj: &AttentionProjection) -> Result<AttentionOutput> {
    attend(g, x, proj, x, proj)
}

/// Queries from `target`, keys and values from `source`.
pub fn cross_attention(
    g: &mut Graph,
    target: &StreamState,
    source: &StreamState,
    proj_target: &AttentionProjection,
    proj_source: &AttentionProjection,
) -> Result<AttentionOutput> {
    attend(g, target, proj_target, source, proj_source)
}

/// Projection sets for the two streams taking part in cross-text attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossTextAttention {
    pub main: AttentionProjection,
    pub peripheral: AttentionProjection,
}

impl CrossTextAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(CrossTextAttention {
            main: AttentionProjection::new(store, &format!("{prefix}.main"), d_model, heads, d_k, d_v, rng)?,
            peripheral: AttentionProjection::new(store, &format!("{prefix}.peripheral"), d_model, heads, d_k, d_v, rng)?,
        })
    }

    /// Both streams share one projection set.
    pub fn tied(proj: AttentionProjection) -> Self {
        CrossTextAttention {
            main: proj.clone(),
            peripheral: proj,
        }
    }

    pub fn value_params(&self) -> Vec<ParamId> {
        self.main.value_params().chain(self.peripheral.value_params()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BidirectionalOutput {
    /// Peripheral queries over main keys/values.
    pub peripheral_to_main: AttentionOutput,
    /// Main queries over peripheral keys/values.
    pub main_to_peripheral: AttentionOutput,
    /// Sum of the two directional terms.
    pub combined: Var,
}

/// Sums cross attention in both directions. The streams must share a
/// sequence length for the sum to be defined; fixed-length padding upstream
/// guarantees this in the model.
pub fn bidirectional_attention(
    g: &mut Graph,
    main: &StreamState,
    peripheral: &StreamState,
    cta: &CrossTextAttention,
) -> Result<BidirectionalOutput> {
    let peripheral_to_main = cross_attention(g, peripheral, main, &cta.peripheral, &cta.main)?;
    let main_to_peripheral = cross_attention(g, main, peripheral, &cta.main, &cta.peripheral)?;
    let combined = g.add(peripheral_to_main.value, main_to_peripheral.value)?;
    Ok(BidirectionalOutput {
        peripheral_to_main,
        main_to_peripheral,
        combined,
    })
}

/// Position-wise two-layer network with a GELU in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, inner: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            w1: store.add_glorot(format!("{prefix}.w1"), d_model, inner, rng),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, inner)),
            w2: store.add_glorot(format!("{prefix}.w2"), inner, d_model, rng),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, d_model)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h);
        g.linear(h, w2, b2)
    }
}

/// Sinusoidal position encodings, `len × d_model`.
pub fn positional_encoding(len: usize, d_model: usize) -> Matrix {
    Matrix::from_fn(len, d_model, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// One-head projection with hand-set matrices.
    fn hand_projection(store: &mut ParamStore, prefix: &str, q: Matrix, k: Matrix, v: Matrix, o: Matrix) -> AttentionProjection {
        let head = HeadProjection {
            query: store.add(format!("{prefix}.q"), q),
            key: store.add(format!("{prefix}.k"), k),
            value: store.add(format!("{prefix}.v"), v),
        };
        let output = store.add(format!("{prefix}.o"), o);
        AttentionProjection::from_parts(store, vec![head], output).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn row_times(row: &[f64], m: &Matrix) -> Vec<f64> {
        (0..m.cols()).map(|c| (0..m.rows()).map(|r| row[r] * m.get(r, c)).sum()).collect()
    }

    /// Scalar re-derivation of single-head attention, written without the tape.
    fn unrolled(queries: &Matrix, sources: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix, o: &Matrix) -> Matrix {
        let d_k = q.cols() as f64;
        let qs: Vec<Vec<f64>> = (0..queries.rows()).map(|i| row_times(queries.row(i), q)).collect();
        let ks: Vec<Vec<f64>> = (0..sources.rows()).map(|j| row_times(sources.row(j), k)).collect();
        let vs: Vec<Vec<f64>> = (0..sources.rows()).map(|j| row_times(sources.row(j), v)).collect();
        let mut out = Matrix::zeros(queries.rows(), o.cols());
        for i in 0..queries.rows() {
            let scores: Vec<f64> = ks.iter().map(|kj| dot(&qs[i], kj) / d_k.sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut mixed = vec![0.0; v.cols()];
            for (j, e) in exps.iter().enumerate() {
                for (m, vv) in mixed.iter_mut().zip(&vs[j]) {
                    *m += e / z * vv;
                }
            }
            out.row_mut(i).copy_from_slice(&row_times(&mixed, o));
        }
        out
    }

    #[test]
    fn single_token_weight_is_one() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let proj = AttentionProjection::new(&mut store, "a", 4, 2, 2, 2, &mut r).unwrap();
        let xm = random_matrix(&mut r, 1, 4);
        let mut g = Graph::new(&store);
        let x = g.constant(xm.clone());
        let state = StreamState::new(&g, x, Stream::Main);
        let out = self_attention(&mut g, &state, &proj).unwrap();
        for w in &out.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // output = concat_h(x Wv_h) Wo
        let heads: Vec<f64> = proj
            .heads()
            .iter()
            .flat_map(|h| row_times(xm.row(0), store.get(h.value)))
            .collect();
        let expected = row_times(&heads, store.get(proj.output()));
        let got = g.value(out.value).row(0);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let proj = hand_projection(
            &mut store,
            "a",
            random_matrix(&mut r, 3, 2),
            Matrix::zeros(3, 2),
            random_matrix(&mut r, 3, 2),
            random_matrix(&mut r, 2, 3),
        );
        let mut g = Graph::new(&store);
        let x = g.constant(random_matrix(&mut r, 5, 3));
        let state = StreamState::new(&g, x, Stream::Main);
        let out = self_attention(&mut g, &state, &proj).unwrap();
        for &v in g.value(out.weights[0]).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_self_attention_matches_unrolled() {
        let mut store = ParamStore::new();
        let q = Matrix::from_rows(&[&[1.0, 0.5], &[-0.3, 0.8]]);
        let k = Matrix::from_rows(&[&[0.2, -1.0], &[0.7, 0.4]]);
        let v = Matrix::from_rows(&[&[1.5, 0.0], &[-0.5, 2.0]]);
        let o = Matrix::identity(2);
        let proj = hand_projection(&mut store, "a", q.clone(), k.clone(), v.clone(), o.clone());
        let xm = Matrix::from_rows(&[&[0.3, -1.2], &[2.0, 0.1]]);
        let mut g = Graph::new(&store);
        let x = g.constant(xm.clone());
        let state = StreamState::new(&g, x, Stream::Main);
        let out = self_attention(&mut g, &state, &proj).unwrap();
        let oracle = unrolled(&xm, &xm, &q, &k, &v, &o);
        assert!(g.value(out.value).max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn cross_with_tied_projection_equals_self() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let proj = AttentionProjection::new(&mut store, "a", 4, 2, 2, 2, &mut r).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(random_matrix(&mut r, 3, 4));
        let state = StreamState::new(&g, x, Stream::Main);
        let s = self_attention(&mut g, &state, &proj).unwrap();
        let c = cross_attention(&mut g, &state, &state, &proj, &proj).unwrap();
        assert_eq!(g.value(s.value), g.value(c.value));
    }

    #[test]
    fn single_source_token_is_copied_to_every_row() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let pt = AttentionProjection::new(&mut store, "t", 4, 1, 3, 3, &mut r).unwrap();
        let ps = AttentionProjection::new(&mut store, "s", 4, 1, 3, 3, &mut r).unwrap();
        let mut g = Graph::new(&store);
        let target = g.constant(random_matrix(&mut r, 4, 4));
        let source = g.constant(random_matrix(&mut r, 1, 4));
        let t = StreamState::new(&g, target, Stream::Main);
        let s = StreamState::new(&g, source, Stream::Peripheral);
        let out = cross_attention(&mut g, &t, &s, &pt, &ps).unwrap();
        let value = g.value(out.value);
        for row in 1..4 {
            assert_eq!(value.row(row), value.row(0));
        }
    }

    #[test]
    fn two_by_three_cross_matches_unrolled() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let (qt, kt, vt, ot) = (
            random_matrix(&mut r, 2, 2),
            random_matrix(&mut r, 2, 2),
            random_matrix(&mut r, 2, 2),
            random_matrix(&mut r, 2, 2),
        );
        let (qs, ks, vs, os) = (
            random_matrix(&mut r, 2, 2),
            random_matrix(&mut r, 2, 2),
            random_matrix(&mut r, 2, 2),
            random_matrix(&mut r, 2, 2),
        );
        let pt = hand_projection(&mut store, "t", qt.clone(), kt, vt, ot.clone());
        let ps = hand_projection(&mut store, "s", qs, ks.clone(), vs.clone(), os);
        let tm = random_matrix(&mut r, 2, 2);
        let sm = random_matrix(&mut r, 3, 2);
        let mut g = Graph::new(&store);
        let t = g.constant(tm.clone());
        let s = g.constant(sm.clone());
        let t = StreamState::new(&g, t, Stream::Peripheral);
        let s = StreamState::new(&g, s, Stream::Main);
        let out = cross_attention(&mut g, &t, &s, &pt, &ps).unwrap();
        assert_eq!(g.shape(out.weights[0]), (2, 3));
        let oracle = unrolled(&tm, &sm, &qt, &ks, &vs, &ot);
        assert!(g.value(out.value).max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn cross_rejects_key_dimension_mismatch() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let pt = AttentionProjection::new(&mut store, "t", 4, 1, 3, 3, &mut r).unwrap();
        let ps = AttentionProjection::new(&mut store, "s", 4, 1, 2, 3, &mut r).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(random_matrix(&mut r, 2, 4));
        let st = StreamState::new(&g, x, Stream::Main);
        assert!(matches!(cross_attention(&mut g, &st, &st, &pt, &ps), Err(Error::Shape { .. })));
    }

    #[test]
    fn bidirectional_tied_is_twice_self() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let proj = AttentionProjection::new(&mut store, "a", 4, 2, 2, 2, &mut r).unwrap();
        let cta = CrossTextAttention::tied(proj.clone());
        let mut g = Graph::new(&store);
        let x = g.constant(random_matrix(&mut r, 3, 4));
        let state = StreamState::new(&g, x, Stream::Main);
        let s = self_attention(&mut g, &state, &proj).unwrap();
        let b = bidirectional_attention(&mut g, &state, &state, &cta).unwrap();
        assert_eq!(g.value(b.combined), &g.value(s.value).scale(2.0));
    }

    #[test]
    fn bidirectional_with_zero_values_is_zero() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let cta = CrossTextAttention::new(&mut store, "cta", 4, 2, 2, 2, &mut r).unwrap();
        for id in cta.value_params() {
            let (rows, cols) = store.get(id).shape();
            *store.get_mut(id) = Matrix::zeros(rows, cols);
        }
        let mut g = Graph::new(&store);
        let xs = g.constant(random_matrix(&mut r, 3, 4));
        let xt = g.constant(random_matrix(&mut r, 3, 4));
        let s = StreamState::new(&g, xs, Stream::Main);
        let t = StreamState::new(&g, xt, Stream::Peripheral);
        let b = bidirectional_attention(&mut g, &s, &t, &cta).unwrap();
        assert_eq!(g.value(b.combined), &Matrix::zeros(3, 4));
    }

    #[test]
    fn bidirectional_equals_independent_terms() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let cta = CrossTextAttention::new(&mut store, "cta", 4, 2, 2, 2, &mut r).unwrap();
        let xs_m = random_matrix(&mut r, 3, 4);
        let xt_m = random_matrix(&mut r, 3, 4);
        let mut g = Graph::new(&store);
        let xs = g.constant(xs_m);
        let xt = g.constant(xt_m);
        let s = StreamState::new(&g, xs, Stream::Main);
        let t = StreamState::new(&g, xt, Stream::Peripheral);
        let b = bidirectional_attention(&mut g, &s, &t, &cta).unwrap();

        let mut g2 = Graph::new(&store);
        let xs2 = g2.constant(g.value(xs).clone());
        let xt2 = g2.constant(g.value(xt).clone());
        let s2 = StreamState::new(&g2, xs2, Stream::Main);
        let t2 = StreamState::new(&g2, xt2, Stream::Peripheral);
        let ts = cross_attention(&mut g2, &t2, &s2, &cta.peripheral, &cta.main).unwrap();
        let st = cross_attention(&mut g2, &s2, &t2, &cta.main, &cta.peripheral).unwrap();
        let expected = g2.value(ts.value).add(g2.value(st.value)).unwrap();
        assert!(g.value(b.combined).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn bidirectional_rejects_unequal_lengths() {
        let mut r = rng(10);
        let mut store = ParamStore::new();
        let cta = CrossTextAttention::new(&mut store, "cta", 4, 1, 2, 2, &mut r).unwrap();
        let mut g = Graph::new(&store);
        let xs = g.constant(random_matrix(&mut r, 3, 4));
        let xt = g.constant(random_matrix(&mut r, 2, 4));
        let s = StreamState::new(&g, xs, Stream::Main);
        let t = StreamState::new(&g, xt, Stream::Peripheral);
        assert!(matches!(bidirectional_attention(&mut g, &s, &t, &cta), Err(Error::Shape { .. })));
    }

    #[test]
    fn padding_mask_zeroes_padded_columns() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let proj = AttentionProjection::new(&mut store, "a", 4, 1, 2, 2, &mut r).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(random_matrix(&mut r, 4, 4));
        let state = StreamState::with_mask(x, Stream::Main, vec![true, true, false, false]);
        let out = self_attention(&mut g, &state, &proj).unwrap();
        let w = g.value(out.weights[0]);
        for row in 0..4 {
            assert_eq!(w.get(row, 2), 0.0);
            assert_eq!(w.get(row, 3), 0.0);
            assert!((w.get(row, 0) + w.get(row, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut r = rng(12);
        let mut store = ParamStore::new();
        let cta = CrossTextAttention::new(&mut store, "cta", 8, 2, 4, 4, &mut r).unwrap();
        let selfp = AttentionProjection::new(&mut store, "self", 8, 2, 4, 4, &mut r).unwrap();
        let xs = store.add("xs", random_matrix(&mut r, 4, 8));
        let xt = store.add("xt", random_matrix(&mut r, 3, 8));
        let xt4 = store.add("xt4", random_matrix(&mut r, 4, 8));
        let report = grad_check(&store, &[], 1e-4, |g| {
            let (xs, xt, xt4) = (g.param(xs), g.param(xt), g.param(xt4));
            let s = StreamState::new(g, xs, Stream::Main);
            let t = StreamState::new(g, xt, Stream::Peripheral);
            let t4 = StreamState::new(g, xt4, Stream::Peripheral);
            let a = self_attention(g, &s, &selfp)?.value;
            let c = cross_attention(g, &t, &s, &cta.peripheral, &cta.main)?.value;
            let b = bidirectional_attention(g, &s, &t4, &cta)?.combined;
            let a = g.gelu(a);
            let c = g.gelu(c);
            let b = g.gelu(b);
            let sa = g.sum_all(a);
            let sc = g.sum_all(c);
            let sb = g.sum_all(b);
            let ab = g.add(sa, sc)?;
            g.add(ab, sb)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weights_are_row_stochastic(seed in any::<u64>(), n_q in 1usize..5, n_s in 1usize..5) {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let pq = AttentionProjection::new(&mut store, "q", 4, 2, 2, 2, &mut r).unwrap();
            let ps = AttentionProjection::new(&mut store, "s", 4, 2, 2, 2, &mut r).unwrap();
            let mut g = Graph::new(&store);
            let q = g.constant(random_matrix(&mut r, n_q, 4).scale(3.0));
            let s = g.constant(random_matrix(&mut r, n_s, 4).scale(3.0));
            let q = StreamState::new(&g, q, Stream::Main);
            let s = StreamState::new(&g, s, Stream::Peripheral);
            let out = cross_attention(&mut g, &q, &s, &pq, &ps).unwrap();
            for w in out.weights {
                let w = g.value(w);
                for row in 0..w.rows() {
                    prop_assert!(w.row(row).iter().all(|&v| v >= 0.0));
                    prop_assert!((w.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn source_permutation_permutes_weight_columns(seed in any::<u64>(), n_s in 2usize..6) {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let pq = AttentionProjection::new(&mut store, "q", 4, 1, 3, 3, &mut r).unwrap();
            let ps = AttentionProjection::new(&mut store, "s", 4, 1, 3, 3, &mut r).unwrap();
            let qm = random_matrix(&mut r, 3, 4);
            let sm = random_matrix(&mut r, n_s, 4);
            // reverse the source positions
            let perm: Vec<usize> = (0..n_s).rev().collect();
            let permuted = Matrix::from_fn(n_s, 4, |i, c| sm.get(perm[i], c));

            let mut g = Graph::new(&store);
            let q = g.constant(qm);
            let s = g.constant(sm);
            let sp = g.constant(permuted);
            let q = StreamState::new(&g, q, Stream::Main);
            let s = StreamState::new(&g, s, Stream::Peripheral);
            let sp = StreamState::new(&g, sp, Stream::Peripheral);
            let a = cross_attention(&mut g, &q, &s, &pq, &ps).unwrap();
            let b = cross_attention(&mut g, &q, &sp, &pq, &ps).unwrap();
            let (wa, wb) = (g.value(a.weights[0]), g.value(b.weights[0]));
            for row in 0..3 {
                for (i, &p) in perm.iter().enumerate() {
                    prop_assert!((wb.get(row, i) - wa.get(row, p)).abs() < 1e-12);
                }
            }
            prop_assert!(g.value(a.value).max_abs_diff(g.value(b.value)) < 1e-12);
        }
    }
}
