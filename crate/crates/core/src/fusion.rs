//! Spatial fusion of the main and peripheral feature maps.
//!
//! Each position gets a scalar activity weight per stream, the L1 norm of
//! its feature vector divided by the summed norms of both streams. Streams
//! are scaled by their weights and summed, so the fused map is a per-position
//! convex combination of the two inputs. Before weighing, each stream passes
//! through a [`SpatialAttentionBlock`] (convolution, bottleneck, self-attention).

use rand::Rng;

use crate::attention::{self_attention, AttentionProjection, Stream, StreamState};
use crate::error::{Error, Result};
use crate::numeric::{share_or_half, Graph, Matrix, ParamId, ParamStore, Var};

/// Number of fusion scales, one per encoder block depth.
pub const SCALES: usize = 4;

/// Per-position feature vectors (`L × V`) at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub scale: usize,
    pub values: Matrix,
}

/// Per-position weights (`L × 1`) in `[0, 1]` for one stream at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct WeighingMap {
    pub scale: usize,
    pub weights: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedMap {
    pub scale: usize,
    pub values: Matrix,
}

impl FeatureMap {
    pub fn new(scale: usize, values: Matrix) -> Result<Self> {
        if !(1..=SCALES).contains(&scale) {
            return Err(Error::Domain(format!("scale {scale} outside 1..={SCALES}")));
        }
        Ok(FeatureMap { scale, values })
    }
}

fn check_pair(a: &FeatureMap, b: &FeatureMap, op: &'static str) -> Result<()> {
    if a.scale != b.scale {
        return Err(Error::shape(op, format!("scale {}", a.scale), format!("scale {}", b.scale)));
    }
    a.values.expect_same_shape(&b.values, op)
}

fn row_l1(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.abs()).sum()).collect()
}

/// Activity weights for both streams. Where both vectors are (numerically)
/// zero, each stream gets 0.5.
pub fn ordered_weighing_maps(p1: &FeatureMap, p2: &FeatureMap) -> Result<(WeighingMap, WeighingMap)> {
    check_pair(p1, p2, "ordered_weighing_maps")?;
    let (n1, n2) = (row_l1(&p1.values), row_l1(&p2.values));
    let rows = n1.len();
    let w1 = Matrix::from_fn(rows, 1, |r, _| share_or_half(n1[r], n2[r]));
    let w2 = Matrix::from_fn(rows, 1, |r, _| share_or_half(n2[r], n1[r]));
    Ok((
        WeighingMap {
            scale: p1.scale,
            weights: w1,
        },
        WeighingMap {
            scale: p2.scale,
            weights: w2,
        },
    ))
}

/// Scales each position's vector by its weight.
pub fn enhance(p: &FeatureMap, s: &WeighingMap) -> Result<FeatureMap> {
    if p.scale != s.scale || s.weights.shape() != (p.values.rows(), 1) {
        return Err(Error::shape(
            "enhance",
            format!("scale {} {}", p.scale, p.values.shape_str()),
            format!("scale {} {}", s.scale, s.weights.shape_str()),
        ));
    }
    let values = Matrix::from_fn(p.values.rows(), p.values.cols(), |r, c| {
        s.weights.get(r, 0) * p.values.get(r, c)
    });
    Ok(FeatureMap { scale: p.scale, values })
}

/// Elementwise sum of the enhanced maps.
pub fn fuse(p1e: &FeatureMap, p2e: &FeatureMap) -> Result<FusedMap> {
    check_pair(p1e, p2e, "fuse")?;
    Ok(FusedMap {
        scale: p1e.scale,
        values: p1e.values.add(&p2e.values)?,
    })
}

/// Weighing, enhancement and summation in one call.
pub fn spatial_fusion(p1: &FeatureMap, p2: &FeatureMap) -> Result<FusedMap> {
    let (s1, s2) = ordered_weighing_maps(p1, p2)?;
    fuse(&enhance(p1, &s1)?, &enhance(p2, &s2)?)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub main_weights: Var,
    pub peripheral_weights: Var,
    pub fused: Var,
}

/// Tape version of [`spatial_fusion`] for training.
pub fn fuse_on_graph(g: &mut Graph, p1: Var, p2: Var) -> Result<FusionVars> {
    if g.shape(p1) != g.shape(p2) {
        return Err(Error::shape("fuse", g.value(p1).shape_str(), g.value(p2).shape_str()));
    }
    let n1 = g.row_abs_sum(p1);
    let n2 = g.row_abs_sum(p2);
    let s1 = g.share_or_half(n1, n2)?;
    let s2 = g.share_or_half(n2, n1)?;
    let e1 = g.mul_col(p1, s1)?;
    let e2 = g.mul_col(p2, s2)?;
    let fused = g.add(e1, e2)?;
    Ok(FusionVars {
        main_weights: s1,
        peripheral_weights: s2,
        fused,
    })
}

/// Enhancement path applied to a stream before weighing: a width-3
/// position-wise convolution, a residual `V → V/2 → V` bottleneck, and a
/// residual single-head self-attention over positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialAttentionBlock {
    width: usize,
    /// Taps applied to the previous, current and next position.
    conv: [ParamId; 3],
    conv_bias: ParamId,
    reduce_w: ParamId,
    reduce_b: ParamId,
    expand_w: ParamId,
    expand_b: ParamId,
    attention: AttentionProjection,
}

impl SpatialAttentionBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::check_width(width)?;
        let half = width / 2;
        let conv = [
            store.add_glorot(format!("{prefix}.conv.prev"), width, width, rng),
            store.add_glorot(format!("{prefix}.conv.center"), width, width, rng),
            store.add_glorot(format!("{prefix}.conv.next"), width, width, rng),
        ];
        Ok(SpatialAttentionBlock {
            width,
            conv,
            conv_bias: store.add(format!("{prefix}.conv.bias"), Matrix::zeros(1, width)),
            reduce_w: store.add_glorot(format!("{prefix}.reduce.w"), width, half, rng),
            reduce_b: store.add(format!("{prefix}.reduce.b"), Matrix::zeros(1, half)),
            expand_w: store.add_glorot(format!("{prefix}.expand.w"), half, width, rng),
            expand_b: store.add(format!("{prefix}.expand.b"), Matrix::zeros(1, width)),
            attention: AttentionProjection::new(store, &format!("{prefix}.attn"), width, 1, half, half, rng)?,
        })
    }

    /// A block whose output equals its input: identity centre tap, zero side
    /// taps, and zeroed residual branches.
    pub fn identity(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let block = Self::new(store, prefix, width, rng)?;
        *store.get_mut(block.conv[0]) = Matrix::zeros(width, width);
        *store.get_mut(block.conv[1]) = Matrix::identity(width);
        *store.get_mut(block.conv[2]) = Matrix::zeros(width, width);
        *store.get_mut(block.expand_w) = Matrix::zeros(width / 2, width);
        let out = block.attention.output();
        let (r, c) = store.get(out).shape();
        *store.get_mut(out) = Matrix::zeros(r, c);
        Ok(block)
    }

    fn check_width(width: usize) -> Result<()> {
        if width < 2 {
            return Err(Error::Config(format!("spatial attention block needs V >= 2, got {width}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let (_, v) = g.shape(x);
        if v != self.width {
            return Err(Error::shape("spatial attention block", format!("V={}", self.width), g.value(x).shape_str()));
        }
        let prev = g.shift_rows(x, 1);
        let next = g.shift_rows(x, -1);
        let (w_prev, w_center, w_next) = (g.param(self.conv[0]), g.param(self.conv[1]), g.param(self.conv[2]));
        let a = g.matmul(prev, w_prev)?;
        let b = g.matmul(x, w_center)?;
        let c = g.matmul(next, w_next)?;
        let ab = g.add(a, b)?;
        let abc = g.add(ab, c)?;
        let bias = g.param(self.conv_bias);
        let conv = g.add_row(abc, bias)?;

        let (rw, rb) = (g.param(self.reduce_w), g.param(self.reduce_b));
        let (ew, eb) = (g.param(self.expand_w), g.param(self.expand_b));
        let reduced = g.linear(conv, rw, rb)?;
        let reduced = g.gelu(reduced);
        let expanded = g.linear(reduced, ew, eb)?;
        let bottleneck = g.add(conv, expanded)?;

        let state = StreamState::with_mask(bottleneck, Stream::Main, valid.to_vec());
        let attended = self_attention(g, &state, &self.attention)?;
        g.add(bottleneck, attended.value)
    }

    /// Runs the block on a standalone feature map (no padding).
    pub fn apply(&self, store: &ParamStore, p: &FeatureMap) -> Result<FeatureMap> {
        let mut g = Graph::new(store);
        let x = g.constant(p.values.clone());
        let out = self.forward(&mut g, x, &vec![true; p.values.rows()])?;
        Ok(FeatureMap {
            scale: p.scale,
            values: g.value(out).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, scale: usize, l: usize, v: usize) -> FeatureMap {
        FeatureMap::new(scale, Matrix::from_fn(l, v, |_, _| rand::Rng::gen_range(rng, -2.0..2.0))).unwrap()
    }

    #[test]
    fn weighing_is_the_l1_ratio() {
        let p1 = FeatureMap::new(1, Matrix::from_rows(&[&[1.0, -2.0]])).unwrap();
        let p2 = FeatureMap::new(1, Matrix::from_rows(&[&[0.5, -0.5]])).unwrap();
        let (s1, s2) = ordered_weighing_maps(&p1, &p2).unwrap();
        assert_eq!(s1.weights.data(), &[0.75]);
        assert_eq!(s2.weights.data(), &[0.25]);
    }

    #[test]
    fn equal_maps_weigh_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_map(&mut rng, 2, 5, 3);
        let (s1, s2) = ordered_weighing_maps(&p, &p).unwrap();
        assert!(s1.weights.data().iter().chain(s2.weights.data()).all(|&w| w == 0.5));
    }

    #[test]
    fn zero_vectors_weigh_half() {
        let z = FeatureMap::new(3, Matrix::zeros(2, 4)).unwrap();
        let (s1, s2) = ordered_weighing_maps(&z, &z).unwrap();
        assert_eq!(s1.weights.data(), &[0.5, 0.5]);
        assert_eq!(s2.weights.data(), &[0.5, 0.5]);
        assert_eq!(spatial_fusion(&z, &z).unwrap().values, Matrix::zeros(2, 4));
    }

    #[test]
    fn mismatches_are_shape_errors() {
        let a = FeatureMap::new(1, Matrix::zeros(2, 4)).unwrap();
        let b = FeatureMap::new(2, Matrix::zeros(2, 4)).unwrap();
        let c = FeatureMap::new(1, Matrix::zeros(3, 4)).unwrap();
        assert!(matches!(ordered_weighing_maps(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(ordered_weighing_maps(&a, &c), Err(Error::Shape { .. })));
        assert!(matches!(fuse(&a, &c), Err(Error::Shape { .. })));
        let s = WeighingMap {
            scale: 1,
            weights: Matrix::zeros(3, 1),
        };
        assert!(matches!(enhance(&a, &s), Err(Error::Shape { .. })));
        assert!(FeatureMap::new(5, Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn enhance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_map(&mut rng, 1, 4, 3);
        let ones = WeighingMap {
            scale: 1,
            weights: Matrix::filled(4, 1, 1.0),
        };
        assert_eq!(enhance(&p, &ones).unwrap(), p);
        let zeros = WeighingMap {
            scale: 1,
            weights: Matrix::zeros(4, 1),
        };
        assert!(enhance(&p, &zeros).unwrap().values.data().iter().all(|&v| v == 0.0));

        let s = WeighingMap {
            scale: 1,
            weights: Matrix::from_fn(4, 1, |_, _| rand::Rng::gen_range(&mut rng, 0.0..1.0)),
        };
        let e = enhance(&p, &s).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let ratio = e.values.get(r, c) / p.values.get(r, c);
                assert!((ratio - s.weights.get(r, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_map(&mut rng, 4, 6, 5);
        assert_eq!(spatial_fusion(&p, &p).unwrap().values, p.values);

        let zero = FeatureMap::new(4, Matrix::zeros(6, 5)).unwrap();
        assert_eq!(spatial_fusion(&p, &zero).unwrap().values, p.values);

        // L1 norms 3 and 1 at the single position
        let p1 = FeatureMap::new(1, Matrix::from_rows(&[&[2.0, -1.0, 0.0]])).unwrap();
        let p2 = FeatureMap::new(1, Matrix::from_rows(&[&[0.25, 0.25, -0.5]])).unwrap();
        let fused = spatial_fusion(&p1, &p2).unwrap();
        let expected = [0.75 * 2.0 + 0.25 * 0.25, 0.75 * -1.0 + 0.25 * 0.25, 0.25 * -0.5];
        for (a, b) in fused.values.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_fusion_matches_pure_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p1 = random_map(&mut rng, 1, 5, 4);
        let mut p2 = random_map(&mut rng, 1, 5, 4);
        p2.values.row_mut(2).fill(0.0);
        p2.values.row_mut(3).fill(0.0);
        let mut p1z = p1.clone();
        p1z.values.row_mut(3).fill(0.0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(p1z.values.clone());
        let b = g.constant(p2.values.clone());
        let out = fuse_on_graph(&mut g, a, b).unwrap();
        assert_eq!(g.value(out.fused), &spatial_fusion(&p1z, &p2).unwrap().values);
        let (s1, _) = ordered_weighing_maps(&p1z, &p2).unwrap();
        assert_eq!(g.value(out.main_weights), &s1.weights);
    }

    #[test]
    fn identity_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = SpatialAttentionBlock::identity(&mut store, "sa", 8, &mut rng).unwrap();
        let p = random_map(&mut rng, 1, 5, 8);
        assert_eq!(block.apply(&store, &p).unwrap(), p);
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let block = SpatialAttentionBlock::new(&mut store, "sa", 8, &mut rng).unwrap();
        for l in [1, 5, 256] {
            let p = random_map(&mut rng, 2, l, 8);
            let out = block.apply(&store, &p).unwrap();
            assert_eq!(out.values.shape(), (l, 8));
            assert!(out.values.is_finite());
        }
    }

    #[test]
    fn block_rejects_narrow_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        assert!(matches!(
            SpatialAttentionBlock::new(&mut store, "sa", 1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let block = SpatialAttentionBlock::new(&mut store, "sa", 8, &mut rng).unwrap();
        let x = store.add("x", Matrix::from_fn(4, 8, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0)));
        let report = grad_check(&store, &[], 1e-4, |g| {
            let xv = g.param(x);
            let y = block.forward(g, xv, &[true, true, true, false])?;
            let y = g.gelu(y);
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn graph_fusion_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_fn(4, 6, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0)));
        let b = store.add("b", Matrix::from_fn(4, 6, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0)));
        let w = store.add("w", Matrix::from_fn(6, 3, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0)));
        let report = grad_check(&store, &[], 1e-4, |g| {
            let (av, bv, wv) = (g.param(a), g.param(b), g.param(w));
            let out = fuse_on_graph(g, av, bv)?;
            let proj = g.matmul(out.fused, wv)?;
            let proj = g.gelu(proj);
            Ok(g.sum_all(proj))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn arb_pair() -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
        (1usize..6, 1usize..6, any::<u64>()).prop_map(|(l, v, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (random_map(&mut rng, 1, l, v), random_map(&mut rng, 1, l, v))
        })
    }

    proptest! {
        #[test]
        fn weights_sum_to_one((p1, p2) in arb_pair()) {
            let (s1, s2) = ordered_weighing_maps(&p1, &p2).unwrap();
            for r in 0..s1.weights.rows() {
                let (a, b) = (s1.weights.get(r, 0), s2.weights.get(r, 0));
                prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                prop_assert!((a + b - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn fuse_is_symmetric_and_idempotent((p1, p2) in arb_pair()) {
            prop_assert_eq!(spatial_fusion(&p1, &p2).unwrap().values, spatial_fusion(&p2, &p1).unwrap().values);
            prop_assert_eq!(spatial_fusion(&p1, &p1).unwrap().values, p1.values.clone());
        }

        #[test]
        fn fuse_is_positively_homogeneous((p1, p2) in arb_pair(), c in 0.01f64..100.0) {
            let scaled1 = FeatureMap::new(1, p1.values.scale(c)).unwrap();
            let scaled2 = FeatureMap::new(1, p2.values.scale(c)).unwrap();
            let (s1, s2) = ordered_weighing_maps(&p1, &p2).unwrap();
            let (t1, t2) = ordered_weighing_maps(&scaled1, &scaled2).unwrap();
            prop_assert!(s1.weights.max_abs_diff(&t1.weights) < 1e-12);
            prop_assert!(s2.weights.max_abs_diff(&t2.weights) < 1e-12);
            let base = spatial_fusion(&p1, &p2).unwrap().values.scale(c);
            let fused = spatial_fusion(&scaled1, &scaled2).unwrap().values;
            prop_assert!(fused.max_abs_diff(&base) <= 1e-12 * c.max(1.0) * 10.0);
        }
    }
}
