//! Scaled-down segmentation graph preserving the structural contracts:
//! a 2.5D stem (3x3x3 convolution collapsing the slice axis), a shared
//! strided-convolution encoder, two independent fusion decoders with spatial
//! attention gates, and per-scale heads producing four-channel polymorphic
//! logits and two separate two-channel multitask logits at five scales
//! (/1 .. /16).

use crate::engine::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const SCALES: [usize; 5] = [1, 2, 4, 8, 16];
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stem width; encoder stages grow from here.
    pub base_width: usize,
    /// Fixed decoder and head width.
    pub decoder_width: usize,
    /// Input patch size; must be divisible by 16.
    pub patch: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 12,
            decoder_width: 24,
            patch: 64,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch % 16 != 0 || self.patch == 0 {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if self.base_width < 4 || self.decoder_width < 4 {
            return Err(Error::Config("widths must be >= 4".into()));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> [usize; 5] {
        let b = self.base_width;
        [b, b * 2, b * 4, b * 8, b * 8]
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvP {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct BnP {
    gamma: usize,
    beta: usize,
    /// Index of the running mean/var pair.
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: ConvP,
    bn: BnP,
}

#[derive(Clone, Debug)]
struct DecoderLayout {
    laterals: [ConvP; 5],
    td_fuse: [ConvBn; 4],
    bu_down: [ConvP; 4],
    bu_fuse: [ConvBn; 4],
    attn: [ConvP; 5],
}

#[derive(Clone, Debug)]
struct HeadLayout {
    /// (depthwise weight, pointwise conv, batch norm) per block.
    blocks: [(usize, ConvP, BnP); 3],
    final_conv: ConvP,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvBn,
    enc: [(ConvBn, ConvBn); 4],
    poly_decoder: DecoderLayout,
    mt_decoder: DecoderLayout,
    poly_heads: [HeadLayout; 5],
    airway_heads: [HeadLayout; 5],
    vessel_heads: [HeadLayout; 5],
}

/// Which kind of initialization each parameter gets.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    HeConv { fan_in: usize },
    SmallConv,
    Zero,
    One,
}

struct LayoutBuilder {
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    stats_channels: Vec<usize>,
}

impl LayoutBuilder {
    fn new() -> Self {
        LayoutBuilder {
            shapes: Vec::new(),
            inits: Vec::new(),
            stats_channels: Vec::new(),
        }
    }

    fn add(&mut self, shape: Vec<usize>, init: Init) -> usize {
        self.shapes.push(shape);
        self.inits.push(init);
        self.shapes.len() - 1
    }

    fn conv(&mut self, oc: usize, ic: usize, k: usize, bias: bool) -> ConvP {
        let w = self.add(vec![oc, ic, k, k], Init::HeConv { fan_in: ic * k * k });
        let b = bias.then(|| self.add(vec![oc], Init::Zero));
        ConvP { w, b }
    }

    fn conv_small(&mut self, oc: usize, ic: usize, k: usize) -> ConvP {
        let w = self.add(vec![oc, ic, k, k], Init::SmallConv);
        let b = Some(self.add(vec![oc], Init::Zero));
        ConvP { w, b }
    }

    fn bn(&mut self, c: usize) -> BnP {
        let gamma = self.add(vec![c], Init::One);
        let beta = self.add(vec![c], Init::Zero);
        self.stats_channels.push(c);
        BnP {
            gamma,
            beta,
            stats: self.stats_channels.len() - 1,
        }
    }

    fn conv_bn(&mut self, oc: usize, ic: usize, k: usize) -> ConvBn {
        let conv = self.conv(oc, ic, k, false);
        let bn = self.bn(oc);
        ConvBn { conv, bn }
    }

    fn decoder(&mut self, enc_w: [usize; 5], d: usize) -> DecoderLayout {
        let laterals = std::array::from_fn(|i| self.conv(d, enc_w[i], 1, true));
        let td_fuse = std::array::from_fn(|_| self.conv_bn(d, d, 3));
        let bu_down = std::array::from_fn(|_| self.conv(d, d, 3, true));
        let bu_fuse = std::array::from_fn(|_| self.conv_bn(d, d, 3));
        let attn = std::array::from_fn(|_| self.conv_small(1, d, 1));
        DecoderLayout {
            laterals,
            td_fuse,
            bu_down,
            bu_fuse,
            attn,
        }
    }

    fn head(&mut self, d: usize, out_ch: usize) -> HeadLayout {
        let blocks = std::array::from_fn(|_| {
            let dw = self.add(vec![d, 3, 3], Init::HeConv { fan_in: 9 });
            let pw = self.conv(d, d, 1, false);
            let bn = self.bn(d);
            (dw, pw, bn)
        });
        let final_conv = self.conv_small(out_ch, d, 1);
        HeadLayout { blocks, final_conv }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, LayoutBuilder) {
    let mut b = LayoutBuilder::new();
    let enc_w = cfg.encoder_widths();
    let d = cfg.decoder_width;
    // stem: the 3x3x3 kernel collapsing 3 slices into one plane
    let stem = b.conv_bn(enc_w[0], 3, 3);
    let enc = std::array::from_fn(|i| {
        let ic = enc_w[i];
        let oc = enc_w[i + 1];
        (b.conv_bn(oc, ic, 3), b.conv_bn(oc, oc, 3))
    });
    let poly_decoder = b.decoder(enc_w, d);
    let mt_decoder = b.decoder(enc_w, d);
    let poly_heads = std::array::from_fn(|_| b.head(d, 4));
    let airway_heads = std::array::from_fn(|_| b.head(d, 2));
    let vessel_heads = std::array::from_fn(|_| b.head(d, 2));
    (
        Layout {
            stem,
            enc,
            poly_decoder,
            mt_decoder,
            poly_heads,
            airway_heads,
            vessel_heads,
        },
        b,
    )
}

/// Logit grids at five scales for each head, plus the attention maps of the
/// two decoders for explainability dumps.
pub struct NetworkOutputs {
    pub poly: [NodeId; 5],
    pub airway: [NodeId; 5],
    pub vessel: [NodeId; 5],
    pub attn_poly: [NodeId; 5],
    pub attn_mt: [NodeId; 5],
}

#[derive(Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    layout: Layout,
    pub params: Vec<ArrayD<T>>,
    pub running_mean: Vec<Array1<T>>,
    pub running_var: Vec<Array1<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, builder) = build_layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Normal::new(0.0f64, 1.0).unwrap();
        let params = builder
            .shapes
            .iter()
            .zip(builder.inits.iter())
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                match init {
                    Init::Zero => ArrayD::from_elem(IxDyn(shape), T::zero()),
                    Init::One => ArrayD::from_elem(IxDyn(shape), T::one()),
                    Init::HeConv { fan_in } => {
                        let std = (2.0 / *fan_in as f64).sqrt();
                        let vals: Vec<T> = (0..n)
                            .map(|_| T::from_f(unit.sample(&mut rng) * std))
                            .collect();
                        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
                    }
                    Init::SmallConv => {
                        let vals: Vec<T> = (0..n)
                            .map(|_| T::from_f(unit.sample(&mut rng) * 0.01))
                            .collect();
                        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
                    }
                }
            })
            .collect();
        let running_mean = builder
            .stats_channels
            .iter()
            .map(|&c| Array1::from_elem(c, T::zero()))
            .collect();
        let running_var = builder
            .stats_channels
            .iter()
            .map(|&c| Array1::from_elem(c, T::one()))
            .collect();
        Ok(Model {
            cfg,
            layout,
            params,
            running_mean,
            running_var,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Convert parameters and statistics to another float width.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.mapv(|v| U::from_f(v.to_f())))
                .collect(),
            running_mean: self
                .running_mean
                .iter()
                .map(|p| p.mapv(|v| U::from_f(v.to_f())))
                .collect(),
            running_var: self
                .running_var
                .iter()
                .map(|p| p.mapv(|v| U::from_f(v.to_f())))
                .collect(),
        }
    }

    fn check_input(&self, input: &ArrayD<T>) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "network input must be [N,3,H,W], got {s:?}"
            )));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Shape(format!(
                "input spatial dims {}x{} must be multiples of 16",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Training-mode forward: parameters enter the graph as differentiable
    /// leaves, batch normalization uses batch statistics, and running
    /// statistics are updated in place.
    pub fn forward_train(&mut self, g: &mut Graph<T>, input: ArrayD<T>) -> Result<NetworkOutputs> {
        self.check_input(&input)?;
        let x = g.constant(input);
        let mut pass = Pass {
            g,
            model_params: &self.params,
            running_mean: Some(&mut self.running_mean),
            running_var: Some(&mut self.running_var),
            frozen_mean: None,
            frozen_var: None,
            param_nodes: std::collections::HashMap::new(),
            training: true,
        };
        let out = pass.run(&self.layout, x);
        Ok(out)
    }

    /// Evaluation-mode forward: frozen running statistics, constant
    /// parameters, deterministic.
    pub fn forward_eval(&self, g: &mut Graph<T>, input: ArrayD<T>) -> Result<NetworkOutputs> {
        self.check_input(&input)?;
        let x = g.constant(input);
        let mut pass = Pass {
            g,
            model_params: &self.params,
            running_mean: None,
            running_var: None,
            frozen_mean: Some(&self.running_mean),
            frozen_var: Some(&self.running_var),
            param_nodes: std::collections::HashMap::new(),
            training: false,
        };
        let out = pass.run(&self.layout, x);
        Ok(out)
    }
}

struct Pass<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    model_params: &'a [ArrayD<T>],
    running_mean: Option<&'a mut Vec<Array1<T>>>,
    running_var: Option<&'a mut Vec<Array1<T>>>,
    frozen_mean: Option<&'a [Array1<T>]>,
    frozen_var: Option<&'a [Array1<T>]>,
    param_nodes: std::collections::HashMap<usize, NodeId>,
    training: bool,
}

impl<'a, T: Scalar> Pass<'a, T> {
    fn p(&mut self, idx: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let v = self.model_params[idx].clone();
        let id = if self.training {
            self.g.param(idx, v)
        } else {
            self.g.constant(v)
        };
        self.param_nodes.insert(idx, id);
        id
    }

    fn conv(&mut self, x: NodeId, c: ConvP, stride: usize, pad: usize) -> NodeId {
        let w = self.p(c.w);
        let b = c.b.map(|b| self.p(b));
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, x: NodeId, bn: BnP) -> NodeId {
        if self.training {
            let gamma = self.p(bn.gamma);
            let beta = self.p(bn.beta);
            let (out, mean, var) = self.g.batch_norm(x, gamma, beta, T::from_f(BN_EPS));
            let mom = T::from_f(BN_MOMENTUM);
            let keep = T::one() - mom;
            if let (Some(rm), Some(rv)) = (self.running_mean.as_mut(), self.running_var.as_mut()) {
                let rm = &mut rm[bn.stats];
                let rv = &mut rv[bn.stats];
                rm.zip_mut_with(&mean, |r, &b| *r = keep * *r + mom * b);
                rv.zip_mut_with(&var, |r, &b| *r = keep * *r + mom * b);
            }
            out
        } else {
            let rm = &self.frozen_mean.unwrap()[bn.stats];
            let rv = &self.frozen_var.unwrap()[bn.stats];
            let gamma = &self.model_params[bn.gamma];
            let beta = &self.model_params[bn.beta];
            let eps = T::from_f(BN_EPS);
            let c = rm.len();
            let mut scale = Array1::<T>::zeros(c);
            let mut shift = Array1::<T>::zeros(c);
            for k in 0..c {
                let g = gamma[[k]];
                let b = beta[[k]];
                let s = g / (rv[k] + eps).sqrt();
                scale[k] = s;
                shift[k] = b - s * rm[k];
            }
            self.g.affine_per_channel(x, scale, shift)
        }
    }

    fn conv_bn_swish(&mut self, x: NodeId, cb: ConvBn, stride: usize, pad: usize) -> NodeId {
        let c = self.conv(x, cb.conv, stride, pad);
        let n = self.bn(c, cb.bn);
        self.g.swish(n)
    }

    fn decoder(
        &mut self,
        enc_feats: &[NodeId; 5],
        layout: &DecoderLayout,
    ) -> ([NodeId; 5], [NodeId; 5]) {
        let laterals: Vec<NodeId> = (0..5)
            .map(|i| self.conv(enc_feats[i], layout.laterals[i], 1, 0))
            .collect();
        // top-down pass with bilinear x2 upsampling
        let mut td = [laterals[4]; 5];
        for i in (0..4).rev() {
            let up = self.g.upsample2x(td[i + 1]);
            let sum = self.g.add(laterals[i], up);
            td[i] = self.conv_bn_swish(sum, layout.td_fuse[i], 1, 1);
        }
        // bottom-up pass with strided-convolution downsampling
        let mut bu = [td[0]; 5];
        for i in 1..5 {
            let down = self.conv(bu[i - 1], layout.bu_down[i - 1], 2, 1);
            let sum = self.g.add(td[i], down);
            bu[i] = self.conv_bn_swish(sum, layout.bu_fuse[i - 1], 1, 1);
        }
        // spatial attention gates
        let mut gated = bu;
        let mut maps = bu;
        for i in 0..5 {
            let a = self.conv(bu[i], layout.attn[i], 1, 0);
            let alpha = self.g.sigmoid(a);
            maps[i] = alpha;
            gated[i] = self.g.mul_broadcast_channel(bu[i], alpha);
        }
        (gated, maps)
    }

    fn head(&mut self, x: NodeId, layout: &HeadLayout) -> NodeId {
        let mut h = x;
        for (dw, pw, bn) in layout.blocks.iter() {
            let w = self.p(*dw);
            let d = self.g.depthwise3x3(h, w);
            let p = self.conv(d, *pw, 1, 0);
            let n = self.bn(p, *bn);
            h = self.g.swish(n);
        }
        self.conv(h, layout.final_conv, 1, 0)
    }

    fn run(&mut self, layout: &Layout, x: NodeId) -> NetworkOutputs {
        let e0 = self.conv_bn_swish(x, layout.stem, 1, 1);
        let mut enc = [e0; 5];
        for i in 0..4 {
            let (strided, refine) = layout.enc[i];
            let s = self.conv_bn_swish(enc[i], strided, 2, 1);
            enc[i + 1] = self.conv_bn_swish(s, refine, 1, 1);
        }
        let (poly_feats, attn_poly) = self.decoder(&enc, &layout.poly_decoder);
        let (mt_feats, attn_mt) = self.decoder(&enc, &layout.mt_decoder);
        let poly = std::array::from_fn(|i| self.head(poly_feats[i], &layout.poly_heads[i]));
        let airway = std::array::from_fn(|i| self.head(mt_feats[i], &layout.airway_heads[i]));
        let vessel = std::array::from_fn(|i| self.head(mt_feats[i], &layout.vessel_heads[i]));
        NetworkOutputs {
            poly,
            airway,
            vessel,
            attn_poly,
            attn_mt,
        }
    }
}

/// Standalone spatial attention gate for tests: `alpha = sigmoid(conv1x1)`,
/// output `alpha * features`.
pub fn attention_gate<T: Scalar>(
    g: &mut Graph<T>,
    features: NodeId,
    w: NodeId,
    b: NodeId,
) -> (NodeId, NodeId) {
    let a = g.conv2d(features, w, Some(b), 1, 0);
    let alpha = g.sigmoid(a);
    let gated = g.mul_broadcast_channel(features, alpha);
    (gated, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::conv2d_reference;
    use ndarray::{Array4, IxDyn};
    use rand::Rng;

    fn rand_input(n: usize, h: usize, w: usize, seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array4::<f32>::zeros((n, 3, h, w));
        for v in a.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        a.into_dyn()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            decoder_width: 8,
            patch: 32,
            seed: 11,
        }
    }

    #[test]
    fn config_rejects_bad_patch() {
        let cfg = ModelConfig {
            patch: 40,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_config_under_two_million_params() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        assert!(
            m.param_count() < 2_000_000,
            "param count {}",
            m.param_count()
        );
    }

    #[test]
    fn stem_collapses_slices_like_2d_kernel() {
        // identical slices through the 3x3x3 stem == collapsed 2D kernel
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = Array4::<f64>::zeros((5, 3, 3, 3));
        for v in w.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut slice = ndarray::Array2::<f64>::zeros((8, 8));
        for v in slice.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut x = Array4::<f64>::zeros((1, 3, 8, 8));
        for c in 0..3 {
            x.index_axis_mut(ndarray::Axis(0), 0)
                .index_axis_mut(ndarray::Axis(0), c)
                .assign(&slice);
        }
        let out3d = conv2d_reference(x.view().into_dyn(), w.view().into_dyn(), None, 1, 1);
        // collapse depth: sum kernel over the slice axis, apply as 2D conv
        let w2d = w.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let x1 = slice
            .insert_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
        let out2d = conv2d_reference(x1.view().into_dyn(), w2d.view().into_dyn(), None, 1, 1);
        for (a, b) in out3d.iter().zip(out2d.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stem_zero_input_zero_output() {
        let mut m = Model::<f32>::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 32, 32]), 0.0f32));
        let w = {
            let mut pass_w = m.params[m.layout.stem.conv.w].clone();
            pass_w.fill(0.1);
            m.params[m.layout.stem.conv.w] = pass_w;
            g.constant(m.params[m.layout.stem.conv.w].clone())
        };
        let out = g.conv2d(x, w, None, 1, 1);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_scale_shapes() {
        let mut m = Model::<f32>::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let out = m.forward_train(&mut g, rand_input(2, 32, 32, 5)).unwrap();
        for (i, &s) in SCALES.iter().enumerate() {
            let poly_shape = g.value(out.poly[i]).shape().to_vec();
            assert_eq!(poly_shape, vec![2, 4, 32 / s, 32 / s]);
            assert_eq!(
                g.value(out.airway[i]).shape().to_vec(),
                vec![2, 2, 32 / s, 32 / s]
            );
            assert_eq!(
                g.value(out.vessel[i]).shape().to_vec(),
                vec![2, 2, 32 / s, 32 / s]
            );
        }
    }

    #[test]
    fn multitask_softmax_normalizes_independently() {
        let mut m = Model::<f32>::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let out = m.forward_train(&mut g, rand_input(1, 32, 32, 9)).unwrap();
        let pa = g.softmax_channels(out.airway[0]);
        let pv = g.softmax_channels(out.vessel[0]);
        for id in [pa, pv] {
            let v = g.value(id);
            let s = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let sum = s[[0, 0, y, x]] + s[[0, 1, y, x]];
                    assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn attention_maps_in_unit_interval() {
        let mut m = Model::<f32>::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let out = m.forward_train(&mut g, rand_input(1, 32, 32, 13)).unwrap();
        for i in 0..5 {
            for id in [out.attn_poly[i], out.attn_mt[i]] {
                assert!(g
                    .value(id)
                    .iter()
                    .all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn attention_gate_zero_weights_halves_features() {
        let mut g = Graph::<f64>::new();
        let feats = g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 2.0));
        let w = g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 1, 1]), 0.0));
        let b = g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let (gated, alpha) = attention_gate(&mut g, feats, w, b);
        assert!(g.value(alpha).iter().all(|&v| v == 0.5));
        assert!(g.value(gated).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn eval_forward_deterministic() {
        let m = Model::<f32>::new(small_cfg()).unwrap();
        let input = rand_input(1, 32, 32, 21);
        let mut g1 = Graph::new();
        let o1 = m.forward_eval(&mut g1, input.clone()).unwrap();
        let mut g2 = Graph::new();
        let o2 = m.forward_eval(&mut g2, input).unwrap();
        let a = g1.value(o1.poly[0]);
        let b = g2.value(o2.poly[0]);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::<f32>::new(small_cfg()).unwrap();
        let b = Model::<f32>::new(small_cfg()).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
