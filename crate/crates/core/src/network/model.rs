//! Encoder, keypoint decoder and the assembled variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant, DECODER_STRIDE, ENCODER_STRIDE};
use super::layers::{shape5, AttentionLayer, BatchNormLayer, ConvLayer, ConvUnit, Init, ResidualBlock, Shape5, Trace};
use super::roi::{roi_crop_window, Affine, CropWindow};
use crate::data::targets::TargetGrid;
use crate::error::{Error, Result};
use crate::ops::conv::ConvGeometry;
use crate::params::{ParamStore, Session};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Prior probability encoded in the initial confidence bias.
const CONFIDENCE_PRIOR: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvUnit,
    stem_norm: BatchNormLayer,
    stages: Vec<Vec<ResidualBlock>>,
    attention: Option<AttentionLayer>,
    dropout: f64,
}

impl Encoder {
    fn new(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let e = &cfg.encoder;
        let kt = e.temporal_kernel;
        let c = e.stage_channels;
        let stem_geometry = ConvGeometry::new([kt, 7, 7], [1, 2, 2], [kt / 2, 3, 3]);
        let stem = ConvUnit::new(store, rng, "encoder.stem", 3, c[0], c[0], stem_geometry, e.factorized);
        let stem_norm = BatchNormLayer::new(store, "encoder.stem_norm", c[0]);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = c[0];
        for (i, &out_ch) in c.iter().enumerate() {
            let mut blocks = Vec::with_capacity(e.blocks_per_stage);
            for b in 0..e.blocks_per_stage {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                let name = format!("encoder.stage{}.block{}", i + 1, b + 1);
                blocks.push(ResidualBlock::new(store, rng, &name, in_ch, out_ch, stride, kt, e.factorized));
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let attention = (e.variant == Variant::Network1 && e.attention_enabled)
            .then(|| AttentionLayer::new(store, rng, "encoder.attention", c[2], cfg.attention_width(), cfg.attention_budget));
        Self {
            stem,
            stem_norm,
            stages,
            attention,
            dropout: cfg.dropout,
        }
    }

    /// Four stage features, each averaged over time to `[N, C_i, 1, H_i, W_i]`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, clip: Var) -> Result<[Var; 4]> {
        let mut x = self.stem.forward(s, clip)?;
        x = self.stem_norm.forward(s, x)?;
        x = s.tape.relu(x)?;
        let mut taps = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(s, x)?;
            }
            if i == 2 {
                if let Some(att) = &self.attention {
                    x = att.forward(s, x)?;
                }
            }
            let mut tap = s.tape.temporal_mean(x)?;
            if i == 3 && s.training() && self.dropout > 0.0 {
                let seed = s.next_dropout_seed();
                tap = s.tape.dropout(tap, self.dropout, seed)?;
            }
            taps.push(tap);
        }
        Ok([taps[0], taps[1], taps[2], taps[3]])
    }

    pub fn trace(&self, t: &mut Trace, x: Shape5) -> Result<[Shape5; 4]> {
        let mut y = self.stem.trace(t, x)?;
        let mut taps = [[0; 5]; 4];
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                y = block.trace(t, y)?;
            }
            if i == 2 {
                if let Some(att) = &self.attention {
                    y = att.trace(t, y)?;
                }
            }
            taps[i] = [y[0], y[1], 1, y[3], y[4]];
        }
        Ok(taps)
    }
}

#[derive(Clone, Debug)]
enum Trunk {
    /// Transposed-conv upsampling from stage 4 with lateral merges of stages 3 and 2.
    Upsampling {
        reduce: ConvLayer,
        up1: ConvLayer,
        lateral3: ConvLayer,
        up2: ConvLayer,
        lateral2: ConvLayer,
    },
    /// Pyramid fusion, then a strided conv from the finest fused map.
    Pyramid { laterals: Vec<ConvLayer>, down: ConvLayer },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    trunk: Trunk,
    refine: ConvLayer,
    confidence: ConvLayer,
    offsets: Option<ConvLayer>,
    embeddings: Option<ConvLayer>,
}

/// Tape handles for the decoder heads, all `[N, ·, 1, H/4, W/4]`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub confidence: Var,
    pub offsets: Option<Var>,
    pub embeddings: Option<Var>,
}

impl Decoder {
    fn new(cfg: &ModelConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.encoder.stage_channels;
        let point = ConvGeometry::pointwise();
        let up = ConvGeometry::new([1, 2, 2], [1, 2, 2], [0, 0, 0]);
        let (trunk, width) = if cfg.fpn_enabled {
            let f = cfg.fpn_channels;
            let laterals = (0..4)
                .map(|i| ConvLayer::new(store, rng, &format!("decoder.fpn.lateral{}", i + 1), c[i], f, point, true, Init::Kaiming))
                .collect();
            let down_g = ConvGeometry::new([1, 3, 3], [1, 2, 2], [0, 1, 1]);
            let down = ConvLayer::new(store, rng, "decoder.fpn.down", f, f, down_g, true, Init::Kaiming);
            (Trunk::Pyramid { laterals, down }, f)
        } else {
            let d = c[1];
            (
                Trunk::Upsampling {
                    reduce: ConvLayer::new(store, rng, "decoder.reduce", c[3], d, point, true, Init::Kaiming),
                    up1: ConvLayer::transposed(store, rng, "decoder.up1", d, d, up),
                    lateral3: ConvLayer::new(store, rng, "decoder.lateral3", c[2], d, point, true, Init::Kaiming),
                    up2: ConvLayer::transposed(store, rng, "decoder.up2", d, d, up),
                    lateral2: ConvLayer::new(store, rng, "decoder.lateral2", c[1], d, point, true, Init::Kaiming),
                },
                d,
            )
        };
        let refine = ConvLayer::new(store, rng, "decoder.refine", width, width, ConvGeometry::same([1, 3, 3]), true, Init::Kaiming);
        let head = Init::Normal(0.01);
        let confidence = ConvLayer::new(store, rng, "decoder.head.confidence", width, 1, point, true, head);
        if let Some(b) = confidence.bias {
            let prior = (CONFIDENCE_PRIOR / (1.0 - CONFIDENCE_PRIOR)).ln() as f32;
            store.get_mut(b).data_mut().fill(prior);
        }
        let full_heads = cfg.variant() == Variant::Network1;
        let offsets = full_heads.then(|| ConvLayer::new(store, rng, "decoder.head.offset", width, 2, point, true, head));
        let embeddings = full_heads.then(|| {
            ConvLayer::new(store, rng, "decoder.head.embedding", width, cfg.embed_dim, point, true, Init::Normal(0.1))
        });
        Self {
            trunk,
            refine,
            confidence,
            offsets,
            embeddings,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, taps: [Var; 4]) -> Result<ForwardOutput> {
        let mut y = match &self.trunk {
            Trunk::Upsampling {
                reduce,
                up1,
                lateral3,
                up2,
                lateral2,
            } => {
                let mut y = reduce.forward(s, taps[3])?;
                y = s.tape.relu(y)?;
                y = up1.forward(s, y)?;
                let l3 = lateral3.forward(s, taps[2])?;
                y = s.tape.add(y, l3)?;
                y = s.tape.relu(y)?;
                y = up2.forward(s, y)?;
                let l2 = lateral2.forward(s, taps[1])?;
                y = s.tape.add(y, l2)?;
                s.tape.relu(y)?
            }
            Trunk::Pyramid { laterals, down } => {
                let mut above: Option<Var> = None;
                for i in (0..4).rev() {
                    let mut p = laterals[i].forward(s, taps[i])?;
                    if let Some(top) = above {
                        let up = s.tape.upsample_nearest(top, [1, 2, 2])?;
                        p = s.tape.add(p, up)?;
                    }
                    above = Some(p);
                }
                let p1 = above.expect("four pyramid levels");
                let y = down.forward(s, p1)?;
                s.tape.relu(y)?
            }
        };
        y = self.refine.forward(s, y)?;
        y = s.tape.relu(y)?;
        let conf = self.confidence.forward(s, y)?;
        let confidence = s.tape.sigmoid(conf)?;
        let offsets = match &self.offsets {
            Some(h) => {
                let o = h.forward(s, y)?;
                Some(s.tape.sigmoid(o)?)
            }
            None => None,
        };
        let embeddings = match &self.embeddings {
            Some(h) => Some(h.forward(s, y)?),
            None => None,
        };
        Ok(ForwardOutput {
            confidence,
            offsets,
            embeddings,
        })
    }

    fn trace(&self, t: &mut Trace, taps: [Shape5; 4]) -> Result<Shape5> {
        let y = match &self.trunk {
            Trunk::Upsampling {
                reduce,
                up1,
                lateral3,
                up2,
                lateral2,
            } => {
                let y = reduce.trace(t, taps[3])?;
                let y = up1.trace(t, y)?;
                let l3 = lateral3.trace(t, taps[2])?;
                if y != l3 {
                    return Err(Error::shape("decoder", format!("upsampled {y:?} vs lateral {l3:?}")));
                }
                let y = up2.trace(t, y)?;
                let l2 = lateral2.trace(t, taps[1])?;
                if y != l2 {
                    return Err(Error::shape("decoder", format!("upsampled {y:?} vs lateral {l2:?}")));
                }
                y
            }
            Trunk::Pyramid { laterals, down } => {
                let mut p = [[0; 5]; 4];
                for i in 0..4 {
                    p[i] = laterals[i].trace(t, taps[i])?;
                }
                let shapes: Vec<Shape5> = p.to_vec();
                crate::fpn::check_halving(&shapes)?;
                down.trace(t, p[0])?
            }
        };
        let y = self.refine.trace(t, y)?;
        let out = self.confidence.trace(t, y)?;
        if let Some(h) = &self.offsets {
            h.trace(t, y)?;
        }
        if let Some(h) = &self.embeddings {
            h.trace(t, y)?;
        }
        Ok(out)
    }
}

/// Per-image decoder maps in row-major `H/4 × W/4` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutputs {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub confidence: Vec<f32>,
    /// `(dx, dy)` cell fractions.
    pub offsets: Option<[Vec<f32>; 2]>,
    /// `embed_dim` planes.
    pub embeddings: Option<Vec<f32>>,
    pub embed_dim: usize,
    /// Maps decoder pixel coordinates `(cell + offset)·stride` to frame pixels.
    pub transform: Affine,
}

impl DecoderOutputs {
    pub fn empty(height: usize, width: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            stride,
            confidence: vec![0.0; height * width],
            offsets: None,
            embeddings: None,
            embed_dim: 0,
            transform: Affine::identity(),
        }
    }

    pub fn embedding(&self, row: usize, col: usize) -> Option<Vec<f32>> {
        let e = self.embeddings.as_ref()?;
        let plane = self.height * self.width;
        Some((0..self.embed_dim).map(|d| e[d * plane + row * self.width + col]).collect())
    }
}

#[derive(Clone, Debug)]
pub struct ModelTrace {
    /// Time-pooled stage features.
    pub stages: [Shape5; 4],
    pub confidence: Shape5,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    window: CropWindow,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let (h, w) = config.encoder.input_resolution;
        let window = match config.variant() {
            Variant::Network1 => CropWindow::full(h, w),
            Variant::Network2 => config.roi.aligned_window(h, w, ENCODER_STRIDE)?,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut store, &mut rng);
        let decoder = Decoder::new(&config, &mut store, &mut rng);
        Ok((
            Self {
                config,
                window,
                encoder,
                decoder,
            },
            store,
        ))
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    /// Window of the network input processed by the encoder.
    pub fn window(&self) -> CropWindow {
        self.window
    }

    /// `(rows, cols)` of the decoder maps.
    pub fn decoder_extent(&self) -> (usize, usize) {
        (self.window.height() / DECODER_STRIDE, self.window.width() / DECODER_STRIDE)
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.encoder.input_resolution;
        let t = self.config.encoder.temporal_depth;
        if shape.len() != 5 || shape[1] != 3 || shape[2] != t || shape[3] != h || shape[4] != w {
            return Err(Error::shape(
                "forward",
                format!("clip shape {shape:?}, expected [N, 3, {t}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    /// Stage features of an already-cropped clip.
    pub fn encode<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<[Var; 4]> {
        self.encoder.forward(s, x)
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, clip: &Tensor<R>) -> Result<ForwardOutput> {
        self.check_clip(clip.shape())?;
        let (input, _) = roi_crop_window(clip, &self.window)?;
        let x = s.input(input);
        let taps = self.encoder.forward(s, x)?;
        self.decoder.forward(s, taps)
    }

    pub fn trace(&self, input: Shape5) -> Result<ModelTrace> {
        self.check_clip(&input)?;
        let x = [input[0], 3, input[2], self.window.height(), self.window.width()];
        let mut t = Trace::default();
        let stages = self.encoder.trace(&mut t, x)?;
        let confidence = self.decoder.trace(&mut t, stages)?;
        Ok(ModelTrace {
            stages,
            confidence,
            macs: t.macs,
        })
    }

    pub fn count_macs(&self, input: Shape5) -> Result<u64> {
        Ok(self.trace(input)?.macs)
    }

    /// Decoder-pixel to frame-pixel map for frames of `frame_w × frame_h`.
    pub fn frame_transform(&self, frame_w: usize, frame_h: usize) -> Affine {
        let (h, w) = self.config.encoder.input_resolution;
        self.window
            .transform()
            .affine()
            .then(&Affine::scale(frame_w as f64 / w as f64, frame_h as f64 / h as f64))
    }

    /// Decoder grid for frames of `frame_w × frame_h`, used to rasterize targets.
    pub fn target_grid(&self, frame_w: usize, frame_h: usize) -> TargetGrid {
        let (height, width) = self.decoder_extent();
        TargetGrid {
            height,
            width,
            stride: DECODER_STRIDE,
            transform: self.frame_transform(frame_w, frame_h),
        }
    }

    /// Inference-mode forward returning per-image maps.
    pub fn infer(&self, store: &ParamStore<f32>, clip: &Tensor<f32>, frame_size: (usize, usize)) -> Result<Vec<DecoderOutputs>> {
        let mut s = Session::inference(store);
        let out = self.forward(&mut s, clip)?;
        Ok(self.maps(&s, &out, frame_size))
    }

    /// Splits head tensors into per-image maps.
    pub fn maps(&self, s: &Session<'_, f32>, out: &ForwardOutput, frame_size: (usize, usize)) -> Vec<DecoderOutputs> {
        let conf = s.value(out.confidence);
        let [n, _, _, h, w] = shape5(conf.shape());
        let plane = h * w;
        let transform = self.frame_transform(frame_size.0, frame_size.1);
        (0..n)
            .map(|b| {
                let offsets = out.offsets.map(|o| {
                    let d = &s.value(o).data()[b * 2 * plane..(b + 1) * 2 * plane];
                    [d[..plane].to_vec(), d[plane..].to_vec()]
                });
                let (embeddings, embed_dim) = match out.embeddings {
                    Some(e) => {
                        let k = s.value(e).dim(1);
                        (Some(s.value(e).data()[b * k * plane..(b + 1) * k * plane].to_vec()), k)
                    }
                    None => (None, 0),
                };
                DecoderOutputs {
                    height: h,
                    width: w,
                    stride: DECODER_STRIDE,
                    confidence: conf.data()[b * plane..(b + 1) * plane].to_vec(),
                    offsets,
                    embeddings,
                    embed_dim,
                    transform,
                }
            })
            .collect()
    }
}

/// Number of trainable scalars.
pub fn count_params<R: Real>(store: &ParamStore<R>) -> usize {
    store.count_trainable()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::{Experiment, Scale};
    use crate::network::layers::Init;
    use rand::SeedableRng;

    fn random_clip(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f32> {
        let (h, w) = cfg.encoder.input_resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, 3, cfg.encoder.temporal_depth, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn stage_resolutions_at_256x512() {
        let mut cfg = ModelConfig::micro(Experiment::Exp1);
        cfg.encoder.input_resolution = (256, 512);
        cfg.encoder.temporal_depth = 4;
        let (model, store) = Model::new(cfg.clone(), 0).unwrap();
        let clip = random_clip(&cfg, 1, 1);
        let mut s = Session::inference(&store);
        let x = s.input(clip);
        let taps = model.encode(&mut s, x).unwrap();
        let sizes: Vec<(usize, usize)> = taps.iter().map(|&v| (s.value(v).dim(3), s.value(v).dim(4))).collect();
        assert_eq!(sizes, vec![(128, 256), (64, 128), (32, 64), (16, 32)]);
        let trace = model.trace([1, 3, 4, 256, 512]).unwrap();
        for (t, &v) in trace.stages.iter().zip(&taps) {
            assert_eq!(t.as_slice(), s.value(v).shape());
        }
        let (full, _) = Model::new(ModelConfig::preset(Experiment::Exp2, Scale::Full), 0).unwrap();
        let stages = full.trace([1, 3, 4, 256, 512]).unwrap().stages;
        let sizes: Vec<(usize, usize)> = stages.iter().map(|s| (s[3], s[4])).collect();
        assert_eq!(sizes, vec![(128, 256), (64, 128), (32, 64), (16, 32)]);
    }

    #[test]
    fn trace_matches_forward_for_every_preset() {
        for e in [Experiment::Exp1, Experiment::Exp2, Experiment::Exp3] {
            let cfg = ModelConfig::micro(e);
            let (model, store) = Model::new(cfg.clone(), 2).unwrap();
            let clip = random_clip(&cfg, 2, 3);
            let mut s = Session::inference(&store);
            let out = model.forward(&mut s, &clip).unwrap();
            let trace = model.trace([2, 3, 2, 32, 64]).unwrap();
            assert_eq!(s.value(out.confidence).shape(), trace.confidence.as_slice());
            let (hd, wd) = model.decoder_extent();
            assert_eq!(trace.confidence[3..], [hd, wd]);
            assert_eq!(out.offsets.is_some(), e != Experiment::Exp3);
        }
    }

    #[test]
    fn decoder_is_quarter_resolution() {
        let cfg = ModelConfig::preset(Experiment::Exp1, Scale::Desk);
        let (model, _) = Model::new(cfg, 0).unwrap();
        let t = model.trace([1, 3, 2, 64, 128]).unwrap();
        assert_eq!(t.confidence, [1, 1, 1, 16, 32]);
        let cfg = ModelConfig::preset(Experiment::Exp3, Scale::Desk);
        let (model, _) = Model::new(cfg, 0).unwrap();
        assert_eq!(model.window().rows, (16, 64));
        assert_eq!(model.trace([1, 3, 2, 64, 128]).unwrap().confidence, [1, 1, 1, 12, 32]);
    }

    #[test]
    fn zero_heads_give_half_confidence() {
        let cfg = ModelConfig::micro(Experiment::Exp2);
        let (model, mut store) = Model::new(cfg.clone(), 4).unwrap();
        for name in ["decoder.head.confidence.weight", "decoder.head.confidence.bias"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).data_mut().fill(0.0);
        }
        let maps = model.infer(&store, &random_clip(&cfg, 1, 5), (64, 32)).unwrap();
        assert!(maps[0].confidence.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn random_weights_keep_confidence_inside_unit_interval() {
        for seed in 0..4 {
            let cfg = ModelConfig::micro(Experiment::Exp1);
            let (model, mut store) = Model::new(cfg.clone(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for id in store.ids().collect::<Vec<_>>() {
                if store.is_trainable(id) {
                    let shape = store.get(id).shape().to_vec();
                    store.set(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
                }
            }
            let maps = model.infer(&store, &random_clip(&cfg, 1, seed), (64, 32)).unwrap();
            assert!(maps[0].confidence.iter().all(|&p| p > 0.0 && p < 1.0));
            let [dx, dy] = maps[0].offsets.as_ref().unwrap();
            assert!(dx.iter().chain(dy).all(|&o| (0.0..1.0).contains(&o)));
        }
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let cfg = ModelConfig::micro(Experiment::Exp1);
        let (model, store) = Model::new(cfg, 0).unwrap();
        for training in [false, true] {
            let mut s = Session::new(&store, training, false, 0);
            let x = s.input(Tensor::zeros(&[1, 3, 2, 32, 64]));
            let taps = model.encode(&mut s, x).unwrap();
            for v in taps {
                assert!(s.value(v).data().iter().all(|&f| f == 0.0));
            }
        }
    }

    #[test]
    fn lightweight_parameter_budget() {
        let cfg = ModelConfig::preset(Experiment::Exp2, Scale::Full);
        let (_, store) = Model::new(cfg.clone(), 0).unwrap();
        let factorized = count_params(&store);
        let mut full = cfg;
        full.encoder.factorized = false;
        let (_, full_store) = Model::new(full, 0).unwrap();
        assert!(factorized < 15_000_000, "{factorized}");
        assert!(factorized < count_params(&full_store));
    }

    #[test]
    fn pointwise_conv_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ConvLayer::new(&mut store, &mut rng, "c", 3, 4, ConvGeometry::pointwise(), true, Init::Kaiming);
        assert_eq!(count_params(&store), 16);
    }

    #[test]
    fn doubling_widths_quadruples_stage_weights() {
        let stage_weights = |widths: [usize; 4]| {
            let mut cfg = ModelConfig::preset(Experiment::Exp1, Scale::Desk);
            cfg.encoder.stage_channels = widths;
            let (_, store) = Model::new(cfg, 0).unwrap();
            store
                .entries()
                .iter()
                .filter(|e| e.name.starts_with("encoder.stage") && e.name.ends_with(".weight"))
                .map(|e| e.value.numel())
                .sum::<usize>()
        };
        assert_eq!(stage_weights([16, 32, 64, 128]) * 4, stage_weights([32, 64, 128, 256]));
    }

    #[test]
    fn network2_uses_fewer_macs() {
        let n1 = ModelConfig::preset(Experiment::Exp2, Scale::Full);
        let n2 = ModelConfig::preset(Experiment::Exp3, Scale::Full);
        let (m1, _) = Model::new(n1, 0).unwrap();
        let (m2, _) = Model::new(n2, 0).unwrap();
        let input = [1, 3, 4, 256, 512];
        assert!(m2.count_macs(input).unwrap() < m1.count_macs(input).unwrap());
    }

    #[test]
    fn full_roi_matches_uncropped_network() {
        let mut cfg = ModelConfig::micro(Experiment::Exp3);
        cfg.roi = crate::network::RoiBounds::full();
        let (model, store) = Model::new(cfg.clone(), 9).unwrap();
        let clip = random_clip(&cfg, 1, 2);
        let mut s = Session::inference(&store);
        let out = model.forward(&mut s, &clip).unwrap();
        let mut s2 = Session::inference(&store);
        let x = s2.input(clip);
        let taps = model.encode(&mut s2, x).unwrap();
        let direct = model.decoder.forward(&mut s2, taps).unwrap();
        assert_eq!(s.value(out.confidence), s2.value(direct.confidence));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::micro(Experiment::Exp2);
        let run = || {
            let (model, store) = Model::new(cfg.clone(), 11).unwrap();
            let mut s = Session::new(&store, true, true, 5);
            let out = model.forward(&mut s, &random_clip(&cfg, 2, 1)).unwrap();
            s.value(out.embeddings.unwrap()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_clip_shape_rejected() {
        let cfg = ModelConfig::micro(Experiment::Exp1);
        let (model, store) = Model::new(cfg, 0).unwrap();
        let mut s = Session::inference(&store);
        assert!(model.forward(&mut s, &Tensor::zeros(&[1, 3, 2, 32, 32])).is_err());
    }
}
