//! Generator (mapping, synthesis, label branch), discriminator and the
//! domain-conditioned encoder.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::domain::DomainLabel;
use crate::losses::PerceptualNet;
use crate::nn::{Conv2d, GroupSet, Linear, ModConv, ParamGroup, ParamId, ParamStore, SQRT2};
use crate::rng::{derive_seed, normal_tensor, seeded, Rng};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{shape_err, Error, Result};

const LRELU: f64 = 0.2;

fn lrelu<S: Real>(g: &mut Graph<S>, x: Var) -> Var {
    g.leaky_relu(x, LRELU, SQRT2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Feature channels per resolution, from 4×4 up to `image_size`.
    pub channels: Vec<usize>,
    pub label_hidden: (usize, usize),
    pub perceptual_channels: Vec<usize>,
}

impl ArchConfig {
    /// Desk-scale profile for 32 or 64 pixel images.
    pub fn desk(image_size: usize) -> Self {
        let all = [64, 64, 32, 32, 16];
        let levels = (image_size.max(8).trailing_zeros() - 1) as usize;
        Self {
            image_size,
            z_dim: 128,
            w_dim: 128,
            mapping_layers: 4,
            channels: all[..levels.min(all.len())].to_vec(),
            label_hidden: (64, 32),
            perceptual_channels: vec![8, 16, 32, 32],
        }
    }

    /// 512×512 profile.
    pub fn paper() -> Self {
        Self {
            image_size: 512,
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 8,
            channels: vec![512, 512, 512, 512, 256, 128, 64, 32],
            label_hidden: (256, 128),
            perceptual_channels: vec![64, 128, 256, 256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!("image_size {s} must be a power of two >= 8")));
        }
        if self.channels.len() != self.levels() {
            return Err(Error::Config(format!(
                "{} channel entries for {} resolutions",
                self.channels.len(),
                self.levels()
            )));
        }
        if self.channels.iter().chain(&self.perceptual_channels).any(|&c| c == 0)
            || self.z_dim == 0
            || self.w_dim == 0
            || self.mapping_layers == 0
            || self.label_hidden.0 == 0
            || self.label_hidden.1 == 0
        {
            return Err(Error::Config("all widths must be positive".into()));
        }
        Ok(())
    }

    /// Number of resolutions from 4×4 to `image_size`.
    pub fn levels(&self) -> usize {
        (self.image_size.trailing_zeros() - 1) as usize
    }

    pub fn resolution(&self, level: usize) -> usize {
        4 << level
    }

    /// Rows of the extended latent: one per synthesis convolution.
    pub fn num_ws(&self) -> usize {
        2 * self.levels() - 1
    }

    /// Synthesis layers receiving encoder features: the last convolution of
    /// the two finest resolutions, never the 4x4 constant stage.
    pub fn injection_layers(&self) -> Vec<usize> {
        let last = self.num_ws() - 1;
        if self.levels() >= 3 {
            vec![last - 2, last]
        } else {
            vec![last]
        }
    }

    /// Resolution and channel count of synthesis layer `i`.
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        let level = i.div_ceil(2);
        (self.resolution(level), self.channels[level])
    }
}

/// Noise to intermediate latent.
#[derive(Clone, Debug)]
pub struct Mapping {
    pub layers: Vec<Linear>,
    pub z_dim: usize,
}

impl Mapping {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, a: &ArchConfig) -> Self {
        let layers = (0..a.mapping_layers)
            .map(|i| {
                let fan_in = if i == 0 { a.z_dim } else { a.w_dim };
                Linear::new(store, rng, &format!("mapping.fc{i}"), ParamGroup::Mapping, fan_in, a.w_dim, Some(0.0), 0.01)
            })
            .collect();
        Self { layers, z_dim: a.z_dim }
    }

    /// `z: [N, z_dim] -> w: [N, w_dim]`.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, z: Var) -> Var {
        let n = g.shape(z)[0];
        let sq = g.square(z);
        let ms = g.sum_to(sq, &[n, 1]);
        let ms = g.affine(ms, 1.0 / self.z_dim as f64, 1e-8);
        let inv = g.rsqrt(ms);
        let inv = g.broadcast_to(inv, &[n, self.z_dim]);
        let mut x = g.mul(z, inv);
        for l in &self.layers {
            x = l.forward(g, x);
            x = lrelu(g, x);
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct SynthLayer {
    pub conv: ModConv,
    pub upsample: bool,
    pub noise_strength: ParamId,
    pub bias: ParamId,
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct ToImage {
    pub conv: ModConv,
    pub bias: ParamId,
    /// Style row shared with the last convolution at this resolution.
    pub ws_index: usize,
}

/// Per-layer encoder features blended into the synthesis path.
pub struct Injection<'n> {
    pub layer: usize,
    pub features: Var,
    pub gate: &'n Conv2d,
}

pub struct SynthesisOutput {
    /// `[N, 1, H, W]` in `[-1, 1]`.
    pub image: Var,
    /// Output of every synthesis layer, coarse to fine.
    pub features: Vec<Var>,
}

/// Style-modulated synthesis from a learned 4×4 constant, with skip
/// connections summing upsampled single-channel outputs of every resolution.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub constant: ParamId,
    pub layers: Vec<SynthLayer>,
    pub to_image: Vec<ToImage>,
    pub num_ws: usize,
    pub w_dim: usize,
}

impl Synthesis {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, a: &ArchConfig) -> Self {
        let grp = ParamGroup::Synthesis;
        let c0 = a.channels[0];
        let constant = store.add("synthesis.const", grp, normal_tensor(rng, &[1, c0, 4, 4]));
        let mut layers = Vec::new();
        let mut to_image = Vec::new();
        let mut in_ch = c0;
        for level in 0..a.levels() {
            let res = a.resolution(level);
            let ch = a.channels[level];
            let count = if level == 0 { 1 } else { 2 };
            for k in 0..count {
                let i = layers.len();
                let name = format!("synthesis.b{res}.conv{k}");
                let conv = ModConv::new(store, rng, &name, grp, a.w_dim, in_ch, ch, 3, true);
                let noise_strength = store.add(format!("{name}.noise_strength"), grp, Tensor::zeros(&[1, 1, 1, 1]));
                let bias = store.add(format!("{name}.bias"), grp, Tensor::zeros(&[ch]));
                layers.push(SynthLayer {
                    conv,
                    upsample: level > 0 && k == 0,
                    noise_strength,
                    bias,
                    resolution: res,
                    channels: ch,
                });
                in_ch = ch;
                debug_assert_eq!(a.layer_shape(i), (res, ch));
            }
            let name = format!("synthesis.b{res}.to_image");
            to_image.push(ToImage {
                conv: ModConv::new(store, rng, &name, grp, a.w_dim, ch, 1, 1, false),
                bias: store.add(format!("{name}.bias"), grp, Tensor::zeros(&[1])),
                ws_index: layers.len() - 1,
            });
        }
        Self {
            constant,
            num_ws: layers.len(),
            layers,
            to_image,
            w_dim: a.w_dim,
        }
    }

    /// Row `i` of `ws: [N, L, w_dim]`.
    fn row<S: Real>(&self, g: &mut Graph<S>, ws: Var, i: usize) -> Var {
        let n = g.shape(ws)[0];
        let r = g.slice1(ws, i, 1);
        g.reshape(r, &[n, self.w_dim])
    }

    /// `ws: [N, L, w_dim]`. With `noise`, per-pixel noise is drawn from it;
    /// without, noise inputs are off.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ws: Var,
        mut noise: Option<&mut Rng>,
        inject: &[Injection<'_>],
    ) -> Result<SynthesisOutput> {
        let s = g.shape(ws).to_vec();
        if s.len() != 3 || s[1] != self.num_ws || s[2] != self.w_dim {
            return Err(shape_err!("ws {:?}, expected [N, {}, {}]", s, self.num_ws, self.w_dim));
        }
        let n = s[0];
        let c = g.param(self.constant);
        let c0 = g.shape(c)[1];
        let mut x = g.broadcast_to(c, &[n, c0, 4, 4]);
        let mut img: Option<Var> = None;
        let mut features = Vec::with_capacity(self.layers.len());
        let mut next_rgb = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.upsample {
                x = g.upsample_nearest2x(x);
            }
            let w = self.row(g, ws, i);
            x = layer.conv.forward(g, x, w);
            let r = layer.resolution;
            if let Some(rng) = noise.as_deref_mut() {
                let nz = g.constant(normal_tensor(rng, &[n, 1, r, r]));
                let st = g.param(layer.noise_strength);
                let st = g.broadcast_to(st, &[n, 1, r, r]);
                let nz = g.mul(nz, st);
                let nz = g.broadcast_to(nz, &[n, layer.channels, r, r]);
                x = g.add(x, nz);
            }
            let b = g.param(layer.bias);
            x = g.add_bias(x, b);
            x = lrelu(g, x);
            for inj in inject.iter().filter(|inj| inj.layer == i) {
                if g.shape(inj.features) != g.shape(x) {
                    return Err(shape_err!(
                        "injected features {:?} vs layer {} {:?}",
                        g.shape(inj.features),
                        i,
                        g.shape(x)
                    ));
                }
                let both = g.concat1(&[inj.features, x]);
                let m = inj.gate.forward(g, both);
                let m = g.sigmoid(m);
                let d = g.sub(inj.features, x);
                let md = g.mul(m, d);
                x = g.add(x, md);
            }
            features.push(x);
            if next_rgb < self.to_image.len() && self.to_image[next_rgb].ws_index == i {
                let t = &self.to_image[next_rgb];
                let w = self.row(g, ws, t.ws_index);
                let y = t.conv.forward(g, x, w);
                let b = g.param(t.bias);
                let y = g.add_bias(y, b);
                img = Some(match img {
                    Some(prev) => {
                        let up = g.upsample_bilinear(prev, r, r);
                        g.add(up, y)
                    }
                    None => y,
                });
                next_rgb += 1;
            }
        }
        let image = g.tanh(img.expect("synthesis has at least one resolution"));
        Ok(SynthesisOutput { image, features })
    }
}

/// Pointwise three-layer head from the concatenated synthesis features to
/// per-pixel class logits.
#[derive(Clone, Debug)]
pub struct LabelBranch {
    pub layers: [Conv2d; 3],
    pub in_channels: usize,
}

impl LabelBranch {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, a: &ArchConfig) -> Self {
        let in_channels = (0..a.num_ws()).map(|i| a.layer_shape(i).1).sum();
        let grp = ParamGroup::LabelBranch;
        let (h1, h2) = a.label_hidden;
        Self {
            layers: [
                Conv2d::new(store, rng, "label.fc0", grp, in_channels, h1, 1, 1, true),
                Conv2d::new(store, rng, "label.fc1", grp, h1, h2, 1, 1, true),
                Conv2d::new(store, rng, "label.fc2", grp, h2, 3, 1, 1, true),
            ],
            in_channels,
        }
    }

    /// Features at any resolution are bilinearly resized to `size` first.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, features: &[Var], size: usize) -> Result<Var> {
        let resized: Vec<Var> = features
            .iter()
            .map(|&f| {
                if g.shape(f)[2] == size {
                    f
                } else {
                    g.upsample_bilinear(f, size, size)
                }
            })
            .collect();
        let x = g.concat1(&resized);
        if g.shape(x)[1] != self.in_channels {
            return Err(shape_err!("{} feature channels, expected {}", g.shape(x)[1], self.in_channels));
        }
        self.forward_stack(g, x)
    }

    /// `x: [N, in_channels, H, W] -> [N, 3, H, W]`.
    pub fn forward_stack<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        if g.shape(x).len() != 4 || g.shape(x)[1] != self.in_channels {
            return Err(shape_err!("label branch input {:?}", g.shape(x)));
        }
        let h = self.layers[0].forward(g, x);
        let h = lrelu(g, h);
        let h = self.layers[1].forward(g, h);
        let h = lrelu(g, h);
        Ok(self.layers[2].forward(g, h))
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub mapping: Mapping,
    pub synthesis: Synthesis,
    pub label_branch: LabelBranch,
    /// Running mean of mapped latents (never trained by gradients).
    pub w_avg: ParamId,
}

/// Residual downsampling block: two 3×3 convolutions around a 2× average
/// pool, plus a pooled 1×1 skip, summed and scaled by `1/sqrt(2)`.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv0: Conv2d,
    pub conv1: Conv2d,
    pub skip: Conv2d,
}

impl DownBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, name: &str, grp: ParamGroup, cin: usize, cout: usize) -> Self {
        Self {
            conv0: Conv2d::new(store, rng, &format!("{name}.conv0"), grp, cin, cin, 3, 1, true),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), grp, cin, cout, 3, 1, true),
            skip: Conv2d::new(store, rng, &format!("{name}.skip"), grp, cin, cout, 1, 1, false),
        }
    }

    /// Returns the block output and the full-resolution `conv0` activation.
    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> (Var, Var) {
        let h = self.conv0.forward(g, x);
        let h0 = lrelu(g, h);
        let p = g.avg_pool2x(h0);
        let h = self.conv1.forward(g, p);
        let h = lrelu(g, h);
        let sp = g.avg_pool2x(x);
        let s = self.skip.forward(g, sp);
        let sum = g.add(h, s);
        (g.scale(sum, 1.0 / SQRT2), h0)
    }
}

/// Residual convolutional trunk shared by the discriminator and encoder.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub from_image: Conv2d,
    /// Finest resolution first.
    pub blocks: Vec<DownBlock>,
    pub final_conv: Conv2d,
    pub base_channels: usize,
}

pub struct TrunkOutput {
    /// `[N, C_4 * 16]`.
    pub flat: Var,
    /// `conv0` activations of each block, finest first.
    pub taps: Vec<Var>,
}

impl Trunk {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, prefix: &str, grp: ParamGroup, in_ch: usize, a: &ArchConfig) -> Self {
        let levels = a.levels();
        let top = a.channels[levels - 1];
        let from_image = Conv2d::new(store, rng, &format!("{prefix}.from_image"), grp, in_ch, top, 1, 1, true);
        let blocks = (1..levels)
            .rev()
            .map(|l| {
                let name = format!("{prefix}.b{}", a.resolution(l));
                DownBlock::new(store, rng, &name, grp, a.channels[l], a.channels[l - 1])
            })
            .collect();
        let c4 = a.channels[0];
        Self {
            from_image,
            blocks,
            final_conv: Conv2d::new(store, rng, &format!("{prefix}.b4.conv"), grp, c4, c4, 3, 1, true),
            base_channels: c4,
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> TrunkOutput {
        let h = self.from_image.forward(g, x);
        let mut h = lrelu(g, h);
        let mut taps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, tap) = b.forward(g, h);
            taps.push(tap);
            h = out;
        }
        let h = self.final_conv.forward(g, h);
        let h = lrelu(g, h);
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.base_channels * 16]);
        TrunkOutput { flat, taps }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub trunk: Trunk,
    pub fc: Linear,
    pub out: Linear,
}

impl Discriminator {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, a: &ArchConfig) -> Self {
        let grp = ParamGroup::Discriminator;
        let c4 = a.channels[0];
        Self {
            trunk: Trunk::new(store, rng, "disc", grp, 1, a),
            fc: Linear::new(store, rng, "disc.fc", grp, c4 * 16, c4, Some(0.0), 1.0),
            out: Linear::new(store, rng, "disc.out", grp, c4, 1, Some(0.0), 1.0),
        }
    }

    /// `x: [N, 1, H, W] -> logits [N, 1]`.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let t = self.trunk.forward(g, x);
        let h = self.fc.forward(g, t.flat);
        let h = lrelu(g, h);
        self.out.forward(g, h)
    }
}

/// Injection path for one synthesis layer.
#[derive(Clone, Debug)]
pub struct FeatureHead {
    pub layer: usize,
    /// Index into the trunk taps.
    pub tap: usize,
    pub head: Conv2d,
    pub gate: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub trunk: Trunk,
    pub wplus_head: Linear,
    pub heads: Vec<FeatureHead>,
    pub num_ws: usize,
    pub w_dim: usize,
}

pub struct EncoderOutput {
    /// `[N, L, w_dim]`.
    pub wplus: Var,
    /// `(synthesis layer, features)` pairs.
    pub features: Vec<(usize, Var)>,
}

impl Encoder {
    fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, a: &ArchConfig) -> Self {
        let grp = ParamGroup::Encoder;
        let levels = a.levels();
        let trunk = Trunk::new(store, rng, "encoder", grp, 2, a);
        let c4 = a.channels[0];
        let heads = a
            .injection_layers()
            .into_iter()
            .map(|layer| {
                let (res, ch) = a.layer_shape(layer);
                let level = res.trailing_zeros() as usize - 2;
                let tap = levels - 1 - level;
                let enc_ch = a.channels[level];
                FeatureHead {
                    layer,
                    tap,
                    head: Conv2d::new(store, rng, &format!("encoder.head{res}"), grp, enc_ch, ch, 1, 1, true),
                    gate: Conv2d::new(store, rng, &format!("encoder.gate{res}"), grp, 2 * ch, ch, 1, 1, true),
                }
            })
            .collect();
        Self {
            trunk,
            wplus_head: Linear::new(store, rng, "encoder.wplus", grp, c4 * 16, a.num_ws() * a.w_dim, Some(0.0), 1.0),
            heads,
            num_ws: a.num_ws(),
            w_dim: a.w_dim,
        }
    }

    /// `x: [N, 1, H, W]` with one domain label per image. The label enters as
    /// a constant second input channel (-1 source, +1 target).
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, labels: &[DomainLabel], w_avg: Var) -> Result<EncoderOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[0] != labels.len() {
            return Err(shape_err!("encoder input {:?} with {} labels", s, labels.len()));
        }
        let hw = s[2] * s[3];
        let lab = Tensor::from_fn(&[s[0], 1, s[2], s[3]], |i| S::lit(labels[i / hw].channel_value()));
        let lab = g.constant(lab);
        let inp = g.concat1(&[x, lab]);
        let t = self.trunk.forward(g, inp);
        let delta = self.wplus_head.forward(g, t.flat);
        let delta = g.reshape(delta, &[s[0], self.num_ws, self.w_dim]);
        let avg = g.reshape(w_avg, &[1, 1, self.w_dim]);
        let avg = g.broadcast_to(avg, &[s[0], self.num_ws, self.w_dim]);
        let wplus = g.add(delta, avg);
        let features = self
            .heads
            .iter()
            .map(|h| {
                let f = h.head.forward(g, t.taps[h.tap]);
                (h.layer, lrelu(g, f))
            })
            .collect();
        Ok(EncoderOutput { wplus, features })
    }
}

/// One generator pass driven by the encoder.
pub struct PassOutput {
    pub wplus: Var,
    pub image: Var,
    pub logits: Var,
}

/// Injected features with the synthesis layer they feed.
pub type LayerFeatures<S> = (usize, Tensor<S>);

/// The model registry: one generator, one discriminator, one encoder, and
/// the fixed perceptual feature extractor.
#[derive(Clone, Debug)]
pub struct Networks {
    pub arch: ArchConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: Encoder,
    pub perceptual: PerceptualNet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub group: ParamGroup,
    pub tensors: usize,
    pub scalars: usize,
}

impl Networks {
    /// Builds all networks; each gets its own RNG stream derived from `seed`.
    pub fn new<S: Real>(arch: &ArchConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let rng = |i| seeded(derive_seed(seed, i));
        let mapping = Mapping::new(&mut store, &mut rng(0), arch);
        let synthesis = Synthesis::new(&mut store, &mut rng(1), arch);
        let label_branch = LabelBranch::new(&mut store, &mut rng(2), arch);
        let w_avg = store.add("mapping.w_avg", ParamGroup::Fixed, Tensor::zeros(&[arch.w_dim]));
        let discriminator = Discriminator::new(&mut store, &mut rng(3), arch);
        let encoder = Encoder::new(&mut store, &mut rng(4), arch);
        let perceptual = PerceptualNet::new(&mut store, &mut rng(5), &arch.perceptual_channels);
        Ok((
            Self {
                arch: arch.clone(),
                generator: Generator {
                    mapping,
                    synthesis,
                    label_branch,
                    w_avg,
                },
                discriminator,
                encoder,
                perceptual,
            },
            store,
        ))
    }

    /// Model roles present in the registry.
    pub fn roles(&self) -> [&'static str; 3] {
        ["generator", "discriminator", "encoder"]
    }

    pub fn param_counts<S: Real>(store: &ParamStore<S>) -> Vec<ParamCount> {
        ParamGroup::ALL
            .iter()
            .map(|&group| {
                let ids = store.ids_in(GroupSet::of(&[group]));
                ParamCount {
                    group,
                    tensors: ids.len(),
                    scalars: ids.iter().map(|&id| store.get(id).len()).sum(),
                }
            })
            .collect()
    }

    /// One line per parameter (`name group shape`); identical architectures
    /// give identical descriptors.
    pub fn descriptor<S: Real>(&self, store: &ParamStore<S>) -> String {
        let mut s = format!(
            "size={} z={} w={} mapping={} channels={:?} label={:?} perceptual={:?}\n",
            self.arch.image_size,
            self.arch.z_dim,
            self.arch.w_dim,
            self.arch.mapping_layers,
            self.arch.channels,
            self.arch.label_hidden,
            self.arch.perceptual_channels
        );
        for (_, p) in store.iter() {
            s += &format!("{} {} {:?}\n", p.name, p.group.as_str(), p.value.shape());
        }
        s
    }

    /// Broadcasts `w: [N, w_dim]` to every row of an extended latent.
    pub fn broadcast_w<S: Real>(&self, g: &mut Graph<S>, w: Var) -> Var {
        let n = g.shape(w)[0];
        let l = self.arch.num_ws();
        let r = g.reshape(w, &[n, 1, self.arch.w_dim]);
        g.broadcast_to(r, &[n, l, self.arch.w_dim])
    }

    /// `z -> w -> image` with every style row equal.
    pub fn generate<S: Real>(&self, g: &mut Graph<S>, z: Var, noise: Option<&mut Rng>) -> Result<SynthesisOutput> {
        let w = self.generator.mapping.forward(g, z);
        let ws = self.broadcast_w(g, w);
        self.generator.synthesis.forward(g, ws, noise, &[])
    }

    /// Encodes `x` under `labels` and synthesizes with feature injection;
    /// noise is off.
    pub fn pass<S: Real>(&self, g: &mut Graph<S>, x: Var, labels: &[DomainLabel]) -> Result<PassOutput> {
        let w_avg = g.param(self.generator.w_avg);
        let enc = self.encoder.forward(g, x, labels, w_avg)?;
        let inject: Vec<Injection<'_>> = enc
            .features
            .iter()
            .zip(&self.encoder.heads)
            .map(|(&(layer, features), h)| Injection {
                layer,
                features,
                gate: &h.gate,
            })
            .collect();
        let out = self.generator.synthesis.forward(g, enc.wplus, None, &inject)?;
        let logits = self
            .generator
            .label_branch
            .forward(g, &out.features, self.arch.image_size)?;
        Ok(PassOutput {
            wplus: enc.wplus,
            image: out.image,
            logits,
        })
    }

    /// Discriminator logits for a batch, evaluated without gradients.
    pub fn discriminate<S: Real>(&self, store: &ParamStore<S>, images: &Tensor<S>) -> Result<Vec<S>> {
        self.check_images(images)?;
        let mut g = Graph::with_params(store, GroupSet::NONE);
        let x = g.constant(images.clone());
        let y = self.discriminator.forward(&mut g, x);
        Ok(g.value(y).data().to_vec())
    }

    /// Extended latent and injected features of `images`, as tensors.
    pub fn encode<S: Real>(&self, store: &ParamStore<S>, images: &Tensor<S>, labels: &[DomainLabel]) -> Result<(Tensor<S>, Vec<LayerFeatures<S>>)> {
        self.check_images(images)?;
        let mut g = Graph::with_params(store, GroupSet::NONE);
        let x = g.constant(images.clone());
        let w_avg = g.param(self.generator.w_avg);
        let out = self.encoder.forward(&mut g, x, labels, w_avg)?;
        Ok((
            g.value(out.wplus).clone(),
            out.features.iter().map(|&(l, v)| (l, g.value(v).clone())).collect(),
        ))
    }

    /// Synthesis from an extended latent without injection or noise.
    pub fn synthesize<S: Real>(&self, store: &ParamStore<S>, wplus: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::with_params(store, GroupSet::NONE);
        let ws = g.constant(wplus.clone());
        let out = self.generator.synthesis.forward(&mut g, ws, None, &[])?;
        Ok(g.value(out.image).clone())
    }

    pub fn check_images<S: Real>(&self, images: &Tensor<S>) -> Result<()> {
        let s = images.shape();
        let n = self.arch.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n {
            return Err(shape_err!("images {:?}, expected [N, 1, {}, {}]", s, n, n));
        }
        Ok(())
    }
}
