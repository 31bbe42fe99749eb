use ndarray::{Array4, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom};
use super::{ParamStore, Real};
use crate::error::{Error, Result};
use crate::mixup::MixupLocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub downsample: bool,
}

impl StageSpec {
    pub const fn new(channels: usize, downsample: bool) -> Self {
        Self { channels, downsample }
    }
}

/// Shape of the encoder-decoder: a stem, `stages.len()` named stages, a run
/// of 2x upsampling blocks and a 1x1 heatmap head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    pub stem: StageSpec,
    pub stages: Vec<StageSpec>,
    pub head_deconvs: usize,
    pub deconv_channels: usize,
    pub out_joints: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: (64, 64),
            stem: StageSpec::new(12, true),
            stages: vec![
                StageSpec::new(24, true),
                StageSpec::new(32, true),
                StageSpec::new(32, false),
            ],
            head_deconvs: 1,
            deconv_channels: 24,
            out_joints: 16,
        }
    }
}

impl BackboneConfig {
    /// Two stages, 16x16 input, 8x8 heatmaps and under 500 parameters.
    pub fn micro(out_joints: usize) -> Self {
        Self {
            in_channels: 3,
            input_size: (16, 16),
            stem: StageSpec::new(2, false),
            stages: vec![StageSpec::new(4, true), StageSpec::new(4, true)],
            head_deconvs: 1,
            deconv_channels: 3,
            out_joints,
        }
    }

    fn downsamples(&self) -> usize {
        std::iter::once(&self.stem)
            .chain(&self.stages)
            .filter(|s| s.downsample)
            .count()
    }

    /// `(height, width)` of the produced heatmaps.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        let down = 1usize << self.downsamples();
        let up = 1usize << self.head_deconvs;
        let (h, w) = self.input_size;
        if h % down != 0 || w % down != 0 {
            return Err(Error::param(format!(
                "input size {h}x{w} must be divisible by the total downsampling factor {down}"
            )));
        }
        let (oh, ow) = (h / down * up, w / down * up);
        if oh > h || ow > w {
            return Err(Error::param("heatmaps may not be larger than the input"));
        }
        Ok((oh, ow))
    }

    /// Input pixels per heatmap cell.
    pub fn stride(&self) -> Result<f64> {
        let (oh, _) = self.output_size()?;
        Ok(self.input_size.0 as f64 / oh as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_joints == 0 || self.stem.channels == 0 {
            return Err(Error::param("channel counts must be positive"));
        }
        if self.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::param("stage channel counts must be positive"));
        }
        if self.head_deconvs > 0 && self.deconv_channels == 0 {
            return Err(Error::param("deconv_channels must be positive"));
        }
        self.output_size().map(|_| ())
    }
}

#[derive(Debug, Clone)]
struct Block {
    weight: usize,
    bias: usize,
    geom: ConvGeom,
    upsample: bool,
    relu: bool,
}

/// Where to mix, by how much, and with whom.
#[derive(Debug, Clone)]
pub struct MixPoint<T> {
    /// Mixing happens on the input of this block.
    pub block: usize,
    pub alpha: T,
    pub partner: Vec<usize>,
}

#[derive(Debug)]
enum Record<T> {
    Block {
        idx: usize,
        in_dims: (usize, usize, usize, usize),
        cols: ndarray::Array2<T>,
        out: Option<Array4<T>>,
    },
    Mix {
        alpha: T,
        partner: Vec<usize>,
    },
}

/// Activations cached by a forward pass for the matching backward pass.
#[derive(Debug)]
pub struct Trace<T> {
    records: Vec<Record<T>>,
}

/// Network architecture. Parameters live in a separate [`ParamStore`] so one
/// store can be shared by every forward branch.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<Block>,
    names: Vec<(String, Vec<usize>)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut names = Vec::new();
        let mut add = |name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, upsample: bool, relu: bool| {
            let weight = names.len();
            names.push((format!("{name}.weight"), vec![cout, cin, kernel, kernel]));
            names.push((format!("{name}.bias"), vec![cout]));
            blocks.push(Block {
                weight,
                bias: weight + 1,
                geom: ConvGeom { kernel, stride, pad: kernel / 2 },
                upsample,
                relu,
            });
        };
        let stride_of = |s: &StageSpec| if s.downsample { 2 } else { 1 };
        add("stem", config.in_channels, config.stem.channels, 3, stride_of(&config.stem), false, true);
        let mut c = config.stem.channels;
        for (i, s) in config.stages.iter().enumerate() {
            add(&format!("stage{}", i + 1), c, s.channels, 3, stride_of(s), false, true);
            c = s.channels;
        }
        for i in 0..config.head_deconvs {
            add(&format!("deconv{}", i + 1), c, config.deconv_channels, 3, 1, true, true);
            c = config.deconv_channels;
        }
        add("head", c, config.out_joints, 1, 1, false, false);
        Ok(Self { config, blocks, names })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_joints(&self) -> usize {
        self.config.out_joints
    }

    /// Block index whose input a mixup location refers to.
    pub fn location_index(&self, loc: MixupLocation) -> Result<usize> {
        let n = self.config.stages.len();
        match loc {
            MixupLocation::Input => Ok(0),
            MixupLocation::Stage(k) if k >= 1 && k <= n => Ok(k),
            MixupLocation::Stage(k) => Err(Error::param(format!(
                "backbone has {n} stages, cannot mix before stage-{k}"
            ))),
            MixupLocation::PreHead => Ok(self.blocks.len() - 1),
        }
    }

    /// Every mixup location this backbone exposes.
    pub fn locations(&self) -> Vec<MixupLocation> {
        let mut v = vec![MixupLocation::Input];
        v.extend((1..=self.config.stages.len()).map(MixupLocation::Stage));
        v.push(MixupLocation::PreHead);
        v
    }

    /// He-initialised parameters; the head starts near zero.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let head = self.blocks.len() - 1;
        for (bi, block) in self.blocks.iter().enumerate() {
            let (wname, wshape) = &self.names[block.weight];
            let fan_in: usize = wshape[1..].iter().product();
            let std = if bi == head { 1e-3 } else { (2.0 / fan_in as f64).sqrt() };
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..wshape.iter().product::<usize>())
                .map(|_| T::lit(normal.sample(rng)))
                .collect();
            store.push(wname.clone(), wshape.clone(), data);
            let (bname, bshape) = &self.names[block.bias];
            store.push(bname.clone(), bshape.clone(), vec![T::zero(); bshape[0]]);
        }
        store
    }

    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let ok = params.len() == self.names.len()
            && params
                .params()
                .iter()
                .zip(&self.names)
                .all(|(p, (n, s))| &p.name == n && &p.shape == s);
        if ok {
            Ok(())
        } else {
            Err(Error::param("parameter store does not match backbone layout"))
        }
    }

    fn weight_view<'a, T: Real>(&self, params: &'a ParamStore<T>, b: &Block) -> ArrayView2<'a, T> {
        let p = params.get(b.weight);
        let rows = p.shape[0];
        ArrayView2::from_shape((rows, p.data.len() / rows), &p.data).expect("weight shape")
    }

    fn check_input<T: Real>(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels || (h, w) != self.config.input_size {
            return Err(Error::param(format!(
                "input batch is {c}x{h}x{w}, backbone expects {}x{}x{}",
                self.config.in_channels, self.config.input_size.0, self.config.input_size.1
            )));
        }
        Ok(())
    }

    /// Plain inference forward.
    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.run(params, x, None, false)?.0)
    }

    /// Forward pass that keeps a [`Trace`] for [`Backbone::backward`], optionally
    /// mixing activations at `mix`.
    pub fn forward_traced<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Array4<T>,
        mix: Option<&MixPoint<T>>,
    ) -> Result<(Array4<T>, Trace<T>)> {
        self.run(params, x, mix, true)
    }

    /// Forward without a trace, mixing at `mix`.
    pub fn forward_mixed<T: Real>(&self, params: &ParamStore<T>, x: &Array4<T>, mix: &MixPoint<T>) -> Result<Array4<T>> {
        Ok(self.run(params, x, Some(mix), false)?.0)
    }

    fn run<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Array4<T>,
        mix: Option<&MixPoint<T>>,
        keep: bool,
    ) -> Result<(Array4<T>, Trace<T>)> {
        self.check_input(x)?;
        if let Some(m) = mix {
            if m.block >= self.blocks.len() {
                return Err(Error::param(format!("mix block {} out of range", m.block)));
            }
            let n = x.dim().0;
            if m.partner.len() != n || m.partner.iter().any(|&p| p >= n) {
                return Err(Error::param("mix partner must index the batch"));
            }
        }
        let mut records = Vec::new();
        let mut cur = x.clone();
        for (bi, block) in self.blocks.iter().enumerate() {
            if let Some(m) = mix.filter(|m| m.block == bi) {
                cur = ops::mix_rows(&cur, m.alpha, &m.partner);
                if keep {
                    records.push(Record::Mix {
                        alpha: m.alpha,
                        partner: m.partner.clone(),
                    });
                }
            }
            let input = if block.upsample { ops::upsample2x(&cur) } else { cur };
            let w = self.weight_view(params, block);
            let (mut out, cols) = ops::conv_forward(&input, w, &params.get(block.bias).data, block.geom);
            if block.relu {
                ops::relu_inplace(&mut out);
            }
            if keep {
                records.push(Record::Block {
                    idx: bi,
                    in_dims: input.dim(),
                    cols,
                    out: block.relu.then(|| out.clone()),
                });
            }
            cur = out;
        }
        Ok((cur, Trace { records }))
    }

    /// Backpropagates `dout` (gradient of the loss w.r.t. the output) through
    /// `trace`, accumulating into `grads`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        trace: Trace<T>,
        dout: Array4<T>,
        grads: &mut ParamStore<T>,
    ) {
        let mut d = dout;
        for record in trace.records.into_iter().rev() {
            match record {
                Record::Mix { alpha, partner } => {
                    d = ops::mix_rows_backward(&d, alpha, &partner);
                }
                Record::Block { idx, in_dims, cols, out } => {
                    let block = &self.blocks[idx];
                    if let Some(out) = out {
                        ops::relu_backward(&mut d, &out);
                    }
                    let w = self.weight_view(params, block);
                    let need = idx > 0;
                    let (dw, db) = two_mut(grads, block.weight, block.bias);
                    let dx = ops::conv_backward(&d, &cols, w, in_dims, block.geom, dw, db, need);
                    match dx {
                        Some(dx) if block.upsample => d = ops::upsample2x_backward(&dx),
                        Some(dx) => d = dx,
                        None => break,
                    }
                }
            }
        }
    }
}

fn two_mut<T: Real>(grads: &mut ParamStore<T>, a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a < b);
    let (lo, hi) = grads.params_mut().split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}
