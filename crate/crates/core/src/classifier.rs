//! Small residual CNN consuming reconstructed pixels or quantized DCT coefficients.
//!
//! Trunk: stem conv, `groups` stages of pre-activation residual blocks (two 3×3
//! convs, per-channel layer scale, identity or strided 1×1 projection skip),
//! ReLU, global average pooling and a dense head. Stage `g` has width
//! `base_width · width · 2^g` and halves the resolution on entry for `g > 0`.
//!
//! The DCT front end upsamples the Cb and Cr coefficient maps with one
//! transposed convolution each and concatenates them with the luma map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{ScaleMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::jpeg::diff::CoeffVars;
use crate::jpeg::BLOCK_AREA;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Pixel,
    Dct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_mode: InputMode,
    pub num_classes: usize,
    /// Width multiplier `k`.
    pub width: usize,
    pub base_width: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    /// Output channels of each chroma transposed convolution.
    pub dct_branch_width: usize,
    pub layer_scale_init: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Pixel,
            num_classes: 10,
            width: 1,
            base_width: 16,
            groups: 3,
            blocks_per_group: 2,
            dct_branch_width: 64,
            layer_scale_init: 0.1,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} (need at least 2)", self.num_classes));
        }
        if self.width == 0 || self.base_width == 0 || self.groups == 0 || self.blocks_per_group == 0 {
            return bad("width, base_width, groups and blocks_per_group must be positive".into());
        }
        if self.input_mode == InputMode::Dct && self.dct_branch_width == 0 {
            return bad("dct_branch_width must be positive".into());
        }
        if !self.layer_scale_init.is_finite() {
            return bad("layer_scale_init must be finite".into());
        }
        Ok(())
    }

    fn stage_width(&self, g: usize) -> usize {
        self.base_width * self.width << g
    }
}

/// Pixel normalisation: `(x - 128) / 64`.
const PIXEL_MEAN: f64 = 128.0;
const PIXEL_SCALE: f64 = 1.0 / 64.0;
/// Coefficient maps are scaled by this before the network.
pub const COEFF_SCALE: f64 = 1.0 / 128.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockRef {
    conv1: ConvRef,
    conv2: ConvRef,
    scale: usize,
    shortcut: Option<usize>,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Plan {
    branches: Option<[ConvRef; 2]>,
    stem: ConvRef,
    blocks: Vec<BlockRef>,
    head: ConvRef,
}

/// Classifier parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: Vec<NamedTensor>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<NamedTensor>,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    /// He-normal weights with the given fan-in, zero bias.
    fn conv(&mut self, name: &str, shape: [usize; 4], fan_in: usize, bias_len: usize) -> ConvRef {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = normals(&mut self.rng, n, std);
        let w = self.push(format!("{name}.weight"), Tensor::from_parts(shape.to_vec(), data));
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![bias_len]));
        ConvRef { w, b }
    }
}

fn build(cfg: &ClassifierConfig) -> (Plan, Vec<NamedTensor>) {
    let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(cfg.seed), params: Vec::new() };
    let (branches, in_ch) = match cfg.input_mode {
        InputMode::Pixel => (None, 3),
        InputMode::Dct => {
            let bw = cfg.dct_branch_width;
            // transposed-conv weights are [in, out, k, k]; each output sees ~in·k²/4 inputs at stride 2
            let fan = BLOCK_AREA * 9 / 4;
            let cb = b.conv("dct.cb_up", [BLOCK_AREA, bw, 3, 3], fan, bw);
            let cr = b.conv("dct.cr_up", [BLOCK_AREA, bw, 3, 3], fan, bw);
            (Some([cb, cr]), BLOCK_AREA + 2 * bw)
        }
    };
    let w0 = cfg.stage_width(0);
    let stem = b.conv("stem", [w0, in_ch, 3, 3], in_ch * 9, w0);
    let mut blocks = Vec::new();
    let mut cin = w0;
    for g in 0..cfg.groups {
        let cout = cfg.stage_width(g);
        for k in 0..cfg.blocks_per_group {
            let stride = if g > 0 && k == 0 { 2 } else { 1 };
            let name = format!("group{g}.block{k}");
            let conv1 = b.conv(&format!("{name}.conv1"), [cout, cin, 3, 3], cin * 9, cout);
            let conv2 = b.conv(&format!("{name}.conv2"), [cout, cout, 3, 3], cout * 9, cout);
            let scale = b.push(format!("{name}.scale"), Tensor::full(vec![cout], cfg.layer_scale_init));
            let shortcut = (stride != 1 || cin != cout).then(|| {
                let std = (1.0 / cin as f64).sqrt();
                let data = normals(&mut b.rng, cout * cin, std);
                b.push(format!("{name}.shortcut.weight"), Tensor::from_parts(vec![cout, cin, 1, 1], data))
            });
            blocks.push(BlockRef { conv1, conv2, scale, shortcut, stride });
            cin = cout;
        }
    }
    let head = {
        let std = (1.0 / cin as f64).sqrt();
        let data = normals(&mut b.rng, cfg.num_classes * cin, std);
        let w = b.push("head.weight".into(), Tensor::from_parts(vec![cfg.num_classes, cin], data));
        let bias = b.push("head.bias".into(), Tensor::zeros(vec![cfg.num_classes]));
        ConvRef { w, b: bias }
    };
    (Plan { branches, stem, blocks, head }, b.params)
}

/// Network input in the form the configured mode expects.
#[derive(Clone, Copy, Debug)]
pub enum ClassifierInput {
    /// `[N, 3, H, W]` RGB in `[0, 255]`.
    Pixels(Var),
    /// Dequantized coefficient maps from [`crate::jpeg::diff`].
    Coefficients(CoeffVars),
}

/// Parameters placed on a tape for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let (_, params) = build(&config);
        Ok(Self { config, params })
    }

    fn plan(&self) -> Plan {
        // shapes only depend on the config; the throwaway init is cheap next to a forward pass
        build(&self.config).0
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.value).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    /// Adds every parameter to `tape`; `trainable == false` skips their gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone().with_grad(trainable))).collect();
        BoundParams { vars }
    }

    fn check(&self, tape: &Tape, v: Var, layer: &str) -> Result<Var> {
        if tape.value(v).all_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("classifier layer {layer}")))
        }
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: ClassifierInput) -> Result<Var> {
        let plan = self.plan();
        let v = |i: usize| p.vars[i];
        let x = match (self.config.input_mode, input) {
            (InputMode::Pixel, ClassifierInput::Pixels(x)) => {
                let c = tape.add_const(x, -PIXEL_MEAN)?;
                tape.mul_scalar(c, PIXEL_SCALE)
            }
            (InputMode::Dct, ClassifierInput::Coefficients(cv)) => {
                let [cb_up, cr_up] = plan.branches.expect("dct plan has branches");
                let y = tape.mul_scalar(cv.y, COEFF_SCALE);
                let cb = tape.mul_scalar(cv.cb, COEFF_SCALE);
                let cr = tape.mul_scalar(cv.cr, COEFF_SCALE);
                let cb = tape.conv_transpose2d(cb, v(cb_up.w), Some(v(cb_up.b)), 2, 1, 1)?;
                let cr = tape.conv_transpose2d(cr, v(cr_up.w), Some(v(cr_up.b)), 2, 1, 1)?;
                if tape.shape(cb)[2..] != tape.shape(y)[2..] {
                    return Err(Error::Shape {
                        op: "dct front end",
                        detail: format!("chroma maps {:?} vs luma {:?}", tape.shape(cb), tape.shape(y)),
                    });
                }
                let cat = tape.concat_channels(&[y, cb, cr])?;
                self.check(tape, cat, "dct front end")?
            }
            (mode, _) => return Err(Error::InvalidArgument(format!("classifier in {mode:?} mode got the other input kind"))),
        };
        let h = tape.conv2d(x, v(plan.stem.w), Some(v(plan.stem.b)), 1, 1)?;
        let mut h = self.check(tape, h, "stem")?;
        for (i, blk) in plan.blocks.iter().enumerate() {
            let a = tape.relu(h);
            let r = tape.conv2d(a, v(blk.conv1.w), Some(v(blk.conv1.b)), blk.stride, 1)?;
            let r = tape.relu(r);
            let r = tape.conv2d(r, v(blk.conv2.w), Some(v(blk.conv2.b)), 1, 1)?;
            let r = tape.channel_scale(r, v(blk.scale), ScaleMode::Mul)?;
            let skip = match blk.shortcut {
                Some(w) => tape.conv2d(a, v(w), None, blk.stride, 0)?,
                None => h,
            };
            let out = tape.add(skip, r)?;
            h = self.check(tape, out, &format!("block {i}"))?;
        }
        let a = tape.relu(h);
        let pooled = tape.global_avg_pool(a)?;
        let logits = tape.dense(pooled, v(plan.head.w), Some(v(plan.head.b)))?;
        self.check(tape, logits, "head")
    }

    /// Forward pass without gradients, returning logits row-major.
    pub fn predict(&self, input: impl FnOnce(&mut Tape) -> Result<ClassifierInput>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = input(&mut tape)?;
        let logits = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(logits).data().to_vec())
    }
}
