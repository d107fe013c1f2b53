//! The codec recorded on a [`Tape`].
//!
//! Image batches are `[N, 3, H, W]` with `H` and `W` multiples of 16. Coefficient
//! maps are `[N, 64, H/8, W/8]` for luma and `[N, 64, H/16, W/16]` for chroma;
//! channel `u*8 + v` holds DCT frequency `(u, v)` of the block at that position.

use super::{BlockGrid, Channel, ColorTransform, CompressionKernels, DctBasis, ImageRgb, BLOCK, BLOCK_AREA};
use crate::engine::{ScaleMode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Kernel tables as tape leaves, each of shape `[64]`.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub q: [Var; 3],
}

impl KernelVars {
    pub fn new(tape: &mut Tape, kernels: &CompressionKernels, trainable: bool) -> Self {
        let q = kernels.q.clone().map(|k| tape.leaf(Tensor::from_parts(vec![BLOCK_AREA], k).with_grad(trainable)));
        Self { q }
    }

    pub fn channel(&self, c: Channel) -> Var {
        self.q[c.index()]
    }
}

/// Colour transform halves as `1×1` convolution weights and biases.
#[derive(Clone, Copy, Debug)]
pub struct ColorVars {
    pub forward: Var,
    pub forward_offset: Var,
    pub inverse: Var,
    pub inverse_offset: Var,
}

impl ColorVars {
    pub fn new(tape: &mut Tape, ct: &ColorTransform, trainable: bool) -> Self {
        let mut mat = |m: &[[f64; 3]; 3]| {
            tape.leaf(Tensor::from_parts(vec![3, 3, 1, 1], m.concat()).with_grad(trainable))
        };
        let (forward, inverse) = (mat(&ct.forward), mat(&ct.inverse));
        let mut vec3 = |v: &[f64; 3]| tape.leaf(Tensor::from_parts(vec![3], v.to_vec()).with_grad(trainable));
        let (forward_offset, inverse_offset) = (vec3(&ct.forward_offset), vec3(&ct.inverse_offset));
        Self { forward, forward_offset, inverse, inverse_offset }
    }

    /// Reads trained values back into a [`ColorTransform`].
    pub fn to_transform(&self, tape: &Tape, trainable: bool) -> ColorTransform {
        let mat = |v: Var| {
            let d = tape.value(v).data();
            [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
        };
        let vec3 = |v: Var| {
            let d = tape.value(v).data();
            [d[0], d[1], d[2]]
        };
        ColorTransform {
            forward: mat(self.forward),
            forward_offset: vec3(self.forward_offset),
            inverse: mat(self.inverse),
            inverse_offset: vec3(self.inverse_offset),
            trainable,
        }
    }
}

/// Per-channel coefficient maps for a batch.
#[derive(Clone, Copy, Debug)]
pub struct CoeffVars {
    pub y: Var,
    pub cb: Var,
    pub cr: Var,
}

impl CoeffVars {
    pub fn channel(&self, c: Channel) -> Var {
        match c {
            Channel::Y => self.y,
            Channel::Cb => self.cb,
            Channel::Cr => self.cr,
        }
    }

    fn map(self, mut f: impl FnMut(Channel, Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            y: f(Channel::Y, self.y)?,
            cb: f(Channel::Cb, self.cb)?,
            cr: f(Channel::Cr, self.cr)?,
        })
    }
}

fn dct_weight(inverse: bool) -> Tensor {
    let k = DctBasis::orthonormal().kron();
    let w = if inverse {
        let mut t = vec![0.0; k.len()];
        for r in 0..BLOCK_AREA {
            for c in 0..BLOCK_AREA {
                t[c * BLOCK_AREA + r] = k[r * BLOCK_AREA + c];
            }
        }
        t
    } else {
        k
    };
    Tensor::from_parts(vec![BLOCK_AREA, BLOCK_AREA, 1, 1], w)
}

/// Stacks same-sized images into `[N, 3, H, W]` after padding to a multiple of 16.
pub fn image_batch(images: &[&ImageRgb]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let (pw, ph) = (w.div_ceil(16) * 16, h.div_ceil(16) * 16);
    let mut data = Vec::with_capacity(images.len() * 3 * pw * ph);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::InvalidArgument(format!(
                "batch mixes {}x{} with {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        data.extend_from_slice(super::pad_to_multiple(img, 16).planar());
    }
    Ok(Tensor::from_parts(vec![images.len(), 3, ph, pw], data))
}

/// Colour transform, level shift, chroma subsampling and DCT.
pub fn forward_transform(tape: &mut Tape, x: Var, color: &ColorVars) -> Result<CoeffVars> {
    let ycc = tape.conv2d(x, color.forward, Some(color.forward_offset), 1, 0)?;
    let ycc = tape.add_const(ycc, -128.0)?;
    let y = tape.slice_channels(ycc, 0, 1)?;
    let chroma = tape.slice_channels(ycc, 1, 2)?;
    let chroma = tape.avg_pool2x(chroma)?;
    let cb = tape.slice_channels(chroma, 0, 1)?;
    let cr = tape.slice_channels(chroma, 1, 1)?;
    let d = tape.constant(dct_weight(false));
    let planes = CoeffVars { y, cb, cr };
    planes.map(|_, p| {
        let blocks = tape.space_to_depth(p, BLOCK)?;
        tape.conv2d(blocks, d, None, 1, 0)
    })
}

/// `round_ste(F · q)` per channel, discarding entries with `q == 0`.
pub fn quantize(tape: &mut Tape, coeffs: CoeffVars, kernels: &KernelVars) -> Result<CoeffVars> {
    coeffs.map(|c, f| {
        let scaled = tape.channel_scale(f, kernels.channel(c), ScaleMode::MulMasked)?;
        Ok(tape.round_ste(scaled))
    })
}

/// `Fq / q` per channel, zero where `q == 0`.
pub fn dequantize(tape: &mut Tape, fq: CoeffVars, kernels: &KernelVars) -> Result<CoeffVars> {
    fq.map(|c, f| tape.channel_scale(f, kernels.channel(c), ScaleMode::DivMasked))
}

/// IDCT, bilinear chroma upsampling, inverse colour transform and clamping to `[0, 255]`.
pub fn reconstruct(tape: &mut Tape, coeffs: CoeffVars, color: &ColorVars) -> Result<Var> {
    let dt = tape.constant(dct_weight(true));
    let planes = coeffs.map(|c, f| {
        let blocks = tape.conv2d(f, dt, None, 1, 0)?;
        let plane = tape.depth_to_space(blocks, BLOCK)?;
        if c.is_luma() {
            Ok(plane)
        } else {
            tape.upsample2x(plane)
        }
    })?;
    let ycc = tape.concat_channels(&[planes.y, planes.cb, planes.cr])?;
    let ycc = tape.add_const(ycc, 128.0)?;
    let rgb = tape.conv2d(ycc, color.inverse, Some(color.inverse_offset), 1, 0)?;
    Ok(tape.clamp(rgb, 0.0, 255.0))
}

/// Full encode → decode on the tape; returns the quantized coefficients and the reconstruction.
pub fn codec(tape: &mut Tape, x: Var, color: &ColorVars, kernels: &KernelVars) -> Result<(CoeffVars, Var)> {
    let coeffs = forward_transform(tape, x, color)?;
    let fq = quantize(tape, coeffs, kernels)?;
    let deq = dequantize(tape, fq, kernels)?;
    let rgb = reconstruct(tape, deq, color)?;
    Ok((fq, rgb))
}

/// Unquantized coefficients of one image in tape layout (`[64, by, bx]` per channel).
///
/// With a frozen colour transform these are constants, so the trainer computes
/// them once per image.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffMaps {
    pub maps: [Tensor; 3],
}

impl CoeffMaps {
    pub fn from_grids(grids: &[BlockGrid; 3]) -> Self {
        Self { maps: grids.each_ref().map(grid_to_map) }
    }

    pub fn of_image(img: &ImageRgb, ct: &ColorTransform) -> Result<Self> {
        Ok(Self::from_grids(&super::pipeline::transform(img, ct)?))
    }
}

fn grid_to_map(g: &BlockGrid) -> Tensor {
    let (bx, by) = (g.blocks_per_row, g.blocks_per_col);
    let mut data = vec![0.0; BLOCK_AREA * bx * by];
    for (i, b) in g.blocks.iter().enumerate() {
        for (k, &v) in b.iter().enumerate() {
            data[k * bx * by + i] = v;
        }
    }
    Tensor::from_parts(vec![BLOCK_AREA, by, bx], data)
}

/// Stacks cached maps into a batch of constant leaves.
pub fn coeff_batch(tape: &mut Tape, items: &[&CoeffMaps]) -> Result<CoeffVars> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("empty coefficient batch".into()))?;
    let mut vars = Vec::with_capacity(3);
    for c in 0..3 {
        let shape = first.maps[c].shape().to_vec();
        let mut data = Vec::with_capacity(items.len() * first.maps[c].len());
        for it in items {
            if it.maps[c].shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "coefficient map {:?} does not match {shape:?}",
                    it.maps[c].shape()
                )));
            }
            data.extend_from_slice(it.maps[c].data());
        }
        let mut full = vec![items.len()];
        full.extend_from_slice(&shape);
        vars.push(tape.constant(Tensor::from_parts(full, data)));
    }
    Ok(CoeffVars { y: vars[0], cb: vars[1], cr: vars[2] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jpeg::{decode_pipeline, encode_pipeline};
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, w: usize, h: usize) -> ImageRgb {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..3 * w * h).map(|_| rng.gen()).collect();
        ImageRgb::from_rgb8(w, h, &data).unwrap()
    }

    #[test]
    fn tape_codec_matches_plain_codec() {
        let img = random_image(3, 32, 16);
        let ct = ColorTransform::jpeg();
        let k = CompressionKernels::standard(50.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(&[&img]).unwrap());
        let cv = ColorVars::new(&mut tape, &ct, false);
        let kv = KernelVars::new(&mut tape, &k, true);
        let (fq, rgb) = codec(&mut tape, x, &cv, &kv).unwrap();

        let enc = encode_pipeline(&img, &ct, &k).unwrap();
        let plain = CoeffMaps::from_grids(&enc.grids);
        for c in Channel::ALL {
            let t = tape.value(fq.channel(c)).data();
            let p = plain.maps[c.index()].data();
            assert_eq!(t.len(), p.len());
            assert_eq!(t, p, "{}", c.name());
        }
        let dec = decode_pipeline(&enc, &ct, &k);
        let max = tape
            .value(rgb)
            .data()
            .iter()
            .zip(dec.planar())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6, "max deviation {max}");
    }

    #[test]
    fn cached_maps_equal_tape_transform() {
        let img = random_image(9, 16, 32);
        let ct = ColorTransform::jpeg();
        let cached = CoeffMaps::of_image(&img, &ct).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(&[&img]).unwrap());
        let cv = ColorVars::new(&mut tape, &ct, false);
        let coeffs = forward_transform(&mut tape, x, &cv).unwrap();
        let batch = coeff_batch(&mut tape, &[&cached]).unwrap();
        for c in Channel::ALL {
            let a = tape.value(coeffs.channel(c));
            let b = tape.value(batch.channel(c));
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kernel_gradient_reaches_every_channel() {
        let img = random_image(5, 16, 16);
        let ct = ColorTransform::jpeg();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(&[&img]).unwrap());
        let cv = ColorVars::new(&mut tape, &ct, false);
        let kv = KernelVars::new(&mut tape, &CompressionKernels::filled(0.3), true);
        let (_, rgb) = codec(&mut tape, x, &cv, &kv).unwrap();
        let target = tape.constant(image_batch(&[&img]).unwrap());
        let err = tape.sub(rgb, target).unwrap();
        let sq = tape.square(err);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        for c in Channel::ALL {
            assert!(g.get(kv.channel(c)).norm_sq() > 0.0, "{}", c.name());
        }
    }

    #[test]
    fn zero_kernels_block_gradient() {
        let img = random_image(6, 16, 16);
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(&[&img]).unwrap());
        let cv = ColorVars::new(&mut tape, &ColorTransform::jpeg(), false);
        let kv = KernelVars::new(&mut tape, &CompressionKernels::zeros(), true);
        let (fq, rgb) = codec(&mut tape, x, &cv, &kv).unwrap();
        assert!(tape.value(fq.y).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(rgb).data().iter().all(|&v| (v - 128.0).abs() < 1e-9));
        let loss = tape.sum(rgb);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(kv.q[0]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mixed_sizes() {
        let a = random_image(1, 16, 16);
        let b = random_image(2, 32, 16);
        assert!(image_batch(&[&a, &b]).is_err());
    }
}
