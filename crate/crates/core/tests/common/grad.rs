//! Analytic gradients against central finite differences.

use std::cell::Cell;

use qtune_core::classifier::{Classifier, ClassifierConfig, ClassifierInput, InputMode};
use qtune_core::engine::{ScaleMode, Tape, Tensor, Var};
use qtune_core::jpeg::diff::{self, CoeffMaps, CoeffVars, ColorVars, KernelVars};
use qtune_core::jpeg::{ColorTransform, CompressionKernels, ImageRgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const PRIM_TOL: f64 = 1e-4;

thread_local! {
    static WORST: Cell<f64> = const { Cell::new(0.0) };
}

/// Largest primitive relative error seen on this thread since the last call.
pub fn take_worst() -> f64 {
    WORST.with(|w| w.replace(0.0))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Moves entries within `gap` of any kink in `kinks` away from it.
fn avoid(mut t: Tensor, kinks: &[f64], gap: f64) -> Tensor {
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + if *v >= k { gap } else { -gap } * 2.0;
            }
        }
    }
    t
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Builds `Σ w ⊙ f(inputs)` with a fixed random `w`, so every output element matters.
fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn gradcheck(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().with_grad(grad))).collect();
        let out = f(&mut tape, &vars);
        let loss = weighted_loss(&mut tape, out, 99);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).into_data();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let (tp, _, lp) = eval(&plus, false);
            let (tm, _, lm) = eval(&minus, false);
            *slot = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < PRIM_TOL, "{name}: input {i} relative error {e:e}");
        worst = worst.max(e);
    }
    WORST.with(|w| w.set(w.get().max(worst)));
    worst
}

pub fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, 3, 4];
    let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
    let b = rand_tensor(&mut rng, &shape, -2.0, 2.0);
    let pos = rand_tensor(&mut rng, &shape, 0.5, 2.0);
    let s = rand_tensor(&mut rng, &[1], -1.0, 1.0);

    gradcheck("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    gradcheck("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    gradcheck("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    gradcheck("div", &[a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]).unwrap());
    gradcheck("add_scalar", &[a.clone(), s], |t, v| t.add_scalar(v[0], v[1]).unwrap());
    gradcheck("add_const", &[a.clone()], |t, v| t.add_const(v[0], 0.7).unwrap());
    gradcheck("mul_scalar", &[a.clone()], |t, v| t.mul_scalar(v[0], -1.3));
    gradcheck("neg", &[a.clone()], |t, v| t.neg(v[0]));
    gradcheck("square", &[a.clone()], |t, v| t.square(v[0]));
    gradcheck("relu", &[avoid(a.clone(), &[0.0], 0.01)], |t, v| t.relu(v[0]));
    gradcheck("abs", &[avoid(a.clone(), &[0.0], 0.01)], |t, v| t.abs(v[0]));
    gradcheck("max_const", &[avoid(a.clone(), &[0.3], 0.01)], |t, v| t.max_const(v[0], 0.3));
    gradcheck("clamp", &[avoid(a.clone(), &[-1.0, 1.0], 0.01)], |t, v| t.clamp(v[0], -1.0, 1.0));
    gradcheck("sum", &[a.clone()], |t, v| t.sum(v[0]));
    gradcheck("mean", &[a.clone()], |t, v| t.mean(v[0]).unwrap());
    gradcheck("reshape", &[a], |t, v| t.reshape(v[0], &[4, 6]).unwrap());
}

pub fn round_ste_passes_gradient_straight_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&mut rng, &[10], -5.0, 5.0));
    let r = tape.round_ste(x);
    let l = tape.sum(r);
    let g = tape.backward(l).unwrap().get(x);
    assert!(g.data().iter().all(|&v| v == 1.0));
}

pub fn channel_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let y = rand_tensor(&mut rng, &[2, 2, 4, 4], -2.0, 2.0);
    let scale = rand_tensor(&mut rng, &[3], 0.3, 1.5);
    let masked = Tensor::new(vec![3], vec![0.0, 0.8, 1.2]).unwrap();

    gradcheck("concat_channels", &[x.clone(), y.clone()], |t, v| t.concat_channels(&[v[0], v[1]]).unwrap());
    gradcheck("slice_channels", &[x.clone()], |t, v| t.slice_channels(v[0], 1, 2).unwrap());
    for mode in [ScaleMode::Mul, ScaleMode::MulMasked, ScaleMode::DivMasked] {
        gradcheck(&format!("channel_scale {mode:?}"), &[x.clone(), scale.clone()], |t, v| {
            t.channel_scale(v[0], v[1], mode).unwrap()
        });
    }
    // a zero entry blocks the gradient in the masked modes; the neighbours still match
    for mode in [ScaleMode::MulMasked, ScaleMode::DivMasked] {
        gradcheck(&format!("channel_scale {mode:?} with zero"), &[x.clone()], |t, v| {
            let s = t.constant(masked.clone());
            t.channel_scale(v[0], s, mode).unwrap()
        });
    }
    gradcheck("space_to_depth", &[x.clone()], |t, v| t.space_to_depth(v[0], 2).unwrap());
    gradcheck("depth_to_space", &[rand_tensor(&mut rng, &[1, 8, 2, 3], -1.0, 1.0)], |t, v| {
        t.depth_to_space(v[0], 2).unwrap()
    });
    gradcheck("global_avg_pool", &[x.clone()], |t, v| t.global_avg_pool(v[0]).unwrap());
    gradcheck("avg_pool2x", &[x.clone()], |t, v| t.avg_pool2x(v[0]).unwrap());
    gradcheck("upsample2x", &[y], |t, v| t.upsample2x(v[0]).unwrap());
}

pub fn linear_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    gradcheck("matmul", &[a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap());
    let w = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    gradcheck("dense", &[a, w, bias], |t, v| t.dense(v[0], v[1], Some(v[2])).unwrap());

    let x = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let kb = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    gradcheck("conv2d s1 p1", &[x.clone(), k.clone(), kb.clone()], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap());
    gradcheck("conv2d s2 p1", &[x.clone(), k.clone(), kb], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
    gradcheck("conv2d s1 p0 no bias", &[x.clone(), k], |t, v| t.conv2d(v[0], v[1], None, 1, 0).unwrap());
    let k1 = rand_tensor(&mut rng, &[2, 3, 1, 1], -0.5, 0.5);
    gradcheck("conv2d 1x1 s2", &[x, k1], |t, v| t.conv2d(v[0], v[1], None, 2, 0).unwrap());

    let small = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let kt = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let ktb = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    gradcheck("conv_transpose2d", &[small, kt, ktb], |t, v| {
        t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap()
    });
}

pub fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, &[4, 6], -3.0, 3.0);
    let labels = [0, 5, 2, 2];
    gradcheck("softmax_cross_entropy", &[logits], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
}

// ---- composed codec + classifier ----

fn smooth_image(rng: &mut ChaCha8Rng, side: usize) -> ImageRgb {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(70.0..180.0));
    let mut data = vec![0.0; 3 * side * side];
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let v = base[c] + 30.0 * ((x as f64) * 0.4 + c as f64).sin() * ((y as f64) * 0.3).cos() + rng.gen_range(-8.0..8.0);
                data[c * side * side + y * side + x] = v.clamp(20.0, 235.0).round();
            }
        }
    }
    ImageRgb::from_planar(side, side, data).unwrap()
}

fn test_net(mode: InputMode) -> Classifier {
    Classifier::new(ClassifierConfig {
        input_mode: mode,
        num_classes: 3,
        base_width: 3,
        groups: 2,
        blocks_per_group: 1,
        dct_branch_width: 3,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

/// The residual `round(x) − x` of the quantized coefficients at `kernels`.
fn rounding_offsets(maps: &[&CoeffMaps], kernels: &CompressionKernels) -> [Tensor; 3] {
    let mut tape = Tape::new();
    let coeffs = diff::coeff_batch(&mut tape, maps).unwrap();
    let kv = KernelVars::new(&mut tape, kernels, false);
    std::array::from_fn(|c| {
        let ch = [coeffs.y, coeffs.cb, coeffs.cr][c];
        let scaled = tape.channel_scale(ch, kv.q[c], ScaleMode::MulMasked).unwrap();
        let v = tape.value(scaled).clone();
        let data = v.data().iter().map(|x| x.round() - x).collect();
        Tensor::new(v.shape().to_vec(), data).unwrap()
    })
}

/// Loss through the codec. With `offsets`, rounding is replaced by adding those
/// fixed residuals, which is smooth in the kernels and equal to the rounded
/// forward pass at the point where the residuals were taken.
fn pipeline_loss(
    tape: &mut Tape,
    net: &Classifier,
    maps: &[&CoeffMaps],
    kv: &KernelVars,
    labels: &[usize],
    offsets: Option<&[Tensor; 3]>,
) -> Var {
    let coeffs = diff::coeff_batch(tape, maps).unwrap();
    let fq = match offsets {
        None => diff::quantize(tape, coeffs, kv).unwrap(),
        Some(off) => {
            let mut out = [coeffs.y, coeffs.cb, coeffs.cr];
            for (c, slot) in out.iter_mut().enumerate() {
                let s = tape.channel_scale(*slot, kv.q[c], ScaleMode::MulMasked).unwrap();
                let r = tape.constant(off[c].clone());
                *slot = tape.add(s, r).unwrap();
            }
            CoeffVars { y: out[0], cb: out[1], cr: out[2] }
        }
    };
    let deq = diff::dequantize(tape, fq, kv).unwrap();
    let input = match net.config.input_mode {
        InputMode::Dct => ClassifierInput::Coefficients(deq),
        InputMode::Pixel => {
            let color = ColorVars::new(tape, &ColorTransform::jpeg(), false);
            ClassifierInput::Pixels(diff::reconstruct(tape, deq, &color).unwrap())
        }
    };
    let p = net.bind(tape, false);
    let logits = net.forward(tape, &p, input).unwrap();
    tape.softmax_cross_entropy(logits, labels).unwrap()
}

pub fn composition_check(mode: InputMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ct = ColorTransform::jpeg();
    let maps: Vec<CoeffMaps> = (0..2).map(|_| CoeffMaps::of_image(&smooth_image(&mut rng, 16), &ct).unwrap()).collect();
    let refs: Vec<&CoeffMaps> = maps.iter().collect();
    let labels = [1, 2];
    let net = test_net(mode);
    let mut kernels = CompressionKernels::zeros();
    for k in &mut kernels.q {
        k.iter_mut().for_each(|v| *v = rng.gen_range(0.2..1.0));
    }
    let offsets = rounding_offsets(&refs, &kernels);

    let analytic = |surrogate: bool| {
        let mut tape = Tape::new();
        let kv = KernelVars::new(&mut tape, &kernels, true);
        let l = pipeline_loss(&mut tape, &net, &refs, &kv, &labels, surrogate.then_some(&offsets));
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), kv.q.iter().flat_map(|&v| g.get(v).into_data()).collect::<Vec<f64>>())
    };
    let (ste_loss, ste_grad) = analytic(false);
    let (sur_loss, sur_grad) = analytic(true);
    assert!((ste_loss - sur_loss).abs() < 1e-9, "surrogate forward differs: {ste_loss} vs {sur_loss}");
    assert!(rel_err(&ste_grad, &sur_grad) < 1e-9);

    let eval = |k: &CompressionKernels| {
        let mut tape = Tape::new();
        let kv = KernelVars::new(&mut tape, k, false);
        let l = pipeline_loss(&mut tape, &net, &refs, &kv, &labels, Some(&offsets));
        tape.value(l).item()
    };
    let mut numeric = Vec::with_capacity(192);
    for c in 0..3 {
        for j in 0..64 {
            let (mut p, mut m) = (kernels.clone(), kernels.clone());
            p.q[c][j] += H;
            m.q[c][j] -= H;
            numeric.push((eval(&p) - eval(&m)) / (2.0 * H));
        }
    }
    let e = rel_err(&ste_grad, &numeric);
    assert!(e < 1e-3, "{mode:?} composition relative error {e:e}");
    assert!(ste_grad.iter().any(|&g| g != 0.0));
    e
}
