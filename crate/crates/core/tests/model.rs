use nerd_core::autodiff::{Tape, Var};
use nerd_core::gradcheck::{grad_check, GradCheckOptions};
use nerd_core::inference::encode_image;
use nerd_core::image::BayerImage;
use nerd_core::model::{describe, EncoderConfig, Model, ModelConfig, Variant};
use nerd_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn coords(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 2], |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Maps grad-check leaves back onto a full parameter list; entries not in
/// `checked` go on the tape as constants.
fn full_vars(tape: &mut Tape<f64>, all: &[Tensor<f64>], checked: &[usize], vars: &[Var]) -> Vec<Var> {
    let mut k = 0;
    all.iter()
        .enumerate()
        .map(|(i, t)| {
            if checked.contains(&i) {
                k += 1;
                vars[k - 1]
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Gradient check of a weighted output sum with respect to every trainable
/// tensor (and the encoding, if given).
fn check_mlp(model: &Model, n: usize, encoding: Option<Tensor<f64>>, max_coords: usize, seed: u64) -> f64 {
    let c = coords(n, seed);
    let all = model.params.cast::<f64>().values();
    let checked: Vec<usize> = (0..all.len()).filter(|&i| model.params.get(i).trainable).collect();
    let mut inputs: Vec<Tensor<f64>> = checked.iter().map(|&i| all[i].clone()).collect();
    let has_enc = encoding.is_some();
    inputs.extend(encoding);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let probe = Tensor::from_fn([3], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let full = full_vars(tape, &all, &checked, vars);
        let enc = has_enc.then(|| vars[vars.len() - 1]);
        let y = model.query(tape, &full, c.clone(), enc)?;
        weighted_sum(tape, y, &probe)
    };
    let opts = GradCheckOptions { max_coords: Some(max_coords), seed, ..Default::default() };
    let report = grad_check(f, &inputs, opts).unwrap();
    report.max_rel_error
}

/// `sum_n sum_j x[n, j] * w[j]`, built from tape ops.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> nerd_core::Result<Var> {
    let cols = tape.value(x).shape()[1];
    let wmat = tape.constant(Tensor::new([cols, 1], w.data().to_vec())?);
    let b = tape.constant(Tensor::zeros([1])?);
    let y = tape.linear(x, wmat, b)?;
    tape.sum(y)
}

#[test]
fn siren_with_skips_full_width_gradients() {
    let model = Model::new(ModelConfig::new(Variant::Siren), 3).unwrap();
    let err = check_mlp(&model, 4, None, 12, 3);
    assert!(err < TOL, "max relative error {err:e}");
}

#[test]
fn relu_pe_gradients() {
    let mut c = ModelConfig::new(Variant::ReluPe);
    c.hidden_width = 16;
    c.fourier_features = 8;
    let model = Model::new(c, 4).unwrap();
    // ReLU kinks are measure-zero; seed chosen so no probe lands on one
    let err = check_mlp(&model, 4, None, 30, 4);
    assert!(err < TOL, "max relative error {err:e}");
}

#[test]
fn conditioned_mlp_gradients_include_encoding() {
    for v in [Variant::Nerd, Variant::NerdNs] {
        let mut c = ModelConfig::new(v);
        c.hidden_width = 12;
        c.encoder = EncoderConfig::small();
        let model = Model::new(c.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Tensor::from_fn([4, c.encoding_width()], |_| rng.gen_range(-0.5..0.5)).unwrap();
        let err = check_mlp(&model, 4, Some(enc), 25, 5);
        assert!(err < TOL, "{v}: max relative error {err:e}");
    }
}

fn tiny_encoder_model(seed: u64) -> Model {
    let mut c = ModelConfig::new(Variant::Nerd);
    c.hidden_width = 4;
    c.encoder = EncoderConfig { base_channels: 2, res_blocks: 2, levels: 4, feature_channels: 2, window: 5 };
    Model::new(c, seed).unwrap()
}

#[test]
fn encoder_gradients_on_16x16() {
    let model = tiny_encoder_model(6);
    let enc_params: Vec<usize> =
        (0..model.params.len()).filter(|&i| model.params.get(i).name.starts_with("encoder.")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bayer = Tensor::from_fn([1, 1, 16, 16], |_| rng.gen_range(0.0..1.0)).unwrap();
    let readout = Tensor::from_fn([256 * 2], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let all = model.params.cast::<f64>().values();
    let mut inputs: Vec<Tensor<f64>> = enc_params.iter().map(|&i| all[i].clone()).collect();
    inputs.push(bayer);
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let full = full_vars(tape, &all, &enc_params, vars);
        let x = vars[vars.len() - 1];
        let feat = model.encode(tape, &full, x)?;
        let flat = tape.value(feat).data().len();
        let ftensor = tape.value(feat).clone().reshape([1, flat])?;
        let fv = tape.custom("flatten", &[feat], ftensor, Box::new(|_, _, g| vec![g.to_vec()]))?;
        let w = tape.constant(readout.clone().reshape([flat, 1])?);
        let b = tape.constant(Tensor::zeros([1])?);
        let y = tape.linear(fv, w, b)?;
        tape.sum(y)
    };
    let opts = GradCheckOptions { max_coords: Some(10), seed: 6, ..Default::default() };
    let r = grad_check(f, &inputs, opts).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn siren_preactivation_variance_is_depth_stable() {
    let model = Model::new(ModelConfig::new(Variant::Siren), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10_000;
    let c = Tensor::from_fn([n, 2], |_| rng.gen_range(-1.0f32..1.0)).unwrap();
    let mut tape = Tape::<f32>::new();
    let vars = model.params.bind(&mut tape);
    let (_, pre) = model.mlp().forward_traced(&mut tape, &vars, c, None).unwrap();
    let var = |v: Var| {
        let d = tape.value(v).data();
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
        d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64
    };
    let vars_by_layer: Vec<f64> = pre.iter().map(|&v| var(v)).collect();
    // the first layer is the deliberately high-frequency one; depth
    // stability concerns the layers after it
    let hidden = &vars_by_layer[1..];
    for &v in hidden {
        assert!((0.1..10.0).contains(&v), "{vars_by_layer:?}");
    }
    let (lo, hi) = hidden.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 10.0, "{vars_by_layer:?}");
}

fn closed_form_mlp(din: usize, h: usize, skips: bool) -> usize {
    let wide = if skips { h + din } else { h };
    (din * h + h) + 2 * (wide * h + h) + 2 * (h * h + h) + (3 * h + 3)
}

fn closed_form_encoder(c: &EncoderConfig) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let b = c.base_channels;
    let ch = c.level_channels();
    let mut total = conv(1, b) + c.res_blocks * 2 * conv(b, b) + conv(b, b);
    for k in 1..=c.levels {
        total += conv(ch[k - 1], ch[k]) + conv(ch[k], ch[k]);
        total += conv(ch[k], ch[k - 1]) + conv(2 * ch[k - 1], ch[k - 1]);
    }
    total + conv(b, c.feature_channels)
}

#[test]
fn describe_matches_closed_form() {
    let nerd = describe(&ModelConfig::new(Variant::Nerd)).unwrap();
    let ns = describe(&ModelConfig::new(Variant::NerdNs)).unwrap();
    assert_eq!(nerd.input_width, 3202);
    assert_eq!(nerd.encoding_width, 3200);
    assert_eq!(nerd.mlp_params, closed_form_mlp(3202, 256, true));
    assert_eq!(nerd.mlp_params, 2_723_331);
    assert_eq!(ns.mlp_params, closed_form_mlp(3202, 256, false));
    assert_eq!(ns.mlp_params, 1_083_907);
    assert_eq!(nerd.encoder_params, closed_form_encoder(&EncoderConfig::default()));
    assert_eq!(ns.encoder_params, nerd.encoder_params);
    assert!(ns.total_params() < nerd.total_params());
    let siren = describe(&ModelConfig::new(Variant::Siren)).unwrap();
    assert_eq!(siren.mlp_params, closed_form_mlp(2, 256, true));
    let pe = describe(&ModelConfig::new(Variant::ReluPe)).unwrap();
    assert_eq!(pe.mlp_params, closed_form_mlp(256, 256, true));
    // the frequency matrix is a fixed buffer, listed but not counted
    assert!(pe.rows.iter().any(|r| r.name == "mlp.fourier.B" && !r.trainable));
    let text = nerd.to_string();
    assert!(text.contains("mlp input width 3202"), "{text}");
}

#[test]
fn skip_flag_only_changes_widened_layers() {
    let a = describe(&ModelConfig::new(Variant::Nerd)).unwrap();
    let b = describe(&ModelConfig::new(Variant::NerdNs)).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    let differing: Vec<&str> =
        a.rows.iter().zip(&b.rows).filter(|(x, y)| x.shape != y.shape).map(|(x, _)| x.name.as_str()).collect();
    assert_eq!(differing, ["mlp.2.weight", "mlp.4.weight"]);
}

/// The encoder halves resolution four times, so it commutes with shifts by
/// multiples of 16 pixels away from the zero-padded borders.
#[test]
fn encoder_is_translation_covariant_on_interior() {
    let model = tiny_encoder_model(8);
    let (size, shift, margin) = (256usize, 16usize, 96usize);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let big: Vec<f32> = (0..(size + shift) * (size + shift)).map(|_| rng.gen_range(0.0..1.0)).collect();
    let window = |top: usize, left: usize| {
        let data = (0..size * size).map(|i| big[(top + i / size) * (size + shift) + left + i % size]).collect();
        BayerImage::new(size, size, data).unwrap()
    };
    let a = encode_image(&model, &window(0, 0)).unwrap();
    let b = encode_image(&model, &window(shift, shift)).unwrap();
    let mut worst = 0.0f32;
    for ch in 0..a.channels {
        for r in margin..size - margin {
            for c in margin..size - margin {
                let va = a.data[(ch * size + r + shift) * size + c + shift];
                let vb = b.data[(ch * size + r) * size + c];
                worst = worst.max((va - vb).abs());
            }
        }
    }
    assert!(worst < 1e-4, "max deviation {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn random_small_siren_gradients(hidden in 2usize..10, n in 1usize..6, seed in 0u64..1000) {
        let mut c = ModelConfig::new(Variant::Siren);
        c.hidden_width = hidden;
        let model = Model::new(c, seed).unwrap();
        let err = check_mlp(&model, n, None, 20, seed);
        prop_assert!(err < TOL, "relative error {err:e}");
    }
}
