//! The finite-difference suite run by `nerd gradcheck`: every tape operation
//! plus the composed SIREN and encoder forward passes, at float64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Tape, Var, WindowQuery};
use crate::error::Result;
use crate::model::{EncoderConfig, Model, ModelConfig, Variant};
use crate::tensor::Tensor;

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.report.passes(SUITE_TOLERANCE)
    }
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<GradCheckReport>;

const CASES: &[(&str, Case)] = &[
    ("linear", linear),
    ("conv2d", conv2d),
    ("conv2d_stride2", conv2d_stride2),
    ("sine", sine),
    ("relu", relu),
    ("add", add),
    ("concat", concat),
    ("upsample_nearest2x", upsample),
    ("mse_loss", mse),
    ("pick", pick),
    ("gather_windows", gather),
    ("siren_with_skips", siren),
    ("conditioned_mlp", conditioned_mlp),
    ("encoder", encoder),
];

/// Runs every case with shapes and values drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CASES
        .iter()
        .map(|&(name, case)| Ok(CaseResult { name, report: case(&mut rng, seed)? }))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

fn opts(seed: u64, max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions { max_coords, seed, ..Default::default() }
}

fn linear(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let (n, din, dout) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
    let inputs = [uniform(rng, &[n, din])?, uniform(rng, &[din, dout])?, uniform(rng, &[dout])?];
    grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let y = t.sine(y, 1.7)?;
            t.sum(y)
        },
        &inputs,
        opts(seed, None),
    )
}

fn conv_case(rng: &mut ChaCha8Rng, seed: u64, stride: usize) -> Result<GradCheckReport> {
    let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let (h, w) = (rng.gen_range(4..9), rng.gen_range(4..9));
    let inputs = [uniform(rng, &[2, cin, h, w])?, uniform(rng, &[cout, cin, 3, 3])?, uniform(rng, &[cout])?];
    grad_check(
        move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, 1)?;
            let y = t.sine(y, 1.3)?;
            t.sum(y)
        },
        &inputs,
        opts(seed, None),
    )
}

fn conv2d(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    conv_case(rng, seed, 1)
}

fn conv2d_stride2(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    conv_case(rng, seed, 2)
}

fn sine(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let shape = [rng.gen_range(1..6), rng.gen_range(1..6)];
    let x = uniform(rng, &shape)?;
    grad_check(
        |t, v| {
            let y = t.sine(v[0], 30.0)?;
            t.sum(y)
        },
        &[x],
        opts(seed, None),
    )
}

fn relu(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    // keep samples away from the kink
    let n = rng.gen_range(4..16);
    let x = Tensor::from_fn([n], |_| {
        let m: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })?;
    grad_check(
        |t, v| {
            let y = t.relu(v[0])?;
            let y = t.sine(y, 1.5)?;
            t.sum(y)
        },
        &[x],
        opts(seed, None),
    )
}

fn add(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
    let inputs = [uniform(rng, &shape)?, uniform(rng, &shape)?];
    grad_check(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.sine(y, 2.0)?;
            t.sum(y)
        },
        &inputs,
        opts(seed, None),
    )
}

fn concat(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let (a0, a1, b) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let axis = rng.gen_range(0..2);
    let (sa, sb) = if axis == 0 { ([a0, a1], [b, a1]) } else { ([a0, a1], [a0, b]) };
    let inputs = [uniform(rng, &sa)?, uniform(rng, &sb)?];
    grad_check(
        move |t, v| {
            let c = t.concat(&[v[0], v[1]], axis)?;
            let c = t.sine(c, 2.0)?;
            t.sum(c)
        },
        &inputs,
        opts(seed, None),
    )
}

fn upsample(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let (c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let x = uniform(rng, &[1, c, h, w])?;
    grad_check(
        |t, v| {
            let u = t.upsample_nearest2x(v[0])?;
            let u = t.sine(u, 2.0)?;
            t.sum(u)
        },
        &[x],
        opts(seed, None),
    )
}

fn mse(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let shape = [rng.gen_range(1..5), 3];
    let inputs = [uniform(rng, &shape)?, uniform(rng, &shape)?];
    grad_check(|t, v| t.mse_loss(v[0], v[1]), &inputs, opts(seed, None))
}

fn pick(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..6);
    let x = uniform(rng, &[n, 3])?;
    let index: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    grad_check(
        move |t, v| {
            let s = t.sine(v[0], 1.5)?;
            let p = t.pick(s, index.clone())?;
            t.sum(p)
        },
        &[x],
        opts(seed, None),
    )
}

fn gather(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(3..7), rng.gen_range(3..7));
    let f = uniform(rng, &[2, c, h, w])?;
    let queries: Vec<WindowQuery> = (0..4)
        .map(|_| WindowQuery { item: rng.gen_range(0..2), row: rng.gen_range(0..h), col: rng.gen_range(0..w) })
        .collect();
    let readout = uniform(rng, &[25 * c, 1])?;
    grad_check(
        move |t, v| {
            let g = t.gather_windows(v[0], queries.clone(), 2, (h, w))?;
            let wv = t.constant(readout.clone());
            let b = t.constant(Tensor::zeros([1])?);
            let y = t.linear(g, wv, b)?;
            let y = t.sine(y, 1.0)?;
            t.sum(y)
        },
        &[f],
        opts(seed, None),
    )
}

/// Places grad-check leaves at the `checked` positions of a full parameter
/// list; other entries become constants.
fn full_vars(tape: &mut Tape<f64>, all: &[Tensor<f64>], checked: &[usize], vars: &[Var]) -> Vec<Var> {
    let mut leaves = vars.iter();
    all.iter()
        .enumerate()
        .map(|(i, t)| if checked.contains(&i) { *leaves.next().expect("one leaf per checked entry") } else { tape.constant(t.clone()) })
        .collect()
}

/// `sum(x * w)` over rows of an `N x k` value, `w` of length `k`.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let k = tape.value(x).shape()[1];
    let wm = tape.constant(w.clone().reshape([k, 1])?);
    let b = tape.constant(Tensor::zeros([1])?);
    let y = tape.linear(x, wm, b)?;
    tape.sum(y)
}

fn mlp_case(rng: &mut ChaCha8Rng, seed: u64, config: ModelConfig) -> Result<GradCheckReport> {
    let model = Model::new(config.clone(), seed)?;
    let n = 4;
    let coords = Tensor::from_fn([n, 2], |_| rng.gen_range(-1.0..1.0))?;
    let all = model.params.cast::<f64>().values();
    let checked: Vec<usize> = (0..all.len()).filter(|&i| model.params.get(i).trainable).collect();
    let mut inputs: Vec<Tensor<f64>> = checked.iter().map(|&i| all[i].clone()).collect();
    let conditioned = config.encoding_width() > 0;
    if conditioned {
        inputs.push(Tensor::from_fn([n, config.encoding_width()], |_| rng.gen_range(-0.5..0.5))?);
    }
    let probe = uniform(rng, &[3])?;
    grad_check(
        |tape, vars| {
            let full = full_vars(tape, &all, &checked, vars);
            let enc = conditioned.then(|| vars[vars.len() - 1]);
            let y = model.query(tape, &full, coords.clone(), enc)?;
            weighted_sum(tape, y, &probe)
        },
        &inputs,
        opts(seed, Some(12)),
    )
}

fn siren(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let mut c = ModelConfig::new(Variant::Siren);
    c.hidden_width = 32;
    mlp_case(rng, seed, c)
}

fn conditioned_mlp(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let mut c = ModelConfig::new(Variant::Nerd);
    c.hidden_width = 12;
    c.encoder = EncoderConfig::small();
    mlp_case(rng, seed, c)
}

fn encoder(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let mut c = ModelConfig::new(Variant::Nerd);
    c.hidden_width = 4;
    c.encoder = EncoderConfig { base_channels: 2, res_blocks: 2, levels: 4, feature_channels: 2, window: 5 };
    let model = Model::new(c, seed)?;
    let checked: Vec<usize> =
        (0..model.params.len()).filter(|&i| model.params.get(i).name.starts_with("encoder.")).collect();
    let all = model.params.cast::<f64>().values();
    let mut inputs: Vec<Tensor<f64>> = checked.iter().map(|&i| all[i].clone()).collect();
    inputs.push(Tensor::from_fn([1, 1, 16, 16], |_| rng.gen_range(0.0..1.0))?);
    let readout = uniform(rng, &[16 * 16 * 2])?;
    grad_check(
        |tape, vars| {
            let full = full_vars(tape, &all, &checked, vars);
            let feat = model.encode(tape, &full, vars[vars.len() - 1])?;
            let flat = tape.value(feat).numel();
            let value = tape.value(feat).clone().reshape([1, flat])?;
            let row = tape.custom("flatten", &[feat], value, Box::new(|_, _, g| vec![g.to_vec()]))?;
            weighted_sum(tape, row, &readout)
        },
        &inputs,
        opts(seed, Some(10)),
    )
}
