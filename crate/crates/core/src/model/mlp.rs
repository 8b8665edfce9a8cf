use super::fourier::{fourier_features, FourierFeatureMap};
use super::{Init, LayoutBuilder, ModelConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const HIDDEN_LAYERS: usize = 5;
/// The input vector is concatenated onto the outputs of these hidden layers
/// (1-based), widening the inputs of the layers that follow.
pub const SKIP_AFTER: [usize; 2] = [2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

/// Layer indices and widths of the coordinate MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpArch {
    pub layers: Vec<LinearIdx>,
    pub layer_inputs: Vec<usize>,
    pub input_width: usize,
    pub encoding_width: usize,
    pub sine: bool,
    pub omega0: f64,
    pub skips: bool,
    pub fourier: Option<usize>,
}

impl MlpArch {
    pub(crate) fn build(config: &ModelConfig, b: &mut LayoutBuilder) -> Self {
        let v = config.variant;
        let din = config.input_width();
        let h = config.hidden_width;
        let fourier = v.uses_fourier().then(|| {
            b.add("mlp.fourier.B".into(), vec![config.fourier_features, 2], Init::Normal(config.fourier_sigma), false)
        });
        let mut layers = Vec::new();
        let mut layer_inputs = Vec::new();
        for l in 0..=HIDDEN_LAYERS {
            let fan_in = match l {
                0 => din,
                _ if v.uses_skips() && SKIP_AFTER.contains(&l) => h + din,
                _ => h,
            };
            let fan_out = if l == HIDDEN_LAYERS { 3 } else { h };
            let (w_init, b_init) = if v.uses_sine() {
                let bound = if l == 0 { 1.0 / fan_in as f64 } else { (6.0 / fan_in as f64).sqrt() / config.omega0 };
                (Init::Uniform(bound), Init::Zero)
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (Init::Uniform(bound), Init::Uniform(bound))
            };
            let weight = b.add(format!("mlp.{l}.weight"), vec![fan_in, fan_out], w_init, true);
            let bias = b.add(format!("mlp.{l}.bias"), vec![fan_out], b_init, true);
            layers.push(LinearIdx { weight, bias });
            layer_inputs.push(fan_in);
        }
        MlpArch {
            layers,
            layer_inputs,
            input_width: din,
            encoding_width: config.encoding_width(),
            sine: v.uses_sine(),
            omega0: config.omega0,
            skips: v.uses_skips(),
            fourier,
        }
    }

    /// Output `N x 3`; see [`MlpArch::forward_traced`].
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        coords: Tensor<T>,
        encoding: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_impl(tape, vars, coords, encoding, false)?.0)
    }

    /// Forward pass returning the output and every hidden pre-activation
    /// (the argument of the sine, i.e. already scaled by omega0, or of the ReLU).
    pub fn forward_traced<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        coords: Tensor<T>,
        encoding: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_impl(tape, vars, coords, encoding, true)
    }

    fn forward_impl<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        coords: Tensor<T>,
        encoding: Option<Var>,
        trace: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if encoding.is_some() != (self.encoding_width > 0) {
            return Err(Error::Config(if self.encoding_width > 0 {
                "conditioned MLP needs local encodings".into()
            } else {
                "unconditioned MLP does not take local encodings".into()
            }));
        }
        let coord_part = match self.fourier {
            Some(idx) => {
                let map = FourierFeatureMap::new(tape.value(vars[idx]).clone())?;
                fourier_features(&coords, &map)?
            }
            None => coords,
        };
        let n = coord_part.dims2()?.0;
        let c = tape.constant(coord_part);
        let x = match encoding {
            Some(e) => {
                if tape.value(e).dims2()?.0 != n {
                    return Err(dim_err!("{} coordinates but {} encodings", n, tape.value(e).shape()[0]));
                }
                tape.concat(&[c, e], 1)?
            }
            None => c,
        };
        if tape.value(x).shape()[1] != self.input_width {
            return Err(dim_err!("MLP input width {}, expected {}", tape.value(x).shape()[1], self.input_width));
        }
        let omega = T::from_f64(self.omega0);
        let mut pre = Vec::with_capacity(HIDDEN_LAYERS);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l > 0 && self.skips && SKIP_AFTER.contains(&l) { tape.concat(&[h, x], 1)? } else { h };
            let z = tape.linear(input, vars[layer.weight], vars[layer.bias])?;
            if l == HIDDEN_LAYERS {
                return Ok((z, pre));
            }
            h = if self.sine {
                if trace {
                    pre.push(scale(tape, z, omega)?);
                }
                tape.sine(z, self.omega0)?
            } else {
                if trace {
                    pre.push(z);
                }
                tape.relu(z)?
            };
        }
        unreachable!("HIDDEN_LAYERS + 1 layers always end in the output layer")
    }
}

/// `omega * z` as a non-differentiable probe value.
fn scale<T: Element>(tape: &mut Tape<T>, z: Var, omega: T) -> Result<Var> {
    let v = tape.value(z);
    let data = v.data().iter().map(|&x| omega * x).collect();
    Ok(tape.constant(Tensor::new(v.shape().to_vec(), data)?))
}

#[cfg(test)]
mod tests {
    use super::super::{Model, ModelConfig, Variant};
    use super::*;

    fn grid(n: usize) -> Tensor<f32> {
        Tensor::from_fn([n, 2], |i| (i as f32 * 0.37).sin()).unwrap()
    }

    #[test]
    fn first_layer_within_bound() {
        let m = Model::new(ModelConfig::new(Variant::Nerd), 5).unwrap();
        let w = &m.params.get(m.mlp().layers[0].weight).value;
        assert_eq!(w.shape(), [3202, 256]);
        let bound = 1.0 / 3202.0;
        assert!(w.data().iter().all(|v| v.abs() <= bound as f32));
        for l in &m.mlp().layers {
            assert!(m.params.get(l.bias).value.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn later_layers_within_siren_bound() {
        let m = Model::new(ModelConfig::new(Variant::Siren), 7).unwrap();
        for (l, idx) in m.mlp().layers.iter().enumerate().skip(1) {
            let fan_in = m.mlp().layer_inputs[l];
            let bound = ((6.0 / fan_in as f64).sqrt() / 30.0) as f32;
            let w = &m.params.get(idx.weight).value;
            assert!(w.data().iter().all(|v| v.abs() <= bound));
            // the samples should also fill the range
            assert!(w.data().iter().any(|v| v.abs() > 0.9 * bound));
        }
    }

    #[test]
    fn skip_layers_are_widened() {
        let m = Model::new(ModelConfig::new(Variant::Siren), 0).unwrap();
        assert_eq!(m.mlp().layer_inputs, vec![2, 256, 258, 256, 258, 256]);
        let mut c = ModelConfig::new(Variant::NerdNs);
        c.encoder = super::super::EncoderConfig::small();
        let m = Model::new(c.clone(), 0).unwrap();
        let din = c.input_width();
        assert_eq!(m.mlp().layer_inputs, vec![din, 256, 256, 256, 256, 256]);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut m = Model::new(ModelConfig::new(Variant::Siren), 1).unwrap();
        for i in 0..m.params.len() {
            let shape = m.params.get(i).value.shape().to_vec();
            m.params.get_mut(i).value = Tensor::zeros(shape).unwrap();
        }
        let out = m.mlp().layers[HIDDEN_LAYERS];
        m.params.get_mut(out.bias).value = Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape);
        let y = m.query(&mut tape, &vars, grid(9), None).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert_eq!(row, [0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn encoding_presence_is_checked() {
        let m = Model::new(ModelConfig::new(Variant::Siren), 1).unwrap();
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape);
        let e = tape.constant(Tensor::zeros([4, 3]).unwrap());
        assert!(matches!(m.query(&mut tape, &vars, grid(4), Some(e)), Err(Error::Config(_))));
    }

    #[test]
    fn relu_pe_has_fixed_frequency_buffer() {
        let m = Model::new(ModelConfig::new(Variant::ReluPe), 1).unwrap();
        let idx = m.params.find("mlp.fourier.B").unwrap();
        let e = m.params.get(idx);
        assert_eq!(e.value.shape(), [128, 2]);
        assert!(!e.trainable);
        let std = (e.value.data().iter().map(|v| (v * v) as f64).sum::<f64>() / 256.0).sqrt();
        assert!((std - 10.0).abs() < 1.5, "{std}");
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape);
        let y = m.query(&mut tape, &vars, grid(5), None).unwrap();
        assert_eq!(tape.value(y).shape(), [5, 3]);
    }
}
