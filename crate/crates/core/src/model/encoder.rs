use serde::{Deserialize, Serialize};

use super::{Init, LayoutBuilder};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Element;

/// Encoder widths. The defaults give the full-size network; the U-Net doubles
/// the width at each of the first three halvings and keeps it at the fourth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub res_blocks: usize,
    pub levels: usize,
    pub feature_channels: usize,
    /// Side of the square local window read around each pixel.
    pub window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { base_channels: 64, res_blocks: 8, levels: 4, feature_channels: 128, window: 5 }
    }
}

impl EncoderConfig {
    /// Narrow widths for tests and quick experiments.
    pub fn small() -> Self {
        Self { base_channels: 4, res_blocks: 2, levels: 4, feature_channels: 3, window: 5 }
    }

    pub fn local_encoding_len(&self) -> usize {
        self.window * self.window * self.feature_channels
    }

    /// Channels at each U-Net level, level 0 being full resolution.
    pub fn level_channels(&self) -> Vec<usize> {
        (0..=self.levels).map(|k| self.base_channels << k.min(3)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.feature_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("local window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIdx {
    pub kernel: usize,
    pub bias: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderArch {
    pub head: ConvIdx,
    pub res_blocks: Vec<(ConvIdx, ConvIdx)>,
    pub body_tail: ConvIdx,
    /// Per level: stride-2 conv then a 3x3 conv.
    pub down: Vec<(ConvIdx, ConvIdx)>,
    /// Per level, deepest first: conv after upsampling, then the fuse conv
    /// after concatenating the skip.
    pub up: Vec<(ConvIdx, ConvIdx)>,
    pub projection: ConvIdx,
    pub levels: usize,
}

fn conv(b: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, stride: usize) -> ConvIdx {
    let bound = 1.0 / ((cin * 9) as f64).sqrt();
    let kernel = b.add(format!("encoder.{name}.weight"), vec![cout, cin, 3, 3], Init::Uniform(bound), true);
    let bias = b.add(format!("encoder.{name}.bias"), vec![cout], Init::Uniform(bound), true);
    ConvIdx { kernel, bias, stride }
}

impl EncoderArch {
    pub(crate) fn build(cfg: &EncoderConfig, b: &mut LayoutBuilder) -> Self {
        let base = cfg.base_channels;
        let ch = cfg.level_channels();
        let head = conv(b, "head", 1, base, 1);
        let res_blocks = (0..cfg.res_blocks)
            .map(|i| (conv(b, &format!("res{i}.conv1"), base, base, 1), conv(b, &format!("res{i}.conv2"), base, base, 1)))
            .collect();
        let body_tail = conv(b, "body_tail", base, base, 1);
        let down = (1..=cfg.levels)
            .map(|k| {
                (
                    conv(b, &format!("down{k}.stride2"), ch[k - 1], ch[k], 2),
                    conv(b, &format!("down{k}.conv"), ch[k], ch[k], 1),
                )
            })
            .collect();
        let up = (1..=cfg.levels)
            .rev()
            .map(|k| {
                (
                    conv(b, &format!("up{k}.conv"), ch[k], ch[k - 1], 1),
                    conv(b, &format!("up{k}.fuse"), 2 * ch[k - 1], ch[k - 1], 1),
                )
            })
            .collect();
        let projection = conv(b, "projection", base, cfg.feature_channels, 1);
        Self { head, res_blocks, body_tail, down, up, projection, levels: cfg.levels }
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    /// `N x 1 x H x W` to `N x C x H x W`; H and W must be multiples of
    /// [`EncoderArch::spatial_multiple`].
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, vars: &[Var], input: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        let m = self.spatial_multiple();
        if c != 1 || h % m != 0 || w % m != 0 {
            return Err(dim_err!("encoder input must be N x 1 x H x W with H, W multiples of {}, got {:?}", m, tape.value(input).shape()));
        }
        let apply = |tape: &mut Tape<T>, x: Var, c: ConvIdx| tape.conv2d(x, vars[c.kernel], vars[c.bias], c.stride, 1);

        let head = apply(tape, input, self.head)?;
        let mut x = head;
        for &(c1, c2) in &self.res_blocks {
            let y = apply(tape, x, c1)?;
            let y = tape.relu(y)?;
            let y = apply(tape, y, c2)?;
            x = tape.add(x, y)?;
        }
        let tail = apply(tape, x, self.body_tail)?;
        let mut x = tape.add(head, tail)?;

        let mut skips = vec![x];
        for &(c1, c2) in &self.down {
            let y = apply(tape, x, c1)?;
            let y = tape.relu(y)?;
            let y = apply(tape, y, c2)?;
            x = tape.relu(y)?;
            skips.push(x);
        }
        skips.pop();
        for &(c1, c2) in &self.up {
            let y = tape.upsample_nearest2x(x)?;
            let y = apply(tape, y, c1)?;
            let y = tape.relu(y)?;
            let skip = skips.pop().expect("one skip per level");
            let y = tape.concat(&[y, skip], 1)?;
            let y = apply(tape, y, c2)?;
            x = tape.relu(y)?;
        }
        apply(tape, x, self.projection)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Model, ModelConfig, Variant};
    use super::*;
    use crate::tensor::Tensor;

    fn small_model() -> Model {
        let mut c = ModelConfig::new(Variant::Nerd);
        c.hidden_width = 8;
        c.encoder = EncoderConfig::small();
        Model::new(c, 11).unwrap()
    }

    #[test]
    fn level_channels_follow_plan() {
        assert_eq!(EncoderConfig::default().level_channels(), vec![64, 128, 256, 512, 512]);
        assert_eq!(EncoderConfig::default().local_encoding_len(), 3200);
    }

    #[test]
    fn output_shape_and_divisibility() {
        let m = small_model();
        let mut tape = Tape::<f32>::new();
        let vars = m.params.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([2, 1, 32, 48], |i| ((i * 13) % 17) as f32 / 16.0).unwrap());
        let y = m.encode(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), [2, 3, 32, 48]);
        let bad = tape.constant(Tensor::zeros([1, 1, 24, 32]).unwrap());
        assert!(matches!(m.encode(&mut tape, &vars, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_projection_gives_zero_features() {
        let mut m = small_model();
        let p = m.encoder().unwrap().projection;
        for idx in [p.kernel, p.bias] {
            let shape = m.params.get(idx).value.shape().to_vec();
            m.params.get_mut(idx).value = Tensor::zeros(shape).unwrap();
        }
        let mut tape = Tape::<f32>::new();
        let vars = m.params.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([1, 1, 16, 16], |i| (i % 7) as f32 / 6.0).unwrap());
        let y = m.encode(&mut tape, &vars, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
