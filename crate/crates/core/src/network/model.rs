use crate::autograd::{Graph, Var};
use crate::error::{ensure, invalid, Result};
use crate::ffparser::{SpectralFilter, SpectralShape};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::NoisePredictor;
use crate::tensor::Tensor;

use super::config::{ModelConfig, TimeEmbeddingKind};
use super::layers::{dynamic_condition, Builder, Conv2d, Ctx, GroupNorm, ResidualBlock, TimeEmbedding};

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Conv2d>,
    blocks: Vec<ResidualBlock>,
}

impl Stage {
    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'_, 'g, T>, x: Var<'g, T>, temb: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut h = match &self.down {
            Some(conv) => conv.forward(cx, x)?,
            None => x,
        };
        for block in &self.blocks {
            h = block.forward(cx, h, temb)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Encoder {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &ModelConfig, in_channels: usize) -> Result<Self> {
        let stem = b.conv(&format!("{prefix}.stem"), in_channels, cfg.base_channels, 3, 1)?;
        let mut stages = Vec::with_capacity(cfg.stages());
        let mut prev = cfg.base_channels;
        for k in 0..cfg.stages() {
            let c = cfg.stage_channels(k);
            let down = if k > 0 {
                Some(b.conv(&format!("{prefix}.stage{k}.down"), prev, c, 3, 2)?)
            } else if prev != c {
                Some(b.conv(&format!("{prefix}.stage{k}.down"), prev, c, 3, 1)?)
            } else {
                None
            };
            let g = cfg.groups_for(c);
            let blocks = (0..cfg.stage_block_counts[k])
                .map(|j| ResidualBlock::new(b, &format!("{prefix}.stage{k}.block{j}"), c, c, cfg.time_embed_dim, g, g))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
            prev = c;
        }
        Ok(Self { stem, stages })
    }

    /// Runs every stage; `after_stage(k, out)` may replace stage `k`'s output
    /// before it feeds stage `k + 1`. Returns all (possibly replaced) outputs.
    fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'_, 'g, T>,
        x: Var<'g, T>,
        temb: Var<'g, T>,
        mut after_stage: impl FnMut(usize, Var<'g, T>) -> Result<Var<'g, T>>,
    ) -> Result<Vec<Var<'g, T>>> {
        let mut h = self.stem.forward(cx, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            h = after_stage(k, stage.forward(cx, h, temb)?)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Copy, Debug)]
struct FilterParams {
    re: ParamId,
    im: ParamId,
}

/// The noise predictor `ε_θ(x_t, image, t)`.
#[derive(Clone, Debug)]
pub struct SegDiffNet<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    time: TimeEmbedding,
    image_encoder: Encoder,
    mask_encoder: Encoder,
    filters: Vec<Option<FilterParams>>,
    bottleneck: Stage,
    decoder: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl<T: Scalar> SegDiffNet<T> {
    /// Builds and initializes every parameter. Initial values depend only on
    /// `seed` and the parameter's name, so variants that share a layer also
    /// share its starting weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            seed,
        };
        let cfg = &config;
        let time = TimeEmbedding::new(
            &mut b,
            cfg.time_embed_dim,
            cfg.diffusion_steps,
            cfg.time_embedding == TimeEmbeddingKind::Table,
        )?;
        let image_encoder = Encoder::new(&mut b, "encoder_image", cfg, cfg.in_channels_image)?;
        let mask_encoder = Encoder::new(&mut b, "encoder_mask", cfg, cfg.in_channels_mask)?;
        let filters = (0..cfg.stages())
            .map(|k| {
                if !(cfg.use_ffparser && cfg.is_fusion_stage(k)) {
                    return Ok(None);
                }
                let (c, h, w) = cfg.stage_shapes()[k];
                let identity = SpectralFilter::<T>::identity(SpectralShape::new(h, w, c));
                Ok(Some(FilterParams {
                    re: b.tensor(&format!("ffparser.stage{k}.re"), identity.re().clone())?,
                    im: b.tensor(&format!("ffparser.stage{k}.im"), identity.im().clone())?,
                }))
            })
            .collect::<Result<_>>()?;

        let last = cfg.stage_channels(cfg.stages() - 1);
        let bc = cfg.bottleneck_channels();
        let bg = cfg.groups_for(bc);
        let bottleneck = Stage {
            down: Some(b.conv("bottleneck.down", last, bc, 3, 2)?),
            blocks: (0..cfg.bottleneck_blocks)
                .map(|j| ResidualBlock::new(&mut b, &format!("bottleneck.block{j}"), bc, bc, cfg.time_embed_dim, bg, bg))
                .collect::<Result<_>>()?,
        };

        let mut decoder = Vec::with_capacity(cfg.stages());
        for k in 0..cfg.stages() {
            let c = cfg.stage_channels(k);
            let below = if k + 1 < cfg.stages() { cfg.stage_channels(k + 1) } else { bc };
            let g = cfg.groups_for(c);
            let up = b.conv(&format!("decoder.level{k}.up"), below, c, 3, 1)?;
            let blocks = (0..cfg.stage_block_counts[k])
                .map(|j| {
                    let ci = if j == 0 { 2 * c } else { c };
                    let gi = cfg.groups_for(ci);
                    ResidualBlock::new(&mut b, &format!("decoder.level{k}.block{j}"), ci, c, cfg.time_embed_dim, gi, g)
                })
                .collect::<Result<_>>()?;
            decoder.push(DecoderLevel { up, blocks });
        }
        let c0 = cfg.stage_channels(0);
        let out_norm = b.norm("decoder.out.norm", c0, cfg.groups_for(c0))?;
        let out_conv = b.zero_conv("decoder.out.conv", c0, cfg.in_channels_mask, 3)?;

        Ok(Self {
            config,
            params,
            time,
            image_encoder,
            mask_encoder,
            filters,
            bottleneck,
            decoder,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of scalar parameters; a function of the config alone.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn ctx<'a, 'g>(&'a self, g: &'g Graph<T>) -> Ctx<'a, 'g, T> {
        Ctx { ps: &self.params, g }
    }

    /// Current spectral filter at encoder stage `k`, when one exists.
    pub fn filter(&self, k: usize) -> Option<SpectralFilter<T>> {
        let fp = self.filters.get(k).copied().flatten()?;
        SpectralFilter::from_parts(self.params.get(fp.re).clone(), self.params.get(fp.im).clone()).ok()
    }

    pub fn set_filter(&mut self, k: usize, filter: &SpectralFilter<T>) -> Result<()> {
        let fp = self
            .filters
            .get(k)
            .copied()
            .flatten()
            .ok_or_else(|| invalid!("no spectral filter at stage {k}"))?;
        self.params.set(fp.re, filter.re().clone())?;
        self.params.set(fp.im, filter.im().clone())
    }

    pub fn time_embedding<'g>(&self, g: &'g Graph<T>, t: &[usize]) -> Result<Var<'g, T>> {
        ensure!(
            t.iter().all(|&s| s < self.config.diffusion_steps),
            "step index out of range for T = {}",
            self.config.diffusion_steps
        );
        self.time.forward(&self.ctx(g), t)
    }

    fn check_spatial(&self, what: &str, v: Var<'_, T>, channels: usize) -> Result<usize> {
        let s = v.shape();
        let size = self.config.image_size;
        ensure!(
            s.len() == 4 && s[1] == channels && s[2] == size && s[3] == size,
            "{what} must be (N, {channels}, {size}, {size}), got {s:?}"
        );
        Ok(s[0])
    }

    /// Mask encoder over `x_t`: final embedding `E_x` and every stage's features.
    pub fn encode_mask<'g>(&self, g: &'g Graph<T>, xt: Var<'g, T>, temb: Var<'g, T>) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        self.check_spatial("x_t", xt, self.config.in_channels_mask)?;
        let feats = self.mask_encoder.forward(&self.ctx(g), xt, temb, |_, h| Ok(h))?;
        Ok((*feats.last().expect("at least one stage"), feats))
    }

    /// Image encoder. With dynamic conditioning enabled, each fusion stage's
    /// output is replaced by its affinity gating against the matching mask
    /// features (spectrally filtered first when enabled). Returns `E_I` and
    /// the per-stage outputs.
    pub fn encode_image<'g>(
        &self,
        g: &'g Graph<T>,
        image: Var<'g, T>,
        mask_features: &[Var<'g, T>],
        temb: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        self.check_spatial("image", image, self.config.in_channels_image)?;
        let cx = self.ctx(g);
        let feats = self.image_encoder.forward(&cx, image, temb, |k, h| {
            if !(self.config.use_dycond && self.config.is_fusion_stage(k)) {
                return Ok(h);
            }
            let mx = *mask_features
                .get(k)
                .ok_or_else(|| invalid!("missing mask features for fusion stage {k}"))?;
            let mx = match self.filters[k] {
                Some(fp) => mx.spectral_filter(cx.p(fp.re), cx.p(fp.im))?,
                None => mx,
            };
            dynamic_condition(h, mx)
        })?;
        Ok((*feats.last().expect("at least one stage"), feats))
    }

    fn forward<'g>(&self, g: &'g Graph<T>, xt: Var<'g, T>, image: Var<'g, T>, t: &[usize]) -> Result<Var<'g, T>> {
        let n = self.check_spatial("x_t", xt, self.config.in_channels_mask)?;
        let ni = self.check_spatial("image", image, self.config.in_channels_image)?;
        ensure!(n == ni && t.len() == n, "batch sizes disagree: x_t {n}, image {ni}, steps {}", t.len());
        let cx = self.ctx(g);
        let temb = self.time_embedding(g, t)?;
        let (e_x, mask_feats) = self.encode_mask(g, xt, temb)?;
        let (e_i, image_feats) = self.encode_image(g, image, &mask_feats, temb)?;
        let mut h = self.bottleneck.forward(&cx, e_i.add(e_x)?, temb)?;
        for k in (0..self.config.stages()).rev() {
            let level = &self.decoder[k];
            h = level.up.forward(&cx, h.upsample2x()?)?;
            let skip = image_feats[k].add(mask_feats[k])?;
            h = h.concat_channels(skip)?;
            for block in &level.blocks {
                h = block.forward(&cx, h, temb)?;
            }
        }
        let h = self.out_norm.forward(&cx, h)?.silu()?;
        self.out_conv.forward(&cx, h)
    }

    /// Inference-only convenience wrapper around [`NoisePredictor::predict_noise`].
    pub fn predict(&self, xt: &Tensor<T>, image: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let out = self.forward(&g, g.constant(xt.clone()), g.constant(image.clone()), t)?;
        Ok((*out.value()).clone())
    }

    /// Identifiers of the residual-branch output conv of the first image-encoder block.
    #[cfg(test)]
    pub(crate) fn first_block_residual_params(&self) -> Vec<ParamId> {
        self.image_encoder.stages[0].blocks[0].residual_params()
    }
}

impl<T: Scalar> NoisePredictor<T> for SegDiffNet<T> {
    fn predict_noise<'g>(&self, graph: &'g Graph<T>, xt: Var<'g, T>, image: Var<'g, T>, t: &[usize]) -> Result<Var<'g, T>> {
        self.forward(graph, xt, image, t)
    }

    fn input_shape(&self) -> Option<(usize, usize, usize, usize)> {
        let c = &self.config;
        Some((c.in_channels_image, c.in_channels_mask, c.image_size, c.image_size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zeroed_residual_branch_passes_input_through() {
        let mut model = SegDiffNet::<f64>::new(ModelConfig::s_toy(), 3).unwrap();
        for id in model.first_block_residual_params() {
            let shape = model.params().get(id).shape().to_vec();
            model.params_mut().set(id, Tensor::zeros(&shape)).unwrap();
        }
        let c = model.config().base_channels;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[2, c, 16, 16], &mut rng);
        let g = Graph::inference();
        let temb = model.time_embedding(&g, &[3, 700]).unwrap();
        let block = &model.image_encoder.stages[0].blocks[0];
        let y = block.forward(&model.ctx(&g), g.constant(x.clone()), temb).unwrap();
        assert_eq!(y.value().data(), x.data());
    }
}
