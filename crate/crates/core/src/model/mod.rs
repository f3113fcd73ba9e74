//! The RDP-Net change-detection network.
//!
//! ```text
//! [image_a | image_b]  (6, H, W)
//!   -> region division    conv k=p s=p -> SN -> GELU          (dim, H/p, W/p)
//!   -> depth x ConvMixer   u = x + SN(GELU(dw(x))); x = SN(GELU(pw(u)))
//!        each depth d -> region composition  convT k=p s=p -> SN -> GELU  (out_ch, H, W)
//!   -> concat depths       (out_ch * depth, H, W)
//!   -> depth attention     per-channel weights
//!   -> head                1x1 conv -> (num_classes, H, W)
//! ```

mod checkpoint;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{gelu, BatchStats, Bound, Conv2d, ConvTranspose2d, DepthAttention, Mode, ParamRegistry, SwitchNorm};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_records, save_checkpoint, write_records, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{decode_header, encode_header, write_file};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RdpNetConfig {
    /// Region (patch) side `p`; division and composition use kernel = stride = p.
    pub patch_size: usize,
    /// Channel width of the ConvMixer trunk.
    pub embed_dim: usize,
    pub depth: usize,
    /// Channels produced by each region-composition layer.
    pub out_ch: usize,
    /// Depthwise kernel side (odd).
    pub dw_kernel: usize,
    /// Channels of the concatenated image pair.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Nominal input extent; any extent divisible by `patch_size` is accepted at run time.
    pub height: usize,
    pub width: usize,
}

impl Default for RdpNetConfig {
    fn default() -> Self {
        RdpNetConfig {
            patch_size: 4,
            embed_dim: 64,
            depth: 6,
            out_ch: 32,
            dw_kernel: 7,
            in_channels: 6,
            num_classes: 2,
            height: 256,
            width: 256,
        }
    }
}

impl RdpNetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("out_ch", self.out_ch),
            ("dw_kernel", self.dw_kernel),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::Config(format!("dw_kernel must be odd, got {}", self.dw_kernel)));
        }
        if self.in_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "in_channels must be even (two stacked images), got {}",
                self.in_channels
            )));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        Ok(())
    }

    /// Length of the depth-attention vector, `out_ch * depth`.
    pub fn attention_len(&self) -> usize {
        self.out_ch * self.depth
    }

    /// Closed-form learnable parameter count, independent of any registry.
    pub fn param_count(&self) -> usize {
        let (c, d, p, k) = (self.in_channels, self.embed_dim, self.patch_size, self.dw_kernel);
        let sn = |ch: usize| 2 * ch + 6;
        let division = c * d * p * p + d + sn(d);
        let block = (d * k * k + d) + (d * d + d) + 2 * sn(d);
        let composition = d * self.out_ch * p * p + self.out_ch + sn(self.out_ch);
        let attention = self.out_ch * self.depth;
        let head = self.out_ch * self.depth * self.num_classes + self.num_classes;
        division + self.depth * (block + composition) + attention + head
    }

    /// Human-readable parameter summary for this configuration.
    pub fn param_report(&self) -> String {
        format!(
            "parameters: {}\n\
             config: patch_size={} embed_dim={} depth={} out_ch={} dw_kernel={} in_channels={} num_classes={}\n\
             note: patch_size and embed_dim are free choices here, so this count is not \
             calibrated to the 1.70M reference total and does not claim to match it\n",
            self.param_count(),
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.out_ch,
            self.dw_kernel,
            self.in_channels,
            self.num_classes,
        )
    }

    pub(crate) fn fields(&self) -> [usize; 9] {
        [
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.out_ch,
            self.dw_kernel,
            self.in_channels,
            self.num_classes,
            self.height,
            self.width,
        ]
    }

    pub(crate) fn from_fields(f: [usize; 9]) -> Self {
        RdpNetConfig {
            patch_size: f[0],
            embed_dim: f[1],
            depth: f[2],
            out_ch: f[3],
            dw_kernel: f[4],
            in_channels: f[5],
            num_classes: f[6],
            height: f[7],
            width: f[8],
        }
    }
}

#[derive(Clone, Debug)]
struct MixerBlock {
    depthwise: Conv2d,
    depthwise_norm: SwitchNorm,
    pointwise: Conv2d,
    pointwise_norm: SwitchNorm,
}

#[derive(Clone, Debug)]
struct Composition {
    conv: ConvTranspose2d,
    norm: SwitchNorm,
}

/// Assembled network plus its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct RdpNet<T: Scalar> {
    config: RdpNetConfig,
    registry: ParamRegistry<T>,
    division: Conv2d,
    division_norm: SwitchNorm,
    blocks: Vec<MixerBlock>,
    compositions: Vec<Composition>,
    attention: DepthAttention,
    head: Conv2d,
}

/// Logits plus the batch statistics each Switchable Norm layer saw (train mode).
pub struct ForwardOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub stats: Vec<Option<BatchStats<T>>>,
}

impl<T: Scalar> RdpNet<T> {
    /// Registers every layer and initializes parameters from `rng`.
    pub fn build(config: RdpNetConfig, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::skeleton(config)?;
        net.registry.init_params(rng);
        Ok(net)
    }

    /// Layers registered, parameters left at zero.
    pub(crate) fn skeleton(config: RdpNetConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let (d, p, k) = (config.embed_dim, config.patch_size, config.dw_kernel);

        let division = Conv2d::new(&mut reg, "division.conv", config.in_channels, d, p, Conv2dSpec::stride(p))?;
        let division_norm = SwitchNorm::new(&mut reg, "division.norm", d)?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut compositions = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let dw_spec = Conv2dSpec::default().with_padding(k / 2).with_groups(d);
            blocks.push(MixerBlock {
                depthwise: Conv2d::new(&mut reg, &format!("blocks.{i}.depthwise"), d, d, k, dw_spec)?,
                depthwise_norm: SwitchNorm::new(&mut reg, &format!("blocks.{i}.depthwise_norm"), d)?,
                pointwise: Conv2d::new(&mut reg, &format!("blocks.{i}.pointwise"), d, d, 1, Conv2dSpec::default())?,
                pointwise_norm: SwitchNorm::new(&mut reg, &format!("blocks.{i}.pointwise_norm"), d)?,
            });
        }
        for i in 0..config.depth {
            compositions.push(Composition {
                conv: ConvTranspose2d::new(&mut reg, &format!("composition.{i}.conv"), d, config.out_ch, p, p)?,
                norm: SwitchNorm::new(&mut reg, &format!("composition.{i}.norm"), config.out_ch)?,
            });
        }
        let attention = DepthAttention::new(&mut reg, "attention", config.attention_len())?;
        let head = Conv2d::new(
            &mut reg,
            "head",
            config.attention_len(),
            config.num_classes,
            1,
            Conv2dSpec::default(),
        )?;
        Ok(RdpNet {
            config,
            registry: reg,
            division,
            division_norm,
            blocks,
            compositions,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &RdpNetConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    /// Learnable parameter count from the registry.
    pub fn param_count(&self) -> usize {
        self.registry.count()
    }

    /// Switchable Norm layers in a fixed order: division, then each block's
    /// two norms, then each composition norm.
    fn norms(&self) -> Vec<&SwitchNorm> {
        let mut out = vec![&self.division_norm];
        for b in &self.blocks {
            out.push(&b.depthwise_norm);
            out.push(&b.pointwise_norm);
        }
        out.extend(self.compositions.iter().map(|c| &c.norm));
        out
    }

    /// Records parameters on `tape` (as leaves when `trainable`).
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        self.registry.bind(tape, trainable)
    }

    /// Forward pass over a batch of pairs `(N, C/2, H, W)` each.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        image_a: Var<'t, T>,
        image_b: Var<'t, T>,
        mode: Mode,
    ) -> Result<ForwardOutput<'t, T>> {
        let (sa, sb) = (image_a.shape(), image_b.shape());
        if sa != sb {
            return Err(Error::shape("rdpnet.forward", &sa, &sb));
        }
        if sa.len() != 4 || sa[1] * 2 != self.config.in_channels {
            return Err(Error::invalid(
                "rdpnet.forward",
                format!(
                    "each image must be (N, {}, H, W), got {sa:?}",
                    self.config.in_channels / 2
                ),
            ));
        }
        let ps = self.config.patch_size;
        if sa[2] % ps != 0 || sa[3] % ps != 0 {
            return Err(Error::invalid(
                "rdpnet.forward",
                format!("input {}x{} is not divisible by patch size {ps}", sa[2], sa[3]),
            ));
        }

        let reg = &self.registry;
        let mut stats: Vec<Option<BatchStats<T>>> = Vec::with_capacity(self.norms().len());
        let mut norm = |sn: &SwitchNorm, x: Var<'t, T>| -> Result<Var<'t, T>> {
            let (y, s) = sn.forward(reg, p, x, mode)?;
            stats.push(s);
            Ok(y)
        };

        let x = Var::concat(&[image_a, image_b], 1)?;
        let mut tokens = gelu(norm(&self.division_norm, self.division.forward(p, x)?)?)?;

        let mut mixer_out = Vec::with_capacity(self.config.depth);
        for block in &self.blocks {
            let spatial = norm(&block.depthwise_norm, gelu(block.depthwise.forward(p, tokens)?)?)?;
            let u = tokens.add(spatial)?;
            tokens = norm(&block.pointwise_norm, gelu(block.pointwise.forward(p, u)?)?)?;
            mixer_out.push(tokens);
        }
        // Composition norms are recorded after all block norms to match `norms()`.
        let mut composed = Vec::with_capacity(self.config.depth);
        for (comp, &t) in self.compositions.iter().zip(&mixer_out) {
            composed.push(gelu(norm(&comp.norm, comp.conv.forward(p, t)?)?)?);
        }
        let stacked = Var::concat(&composed, 1)?;
        let fused = self.attention.forward(p, stacked)?;
        let logits = self.head.forward(p, fused)?;
        Ok(ForwardOutput { logits, stats })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        let norms: Vec<SwitchNorm> = self.norms().into_iter().cloned().collect();
        for (sn, s) in norms.iter().zip(stats) {
            if let Some(s) = s {
                sn.update_running(&mut self.registry, s);
            }
        }
    }

    /// Eval-mode logits for a batch of pairs, without recording gradients.
    pub fn infer(&self, image_a: &Tensor<T>, image_b: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(&p, tape.constant(image_a.clone()), tape.constant(image_b.clone()), Mode::Eval)?;
        let logits = out.logits.value().clone();
        Ok(logits)
    }
}

/// Per-pixel argmax over two-class logits `(N, 2, H, W)` or `(2, H, W)`.
/// Exact ties resolve to class 0 (unchanged).
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Mask>> {
    let s = logits.shape();
    let (n, c, h, w) = match *s {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::invalid("predict_mask", format!("expected (N, 2, H, W), got {s:?}"))),
    };
    if c != 2 {
        return Err(Error::invalid("predict_mask", format!("expected 2 classes, got {c}")));
    }
    let plane = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            let l0 = &d[(2 * b) * plane..(2 * b + 1) * plane];
            let l1 = &d[(2 * b + 1) * plane..(2 * b + 2) * plane];
            let data = l0.iter().zip(l1).map(|(a, b)| (b > a) as u8).collect();
            Mask::new(h, w, data).expect("binary by construction")
        })
        .collect())
}
