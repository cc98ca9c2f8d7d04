//! Encoder/decoder pairs for the two domains.
//!
//! Encoder: 7x7 conv -> two stride-2 4x4 convs -> residual blocks.
//! Decoder: residual blocks -> two stride-2 4x4 transposed convs -> 7x7 conv
//! -> tanh. Every conv except the last is followed by batch norm and relu.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Param, ParamGroup, TensorError, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Domain::A),
            "B" | "b" => Some(Domain::B),
            _ => None,
        }
    }
}

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages updated unless the network is frozen.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            base_width: 32,
            n_residual_blocks: 1,
        }
    }
}

impl NetConfig {
    pub fn latent_channels(&self) -> usize {
        4 * self.base_width
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.latent_channels(),
            self.latent_size(),
            self.latent_size(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "image_channels and base_width must be positive".into(),
            ));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4 (at least 8)",
                self.image_size
            )));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::Config("n_residual_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    /// conv -> batch norm -> relu
    ConvBnRelu(Conv, Norm),
    /// conv3x3 -> bn -> relu -> conv3x3 -> bn, plus identity skip.
    Residual(Conv, Norm, Conv, Norm),
    /// conv -> tanh
    ConvTanh(Conv),
}

/// One encoder or decoder: its parameter group plus the layer wiring.
#[derive(Debug)]
pub struct Network {
    group: ParamGroup<f32>,
    layers: Vec<Layer>,
}

struct Builder {
    group: ParamGroup<f32>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Conv {
        let fan_in = c_in * k * k;
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let shape = if transpose {
            [c_in, c_out, k, k]
        } else {
            [c_out, c_in, k, k]
        };
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        let w = Tensor::from_vec(&shape, data).expect("conv weight shape");
        let weight = self
            .group
            .push(format!("{name}.weight"), Param::new(w, true));
        let bias = self.group.push(
            format!("{name}.bias"),
            Param::new(Tensor::zeros(&[c_out]), true),
        );
        Conv {
            weight,
            bias,
            stride,
            pad,
            transpose,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.group.push(
                format!("{name}.gamma"),
                Param::new(Tensor::full(&[c], 1.0), true),
            ),
            beta: self.group.push(
                format!("{name}.beta"),
                Param::new(Tensor::zeros(&[c]), true),
            ),
            mean: self.group.push(
                format!("{name}.running_mean"),
                Param::new(Tensor::zeros(&[c]), false),
            ),
            var: self.group.push(
                format!("{name}.running_var"),
                Param::new(Tensor::full(&[c], 1.0), false),
            ),
        }
    }

    fn residual(&mut self, name: &str, c: usize) -> Layer {
        let c1 = self.conv(&format!("{name}.conv1"), c, c, 3, 1, 1, false);
        let n1 = self.norm(&format!("{name}.bn1"), c);
        let c2 = self.conv(&format!("{name}.conv2"), c, c, 3, 1, 1, false);
        let n2 = self.norm(&format!("{name}.bn2"), c);
        Layer::Residual(c1, n1, c2, n2)
    }
}

impl Network {
    fn encoder(cfg: &NetConfig, seed: u64) -> Self {
        let bw = cfg.base_width;
        let mut b = Builder {
            group: ParamGroup::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut layers = vec![
            Layer::ConvBnRelu(
                b.conv("stem", cfg.image_channels, bw, 7, 1, 3, false),
                b.norm("stem_bn", bw),
            ),
            Layer::ConvBnRelu(
                b.conv("down1", bw, 2 * bw, 4, 2, 1, false),
                b.norm("down1_bn", 2 * bw),
            ),
            Layer::ConvBnRelu(
                b.conv("down2", 2 * bw, 4 * bw, 4, 2, 1, false),
                b.norm("down2_bn", 4 * bw),
            ),
        ];
        for i in 0..cfg.n_residual_blocks {
            layers.push(b.residual(&format!("res{i}"), 4 * bw));
        }
        Self {
            group: b.group,
            layers,
        }
    }

    fn decoder(cfg: &NetConfig, seed: u64) -> Self {
        let bw = cfg.base_width;
        let mut b = Builder {
            group: ParamGroup::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut layers = Vec::new();
        for i in 0..cfg.n_residual_blocks {
            layers.push(b.residual(&format!("res{i}"), 4 * bw));
        }
        layers.push(Layer::ConvBnRelu(
            b.conv("up1", 4 * bw, 2 * bw, 4, 2, 1, true),
            b.norm("up1_bn", 2 * bw),
        ));
        layers.push(Layer::ConvBnRelu(
            b.conv("up2", 2 * bw, bw, 4, 2, 1, true),
            b.norm("up2_bn", bw),
        ));
        layers.push(Layer::ConvTanh(b.conv(
            "head",
            bw,
            cfg.image_channels,
            7,
            1,
            3,
            false,
        )));
        Self {
            group: b.group,
            layers,
        }
    }

    pub fn group(&self) -> &ParamGroup<f32> {
        &self.group
    }

    pub fn group_mut(&mut self) -> &mut ParamGroup<f32> {
        &mut self.group
    }

    pub fn is_frozen(&self) -> bool {
        self.group.is_frozen()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.group.set_frozen(frozen);
    }

    fn deep_clone(&self) -> Self {
        Self {
            group: self.group.deep_clone(),
            layers: self.layers.clone(),
        }
    }

    fn apply_conv(&self, g: &mut Graph<f32>, x: Var, c: &Conv) -> Result<Var, TensorError> {
        let frozen = self.group.is_frozen();
        let w = g.param(self.group.get(c.weight), frozen);
        let b = g.param(self.group.get(c.bias), frozen);
        if c.transpose {
            g.conv_transpose2d(x, w, Some(b), c.stride, c.pad)
        } else {
            g.conv2d(x, w, Some(b), c.stride, c.pad)
        }
    }

    fn apply_norm(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        n: &Norm,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let frozen = self.group.is_frozen();
        let gamma = g.param(self.group.get(n.gamma), frozen);
        let beta = g.param(self.group.get(n.beta), frozen);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
                if !frozen {
                    let m = BN_MOMENTUM as f32;
                    for (idx, batch) in [(n.mean, &stats.mean), (n.var, &stats.var)] {
                        let mut slot = self.group.get(idx).write();
                        for (r, &v) in slot.value.data_mut().iter_mut().zip(batch) {
                            *r = (1.0 - m) * *r + m * v;
                        }
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.group.get(n.mean).read().value.data().to_vec();
                let var = self.group.get(n.var).read().value.data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var)
            }
        }
    }

    /// Runs the network; when `taps` is given, pushes the output of every
    /// conv-bn-relu stage.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        x: Var,
        mode: Mode,
        mut taps: Option<&mut Vec<Var>>,
    ) -> Result<Var, TensorError> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::ConvBnRelu(c, n) => {
                    let y = self.apply_conv(g, h, c)?;
                    let y = self.apply_norm(g, y, n, mode)?;
                    let y = g.relu(y);
                    if let Some(t) = taps.as_deref_mut() {
                        t.push(y);
                    }
                    y
                }
                Layer::Residual(c1, n1, c2, n2) => {
                    let y = self.apply_conv(g, h, c1)?;
                    let y = self.apply_norm(g, y, n1, mode)?;
                    let y = g.relu(y);
                    let y = self.apply_conv(g, y, c2)?;
                    let y = self.apply_norm(g, y, n2, mode)?;
                    g.add(h, y)?
                }
                Layer::ConvTanh(c) => {
                    let y = self.apply_conv(g, h, c)?;
                    g.tanh(y)
                }
            };
        }
        Ok(h)
    }

    /// Entry indices belonging to residual block `block` (`res{block}.*`).
    fn residual_entries(&self, block: usize) -> Vec<usize> {
        let prefix = format!("res{block}.");
        self.group
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with(&prefix))
            .map(|(i, _)| i)
            .collect()
    }
}

/// The encoder/decoder pair of one domain.
#[derive(Debug)]
pub struct Autoencoder {
    pub encoder: Network,
    pub decoder: Network,
    pub config: NetConfig,
    pub domain: Domain,
}

pub fn build_autoencoder(config: NetConfig, rng_seed: u64, domain: Domain) -> Result<Autoencoder> {
    config.validate()?;
    Ok(Autoencoder {
        encoder: Network::encoder(&config, seed::derive_seed(rng_seed, "encoder")),
        decoder: Network::decoder(&config, seed::derive_seed(rng_seed, "decoder")),
        config,
        domain,
    })
}

impl Autoencoder {
    fn check_images(&self, op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
        let expect = self.config.image_shape();
        if shape.len() != 4 || shape[1..] != expect {
            return Err(TensorError::Shape {
                op,
                detail: format!(
                    "expected [N,{},{},{}], got {shape:?}",
                    expect[0], expect[1], expect[2]
                ),
            });
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<f32>, images: Var, mode: Mode) -> Result<Var, TensorError> {
        self.check_images("encode", g.value(images).shape())?;
        self.encoder.forward(g, images, mode, None)
    }

    pub fn decode(&self, g: &mut Graph<f32>, codes: Var, mode: Mode) -> Result<Var, TensorError> {
        let shape = g.value(codes).shape();
        let expect = self.config.latent_shape();
        if shape.len() != 4 || shape[1..] != expect {
            return Err(TensorError::Shape {
                op: "decode",
                detail: format!(
                    "expected latent [N,{},{},{}], got {shape:?}",
                    expect[0], expect[1], expect[2]
                ),
            });
        }
        self.decoder.forward(g, codes, mode, None)
    }

    /// Encoder run that also returns the three conv-stage activations.
    pub fn encode_with_taps(
        &self,
        g: &mut Graph<f32>,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        self.check_images("encode", g.value(images).shape())?;
        let mut taps = Vec::new();
        let z = self.encoder.forward(g, images, mode, Some(&mut taps))?;
        Ok((z, taps))
    }

    /// Forward-only encode of a batch `[N,C,H,W]`.
    pub fn encode_tensor(
        &self,
        images: &Tensor<f32>,
        mode: Mode,
    ) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let z = self.encode(&mut g, x, mode)?;
        Ok(g.value(z).clone())
    }

    pub fn decode_tensor(
        &self,
        codes: &Tensor<f32>,
        mode: Mode,
    ) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::new();
        let z = g.input(codes.clone());
        let y = self.decode(&mut g, z, mode)?;
        Ok(g.value(y).clone())
    }

    pub fn reconstruct_tensor(
        &self,
        images: &Tensor<f32>,
        mode: Mode,
    ) -> Result<Tensor<f32>, TensorError> {
        let z = self.encode_tensor(images, mode)?;
        self.decode_tensor(&z, mode)
    }

    /// Deep copy including running statistics, relabelled with `domain`.
    pub fn clone_params(&self, domain: Domain) -> Self {
        Self {
            encoder: self.encoder.deep_clone(),
            decoder: self.decoder.deep_clone(),
            config: self.config,
            domain,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.encoder.group.trainable_count() + self.decoder.group.trainable_count()
    }

    pub fn zero_grad(&self) {
        self.encoder.group.zero_grad();
        self.decoder.group.zero_grad();
    }

    /// `(prefixed name, param)` over encoder then decoder entries.
    pub fn named_params(&self) -> Vec<(String, Param<f32>)> {
        let tag = self.domain.tag();
        let enc = self
            .encoder
            .group
            .iter()
            .map(|(n, p)| (format!("E_{tag}/{n}"), p.clone()));
        let dec = self
            .decoder
            .group
            .iter()
            .map(|(n, p)| (format!("D_{tag}/{n}"), p.clone()));
        enc.chain(dec).collect()
    }
}

/// Weight tying between the two domains (ablation only).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ShareSpec {
    #[default]
    None,
    /// Last encoder residual block and first decoder residual block are the
    /// same parameter objects in both domains.
    Tied,
}

impl ShareSpec {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ShareSpec::None),
            "tied" => Some(ShareSpec::Tied),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShareSpec::None => "none",
            ShareSpec::Tied => "tied",
        }
    }
}

/// Points `ae_a`'s latent-adjacent residual blocks at `ae_b`'s storage.
pub fn apply_share_spec(ae_a: &mut Autoencoder, ae_b: &Autoencoder, spec: ShareSpec) -> Result<()> {
    if ae_a.config != ae_b.config {
        return Err(Error::Config(
            "weight sharing needs both autoencoders built from the same NetConfig".into(),
        ));
    }
    if spec == ShareSpec::None {
        return Ok(());
    }
    let last = ae_a.config.n_residual_blocks - 1;
    for idx in ae_b.encoder.residual_entries(last) {
        ae_a.encoder
            .group
            .replace(idx, ae_b.encoder.group.get(idx).clone());
    }
    for idx in ae_b.decoder.residual_entries(0) {
        ae_a.decoder
            .group
            .replace(idx, ae_b.decoder.group.get(idx).clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            image_channels: 3,
            image_size: 16,
            base_width: 4,
            n_residual_blocks: 1,
        }
    }

    fn images(n: usize, cfg: &NetConfig, salt: f32) -> Tensor<f32> {
        let len = n * cfg.image_channels * cfg.image_size * cfg.image_size;
        let data = (0..len).map(|i| (i as f32 * 0.37 + salt).sin()).collect();
        Tensor::from_vec(
            &[n, cfg.image_channels, cfg.image_size, cfg.image_size],
            data,
        )
        .unwrap()
    }

    /// Layer-size enumeration for the default architecture.
    fn closed_form_count(cfg: &NetConfig) -> usize {
        let (c, bw, r) = (cfg.image_channels, cfg.base_width, cfg.n_residual_blocks);
        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
        let bn = |ch: usize| 2 * ch;
        let res = 2 * (conv(4 * bw, 4 * bw, 3) + bn(4 * bw));
        let enc = conv(c, bw, 7)
            + bn(bw)
            + conv(bw, 2 * bw, 4)
            + bn(2 * bw)
            + conv(2 * bw, 4 * bw, 4)
            + bn(4 * bw)
            + r * res;
        let dec = r * res
            + conv(4 * bw, 2 * bw, 4)
            + bn(2 * bw)
            + conv(2 * bw, bw, 4)
            + bn(bw)
            + conv(bw, c, 7);
        enc + dec
    }

    #[test]
    fn default_config_latent_shape_and_param_count() {
        let cfg = NetConfig::default();
        let ae = build_autoencoder(cfg, 1, Domain::B).unwrap();
        assert_eq!(cfg.latent_shape(), [128, 8, 8]);
        assert_eq!(ae.trainable_count(), closed_form_count(&cfg));
        assert_eq!(ae.trainable_count(), 929_411);
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let z = ae.encode_tensor(&x, Mode::Eval).unwrap();
        assert_eq!(z.shape(), &[1, 128, 8, 8]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.image_size = 18;
        assert!(build_autoencoder(cfg, 0, Domain::B).is_err());
        let mut cfg = small();
        cfg.n_residual_blocks = 0;
        assert!(build_autoencoder(cfg, 0, Domain::B).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_autoencoder(small(), 9, Domain::B).unwrap();
        let b = build_autoencoder(small(), 9, Domain::B).unwrap();
        let c = build_autoencoder(small(), 10, Domain::B).unwrap();
        let vals = |ae: &Autoencoder| -> Vec<Vec<f32>> {
            ae.named_params()
                .iter()
                .map(|(_, p)| p.read().value.data().to_vec())
                .collect()
        };
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn round_trip_shape_and_output_range() {
        let cfg = small();
        let ae = build_autoencoder(cfg, 3, Domain::B).unwrap();
        let x = images(2, &cfg, 0.1);
        for mode in [Mode::Train, Mode::Eval] {
            let y = ae.reconstruct_tensor(&x, mode).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let bad = Tensor::zeros(&[1, 3, 12, 12]);
        assert!(ae.encode_tensor(&bad, Mode::Eval).is_err());
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let cfg = small();
        let ae = build_autoencoder(cfg, 4, Domain::B).unwrap();
        let x = images(2, &cfg, 0.5);
        let alone = ae
            .reconstruct_tensor(&Tensor::stack(&[x.sample(0)]).unwrap(), Mode::Eval)
            .unwrap();
        let both = ae.reconstruct_tensor(&x, Mode::Eval).unwrap();
        assert_eq!(alone.data(), both.sample(0).data());
    }

    #[test]
    fn clone_identity_and_isolation() {
        let cfg = small();
        let b = build_autoencoder(cfg, 5, Domain::B).unwrap();
        let a = b.clone_params(Domain::A);
        let x = images(2, &cfg, 0.9);
        assert_eq!(
            a.encode_tensor(&x, Mode::Eval).unwrap(),
            b.encode_tensor(&x, Mode::Eval).unwrap()
        );
        // F at step 0 equals B's reconstruction bitwise.
        let za = a.encode_tensor(&x, Mode::Eval).unwrap();
        assert_eq!(
            b.decode_tensor(&za, Mode::Eval).unwrap(),
            b.reconstruct_tensor(&x, Mode::Eval).unwrap()
        );

        let before = b.reconstruct_tensor(&x, Mode::Eval).unwrap();
        for (_, p) in a.named_params() {
            p.write()
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.25);
        }
        assert_eq!(b.reconstruct_tensor(&x, Mode::Eval).unwrap(), before);
        assert_ne!(a.reconstruct_tensor(&x, Mode::Eval).unwrap(), before);
    }

    #[test]
    fn train_mode_updates_running_stats_only_when_unfrozen() {
        let cfg = small();
        let mut ae = build_autoencoder(cfg, 6, Domain::B).unwrap();
        let x = images(2, &cfg, 0.2);
        let stat = |ae: &Autoencoder| {
            ae.encoder
                .group()
                .by_name("stem_bn.running_mean")
                .unwrap()
                .read()
                .value
                .clone()
        };
        let before = stat(&ae);
        ae.encoder.set_frozen(true);
        ae.encode_tensor(&x, Mode::Train).unwrap();
        assert_eq!(stat(&ae), before);
        ae.encoder.set_frozen(false);
        ae.encode_tensor(&x, Mode::Train).unwrap();
        assert_ne!(stat(&ae), before);
    }

    #[test]
    fn share_spec_none_shares_nothing_and_tied_shares_blocks() {
        let cfg = small();
        let b = build_autoencoder(cfg, 7, Domain::B).unwrap();
        let mut a = b.clone_params(Domain::A);
        apply_share_spec(&mut a, &b, ShareSpec::None).unwrap();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert!(!pa.same_storage(pb));
        }
        apply_share_spec(&mut a, &b, ShareSpec::Tied).unwrap();
        let shared: Vec<String> = a
            .named_params()
            .iter()
            .zip(b.named_params().iter())
            .filter(|((_, pa), (_, pb))| pa.same_storage(pb))
            .map(|((n, _), _)| n.clone())
            .collect();
        assert!(shared.iter().all(|n| n.contains("/res0.")), "{shared:?}");
        // one block on each side: 2 convs x 2 + 2 bns x 4 entries
        assert_eq!(shared.len(), 2 * 12);

        // updating the shared block through A changes B's output
        let x = images(1, &cfg, 0.3);
        let before = b.reconstruct_tensor(&x, Mode::Eval).unwrap();
        a.encoder
            .group()
            .by_name("res0.conv2.weight")
            .unwrap()
            .write()
            .value
            .data_mut()[0] += 1.0;
        assert_ne!(b.reconstruct_tensor(&x, Mode::Eval).unwrap(), before);

        let mut other = build_autoencoder(
            NetConfig {
                base_width: 8,
                ..cfg
            },
            1,
            Domain::A,
        )
        .unwrap();
        assert!(apply_share_spec(&mut other, &b, ShareSpec::Tied).is_err());
    }
}
