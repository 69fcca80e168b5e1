//! Minimal trainable encoder/decoder over voxel grids with explicit,
//! hand-derived backpropagation.
//!
//! Architecture: stride-2 conv stages with Shifted SoftPlus activations, a
//! mirrored decoder using nearest-neighbor upsampling plus convolution, and
//! an optional property head (global average pooling, three linear layers
//! with layer normalization, dropout 0.1, Shifted SoftPlus, and a final
//! Tanhshrink). No autodiff; `grad_check` is the safety net.

pub mod adam;
pub mod layers;
pub mod train;

pub use adam::AdamState;
pub use train::{
    grad_check, net_train_step, train_denoiser, train_property_head, GradCheckReport, LossSpec,
    PropertyTrainMode, TrainConfig, TrainCurve, TrainSample,
};

use crate::denoisers::{Denoiser, DenoiserKind};
use crate::error::{Result, VoxError};
use crate::voxel::{GridSpec, VoxelGrid};
use layers::*;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    None,
    Property,
}

#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Channel counts per stage, starting at the grid channel count.
    pub widths: Vec<usize>,
    pub head: HeadKind,
    pub head_hidden: usize,
    pub dropout: f64,
    pub grid: GridSpec,
}

impl NetConfig {
    pub fn new(widths: Vec<usize>, head: HeadKind, grid: GridSpec) -> Result<NetConfig> {
        let cfg = NetConfig { widths, head, head_hidden: 32, dropout: 0.1, grid };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(VoxError::Config("need at least one encoder stage".into()));
        }
        if self.widths[0] != self.grid.channels.len() {
            return Err(VoxError::Config(format!(
                "widths[0] = {} must equal grid channel count {}",
                self.widths[0],
                self.grid.channels.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(VoxError::Config("zero-width stage".into()));
        }
        let stages = self.n_stages();
        if self.grid.edge_voxels % (1 << stages) != 0 {
            return Err(VoxError::Config(format!(
                "grid edge {} not divisible by 2^{stages}",
                self.grid.edge_voxels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VoxError::Config("dropout must be in [0, 1)".into()));
        }
        if self.head == HeadKind::Property && self.head_hidden == 0 {
            return Err(VoxError::Config("property head needs hidden units".into()));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn bottleneck_edge(&self) -> usize {
        self.grid.edge_voxels >> self.n_stages()
    }

    pub fn latent_len(&self) -> usize {
        let b = self.bottleneck_edge();
        self.widths[self.n_stages()] * b * b * b
    }

    /// Closed-form parameter count; equals the allocated element count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for i in 0..self.n_stages() {
            n += self.widths[i] * self.widths[i + 1] * 27 + self.widths[i + 1]; // encoder
            n += self.widths[i + 1] * self.widths[i] * 27 + self.widths[i]; // mirrored decoder
        }
        if self.head == HeadKind::Property {
            let w = self.widths[self.n_stages()];
            let h = self.head_hidden;
            n += w * h + h; // lin1
            n += 2 * h; // ln1
            n += h * h + h; // lin2
            n += 2 * h; // ln2
            n += h + 1; // lin3 -> scalar
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PropertyHead {
    pub lin1: LinearLayer,
    pub ln1: LayerNormParams,
    pub lin2: LinearLayer,
    pub ln2: LayerNormParams,
    pub lin3: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct TinyNet {
    pub config: NetConfig,
    pub enc: Vec<ConvLayer>,
    pub dec: Vec<ConvLayer>,
    pub head: Option<PropertyHead>,
}

fn he_conv<R: rand::Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> ConvLayer {
    let std = (2.0 / (cin as f64 * 27.0)).sqrt();
    let w = (0..cout * cin * 27)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    ConvLayer { w, b: vec![0.0; cout], cin, cout, stride }
}

fn he_linear<R: rand::Rng>(n_in: usize, n_out: usize, rng: &mut R) -> LinearLayer {
    let std = (2.0 / n_in as f64).sqrt();
    let w = (0..n_out * n_in)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    LinearLayer { w, b: vec![0.0; n_out], n_in, n_out }
}

impl TinyNet {
    /// He-initialized network, deterministic in the seed.
    pub fn init(config: NetConfig, seed: u64) -> Result<TinyNet> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, &[0x1417]);
        let n = config.n_stages();
        let mut enc = Vec::with_capacity(n);
        for i in 0..n {
            enc.push(he_conv(config.widths[i], config.widths[i + 1], 2, &mut rng));
        }
        let mut dec = Vec::with_capacity(n);
        for i in 0..n {
            let cin = config.widths[n - i];
            let cout = config.widths[n - i - 1];
            dec.push(he_conv(cin, cout, 1, &mut rng));
        }
        let head = if config.head == HeadKind::Property {
            let w = config.widths[n];
            let h = config.head_hidden;
            Some(PropertyHead {
                lin1: he_linear(w, h, &mut rng),
                ln1: LayerNormParams { gain: vec![1.0; h], bias: vec![0.0; h] },
                lin2: he_linear(h, h, &mut rng),
                ln2: LayerNormParams { gain: vec![1.0; h], bias: vec![0.0; h] },
                lin3: he_linear(h, 1, &mut rng),
            })
        } else {
            None
        };
        Ok(TinyNet { config, enc, dec, head })
    }

    /// Ordered (name, tensor) views over every parameter.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.weight"), &l.w));
            out.push((format!("enc{i}.bias"), &l.b));
        }
        for (i, l) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.weight"), &l.w));
            out.push((format!("dec{i}.bias"), &l.b));
        }
        if let Some(h) = &self.head {
            out.push(("head.lin1.weight".into(), &h.lin1.w));
            out.push(("head.lin1.bias".into(), &h.lin1.b));
            out.push(("head.ln1.gain".into(), &h.ln1.gain));
            out.push(("head.ln1.bias".into(), &h.ln1.bias));
            out.push(("head.lin2.weight".into(), &h.lin2.w));
            out.push(("head.lin2.bias".into(), &h.lin2.b));
            out.push(("head.ln2.gain".into(), &h.ln2.gain));
            out.push(("head.ln2.bias".into(), &h.ln2.bias));
            out.push(("head.lin3.weight".into(), &h.lin3.w));
            out.push(("head.lin3.bias".into(), &h.lin3.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, l) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}.weight"), &mut l.w));
            out.push((format!("enc{i}.bias"), &mut l.b));
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec{i}.weight"), &mut l.w));
            out.push((format!("dec{i}.bias"), &mut l.b));
        }
        if let Some(h) = &mut self.head {
            out.push(("head.lin1.weight".into(), &mut h.lin1.w));
            out.push(("head.lin1.bias".into(), &mut h.lin1.b));
            out.push(("head.ln1.gain".into(), &mut h.ln1.gain));
            out.push(("head.ln1.bias".into(), &mut h.ln1.bias));
            out.push(("head.lin2.weight".into(), &mut h.lin2.w));
            out.push(("head.lin2.bias".into(), &mut h.lin2.b));
            out.push(("head.ln2.gain".into(), &mut h.ln2.gain));
            out.push(("head.ln2.bias".into(), &mut h.ln2.bias));
            out.push(("head.lin3.weight".into(), &mut h.lin3.w));
            out.push(("head.lin3.bias".into(), &mut h.lin3.b));
        }
        out
    }

    pub fn allocated_param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_input(&self, g: &VoxelGrid) -> Result<()> {
        if g.spec.edge_voxels != self.config.grid.edge_voxels
            || g.spec.channels.len() != self.config.grid.channels.len()
        {
            return Err(VoxError::Shape(format!(
                "input grid {}^3 x {} does not match net grid {}^3 x {}",
                g.spec.edge_voxels,
                g.spec.channels.len(),
                self.config.grid.edge_voxels,
                self.config.grid.channels.len()
            )));
        }
        Ok(())
    }
}

/// Dropout behavior of one forward pass.
pub enum DropoutMode<'a> {
    /// Deterministic: dropout is the identity.
    Eval,
    /// Pre-sampled masks, one per dropout layer (entries 0 or 1/(1-p)).
    Masks(&'a [Vec<f64>]),
}

/// Cached activations of one forward pass.
pub struct Trace {
    pub sizes: Vec<usize>,
    pub input: Vec<f64>,
    pub enc_pre: Vec<Vec<f64>>,
    pub enc_act: Vec<Vec<f64>>,
    pub ups: Vec<Vec<f64>>,
    pub dec_pre: Vec<Vec<f64>>,
    pub dec_act: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
    // property head caches
    pub pooled: Vec<f64>,
    pub xhat: Vec<Vec<f64>>,
    pub invstd: Vec<f64>,
    pub ssp_pre: Vec<Vec<f64>>,
    pub dropped: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub lin3_pre: f64,
    pub property: Option<f64>,
}

impl Trace {
    pub fn latent(&self) -> &[f64] {
        self.enc_act.last().expect("at least one stage")
    }
}

/// Full forward pass with caches for the backward pass.
pub fn forward(net: &TinyNet, input: &VoxelGrid, mode: DropoutMode) -> Result<Trace> {
    net.check_input(input)?;
    let n = net.config.n_stages();
    let mut sizes = vec![net.config.grid.edge_voxels];
    let mut enc_pre = Vec::with_capacity(n);
    let mut enc_act = Vec::with_capacity(n);

    let mut cur = input.data.clone();
    let mut l = net.config.grid.edge_voxels;
    for layer in &net.enc {
        let mut y = Vec::new();
        let l_out =
            conv3d_forward(&cur, layer.cin, l, &layer.w, &layer.b, layer.cout, layer.stride, &mut y);
        enc_pre.push(y.clone());
        ssp_forward(&mut y);
        enc_act.push(y.clone());
        cur = y;
        l = l_out;
        sizes.push(l);
    }

    let mut ups = Vec::with_capacity(n);
    let mut dec_pre = Vec::with_capacity(n);
    let mut dec_act = Vec::with_capacity(n.saturating_sub(1));
    for (i, layer) in net.dec.iter().enumerate() {
        let mut up = Vec::new();
        let l_up = upsample2_forward(&cur, layer.cin, l, &mut up);
        ups.push(up.clone());
        let mut y = Vec::new();
        let l_out = conv3d_forward(&up, layer.cin, l_up, &layer.w, &layer.b, layer.cout, 1, &mut y);
        dec_pre.push(y.clone());
        if i + 1 < n {
            ssp_forward(&mut y);
            dec_act.push(y.clone());
        }
        cur = y;
        l = l_out;
    }
    let reconstruction = cur;

    // property head
    let mut pooled = Vec::new();
    let mut xhat = Vec::new();
    let mut invstd = Vec::new();
    let mut ssp_pre = Vec::new();
    let mut dropped = Vec::new();
    let mut masks_used: Vec<Vec<f64>> = Vec::new();
    let mut lin3_pre = 0.0;
    let mut property = None;
    if let Some(head) = &net.head {
        let bn_edge = net.config.bottleneck_edge();
        let bn_ch = net.config.widths[n];
        pooled = gap_forward(enc_act.last().unwrap(), bn_ch, bn_edge);
        let mut x = pooled.clone();
        for (idx, (lin, ln)) in [(&head.lin1, &head.ln1), (&head.lin2, &head.ln2)]
            .into_iter()
            .enumerate()
        {
            let a = linear_forward(&x, &lin.w, &lin.b, lin.n_out);
            let (y, xh, inv) = layernorm_forward(&a, &ln.gain, &ln.bias);
            xhat.push(xh);
            invstd.push(inv);
            ssp_pre.push(y.clone());
            let mut s = y;
            ssp_forward(&mut s);
            let mask = match &mode {
                DropoutMode::Eval => vec![1.0; lin.n_out],
                DropoutMode::Masks(m) => m[idx].clone(),
            };
            dropout_apply(&mut s, &mask);
            masks_used.push(mask);
            dropped.push(s.clone());
            x = s;
        }
        let z = linear_forward(&x, &head.lin3.w, &head.lin3.b, 1);
        lin3_pre = z[0];
        property = Some(tanhshrink_forward(lin3_pre));
    }

    Ok(Trace {
        sizes,
        input: input.data.clone(),
        enc_pre,
        enc_act,
        ups,
        dec_pre,
        dec_act,
        reconstruction,
        pooled,
        xhat,
        invstd,
        ssp_pre,
        dropped,
        masks: masks_used,
        lin3_pre,
        property,
    })
}

/// Eval-mode forward packaged as grids/vectors.
pub struct NetOutput {
    pub latent: Vec<f64>,
    pub reconstruction: VoxelGrid,
    pub property: Option<f64>,
}

pub fn net_forward_eval(net: &TinyNet, input: &VoxelGrid) -> Result<NetOutput> {
    let trace = forward(net, input, DropoutMode::Eval)?;
    let mut recon = input.clone();
    recon.data = trace.reconstruction.clone();
    recon.noise_sigma = None;
    Ok(NetOutput { latent: trace.latent().to_vec(), reconstruction: recon, property: trace.property })
}

/// Gradient container mirroring the parameter tensors by name and order.
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl NetGrads {
    pub fn zeros_like(net: &TinyNet) -> NetGrads {
        NetGrads {
            tensors: net.tensors().into_iter().map(|(n, t)| (n, vec![0.0; t.len()])).collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Vec<f64> {
        &self.tensors.iter().find(|(n, _)| n == name).expect("tensor name").1
    }

    /// Two disjoint mutable tensors (weight + bias of one layer).
    fn pair_mut(&mut self, a: &str, b: &str) -> (&mut Vec<f64>, &mut Vec<f64>) {
        let ia = self.tensors.iter().position(|(n, _)| n == a).expect("tensor name");
        let ib = self.tensors.iter().position(|(n, _)| n == b).expect("tensor name");
        assert_ne!(ia, ib);
        if ia < ib {
            let (lo, hi) = self.tensors.split_at_mut(ib);
            (&mut lo[ia].1, &mut hi[0].1)
        } else {
            let (lo, hi) = self.tensors.split_at_mut(ia);
            (&mut hi[0].1, &mut lo[ib].1)
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for (_, t) in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= f;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Backward pass from output gradients to parameter gradients.
///
/// `grad_recon` is dL/d(reconstruction); `grad_property` is dL/d(property)
/// at the head output, after Tanhshrink. Either may be absent.
pub fn backward(
    net: &TinyNet,
    trace: &Trace,
    grad_recon: Option<&[f64]>,
    grad_property: Option<f64>,
) -> NetGrads {
    let mut grads = NetGrads::zeros_like(net);
    let n = net.config.n_stages();
    let bn_edge = net.config.bottleneck_edge();
    let bn_ch = net.config.widths[n];
    let mut g_bottleneck = vec![0.0f64; trace.latent().len()];

    // decoder chain
    if let Some(gr) = grad_recon {
        let mut g: Vec<f64> = gr.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n {
                ssp_backward(&trace.dec_pre[i], &mut g);
            }
            let layer = &net.dec[i];
            let l_in = trace.sizes[n - i - 1]; // edge of the upsampled input
            let mut gx = Vec::new();
            let (gw, gb) = grads.pair_mut(&format!("dec{i}.weight"), &format!("dec{i}.bias"));
            conv3d_backward(&trace.ups[i], layer.cin, l_in, &layer.w, layer.cout, 1, &g, &mut gx, gw, gb);
            let mut g_prev = Vec::new();
            upsample2_backward(&gx, layer.cin, trace.sizes[n - i], &mut g_prev);
            g = g_prev;
        }
        for (acc, v) in g_bottleneck.iter_mut().zip(&g) {
            *acc += v;
        }
    }

    // property head chain
    if let (Some(gp), Some(head)) = (grad_property, &net.head) {
        let gz = tanhshrink_backward(trace.lin3_pre, gp);
        let mut g = Vec::new();
        {
            let (gw, gb) = grads.pair_mut("head.lin3.weight", "head.lin3.bias");
            linear_backward(&trace.dropped[1], &head.lin3.w, &[gz], &mut g, gw, gb);
        }
        for idx in (0..2usize).rev() {
            let (lin, ln, lin_name, ln_name) = if idx == 0 {
                (&head.lin1, &head.ln1, "head.lin1", "head.ln1")
            } else {
                (&head.lin2, &head.ln2, "head.lin2", "head.ln2")
            };
            dropout_apply(&mut g, &trace.masks[idx]);
            ssp_backward(&trace.ssp_pre[idx], &mut g);
            let mut g_ln = Vec::new();
            {
                let (gg, gbi) =
                    grads.pair_mut(&format!("{ln_name}.gain"), &format!("{ln_name}.bias"));
                layernorm_backward(&trace.xhat[idx], trace.invstd[idx], &ln.gain, &g, &mut g_ln, gg, gbi);
            }
            let lin_input = if idx == 0 { &trace.pooled } else { &trace.dropped[0] };
            let mut gx = Vec::new();
            {
                let (gw, gb) =
                    grads.pair_mut(&format!("{lin_name}.weight"), &format!("{lin_name}.bias"));
                linear_backward(lin_input, &lin.w, &g_ln, &mut gx, gw, gb);
            }
            g = gx;
        }
        gap_backward(&g, bn_ch, bn_edge, &mut g_bottleneck);
    }

    // encoder chain
    let mut g = g_bottleneck;
    for i in (0..n).rev() {
        ssp_backward(&trace.enc_pre[i], &mut g);
        let layer = &net.enc[i];
        let x = if i == 0 { &trace.input } else { &trace.enc_act[i - 1] };
        let l_in = trace.sizes[i];
        let mut gx = Vec::new();
        let (gw, gb) = grads.pair_mut(&format!("enc{i}.weight"), &format!("enc{i}.bias"));
        conv3d_backward(x, layer.cin, l_in, &layer.w, layer.cout, layer.stride, &g, &mut gx, gw, gb);
        g = gx;
    }

    grads
}

impl Denoiser for TinyNet {
    /// The network denoises at the noise level it was trained for; the
    /// sigma argument is accepted for interface parity and ignored.
    fn denoise(&self, noisy: &VoxelGrid, _sigma: f64) -> Result<VoxelGrid> {
        Ok(net_forward_eval(self, noisy)?.reconstruction)
    }

    fn embed(&self, noisy: &VoxelGrid) -> Result<Vec<f64>> {
        Ok(net_forward_eval(self, noisy)?.latent)
    }

    fn embed_len(&self) -> usize {
        self.config.latent_len()
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Neural
    }
}

const CKPT_MAGIC: &[u8; 8] = b"TNET0001";

/// Named-tensor binary checkpoint plus a JSON config manifest sidecar.
pub fn save_checkpoint(net: &TinyNet, path: &std::path::Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    let tensors = net.tensors();
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, data) in &tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(data.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    let cfg = &net.config;
    let manifest = serde_json::json!({
        "format": "tinynet-v1",
        "widths": cfg.widths,
        "head": match cfg.head { HeadKind::None => "none", HeadKind::Property => "property" },
        "head_hidden": cfg.head_hidden,
        "dropout": cfg.dropout,
        "grid": {
            "edge_voxels": cfg.grid.edge_voxels,
            "resolution": cfg.grid.resolution,
            "channels": cfg.grid.channels.iter().map(|c| c.symbol()).collect::<Vec<_>>(),
            "gaussian_width": cfg.grid.gaussian_width,
        },
        "param_count": cfg.param_count(),
    });
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".config.json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<TinyNet> {
    use std::io::Read as _;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".config.json");
    let text = std::fs::read_to_string(&sidecar)?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| VoxError::Config(format!("bad checkpoint config: {e}")))?;
    let widths: Vec<usize> = doc["widths"]
        .as_array()
        .ok_or_else(|| VoxError::Config("missing widths".into()))?
        .iter()
        .map(|v| v.as_u64().unwrap_or(0) as usize)
        .collect();
    let head = match doc["head"].as_str() {
        Some("property") => HeadKind::Property,
        _ => HeadKind::None,
    };
    let g = &doc["grid"];
    let channels: Result<Vec<crate::mol_io::Element>> = g["channels"]
        .as_array()
        .ok_or_else(|| VoxError::Config("missing grid channels".into()))?
        .iter()
        .map(|v| crate::mol_io::Element::from_symbol(v.as_str().unwrap_or("?")))
        .collect();
    let grid = GridSpec::new(
        g["edge_voxels"].as_u64().unwrap_or(0) as usize,
        g["resolution"].as_f64().unwrap_or(0.0),
        channels?,
        g["gaussian_width"].as_f64().unwrap_or(0.0),
    )?;
    let mut config = NetConfig::new(widths, head, grid)?;
    if let Some(hh) = doc["head_hidden"].as_u64() {
        config.head_hidden = hh as usize;
    }
    if let Some(dp) = doc["dropout"].as_f64() {
        config.dropout = dp;
    }
    let mut net = TinyNet::init(config, 0)?;

    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(VoxError::Parse { line: 0, msg: "bad checkpoint magic".into() });
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut loaded: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for _ in 0..count {
        f.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        f.read_exact(&mut u32buf)?;
        let len = u32::from_le_bytes(u32buf) as usize;
        let mut buf = vec![0u8; len * 8];
        f.read_exact(&mut buf)?;
        let data: Vec<f64> =
            buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        loaded.insert(String::from_utf8_lossy(&name).into_owned(), data);
    }
    for (name, tensor) in net.tensors_mut() {
        let src = loaded
            .remove(&name)
            .ok_or_else(|| VoxError::Config(format!("checkpoint missing tensor {name}")))?;
        if src.len() != tensor.len() {
            return Err(VoxError::Shape(format!("tensor {name} length mismatch")));
        }
        *tensor = src;
    }
    Ok(net)
}
