//! Network descriptions, the six benchmark presets, operational-intensity
//! arithmetic, quantization and a naive integer reference forward pass.
//!
//! Tensors are laid out batch-major, then pixel (row-major), then channel:
//! `x[((b * h + y) * w + x) * c + ch]`. FC weights are `[in][out]`, conv
//! weights `[r][s][c][m]`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::funcsim::{activation_value, build_lut, div_round_half_away, OutFormat};
use crate::isa::{ActFn, ConvGeometry, PoolKind};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("layer {layer}: {reason}")]
    Invalid { layer: usize, reason: String },
    #[error("workload has no weights")]
    ZeroWeights,
    #[error("batch must be at least 1")]
    EmptyBatch,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("tensor container: {0}")]
    Container(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn act_fn(self) -> ActFn {
        match self {
            Activation::Identity => ActFn::Identity,
            Activation::Relu => ActFn::Relu,
            Activation::Sigmoid => ActFn::Sigmoid,
            Activation::Tanh => ActFn::Tanh,
        }
    }

    fn is_table(self) -> bool {
        matches!(self, Activation::Sigmoid | Activation::Tanh)
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolType {
    Max,
    Avg,
}

impl PoolType {
    pub fn kind(self) -> PoolKind {
        match self {
            PoolType::Max => PoolKind::Max,
            PoolType::Avg => PoolKind::Avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Fc {
        in_dim: u32,
        out_dim: u32,
    },
    Conv {
        in_channels: u32,
        out_channels: u32,
        kernel_h: u32,
        kernel_w: u32,
        image_h: u32,
        image_w: u32,
        stride: u32,
        pad: u32,
    },
    /// Elementwise layer; the operation is the layer's activation.
    Vector { dim: u32 },
    Pool {
        window: u32,
        stride: u32,
        pad: u32,
        kind: PoolType,
    },
}

fn default_bits() -> u8 {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub activation: Activation,
    /// 8 or 16.
    #[serde(default = "default_bits")]
    pub weight_bits: u8,
}

impl LayerSpec {
    pub fn fc(in_dim: u32, out_dim: u32, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Fc { in_dim, out_dim },
            activation,
            weight_bits: 8,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(c: u32, m: u32, k: u32, h: u32, w: u32, stride: u32, pad: u32, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv {
                in_channels: c,
                out_channels: m,
                kernel_h: k,
                kernel_w: k,
                image_h: h,
                image_w: w,
                stride,
                pad,
            },
            activation,
            weight_bits: 8,
        }
    }

    pub fn vector(dim: u32, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Vector { dim },
            activation,
            weight_bits: 8,
        }
    }

    pub fn pool(window: u32, stride: u32, pad: u32, kind: PoolType) -> Self {
        LayerSpec {
            kind: LayerKind::Pool {
                window,
                stride,
                pad,
                kind,
            },
            activation: Activation::Identity,
            weight_bits: 8,
        }
    }

    pub fn weight_count(&self) -> u64 {
        match self.kind {
            LayerKind::Fc { in_dim, out_dim } => u64::from(in_dim) * u64::from(out_dim),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => u64::from(in_channels) * u64::from(out_channels) * u64::from(kernel_h) * u64::from(kernel_w),
            _ => 0,
        }
    }

    pub fn weight_bytes(&self) -> u64 {
        self.weight_count() * u64::from(self.weight_bits) / 8
    }

    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::Fc { .. } | LayerKind::Conv { .. })
    }

    /// Window geometry for conv and pool layers given the input shape.
    pub fn geometry(&self, input: Shape) -> Option<Result<ConvGeometry, String>> {
        match self.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                image_h,
                image_w,
                stride,
                pad,
                ..
            } => Some(ConvGeometry::new(image_h, image_w, kernel_h, kernel_w, stride, pad)),
            LayerKind::Pool { window, stride, pad, .. } => {
                Some(ConvGeometry::new(input.h, input.w, window, window, stride, pad))
            }
            _ => None,
        }
    }
}

/// Per-example activation shape: channels over an `h x w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: u32,
    pub h: u32,
    pub w: u32,
}

impl Shape {
    pub fn flat(c: u32) -> Self {
        Shape { c, h: 1, w: 1 }
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.h) * u64::from(self.w)
    }

    pub fn elements(&self) -> u64 {
        self.pixels() * u64::from(self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub batch: u32,
    pub layers: Vec<LayerSpec>,
}

impl WorkloadSpec {
    pub fn from_json(text: &str) -> Result<Self, WorkloadError> {
        let ws: WorkloadSpec = serde_json::from_str(text)?;
        ws.shapes()?;
        Ok(ws)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workload serializes")
    }

    pub fn total_weights(&self) -> u64 {
        self.layers.iter().map(LayerSpec::weight_count).sum()
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.layers.iter().map(LayerSpec::weight_bytes).sum()
    }

    pub fn input_shape(&self) -> Result<Shape, WorkloadError> {
        let first = self.layers.first().ok_or(WorkloadError::Invalid {
            layer: 0,
            reason: "no layers".into(),
        })?;
        match first.kind {
            LayerKind::Fc { in_dim, .. } => Ok(Shape::flat(in_dim)),
            LayerKind::Conv {
                in_channels,
                image_h,
                image_w,
                ..
            } => Ok(Shape {
                c: in_channels,
                h: image_h,
                w: image_w,
            }),
            LayerKind::Vector { dim } => Ok(Shape::flat(dim)),
            LayerKind::Pool { .. } => Err(WorkloadError::Invalid {
                layer: 0,
                reason: "first layer cannot be a pool".into(),
            }),
        }
    }

    /// Activation shape entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, WorkloadError> {
        if self.batch == 0 {
            return Err(WorkloadError::EmptyBatch);
        }
        let mut cur = self.input_shape()?;
        let mut out = vec![cur];
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |reason: String| WorkloadError::Invalid { layer: i, reason };
            if l.weight_bits != 8 && l.weight_bits != 16 {
                return Err(bad(format!("weight_bits {} not 8 or 16", l.weight_bits)));
            }
            cur = match l.kind {
                LayerKind::Fc { in_dim, out_dim } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(bad("zero dimension".into()));
                    }
                    if cur.pixels() != 1 || cur.c != in_dim {
                        return Err(bad(format!("expects {in_dim} features, got {:?}", cur)));
                    }
                    Shape::flat(out_dim)
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    image_h,
                    image_w,
                    ..
                } => {
                    if in_channels == 0 || out_channels == 0 {
                        return Err(bad("zero dimension".into()));
                    }
                    if (cur.c, cur.h, cur.w) != (in_channels, image_h, image_w) {
                        return Err(bad(format!("input shape {:?} does not match", cur)));
                    }
                    let g = l.geometry(cur).expect("conv has geometry").map_err(bad)?;
                    Shape {
                        c: out_channels,
                        h: g.out_h(),
                        w: g.out_w(),
                    }
                }
                LayerKind::Vector { dim } => {
                    if dim != cur.c || dim == 0 {
                        return Err(bad(format!("vector dim {dim} does not match {} channels", cur.c)));
                    }
                    cur
                }
                LayerKind::Pool { .. } => {
                    let g = l.geometry(cur).expect("pool has geometry").map_err(bad)?;
                    Shape {
                        c: cur.c,
                        h: g.out_h(),
                        w: g.out_w(),
                    }
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Multiply-accumulates for one batch.
    pub fn total_macs(&self) -> Result<u64, WorkloadError> {
        let shapes = self.shapes()?;
        let b = u64::from(self.batch);
        Ok(self
            .layers
            .iter()
            .zip(shapes.iter().skip(1))
            .map(|(l, out)| match l.kind {
                LayerKind::Fc { .. } => b * l.weight_count(),
                LayerKind::Conv { .. } => b * out.pixels() * l.weight_count(),
                _ => 0,
            })
            .sum())
    }
}

/// MACs per weight byte read, one weight fetch per batch.
pub fn operational_intensity(ws: &WorkloadSpec) -> Result<f64, WorkloadError> {
    let bytes = ws.total_weight_bytes();
    if bytes == 0 {
        return Err(WorkloadError::ZeroWeights);
    }
    Ok(ws.total_macs()? as f64 / bytes as f64)
}

/// Intensity of just the FC layers, if any.
pub fn fc_intensity(ws: &WorkloadSpec) -> Option<f64> {
    let fc: Vec<_> = ws
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Fc { .. }))
        .collect();
    let bytes: u64 = fc.iter().map(|l| l.weight_bytes()).sum();
    (bytes > 0).then(|| fc.iter().map(|l| u64::from(ws.batch) * l.weight_count()).sum::<u64>() as f64 / bytes as f64)
}

pub const PRESET_NAMES: [&str; 6] = ["MLP0", "MLP1", "LSTM0", "LSTM1", "CNN0", "CNN1"];

/// Published per-application figures: intensity, batch and deployment share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub name: &'static str,
    pub intensity: f64,
    pub batch: u32,
    pub weights: f64,
    pub share: f64,
}

pub const PUBLISHED: [PublishedRow; 6] = [
    PublishedRow { name: "MLP0", intensity: 200.0, batch: 200, weights: 20e6, share: 0.305 },
    PublishedRow { name: "MLP1", intensity: 168.0, batch: 168, weights: 5e6, share: 0.305 },
    PublishedRow { name: "LSTM0", intensity: 64.0, batch: 64, weights: 52e6, share: 0.145 },
    PublishedRow { name: "LSTM1", intensity: 96.0, batch: 96, weights: 34e6, share: 0.145 },
    PublishedRow { name: "CNN0", intensity: 2888.0, batch: 8, weights: 8e6, share: 0.025 },
    PublishedRow { name: "CNN1", intensity: 1750.0, batch: 32, weights: 100e6, share: 0.025 },
];

pub fn published(name: &str) -> Option<&'static PublishedRow> {
    PUBLISHED.iter().find(|r| r.name.eq_ignore_ascii_case(name))
}

/// Deployment-share weights in preset order.
pub fn mix_weights() -> [f64; 6] {
    PUBLISHED.map(|r| r.share)
}

fn fc_stack(name: &str, batch: u32, dim: u32, n: usize) -> WorkloadSpec {
    WorkloadSpec {
        name: name.into(),
        batch,
        layers: (0..n).map(|_| LayerSpec::fc(dim, dim, Activation::Relu)).collect(),
    }
}

/// FC gate blocks with `n_vec` elementwise layers spread among them.
fn lstm(name: &str, batch: u32, dim: u32, n_fc: usize, n_vec: usize) -> WorkloadSpec {
    let mut layers = Vec::with_capacity(n_fc + n_vec);
    let mut placed = 0;
    for i in 0..n_fc {
        layers.push(LayerSpec::fc(dim, dim, Activation::Identity));
        let due = (i + 1) * n_vec / n_fc;
        while placed < due {
            let act = if placed % 2 == 0 {
                Activation::Sigmoid
            } else {
                Activation::Tanh
            };
            layers.push(LayerSpec::vector(dim, act));
            placed += 1;
        }
    }
    WorkloadSpec {
        name: name.into(),
        batch,
        layers,
    }
}

fn cnn0() -> WorkloadSpec {
    WorkloadSpec {
        name: "CNN0".into(),
        batch: 8,
        layers: (0..16)
            .map(|_| LayerSpec::conv(236, 236, 3, 19, 19, 1, 1, Activation::Relu))
            .collect(),
    }
}

fn cnn1() -> WorkloadSpec {
    let mut layers = Vec::with_capacity(89);
    for i in 0..72 {
        layers.push(LayerSpec::conv(288, 288, 3, 10, 10, 1, 1, Activation::Relu));
        if i % 6 == 5 {
            layers.push(LayerSpec::pool(3, 1, 1, PoolType::Max));
        }
    }
    layers.push(LayerSpec::pool(10, 1, 0, PoolType::Avg));
    layers.push(LayerSpec::fc(288, 4480, Activation::Relu));
    layers.push(LayerSpec::fc(4480, 4480, Activation::Relu));
    layers.push(LayerSpec::fc(4480, 4480, Activation::Relu));
    layers.push(LayerSpec::fc(4480, 1000, Activation::Identity));
    WorkloadSpec {
        name: "CNN1".into(),
        batch: 32,
        layers,
    }
}

pub fn make_preset(name: &str) -> Result<WorkloadSpec, WorkloadError> {
    match name.to_ascii_uppercase().as_str() {
        "MLP0" => Ok(fc_stack("MLP0", 200, 2000, 5)),
        "MLP1" => Ok(fc_stack("MLP1", 168, 1118, 4)),
        "LSTM0" => Ok(lstm("LSTM0", 64, 1472, 24, 34)),
        "LSTM1" => Ok(lstm("LSTM1", 96, 959, 37, 19)),
        "CNN0" => Ok(cnn0()),
        "CNN1" => Ok(cnn1()),
        _ => Err(WorkloadError::UnknownPreset(name.into())),
    }
}

pub fn all_presets() -> Vec<WorkloadSpec> {
    PRESET_NAMES.iter().map(|n| make_preset(n).expect("known preset")).collect()
}

/// Small random network whose dimensions scale with `dim`. It lowers on the
/// default configuration at `dim` 256 and on `TpuConfig::small(dim)` for
/// `dim` up to 16.
pub fn random_workload<R: Rng>(rng: &mut R, dim: u32) -> WorkloadSpec {
    let batch = rng.gen_range(1..=2 * dim + 3);
    let mut layers = Vec::new();
    let act = |rng: &mut R| match rng.gen_range(0..4) {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::Sigmoid,
        _ => Activation::Tanh,
    };
    if rng.gen_bool(0.5) {
        let mut f = rng.gen_range(1..=3 * dim);
        for _ in 0..rng.gen_range(1..=3) {
            let out = rng.gen_range(1..=3 * dim);
            let mut l = LayerSpec::fc(f, out, act(rng));
            if rng.gen_bool(0.2) {
                l.weight_bits = 16;
            }
            layers.push(l);
            f = out;
            if rng.gen_bool(0.3) {
                layers.push(LayerSpec::vector(f, act(rng)));
            }
        }
    } else {
        let mut c = rng.gen_range(1..=2 * dim);
        let (mut h, mut w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        for _ in 0..rng.gen_range(1..=2) {
            let k = rng.gen_range(1..=3u32.min(h).min(w));
            let pad = rng.gen_range(0..k);
            let stride = rng.gen_range(1..=2);
            let m = rng.gen_range(1..=2 * dim);
            let mut l = LayerSpec::conv(c, m, k, h, w, stride, pad, act(rng));
            if rng.gen_bool(0.15) {
                l.weight_bits = 16;
            }
            let g = l.geometry(Shape { c, h, w }).unwrap().unwrap();
            layers.push(l);
            c = m;
            h = g.out_h();
            w = g.out_w();
        }
        if rng.gen_bool(0.5) && h >= 2 && w >= 2 {
            let kind = if rng.gen_bool(0.5) { PoolType::Max } else { PoolType::Avg };
            layers.push(LayerSpec::pool(2, rng.gen_range(1..=2), rng.gen_range(0..2), kind));
            let out = layers.last().unwrap().geometry(Shape { c, h, w }).unwrap().unwrap();
            h = out.out_h();
            w = out.out_w();
        }
        if rng.gen_bool(0.4) {
            if h == w && h > 1 {
                layers.push(LayerSpec::pool(h, 1, 0, PoolType::Avg));
                h = 1;
                w = 1;
            }
            if h == 1 && w == 1 {
                layers.push(LayerSpec::fc(c, rng.gen_range(1..=2 * dim), act(rng)));
            }
        }
    }
    let mut ws = WorkloadSpec {
        name: "random".into(),
        batch,
        layers,
    };
    // keep every activation tensor resident at once within 384 * dim buffer rows
    let d = u64::from(dim);
    let per_example: u64 = ws
        .shapes()
        .expect("generated layers chain")
        .iter()
        .map(|s| u64::from(s.c).div_ceil(d) * s.pixels())
        .sum();
    ws.batch = ws.batch.min((384 * d / per_example).max(1) as u32);
    ws
}

/// Integer parameters of one layer. Weight values fit the layer's width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub weights: Vec<i16>,
    pub requant_scale: i32,
    pub requant_shift: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantModel {
    pub spec: WorkloadSpec,
    pub layers: Vec<QuantLayer>,
    /// Real value of one input code.
    pub input_scale: f64,
    /// Real value of one output code.
    pub output_scale: f64,
}

/// Every inter-layer activation is a signed 8-bit code.
pub const ACT_FORMAT: OutFormat = OutFormat {
    wide: false,
    signed: true,
};

/// Random integer parameters, for compiler and simulator tests.
pub fn random_quant_model<R: Rng>(spec: &WorkloadSpec, rng: &mut R) -> QuantModel {
    let layers = spec
        .layers
        .iter()
        .map(|l| {
            let lim: i16 = if l.weight_bits == 16 { 2000 } else { 127 };
            let weights = (0..l.weight_count()).map(|_| rng.gen_range(-lim..=lim)).collect();
            let (requant_scale, requant_shift) = if l.has_weights() {
                (rng.gen_range(1..=255), rng.gen_range(6..=14))
            } else {
                (rng.gen_range(1..=8), rng.gen_range(0..=3))
            };
            QuantLayer {
                weights,
                requant_scale,
                requant_shift,
            }
        })
        .collect();
    QuantModel {
        spec: spec.clone(),
        layers,
        input_scale: 1.0,
        output_scale: 1.0,
    }
}

/// Random signed 8-bit input codes for a batch.
pub fn random_input<R: Rng>(spec: &WorkloadSpec, rng: &mut R) -> Vec<i8> {
    let n = spec.input_shape().map(|s| s.elements()).unwrap_or(0) * u64::from(spec.batch);
    (0..n).map(|_| rng.gen()).collect()
}

fn conv_loop<F: FnMut(usize, usize, usize, usize)>(batch: usize, g: &ConvGeometry, mut f: F) {
    for b in 0..batch {
        for oy in 0..g.out_h() {
            for ox in 0..g.out_w() {
                let o = (b * g.out_h() as usize + oy as usize) * g.out_w() as usize + ox as usize;
                for dr in 0..g.r {
                    for ds in 0..g.s {
                        if let Some((iy, ix)) = g.source(oy, ox, dr, ds) {
                            let i = (b * g.h as usize + iy as usize) * g.w as usize + ix as usize;
                            f(o, i, (dr * g.s + ds) as usize, 0);
                        }
                    }
                }
            }
        }
    }
}

/// Straight-line integer inference: wrapped 32-bit accumulation, then
/// requantize, activate, pool and saturate to signed 8 bits.
pub fn reference_forward(model: &QuantModel, input: &[i8]) -> Result<Vec<i8>, WorkloadError> {
    let spec = &model.spec;
    let shapes = spec.shapes()?;
    let batch = spec.batch as usize;
    let mut x: Vec<i64> = input.iter().map(|v| i64::from(*v)).collect();
    if x.len() as u64 != shapes[0].elements() * batch as u64 {
        return Err(WorkloadError::Invalid {
            layer: 0,
            reason: format!("input has {} values", x.len()),
        });
    }
    for (li, (l, q)) in spec.layers.iter().zip(&model.layers).enumerate() {
        let (inp, out) = (shapes[li], shapes[li + 1]);
        let func = l.activation.act_fn();
        let lut = l.activation.is_table().then(|| build_lut(func, ACT_FORMAT));
        let act = |v: i64| activation_value(v, func, q.requant_scale, q.requant_shift, lut.as_ref());
        let w: Vec<i64> = q.weights.iter().map(|v| i64::from(*v)).collect();
        x = match l.kind {
            LayerKind::Fc { in_dim, out_dim } => {
                let (k, n) = (in_dim as usize, out_dim as usize);
                let mut y = vec![0i64; batch * n];
                for b in 0..batch {
                    for o in 0..n {
                        let s: i64 = (0..k).map(|i| x[b * k + i] * w[i * n + o]).sum();
                        y[b * n + o] = act(i64::from(s as i32));
                    }
                }
                y
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                ..
            } => {
                let (c, m) = (in_channels as usize, out_channels as usize);
                let g = l.geometry(inp).unwrap().expect("validated geometry");
                let mut acc = vec![0i64; batch * out.pixels() as usize * m];
                conv_loop(batch, &g, |o, i, tap, _| {
                    for mm in 0..m {
                        let mut s = 0i64;
                        for cc in 0..c {
                            s += x[i * c + cc] * w[(tap * c + cc) * m + mm];
                        }
                        acc[o * m + mm] += s;
                    }
                });
                acc.into_iter().map(|s| act(i64::from(s as i32))).collect()
            }
            LayerKind::Vector { .. } => x.iter().map(|v| act(*v)).collect(),
            LayerKind::Pool { kind, .. } => {
                let g = l.geometry(inp).unwrap().expect("validated geometry");
                let c = inp.c as usize;
                let pre: Vec<i64> = x.iter().map(|v| act(*v)).collect();
                let mut best = vec![i64::MIN; batch * out.pixels() as usize * c];
                let mut sum = vec![0i128; best.len()];
                let mut cnt = vec![0i128; batch * out.pixels() as usize];
                conv_loop(batch, &g, |o, i, _, _| {
                    cnt[o] += 1;
                    for cc in 0..c {
                        best[o * c + cc] = best[o * c + cc].max(pre[i * c + cc]);
                        sum[o * c + cc] += i128::from(pre[i * c + cc]);
                    }
                });
                match kind {
                    PoolType::Max => best,
                    PoolType::Avg => sum
                        .iter()
                        .enumerate()
                        .map(|(k, s)| div_round_half_away(*s, cnt[k / c].max(1)) as i64)
                        .collect(),
                }
            }
        };
        x.iter_mut().for_each(|v| *v = ACT_FORMAT.saturate(*v));
    }
    Ok(x.into_iter().map(|v| v as i8).collect())
}

/// Real-valued parameters in the same layouts as [`QuantLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub spec: WorkloadSpec,
    pub weights: Vec<Vec<f32>>,
}

impl FloatModel {
    pub fn random<R: Rng>(spec: &WorkloadSpec, rng: &mut R) -> Self {
        let shapes = spec.shapes().expect("valid spec");
        let weights = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| {
                let fan_in = match l.kind {
                    LayerKind::Conv { kernel_h, kernel_w, .. } => s.c * kernel_h * kernel_w,
                    _ => s.c,
                };
                let bound = (3.0 / f64::from(fan_in.max(1))).sqrt() as f32;
                (0..l.weight_count()).map(|_| rng.gen_range(-bound..=bound)).collect()
            })
            .collect();
        FloatModel {
            spec: spec.clone(),
            weights,
        }
    }

    /// Output of every layer (index 0 is the input itself).
    pub fn forward_all(&self, input: &[f32]) -> Result<Vec<Vec<f64>>, WorkloadError> {
        let spec = &self.spec;
        let shapes = spec.shapes()?;
        let batch = spec.batch as usize;
        let mut x: Vec<f64> = input.iter().map(|v| f64::from(*v)).collect();
        if x.iter().any(|v| !v.is_finite()) || self.weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(WorkloadError::Invalid {
                layer: 0,
                reason: "non-finite value".into(),
            });
        }
        let mut all = vec![x.clone()];
        for (li, l) in spec.layers.iter().enumerate() {
            let (inp, out) = (shapes[li], shapes[li + 1]);
            let w: Vec<f64> = self.weights[li].iter().map(|v| f64::from(*v)).collect();
            let a = l.activation;
            x = match l.kind {
                LayerKind::Fc { in_dim, out_dim } => {
                    let (k, n) = (in_dim as usize, out_dim as usize);
                    let mut y = vec![0.0; batch * n];
                    for b in 0..batch {
                        for o in 0..n {
                            y[b * n + o] = a.apply((0..k).map(|i| x[b * k + i] * w[i * n + o]).sum());
                        }
                    }
                    y
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let (c, m) = (in_channels as usize, out_channels as usize);
                    let g = l.geometry(inp).unwrap().expect("validated geometry");
                    let mut acc = vec![0.0; batch * out.pixels() as usize * m];
                    conv_loop(batch, &g, |o, i, tap, _| {
                        for mm in 0..m {
                            for cc in 0..c {
                                acc[o * m + mm] += x[i * c + cc] * w[(tap * c + cc) * m + mm];
                            }
                        }
                    });
                    acc.into_iter().map(|v| a.apply(v)).collect()
                }
                LayerKind::Vector { .. } => x.iter().map(|v| a.apply(*v)).collect(),
                LayerKind::Pool { kind, .. } => {
                    let g = l.geometry(inp).unwrap().expect("validated geometry");
                    let c = inp.c as usize;
                    let pre: Vec<f64> = x.iter().map(|v| a.apply(*v)).collect();
                    let n = batch * out.pixels() as usize;
                    let mut best = vec![f64::NEG_INFINITY; n * c];
                    let mut sum = vec![0.0; n * c];
                    let mut cnt = vec![0.0; n];
                    conv_loop(batch, &g, |o, i, _, _| {
                        cnt[o] += 1.0;
                        for cc in 0..c {
                            best[o * c + cc] = best[o * c + cc].max(pre[i * c + cc]);
                            sum[o * c + cc] += pre[i * c + cc];
                        }
                    });
                    match kind {
                        PoolType::Max => best,
                        PoolType::Avg => sum.iter().enumerate().map(|(k, s)| s / cnt[k / c]).collect(),
                    }
                }
            };
            all.push(x.clone());
        }
        Ok(all)
    }
}

/// Symmetric scale mapping `max_abs` onto 127; 1 for an all-zero tensor.
pub fn symmetric_scale(values: impl IntoIterator<Item = f64>, qmax: f64) -> f64 {
    let m = values.into_iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / qmax
    }
}

/// Fixed-point multiplier: `round(v * m) ~= (v * scale) >> shift`.
pub fn fixed_point(m: f64) -> (i32, u32) {
    if m <= 0.0 || !m.is_finite() {
        return (0, 0);
    }
    let e = m.log2().floor() as i32;
    let shift = (29 - e).clamp(0, 62) as u32;
    let scale = (m * 2f64.powi(shift as i32)).round().min(f64::from(i32::MAX));
    (scale as i32, shift)
}

/// Lookup-table input step in real units.
const TABLE_IN: f64 = 1.0 / 16.0;
/// Signed 8-bit table output step in real units.
const TABLE_OUT: f64 = 1.0 / 128.0;

pub fn quantize_tensor(values: &[f32], scale: f64, qmax: i64) -> Vec<i64> {
    values
        .iter()
        .map(|v| ((f64::from(*v) / scale).round() as i64).clamp(-qmax, qmax))
        .collect()
}

/// Per-tensor symmetric quantization, with activation ranges taken from a
/// float pass over `calibration` (one batch of inputs).
pub fn quantize(model: &FloatModel, calibration: &[f32]) -> Result<QuantModel, WorkloadError> {
    let outs = model.forward_all(calibration)?;
    let mut s_x = symmetric_scale(outs[0].iter().copied(), 127.0);
    let input_scale = s_x;
    let mut layers = Vec::with_capacity(model.spec.layers.len());
    for (li, l) in model.spec.layers.iter().enumerate() {
        let qmax = if l.weight_bits == 16 { 32767.0 } else { 127.0 };
        let s_w = if l.has_weights() {
            symmetric_scale(model.weights[li].iter().map(|v| f64::from(*v)), qmax)
        } else {
            1.0
        };
        let weights: Vec<i16> = quantize_tensor(&model.weights[li], s_w, qmax as i64)
            .into_iter()
            .map(|v| v as i16)
            .collect();
        let acc_scale = s_x * s_w;
        let (m, s_y) = if l.activation.is_table() {
            (acc_scale / TABLE_IN, TABLE_OUT)
        } else if matches!(l.kind, LayerKind::Pool { .. } | LayerKind::Vector { .. }) {
            (1.0, s_x)
        } else {
            let s_y = symmetric_scale(outs[li + 1].iter().copied(), 127.0);
            (acc_scale / s_y, s_y)
        };
        let (requant_scale, requant_shift) = fixed_point(m);
        layers.push(QuantLayer {
            weights,
            requant_scale,
            requant_shift,
        });
        s_x = s_y;
    }
    Ok(QuantModel {
        spec: model.spec.clone(),
        layers,
        input_scale,
        output_scale: s_x,
    })
}

impl QuantModel {
    pub fn quantize_input(&self, x: &[f32]) -> Vec<i8> {
        quantize_tensor(x, self.input_scale, 127)
            .into_iter()
            .map(|v| v as i8)
            .collect()
    }

    pub fn dequantize_output(&self, y: &[i8]) -> Vec<f64> {
        y.iter().map(|v| f64::from(*v) * self.output_scale).collect()
    }
}

/// One named tensor in a container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// "f32", "i8", "i16" or "i32".
    pub dtype: String,
    pub shape: Vec<u64>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Typed tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I8(_) => "i8",
            TensorData::I16(_) => "i16",
            TensorData::I32(_) => "i32",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn to_le(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|x| *x as u8).collect(),
            TensorData::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

fn elem_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" | "i32" => Some(4),
        "i16" => Some(2),
        "i8" => Some(1),
        _ => None,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkloadError + '_ {
    move |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<manifest>` (JSON) and a sibling little-endian blob.
pub fn save_tensors(manifest: &Path, tensors: &[(String, Vec<u64>, TensorData)]) -> Result<(), WorkloadError> {
    let blob_name = format!(
        "{}.bin",
        manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("tensors")
    );
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in tensors {
        if shape.iter().product::<u64>() != data.len() as u64 {
            return Err(WorkloadError::Container(format!("{name}: shape does not match data")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: data.dtype().into(),
            shape: shape.clone(),
            offset: blob.len() as u64,
        });
        blob.extend(data.to_le());
    }
    let m = TensorManifest {
        blob: blob_name.clone(),
        tensors: entries,
    };
    let blob_path = manifest.with_file_name(&blob_name);
    std::fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    std::fs::write(manifest, serde_json::to_string_pretty(&m)?).map_err(io_err(manifest))?;
    Ok(())
}

pub fn load_tensors(manifest: &Path) -> Result<Vec<(String, Vec<u64>, TensorData)>, WorkloadError> {
    let text = std::fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let m: TensorManifest = serde_json::from_str(&text)?;
    let blob_path = manifest.with_file_name(&m.blob);
    let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let mut out = Vec::new();
    for e in m.tensors {
        let size = elem_size(&e.dtype).ok_or_else(|| WorkloadError::Container(format!("dtype {}", e.dtype)))?;
        let n = e.shape.iter().product::<u64>() as usize;
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + n * size)
            .ok_or_else(|| WorkloadError::Container(format!("{}: out of range", e.name)))?;
        let data = match e.dtype.as_str() {
            "f32" => TensorData::F32(bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            "i32" => TensorData::I32(bytes.chunks(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            "i16" => TensorData::I16(bytes.chunks(2).map(|c| i16::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::I8(bytes.iter().map(|b| *b as i8).collect()),
        };
        out.push((e.name, e.shape, data));
    }
    Ok(out)
}

/// Loads float weights named `layer<i>` for every weighted layer of `spec`.
pub fn load_float_model(spec: &WorkloadSpec, manifest: &Path) -> Result<FloatModel, WorkloadError> {
    let tensors = load_tensors(manifest)?;
    let mut weights = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if !l.has_weights() {
            weights.push(Vec::new());
            continue;
        }
        let name = format!("layer{i}");
        let (_, _, data) = tensors
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| WorkloadError::Container(format!("missing {name}")))?;
        match data {
            TensorData::F32(v) if v.len() as u64 == l.weight_count() => weights.push(v.clone()),
            _ => return Err(WorkloadError::Container(format!("{name}: wrong dtype or size"))),
        }
    }
    Ok(FloatModel {
        spec: spec.clone(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct loop-nest MAC count.
    fn brute_macs(ws: &WorkloadSpec) -> u64 {
        let shapes = ws.shapes().unwrap();
        let mut total = 0u64;
        for (l, inp) in ws.layers.iter().zip(&shapes) {
            match l.kind {
                LayerKind::Fc { in_dim, out_dim } => {
                    for _ in 0..ws.batch {
                        for _ in 0..in_dim {
                            total += u64::from(out_dim);
                        }
                    }
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let g = l.geometry(*inp).unwrap().unwrap();
                    let mut cnt = 0u64;
                    conv_loop(1, &g, |_, _, _, _| cnt += 1);
                    // conv_loop skips padded taps; count every tap position
                    let full = u64::from(g.out_h()) * u64::from(g.out_w()) * u64::from(g.r * g.s);
                    assert!(cnt <= full);
                    total += u64::from(ws.batch) * full * u64::from(in_channels) * u64::from(out_channels);
                }
                _ => {}
            }
        }
        total
    }

    #[test]
    fn conv_intensity_matches_loop_count() {
        let ws = WorkloadSpec {
            name: "c".into(),
            batch: 8,
            layers: vec![LayerSpec::conv(8, 8, 3, 16, 16, 1, 0, Activation::Relu)],
        };
        assert_eq!(ws.total_macs().unwrap(), brute_macs(&ws));
        assert_eq!(operational_intensity(&ws).unwrap(), 1568.0);
    }

    #[test]
    fn fc_intensity_is_batch() {
        for b in [1, 7, 200, 1000] {
            let ws = fc_stack("f", b, 37, 3);
            assert_eq!(operational_intensity(&ws).unwrap(), f64::from(b));
        }
    }

    #[test]
    fn presets_match_published_aggregates() {
        for (ws, row) in all_presets().iter().zip(PUBLISHED.iter()) {
            assert_eq!(ws.name, row.name);
            assert_eq!(ws.batch, row.batch);
            let i = operational_intensity(ws).unwrap();
            assert!((i - row.intensity).abs() / row.intensity <= 0.05, "{} {i}", ws.name);
            let w = ws.total_weights() as f64;
            assert!((w - row.weights).abs() / row.weights <= 0.05, "{} {w}", ws.name);
            assert_eq!(ws.total_macs().unwrap(), brute_macs(ws));
        }
    }

    #[test]
    fn preset_layer_counts() {
        let counts = |ws: &WorkloadSpec| {
            let mut c = [0usize; 4];
            for l in &ws.layers {
                c[match l.kind {
                    LayerKind::Fc { .. } => 0,
                    LayerKind::Conv { .. } => 1,
                    LayerKind::Vector { .. } => 2,
                    LayerKind::Pool { .. } => 3,
                }] += 1;
            }
            c
        };
        assert_eq!(counts(&make_preset("MLP0").unwrap()), [5, 0, 0, 0]);
        assert_eq!(counts(&make_preset("MLP1").unwrap()), [4, 0, 0, 0]);
        assert_eq!(counts(&make_preset("LSTM0").unwrap()), [24, 0, 34, 0]);
        assert_eq!(counts(&make_preset("LSTM1").unwrap()), [37, 0, 19, 0]);
        assert_eq!(counts(&make_preset("CNN0").unwrap()), [0, 16, 0, 0]);
        let c1 = make_preset("CNN1").unwrap();
        assert_eq!(counts(&c1), [4, 72, 0, 13]);
        assert_eq!(c1.layers.len(), 89);
        assert_eq!(fc_intensity(&c1), Some(32.0));
        assert!(make_preset("RNN9").is_err());
    }

    #[test]
    fn mlp0_totals() {
        let ws = make_preset("mlp0").unwrap();
        assert_eq!(ws.total_weights(), 20_000_000);
        assert_eq!(operational_intensity(&ws).unwrap(), 200.0);
    }

    #[test]
    fn json_round_trip() {
        let ws = make_preset("CNN1").unwrap();
        assert_eq!(WorkloadSpec::from_json(&ws.to_json()).unwrap(), ws);
        let text = r#"{"name":"x","batch":2,"layers":[{"type":"fc","in_dim":3,"out_dim":4,"activation":"relu"}]}"#;
        let ws = WorkloadSpec::from_json(text).unwrap();
        assert_eq!(ws.layers[0].weight_bits, 8);
        let bad = r#"{"name":"x","batch":2,"layers":[{"type":"fc","in_dim":3,"out_dim":4},{"type":"fc","in_dim":5,"out_dim":1}]}"#;
        assert!(matches!(WorkloadSpec::from_json(bad), Err(WorkloadError::Invalid { layer: 1, .. })));
    }

    #[test]
    fn zero_weight_workload_is_error() {
        let ws = WorkloadSpec {
            name: "v".into(),
            batch: 4,
            layers: vec![LayerSpec::vector(8, Activation::Relu)],
        };
        assert!(matches!(operational_intensity(&ws), Err(WorkloadError::ZeroWeights)));
    }

    #[test]
    fn weight_count_matches_generated_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ws = random_workload(&mut rng, 8);
            let fm = FloatModel::random(&ws, &mut rng);
            let n: usize = fm.weights.iter().map(Vec::len).sum();
            assert_eq!(n as u64, ws.total_weights());
        }
    }

    #[test]
    fn random_workloads_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let ws = random_workload(&mut rng, 4);
            ws.shapes().unwrap();
        }
    }

    #[test]
    fn zero_tensor_gets_unit_scale() {
        assert_eq!(symmetric_scale([0.0, 0.0], 127.0), 1.0);
        assert_eq!(quantize_tensor(&[0.0, 0.0], 1.0, 127), vec![0, 0]);
    }

    #[test]
    fn grid_values_round_trip() {
        let w = [-1.0f32, 0.0, 1.0, 1.0, -1.0];
        let s = symmetric_scale(w.iter().map(|v| f64::from(*v)), 127.0);
        assert_eq!(s, 1.0 / 127.0);
        let q = quantize_tensor(&w, s, 127);
        assert_eq!(q, vec![-127, 0, 127, 127, -127]);
        let back: Vec<f32> = q.iter().map(|v| (*v as f64 * s) as f32).collect();
        assert_eq!(back, w);
    }

    #[test]
    fn fixed_point_close() {
        for m in [1e-6, 0.0123, 0.5, 1.0, 3.7, 1000.0] {
            let (s, sh) = fixed_point(m);
            let approx = f64::from(s) / 2f64.powi(sh as i32);
            assert!((approx - m).abs() / m < 1e-6, "{m} {approx}");
        }
    }

    #[test]
    fn quantized_fc_net_tracks_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ws = WorkloadSpec {
            name: "q".into(),
            batch: 16,
            layers: vec![
                LayerSpec::fc(32, 48, Activation::Relu),
                LayerSpec::fc(48, 10, Activation::Identity),
            ],
        };
        let fm = FloatModel::random(&ws, &mut rng);
        let x: Vec<f32> = (0..16 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qm = quantize(&fm, &x).unwrap();
        let float_out = fm.forward_all(&x).unwrap().pop().unwrap();
        let q_out = qm.dequantize_output(&reference_forward(&qm, &qm.quantize_input(&x)).unwrap());
        let lo = float_out.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = float_out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let err = float_out.iter().zip(&q_out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 0.05 * (hi - lo), "err {err} range {}", hi - lo);
    }

    #[test]
    fn reference_single_fc() {
        let ws = WorkloadSpec {
            name: "t".into(),
            batch: 1,
            layers: vec![LayerSpec::fc(2, 2, Activation::Relu)],
        };
        let qm = QuantModel {
            spec: ws,
            layers: vec![QuantLayer {
                weights: vec![1, -2, 3, 4],
                requant_scale: 1,
                requant_shift: 0,
            }],
            input_scale: 1.0,
            output_scale: 1.0,
        };
        // y0 = 5*1 + 6*3 = 23, y1 = 5*-2 + 6*4 = 14
        assert_eq!(reference_forward(&qm, &[5, 6]).unwrap(), vec![23, 14]);
        assert_eq!(reference_forward(&qm, &[-5, -6]).unwrap(), vec![0, 0]);
        assert_eq!(reference_forward(&qm, &[100, 100]).unwrap(), vec![127, 127]);
    }

    #[test]
    fn tensor_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let t = vec![
            ("layer0".to_string(), vec![2, 3], TensorData::F32(vec![0.5, -1.0, 2.0, 0.0, 1.5, -3.25])),
            ("codes".to_string(), vec![3], TensorData::I8(vec![-1, 0, 127])),
            ("wide".to_string(), vec![2], TensorData::I16(vec![-300, 300])),
        ];
        save_tensors(&path, &t).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), t);
        let ws = WorkloadSpec {
            name: "x".into(),
            batch: 1,
            layers: vec![LayerSpec::fc(2, 3, Activation::Relu)],
        };
        assert_eq!(load_float_model(&ws, &path).unwrap().weights[0].len(), 6);
    }
}
