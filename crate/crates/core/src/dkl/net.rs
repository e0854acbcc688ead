//! Convolutional embedding network with hand-written backpropagation.
//!
//! Layout: 1-D valid convolution (stride 1) → activation → non-overlapping
//! average pooling → flatten (position-major) → dense hidden layers with the
//! activation → linear output of `embedding_dim`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use super::DklError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn slope(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingNetConfig {
    /// Samples per input curve.
    pub input_len: usize,
    pub conv_filters: usize,
    pub kernel_width: usize,
    pub pool: usize,
    pub dense_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for EmbeddingNetConfig {
    fn default() -> Self {
        Self {
            input_len: crate::waveform::GENE_COUNT,
            conv_filters: 128,
            kernel_width: 5,
            pool: 4,
            dense_widths: vec![64],
            embedding_dim: 2,
            activation: Activation::Relu,
        }
    }
}

impl EmbeddingNetConfig {
    pub fn validate(&self) -> Result<(), DklError> {
        let bad = |m: String| Err(DklError::InvalidConfig(m));
        if self.embedding_dim == 0 || self.conv_filters == 0 || self.kernel_width == 0 || self.pool == 0 {
            return bad("embedding_dim, conv_filters, kernel_width and pool must be positive".into());
        }
        if self.dense_widths.iter().any(|&w| w == 0) {
            return bad("dense widths must be positive".into());
        }
        if self.input_len < self.kernel_width + self.pool - 1 {
            return bad(format!(
                "input_len {} too short for kernel width {} and pooling {}",
                self.input_len, self.kernel_width, self.pool
            ));
        }
        Ok(())
    }

    fn conv_len(&self) -> usize {
        self.input_len - self.kernel_width + 1
    }

    fn pooled_len(&self) -> usize {
        self.conv_len() / self.pool
    }

    fn flat_len(&self) -> usize {
        self.pooled_len() * self.conv_filters
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NetLayout {
    pub conv_w: usize,
    pub conv_b: usize,
    /// `(weights, bias, fan_in, fan_out)` per dense layer, output layer last.
    pub dense: Vec<(usize, usize, usize, usize)>,
    pub len: usize,
}

impl NetLayout {
    pub fn new(cfg: &EmbeddingNetConfig) -> Self {
        let (w, f) = (cfg.kernel_width, cfg.conv_filters);
        let conv_w = 0;
        let conv_b = w * f;
        let mut at = conv_b + f;
        let mut fan_in = cfg.flat_len();
        let mut dense = Vec::new();
        for &width in cfg.dense_widths.iter().chain(std::iter::once(&cfg.embedding_dim)) {
            let weights = at;
            let bias = weights + fan_in * width;
            dense.push((weights, bias, fan_in, width));
            at = bias + width;
            fan_in = width;
        }
        Self {
            conv_w,
            conv_b,
            dense,
            len: at,
        }
    }
}

/// He-uniform for layers followed by the activation, Glorot-uniform for the
/// linear output layer; zero biases.
pub(crate) fn init_params<R: Rng + ?Sized>(cfg: &EmbeddingNetConfig, layout: &NetLayout, rng: &mut R) -> Vec<f64> {
    let mut p = vec![0.0; layout.len];
    let fill = |p: &mut [f64], bound: f64, rng: &mut R| {
        for v in p.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    };
    let conv_bound = (6.0 / cfg.kernel_width as f64).sqrt();
    fill(&mut p[layout.conv_w..layout.conv_b], conv_bound, rng);
    let last = layout.dense.len() - 1;
    for (l, &(w, b, fan_in, fan_out)) in layout.dense.iter().enumerate() {
        let bound = if l == last {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        } else {
            (6.0 / fan_in as f64).sqrt()
        };
        fill(&mut p[w..b], bound, rng);
    }
    p
}

/// Unfolds each input row into `conv_len × kernel_width` windows.
pub(crate) fn im2col(cfg: &EmbeddingNetConfig, inputs: &[&[f64]]) -> Vec<f64> {
    let (tc, w) = (cfg.conv_len(), cfg.kernel_width);
    let mut patches = vec![0.0; inputs.len() * tc * w];
    for (i, x) in inputs.iter().enumerate() {
        for t in 0..tc {
            let row = (i * tc + t) * w;
            patches[row..row + w].copy_from_slice(&x[t..t + w]);
        }
    }
    patches
}

/// Intermediate values kept for the backward pass, plus scratch space. A trace
/// can be reused across calls so training does not reallocate per iteration.
#[derive(Default)]
pub(crate) struct ForwardTrace {
    /// Inputs to each dense layer, then the final output.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden dense layers.
    hidden_pre: Vec<Vec<f64>>,
    conv: Vec<f64>,
    d_conv: Vec<f64>,
    delta: Vec<f64>,
    d_input: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.layer_inputs.last().expect("trace holds the output")
    }
}

fn zeroed(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    buf.clear();
    buf.resize(len, 0.0);
    buf
}

/// Conv pre-activations of row `i`, `conv_len × filters`, into `out`. Rows are
/// processed one at a time so the full-length activations never coexist.
fn conv_sample(cfg: &EmbeddingNetConfig, layout: &NetLayout, params: &[f64], patches: &[f64], i: usize, out: &mut [f64]) {
    let (tc, w, f) = (cfg.conv_len(), cfg.kernel_width, cfg.conv_filters);
    let bias = &params[layout.conv_b..layout.conv_b + f];
    for row in out.chunks_exact_mut(f) {
        row.copy_from_slice(bias);
    }
    let rows = &patches[i * tc * w..(i + 1) * tc * w];
    gemm(tc, w, f, 1.0, rows, false, &params[layout.conv_w..layout.conv_b], false, 1.0, out);
}

/// Average-pools activated conv rows (`pool` rows of width `f` per output row).
fn pool_rows(conv: &[f64], out: &mut [f64], f: usize, pool: usize, act: impl Fn(f64) -> f64) {
    let inv = 1.0 / pool as f64;
    for (dst, window) in out.chunks_exact_mut(f).zip(conv.chunks_exact(pool * f)) {
        dst.fill(0.0);
        for src in window.chunks_exact(f) {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += act(v);
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
}

/// Spreads pooled gradients back over their windows, times the activation slope.
fn unpool_rows<T>(d_pooled: &[f64], conv: &[T], d_conv: &mut [f64], f: usize, pool: usize, slope: impl Fn(&T) -> f64) {
    let inv = 1.0 / pool as f64;
    for ((src, window), dst) in d_pooled
        .chunks_exact(f)
        .zip(conv.chunks_exact(pool * f))
        .zip(d_conv.chunks_exact_mut(pool * f))
    {
        for (pre, d) in window.chunks_exact(f).zip(dst.chunks_exact_mut(f)) {
            for ((d, &g), p) in d.iter_mut().zip(src).zip(pre) {
                *d = g * inv * slope(p);
            }
        }
    }
}

/// Forward pass over `m` rows given their im2col patches. Output is row-major
/// `m × embedding_dim`.
pub(crate) fn forward(
    cfg: &EmbeddingNetConfig,
    layout: &NetLayout,
    params: &[f64],
    patches: &[f64],
    m: usize,
) -> ForwardTrace {
    let mut trace = ForwardTrace::default();
    forward_into(cfg, layout, params, patches, m, &mut trace);
    trace
}

/// [`forward`] writing into an existing trace.
pub(crate) fn forward_into(
    cfg: &EmbeddingNetConfig,
    layout: &NetLayout,
    params: &[f64],
    patches: &[f64],
    m: usize,
    trace: &mut ForwardTrace,
) {
    let (tc, f, pool, s) = (cfg.conv_len(), cfg.conv_filters, cfg.pool, cfg.pooled_len());
    let act = cfg.activation;
    let layers = layout.dense.len();
    trace.layer_inputs.resize_with(layers + 1, Vec::new);
    trace.hidden_pre.resize_with(layers - 1, Vec::new);

    let flat = s * f;
    let pooled = &mut trace.layer_inputs[0];
    pooled.resize(m * flat, 0.0);
    let conv = zeroed(&mut trace.conv, tc * f);
    for i in 0..m {
        conv_sample(cfg, layout, params, patches, i, conv);
        let out = &mut pooled[i * flat..(i + 1) * flat];
        match act {
            Activation::Relu => pool_rows(conv, out, f, pool, |v| v.max(0.0)),
            Activation::Tanh => pool_rows(conv, out, f, pool, f64::tanh),
        }
    }

    for (l, &(wo, bo, fan_in, fan_out)) in layout.dense.iter().enumerate() {
        let (inputs, rest) = trace.layer_inputs.split_at_mut(l + 1);
        let input = &inputs[l];
        let out = zeroed(&mut rest[0], m * fan_out);
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(&params[bo..bo + fan_out]);
        }
        gemm(m, fan_in, fan_out, 1.0, input, false, &params[wo..bo], false, 1.0, out);
        if l + 1 < layers {
            let pre = &mut trace.hidden_pre[l];
            pre.clear();
            pre.extend_from_slice(out);
            for v in out.iter_mut() {
                *v = act.apply(*v);
            }
        }
    }
}

/// Writes `∂objective/∂params` into `grad` given `∂objective/∂output`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    cfg: &EmbeddingNetConfig,
    layout: &NetLayout,
    params: &[f64],
    patches: &[f64],
    m: usize,
    trace: &mut ForwardTrace,
    d_out: &[f64],
    grad: &mut [f64],
) {
    let (tc, w, f, pool, s) = (cfg.conv_len(), cfg.kernel_width, cfg.conv_filters, cfg.pool, cfg.pooled_len());
    let act = cfg.activation;

    let mut delta = std::mem::take(&mut trace.delta);
    let mut d_input = std::mem::take(&mut trace.d_input);
    delta.clear();
    delta.extend_from_slice(d_out);
    for l in (0..layout.dense.len()).rev() {
        let (wo, bo, fan_in, fan_out) = layout.dense[l];
        if l + 1 < layout.dense.len() {
            for (d, &pre) in delta.iter_mut().zip(&trace.hidden_pre[l]) {
                *d *= act.slope(pre);
            }
        }
        let input = &trace.layer_inputs[l];
        gemm(fan_in, m, fan_out, 1.0, input, true, &delta, false, 0.0, &mut grad[wo..bo]);
        grad[bo..bo + fan_out].fill(0.0);
        for row in delta.chunks_exact(fan_out) {
            for (g, &d) in grad[bo..bo + fan_out].iter_mut().zip(row) {
                *g += d;
            }
        }
        let out = zeroed(&mut d_input, m * fan_in);
        gemm(m, fan_out, fan_in, 1.0, &delta, false, &params[wo..bo], true, 0.0, out);
        std::mem::swap(&mut delta, &mut d_input);
    }

    // delta is now ∂/∂pooled, m × (s·f); spread back over the pooling windows
    // after recomputing each row's conv pre-activations.
    let flat = s * f;
    let used = s * pool;
    let conv = zeroed(&mut trace.conv, tc * f);
    let d_conv = zeroed(&mut trace.d_conv, used * f);
    let (conv_grad, rest) = grad[layout.conv_w..].split_at_mut(layout.conv_b - layout.conv_w);
    let bias_grad = &mut rest[..f];
    conv_grad.fill(0.0);
    bias_grad.fill(0.0);
    for i in 0..m {
        conv_sample(cfg, layout, params, patches, i, conv);
        let d_pooled = &delta[i * flat..(i + 1) * flat];
        match act {
            Activation::Relu => unpool_rows(d_pooled, conv, d_conv, f, pool, |&p| if p > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => unpool_rows(d_pooled, conv, d_conv, f, pool, |&p| Activation::Tanh.slope(p)),
        }
        // Positions past `used` fall outside every pooling window.
        let rows = &patches[i * tc * w..(i * tc + used) * w];
        gemm(w, used, f, 1.0, rows, true, d_conv, false, 1.0, conv_grad);
        for dc in d_conv.chunks_exact(f) {
            for (g, &d) in bias_grad.iter_mut().zip(dc) {
                *g += d;
            }
        }
    }
    trace.delta = delta;
    trace.d_input = d_input;
}
