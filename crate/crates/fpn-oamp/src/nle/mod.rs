//! Convolutional nonlinear estimator with hand-written forward and backward
//! passes over flat parameter storage.
//!
//! The estimator consumes the real estimation-domain vector of an aperture
//! with `S` subarrays and `S_bar` antennas each, reshapes it into `2S` square
//! maps of side `sqrt(S_bar)` (real parts of all subarrays first, then
//! imaginary parts), and refines it with a small residual convolutional
//! network:
//!
//! 1. a 3x3 lift convolution from `2S` maps to `C` channels,
//! 2. `B` residual blocks (3x3 conv, layer norm, ReLU, 3x3 conv, layer norm,
//!    skip connection),
//! 3. a 1x1 head (`C -> C`, ReLU, `C -> 2S`),
//! 4. a global skip connection adding the input maps to the head output.
//!
//! The final head convolution is zero-initialised so a freshly created
//! network is exactly the identity map. All parameters live in one flat
//! `Vec<f64>` so the training loop can treat the model as a plain parameter
//! vector; [`NleArch`] owns the offset arithmetic.

mod batch;
mod checkpoint;

pub use batch::{batch_apply, batch_backward, batch_forward, BatchGrad, BatchTrace};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use crate::geometry::ArrayGeometry;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Epsilon added to the variance inside every layer norm.
pub const LN_EPSILON: f64 = 1e-6;

/// Errors produced by the nonlinear estimator.
#[derive(Debug, Error)]
pub enum NleError {
    /// The channel width must be at least the number of input maps.
    #[error("channel width {channels} is below the minimum {min} (twice the subarray count)")]
    ChannelsTooFew { channels: usize, min: usize },
    /// At least one residual block is required.
    #[error("the network needs at least one residual block")]
    NoBlocks,
    /// The number of antennas per subarray must be a perfect square.
    #[error("antennas per subarray {0} is not a perfect square")]
    GridNotSquare(usize),
    /// A vector had the wrong length for the configured architecture.
    #[error("expected a vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    /// A flat parameter vector had the wrong length.
    #[error("expected {expected} parameters, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
}

/// Architecture descriptor: subarray layout plus network width and depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NleArch {
    s: usize,
    s_bar: usize,
    channels: usize,
    blocks: usize,
}

/// Offsets of one residual block inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    c1_w: Range<usize>,
    c1_b: Range<usize>,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    c2_w: Range<usize>,
    c2_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
}

/// Offsets of every parameter group inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub(crate) lift_w: Range<usize>,
    pub(crate) lift_b: Range<usize>,
    blocks: Vec<BlockOffsets>,
    pub(crate) head1_w: Range<usize>,
    pub(crate) head1_b: Range<usize>,
    pub(crate) head2_w: Range<usize>,
    pub(crate) head2_b: Range<usize>,
    total: usize,
}

impl Offsets {
    pub(crate) fn block(&self, i: usize) -> &BlockOffsets {
        &self.blocks[i]
    }
}

impl NleArch {
    /// Builds an architecture for `s` subarrays of `s_bar` antennas.
    pub fn new(s: usize, s_bar: usize, channels: usize, blocks: usize) -> Result<Self, NleError> {
        let grid = (s_bar as f64).sqrt().round() as usize;
        if grid * grid != s_bar || s_bar == 0 {
            return Err(NleError::GridNotSquare(s_bar));
        }
        if channels < 2 * s {
            return Err(NleError::ChannelsTooFew {
                channels,
                min: 2 * s,
            });
        }
        if blocks == 0 {
            return Err(NleError::NoBlocks);
        }
        Ok(Self {
            s,
            s_bar,
            channels,
            blocks,
        })
    }

    /// Builds an architecture matching an array geometry.
    pub fn from_geometry(
        geometry: &ArrayGeometry,
        channels: usize,
        blocks: usize,
    ) -> Result<Self, NleError> {
        Self::new(geometry.s(), geometry.s_bar(), channels, blocks)
    }

    /// Number of subarrays.
    pub fn s(&self) -> usize {
        self.s
    }

    /// Number of antennas per subarray.
    pub fn s_bar(&self) -> usize {
        self.s_bar
    }

    /// Channel width of the hidden layers.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of residual blocks.
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Side length of each square map.
    pub fn grid(&self) -> usize {
        (self.s_bar as f64).sqrt().round() as usize
    }

    /// Number of input and output maps (`2S`).
    pub fn maps(&self) -> usize {
        2 * self.s
    }

    /// Length of the input and output vectors (`2 S S_bar`).
    pub fn io_len(&self) -> usize {
        2 * self.s * self.s_bar
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        self.offsets().total
    }

    /// Computes the parameter layout. Order per group: 3x3 weights are
    /// `[out][in][ky][kx]` row-major, 1x1 weights are `[out][in]`.
    pub(crate) fn offsets(&self) -> Offsets {
        let c = self.channels;
        let m = self.maps();
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let range = cursor..cursor + len;
            cursor += len;
            range
        };
        let lift_w = take(c * m * 9);
        let lift_b = take(c);
        let mut blocks = Vec::with_capacity(self.blocks);
        for _ in 0..self.blocks {
            blocks.push(BlockOffsets {
                c1_w: take(c * c * 9),
                c1_b: take(c),
                ln1_g: take(c),
                ln1_b: take(c),
                c2_w: take(c * c * 9),
                c2_b: take(c),
                ln2_g: take(c),
                ln2_b: take(c),
            });
        }
        let head1_w = take(c * c);
        let head1_b = take(c);
        let head2_w = take(m * c);
        let head2_b = take(m);
        Offsets {
            lift_w,
            lift_b,
            blocks,
            head1_w,
            head1_b,
            head2_w,
            head2_b,
            total: cursor,
        }
    }

    /// Names, shapes, and flat ranges of every parameter group, in storage
    /// order. Used by the checkpoint format.
    pub fn named_groups(&self) -> Vec<(String, Vec<usize>, Range<usize>)> {
        let c = self.channels;
        let m = self.maps();
        let off = self.offsets();
        let mut groups = vec![
            ("lift.weight".to_string(), vec![c, m, 3, 3], off.lift_w),
            ("lift.bias".to_string(), vec![c], off.lift_b),
        ];
        for (i, b) in off.blocks.iter().enumerate() {
            let p = format!("block{i}");
            groups.push((format!("{p}.conv1.weight"), vec![c, c, 3, 3], b.c1_w.clone()));
            groups.push((format!("{p}.conv1.bias"), vec![c], b.c1_b.clone()));
            groups.push((format!("{p}.ln1.scale"), vec![c], b.ln1_g.clone()));
            groups.push((format!("{p}.ln1.shift"), vec![c], b.ln1_b.clone()));
            groups.push((format!("{p}.conv2.weight"), vec![c, c, 3, 3], b.c2_w.clone()));
            groups.push((format!("{p}.conv2.bias"), vec![c], b.c2_b.clone()));
            groups.push((format!("{p}.ln2.scale"), vec![c], b.ln2_g.clone()));
            groups.push((format!("{p}.ln2.shift"), vec![c], b.ln2_b.clone()));
        }
        groups.push(("head.conv1.weight".to_string(), vec![c, c], off.head1_w));
        groups.push(("head.conv1.bias".to_string(), vec![c], off.head1_b));
        groups.push(("head.conv2.weight".to_string(), vec![m, c], off.head2_w));
        groups.push(("head.conv2.bias".to_string(), vec![m], off.head2_b));
        groups
    }
}

/// Flat parameter storage for the nonlinear estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NleParameters {
    arch: NleArch,
    data: Vec<f64>,
}

impl NleParameters {
    /// Wraps an existing flat vector, checking its length.
    pub fn from_raw(arch: NleArch, data: Vec<f64>) -> Result<Self, NleError> {
        let expected = arch.param_count();
        if data.len() != expected {
            return Err(NleError::ParamCountMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { arch, data })
    }

    /// Architecture descriptor.
    pub fn arch(&self) -> &NleArch {
        &self.arch
    }

    /// Flat parameter vector.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat parameter vector.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scales the final head convolution weights in place, damping the learned
    /// correction while leaving biases and every other group untouched.
    pub fn scale_head_weights(&mut self, factor: f64) {
        let off = self.arch.offsets();
        for v in &mut self.data[off.head2_w] {
            *v *= factor;
        }
    }
}

/// Draws fresh parameters. Convolution weights use zero-mean Gaussians with
/// variance `2 / fan_in`, layer norm scales start at one and shifts at zero,
/// and the final head convolution starts at zero, so the network is the
/// identity map.
pub fn init_params<R: Rng>(
    rng: &mut R,
    geometry: &ArrayGeometry,
    channels: usize,
    blocks: usize,
) -> Result<NleParameters, NleError> {
    let arch = NleArch::from_geometry(geometry, channels, blocks)?;
    let off = arch.offsets();
    let mut data = vec![0.0; off.total];
    let mut fill_normal = |data: &mut [f64], range: Range<usize>, fan_in: usize| {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        for v in &mut data[range] {
            *v = dist.sample(rng);
        }
    };
    fill_normal(&mut data, off.lift_w.clone(), arch.maps() * 9);
    for b in &off.blocks {
        fill_normal(&mut data, b.c1_w.clone(), channels * 9);
        fill_normal(&mut data, b.c2_w.clone(), channels * 9);
        data[b.ln1_g.clone()].fill(1.0);
        data[b.ln2_g.clone()].fill(1.0);
    }
    fill_normal(&mut data, off.head1_w.clone(), channels);
    // head2 weights and all biases stay zero: identity at initialisation.
    NleParameters::from_raw(arch, data)
}

/// Gradient of a scalar loss with respect to the parameters and the input.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// Gradient with respect to the flat parameter vector.
    pub theta: Vec<f64>,
    /// Gradient with respect to the input vector.
    pub input: Vec<f64>,
}

impl GradientBundle {
    /// All-zero gradients for the given architecture.
    pub fn zeros(arch: &NleArch) -> Self {
        Self {
            theta: vec![0.0; arch.param_count()],
            input: vec![0.0; arch.io_len()],
        }
    }

    /// Adds another bundle element-wise.
    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += b;
        }
        for (a, b) in self.input.iter_mut().zip(&other.input) {
            *a += b;
        }
    }

    /// Scales both gradients in place.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.theta {
            *v *= factor;
        }
        for v in &mut self.input {
            *v *= factor;
        }
    }
}

/// 3x3 convolution with zero padding (same spatial size) on `g x g` maps.
/// `w` is `[out][in][ky][kx]` row-major, `out` must hold `out_ch * g * g`.
fn conv3x3_forward(
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    g: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    for o in 0..out_ch {
        let wo = &w[o * in_ch * 9..(o + 1) * in_ch * 9];
        let out_map = &mut out[o * g * g..(o + 1) * g * g];
        out_map.fill(b[o]);
        for i in 0..in_ch {
            let wi = &wo[i * 9..i * 9 + 9];
            let in_map = &input[i * g * g..(i + 1) * g * g];
            for y in 0..g {
                for dy in 0..3usize {
                    let yy = y + dy;
                    if yy < 1 || yy > g {
                        continue;
                    }
                    let src_row = &in_map[(yy - 1) * g..yy * g];
                    let wrow = &wi[dy * 3..dy * 3 + 3];
                    let dst_row = &mut out_map[y * g..(y + 1) * g];
                    for x in 0..g {
                        let mut acc = 0.0;
                        for dx in 0..3usize {
                            let xx = x + dx;
                            if xx < 1 || xx > g {
                                continue;
                            }
                            acc += wrow[dx] * src_row[xx - 1];
                        }
                        dst_row[x] += acc;
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv3x3_forward`]. Accumulates into `dw`, `db`, and
/// `dinput` (callers zero them first).
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    g: usize,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dinput: &mut [f64],
) {
    for o in 0..out_ch {
        let dmap = &dout[o * g * g..(o + 1) * g * g];
        db[o] += dmap.iter().sum::<f64>();
        let wo = &w[o * in_ch * 9..(o + 1) * in_ch * 9];
        let dwo = &mut dw[o * in_ch * 9..(o + 1) * in_ch * 9];
        for i in 0..in_ch {
            let in_map = &input[i * g * g..(i + 1) * g * g];
            let din_map = &mut dinput[i * g * g..(i + 1) * g * g];
            let wi = &wo[i * 9..i * 9 + 9];
            let dwi = &mut dwo[i * 9..i * 9 + 9];
            for y in 0..g {
                for dy in 0..3usize {
                    let yy = y + dy;
                    if yy < 1 || yy > g {
                        continue;
                    }
                    let src = (yy - 1) * g;
                    for x in 0..g {
                        let go = dmap[y * g + x];
                        if go == 0.0 {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = x + dx;
                            if xx < 1 || xx > g {
                                continue;
                            }
                            dwi[dy * 3 + dx] += go * in_map[src + xx - 1];
                            din_map[src + xx - 1] += go * wi[dy * 3 + dx];
                        }
                    }
                }
            }
        }
    }
}

/// Layer norm statistics retained for the backward pass.
#[derive(Debug, Clone, Copy)]
struct LnStats {
    mu: f64,
    inv_std: f64,
}

/// Layer norm over the full `[C][g][g]` tensor with a per-channel affine
/// transform. Returns the statistics needed for the backward pass.
fn layer_norm_forward(
    input: &[f64],
    channels: usize,
    pix: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> LnStats {
    let n = (channels * pix) as f64;
    let mu = input.iter().sum::<f64>() / n;
    let var = input.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPSILON).sqrt();
    for c in 0..channels {
        let g = gamma[c];
        let b = beta[c];
        for p in 0..pix {
            out[c * pix + p] = g * (input[c * pix + p] - mu) * inv_std + b;
        }
    }
    LnStats { mu, inv_std }
}

/// Backward pass of [`layer_norm_forward`]. Accumulates into `dgamma`,
/// `dbeta`, and `dinput`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    input: &[f64],
    channels: usize,
    pix: usize,
    gamma: &[f64],
    stats: LnStats,
    dout: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dinput: &mut [f64],
) {
    let n = (channels * pix) as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for c in 0..channels {
        let g = gamma[c];
        for p in 0..pix {
            let idx = c * pix + p;
            let xhat = (input[idx] - stats.mu) * stats.inv_std;
            let dxhat = dout[idx] * g;
            dgamma[c] += dout[idx] * xhat;
            dbeta[c] += dout[idx];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
    }
    for c in 0..channels {
        let g = gamma[c];
        for p in 0..pix {
            let idx = c * pix + p;
            let xhat = (input[idx] - stats.mu) * stats.inv_std;
            let dxhat = dout[idx] * g;
            dinput[idx] +=
                stats.inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
    }
}

/// 1x1 convolution: `out[o][p] = b[o] + sum_i w[o][i] input[i][p]`.
fn conv1x1_forward(
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    pix: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    for o in 0..out_ch {
        let out_map = &mut out[o * pix..(o + 1) * pix];
        out_map.fill(b[o]);
        for i in 0..in_ch {
            let wv = w[o * in_ch + i];
            let in_map = &input[i * pix..(i + 1) * pix];
            for p in 0..pix {
                out_map[p] += wv * in_map[p];
            }
        }
    }
}

/// Backward pass of [`conv1x1_forward`]. Accumulates into the gradients.
#[allow(clippy::too_many_arguments)]
fn conv1x1_backward(
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    pix: usize,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dinput: &mut [f64],
) {
    for o in 0..out_ch {
        let dmap = &dout[o * pix..(o + 1) * pix];
        db[o] += dmap.iter().sum::<f64>();
        for i in 0..in_ch {
            let in_map = &input[i * pix..(i + 1) * pix];
            let din_map = &mut dinput[i * pix..(i + 1) * pix];
            let wv = w[o * in_ch + i];
            let mut acc = 0.0;
            for p in 0..pix {
                acc += dmap[p] * in_map[p];
                din_map[p] += wv * dmap[p];
            }
            dw[o * in_ch + i] += acc;
        }
    }
}

/// Disjoint mutable views of two ordered ranges in one flat vector.
/// The first range must end at or before the start of the second.
pub(crate) fn grad_pair(
    theta: &mut [f64],
    first: Range<usize>,
    second: Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(first.end <= second.start);
    let (head, tail) = theta.split_at_mut(second.start);
    let second_len = second.end - second.start;
    (&mut head[first], &mut tail[..second_len])
}

/// Intermediate tensors of one residual block, kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockTrace {
    input: Vec<f64>,
    c1: Vec<f64>,
    ln1_out: Vec<f64>,
    ln1_stats: LnStats,
    relu1: Vec<f64>,
    c2: Vec<f64>,
    ln2_stats: LnStats,
    output: Vec<f64>,
}

/// Intermediate tensors of a full forward pass.
#[derive(Debug, Clone)]
struct ForwardTrace {
    lifted: Vec<f64>,
    blocks: Vec<BlockTrace>,
    head1: Vec<f64>,
    relu_head: Vec<f64>,
}

fn forward_with_trace(params: &NleParameters, u: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NleError> {
    let arch = params.arch;
    if u.len() != arch.io_len() {
        return Err(NleError::LengthMismatch {
            expected: arch.io_len(),
            got: u.len(),
        });
    }
    let off = arch.offsets();
    let data = &params.data;
    let c = arch.channels;
    let m = arch.maps();
    let g = arch.grid();
    let pix = g * g;

    // The flat input vector already is the [2S][g][g] tensor row-major.
    let mut lifted = vec![0.0; c * pix];
    conv3x3_forward(u, m, c, g, &data[off.lift_w.clone()], &data[off.lift_b.clone()], &mut lifted);

    let mut x = lifted.clone();
    let mut blocks = Vec::with_capacity(arch.blocks);
    for b in &off.blocks {
        let input = x.clone();
        let mut c1 = vec![0.0; c * pix];
        conv3x3_forward(&input, c, c, g, &data[b.c1_w.clone()], &data[b.c1_b.clone()], &mut c1);
        let mut ln1_out = vec![0.0; c * pix];
        let ln1_stats = layer_norm_forward(
            &c1,
            c,
            pix,
            &data[b.ln1_g.clone()],
            &data[b.ln1_b.clone()],
            &mut ln1_out,
        );
        let relu1: Vec<f64> = ln1_out.iter().map(|v| v.max(0.0)).collect();
        let mut c2 = vec![0.0; c * pix];
        conv3x3_forward(&relu1, c, c, g, &data[b.c2_w.clone()], &data[b.c2_b.clone()], &mut c2);
        let mut ln2_out = vec![0.0; c * pix];
        let ln2_stats = layer_norm_forward(
            &c2,
            c,
            pix,
            &data[b.ln2_g.clone()],
            &data[b.ln2_b.clone()],
            &mut ln2_out,
        );
        let output: Vec<f64> = input.iter().zip(&ln2_out).map(|(a, b)| a + b).collect();
        x = output.clone();
        blocks.push(BlockTrace {
            input,
            c1,
            ln1_out,
            ln1_stats,
            relu1,
            c2,
            ln2_stats,
            output,
        });
    }

    let mut head1 = vec![0.0; c * pix];
    conv1x1_forward(&x, c, c, pix, &data[off.head1_w.clone()], &data[off.head1_b.clone()], &mut head1);
    let relu_head: Vec<f64> = head1.iter().map(|v| v.max(0.0)).collect();
    let mut head2 = vec![0.0; m * pix];
    conv1x1_forward(
        &relu_head,
        c,
        m,
        pix,
        &data[off.head2_w.clone()],
        &data[off.head2_b.clone()],
        &mut head2,
    );
    let out: Vec<f64> = u.iter().zip(&head2).map(|(a, b)| a + b).collect();
    Ok((
        out,
        ForwardTrace {
            lifted,
            blocks,
            head1,
            relu_head,
        },
    ))
}

/// Applies the network to one estimation-domain vector.
pub fn nle_forward(params: &NleParameters, u: &[f64]) -> Result<Vec<f64>, NleError> {
    forward_with_trace(params, u).map(|(out, _)| out)
}

/// Backward pass for one sample: given `d(loss)/d(output)` in `upstream`,
/// returns the loss gradients with respect to all parameters and the input.
pub fn nle_backward(
    params: &NleParameters,
    u: &[f64],
    upstream: &[f64],
) -> Result<GradientBundle, NleError> {
    let arch = params.arch;
    if upstream.len() != arch.io_len() {
        return Err(NleError::LengthMismatch {
            expected: arch.io_len(),
            got: upstream.len(),
        });
    }
    let (_, trace) = forward_with_trace(params, u)?;
    let off = arch.offsets();
    let data = &params.data;
    let c = arch.channels;
    let m = arch.maps();
    let g = arch.grid();
    let pix = g * g;

    let mut grad = GradientBundle::zeros(&arch);
    // Global skip: the upstream flows straight to the input.
    grad.input.copy_from_slice(upstream);

    // Head, second 1x1 conv.
    let mut d_relu_head = vec![0.0; c * pix];
    let (dw, db) = grad_pair(&mut grad.theta, off.head2_w.clone(), off.head2_b.clone());
    conv1x1_backward(
        &trace.relu_head,
        c,
        m,
        pix,
        &data[off.head2_w.clone()],
        upstream,
        dw,
        db,
        &mut d_relu_head,
    );
    // Head ReLU.
    let mut d_head1 = d_relu_head;
    for (dv, pre) in d_head1.iter_mut().zip(&trace.head1) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    // Head, first 1x1 conv.
    let last_x = trace
        .blocks
        .last()
        .map(|b| b.output.as_slice())
        .unwrap_or(&trace.lifted);
    let mut d_x = vec![0.0; c * pix];
    let (dw, db) = grad_pair(&mut grad.theta, off.head1_w.clone(), off.head1_b.clone());
    conv1x1_backward(
        last_x,
        c,
        c,
        pix,
        &data[off.head1_w.clone()],
        &d_head1,
        dw,
        db,
        &mut d_x,
    );

    // Residual blocks in reverse.
    for (bt, b) in trace.blocks.iter().zip(&off.blocks).rev() {
        // d_x is the gradient at the block output; the skip passes it through.
        let d_ln2 = d_x.clone();
        let mut d_c2 = vec![0.0; c * pix];
        let (dg, dbt_) = grad_pair(&mut grad.theta, b.ln2_g.clone(), b.ln2_b.clone());
        layer_norm_backward(
            &bt.c2,
            c,
            pix,
            &data[b.ln2_g.clone()],
            bt.ln2_stats,
            &d_ln2,
            dg,
            dbt_,
            &mut d_c2,
        );
        let mut d_relu1 = vec![0.0; c * pix];
        let (dw, db) = grad_pair(&mut grad.theta, b.c2_w.clone(), b.c2_b.clone());
        conv3x3_backward(
            &bt.relu1,
            c,
            c,
            g,
            &data[b.c2_w.clone()],
            &d_c2,
            dw,
            db,
            &mut d_relu1,
        );
        let mut d_ln1 = d_relu1;
        for (dv, pre) in d_ln1.iter_mut().zip(&bt.ln1_out) {
            if *pre <= 0.0 {
                *dv = 0.0;
            }
        }
        let mut d_c1 = vec![0.0; c * pix];
        let (dg, dbt_) = grad_pair(&mut grad.theta, b.ln1_g.clone(), b.ln1_b.clone());
        layer_norm_backward(
            &bt.c1,
            c,
            pix,
            &data[b.ln1_g.clone()],
            bt.ln1_stats,
            &d_ln1,
            dg,
            dbt_,
            &mut d_c1,
        );
        let mut d_input = d_x;
        // The skip contribution is already in d_input; add the conv path.
        let (dw, db) = grad_pair(&mut grad.theta, b.c1_w.clone(), b.c1_b.clone());
        conv3x3_backward(
            &bt.input,
            c,
            c,
            g,
            &data[b.c1_w.clone()],
            &d_c1,
            dw,
            db,
            &mut d_input,
        );
        d_x = d_input;
    }

    // Lift conv back to the input maps.
    let (dw, db) = grad_pair(&mut grad.theta, off.lift_w.clone(), off.lift_b.clone());
    conv3x3_backward(
        u,
        m,
        c,
        g,
        &data[off.lift_w.clone()],
        &d_x,
        dw,
        db,
        &mut grad.input,
    );
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ArrayGeometry;
    use crate::sample_rng;
    use rand::Rng;

    fn tiny_geometry() -> ArrayGeometry {
        ArrayGeometry::new(1, 4, 5e-4, 5e-4, 3e11).unwrap()
    }

    fn desk_geometry() -> ArrayGeometry {
        ArrayGeometry::new(4, 16, 5e-4, 8e-3, 3e11).unwrap()
    }

    /// Random parameters with every group nonzero, for gradient checks.
    fn randomized_params(seed: u64, geometry: &ArrayGeometry, c: usize, b: usize) -> NleParameters {
        let mut rng = sample_rng(seed, 0);
        let mut params = init_params(&mut rng, geometry, c, b).unwrap();
        for v in params.data_mut() {
            *v += 0.2 * rng.gen_range(-1.0..1.0f64);
        }
        params
    }

    #[test]
    fn param_count_matches_reference_architecture() {
        let arch = NleArch::new(4, 256, 64, 3).unwrap();
        assert_eq!(arch.param_count(), 231_688);
        let groups = arch.named_groups();
        let total: usize = groups.iter().map(|(_, _, r)| r.len()).sum();
        assert_eq!(total, 231_688);
        // Shapes multiply out to the range lengths.
        for (_, shape, range) in &groups {
            assert_eq!(shape.iter().product::<usize>(), range.len());
        }
    }

    #[test]
    fn arch_validation_rejects_bad_settings() {
        assert!(NleArch::new(4, 15, 32, 3).is_err());
        assert!(NleArch::new(4, 16, 7, 3).is_err());
        assert!(NleArch::new(4, 16, 32, 0).is_err());
        assert!(NleArch::new(4, 16, 8, 1).is_ok());
    }

    #[test]
    fn fresh_network_is_identity() {
        let geometry = desk_geometry();
        let mut rng = sample_rng(7, 0);
        let params = init_params(&mut rng, &geometry, 32, 3).unwrap();
        let mut rng = sample_rng(8, 0);
        let u: Vec<f64> = (0..params.arch().io_len())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let out = nle_forward(&params, &u).unwrap();
        let diff: f64 = out
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn fresh_network_input_gradient_is_upstream() {
        let geometry = desk_geometry();
        let mut rng = sample_rng(9, 0);
        let params = init_params(&mut rng, &geometry, 32, 3).unwrap();
        let n = params.arch().io_len();
        let mut rng = sample_rng(10, 0);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = nle_backward(&params, &u, &upstream).unwrap();
        for (g, up) in grad.input.iter().zip(&upstream) {
            assert_eq!(g, up);
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let geometry = desk_geometry();
        let a = init_params(&mut sample_rng(3, 4), &geometry, 32, 3).unwrap();
        let b = init_params(&mut sample_rng(3, 4), &geometry, 32, 3).unwrap();
        assert_eq!(a.data(), b.data());
        let c = init_params(&mut sample_rng(4, 4), &geometry, 32, 3).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn map_layout_is_subarray_major() {
        // The flat vector [Re(sa_1); ...; Re(sa_S); Im(sa_1); ...; Im(sa_S)]
        // coincides with the [2S][g][g] tensor layout, so swapping two
        // subarray blocks in the input swaps the corresponding channel maps
        // and, at identity initialisation, the corresponding output blocks.
        let geometry = desk_geometry();
        let mut rng = sample_rng(11, 0);
        let params = init_params(&mut rng, &geometry, 32, 3).unwrap();
        let s_bar = geometry.s_bar();
        let s = geometry.s();
        let mut rng = sample_rng(12, 0);
        let u: Vec<f64> = (0..params.arch().io_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut swapped = u.clone();
        for part in 0..2 {
            let a = (part * s) * s_bar;
            let b = (part * s + 1) * s_bar;
            for k in 0..s_bar {
                swapped.swap(a + k, b + k);
            }
        }
        let out = nle_forward(&params, &u).unwrap();
        let out_swapped = nle_forward(&params, &swapped).unwrap();
        for part in 0..2 {
            let a = (part * s) * s_bar;
            let b = (part * s + 1) * s_bar;
            for k in 0..s_bar {
                assert_eq!(out[a + k], out_swapped[b + k]);
                assert_eq!(out[b + k], out_swapped[a + k]);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let geometry = tiny_geometry();
        let params = randomized_params(21, &geometry, 4, 1);
        let n = params.arch().io_len();
        let mut rng = sample_rng(22, 0);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = nle_backward(&params, &u, &vec![0.0; n]).unwrap();
        assert!(grad.theta.iter().all(|v| *v == 0.0));
        assert!(grad.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let geometry = desk_geometry();
        let params = randomized_params(31, &geometry, 32, 3);
        let n = params.arch().io_len();
        let mut rng = sample_rng(32, 0);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a = nle_forward(&params, &u).unwrap();
        let b = nle_forward(&params, &u).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        // A randomized network must not be the identity.
        let moved: f64 = a.iter().zip(&u).map(|(x, y)| (x - y).abs()).sum();
        assert!(moved > 1e-3);
    }

    #[test]
    fn input_length_is_checked() {
        let geometry = tiny_geometry();
        let params = randomized_params(41, &geometry, 4, 1);
        assert!(matches!(
            nle_forward(&params, &[0.0; 3]),
            Err(NleError::LengthMismatch { expected: 8, got: 3 })
        ));
        let u = vec![0.0; 8];
        assert!(nle_backward(&params, &u, &[0.0; 5]).is_err());
    }

    /// Probe loss for gradient checks: L = <upstream, f_theta(u)>.
    fn probe_loss(params: &NleParameters, u: &[f64], upstream: &[f64]) -> f64 {
        nle_forward(params, u)
            .unwrap()
            .iter()
            .zip(upstream)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Relative gap with a denominator floored at gradient scale, so
    /// near-zero entries are held to an absolute bar instead of dividing
    /// finite-difference noise by itself.
    fn relative_gap(fd: f64, analytic: f64, scale: f64) -> f64 {
        (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(scale)
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let geometry = tiny_geometry();
        for seed in 0..10u64 {
            let params = randomized_params(100 + seed, &geometry, 4, 1);
            let n = params.arch().io_len();
            let mut rng = sample_rng(200 + seed, 0);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad = nle_backward(&params, &u, &upstream).unwrap();
            let gmax = grad.theta.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let scale = (1e-3 * gmax).max(1e-6);
            let mut worst = 0.0f64;
            for j in 0..params.arch().param_count() {
                let h = 5e-6 * params.data()[j].abs().max(1.0);
                let mut plus = params.clone();
                plus.data_mut()[j] += h;
                let mut minus = params.clone();
                minus.data_mut()[j] -= h;
                let fd =
                    (probe_loss(&plus, &u, &upstream) - probe_loss(&minus, &u, &upstream)) / (2.0 * h);
                worst = worst.max(relative_gap(fd, grad.theta[j], scale));
            }
            assert!(
                worst < 1e-5,
                "seed {seed}: worst parameter gradient error {worst:.3e}"
            );
        }
    }

    #[test]
    fn input_gradients_match_central_differences() {
        let geometry = tiny_geometry();
        for seed in 0..10u64 {
            let params = randomized_params(300 + seed, &geometry, 4, 1);
            let n = params.arch().io_len();
            let mut rng = sample_rng(400 + seed, 0);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad = nle_backward(&params, &u, &upstream).unwrap();
            let gmax = grad.input.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let scale = (1e-3 * gmax).max(1e-6);
            let mut worst = 0.0f64;
            for j in 0..n {
                let h = 5e-6 * u[j].abs().max(1.0);
                let mut plus = u.clone();
                plus[j] += h;
                let mut minus = u.clone();
                minus[j] -= h;
                let fd =
                    (probe_loss(&params, &plus, &upstream) - probe_loss(&params, &minus, &upstream))
                        / (2.0 * h);
                worst = worst.max(relative_gap(fd, grad.input[j], scale));
            }
            assert!(
                worst < 1e-5,
                "seed {seed}: worst input gradient error {worst:.3e}"
            );
        }
    }

    #[test]
    fn head_weight_scaling_touches_only_head_weights() {
        let geometry = tiny_geometry();
        let params = randomized_params(51, &geometry, 4, 1);
        let mut scaled = params.clone();
        scaled.scale_head_weights(0.5);
        let off = params.arch().offsets();
        for j in 0..params.arch().param_count() {
            if off.head2_w.contains(&j) {
                assert_eq!(scaled.data()[j], 0.5 * params.data()[j]);
            } else {
                assert_eq!(scaled.data()[j], params.data()[j]);
            }
        }
    }

    #[test]
    fn from_raw_checks_length() {
        let arch = NleArch::new(1, 4, 4, 1).unwrap();
        assert!(NleParameters::from_raw(arch, vec![0.0; 3]).is_err());
        assert!(NleParameters::from_raw(arch, vec![0.0; arch.param_count()]).is_ok());
    }
}
