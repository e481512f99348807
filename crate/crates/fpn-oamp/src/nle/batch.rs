//! Batched forward and backward passes for the nonlinear estimator.
//!
//! The per-sample routines in the parent module are the readable reference;
//! this engine computes the same maps for a whole batch at once by lowering
//! every convolution to a matrix product (im2col), which is what makes
//! training affordable on a single core. Layout conventions:
//!
//! * batch inputs and outputs are matrices whose columns are the flat
//!   estimation-domain vectors (`io_len x n`),
//! * internal stage tensors are `channels x (n * pix)` matrices where column
//!   `smp * pix + p` holds pixel `p` of sample `smp`.

use super::{LnStats, NleError, NleParameters, LN_EPSILON};
use nalgebra::DMatrix;

/// Stage tensors of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    n: usize,
    x0: DMatrix<f64>,
    lifted: DMatrix<f64>,
    blocks: Vec<BatchBlockTrace>,
    head1: DMatrix<f64>,
    relu_head: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct BatchBlockTrace {
    c1: DMatrix<f64>,
    ln1_out: DMatrix<f64>,
    ln1_stats: Vec<LnStats>,
    relu1: DMatrix<f64>,
    c2: DMatrix<f64>,
    ln2_stats: Vec<LnStats>,
    output: DMatrix<f64>,
}

/// Summed parameter gradient and per-sample input gradients.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Gradient with respect to the flat parameters, summed over the batch.
    pub theta: Vec<f64>,
    /// Per-column gradients with respect to the batch inputs (`io_len x n`).
    pub input_cols: DMatrix<f64>,
}

/// Lowers `x` (`in_ch x n*pix`) to patch columns (`in_ch*9 x n*pix`) so a
/// 3x3 zero-padded convolution becomes one matrix product.
fn im2col(x: &DMatrix<f64>, in_ch: usize, g: usize, n: usize) -> DMatrix<f64> {
    let pix = g * g;
    let mut p = DMatrix::zeros(in_ch * 9, n * pix);
    for smp in 0..n {
        let base = smp * pix;
        for y in 0..g {
            for dy in 0..3usize {
                let yy = y + dy;
                if yy < 1 || yy > g {
                    continue;
                }
                for xx in 0..g {
                    let col = base + y * g + xx;
                    for dx in 0..3usize {
                        let xc = xx + dx;
                        if xc < 1 || xc > g {
                            continue;
                        }
                        let src = base + (yy - 1) * g + (xc - 1);
                        let tap = dy * 3 + dx;
                        for i in 0..in_ch {
                            p[(i * 9 + tap, col)] = x[(i, src)];
                        }
                    }
                }
            }
        }
    }
    p
}

/// Scatter-adds patch-column gradients back onto the input tensor.
fn col2im_add(dp: &DMatrix<f64>, in_ch: usize, g: usize, n: usize, dx: &mut DMatrix<f64>) {
    let pix = g * g;
    for smp in 0..n {
        let base = smp * pix;
        for y in 0..g {
            for dy in 0..3usize {
                let yy = y + dy;
                if yy < 1 || yy > g {
                    continue;
                }
                for xx in 0..g {
                    let col = base + y * g + xx;
                    for dx_tap in 0..3usize {
                        let xc = xx + dx_tap;
                        if xc < 1 || xc > g {
                            continue;
                        }
                        let src = base + (yy - 1) * g + (xc - 1);
                        let tap = dy * 3 + dx_tap;
                        for i in 0..in_ch {
                            dx[(i, src)] += dp[(i * 9 + tap, col)];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias_rows(y: &mut DMatrix<f64>, b: &[f64]) {
    let rows = y.nrows();
    for mut col in y.column_iter_mut() {
        for o in 0..rows {
            col[o] += b[o];
        }
    }
}

/// Per-sample layer norm over contiguous `pix`-column blocks.
fn ln_batch_forward(
    x: &DMatrix<f64>,
    pix: usize,
    n: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (DMatrix<f64>, Vec<LnStats>) {
    let c = x.nrows();
    let count = (c * pix) as f64;
    let mut out = DMatrix::zeros(c, n * pix);
    let mut stats = Vec::with_capacity(n);
    let xs = x.as_slice();
    let os = out.as_mut_slice();
    for smp in 0..n {
        let lo = smp * pix * c;
        let hi = lo + pix * c;
        let block = &xs[lo..hi];
        let mu = block.iter().sum::<f64>() / count;
        let var = block.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / count;
        let inv_std = 1.0 / (var + LN_EPSILON).sqrt();
        // Column-major block: index = local_col * c + row, row is the channel.
        for (idx, v) in block.iter().enumerate() {
            let ch = idx % c;
            os[lo + idx] = gamma[ch] * (v - mu) * inv_std + beta[ch];
        }
        stats.push(LnStats { mu, inv_std });
    }
    (out, stats)
}

/// Backward pass of [`ln_batch_forward`]. Accumulates into the gradients.
#[allow(clippy::too_many_arguments)]
fn ln_batch_backward(
    x: &DMatrix<f64>,
    pix: usize,
    n: usize,
    gamma: &[f64],
    stats: &[LnStats],
    dout: &DMatrix<f64>,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut DMatrix<f64>,
) {
    let c = x.nrows();
    let count = (c * pix) as f64;
    let xs = x.as_slice();
    let ds = dout.as_slice();
    let dxs = dx.as_mut_slice();
    for smp in 0..n {
        let lo = smp * pix * c;
        let st = stats[smp];
        let block = &xs[lo..lo + pix * c];
        let dblock = &ds[lo..lo + pix * c];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for (idx, v) in block.iter().enumerate() {
            let ch = idx % c;
            let xhat = (v - st.mu) * st.inv_std;
            let dxhat = dblock[idx] * gamma[ch];
            dgamma[ch] += dblock[idx] * xhat;
            dbeta[ch] += dblock[idx];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for (idx, v) in block.iter().enumerate() {
            let ch = idx % c;
            let xhat = (v - st.mu) * st.inv_std;
            let dxhat = dblock[idx] * gamma[ch];
            dxs[lo + idx] +=
                st.inv_std * (dxhat - sum_dxhat / count - xhat * sum_dxhat_xhat / count);
        }
    }
}

fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

/// Repacks sample columns (`io_len x n`, channel-major rows) into the stage
/// layout (`maps x n*pix`, pixel columns).
fn cols_to_maps(u_cols: &DMatrix<f64>, maps: usize, pix: usize) -> DMatrix<f64> {
    let n = u_cols.ncols();
    let mut x = DMatrix::zeros(maps, n * pix);
    for smp in 0..n {
        let col = u_cols.column(smp);
        for ch in 0..maps {
            for p in 0..pix {
                x[(ch, smp * pix + p)] = col[ch * pix + p];
            }
        }
    }
    x
}

/// Inverse of [`cols_to_maps`].
fn maps_to_cols(x: &DMatrix<f64>, maps: usize, pix: usize, n: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(maps * pix, n);
    for smp in 0..n {
        let mut col = u.column_mut(smp);
        for ch in 0..maps {
            for p in 0..pix {
                col[ch * pix + p] = x[(ch, smp * pix + p)];
            }
        }
    }
    u
}

/// Applies the network to every column of `u_cols` (`io_len x n`). Returns
/// the outputs in the same layout plus the stage tensors for the backward
/// pass.
pub fn batch_forward(
    params: &NleParameters,
    u_cols: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, BatchTrace), NleError> {
    let arch = *params.arch();
    if u_cols.nrows() != arch.io_len() {
        return Err(NleError::LengthMismatch {
            expected: arch.io_len(),
            got: u_cols.nrows(),
        });
    }
    let n = u_cols.ncols();
    let off = arch.offsets();
    let data = params.data();
    let c = arch.channels();
    let m = arch.maps();
    let g = arch.grid();
    let pix = g * g;

    let x0 = cols_to_maps(u_cols, m, pix);

    let w_lift = DMatrix::from_row_slice(c, m * 9, &data[off.lift_w.clone()]);
    let mut lifted = &w_lift * im2col(&x0, m, g, n);
    add_bias_rows(&mut lifted, &data[off.lift_b.clone()]);

    let mut x = lifted.clone();
    let mut blocks = Vec::with_capacity(arch.blocks());
    for b in (0..arch.blocks()).map(|i| off.block(i)) {
        let w1 = DMatrix::from_row_slice(c, c * 9, &data[b.c1_w.clone()]);
        let mut c1 = &w1 * im2col(&x, c, g, n);
        add_bias_rows(&mut c1, &data[b.c1_b.clone()]);
        let (ln1_out, ln1_stats) =
            ln_batch_forward(&c1, pix, n, &data[b.ln1_g.clone()], &data[b.ln1_b.clone()]);
        let relu1 = relu(&ln1_out);
        let w2 = DMatrix::from_row_slice(c, c * 9, &data[b.c2_w.clone()]);
        let mut c2 = &w2 * im2col(&relu1, c, g, n);
        add_bias_rows(&mut c2, &data[b.c2_b.clone()]);
        let (ln2_out, ln2_stats) =
            ln_batch_forward(&c2, pix, n, &data[b.ln2_g.clone()], &data[b.ln2_b.clone()]);
        let output = &x + ln2_out;
        x = output.clone();
        blocks.push(BatchBlockTrace {
            c1,
            ln1_out,
            ln1_stats,
            relu1,
            c2,
            ln2_stats,
            output,
        });
    }

    let w_h1 = DMatrix::from_row_slice(c, c, &data[off.head1_w.clone()]);
    let mut head1 = &w_h1 * &x;
    add_bias_rows(&mut head1, &data[off.head1_b.clone()]);
    let relu_head = relu(&head1);
    let w_h2 = DMatrix::from_row_slice(m, c, &data[off.head2_w.clone()]);
    let mut head2 = &w_h2 * &relu_head;
    add_bias_rows(&mut head2, &data[off.head2_b.clone()]);

    let out_cols = u_cols + maps_to_cols(&head2, m, pix, n);
    Ok((
        out_cols,
        BatchTrace {
            n,
            x0,
            lifted,
            blocks,
            head1,
            relu_head,
        },
    ))
}

/// Applies the network to every column without keeping stage tensors.
pub fn batch_apply(params: &NleParameters, u_cols: &DMatrix<f64>) -> Result<DMatrix<f64>, NleError> {
    batch_forward(params, u_cols).map(|(out, _)| out)
}

/// Writes a `out_ch x k` gradient matrix into a row-major flat range.
fn add_weight_grad(dw: &DMatrix<f64>, dst: &mut [f64]) {
    let k = dw.ncols();
    for o in 0..dw.nrows() {
        for j in 0..k {
            dst[o * k + j] += dw[(o, j)];
        }
    }
}

fn add_row_sums(dy: &DMatrix<f64>, dst: &mut [f64]) {
    for col in dy.column_iter() {
        for (o, v) in col.iter().enumerate() {
            dst[o] += v;
        }
    }
}

/// Backward pass matching [`batch_forward`]. `upstream_cols` holds one
/// `d(loss)/d(output)` column per sample; the parameter gradient is summed
/// over the batch.
pub fn batch_backward(
    params: &NleParameters,
    trace: &BatchTrace,
    upstream_cols: &DMatrix<f64>,
) -> Result<BatchGrad, NleError> {
    let arch = *params.arch();
    if upstream_cols.nrows() != arch.io_len() || upstream_cols.ncols() != trace.n {
        return Err(NleError::LengthMismatch {
            expected: arch.io_len() * trace.n,
            got: upstream_cols.nrows() * upstream_cols.ncols(),
        });
    }
    let n = trace.n;
    let off = arch.offsets();
    let data = params.data();
    let c = arch.channels();
    let m = arch.maps();
    let g = arch.grid();
    let pix = g * g;

    let mut theta = vec![0.0; arch.param_count()];
    let d_out = cols_to_maps(upstream_cols, m, pix);

    // Head, second 1x1 conv.
    let w_h2 = DMatrix::from_row_slice(m, c, &data[off.head2_w.clone()]);
    add_weight_grad(&(&d_out * trace.relu_head.transpose()), &mut theta[off.head2_w.clone()]);
    add_row_sums(&d_out, &mut theta[off.head2_b.clone()]);
    let mut d_head1 = w_h2.transpose() * &d_out;
    for (dv, pre) in d_head1.as_mut_slice().iter_mut().zip(trace.head1.as_slice()) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }

    // Head, first 1x1 conv.
    let last_x = trace.blocks.last().map(|b| &b.output).unwrap_or(&trace.lifted);
    let w_h1 = DMatrix::from_row_slice(c, c, &data[off.head1_w.clone()]);
    add_weight_grad(&(&d_head1 * last_x.transpose()), &mut theta[off.head1_w.clone()]);
    add_row_sums(&d_head1, &mut theta[off.head1_b.clone()]);
    let mut d_x = w_h1.transpose() * d_head1;

    for i in (0..arch.blocks()).rev() {
        let bt = &trace.blocks[i];
        let b = off.block(i);
        let block_input = if i == 0 { &trace.lifted } else { &trace.blocks[i - 1].output };

        let mut d_c2 = DMatrix::zeros(c, n * pix);
        let (dg, dbt) = super::grad_pair(&mut theta, b.ln2_g.clone(), b.ln2_b.clone());
        ln_batch_backward(
            &bt.c2,
            pix,
            n,
            &data[b.ln2_g.clone()],
            &bt.ln2_stats,
            &d_x,
            dg,
            dbt,
            &mut d_c2,
        );
        let w2 = DMatrix::from_row_slice(c, c * 9, &data[b.c2_w.clone()]);
        let p_relu1 = im2col(&bt.relu1, c, g, n);
        add_weight_grad(&(&d_c2 * p_relu1.transpose()), &mut theta[b.c2_w.clone()]);
        add_row_sums(&d_c2, &mut theta[b.c2_b.clone()]);
        let dp = w2.transpose() * d_c2;
        let mut d_ln1 = DMatrix::zeros(c, n * pix);
        col2im_add(&dp, c, g, n, &mut d_ln1);
        for (dv, pre) in d_ln1.as_mut_slice().iter_mut().zip(bt.ln1_out.as_slice()) {
            if *pre <= 0.0 {
                *dv = 0.0;
            }
        }
        let mut d_c1 = DMatrix::zeros(c, n * pix);
        let (dg, dbt) = super::grad_pair(&mut theta, b.ln1_g.clone(), b.ln1_b.clone());
        ln_batch_backward(
            &bt.c1,
            pix,
            n,
            &data[b.ln1_g.clone()],
            &bt.ln1_stats,
            &d_ln1,
            dg,
            dbt,
            &mut d_c1,
        );
        let w1 = DMatrix::from_row_slice(c, c * 9, &data[b.c1_w.clone()]);
        let p_input = im2col(block_input, c, g, n);
        add_weight_grad(&(&d_c1 * p_input.transpose()), &mut theta[b.c1_w.clone()]);
        add_row_sums(&d_c1, &mut theta[b.c1_b.clone()]);
        let dp1 = w1.transpose() * d_c1;
        // The skip contribution is already in d_x; add the conv path.
        col2im_add(&dp1, c, g, n, &mut d_x);
    }

    // Lift conv.
    let w_lift = DMatrix::from_row_slice(c, m * 9, &data[off.lift_w.clone()]);
    let p0 = im2col(&trace.x0, m, g, n);
    add_weight_grad(&(&d_x * p0.transpose()), &mut theta[off.lift_w.clone()]);
    add_row_sums(&d_x, &mut theta[off.lift_b.clone()]);
    let dp0 = w_lift.transpose() * d_x;
    let mut d_x0 = DMatrix::zeros(m, n * pix);
    col2im_add(&dp0, m, g, n, &mut d_x0);

    // Global skip: the upstream flows straight to the input as well.
    let input_cols = upstream_cols + maps_to_cols(&d_x0, m, pix, n);
    Ok(BatchGrad { theta, input_cols })
}
