//! Forward pass and hand-written backward pass of the refinement network.
//!
//! radar MLP ─┐
//!            ├─ [x += SA(x); x_k += CA(x_k, img_k)] × L ─┬─ conf head → sigmoid
//! patch enc ─┘                                          └─ disp head → (du, dv)

use crate::geometry::Patch;

use super::attention::{attend, attend_backward, AttentionCache};
use super::config::{RefinerConfig, RADAR_FEATURES};
use super::params::{Dense, RefinerParams, Weights};
use super::tensor::Matrix;
use super::RefinerError;

/// Per-point network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerOutput {
    pub confidence: Vec<f64>,
    pub displacement: Vec<[f64; 2]>,
}

const CONF_FLOOR: f64 = 1e-15;

pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(CONF_FLOOR, 1.0 - CONF_FLOOR)
}

/// Activations of an MLP with ReLU between layers (none after the last).
struct MlpTrace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

fn mlp_forward(layers: &[Dense], x: &Matrix) -> (Matrix, MlpTrace) {
    let mut trace = MlpTrace { inputs: Vec::new(), pre: Vec::new() };
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let z = layer.forward(&h);
        trace.inputs.push(h);
        h = if i + 1 < layers.len() { z.relu() } else { z.clone() };
        trace.pre.push(z);
    }
    (h, trace)
}

/// Accumulates parameter gradients and returns the gradient w.r.t. the input.
fn mlp_backward(layers: &[Dense], trace: &MlpTrace, d_out: Matrix, grads: &mut [Dense]) -> Matrix {
    let mut d = d_out;
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            d.relu_backward(&trace.pre[i]);
        }
        grads[i].weight.add_assign(&trace.inputs[i].t_matmul(&d));
        for (g, s) in grads[i].bias.iter_mut().zip(d.column_sums()) {
            *g += s;
        }
        d = d.matmul_t(&layers[i].weight);
    }
    d
}

fn check_features(features: &Matrix) -> Result<(), RefinerError> {
    if features.cols != RADAR_FEATURES {
        return Err(RefinerError::Shape(format!(
            "radar features must have {RADAR_FEATURES} columns, got {}",
            features.cols
        )));
    }
    if features.rows == 0 {
        return Err(RefinerError::Shape("at least one radar point is required".into()));
    }
    if !features.is_finite() {
        return Err(RefinerError::NonFinite("radar features".into()));
    }
    Ok(())
}

/// Splits a patch into `cell x cell` tokens in row-major grid order; each
/// token is flattened channel-major.
pub fn patch_tokens(patch: &Patch, config: &RefinerConfig) -> Result<Matrix, RefinerError> {
    if patch.height != config.patch_size || patch.width != config.patch_size || patch.channels != config.patch_channels {
        return Err(RefinerError::Shape(format!(
            "patch is {}x{}x{}, network expects {}x{}x{}",
            patch.channels, patch.height, patch.width, config.patch_channels, config.patch_size, config.patch_size
        )));
    }
    let (g, cell) = (config.grid_side(), config.patch_cell);
    let mut tokens = Matrix::zeros(g * g, config.token_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = tokens.row_mut(gy * g + gx);
            let mut i = 0;
            for c in 0..patch.channels {
                for dy in 0..cell {
                    for dx in 0..cell {
                        row[i] = patch.get(c, gy * cell + dy, gx * cell + dx);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(tokens)
}

/// Radar MLP: `K x 3` features to `K x D`.
pub fn encode_radar(params: &RefinerParams, features: &Matrix) -> Result<Matrix, RefinerError> {
    check_features(features)?;
    Ok(mlp_forward(&Weights::from_params(params).radar, features).0)
}

/// Patch encoder: `N_img x D` image tokens (one row per grid cell).
pub fn encode_patch(params: &RefinerParams, patch: &Patch) -> Result<Matrix, RefinerError> {
    let w = Weights::from_params(params);
    let tokens = patch_tokens(patch, &params.config)?;
    let (mut f, _) = mlp_forward(&w.patch, &tokens);
    f.add_assign(&w.position);
    Ok(f)
}

struct LayerTrace {
    input: Matrix,
    self_cache: AttentionCache,
    after_self: Matrix,
    cross_caches: Vec<AttentionCache>,
}

struct HeadTrace {
    input: Matrix,
    conf_pre: Matrix,
    conf_hidden: Matrix,
    disp_pre: Matrix,
    disp_hidden: Matrix,
}

pub(crate) struct Trace {
    radar: MlpTrace,
    patches: Vec<MlpTrace>,
    images: Vec<Matrix>,
    layers: Vec<LayerTrace>,
    heads: HeadTrace,
}

pub(crate) fn forward_traced(
    w: &Weights,
    config: &RefinerConfig,
    features: &Matrix,
    patches: &[Patch],
) -> Result<(RefinerOutput, Trace), RefinerError> {
    check_features(features)?;
    if patches.len() != features.rows {
        return Err(RefinerError::Shape(format!(
            "{} patches for {} radar points",
            patches.len(),
            features.rows
        )));
    }
    let (mut x, radar) = mlp_forward(&w.radar, features);

    let mut images = Vec::with_capacity(patches.len());
    let mut patch_traces = Vec::with_capacity(patches.len());
    for p in patches {
        let tokens = patch_tokens(p, config)?;
        if !tokens.is_finite() {
            return Err(RefinerError::NonFinite("patch pixels".into()));
        }
        let (mut f, t) = mlp_forward(&w.patch, &tokens);
        f.add_assign(&w.position);
        images.push(f);
        patch_traces.push(t);
    }

    let mut layers = Vec::with_capacity(w.attention.len());
    for (sa, ca) in &w.attention {
        let input = x.clone();
        let (sa_out, self_cache) = attend(&x, &x, sa);
        x.add_assign(&sa_out);
        let after_self = x.clone();
        let mut cross_caches = Vec::with_capacity(images.len());
        for (k, img) in images.iter().enumerate() {
            let q = Matrix::from_vec(1, x.cols, after_self.row(k).to_vec());
            let (ca_out, cache) = attend(&q, img, ca);
            for (v, d) in x.row_mut(k).iter_mut().zip(&ca_out.data) {
                *v += d;
            }
            cross_caches.push(cache);
        }
        layers.push(LayerTrace { input, self_cache, after_self, cross_caches });
    }

    let conf_pre = w.conf_hidden.forward(&x);
    let conf_hidden = conf_pre.relu();
    let logits = w.conf_out.forward(&conf_hidden).data;
    let disp_pre = w.disp_hidden.forward(&x);
    let disp_hidden = disp_pre.relu();
    let disp = w.disp_out.forward(&disp_hidden);

    let output = RefinerOutput {
        confidence: logits.iter().map(|z| sigmoid(*z)).collect(),
        displacement: (0..disp.rows).map(|r| [disp.get(r, 0), disp.get(r, 1)]).collect(),
    };
    if output.displacement.iter().flatten().chain(&logits).any(|v| !v.is_finite()) {
        return Err(RefinerError::NonFinite("network output".into()));
    }
    let trace = Trace {
        radar,
        patches: patch_traces,
        images,
        layers,
        heads: HeadTrace { input: x, conf_pre, conf_hidden, disp_pre, disp_hidden },
    };
    Ok((output, trace))
}

#[allow(clippy::too_many_arguments)]
fn head_backward(
    out: &Dense,
    hidden: &Dense,
    act: &Matrix,
    pre: &Matrix,
    input: &Matrix,
    d_out: &Matrix,
    g_out: &mut Dense,
    g_hidden: &mut Dense,
) -> Matrix {
    g_out.weight.add_assign(&act.t_matmul(d_out));
    for (g, s) in g_out.bias.iter_mut().zip(d_out.column_sums()) {
        *g += s;
    }
    let mut d_hidden = d_out.matmul_t(&out.weight);
    d_hidden.relu_backward(pre);
    g_hidden.weight.add_assign(&input.t_matmul(&d_hidden));
    for (g, s) in g_hidden.bias.iter_mut().zip(d_hidden.column_sums()) {
        *g += s;
    }
    d_hidden.matmul_t(&hidden.weight)
}

/// Backpropagates output gradients (w.r.t. confidence logits and raw
/// displacements) into `grads`.
pub(crate) fn backward(
    w: &Weights,
    trace: &Trace,
    d_logits: &[f64],
    d_disp: &Matrix,
    grads: &mut Weights,
) {
    let h = &trace.heads;
    let d_logit_m = Matrix::from_vec(d_logits.len(), 1, d_logits.to_vec());

    let mut dx = head_backward(
        &w.conf_out,
        &w.conf_hidden,
        &h.conf_hidden,
        &h.conf_pre,
        &h.input,
        &d_logit_m,
        &mut grads.conf_out,
        &mut grads.conf_hidden,
    );
    dx.add_assign(&head_backward(
        &w.disp_out,
        &w.disp_hidden,
        &h.disp_hidden,
        &h.disp_pre,
        &h.input,
        d_disp,
        &mut grads.disp_out,
        &mut grads.disp_hidden,
    ));

    let mut d_images: Vec<Matrix> = trace.images.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let (sa, ca) = &w.attention[l];
        // Cross stage: x_k = after_self_k + CA(after_self_k, img_k).
        let mut d_after_self = dx.clone();
        for (k, cache) in lt.cross_caches.iter().enumerate() {
            let q = Matrix::from_vec(1, dx.cols, lt.after_self.row(k).to_vec());
            let d_out = Matrix::from_vec(1, dx.cols, dx.row(k).to_vec());
            let g = attend_backward(&q, &trace.images[k], ca, cache, &d_out);
            for (a, b) in d_after_self.row_mut(k).iter_mut().zip(&g.d_xq.data) {
                *a += b;
            }
            d_images[k].add_assign(&g.d_xkv);
            let gca = &mut grads.attention[l].1;
            gca.query.add_assign(&g.query);
            gca.key.add_assign(&g.key);
            gca.value.add_assign(&g.value);
            gca.output.add_assign(&g.output);
        }
        // Self stage: after_self = input + SA(input).
        let g = attend_backward(&lt.input, &lt.input, sa, &lt.self_cache, &d_after_self);
        let gsa = &mut grads.attention[l].0;
        gsa.query.add_assign(&g.query);
        gsa.key.add_assign(&g.key);
        gsa.value.add_assign(&g.value);
        gsa.output.add_assign(&g.output);
        dx = d_after_self;
        dx.add_assign(&g.d_xq);
        dx.add_assign(&g.d_xkv);
    }

    mlp_backward(&w.radar, &trace.radar, dx, &mut grads.radar);
    for (d_img, pt) in d_images.into_iter().zip(&trace.patches) {
        grads.position.add_assign(&d_img);
        mlp_backward(&w.patch, pt, d_img, &mut grads.patch);
    }
}

/// Runs the network on one frame: `features` is `K x 3`, one patch per row.
pub fn forward(params: &RefinerParams, features: &Matrix, patches: &[Patch]) -> Result<RefinerOutput, RefinerError> {
    let w = Weights::from_params(params);
    Ok(forward_traced(&w, &params.config, features, patches)?.0)
}
