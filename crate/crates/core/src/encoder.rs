//! Per-station encoding: waveform convolution stack, geographic positional
//! encoding, weighted fusion and early locality embeddings.

use numcore::{Graph, Tensor, Var};

use crate::model::{AlphaMode, Bound, ConvLayer, Init, ModelConfig, ModelError, ParamStore};

pub(crate) fn init_encoder(cfg: &ModelConfig, init: &mut Init<'_>) -> Result<(), ModelError> {
    let mut in_channels = 1;
    for (i, layer) in cfg.conv_stack.layers.iter().enumerate() {
        match *layer {
            ConvLayer::PerComponent { filters, kernel, .. } | ConvLayer::Conv1d { filters, kernel, .. } => {
                let fan_in = in_channels * kernel;
                init.uniform(format!("conv.{i}.w"), &[filters, in_channels, kernel], fan_in, 6.0);
                init.constant(format!("conv.{i}.b"), &[filters], 0.0);
                in_channels = filters;
            }
            ConvLayer::Conv2d {
                filters,
                kernel,
                stride,
            } => {
                let fan_in = in_channels * kernel.0 * kernel.1;
                init.uniform(
                    format!("conv.{i}.w"),
                    &[filters, in_channels, kernel.0, kernel.1],
                    fan_in,
                    6.0,
                );
                init.constant(format!("conv.{i}.b"), &[filters], 0.0);
                in_channels = filters * ((3 - kernel.1) / stride.1 + 1);
            }
            ConvLayer::MaxPool { .. } => {}
        }
    }
    let flat = cfg.conv_stack.flat_len(cfg.window_samples)?;
    init.linear("conv.proj", flat, cfg.d_model, 3.0);
    init.constant("fusion.logits".into(), &[cfg.n_stations, 1], 0.0);
    init.constant("early_locality".into(), &[cfg.n_stations, cfg.d_model], 0.0);
    Ok(())
}

/// Signed log amplitude compression applied to raw %g traces.
pub fn compress_amplitudes(waveforms: &Tensor, floor: f32) -> Tensor {
    let data = waveforms
        .data()
        .iter()
        .map(|&v| v.signum() * (v.abs() / floor).ln_1p())
        .collect();
    Tensor::new(waveforms.shape().to_vec(), data).expect("shape unchanged")
}

/// Maps compressed `[N, 3, T]` waveforms to `[N, d_model]` features.
pub fn conv_module_forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig, waveforms: Var) -> Result<Var, ModelError> {
    let shape = g.shape(waveforms).to_vec();
    if shape.len() != 3 || shape[1] != 3 || shape[2] != cfg.window_samples {
        return Err(ModelError::Input(format!(
            "expected waveforms [N, 3, {}], got {shape:?}",
            cfg.window_samples
        )));
    }
    let n = shape[0];
    let mut x = g.reshape(waveforms, &[n * 3, 1, cfg.window_samples])?;
    for (i, layer) in cfg.conv_stack.layers.iter().enumerate() {
        let w = || p.get(&format!("conv.{i}.w"));
        let b = || p.get(&format!("conv.{i}.b"));
        x = match *layer {
            ConvLayer::PerComponent { stride, .. } => {
                let y = g.conv1d(x, w()?, b()?, stride)?;
                let y = g.relu(y);
                let s = g.shape(y).to_vec();
                let y = g.reshape(y, &[n, 3, s[1], s[2]])?;
                g.permute(y, &[0, 2, 3, 1])?
            }
            ConvLayer::Conv2d { stride, .. } => {
                let y = g.conv2d(x, w()?, b()?, stride)?;
                let y = g.relu(y);
                let s = g.shape(y).to_vec();
                let y = g.permute(y, &[0, 1, 3, 2])?;
                g.reshape(y, &[n, s[1] * s[3], s[2]])?
            }
            ConvLayer::Conv1d { stride, .. } => {
                let y = g.conv1d(x, w()?, b()?, stride)?;
                g.relu(y)
            }
            ConvLayer::MaxPool { kernel, stride } => g.max_pool1d(x, kernel, stride)?,
        };
    }
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[n, s[1] * s[2]])?;
    Ok(g.linear(flat, p.get("conv.proj.w")?, p.get("conv.proj.b")?)?)
}

/// Sizes of the (longitude, latitude, height) blocks for an even `d_model`.
/// Sine/cosine pairs are dealt out evenly; leftover pairs go to longitude
/// first, then latitude.
pub fn positional_block_sizes(d_model: usize) -> [usize; 3] {
    let pairs = d_model / 2;
    let base = pairs / 3;
    let extra = pairs % 3;
    [
        2 * (base + usize::from(extra >= 1)),
        2 * (base + usize::from(extra >= 2)),
        2 * base,
    ]
}

/// Geometric wavelength `i` of `m` spanning `[lo, hi]`.
pub fn wavelength(i: usize, m: usize, (lo, hi): (f64, f64)) -> f64 {
    if m <= 1 {
        lo
    } else {
        lo * (hi / lo).powf(i as f64 / (m - 1) as f64)
    }
}

/// Parameter-free encoding of (longitude, latitude, height) into `d_model`
/// values laid out as `[sin, cos]` pairs per wavelength.
pub fn positional_encoding(cfg: &ModelConfig, coords: [f64; 3]) -> Vec<f32> {
    let sizes = positional_block_sizes(cfg.d_model);
    let ranges = [cfg.angle_wavelengths, cfg.angle_wavelengths, cfg.height_wavelengths];
    let mut out = Vec::with_capacity(cfg.d_model);
    for ((size, range), x) in sizes.iter().zip(ranges).zip(coords) {
        let m = size / 2;
        for i in 0..m {
            let phase = x / wavelength(i, m, range);
            out.push(phase.sin() as f32);
            out.push(phase.cos() as f32);
        }
    }
    out
}

pub fn positional_encoding_batch(cfg: &ModelConfig, coords: &[[f64; 3]]) -> Tensor {
    let data: Vec<f32> = coords.iter().flat_map(|c| positional_encoding(cfg, *c)).collect();
    Tensor::new(vec![coords.len(), cfg.d_model], data).expect("encoding shape")
}

fn check_ids(ids: &[usize], n_stations: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&i| i >= n_stations) {
        Some(&id) => Err(ModelError::UnknownStation { id, n_stations }),
        None => Ok(()),
    }
}

/// `alpha * W + (1 - alpha) * G` per station, with `alpha = sigmoid(logit)`
/// or the constant 0.5.
pub fn fuse(g: &mut Graph, p: &Bound, w: Var, geo: Var, ids: &[usize], alpha: AlphaMode) -> Result<Var, ModelError> {
    let logits = p.get("fusion.logits")?;
    check_ids(ids, g.shape(logits)[0])?;
    match alpha {
        AlphaMode::Pinned => {
            let sum = g.add(w, geo)?;
            Ok(g.scale(sum, 0.5))
        }
        AlphaMode::Learned => {
            let rows = g.gather(logits, ids)?;
            let a = g.sigmoid(rows);
            let b = g.one_minus(a);
            let wa = g.mul_rows(w, a)?;
            let gb = g.mul_rows(geo, b)?;
            Ok(g.add(wa, gb)?)
        }
    }
}

/// Current fusion weights `sigmoid(logit_n)` for every station.
pub fn alpha_values(params: &ParamStore) -> Vec<f32> {
    params
        .get("fusion.logits")
        .map(|t| t.data().iter().map(|&v| numcore::sigmoid(v)).collect())
        .unwrap_or_default()
}

pub fn add_early_locality(g: &mut Graph, p: &Bound, h0: Var, ids: &[usize]) -> Result<Var, ModelError> {
    add_locality(g, p.get("early_locality")?, h0, ids)
}

pub(crate) fn add_locality(g: &mut Graph, table: Var, h: Var, ids: &[usize]) -> Result<Var, ModelError> {
    check_ids(ids, g.shape(table)[0])?;
    let rows = g.gather(table, ids)?;
    Ok(g.add(h, rows)?)
}
