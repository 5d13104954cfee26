//! Traffic and logic encoders.
//!
//! Traffic: per-packet embedding (scaled length, version and flow
//! embeddings) → convolution blocks (conv, GELU, pairwise average pooling)
//! → mean over time → two-layer head → unit norm.
//!
//! Logic: per-resource embedding (continuous columns, HTTP version, MIME
//! and address embeddings) → linear map → pre-norm transformer layers →
//! mean over resources → two-layer head → unit norm.
//!
//! Both encoders only ever see the valid rows of their input, so padding
//! has no effect on the result.

use std::thread;

use super::params::{ModelConfig, ModelParams};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::{logic_col, LogicMatrix, TrafficMatrix, LOGIC_COLS, TRAFFIC_COLS};

const LOGIC_CONT_COLS: [usize; ModelConfig::LOGIC_CONT] = [
    logic_col::HUFFMAN_LEN,
    logic_col::RAW_LEN,
    logic_col::RESPONSE_SIZE,
    logic_col::HEADER_LEN,
    logic_col::ALT_SVC,
];

fn clamp_index(x: f64, max: usize) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x as usize).min(max)
    }
}

fn linear(t: &mut Tape, p: &ModelParams, x: Var, name: &str) -> Var {
    let w = t.param(p.store.id(&format!("{name}.w")));
    let b = t.param(p.store.id(&format!("{name}.b")));
    let h = t.matmul(x, w);
    t.add_bias(h, b)
}

fn layer_norm(t: &mut Tape, p: &ModelParams, x: Var, name: &str) -> Var {
    let g = t.param(p.store.id(&format!("{name}.g")));
    let b = t.param(p.store.id(&format!("{name}.b")));
    t.layer_norm(x, g, b)
}

fn head(t: &mut Tape, p: &ModelParams, x: Var, prefix: &str) -> Var {
    let h = linear(t, p, x, &format!("{prefix}.head0"));
    let h = t.gelu(h);
    let h = linear(t, p, h, &format!("{prefix}.head1"));
    t.l2_normalize(h)
}

/// Records the traffic encoder on `t`. Returns the continuous input column
/// (for attribution) and the unit-norm embedding.
pub(crate) fn traffic_forward(
    t: &mut Tape,
    p: &ModelParams,
    m: &TrafficMatrix,
) -> Result<(Var, Var)> {
    let rows = m.valid_rows();
    if rows.is_empty() {
        return Err(Error::EmptyInput("traffic matrix has no valid rows"));
    }
    let cfg = &p.config;
    let cont = t.input(Tensor::from_vec(
        rows.len(),
        1,
        rows.iter().map(|r| r[0]).collect(),
    ));
    let vt = t.param(p.store.id("traffic.embed_version"));
    let ve = t.gather(vt, rows.iter().map(|r| clamp_index(r[1], 3)).collect());
    let ft = t.param(p.store.id("traffic.embed_flow"));
    let fe = t.gather(
        ft,
        rows.iter()
            .map(|r| clamp_index(r[2], cfg.index_clamp))
            .collect(),
    );
    let mut x = t.concat_cols(&[cont, ve, fe]);
    for i in 0..cfg.conv_widths.len() {
        let cols = t.im2col(x, cfg.conv_kernel);
        let h = linear(t, p, cols, &format!("traffic.conv{i}"));
        let h = t.gelu(h);
        x = if t.value(h).rows > 1 {
            t.avg_pool2(h)
        } else {
            h
        };
    }
    let pooled = t.mean_rows(x);
    Ok((cont, head(t, p, pooled, "traffic")))
}

/// Records the logic encoder on `t`. Returns the continuous input block and
/// the unit-norm embedding.
pub(crate) fn logic_forward(t: &mut Tape, p: &ModelParams, m: &LogicMatrix) -> Result<(Var, Var)> {
    let rows = m.valid_rows();
    if rows.is_empty() {
        return Err(Error::EmptyInput("logic matrix has no valid rows"));
    }
    let cfg = &p.config;
    let cont_data = rows
        .iter()
        .flat_map(|r| LOGIC_CONT_COLS.iter().map(move |&c| r[c]))
        .collect();
    let cont = t.input(Tensor::from_vec(
        rows.len(),
        LOGIC_CONT_COLS.len(),
        cont_data,
    ));
    let ht = t.param(p.store.id("logic.embed_http"));
    let he = t.gather(
        ht,
        rows.iter()
            .map(|r| clamp_index(r[logic_col::HTTP_VERSION], 3))
            .collect(),
    );
    let mt = t.param(p.store.id("logic.embed_mime"));
    let me = t.gather(
        mt,
        rows.iter()
            .map(|r| clamp_index(r[logic_col::MIME], 7))
            .collect(),
    );
    let it = t.param(p.store.id("logic.embed_ip"));
    let ie = t.gather(
        it,
        rows.iter()
            .map(|r| clamp_index(r[logic_col::IP_INDEX], cfg.index_clamp))
            .collect(),
    );
    let x = t.concat_cols(&[cont, he, me, ie]);
    let mut h = linear(t, p, x, "logic.in");

    let dm = cfg.d_model;
    let hd = dm / cfg.n_heads;
    let att_scale = 1.0 / (hd as f64).sqrt();
    for l in 0..cfg.n_layers {
        let a = layer_norm(t, p, h, &format!("logic.layer{l}.ln1"));
        let qkv = linear(t, p, a, &format!("logic.layer{l}.qkv"));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for i in 0..cfg.n_heads {
            let q = t.slice_cols(qkv, i * hd, hd);
            let k = t.slice_cols(qkv, dm + i * hd, hd);
            let v = t.slice_cols(qkv, 2 * dm + i * hd, hd);
            let s = t.matmul_bt(q, k);
            let s = t.scale(s, att_scale);
            let w = t.softmax_rows(s);
            heads.push(t.matmul(w, v));
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)
        };
        let o = linear(t, p, o, &format!("logic.layer{l}.out"));
        h = t.add(h, o);
        let a = layer_norm(t, p, h, &format!("logic.layer{l}.ln2"));
        let f = linear(t, p, a, &format!("logic.layer{l}.ffn0"));
        let f = t.gelu(f);
        let f = linear(t, p, f, &format!("logic.layer{l}.ffn1"));
        h = t.add(h, f);
    }
    let h = layer_norm(t, p, h, "logic.ln_f");
    let pooled = t.mean_rows(h);
    Ok((cont, head(t, p, pooled, "logic")))
}

/// Unit-norm traffic embedding.
pub fn encode_traffic_embed(p: &ModelParams, m: &TrafficMatrix) -> Result<Vec<f64>> {
    p.check_finite()?;
    let mut t = Tape::new(&p.store);
    let (_, z) = traffic_forward(&mut t, p, m)?;
    Ok(t.value(z).data.clone())
}

/// Unit-norm logic embedding.
pub fn encode_logic_embed(p: &ModelParams, m: &LogicMatrix) -> Result<Vec<f64>> {
    p.check_finite()?;
    let mut t = Tape::new(&p.store);
    let (_, z) = logic_forward(&mut t, p, m)?;
    Ok(t.value(z).data.clone())
}

fn parallel_map<T: Sync, F>(items: &[T], threads: usize, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&T) -> Result<Vec<f64>> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<f64>>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("embedding worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Embeds many traces; the result does not depend on `threads`.
pub fn embed_traffic_batch(
    p: &ModelParams,
    ms: &[TrafficMatrix],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    p.check_finite()?;
    parallel_map(ms, threads, |m| {
        let mut t = Tape::new(&p.store);
        let (_, z) = traffic_forward(&mut t, p, m)?;
        Ok(t.value(z).data.clone())
    })
}

/// Embeds many logic profiles; the result does not depend on `threads`.
pub fn embed_logic_batch(
    p: &ModelParams,
    ms: &[LogicMatrix],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    p.check_finite()?;
    parallel_map(ms, threads, |m| {
        let mut t = Tape::new(&p.store);
        let (_, z) = logic_forward(&mut t, p, m)?;
        Ok(t.value(z).data.clone())
    })
}

/// Input to attribute.
#[derive(Debug, Clone, Copy)]
pub enum ModalityInput<'a> {
    Traffic(&'a TrafficMatrix),
    Logic(&'a LogicMatrix),
}

/// Gradient × input of `⟨z, reference⟩` for every matrix entry, including
/// padding rows. Categorical columns enter through embedding lookups and
/// have no input gradient; their attribution is zero.
pub fn grad_x_input(
    p: &ModelParams,
    input: ModalityInput<'_>,
    reference: &[f64],
) -> Result<Vec<Vec<f64>>> {
    p.check_finite()?;
    let norm = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if reference.len() != p.config.d || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "reference must be a unit vector of length {}",
            p.config.d
        )));
    }
    let mut t = Tape::new(&p.store);
    let (cont, z) = match input {
        ModalityInput::Traffic(m) => traffic_forward(&mut t, p, m)?,
        ModalityInput::Logic(m) => logic_forward(&mut t, p, m)?,
    };
    let seed = Tensor::from_vec(1, reference.len(), reference.to_vec());
    let mut sink = p.store.zeros_like();
    let grads = t.backward(z, seed, &mut sink);
    let g = grads[cont.index()].clone().unwrap_or_else(|| {
        let v = t.value(cont);
        Tensor::zeros(v.rows, v.cols)
    });
    let out = match input {
        ModalityInput::Traffic(m) => m
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let mut a = vec![0.0; TRAFFIC_COLS];
                if r < m.valid_len {
                    a[0] = g.get(r, 0) * row[0];
                }
                a
            })
            .collect(),
        ModalityInput::Logic(m) => m
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let mut a = vec![0.0; LOGIC_COLS];
                if r < m.valid_len {
                    for (j, &c) in LOGIC_CONT_COLS.iter().enumerate() {
                        a[c] = g.get(r, j) * row[c];
                    }
                }
                a
            })
            .collect(),
    };
    Ok(out)
}
