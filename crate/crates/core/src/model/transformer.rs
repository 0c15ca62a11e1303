//! Forward and backward passes.
//!
//! Per block, with `x` the residual stream:
//!
//! ```text
//! a  = LN1(x)
//! o  = Attn(a Wq + bq, a Wk + bk, a Wv + bv) Wo + bo
//! x1 = x + drop(o)
//! f  = GELU(LN2(x1) Wi + bi) Wf + bf
//! f' = f + sum_t w_t relu(f D_t) U_t          (active adapters)
//! x2 = x1 + drop(f')
//! ```
//!
//! Every projection carries an optional LoRA term `s (x A) B`. Logits are
//! `LNf(x_L) H`, or `LNf(x_L) E^T` with a tied head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::loss::clm_loss_with_grad;
use super::{BackboneParams, LayerParams, LAYER_NORM_EPS};
use crate::adaptation::{
    AdaptationState, AdapterParams, LoraPair, LoraParams, Projection, Strategy,
};
use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::tokenizer;

/// Which logit rows contribute to the loss. Row `j` predicts `ids[j + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LossMask {
    All,
    /// Only rows predicting a token at index `>= start` of the sequence,
    /// i.e. the output segment of an encoded pair.
    OutputFrom(usize),
    Rows(Vec<bool>),
}

impl LossMask {
    pub fn resolve(&self, rows: usize) -> Result<Vec<bool>> {
        match self {
            LossMask::All => Ok(vec![true; rows]),
            LossMask::OutputFrom(start) => Ok((0..rows).map(|j| j + 1 >= *start).collect()),
            LossMask::Rows(m) if m.len() == rows => Ok(m.clone()),
            LossMask::Rows(m) => Err(Error::Shape(format!("mask of {} for {rows} rows", m.len()))),
        }
    }
}

/// What a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradRequest {
    pub backbone: bool,
    pub adaptation: bool,
    /// Enables residual dropout (at the configured rate) with this seed.
    pub dropout_seed: Option<u64>,
}

/// Gradient accumulators shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Option<BackboneParams>,
    pub adaptation: Option<AdaptationState>,
}

impl Gradients {
    pub fn zeros(
        params: &BackboneParams,
        adaptation: Option<&AdaptationState>,
        req: &GradRequest,
    ) -> Self {
        Gradients {
            backbone: req.backbone.then(|| params.zeros_like()),
            adaptation: if req.adaptation {
                adaptation.map(AdaptationState::zeros_like)
            } else {
                None
            },
        }
    }

    /// Squared L2 norm over every accumulated tensor.
    pub fn sum_sq(&self) -> f64 {
        let mut s = 0.0;
        if let Some(b) = &self.backbone {
            s += b
                .named_tensors()
                .iter()
                .map(|(_, t)| t.sum_sq())
                .sum::<f64>();
        }
        if let Some(a) = &self.adaptation {
            s += a
                .named_tensors()
                .iter()
                .map(|(_, t)| t.sum_sq())
                .sum::<f64>();
        }
        s
    }

    pub fn scale(&mut self, k: f64) {
        if let Some(b) = &mut self.backbone {
            for t in b.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        if let Some(a) = &mut self.adaptation {
            for (_, t) in a.named_tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

/// Resolved adaptation pieces for one pass.
struct Route<'a> {
    adapters: Vec<(f64, Task, &'a AdapterParams)>,
    lora: Option<&'a LoraParams>,
    prefixes: Option<&'a AdaptationState>,
}

impl<'a> Route<'a> {
    fn new(params: &BackboneParams, state: Option<&'a AdaptationState>) -> Result<Self> {
        let Some(s) = state else {
            return Ok(Route {
                adapters: Vec::new(),
                lora: None,
                prefixes: None,
            });
        };
        s.validate_against(&params.config)?;
        Ok(Route {
            adapters: s
                .adapter_route()
                .into_iter()
                .map(|(w, a)| (w, a.task, a))
                .collect(),
            lora: s.lora.as_ref(),
            prefixes: (s.strategy == Strategy::Seq2SeqUnified).then_some(s),
        })
    }

    fn lora(&self, layer: usize, p: Projection) -> Option<(&'a LoraPair, f64)> {
        self.lora.map(|l| (l.pair(layer, p), l.scaling()))
    }
}

struct Linear<'a> {
    w: &'a Tensor,
    b: &'a Tensor,
    lora: Option<(&'a LoraPair, f64)>,
}

impl<'a> Linear<'a> {
    fn of(layer: &'a LayerParams, idx: usize, p: Projection, route: &Route<'a>) -> Self {
        Linear {
            w: layer.weight(p),
            b: layer.bias(p),
            lora: route.lora(idx, p),
        }
    }

    /// Returns `(y, u)` where `u = x A` is kept for the backward pass.
    fn forward(&self, x: &[f64], t: usize) -> (Vec<f64>, Vec<f64>) {
        let (k, n) = self.w.shape();
        let mut y = Vec::with_capacity(t * n);
        for _ in 0..t {
            y.extend_from_slice(self.b.data());
        }
        matmul_acc(x, t, k, self.w.data(), n, &mut y);
        let mut u = Vec::new();
        if let Some((pair, s)) = self.lora {
            let r = pair.down.cols();
            u = vec![0.0; t * r];
            matmul_acc(x, t, k, pair.down.data(), r, &mut u);
            let su: Vec<f64> = u.iter().map(|v| v * s).collect();
            matmul_acc(&su, t, r, pair.up.data(), n, &mut y);
        }
        (y, u)
    }

    /// Accumulates into `dx` and into whichever gradient slots are given.
    fn backward(
        &self,
        x: &[f64],
        u: &[f64],
        dy: &[f64],
        t: usize,
        dwb: Option<(&mut Tensor, &mut Tensor)>,
        dlora: Option<&mut LoraPair>,
        dx: &mut [f64],
    ) {
        let (k, n) = self.w.shape();
        if let Some((dw, db)) = dwb {
            matmul_tn_acc(x, dy, t, k, n, dw.data_mut());
            for row in dy.chunks_exact(n) {
                axpy(1.0, row, db.data_mut());
            }
        }
        matmul_nt_acc(dy, self.w.data(), t, n, k, dx);
        if let Some((pair, s)) = self.lora {
            let r = pair.down.cols();
            let mut du = vec![0.0; t * r];
            matmul_nt_acc(dy, pair.up.data(), t, n, r, &mut du);
            du.iter_mut().for_each(|v| *v *= s);
            if let Some(g) = dlora {
                let su: Vec<f64> = u.iter().map(|v| v * s).collect();
                matmul_tn_acc(&su, dy, t, r, n, g.up.data_mut());
                matmul_tn_acc(x, &du, t, k, r, g.down.data_mut());
            }
            matmul_nt_acc(&du, pair.down.data(), t, r, k, dx);
        }
    }
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &Tensor, bias: &Tensor) -> (Vec<f64>, NormCache) {
    let t = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            out[i * d + c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    cache: &NormCache,
    dy: &[f64],
    d: usize,
    gain: &Tensor,
    grads: Option<(&mut Tensor, &mut Tensor)>,
    dx: &mut [f64],
) {
    let t = cache.rstd.len();
    if let Some((dg, db)) = grads {
        for i in 0..t {
            for c in 0..d {
                dg.data_mut()[c] += dy[i * d + c] * cache.xhat[i * d + c];
                db.data_mut()[c] += dy[i * d + c];
            }
        }
    }
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for c in 0..d {
            dxhat[c] = dy[i * d + c] * gain.data()[c];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        for c in 0..d {
            dx[i * d + c] += cache.rstd[i] * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let th = libm::tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

struct LayerCache {
    ln1: NormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    uq: Vec<f64>,
    uk: Vec<f64>,
    uv: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    uo: Vec<f64>,
    drop1: Option<Vec<f64>>,
    ln2: NormCache,
    b: Vec<f64>,
    f1: Vec<f64>,
    uf1: Vec<f64>,
    g: Vec<f64>,
    uf2: Vec<f64>,
    f: Vec<f64>,
    adapter_z: Vec<Vec<f64>>,
    drop2: Option<Vec<f64>>,
}

/// Embedding slot of each position: the token table, or a task prefix row.
#[derive(Clone, Copy)]
enum Slot {
    Token,
    Prefix(Task, usize),
}

struct Pass {
    t: usize,
    slots: Vec<Slot>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    /// Final hidden states after `LNf`.
    hidden: Vec<f64>,
}

fn check_ids(params: &BackboneParams, ids: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if ids.len() > cfg.max_context {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max: cfg.max_context,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn embed(params: &BackboneParams, ids: &[u32], route: &Route) -> (Vec<f64>, Vec<Slot>) {
    let d = params.config.d_model;
    let mut x = vec![0.0; ids.len() * d];
    let mut slots = Vec::with_capacity(ids.len());
    let mut seen: BTreeMap<Task, usize> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let mut slot = Slot::Token;
        if let (Some(state), Some(task)) = (route.prefixes, tokenizer::prefix_task(id)) {
            if let Some(p) = state.prefixes.get(&task) {
                let k = seen.entry(task).or_insert(0);
                if *k < p.vectors.rows() {
                    slot = Slot::Prefix(task, *k);
                }
                *k += 1;
            }
        }
        let row = &mut x[i * d..(i + 1) * d];
        match slot {
            Slot::Token => row.copy_from_slice(params.token_embedding.row(id as usize)),
            Slot::Prefix(task, k) => {
                row.copy_from_slice(route.prefixes.unwrap().prefixes[&task].vectors.row(k))
            }
        }
        axpy(1.0, params.position_embedding.row(i), row);
        slots.push(slot);
    }
    (x, slots)
}

fn dropout_mask(len: usize, p: f64, rng: &mut rng::Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng::uniform(rng) < p { 0.0 } else { keep })
        .collect()
}

fn run(params: &BackboneParams, ids: &[u32], route: &Route, dropout_seed: Option<u64>) -> Pass {
    let cfg = &params.config;
    let (t, d, nh, hd) = (ids.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut drop_rng = dropout_seed.filter(|_| cfg.dropout > 0.0).map(rng::seeded);
    let (mut x, slots) = embed(params, ids, route);
    let mut caches = Vec::with_capacity(cfg.n_layers);

    for (li, layer) in params.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, d, &layer.ln1_gain, &layer.ln1_bias);
        let (q, uq) = Linear::of(layer, li, Projection::Query, route).forward(&a, t);
        let (k, uk) = Linear::of(layer, li, Projection::Key, route).forward(&a, t);
        let (v, uv) = Linear::of(layer, li, Projection::Value, route).forward(&a, t);

        let mut probs = vec![0.0; nh * t * t];
        let mut ctx = vec![0.0; t * d];
        for h in 0..nh {
            let off = h * hd;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + hd];
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    p[j] = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                    max = max.max(p[j]);
                }
                let mut sum = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = libm::exp(*pj - max);
                    sum += *pj;
                }
                let c = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    p[j] /= sum;
                    axpy(p[j], &v[j * d + off..j * d + off + hd], c);
                }
            }
        }
        let (mut o, uo) = Linear::of(layer, li, Projection::Output, route).forward(&ctx, t);
        let drop1 = drop_rng
            .as_mut()
            .map(|r| dropout_mask(t * d, cfg.dropout, r));
        if let Some(m) = &drop1 {
            o.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        axpy(1.0, &o, &mut x);

        let (b, ln2) = layer_norm(&x, d, &layer.ln2_gain, &layer.ln2_bias);
        let (f1, uf1) = Linear::of(layer, li, Projection::FfIn, route).forward(&b, t);
        let g: Vec<f64> = f1.iter().map(|v| gelu(*v)).collect();
        let (f, uf2) = Linear::of(layer, li, Projection::FfOut, route).forward(&g, t);

        let mut fp = f.clone();
        let mut adapter_z = Vec::with_capacity(route.adapters.len());
        for (w, _, ad) in &route.adapters {
            let al = &ad.layers[li];
            let r = ad.rank;
            let mut z = vec![0.0; t * r];
            matmul_acc(&f, t, d, al.down.data(), r, &mut z);
            let act: Vec<f64> = z.iter().map(|v| w * v.max(0.0)).collect();
            matmul_acc(&act, t, r, al.up.data(), d, &mut fp);
            adapter_z.push(z);
        }
        let drop2 = drop_rng
            .as_mut()
            .map(|r| dropout_mask(t * d, cfg.dropout, r));
        if let Some(m) = &drop2 {
            fp.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        axpy(1.0, &fp, &mut x);

        caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            uq,
            uk,
            uv,
            probs,
            ctx,
            uo,
            drop1,
            ln2,
            b,
            f1,
            uf1,
            g,
            uf2,
            f,
            adapter_z,
            drop2,
        });
    }
    let (hidden, final_norm) = layer_norm(&x, d, &params.final_gain, &params.final_bias);
    Pass {
        t,
        slots,
        layers: caches,
        final_norm,
        hidden,
    }
}

/// Logits for the hidden rows `from..t`.
fn logits_from(params: &BackboneParams, hidden: &[f64], from: usize, t: usize) -> Tensor {
    let (d, vsz) = (params.config.d_model, params.config.vocab_size);
    let rows = t - from;
    let h = &hidden[from * d..t * d];
    let mut out = vec![0.0; rows * vsz];
    match &params.head {
        Some(w) => matmul_acc(h, rows, d, w.data(), vsz, &mut out),
        None => matmul_nt_acc(h, params.token_embedding.data(), rows, d, vsz, &mut out),
    }
    Tensor::from_vec(rows, vsz, out).expect("logit buffer matches its shape")
}

/// Logits (`len x vocab_size`) for every position.
pub fn forward(
    params: &BackboneParams,
    ids: &[u32],
    adaptation: Option<&AdaptationState>,
) -> Result<Tensor> {
    check_ids(params, ids)?;
    let route = Route::new(params, adaptation)?;
    let pass = run(params, ids, &route, None);
    Ok(logits_from(params, &pass.hidden, 0, pass.t))
}

/// Logits of the last position only; used by generation.
pub(crate) fn forward_last(
    params: &BackboneParams,
    ids: &[u32],
    adaptation: Option<&AdaptationState>,
) -> Result<Vec<f64>> {
    check_ids(params, ids)?;
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let route = Route::new(params, adaptation)?;
    let pass = run(params, ids, &route, None);
    Ok(logits_from(params, &pass.hidden, pass.t - 1, pass.t).into_data())
}

/// Final-layer hidden states (`len x d_model`, after the last layer norm).
pub fn hidden_states(
    params: &BackboneParams,
    ids: &[u32],
    adaptation: Option<&AdaptationState>,
) -> Result<Tensor> {
    check_ids(params, ids)?;
    let route = Route::new(params, adaptation)?;
    let pass = run(params, ids, &route, None);
    Tensor::from_vec(pass.t, params.config.d_model, pass.hidden)
}

/// Next-token loss of `ids` (rows predict `ids[1..]`), accumulating
/// `weight * gradient` into `grads`. Returns the unweighted loss.
pub fn loss_and_grads(
    params: &BackboneParams,
    ids: &[u32],
    mask: &LossMask,
    adaptation: Option<&AdaptationState>,
    req: &GradRequest,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    check_ids(params, ids)?;
    if ids.len() < 2 {
        return Err(Error::AllMasked);
    }
    let route = Route::new(params, adaptation)?;
    let inputs = &ids[..ids.len() - 1];
    let mask = mask.resolve(inputs.len())?;
    let pass = run(params, inputs, &route, req.dropout_seed);
    let logits = logits_from(params, &pass.hidden, 0, pass.t);
    let (loss, mut dlogits) = clm_loss_with_grad(&logits, &ids[1..], &mask)?;
    dlogits.data_mut().iter_mut().for_each(|v| *v *= weight);
    backward(params, inputs, &route, &pass, dlogits.data(), grads);
    Ok(loss)
}

fn backward(
    params: &BackboneParams,
    ids: &[u32],
    route: &Route,
    pass: &Pass,
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let cfg = &params.config;
    let (t, d, nh, hd, vsz) = (
        pass.t,
        cfg.d_model,
        cfg.n_heads,
        cfg.head_dim(),
        cfg.vocab_size,
    );
    let rows = t;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let Gradients {
        backbone: gb,
        adaptation: ga,
    } = grads;
    let mut gb = gb.as_mut();
    let mut ga = ga.as_mut();

    let mut dh = vec![0.0; t * d];
    let h = &pass.hidden[..];
    match &params.head {
        Some(w) => {
            if let Some(g) = gb.as_deref_mut() {
                matmul_tn_acc(
                    h,
                    dlogits,
                    rows,
                    d,
                    vsz,
                    g.head.as_mut().expect("gradient mirrors head").data_mut(),
                );
            }
            matmul_nt_acc(dlogits, w.data(), rows, vsz, d, &mut dh);
        }
        None => {
            if let Some(g) = gb.as_deref_mut() {
                matmul_tn_acc(dlogits, h, rows, vsz, d, g.token_embedding.data_mut());
            }
            matmul_acc(
                dlogits,
                rows,
                vsz,
                params.token_embedding.data(),
                d,
                &mut dh,
            );
        }
    }

    let mut dx = vec![0.0; t * d];
    layer_norm_backward(
        &pass.final_norm,
        &dh,
        d,
        &params.final_gain,
        gb.as_deref_mut()
            .map(|g| (&mut g.final_gain, &mut g.final_bias)),
        &mut dx,
    );

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let c = &pass.layers[li];

        // feed-forward branch
        let mut dfp = dx.clone();
        if let Some(m) = &c.drop2 {
            dfp.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        let mut df = dfp.clone();
        for ((w, task, ad), z) in route.adapters.iter().zip(&c.adapter_z) {
            let al = &ad.layers[li];
            let r = ad.rank;
            let act: Vec<f64> = z.iter().map(|v| w * v.max(0.0)).collect();
            let mut dact = vec![0.0; t * r];
            matmul_nt_acc(&dfp, al.up.data(), t, d, r, &mut dact);
            let dz: Vec<f64> = dact
                .iter()
                .zip(z)
                .map(|(g, z)| if *z > 0.0 { g * w } else { 0.0 })
                .collect();
            if let Some(ga) = ga.as_deref_mut() {
                let gl = &mut ga
                    .adapters
                    .get_mut(task)
                    .expect("gradient mirrors adapters")
                    .layers[li];
                matmul_tn_acc(&act, &dfp, t, r, d, gl.up.data_mut());
                matmul_tn_acc(&c.f, &dz, t, d, r, gl.down.data_mut());
            }
            matmul_nt_acc(&dz, al.down.data(), t, r, d, &mut df);
        }

        let mut dg = vec![0.0; t * cfg.d_ff];
        {
            let (gw, gl) = split_grads(&mut gb, &mut ga, li, Projection::FfOut);
            Linear::of(layer, li, Projection::FfOut, route)
                .backward(&c.g, &c.uf2, &df, t, gw, gl, &mut dg);
        }
        let df1: Vec<f64> = dg
            .iter()
            .zip(&c.f1)
            .map(|(g, x)| g * gelu_grad(*x))
            .collect();
        let mut db = vec![0.0; t * d];
        {
            let (gw, gl) = split_grads(&mut gb, &mut ga, li, Projection::FfIn);
            Linear::of(layer, li, Projection::FfIn, route)
                .backward(&c.b, &c.uf1, &df1, t, gw, gl, &mut db);
        }
        layer_norm_backward(
            &c.ln2,
            &db,
            d,
            &layer.ln2_gain,
            gb.as_deref_mut().map(|g| {
                let l = &mut g.layers[li];
                (&mut l.ln2_gain, &mut l.ln2_bias)
            }),
            &mut dx,
        );

        // attention branch
        let mut do_ = dx.clone();
        if let Some(m) = &c.drop1 {
            do_.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        let mut dctx = vec![0.0; t * d];
        {
            let (gw, gl) = split_grads(&mut gb, &mut ga, li, Projection::Output);
            Linear::of(layer, li, Projection::Output, route)
                .backward(&c.ctx, &c.uo, &do_, t, gw, gl, &mut dctx);
        }
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for hh in 0..nh {
            let off = hh * hd;
            for i in 0..t {
                let p = &c.probs[(hh * t + i) * t..(hh * t + i) * t + t];
                let dci = &dctx[i * d + off..i * d + off + hd];
                let mut rowsum = 0.0;
                for j in 0..=i {
                    dp[j] = dot(dci, &c.v[j * d + off..j * d + off + hd]);
                    rowsum += dp[j] * p[j];
                    axpy(p[j], dci, &mut dv[j * d + off..j * d + off + hd]);
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - rowsum) * scale;
                    if ds != 0.0 {
                        axpy(
                            ds,
                            &c.k[j * d + off..j * d + off + hd],
                            &mut dq[i * d + off..i * d + off + hd],
                        );
                        axpy(
                            ds,
                            &c.q[i * d + off..i * d + off + hd],
                            &mut dk[j * d + off..j * d + off + hd],
                        );
                    }
                }
            }
        }
        let mut da = vec![0.0; t * d];
        for (p, dy, u) in [
            (Projection::Query, &dq, &c.uq),
            (Projection::Key, &dk, &c.uk),
            (Projection::Value, &dv, &c.uv),
        ] {
            let (gw, gl) = split_grads(&mut gb, &mut ga, li, p);
            Linear::of(layer, li, p, route).backward(&c.a, u, dy, t, gw, gl, &mut da);
        }
        layer_norm_backward(
            &c.ln1,
            &da,
            d,
            &layer.ln1_gain,
            gb.as_deref_mut().map(|g| {
                let l = &mut g.layers[li];
                (&mut l.ln1_gain, &mut l.ln1_bias)
            }),
            &mut dx,
        );
    }

    for (i, (&id, slot)) in ids.iter().zip(&pass.slots).enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        if let Some(g) = gb.as_deref_mut() {
            axpy(1.0, row, g.position_embedding.row_mut(i));
            if let Slot::Token = slot {
                axpy(1.0, row, g.token_embedding.row_mut(id as usize));
            }
        }
        if let (Slot::Prefix(task, k), Some(ga)) = (slot, ga.as_deref_mut()) {
            let p = ga
                .prefixes
                .get_mut(task)
                .expect("gradient mirrors prefixes");
            axpy(1.0, row, p.vectors.row_mut(*k));
        }
    }
}

type LinearGrads<'g> = (
    Option<(&'g mut Tensor, &'g mut Tensor)>,
    Option<&'g mut LoraPair>,
);

fn split_grads<'g>(
    gb: &'g mut Option<&mut BackboneParams>,
    ga: &'g mut Option<&mut AdaptationState>,
    layer: usize,
    p: Projection,
) -> LinearGrads<'g> {
    let wb = gb.as_deref_mut().map(|g| {
        let l = &mut g.layers[layer];
        match p {
            Projection::Query => (&mut l.query, &mut l.query_bias),
            Projection::Key => (&mut l.key, &mut l.key_bias),
            Projection::Value => (&mut l.value, &mut l.value_bias),
            Projection::Output => (&mut l.output, &mut l.output_bias),
            Projection::FfIn => (&mut l.ff_in, &mut l.ff_in_bias),
            Projection::FfOut => (&mut l.ff_out, &mut l.ff_out_bias),
        }
    });
    let lp = ga
        .as_deref_mut()
        .and_then(|a| a.lora.as_mut())
        .map(|l| &mut l.layers[layer][p.index()]);
    (wb, lp)
}
