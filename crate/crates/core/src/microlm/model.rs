//! Pre-LayerNorm decoder-only transformer with hand-written backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::{
    gelu, gelu_grad, layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd, softmax_in_place,
    Matrix,
};
use super::tokenizer::{TokenId, BASE_VOCAB};
use crate::error::{Error, Result};

/// Architecture of the micro model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub context_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: BASE_VOCAB,
            embed_dim: 128,
            num_heads: 4,
            num_layers: 4,
            context_len: 256,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration suitable for running the full pipeline on one
    /// CPU core in a few minutes.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 48,
            num_heads: 4,
            num_layers: 2,
            context_len: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.context_len < 16 {
            return Err(Error::Config(format!(
                "context_len {} is below the minimum of 16",
                self.context_len
            )));
        }
        if self.vocab_size < BASE_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} is below {BASE_VOCAB}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    fn ff_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn range(self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_g: Span,
    ln1_b: Span,
    w_qkv: Span,
    b_qkv: Span,
    w_o: Span,
    b_o: Span,
    ln2_g: Span,
    ln2_b: Span,
    w_fc: Span,
    b_fc: Span,
    w_proj: Span,
    b_proj: Span,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    wte: Span,
    wpe: Span,
    layers: Vec<LayerLayout>,
    lnf_g: Span,
    lnf_b: Span,
    w_head: Span,
    b_head: Span,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut take = |len: usize| {
            let s = Span { start: next, len };
            next += len;
            s
        };
        let (c, f, v) = (cfg.embed_dim, cfg.ff_dim(), cfg.vocab_size);
        let wte = take(v * c);
        let wpe = take(cfg.context_len * c);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerLayout {
                ln1_g: take(c),
                ln1_b: take(c),
                w_qkv: take(c * 3 * c),
                b_qkv: take(3 * c),
                w_o: take(c * c),
                b_o: take(c),
                ln2_g: take(c),
                ln2_b: take(c),
                w_fc: take(c * f),
                b_fc: take(f),
                w_proj: take(f * c),
                b_proj: take(c),
            })
            .collect();
        let lnf_g = take(c);
        let lnf_b = take(c);
        let w_head = take(c * v);
        let b_head = take(v);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            total: next,
        }
    }
}

/// The micro decoder-only language model.
#[derive(Debug, Clone)]
pub struct MicroLm {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations saved by [`MicroLm::forward_cached`] for the backward pass.
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    hf: Vec<f64>,
    rows: Vec<bool>,
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    att_out: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    fc: Vec<f64>,
    act: Vec<f64>,
}

impl MicroLm {
    /// Builds a freshly initialised model from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.num_layers as f64).sqrt())
            .expect("valid normal");
        let mut fill = |params: &mut [f64], span: Span, dist: &Normal<f64>| {
            for p in &mut params[span.range()] {
                *p = dist.sample(&mut rng);
            }
        };
        fill(&mut params, layout.wte, &normal);
        fill(&mut params, layout.wpe, &normal);
        for l in &layout.layers {
            params[l.ln1_g.range()].fill(1.0);
            params[l.ln2_g.range()].fill(1.0);
            fill(&mut params, l.w_qkv, &normal);
            fill(&mut params, l.w_o, &resid);
            fill(&mut params, l.w_fc, &normal);
            fill(&mut params, l.w_proj, &resid);
        }
        params[layout.lnf_g.range()].fill(1.0);
        fill(&mut params, layout.w_head, &normal);
        Ok(MicroLm {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from stored weights.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(MicroLm {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Zeroes the output projection so every position predicts the uniform
    /// distribution over the vocabulary.
    pub fn zero_output_head(&mut self) {
        let (w, b) = (self.layout.w_head, self.layout.b_head);
        self.params[w.range()].fill(0.0);
        self.params[b.range()].fill(0.0);
    }

    fn p(&self, s: Span) -> &[f64] {
        &self.params[s.range()]
    }

    /// Next-token logits for every position.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Matrix> {
        Ok(self.forward_cached(tokens, None)?.0)
    }

    /// Forward pass that keeps activations for [`MicroLm::backward`]. When
    /// `rows` is given, logits are only computed for flagged positions and
    /// the rest are left at zero.
    pub fn forward_cached(
        &self,
        tokens: &[TokenId],
        rows: Option<&[bool]>,
    ) -> Result<(Matrix, ForwardCache)> {
        let cfg = &self.config;
        let t_len = tokens.len();
        if t_len > cfg.context_len {
            return Err(Error::ContextOverflow {
                len: t_len,
                context_len: cfg.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        if let Some(r) = rows {
            if r.len() != t_len {
                return Err(Error::Shape("row selector length".into()));
            }
        }
        let (c, f, v) = (cfg.embed_dim, cfg.ff_dim(), cfg.vocab_size);
        let (nh, hd) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; t_len * c];
        {
            let wte = self.p(self.layout.wte);
            let wpe = self.p(self.layout.wpe);
            for (t, &tok) in tokens.iter().enumerate() {
                let xr = &mut x[t * c..(t + 1) * c];
                let e = &wte[tok as usize * c..(tok as usize + 1) * c];
                let pe = &wpe[t * c..(t + 1) * c];
                for i in 0..c {
                    xr[i] = e[i] + pe[i];
                }
            }
        }

        let mut caches = Vec::with_capacity(cfg.num_layers);
        for l in &self.layout.layers {
            let mut lc = LayerCache {
                ln1_xhat: vec![0.0; t_len * c],
                ln1_rstd: vec![0.0; t_len],
                h1: vec![0.0; t_len * c],
                qkv: vec![0.0; t_len * 3 * c],
                att: vec![0.0; nh * t_len * t_len],
                att_out: vec![0.0; t_len * c],
                ln2_xhat: vec![0.0; t_len * c],
                ln2_rstd: vec![0.0; t_len],
                h2: vec![0.0; t_len * c],
                fc: vec![0.0; t_len * f],
                act: vec![0.0; t_len * f],
            };
            layer_norm_fwd(
                &x,
                t_len,
                c,
                self.p(l.ln1_g),
                self.p(l.ln1_b),
                &mut lc.h1,
                &mut lc.ln1_xhat,
                &mut lc.ln1_rstd,
            );
            linear_fwd(&lc.h1, t_len, c, self.p(l.w_qkv), self.p(l.b_qkv), 3 * c, &mut lc.qkv);
            for h in 0..nh {
                for i in 0..t_len {
                    let q = &lc.qkv[i * 3 * c + h * hd..i * 3 * c + (h + 1) * hd];
                    let row = &mut lc.att[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k = &lc.qkv[j * 3 * c + c + h * hd..j * 3 * c + c + (h + 1) * hd];
                        *s = super::linalg::dot(q, k) * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut lc.att_out[i * c + h * hd..i * c + (h + 1) * hd];
                    for (j, &p) in row.iter().enumerate() {
                        let vv = &lc.qkv[j * 3 * c + 2 * c + h * hd..j * 3 * c + 2 * c + (h + 1) * hd];
                        super::linalg::axpy(out, p, vv);
                    }
                }
            }
            let mut proj = vec![0.0; t_len * c];
            linear_fwd(&lc.att_out, t_len, c, self.p(l.w_o), self.p(l.b_o), c, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            layer_norm_fwd(
                &x,
                t_len,
                c,
                self.p(l.ln2_g),
                self.p(l.ln2_b),
                &mut lc.h2,
                &mut lc.ln2_xhat,
                &mut lc.ln2_rstd,
            );
            linear_fwd(&lc.h2, t_len, c, self.p(l.w_fc), self.p(l.b_fc), f, &mut lc.fc);
            for (a, &z) in lc.act.iter_mut().zip(&lc.fc) {
                *a = gelu(z);
            }
            linear_fwd(&lc.act, t_len, f, self.p(l.w_proj), self.p(l.b_proj), c, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            caches.push(lc);
        }

        let mut hf = vec![0.0; t_len * c];
        let mut lnf_xhat = vec![0.0; t_len * c];
        let mut lnf_rstd = vec![0.0; t_len];
        layer_norm_fwd(
            &x,
            t_len,
            c,
            self.p(self.layout.lnf_g),
            self.p(self.layout.lnf_b),
            &mut hf,
            &mut lnf_xhat,
            &mut lnf_rstd,
        );
        let row_flags: Vec<bool> = rows.map_or_else(|| vec![true; t_len], <[bool]>::to_vec);
        let mut logits = Matrix::zeros(t_len, v);
        let w_head = self.p(self.layout.w_head);
        let b_head = self.p(self.layout.b_head);
        for t in 0..t_len {
            if row_flags[t] {
                linear_fwd(&hf[t * c..(t + 1) * c], 1, c, w_head, b_head, v, logits.row_mut(t));
            }
        }
        let cache = ForwardCache {
            tokens: tokens.to_vec(),
            layers: caches,
            x_final: x,
            lnf_xhat,
            lnf_rstd,
            hf,
            rows: row_flags,
        };
        Ok((logits, cache))
    }

    /// Accumulates parameter gradients for upstream logit gradients `dlogits`
    /// into `grads` (same layout as [`MicroLm::params`]).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer size");
        let cfg = &self.config;
        let t_len = cache.tokens.len();
        let (c, f, v) = (cfg.embed_dim, cfg.ff_dim(), cfg.vocab_size);
        let (nh, hd) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let _ = &cache.x_final;

        // Only rows with a nonzero upstream gradient contribute to the head.
        let active: Vec<bool> = (0..t_len)
            .map(|t| cache.rows[t] && dlogits.row(t).iter().any(|&g| g != 0.0))
            .collect();

        let mut dhf = vec![0.0; t_len * c];
        {
            let (gw, rest) = split_two(grads, self.layout.w_head, self.layout.b_head);
            linear_bwd(
                &cache.hf,
                &dlogits.data,
                t_len,
                c,
                self.p(self.layout.w_head),
                v,
                Some(&mut dhf),
                gw,
                rest,
                Some(&active),
            );
        }
        let mut dx = vec![0.0; t_len * c];
        {
            let (gg, gb) = split_two(grads, self.layout.lnf_g, self.layout.lnf_b);
            layer_norm_bwd(
                &dhf,
                t_len,
                c,
                self.p(self.layout.lnf_g),
                &cache.lnf_xhat,
                &cache.lnf_rstd,
                &mut dx,
                gg,
                gb,
            );
        }

        let mut tmp_c = vec![0.0; t_len * c];
        let mut d_act = vec![0.0; t_len * f];
        for (l, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            // MLP branch.
            {
                let (gw, gb) = split_two(grads, l.w_proj, l.b_proj);
                linear_bwd(&lc.act, &dx, t_len, f, self.p(l.w_proj), c, Some(&mut d_act), gw, gb, None);
            }
            for (d, &z) in d_act.iter_mut().zip(&lc.fc) {
                *d *= gelu_grad(z);
            }
            {
                let (gw, gb) = split_two(grads, l.w_fc, l.b_fc);
                linear_bwd(&lc.h2, &d_act, t_len, c, self.p(l.w_fc), f, Some(&mut tmp_c), gw, gb, None);
            }
            {
                let (gg, gb) = split_two(grads, l.ln2_g, l.ln2_b);
                layer_norm_bwd(&tmp_c, t_len, c, self.p(l.ln2_g), &lc.ln2_xhat, &lc.ln2_rstd, &mut dx, gg, gb);
            }
            // Attention branch.
            let mut d_att_out = vec![0.0; t_len * c];
            {
                let (gw, gb) = split_two(grads, l.w_o, l.b_o);
                linear_bwd(&lc.att_out, &dx, t_len, c, self.p(l.w_o), c, Some(&mut d_att_out), gw, gb, None);
            }
            let mut dqkv = vec![0.0; t_len * 3 * c];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                for i in 0..t_len {
                    let row = &lc.att[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                    let dout = &d_att_out[i * c + h * hd..i * c + (h + 1) * hd];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let vv = &lc.qkv[j * 3 * c + 2 * c + h * hd..j * 3 * c + 2 * c + (h + 1) * hd];
                        dp[j] = super::linalg::dot(dout, vv);
                        weighted += row[j] * dp[j];
                        let dv = &mut dqkv[j * 3 * c + 2 * c + h * hd..j * 3 * c + 2 * c + (h + 1) * hd];
                        super::linalg::axpy(dv, row[j], dout);
                    }
                    for j in 0..=i {
                        let ds = row[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let (qi, kj) = (i * 3 * c + h * hd, j * 3 * c + c + h * hd);
                        for e in 0..hd {
                            let kv = lc.qkv[kj + e];
                            let qv = lc.qkv[qi + e];
                            dqkv[qi + e] += ds * kv;
                            dqkv[kj + e] += ds * qv;
                        }
                    }
                }
            }
            {
                let (gw, gb) = split_two(grads, l.w_qkv, l.b_qkv);
                linear_bwd(&lc.h1, &dqkv, t_len, c, self.p(l.w_qkv), 3 * c, Some(&mut tmp_c), gw, gb, None);
            }
            {
                let (gg, gb) = split_two(grads, l.ln1_g, l.ln1_b);
                layer_norm_bwd(&tmp_c, t_len, c, self.p(l.ln1_g), &lc.ln1_xhat, &lc.ln1_rstd, &mut dx, gg, gb);
            }
        }

        let wte = self.layout.wte.start;
        let wpe = self.layout.wpe.start;
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let d = &dx[t * c..(t + 1) * c];
            super::linalg::axpy(&mut grads[wte + tok as usize * c..wte + (tok as usize + 1) * c], 1.0, d);
            super::linalg::axpy(&mut grads[wpe + t * c..wpe + (t + 1) * c], 1.0, d);
        }
    }

    /// Starts an incremental decoding session.
    pub fn start_decoding(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.config.num_layers],
            values: vec![Vec::new(); self.config.num_layers],
            pos: 0,
        }
    }

    /// Feeds one token into a decoding session and returns the next-token
    /// logits. Equivalent to the last row of [`MicroLm::forward`] on the
    /// whole prefix.
    pub fn decode_step(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if state.pos >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: state.pos + 1,
                context_len: cfg.context_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Shape(format!("token id {token} outside vocabulary")));
        }
        let (c, f, v) = (cfg.embed_dim, cfg.ff_dim(), cfg.vocab_size);
        let (nh, hd) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = state.pos;
        let wte = self.p(self.layout.wte);
        let wpe = self.p(self.layout.wpe);
        let mut x: Vec<f64> = (0..c)
            .map(|i| wte[token as usize * c + i] + wpe[pos * c + i])
            .collect();
        let mut h = vec![0.0; c];
        let mut xhat = vec![0.0; c];
        let mut rstd = [0.0];
        let mut qkv = vec![0.0; 3 * c];
        let mut att_out = vec![0.0; c];
        let mut proj = vec![0.0; c];
        let mut fc = vec![0.0; f];
        for (li, l) in self.layout.layers.iter().enumerate() {
            layer_norm_fwd(&x, 1, c, self.p(l.ln1_g), self.p(l.ln1_b), &mut h, &mut xhat, &mut rstd);
            linear_fwd(&h, 1, c, self.p(l.w_qkv), self.p(l.b_qkv), 3 * c, &mut qkv);
            state.keys[li].extend_from_slice(&qkv[c..2 * c]);
            state.values[li].extend_from_slice(&qkv[2 * c..3 * c]);
            let n = pos + 1;
            let mut scores = vec![0.0; n];
            att_out.fill(0.0);
            for hh in 0..nh {
                let q = &qkv[hh * hd..(hh + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &state.keys[li][j * c + hh * hd..j * c + (hh + 1) * hd];
                    *s = super::linalg::dot(q, k) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut att_out[hh * hd..(hh + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    let vv = &state.values[li][j * c + hh * hd..j * c + (hh + 1) * hd];
                    super::linalg::axpy(out, p, vv);
                }
            }
            linear_fwd(&att_out, 1, c, self.p(l.w_o), self.p(l.b_o), c, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            layer_norm_fwd(&x, 1, c, self.p(l.ln2_g), self.p(l.ln2_b), &mut h, &mut xhat, &mut rstd);
            linear_fwd(&h, 1, c, self.p(l.w_fc), self.p(l.b_fc), f, &mut fc);
            for z in fc.iter_mut() {
                *z = gelu(*z);
            }
            linear_fwd(&fc, 1, f, self.p(l.w_proj), self.p(l.b_proj), c, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
        }
        layer_norm_fwd(
            &x,
            1,
            c,
            self.p(self.layout.lnf_g),
            self.p(self.layout.lnf_b),
            &mut h,
            &mut xhat,
            &mut rstd,
        );
        let mut logits = vec![0.0; v];
        linear_fwd(&h, 1, c, self.p(self.layout.w_head), self.p(self.layout.b_head), v, &mut logits);
        state.pos += 1;
        Ok(logits)
    }
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl DecodeState {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

/// Borrows two disjoint spans of the gradient buffer mutably. `a` must
/// precede `b`.
fn split_two(buf: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.start + a.len <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a.range()], &mut right[..b.len])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            context_len: 16,
            init_seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.context_len = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.vocab_size = 256;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn single_token_shape() {
        let m = MicroLm::new(tiny()).unwrap();
        let out = m.forward(&[5]).unwrap();
        assert_eq!((out.rows, out.cols), (1, BASE_VOCAB));
    }

    #[test]
    fn overflow_rejected() {
        let m = MicroLm::new(tiny()).unwrap();
        let toks = vec![1; 17];
        assert!(matches!(m.forward(&toks), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn causal() {
        let m = MicroLm::new(tiny()).unwrap();
        let a: Vec<TokenId> = vec![10, 20, 30, 40, 50];
        let mut b = a.clone();
        b[4] = 99;
        let la = m.forward(&a).unwrap();
        let lb = m.forward(&b).unwrap();
        for t in 0..4 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn deterministic_logits() {
        let toks: Vec<TokenId> = vec![1, 2, 3, 257, 4];
        let a = MicroLm::new(tiny()).unwrap().forward(&toks).unwrap();
        let b = MicroLm::new(tiny()).unwrap().forward(&toks).unwrap();
        let bits = |m: &Matrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn incremental_matches_full() {
        let m = MicroLm::new(tiny()).unwrap();
        let toks: Vec<TokenId> = vec![72, 105, 258, 33, 7, 260, 1];
        let full = m.forward(&toks).unwrap();
        let mut st = m.start_decoding();
        for (t, &tok) in toks.iter().enumerate() {
            let row = m.decode_step(&mut st, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        use crate::losses::{masked_nll, masked_nll_grad};
        use rand::Rng;
        let m = MicroLm::new(tiny()).unwrap();
        let inputs: Vec<TokenId> = vec![258, 104, 105, 259, 121, 111, 33, 260];
        let targets: Vec<TokenId> = vec![104, 105, 259, 121, 111, 33, 260, 258];
        let mask = vec![false, false, false, true, true, true, false, false];
        let (logits, cache) = m.forward_cached(&inputs, Some(&mask)).unwrap();
        let (_, dl) = masked_nll_grad(&logits, &targets, &mask, 1.0).unwrap();
        let mut grads = vec![0.0; m.num_params()];
        m.backward(&cache, &dl, &mut grads);
        let loss = |p: &[f64]| {
            let mm = MicroLm::from_params(tiny(), p.to_vec()).unwrap();
            masked_nll(&mm.forward(&inputs).unwrap(), &targets, &mask).unwrap().total
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 20 {
            let i = rng.gen_range(0..m.num_params());
            if grads[i].abs() < 1e-6 {
                continue;
            }
            let h = 1e-5;
            let mut p = m.params().to_vec();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs());
            assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd}", grads[i]);
            checked += 1;
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = MicroLm::new(tiny()).unwrap();
        m.zero_output_head();
        let out = m.forward(&[1, 2, 3]).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}
