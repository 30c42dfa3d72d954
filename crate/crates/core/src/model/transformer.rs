//! A small pre-norm causal transformer in double precision, with
//! hand-written backpropagation.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{self, EmbeddingTable};
use crate::error::{Error, Result};
use crate::seed;
use crate::text::{TokenId, Tokenizer};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward sublayer.
    pub d_ff: usize,
    pub max_positions: usize,
    /// Share the output projection with the token embeddings.
    pub tie_weights: bool,
    /// Standard deviation of the Gaussian weight init.
    pub init_std: f64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions: 512,
            tie_weights: true,
            init_std: 0.02,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation("model", field, msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return bad("d_model", "dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads", "must divide d_model");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

const BLOCK_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl Block {
    fn zeros(d: usize, f: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            ln1_g: v(d),
            ln1_b: v(d),
            wq: m(d, d),
            bq: v(d),
            wk: m(d, d),
            bk: v(d),
            wv: m(d, d),
            bv: v(d),
            wo: m(d, d),
            bo: v(d),
            ln2_g: v(d),
            ln2_b: v(d),
            w1: m(d, f),
            b1: v(f),
            w2: m(f, d),
            b2: v(d),
        }
    }

    fn views(&self) -> [(&[f64], Vec<usize>); 16] {
        fn a1(a: &Array1<f64>) -> (&[f64], Vec<usize>) {
            (a.as_slice().expect("contiguous"), vec![a.len()])
        }
        fn a2(a: &Array2<f64>) -> (&[f64], Vec<usize>) {
            (
                a.as_slice().expect("contiguous"),
                vec![a.nrows(), a.ncols()],
            )
        }
        [
            a1(&self.ln1_g),
            a1(&self.ln1_b),
            a2(&self.wq),
            a1(&self.bq),
            a2(&self.wk),
            a1(&self.bk),
            a2(&self.wv),
            a1(&self.bv),
            a2(&self.wo),
            a1(&self.bo),
            a1(&self.ln2_g),
            a1(&self.ln2_b),
            a2(&self.w1),
            a1(&self.b1),
            a2(&self.w2),
            a1(&self.b2),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 16] {
        fn m<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        [
            m(&mut self.ln1_g),
            m(&mut self.ln1_b),
            m(&mut self.wq),
            m(&mut self.bq),
            m(&mut self.wk),
            m(&mut self.bk),
            m(&mut self.wv),
            m(&mut self.bv),
            m(&mut self.wo),
            m(&mut self.bo),
            m(&mut self.ln2_g),
            m(&mut self.ln2_b),
            m(&mut self.w1),
            m(&mut self.b1),
            m(&mut self.w2),
            m(&mut self.b2),
        ]
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// Untied output projection (vocab × d); `None` when tied.
    pub out: Option<Array2<f64>>,
}

impl Params {
    pub fn zeros(cfg: &ToyLmConfig, vocab: usize) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: Array2::zeros((vocab, d)),
            pos_emb: Array2::zeros((cfg.max_positions, d)),
            blocks: (0..cfg.n_layers)
                .map(|_| Block::zeros(d, cfg.d_ff))
                .collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            out: (!cfg.tie_weights).then(|| Array2::zeros((vocab, d))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.slices_mut() {
            t.fill(0.0);
        }
        z
    }

    /// (name, shape, values) for every tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let a2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        let mut out = vec![
            (
                "tok_emb".to_string(),
                a2(&self.tok_emb),
                self.tok_emb.as_slice().expect("contiguous"),
            ),
            (
                "pos_emb".to_string(),
                a2(&self.pos_emb),
                self.pos_emb.as_slice().expect("contiguous"),
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, (vals, shape)) in BLOCK_TENSORS.iter().zip(b.views()) {
                out.push((format!("blocks.{i}.{name}"), shape, vals));
            }
        }
        out.push((
            "lnf_g".into(),
            vec![self.lnf_g.len()],
            self.lnf_g.as_slice().expect("contiguous"),
        ));
        out.push((
            "lnf_b".into(),
            vec![self.lnf_b.len()],
            self.lnf_b.as_slice().expect("contiguous"),
        ));
        if let Some(o) = &self.out {
            out.push(("out".into(), a2(o), o.as_slice().expect("contiguous")));
        }
        out
    }

    /// Mutable views in the same order as [`named`](Self::named).
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().expect("contiguous"),
            self.pos_emb.as_slice_mut().expect("contiguous"),
        ];
        for b in &mut self.blocks {
            out.extend(b.slices_mut());
        }
        out.push(self.lnf_g.as_slice_mut().expect("contiguous"));
        out.push(self.lnf_b.as_slice_mut().expect("contiguous"));
        if let Some(o) = &mut self.out {
            out.push(o.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Params) {
        let src: Vec<&[f64]> = other.named().into_iter().map(|(_, _, v)| v).collect();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slices_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates into dg, db.
fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let inner = dxhat
        - &mean_dxhat.insert_axis(Axis(1))
        - &cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1));
    inner * cache.rstd.view().insert_axis(Axis(1))
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_bias(mut x: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x += b;
    x
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
}

struct Trace {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hidden: Array2<f64>,
}

/// The toy decoder-only LM: configuration, vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ToyLmConfig,
    vocab: Vec<String>,
    pub params: Params,
}

impl ToyLm {
    /// Gaussian-initialized weights, unit LayerNorm gains, zero biases.
    pub fn new(config: ToyLmConfig, vocab: Vec<String>, init_seed: u64) -> Result<Self> {
        config.validate()?;
        Tokenizer::from_tokens(vocab.clone())?;
        let mut params = Params::zeros(&config, vocab.len());
        let mut rng = seed::rng_from(init_seed, seed::tag_of("toy-lm-init"));
        let normal = Normal::new(0.0, config.init_std).expect("valid std");
        let mut fill = |a: &mut [f64]| a.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        fill(params.tok_emb.as_slice_mut().expect("contiguous"));
        fill(params.pos_emb.as_slice_mut().expect("contiguous"));
        for b in &mut params.blocks {
            for w in [
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2,
            ] {
                fill(w.as_slice_mut().expect("contiguous"));
            }
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
        }
        params.lnf_g.fill(1.0);
        if let Some(o) = &mut params.out {
            fill(o.as_slice_mut().expect("contiguous"));
        }
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: ToyLmConfig, vocab: Vec<String>, params: Params) -> Result<Self> {
        config.validate()?;
        let expect = Params::zeros(&config, vocab.len());
        let shapes = |p: &Params| {
            p.named()
                .into_iter()
                .map(|(n, s, _)| (n, s))
                .collect::<Vec<_>>()
        };
        if shapes(&expect) != shapes(&params) {
            return Err(Error::Format(
                "parameter shapes do not match the config".into(),
            ));
        }
        if params
            .named()
            .iter()
            .any(|(_, _, v)| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Tokenizer::from_tokens(vocab.clone())?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_tokens(self.vocab.clone()).expect("model vocabulary is valid")
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable::new(self.vocab.clone(), self.params.tok_emb.clone())
            .expect("model embeddings are valid")
    }

    /// Appends tokens with the given input embeddings. An untied output
    /// projection gets zero rows for them.
    pub fn extend_vocab(
        &self,
        tokens: &[String],
        vectors: &[Array1<f64>],
    ) -> Result<(ToyLm, Vec<TokenId>)> {
        let (table, ids) = embedding::extend_vocab(&self.embedding_table(), tokens, vectors)?;
        let mut params = self.params.clone();
        params.tok_emb = table.rows().clone();
        if let Some(o) = &mut params.out {
            let mut grown = Array2::zeros((table.vocab_size(), o.ncols()));
            grown.slice_mut(s![..o.nrows(), ..]).assign(o);
            *o = grown;
        }
        Ok((
            ToyLm {
                config: self.config.clone(),
                vocab: table.tokens().to_vec(),
                params,
            },
            ids,
        ))
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Assembly("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(Error::Vocab(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(())
    }

    fn output_weights(&self) -> &Array2<f64> {
        self.params.out.as_ref().unwrap_or(&self.params.tok_emb)
    }

    fn trace(&self, tokens: &[TokenId]) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let p = &self.params;
        let t_len = tokens.len();
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((t_len, d));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &p.tok_emb.row(tok as usize);
            row += &p.pos_emb.row(t);
        }

        let mut caches = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let (a, ln1) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
            let q = add_bias(a.dot(&b.wq), &b.bq);
            let k = add_bias(a.dot(&b.wk), &b.bk);
            let v = add_bias(a.dot(&b.wv), &b.bv);
            let mut o = Array2::zeros((t_len, d));
            let mut att = Vec::with_capacity(h);
            for head in 0..h {
                let cols = s![.., head * dh..(head + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for i in 0..t_len {
                    let mut row = scores.row_mut(i);
                    let max = row
                        .slice(s![..=i])
                        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut sum = 0.0;
                    for j in 0..t_len {
                        if j > i {
                            row[j] = 0.0;
                        } else {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        }
                    }
                    row /= sum;
                }
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                att.push(scores);
            }
            x = x + add_bias(o.dot(&b.wo), &b.bo);
            let (m, ln2) = layer_norm(&x, &b.ln2_g, &b.ln2_b);
            let u = add_bias(m.dot(&b.w1), &b.b1);
            let z = u.mapv(gelu);
            x = x + add_bias(z.dot(&b.w2), &b.b2);
            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                att,
                o,
                ln2,
                m,
                u,
                z,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        Ok(Trace {
            tokens: tokens.to_vec(),
            blocks: caches,
            lnf,
            hidden,
        })
    }

    /// Log-probability rows: row `t` is the next-token distribution after
    /// consuming `tokens[..=t]`.
    pub fn forward_logprobs(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        let tr = self.trace(tokens)?;
        Ok(log_softmax_rows(&tr.hidden.dot(&self.output_weights().t())))
    }

    /// Next-token log-probabilities after the whole sequence.
    pub fn next_logprobs(&self, tokens: &[TokenId]) -> Result<Array1<f64>> {
        let tr = self.trace(tokens)?;
        let last = tr.hidden.slice(s![tr.hidden.nrows() - 1.., ..]).to_owned();
        let logits = last.dot(&self.output_weights().t());
        Ok(log_softmax_rows(&logits).row(0).to_owned())
    }

    /// Target positions of a stream mask: indices `t ≥ 1` with `mask[t]`.
    fn targets(mask: &[bool]) -> Result<Vec<usize>> {
        if mask.first() == Some(&true) {
            return Err(Error::Assembly(
                "the first stream token cannot be a target".into(),
            ));
        }
        let targets: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        if targets.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(targets)
    }

    /// Summed masked NLL and the number of targets.
    pub fn masked_nll(&self, tokens: &[TokenId], mask: &[bool]) -> Result<(f64, usize)> {
        if tokens.len() != mask.len() {
            return Err(Error::Assembly(
                "mask length differs from token count".into(),
            ));
        }
        let targets = Self::targets(mask)?;
        let tr = self.trace(tokens)?;
        let rows: Vec<usize> = targets.iter().map(|t| t - 1).collect();
        let hid = tr.hidden.select(Axis(0), &rows);
        let lp = log_softmax_rows(&hid.dot(&self.output_weights().t()));
        let nll = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -lp[[r, tokens[t] as usize]])
            .sum();
        Ok((nll, targets.len()))
    }

    /// Gradient of the summed masked NLL with respect to the full logits
    /// matrix. Rows that do not predict a target are exactly zero.
    pub fn logit_gradients(&self, tokens: &[TokenId], mask: &[bool]) -> Result<Array2<f64>> {
        let targets = Self::targets(mask)?;
        let lp = self.forward_logprobs(tokens)?;
        let mut g = Array2::zeros(lp.raw_dim());
        for &t in &targets {
            let mut row = g.row_mut(t - 1);
            row.assign(&lp.row(t - 1).mapv(f64::exp));
            row[tokens[t] as usize] -= 1.0;
        }
        Ok(g)
    }

    /// Summed masked NLL, target count, and the gradient of the summed NLL
    /// multiplied by `scale`.
    pub fn loss_and_grad(
        &self,
        tokens: &[TokenId],
        mask: &[bool],
        scale: f64,
    ) -> Result<(f64, usize, Params)> {
        if tokens.len() != mask.len() {
            return Err(Error::Assembly(
                "mask length differs from token count".into(),
            ));
        }
        let targets = Self::targets(mask)?;
        let tr = self.trace(tokens)?;
        let p = &self.params;
        let mut grads = p.zeros_like();
        let t_len = tokens.len();
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let att_scale = 1.0 / (dh as f64).sqrt();

        // Output layer, only on rows that predict a target.
        let rows: Vec<usize> = targets.iter().map(|t| t - 1).collect();
        let hid = tr.hidden.select(Axis(0), &rows);
        let w_out = self.output_weights();
        let lp = log_softmax_rows(&hid.dot(&w_out.t()));
        let mut nll = 0.0;
        let mut dlogits = lp.mapv(f64::exp);
        for (r, &t) in targets.iter().enumerate() {
            let y = tokens[t] as usize;
            nll -= lp[[r, y]];
            dlogits[[r, y]] -= 1.0;
        }
        dlogits *= scale;
        let dw_out = dlogits.t().dot(&hid);
        match &mut grads.out {
            Some(o) => *o += &dw_out,
            None => grads.tok_emb += &dw_out,
        }
        let mut dhidden = Array2::zeros((t_len, d));
        let dh_rows = dlogits.dot(w_out);
        for (r, &row) in rows.iter().enumerate() {
            dhidden.row_mut(row).assign(&dh_rows.row(r));
        }

        let mut dx = layer_norm_back(
            &dhidden,
            &tr.lnf,
            &p.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );

        for (li, (b, c)) in p.blocks.iter().zip(&tr.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[li];
            // Feed-forward sublayer.
            gb.w2 += &c.z.t().dot(&dx);
            gb.b2 += &dx.sum_axis(Axis(0));
            let dz = dx.dot(&b.w2.t());
            let du = dz * &c.u.mapv(gelu_grad);
            gb.w1 += &c.m.t().dot(&du);
            gb.b1 += &du.sum_axis(Axis(0));
            let dm = du.dot(&b.w1.t());
            dx = dx + layer_norm_back(&dm, &c.ln2, &b.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);

            // Attention sublayer.
            gb.wo += &c.o.t().dot(&dx);
            gb.bo += &dx.sum_axis(Axis(0));
            let d_o = dx.dot(&b.wo.t());
            let mut dq = Array2::zeros((t_len, d));
            let mut dk = Array2::zeros((t_len, d));
            let mut dv = Array2::zeros((t_len, d));
            for head in 0..h {
                let cols = s![.., head * dh..(head + 1) * dh];
                let a = &c.att[head];
                let d_oh = d_o.slice(cols);
                let da = d_oh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
                let row_dot = (&da * a).sum_axis(Axis(1));
                let ds = (da - &row_dot.insert_axis(Axis(1))) * a * att_scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            gb.wq += &c.a.t().dot(&dq);
            gb.bq += &dq.sum_axis(Axis(0));
            gb.wk += &c.a.t().dot(&dk);
            gb.bk += &dk.sum_axis(Axis(0));
            gb.wv += &c.a.t().dot(&dv);
            gb.bv += &dv.sum_axis(Axis(0));
            let da_in = dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
            dx = dx + layer_norm_back(&da_in, &c.ln1, &b.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
        }

        for (t, &tok) in tr.tokens.iter().enumerate() {
            let g = dx.row(t);
            let mut e = grads.tok_emb.row_mut(tok as usize);
            e += &g;
            let mut pe = grads.pos_emb.row_mut(t);
            pe += &g;
        }
        Ok((nll, targets.len(), grads))
    }
}

/// A uniformly random token sequence, for tests and benches.
pub fn random_tokens<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.random_range(0..vocab as TokenId))
        .collect()
}
